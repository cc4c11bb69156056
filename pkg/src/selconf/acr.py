"""Adaptive confidence refinement: MSP fused with a learned residual score.

Two sigmoid heads read the same input (fused features and/or logits):

* the residual risk head produces ``c_r``, a direct correctness estimate;
* the gating head produces ``alpha``, the per-input weight on MSP.

The refined confidence is ``alpha * c_m + (1 - alpha) * c_r`` with
``c_m = msp(logits)``.  Both heads are trained jointly by BCE on the fused
score against the correctness bit, the backbone logits being frozen.

Ablation modes
--------------
``full``
    both heads, as above.
``no_rrh``
    calibration-only variant: ``alpha * c_m + (1 - alpha) * 0.5``.
``no_cgh``
    selector-only variant: ``alpha`` fixed at 0, so the score is ``c_r``.
``fixed``
    ``fixed_alpha * c_m + (1 - fixed_alpha) * c_r`` with only the residual
    head trained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .confidence import msp
from .dataset import ConfidenceTable, EvalSet, ScoredRecord
from .errors import ValidationError
from .metrics import aurc
from .neural import (
    AdamState,
    MlpParams,
    TrainConfig,
    TrainHistory,
    adam_step,
    bce_grad,
    bce_loss,
    init_mlp,
    minibatches,
    mlp_backward,
    mlp_forward,
    sample_masks,
)

FEATURE_BLOCKS = ("fused_features", "logits")
MODES = ("full", "no_rrh", "no_cgh", "fixed")
NO_RRH_ANCHOR = 0.5


@dataclass(frozen=True, eq=False)
class AcrHeads:
    rrh: MlpParams
    cgh: MlpParams
    input_spec: tuple[str, ...] = FEATURE_BLOCKS
    mode: str = "full"
    fixed_alpha: float | None = None
    metadata: dict = field(default_factory=dict)
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        if (self.input_mean is None) != (self.input_scale is None):
            raise ValidationError("input_mean and input_scale go together")
        if self.input_mean is not None:
            mean = np.array(self.input_mean, dtype=np.float64).reshape(-1)
            scale = np.array(self.input_scale, dtype=np.float64).reshape(-1)
            if mean.shape != (self.rrh.d_in,) or scale.shape != mean.shape or np.any(scale <= 0):
                raise ValidationError("input normalisation must match d_in with positive scales")
            object.__setattr__(self, "input_mean", mean)
            object.__setattr__(self, "input_scale", scale)
        spec = tuple(self.input_spec)
        if not spec or any(b not in FEATURE_BLOCKS for b in spec) or len(set(spec)) != len(spec):
            raise ValidationError(f"input_spec must be a non-empty subset of {FEATURE_BLOCKS}")
        object.__setattr__(self, "input_spec", spec)
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.mode == "fixed" and not (self.fixed_alpha is not None and 0.0 <= self.fixed_alpha <= 1.0):
            raise ValidationError("mode 'fixed' needs fixed_alpha in [0, 1]")
        if self.rrh.d_in != self.cgh.d_in or self.rrh.d_hidden != self.cgh.d_hidden:
            raise ValidationError("both heads must share d_in and d_hidden")

    @property
    def d_in(self) -> int:
        return self.rrh.d_in

    def normalise(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ValidationError(f"head input width {x.shape[-1]} != d_in {self.d_in}")
        if self.input_mean is None:
            return x
        return (x - self.input_mean) / self.input_scale

    def replace(self, **changes) -> "AcrHeads":
        fields = dict(
            rrh=self.rrh, cgh=self.cgh, input_spec=self.input_spec, mode=self.mode,
            fixed_alpha=self.fixed_alpha, metadata=self.metadata,
            input_mean=self.input_mean, input_scale=self.input_scale,
        )
        fields.update(changes)
        return AcrHeads(**fields)

    def equals(self, other: "AcrHeads") -> bool:
        return (
            self.input_spec == other.input_spec
            and self.mode == other.mode
            and self.fixed_alpha == other.fixed_alpha
            and self.rrh.equals(other.rrh)
            and self.cgh.equals(other.cgh)
            and _same(self.input_mean, other.input_mean)
            and _same(self.input_scale, other.input_scale)
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "rrh": self.rrh.to_dict(),
                "cgh": self.cgh.to_dict(),
                "input_spec": list(self.input_spec),
                "mode": self.mode,
                "fixed_alpha": self.fixed_alpha,
                "input_mean": None if self.input_mean is None else self.input_mean.tolist(),
                "input_scale": None if self.input_scale is None else self.input_scale.tolist(),
                "metadata": self.metadata,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "AcrHeads":
        obj = json.loads(text)
        try:
            return cls(
                MlpParams.from_dict(obj["rrh"]),
                MlpParams.from_dict(obj["cgh"]),
                tuple(obj["input_spec"]),
                obj.get("mode", "full"),
                obj.get("fixed_alpha"),
                obj.get("metadata", {}),
                obj.get("input_mean"),
                obj.get("input_scale"),
            )
        except KeyError as exc:
            raise ValidationError(f"heads file lacks {exc}") from None


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def input_width(input_spec: Sequence[str], k_classes: int, feat_dim: int) -> int:
    sizes = {"fused_features": feat_dim, "logits": k_classes}
    return sum(sizes[b] for b in input_spec)


def head_inputs(source: EvalSet | ScoredRecord, input_spec: Sequence[str]) -> np.ndarray:
    """Concatenate the selected blocks; rows are records for an EvalSet."""
    if isinstance(source, ScoredRecord):
        blocks = {"fused_features": source.features, "logits": source.logits}
        return np.concatenate([blocks[b] for b in input_spec])
    blocks = {"fused_features": source.features, "logits": source.logits}
    return np.concatenate([blocks[b] for b in input_spec], axis=1)


def init_heads(
    d_in: int,
    config: TrainConfig,
    input_spec: Sequence[str] = FEATURE_BLOCKS,
    mode: str = "full",
    fixed_alpha: float | None = None,
) -> AcrHeads:
    rng = np.random.default_rng([config.seed, 0xACE])
    rrh = init_mlp(d_in, d_in, config.depth, rng)
    cgh = init_mlp(d_in, d_in, config.depth, rng)
    return AcrHeads(rrh, cgh, tuple(input_spec), mode, fixed_alpha)


def _fuse(heads: AcrHeads, c_m, c_r, alpha):
    if heads.mode == "full":
        return alpha * c_m + (1.0 - alpha) * c_r, alpha
    if heads.mode == "no_rrh":
        return alpha * c_m + (1.0 - alpha) * NO_RRH_ANCHOR, alpha
    if heads.mode == "no_cgh":
        alpha = np.zeros_like(c_r)
        return c_r, alpha
    alpha = np.full_like(c_r, heads.fixed_alpha)
    return alpha * c_m + (1.0 - alpha) * c_r, alpha


def acr_outputs(heads: AcrHeads, evalset: EvalSet) -> dict[str, np.ndarray]:
    """Eval-mode ``c_acr``, ``alpha``, ``c_r`` and ``c_m`` for every record."""
    x = heads.normalise(head_inputs(evalset, heads.input_spec))
    c_m = msp(evalset.logits)
    c_r, _ = mlp_forward(heads.rrh, x)
    alpha, _ = mlp_forward(heads.cgh, x)
    c_acr, alpha = _fuse(heads, c_m, c_r, alpha)
    return {"c_acr": np.clip(c_acr, 0.0, 1.0), "alpha": alpha, "c_r": c_r, "c_m": c_m}


def acr_confidence(heads: AcrHeads, record: ScoredRecord) -> tuple[float, float, float, float]:
    """Return ``(c_acr, alpha, c_r, c_m)`` for one record."""
    x = heads.normalise(head_inputs(record, heads.input_spec))
    c_m = msp(record.logits)
    c_r, _ = mlp_forward(heads.rrh, x)
    alpha, _ = mlp_forward(heads.cgh, x)
    c_acr, alpha = _fuse(heads, np.float64(c_m), np.float64(c_r), np.float64(alpha))
    return float(c_acr), float(alpha), float(c_r), float(c_m)


def acr_table(heads: AcrHeads, evalset: EvalSet, method_name: str = "acr") -> ConfidenceTable:
    return ConfidenceTable.from_scores(evalset, acr_outputs(heads, evalset)["c_acr"], method_name)


def rrh_table(heads: AcrHeads, evalset: EvalSet) -> ConfidenceTable:
    return ConfidenceTable.from_scores(evalset, acr_outputs(heads, evalset)["c_r"], "rrh")


def acr_train(
    train: EvalSet,
    val: EvalSet | None,
    config: TrainConfig = TrainConfig(),
    input_spec: Sequence[str] = FEATURE_BLOCKS,
    mode: str = "full",
    fixed_alpha: float | None = None,
    standardize: bool = True,
) -> tuple[AcrHeads, TrainHistory]:
    """Jointly fit both heads by BCE on the fused confidence.

    ``train`` plays the Val-f role and ``val`` the Val-g role; with
    ``config.early_stop_metric == "val_aurc"`` the epoch whose fused score has
    the lowest AURC on ``val`` is kept.  With ``standardize`` the head inputs
    are z-scored using statistics of ``train``, stored on the heads.
    """
    for es in (train, val):
        if es is not None and (es.k_classes != train.k_classes or es.feat_dim != train.feat_dim):
            raise ValidationError("train and val sets differ in k_classes/feat_dim")
    d_in = input_width(input_spec, train.k_classes, train.feat_dim)
    raw = head_inputs(train, input_spec)
    norm = {}
    if standardize:
        scale = raw.std(axis=0)
        norm = dict(input_mean=raw.mean(axis=0), input_scale=np.where(scale > 1e-12, scale, 1.0))
    heads = init_heads(d_in, config, input_spec, mode, fixed_alpha).replace(
        metadata={
            "config": config.to_dict(),
            "seed": config.seed,
            "train_n": len(train),
            "val_n": len(val) if val is not None else 0,
        },
        **norm,
    )
    history = TrainHistory()
    if config.epochs == 0:
        return heads, history

    x = heads.normalise(raw)
    c_m = msp(train.logits)
    c = train.correct.astype(np.float64)
    rng = np.random.default_rng([config.seed, 0xB47C4])
    rrh, cgh = heads.rrh, heads.cgh
    st_r, st_g = AdamState.zeros_like(rrh), AdamState.zeros_like(cgh)
    train_rrh = mode != "no_rrh"
    train_cgh = mode in ("full", "no_rrh")
    track = val is not None and config.early_stop_metric == "val_aurc"
    best = (np.inf, rrh, cgh)
    p = config.dropout_p

    for epoch in range(config.epochs):
        total = 0.0
        step_cfg = config.for_epoch(epoch)
        for idx in minibatches(c.size, config.batch_size, rng):
            xb, cmb, cb = x[idx], c_m[idx], c[idx]
            r_out, r_cache = mlp_forward(rrh, xb, sample_masks(rrh, idx.size, p, rng), p)
            a_out, a_cache = mlp_forward(cgh, xb, sample_masks(cgh, idx.size, p, rng), p)
            fused, alpha = _fuse(heads, cmb, r_out, a_out)
            total += float(np.sum(bce_loss(fused, cb)))
            d_fused = bce_grad(fused, cb) / idx.size
            if train_rrh:
                g_r = mlp_backward(rrh, r_cache, d_fused * (1.0 - alpha))
                rrh, st_r = adam_step(rrh, g_r, st_r, step_cfg)
            if train_cgh:
                other = r_out if mode == "full" else NO_RRH_ANCHOR
                g_g = mlp_backward(cgh, a_cache, d_fused * (cmb - other))
                cgh, st_g = adam_step(cgh, g_g, st_g, step_cfg)
        history.losses.append(total / c.size)
        if track:
            a = aurc(acr_table(heads.replace(rrh=rrh, cgh=cgh), val))
            history.val_aurc.append(a)
            if a < best[0]:
                best = (a, rrh, cgh)
                history.best_epoch = epoch
    if track:
        rrh, cgh = best[1], best[2]
    else:
        history.best_epoch = config.epochs - 1
    meta = dict(heads.metadata, history=history.to_dict())
    return heads.replace(rrh=rrh, cgh=cgh, metadata=meta), history


@dataclass(frozen=True)
class AlphaStats:
    mean: float
    variance: float
    frac_below: float
    frac_above: float
    histogram: tuple[int, ...]
    bin_edges: tuple[float, ...]


def alpha_stats(heads: AcrHeads, evalset: EvalSet, bins: int = 20) -> AlphaStats:
    """Descriptive statistics of the learned gate over a set."""
    if len(evalset) == 0:
        raise ValidationError("alpha_stats needs a non-empty set")
    alpha = acr_outputs(heads, evalset)["alpha"]
    hist, edges = np.histogram(alpha, bins=bins, range=(0.0, 1.0))
    return AlphaStats(
        mean=float(np.mean(alpha)),
        variance=float(np.var(alpha)),
        frac_below=float(np.mean(alpha < 0.01)),
        frac_above=float(np.mean(alpha > 0.99)),
        histogram=tuple(int(h) for h in hist),
        bin_edges=tuple(float(e) for e in edges),
    )


def fusion_alpha_gradient(c_m, c_r, alpha, correct):
    """dBCE/dalpha at the fusion node and the closed-form identity.

    Returns ``(chain_rule, identity)`` where the chain rule multiplies the BCE
    derivative in the fused score by ``c_m - c_r`` and the identity is
    ``(c_m - c_r) * (c_acr - c) / (c_acr * (1 - c_acr))``.
    """
    c_m, c_r, alpha, c = (np.asarray(v, dtype=np.float64) for v in (c_m, c_r, alpha, correct))
    fused = alpha * c_m + (1.0 - alpha) * c_r
    dl_dfused = -c / fused + (1.0 - c) / (1.0 - fused)
    chain = dl_dfused * (c_m - c_r)
    identity = (c_m - c_r) * (fused - c) / (fused * (1.0 - fused))
    return chain, identity


def bce_alpha_gradient_check(heads: AcrHeads, batch: EvalSet) -> float:
    """Largest gap between the chain-rule gradient and the identity on a batch."""
    out = acr_outputs(heads, batch)
    chain, identity = fusion_alpha_gradient(out["c_m"], out["c_r"], out["alpha"], batch.correct)
    if not np.all(np.sign(chain) == np.sign(identity)):
        return float("inf")
    return float(np.max(np.abs(chain - identity)))
