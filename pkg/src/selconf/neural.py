"""Small numpy perceptrons with sigmoid output, trained by BCE and Adam.

The network is a stack of ``depth - 1`` hidden layers (Linear + ReLU +
inverted dropout) followed by Linear -> sigmoid.  ``depth=3`` is the
two-hidden-layer head used for confidence refinement; ``depth=1`` is plain
logistic regression.  Weight matrices are stored ``(fan_out, fan_in)``.

Forward and backward accept a single input vector or a batch ``(n, d_in)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ValidationError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 8e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    dropout_p: float = 0.1
    seed: int = 0
    early_stop_metric: str = "val_aurc"
    depth: int = 3
    lr_step_size: int = 0
    lr_gamma: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValidationError("learning_rate and adam_eps must be positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if self.early_stop_metric not in ("none", "val_aurc"):
            raise ValidationError(f"unknown early_stop_metric {self.early_stop_metric!r}")
        if not 1 <= self.depth <= 4:
            raise ValidationError("depth must be between 1 and 4")
        if self.lr_step_size < 0 or not 0.0 < self.lr_gamma <= 1.0:
            raise ValidationError("lr_step_size must be >= 0 and lr_gamma in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Step-decayed learning rate; ``lr_step_size == 0`` keeps it constant."""
        if not self.lr_step_size:
            return self.learning_rate
        return self.learning_rate * self.lr_gamma ** (epoch // self.lr_step_size)

    def for_epoch(self, epoch: int) -> "TrainConfig":
        if not self.lr_step_size:
            return self
        return replace(self, learning_rate=self.lr_at(epoch))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MlpParams:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases)
        if not ws or len(ws) != len(bs):
            raise ValidationError("MlpParams needs one bias per weight matrix")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or w.shape[0] != b.size:
                raise ValidationError(f"layer {i + 1}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise ValidationError(f"layer {i + 1}: input width does not match layer {i}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"layer {i + 1}: non-finite parameter")
        if ws[-1].shape[0] != 1:
            raise ValidationError("the output layer must have a single unit")
        for a in ws + bs:
            a.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d_hidden(self) -> int:
        return self.weights[0].shape[0] if self.depth > 1 else 0

    def arrays(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        k = self.depth
        return MlpParams(tuple(arrays[:k]), tuple(arrays[k:]))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> "MlpParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos : pos + a.size]).reshape(a.shape))
            pos += a.size
        return self.with_arrays(out)

    def equals(self, other: "MlpParams") -> bool:
        return self.depth == other.depth and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    def to_dict(self) -> dict:
        return {
            "shapes": [list(w.shape) for w in self.weights],
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MlpParams":
        ws = [np.array(flat, dtype=np.float64).reshape(shape) for flat, shape in zip(obj["weights"], obj["shapes"])]
        return cls(tuple(ws), tuple(np.array(b, dtype=np.float64) for b in obj["biases"]))


def init_mlp(d_in: int, d_hidden: int, depth: int, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    widths = [d_in] + [d_hidden] * (depth - 1) + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    params: MlpParams
    x: np.ndarray
    pre: list[np.ndarray]
    acts: list[np.ndarray]
    masks: list[np.ndarray] | None
    keep_scale: float
    out: np.ndarray
    single: bool


def sample_masks(params: MlpParams, n: int, p: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Bernoulli keep-masks (keep prob ``1 - p``), one ``(n, d_hidden)`` array per hidden layer."""
    return [(rng.random((n, w.shape[0])) >= p).astype(np.float64) for w in params.weights[:-1]]


def mlp_forward(params: MlpParams, x, masks=None, dropout_p: float = 0.0):
    """Return ``(output, cache)``; output is in (0, 1).

    ``masks`` switches on training mode: hidden units are multiplied by their
    0/1 mask and rescaled by ``1 / (1 - dropout_p)``.  With ``dropout_p == 0``
    masks are ignored.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != params.d_in:
        raise ValidationError(f"input width {h.shape[-1]} != d_in {params.d_in}")
    use_masks = masks is not None and dropout_p > 0.0
    if use_masks and len(masks) != params.depth - 1:
        raise ValidationError("need one dropout mask per hidden layer")
    scale = 1.0 / (1.0 - dropout_p) if use_masks else 1.0
    pre, acts = [], [h]
    for i, (w, b) in enumerate(zip(params.weights[:-1], params.biases[:-1])):
        a = h @ w.T + b
        pre.append(a)
        h = relu(a)
        if use_masks:
            m = np.asarray(masks[i], dtype=np.float64)
            if m.ndim == 1:
                m = m[None, :]
            h = h * m * scale
        acts.append(h)
    z = h @ params.weights[-1].T + params.biases[-1]
    pre.append(z)
    out = sigmoid(z[:, 0])
    kept = [np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in masks] if use_masks else None
    cache = ForwardCache(params, acts[0], pre, acts, kept, scale, out, single)
    return (float(out[0]) if single else out), cache


def mlp_backward(params: MlpParams, cache: ForwardCache, upstream) -> MlpParams:
    """Gradient of a scalar loss given ``upstream = dL/d(output)`` per sample.

    The returned :class:`MlpParams` holds gradients summed over the batch.
    The ReLU subgradient at exactly zero is taken as zero.
    """
    if cache.params is not params:
        raise ValidationError("cache was produced by a different parameter set")
    g = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    if g.shape != cache.out.shape:
        raise ValidationError(f"upstream gradient shape {g.shape} != output shape {cache.out.shape}")
    delta = (g * cache.out * (1.0 - cache.out))[:, None]
    gw = [None] * params.depth
    gb = [None] * params.depth
    for layer in range(params.depth - 1, -1, -1):
        h_in = cache.acts[layer]
        gw[layer] = delta.T @ h_in
        gb[layer] = delta.sum(axis=0)
        if layer == 0:
            break
        dh = delta @ params.weights[layer]
        if cache.masks is not None:
            dh = dh * cache.masks[layer - 1] * cache.keep_scale
        delta = dh * (cache.pre[layer - 1] > 0.0)
    return MlpParams(tuple(gw), tuple(gb))


def bce_loss(pred, target):
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(target, dtype=np.float64)
    out = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def bce_grad(pred, target):
    """d(bce_loss)/d(pred), evaluated at the clamped prediction."""
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(target, dtype=np.float64)
    return (p - t) / (p * (1.0 - p))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        arrays = _arrays(params)
        return cls(tuple(np.zeros_like(a) for a in arrays), tuple(np.zeros_like(a) for a in arrays), 0)


def _arrays(obj) -> list[np.ndarray]:
    if hasattr(obj, "arrays"):
        return obj.arrays()
    return [np.asarray(a, dtype=np.float64) for a in obj]


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update.

    ``params``/``grads`` are :class:`MlpParams` or plain sequences of arrays;
    the updated parameters come back in the same form.
    """
    ps, gs = _arrays(params), _arrays(grads)
    if len(ps) != len(gs) or len(ps) != len(state.m) or any(
        p.shape != g.shape or p.shape != m.shape for p, g, m in zip(ps, gs, state.m)
    ):
        raise ValidationError("adam_step: parameter, gradient and state shapes differ")
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p.append(p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps))
        new_m.append(m)
        new_v.append(v)
    state = AdamState(tuple(new_m), tuple(new_v), t)
    if isinstance(params, MlpParams):
        return params.with_arrays(new_p), state
    return type(params)(new_p) if isinstance(params, (list, tuple)) else new_p, state


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    val_aurc: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        return {"losses": self.losses, "val_aurc": self.val_aurc, "best_epoch": self.best_epoch}


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; the final partial batch is kept."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _score_aurc(scores: np.ndarray, correct: np.ndarray) -> float:
    from .dataset import ConfidenceTable
    from .metrics import aurc

    ids = tuple(str(i) for i in range(scores.size))
    return aurc(ConfidenceTable(ids, np.clip(scores, 0.0, 1.0), correct))


def train_binary_head(
    params0: MlpParams,
    inputs,
    targets,
    config: TrainConfig,
    validation: tuple | None = None,
) -> tuple[MlpParams, TrainHistory]:
    """Fit one sigmoid head to 0/1 targets with BCE.

    ``validation`` is an optional ``(inputs, targets)`` pair; when given and
    ``config.early_stop_metric == "val_aurc"`` the epoch with the lowest
    validation AURC (head output as confidence) is returned.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.shape[0] == 0:
        raise ValidationError("train_binary_head: empty dataset")
    if x.shape[0] != y.size:
        raise ValidationError("inputs and targets differ in length")
    history = TrainHistory()
    if config.epochs == 0:
        return params0, history
    rng = np.random.default_rng(config.seed)
    params, state = params0, AdamState.zeros_like(params0)
    track = validation is not None and config.early_stop_metric == "val_aurc"
    best = (np.inf, params0)
    for epoch in range(config.epochs):
        total = 0.0
        step_cfg = config.for_epoch(epoch)
        for idx in minibatches(y.size, config.batch_size, rng):
            masks = sample_masks(params, idx.size, config.dropout_p, rng)
            out, cache = mlp_forward(params, x[idx], masks, config.dropout_p)
            total += float(np.sum(bce_loss(out, y[idx])))
            grads = mlp_backward(params, cache, bce_grad(out, y[idx]) / idx.size)
            params, state = adam_step(params, grads, state, step_cfg)
        history.losses.append(total / y.size)
        if track:
            vx, vy = validation
            score, _ = mlp_forward(params, np.asarray(vx, dtype=np.float64))
            a = _score_aurc(np.atleast_1d(score), np.asarray(vy))
            history.val_aurc.append(a)
            if a < best[0]:
                best = (a, params)
                history.best_epoch = epoch
    if track:
        return best[1], history
    history.best_epoch = config.epochs - 1
    return params, history


def vs_train(logits, labels, config: TrainConfig):
    """Fit a diagonal vector-scaling map with per-class sigmoid BCE.

    ``W`` starts at one and ``b`` at zero; the loss is the mean BCE between
    ``sigmoid(W * logits + b)`` and the one-hot label over all entries.
    Returns ``(VsParams, TrainHistory)``.
    """
    from .confidence import VsParams

    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValidationError("vs_train needs a non-empty (n, K) logit matrix")
    if y.size != z.shape[0]:
        raise ValidationError("logits and labels differ in length")
    k = z.shape[1]
    if np.any((y < 0) | (y >= k)):
        raise ValidationError("label outside [0, K)")
    onehot = np.eye(k)[y]
    w, b = np.ones(k), np.zeros(k)
    history = TrainHistory()
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like([w, b])
    for epoch in range(config.epochs):
        total = 0.0
        step_cfg = config.for_epoch(epoch)
        for idx in minibatches(y.size, config.batch_size, rng):
            zb, tb = z[idx], onehot[idx]
            p = sigmoid(w * zb + b)
            total += float(np.sum(bce_loss(p, tb)))
            # d/dpre of BCE through the sigmoid is p - t
            d = (p - tb) / (idx.size * k)
            (w, b), state = adam_step([w, b], [np.sum(d * zb, axis=0), np.sum(d, axis=0)], state, step_cfg)
        history.losses.append(total / (y.size * k))
    history.best_epoch = config.epochs - 1 if config.epochs else None
    return VsParams(w, b), history
