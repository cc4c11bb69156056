"""Synthetic scored datasets with a known correctness posterior.

Each record gets a latent difficulty ``u ~ U(0, 1)``.  True logits put a
margin ``margin_max * (1 - u)`` on a random class plus Gaussian class noise,
and the label is drawn from their softmax.  The "model" sees those logits
inflated by ``1 + tau * u`` plus noise, so hard items come out overconfident.
Features expose the true logits and a noisy copy of ``u`` followed by
distractors, giving a learned head something MSP cannot see.

Because the label distribution is known, the probability that the model's
argmax is correct, ``s_star``, is available exactly for every record.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .confidence import softmax
from .dataset import ConfidenceTable, EvalSet, ScoredRecord, Split
from .errors import ValidationError


@dataclass(frozen=True)
class SynthConfig:
    n: int = 20_000
    k_classes: int = 8
    feat_dim: int = 32
    margin_max: float = 4.0
    class_noise: float = 0.5
    tau: float = 1.5
    logit_noise: float = 0.3
    difficulty_feature_noise: float = 0.1
    mc_passes: int = 10
    mc_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        if self.k_classes < 2:
            raise ValidationError("k_classes must be >= 2")
        if self.feat_dim < self.k_classes + 1:
            raise ValidationError("feat_dim must hold the K true logits plus the difficulty feature")
        if self.mc_passes < 0:
            raise ValidationError("mc_passes must be >= 0")
        for name in ("margin_max", "class_noise", "tau", "logit_noise", "difficulty_feature_noise", "mc_noise"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")

    def provenance(self) -> str:
        return "synth(" + ",".join(f"{k}={v}" for k, v in asdict(self).items()) + ")"


def generate(config: SynthConfig) -> tuple[EvalSet, dict[str, float]]:
    """Draw a dataset; returns the records and an ``id -> s_star`` map."""
    rng = np.random.default_rng(config.seed)
    n, k, d = config.n, config.k_classes, config.feat_dim

    u = rng.uniform(0.0, 1.0, size=n)
    y_star = rng.integers(0, k, size=n)
    true_logits = rng.normal(0.0, config.class_noise, size=(n, k)) if config.class_noise else np.zeros((n, k))
    true_logits[np.arange(n), y_star] += config.margin_max * (1.0 - u)

    p_true = softmax(true_logits)
    # inverse-CDF categorical draw, one uniform per record
    cdf = np.cumsum(p_true, axis=1)
    labels = np.minimum((rng.uniform(size=(n, 1)) > cdf).sum(axis=1), k - 1)

    noise = rng.normal(0.0, config.logit_noise, size=(n, k)) if config.logit_noise else 0.0
    logits = (1.0 + config.tau * u)[:, None] * true_logits + noise

    diff_feat = u + (rng.normal(0.0, config.difficulty_feature_noise, size=n) if config.difficulty_feature_noise else 0.0)
    distract = rng.standard_normal(size=(n, d - k - 1))
    features = np.column_stack([true_logits, diff_feat, distract])

    if config.mc_passes:
        jitter = rng.normal(0.0, config.mc_noise, size=(n, config.mc_passes, k)) if config.mc_noise else 0.0
        passes = logits[:, None, :] + jitter
        passes = np.broadcast_to(passes, (n, config.mc_passes, k))
    else:
        passes = None

    s_star = p_true[np.arange(n), np.argmax(logits, axis=1)]

    ids = [f"syn{config.seed}-{i:06d}" for i in range(n)]
    records = tuple(
        ScoredRecord(
            id=ids[i],
            features=features[i],
            logits=logits[i],
            label=int(labels[i]),
            mc_passes=None if passes is None else passes[i],
        )
        for i in range(n)
    )
    evalset = EvalSet(records, k, d, Split.TEST, config.provenance())
    return evalset, dict(zip(ids, s_star.tolist()))


def s_star_table(evalset: EvalSet, s_star: dict[str, float]) -> ConfidenceTable:
    """The Bayes-optimal selector as a confidence table."""
    try:
        scores = np.array([s_star[i] for i in evalset.ids])
    except KeyError as exc:
        raise ValidationError(f"no posterior for id {exc}") from None
    return ConfidenceTable.from_scores(evalset, scores, "s_star")


def bayes_gap(table: ConfidenceTable, s_star: dict[str, float]) -> tuple[float, float]:
    """Mean squared and mean absolute gap between a confidence and ``s_star``."""
    try:
        target = np.array([s_star[i] for i in table.ids])
    except KeyError as exc:
        raise ValidationError(f"no posterior for id {exc}") from None
    diff = table.confidence - target
    return float(np.mean(diff**2)), float(np.mean(np.abs(diff)))


def write_s_star(s_star: dict[str, float], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,s_star\n")
        for key, val in s_star.items():
            fh.write(f"{key},{val!r}\n")


def read_s_star(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "id,s_star":
            raise ValidationError(f"{path}: expected header 'id,s_star'")
        for line in fh:
            if line.strip():
                key, val = line.rstrip("\n").rsplit(",", 1)
                out[key] = float(val)
    return out
