"""Closed-form confidence scores computed from logits.

All functions accept a single logit vector of shape ``(K,)`` or a batch of
shape ``(n, K)``; the class axis is always the last one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import ConfidenceTable, EvalSet
from .errors import ValidationError


def _check_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ValidationError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits contain a non-finite value")
    return z


def softmax(logits) -> np.ndarray:
    z = _check_logits(logits)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_classes(logits) -> np.ndarray:
    z = _check_logits(logits)
    if z.shape[-1] < 2:
        raise ValidationError("confidence scores need at least two classes")
    return z


def msp(logits):
    """Maximum softmax probability."""
    p = softmax(_check_classes(logits))
    out = np.max(p, axis=-1)
    return float(out) if out.ndim == 0 else out


def doctor(logits):
    """Sum of squared class probabilities (one minus Gini impurity)."""
    p = softmax(_check_classes(logits))
    out = np.sum(p * p, axis=-1)
    return float(out) if out.ndim == 0 else out


def mcd_confidence(passes):
    """Max of the pass-averaged predictive distribution.

    ``passes`` has shape ``(P, K)`` for one input or ``(n, P, K)`` for a batch.
    """
    z = np.asarray(passes, dtype=np.float64)
    if z.ndim < 2 or z.shape[-2] == 0:
        raise ValidationError("mcd_confidence needs at least one pass")
    mean = np.mean(softmax(_check_classes(z)), axis=-2)
    out = np.max(mean, axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class VsParams:
    """Diagonal scale and bias of a vector-scaling calibrator."""

    diag_w: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.array(self.diag_w, dtype=np.float64).reshape(-1)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.shape != b.shape or w.size == 0:
            raise ValidationError("diag_w and bias must be non-empty and of equal length")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("VsParams must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "diag_w", w)
        object.__setattr__(self, "bias", b)

    @property
    def k_classes(self) -> int:
        return self.diag_w.size

    @classmethod
    def identity(cls, k_classes: int) -> "VsParams":
        return cls(np.ones(k_classes), np.zeros(k_classes))

    def to_json(self) -> str:
        return json.dumps({"diag_w": self.diag_w.tolist(), "bias": self.bias.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "VsParams":
        obj = json.loads(text)
        try:
            return cls(obj["diag_w"], obj["bias"])
        except KeyError as exc:
            raise ValidationError(f"VsParams object lacks {exc}") from None


def vs_apply(params: VsParams, logits) -> np.ndarray:
    z = _check_logits(logits)
    if z.shape[-1] != params.k_classes:
        raise ValidationError(f"logits have {z.shape[-1]} classes, VsParams has {params.k_classes}")
    return params.diag_w * z + params.bias


# ---------------------------------------------------------------------------
# tables over an EvalSet
# ---------------------------------------------------------------------------


def msp_table(evalset: EvalSet) -> ConfidenceTable:
    return ConfidenceTable.from_scores(evalset, msp(evalset.logits), "msp")


def doctor_table(evalset: EvalSet) -> ConfidenceTable:
    return ConfidenceTable.from_scores(evalset, doctor(evalset.logits), "doctor")


def mcd_table(evalset: EvalSet) -> ConfidenceTable:
    if not evalset.has_mc_passes:
        raise ValidationError("method mcd requires the 'mc_passes' field on every record")
    return ConfidenceTable.from_scores(evalset, mcd_confidence(evalset.mc_passes), "mcd")


def vs_table(evalset: EvalSet, params: VsParams) -> ConfidenceTable:
    # Correctness stays tied to the backbone's own argmax, not the recalibrated one.
    return ConfidenceTable.from_scores(evalset, msp(vs_apply(params, evalset.logits)), "vs")
