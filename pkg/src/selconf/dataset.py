"""Scored prediction records: types, validation, line-delimited I/O and splits.

A record is whatever a frozen classifier emitted for one input: the fused
feature vector, the pre-softmax logits, the gold label and, optionally, the
logits of several stochastic passes.  Everything downstream consumes
:class:`EvalSet` objects built here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import RecordFormatError, ValidationError


class Split(str, Enum):
    TRAIN_F = "train_f"
    VAL_F = "val_f"
    VAL_G = "val_g"
    TEST = "test"


def _frozen(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScoredRecord:
    id: str
    features: np.ndarray
    logits: np.ndarray
    label: int
    mc_passes: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features, 1))
        object.__setattr__(self, "logits", _frozen(self.logits, 1))
        if self.mc_passes is not None:
            passes = _frozen(self.mc_passes, 2) if len(self.mc_passes) else None
            if passes is None:
                raise ValidationError("mc_passes must be absent or non-empty")
            object.__setattr__(self, "mc_passes", passes)
        if isinstance(self.label, bool) or int(self.label) != self.label:
            raise ValidationError(f"label must be an integer, got {self.label!r}")
        object.__setattr__(self, "label", int(self.label))

    def validate(self, k_classes: int, feat_dim: int) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("id must be a non-empty string")
        if self.logits.shape != (k_classes,):
            raise ValidationError(
                f"record {self.id!r}: logits length {self.logits.size} != k_classes {k_classes}"
            )
        if self.features.shape != (feat_dim,):
            raise ValidationError(
                f"record {self.id!r}: features length {self.features.size} != feat_dim {feat_dim}"
            )
        if not 0 <= self.label < k_classes:
            raise ValidationError(f"record {self.id!r}: label {self.label} outside [0, {k_classes})")
        if self.mc_passes is not None and self.mc_passes.shape[1] != k_classes:
            raise ValidationError(
                f"record {self.id!r}: mc_passes entries must have length {k_classes}"
            )
        for name in ("features", "logits", "mc_passes"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValidationError(f"record {self.id!r}: non-finite value in {name}")

    def __eq__(self, other):
        if not isinstance(other, ScoredRecord):
            return NotImplemented
        if (self.mc_passes is None) != (other.mc_passes is None):
            return False
        return (
            self.id == other.id
            and self.label == other.label
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.logits, other.logits)
            and (self.mc_passes is None or np.array_equal(self.mc_passes, other.mc_passes))
        )

    __hash__ = None

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "label": self.label,
            "logits": self.logits.tolist(),
            "features": self.features.tolist(),
        }
        if self.mc_passes is not None:
            out["mc_passes"] = self.mc_passes.tolist()
        return out


def correctness(record: ScoredRecord) -> int:
    """1 if the top logit is the gold label; ties go to the lowest class index."""
    return int(int(np.argmax(record.logits)) == record.label)


@dataclass(frozen=True, eq=False)
class EvalSet:
    records: tuple[ScoredRecord, ...]
    k_classes: int
    feat_dim: int
    split: Split = Split.TEST
    seed_provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "split", Split(self.split))
        if self.k_classes < 1 or self.feat_dim < 1:
            raise ValidationError("k_classes and feat_dim must be positive")
        if not self.records:
            raise ValidationError("an EvalSet needs at least one record")
        seen = set()
        for rec in self.records:
            rec.validate(self.k_classes, self.feat_dim)
            if rec.id in seen:
                raise ValidationError(f"duplicate id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        if not isinstance(other, EvalSet):
            return NotImplemented
        return (
            self.k_classes == other.k_classes
            and self.feat_dim == other.feat_dim
            and self.split == other.split
            and self.seed_provenance == other.seed_provenance
            and self.records == other.records
        )

    __hash__ = None

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.records)

    @cached_property
    def logits(self) -> np.ndarray:
        return _readonly(np.stack([r.logits for r in self.records]))

    @cached_property
    def features(self) -> np.ndarray:
        return _readonly(np.stack([r.features for r in self.records]))

    @cached_property
    def labels(self) -> np.ndarray:
        return _readonly(np.array([r.label for r in self.records], dtype=np.int64))

    @cached_property
    def correct(self) -> np.ndarray:
        # np.argmax returns the first maximal index, which is the tie rule we want.
        return _readonly((np.argmax(self.logits, axis=1) == self.labels).astype(np.int8))

    @property
    def has_mc_passes(self) -> bool:
        return all(r.mc_passes is not None for r in self.records)

    @cached_property
    def mc_passes(self) -> np.ndarray:
        """Stacked passes, shape (n, passes, K).  Requires equal pass counts."""
        if not self.has_mc_passes:
            raise ValidationError("records lack the mc_passes field required for MCD")
        counts = {r.mc_passes.shape[0] for r in self.records}
        if len(counts) != 1:
            raise ValidationError(f"records carry differing mc pass counts {sorted(counts)}")
        return _readonly(np.stack([r.mc_passes for r in self.records]))

    def subset(self, indices: Sequence[int], split: Split | str, provenance: str = "") -> "EvalSet":
        return EvalSet(
            records=tuple(self.records[i] for i in indices),
            k_classes=self.k_classes,
            feat_dim=self.feat_dim,
            split=split,
            seed_provenance=provenance or self.seed_provenance,
        )


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ConfidenceTable:
    """Per-record confidence paired with the correctness bit."""

    ids: tuple[str, ...]
    confidence: np.ndarray
    correct: np.ndarray
    method_name: str = ""

    def __post_init__(self):
        ids = tuple(self.ids)
        conf = np.array(self.confidence, dtype=np.float64).reshape(-1)
        corr = np.array(self.correct).reshape(-1)
        if not (len(ids) == conf.size == corr.size):
            raise ValidationError("ids, confidence and correct must have equal length")
        if len(set(ids)) != len(ids):
            raise ValidationError("confidence table ids must be unique")
        # NaN fails both comparisons, so this also rejects non-finite values
        if conf.size and not (conf.min() >= 0.0 and conf.max() <= 1.0):
            raise ValidationError("confidence values must lie in [0, 1]")
        if not np.all((corr == 0) | (corr == 1)):
            raise ValidationError("correct must be a 0/1 vector")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "confidence", _readonly(conf))
        object.__setattr__(self, "correct", _readonly(corr.astype(np.int8)))

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_scores(cls, evalset: EvalSet, scores, method_name: str) -> "ConfidenceTable":
        scores = np.asarray(scores, dtype=np.float64)
        # Softmax maxima can exceed 1 by an ulp after renormalisation.
        scores = np.clip(scores, 0.0, 1.0)
        return cls(evalset.ids, scores, evalset.correct, method_name)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.correct))


# ---------------------------------------------------------------------------
# line-delimited I/O
# ---------------------------------------------------------------------------


def _as_text_lines(stream) -> Iterable[str]:
    for raw in stream:
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise RecordFormatError(f"invalid UTF-8: {exc}") from None
        yield raw


def _record_from_obj(obj, lineno: int, k_classes: int, feat_dim: int) -> ScoredRecord:
    if not isinstance(obj, dict):
        raise RecordFormatError("record must be a JSON object", lineno)
    missing = [k for k in ("id", "label", "logits", "features") if k not in obj]
    if missing:
        raise RecordFormatError(f"missing field(s) {', '.join(missing)}", lineno)
    if not isinstance(obj["id"], str):
        raise RecordFormatError("id must be a string", lineno)
    label = obj["label"]
    if isinstance(label, bool) or not isinstance(label, int):
        raise RecordFormatError("label must be an integer", lineno)
    try:
        rec = ScoredRecord(
            id=obj["id"],
            features=obj["features"],
            logits=obj["logits"],
            label=label,
            mc_passes=obj.get("mc_passes"),
        )
        rec.validate(k_classes, feat_dim)
    except (ValidationError, ValueError, TypeError) as exc:
        raise RecordFormatError(str(exc), lineno) from None
    return rec


def parse_records(
    stream,
    k_classes: int | None = None,
    feat_dim: int | None = None,
    split: Split | str = Split.TEST,
    seed_provenance: str = "",
) -> EvalSet:
    """Read newline-delimited JSON records into a validated :class:`EvalSet`.

    The first line may be a header object ``{"k_classes": K, "feat_dim": d}``;
    it takes precedence over the keyword arguments.  Blank lines are skipped.
    Errors name the offending 1-based line number.
    """
    records = []
    seen: set[str] = set()
    for lineno, line in enumerate(_as_text_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"malformed JSON ({exc.msg})", lineno) from None
        if not records and isinstance(obj, dict) and "k_classes" in obj and "id" not in obj:
            k_classes, feat_dim = obj["k_classes"], obj["feat_dim"]
            seed_provenance = obj.get("seed_provenance", seed_provenance)
            continue
        if k_classes is None or feat_dim is None:
            raise RecordFormatError("k_classes/feat_dim unknown: no header line and no flags", lineno)
        rec = _record_from_obj(obj, lineno, k_classes, feat_dim)
        if rec.id in seen:
            raise RecordFormatError(f"duplicate id {rec.id!r}", lineno)
        seen.add(rec.id)
        records.append(rec)
    if not records:
        raise RecordFormatError("no records found")
    return EvalSet(tuple(records), k_classes, feat_dim, split, seed_provenance)


def serialize_records(evalset: EvalSet, stream: IO[str], header: bool = True) -> None:
    """Write ``evalset`` in the line format read by :func:`parse_records`.

    ``json`` renders floats with ``repr``, i.e. the shortest string that
    round-trips to the same double.
    """
    if header:
        head = {"k_classes": evalset.k_classes, "feat_dim": evalset.feat_dim}
        if evalset.seed_provenance:
            head["seed_provenance"] = evalset.seed_provenance
        stream.write(json.dumps(head) + "\n")
    for rec in evalset.records:
        stream.write(json.dumps(rec.to_dict(), allow_nan=False) + "\n")


def load_records(path, k_classes: int | None = None, feat_dim: int | None = None, **kw) -> EvalSet:
    with open(path, "rb") as fh:
        return parse_records(fh, k_classes, feat_dim, **kw)


def save_records(evalset: EvalSet, path, header: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        serialize_records(evalset, fh, header=header)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_eval(full_test: EvalSet, fraction_val_g: float, seed: int) -> tuple[EvalSet, EvalSet]:
    """Carve a selector-validation part off a test set.

    ``round(fraction * N)`` records (half rounded up, clamped to leave both
    parts non-empty) go to Val-g; the rest form the held-out Test split.
    Both parts keep the input order of their records.
    """
    if not 0.0 < fraction_val_g < 1.0:
        raise ValidationError(f"fraction_val_g must be in (0, 1), got {fraction_val_g}")
    n = len(full_test)
    if n < 2:
        raise ValidationError("need at least 2 records to split")
    n_val = min(max(_round_half_up(fraction_val_g * n), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    test_idx = np.sort(perm[n_val:])
    prov = f"{full_test.seed_provenance}|split_eval(seed={seed},fraction={fraction_val_g})"
    return (
        full_test.subset(val_idx, Split.VAL_G, prov),
        full_test.subset(test_idx, Split.TEST, prov),
    )


def split_roles(
    full: EvalSet,
    fractions: Sequence[float],
    roles: Sequence[Split | str],
    seed: int,
) -> dict[Split, EvalSet]:
    """Partition ``full`` into disjoint role subsets by fraction.

    Counts come from round-half-up on cumulative fractions, so they always sum
    to ``len(full)``.  Every role must receive at least one record.
    """
    if len(fractions) != len(roles):
        raise ValidationError("fractions and roles must have equal length")
    if any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValidationError("fractions must be positive and sum to 1")
    n = len(full)
    cuts = [0]
    acc = 0.0
    for f in fractions[:-1]:
        acc += f
        cuts.append(_round_half_up(acc * n))
    cuts.append(n)
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise ValidationError(f"{n} records are too few for fractions {list(fractions)}")
    perm = np.random.default_rng(seed).permutation(n)
    prov = f"{full.seed_provenance}|split_roles(seed={seed},fractions={list(fractions)})"
    out = {}
    for role, a, b in zip(roles, cuts, cuts[1:]):
        out[Split(role)] = full.subset(np.sort(perm[a:b]), role, prov)
    return out
