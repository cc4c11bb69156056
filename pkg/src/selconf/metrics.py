"""Selective-prediction metrics over a :class:`ConfidenceTable`.

A record is accepted at threshold ``gamma`` when its confidence is strictly
greater than ``gamma``.  Coverage is the accepted fraction; risk is the error
rate among accepted records and is ``None`` when nothing is accepted.
All values here live in [0, 1]; percent scaling happens only at reporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import ConfidenceTable
from .errors import InfeasibleThresholdError, ValidationError

DEFAULT_RISKS = (0.01, 0.05, 0.10, 0.20)
DEFAULT_BINS = 10


def _nonempty(table: ConfidenceTable) -> None:
    if len(table) == 0:
        raise ValidationError("empty confidence table")


def coverage_risk_at(table: ConfidenceTable, gamma: float) -> tuple[float, float | None]:
    _nonempty(table)
    accepted = table.confidence > gamma
    n_acc = int(np.count_nonzero(accepted))
    coverage = n_acc / len(table)
    if n_acc == 0:
        return coverage, None
    errors = n_acc - int(np.sum(table.correct[accepted]))
    return coverage, errors / n_acc


@dataclass(frozen=True)
class RcCurve:
    """Risk-coverage points ordered by decreasing threshold."""

    gamma: np.ndarray
    coverage: np.ndarray
    risk: np.ndarray
    method_name: str = ""

    def __len__(self) -> int:
        return self.gamma.size

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.gamma.tolist(), self.coverage.tolist(), self.risk.tolist()))

    def to_csv(self) -> str:
        lines = ["gamma,coverage,risk"]
        lines += [f"{g!r},{c!r},{r!r}" for g, c, r in self.points]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, method_name: str = "") -> "RcCurve":
        rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
        g, c, r = (np.array([float(row[i]) for row in rows]) for i in range(3))
        return cls(g, c, r, method_name)


def rc_curve(table: ConfidenceTable) -> RcCurve:
    """Sweep the threshold from high to low, one point per distinct confidence.

    Tied confidences enter together.  The point admitting every record with
    confidence >= v is realised at ``gamma`` equal to the next lower distinct
    value, and the final accept-all point at ``gamma = -inf``.
    """
    _nonempty(table)
    order = np.argsort(-table.confidence, kind="stable")
    s = table.confidence[order]
    err = 1 - table.correct[order].astype(np.int64)
    last = np.empty(s.size, dtype=bool)
    np.not_equal(s[1:], s[:-1], out=last[:-1])
    last[-1] = True
    ends = np.flatnonzero(last)
    accepted = ends + 1
    coverage = accepted / s.size
    risk = np.cumsum(err)[ends] / accepted
    gamma = np.empty(ends.size)
    gamma[:-1] = s[ends[1:]]
    gamma[-1] = -np.inf
    return RcCurve(gamma, coverage, risk, table.method_name)


def _curve(source: ConfidenceTable | RcCurve) -> RcCurve:
    return source if isinstance(source, RcCurve) else rc_curve(source)


def aurc(source: ConfidenceTable | RcCurve) -> float:
    """Step integral of risk over coverage; accepts a table or its curve."""
    curve = _curve(source)
    widths = np.empty_like(curve.coverage)
    widths[0] = curve.coverage[0]
    np.subtract(curve.coverage[1:], curve.coverage[:-1], out=widths[1:])
    return float(np.sum(curve.risk * widths))


def c_at_r(source: ConfidenceTable | RcCurve, target_risk: float) -> tuple[float, float | None]:
    """Largest coverage over all thresholds whose risk is at most ``target_risk``.

    Returns ``(coverage, gamma)``, or ``(0.0, None)`` if no threshold qualifies.
    Accepts a table or a curve already computed from it.
    """
    if not 0.0 <= target_risk < 1.0:
        raise ValidationError(f"target risk must be in [0, 1), got {target_risk}")
    curve = _curve(source)
    feasible = np.flatnonzero(curve.risk <= target_risk)
    if feasible.size == 0:
        return 0.0, None
    best = feasible[-1]  # coverage increases along the curve
    return float(curve.coverage[best]), float(curve.gamma[best])


def _bin_index(conf: np.ndarray, m_bins: int) -> np.ndarray:
    # Bin j holds ((j-1)/m, j/m]; the first bin also holds 0.
    edges = np.arange(m_bins + 1) / m_bins
    idx = np.searchsorted(edges, conf, side="left") - 1
    return np.clip(idx, 0, m_bins - 1)


def ece(table: ConfidenceTable, m_bins: int = DEFAULT_BINS) -> float:
    _nonempty(table)
    if m_bins < 1:
        raise ValidationError("m_bins must be >= 1")
    idx = _bin_index(table.confidence, m_bins)
    counts = np.bincount(idx, minlength=m_bins)
    acc_sum = np.bincount(idx, weights=table.correct.astype(np.float64), minlength=m_bins)
    conf_sum = np.bincount(idx, weights=table.confidence, minlength=m_bins)
    # |B|/N * |acc - conf| == |sum(correct) - sum(conf)| / N
    return float(np.sum(np.abs(acc_sum - conf_sum)) / len(table))


@dataclass
class MetricsReport:
    method_name: str
    c_at_r: dict[float, float]
    aurc: float
    ece: float
    n: int
    accuracy: float
    notes: str = ""

    def __post_init__(self):
        values = list(self.c_at_r.values()) + [self.aurc, self.ece, self.accuracy]
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise ValidationError(f"{self.method_name}: metric outside [0, 1]")

    def as_row(self, percent: bool = True) -> dict:
        scale = 100.0 if percent else 1.0
        row = {"method": self.method_name}
        for r, cov in sorted(self.c_at_r.items()):
            row[risk_column(r)] = cov * scale
        row["aurc"] = self.aurc * scale
        row["ece"] = self.ece * scale
        row["accuracy"] = self.accuracy * scale
        row["n"] = self.n
        return row

    def metric_values(self) -> dict[str, float]:
        out = {risk_column(r): v for r, v in self.c_at_r.items()}
        out.update(aurc=self.aurc, ece=self.ece, accuracy=self.accuracy)
        return out


def risk_column(r: float) -> str:
    pct = r * 100.0
    return f"c@{pct:g}"


def evaluate(
    table: ConfidenceTable,
    targets: Sequence[float] = DEFAULT_RISKS,
    m_bins: int = DEFAULT_BINS,
) -> MetricsReport:
    curve = rc_curve(table)
    return MetricsReport(
        method_name=table.method_name,
        c_at_r={float(r): c_at_r(curve, r)[0] for r in targets},
        aurc=aurc(curve),
        ece=ece(table, m_bins),
        n=len(table),
        accuracy=table.accuracy,
    )


def oracle_metrics(correct: Iterable[int], targets: Sequence[float] = DEFAULT_RISKS) -> MetricsReport:
    """Metrics of the selector whose confidence is the correctness bit itself.

    Correct records are accepted first, then errors one at a time, so the
    curve is the pointwise-lowest risk achievable at every coverage k/N.
    """
    c = np.asarray(list(correct), dtype=np.int64)
    if c.size == 0:
        raise ValidationError("oracle_metrics needs at least one record")
    n = c.size
    a = int(c.sum())
    k = np.arange(1, n + 1)
    risk = np.maximum(k - a, 0) / k
    cov = {}
    for r in targets:
        if not 0.0 <= r < 1.0:
            raise ValidationError(f"target risk must be in [0, 1), got {r}")
        feasible = np.flatnonzero(risk <= r)
        cov[float(r)] = float(k[feasible[-1]] / n) if feasible.size else 0.0
    return MetricsReport(
        method_name="oracle",
        c_at_r=cov,
        aurc=float(np.sum(risk) / n),
        ece=0.0,
        n=n,
        accuracy=a / n,
    )


def select_threshold(val: ConfidenceTable, target_risk: float) -> float | None:
    return c_at_r(val, target_risk)[1]


@dataclass(frozen=True)
class TransferResult:
    gamma: float
    delta_risk: float
    delta_coverage: float
    test_risk: float
    test_coverage: float
    best_test_coverage: float


def threshold_transfer(
    val: ConfidenceTable, test: ConfidenceTable, target_risk: float
) -> TransferResult:
    """Fix the threshold on ``val`` and measure how it behaves on ``test``."""
    gamma = select_threshold(val, target_risk)
    if gamma is None:
        raise InfeasibleThresholdError(
            f"{val.method_name or 'table'}: no validation threshold reaches risk {target_risk}"
        )
    cov, risk = coverage_risk_at(test, gamma)
    if risk is None:
        raise InfeasibleThresholdError(
            f"threshold {gamma!r} chosen on validation accepts nothing on test"
        )
    best_cov, _ = c_at_r(test, target_risk)
    return TransferResult(gamma, risk - target_risk, cov - best_cov, risk, cov, best_cov)


def aggregate_seeds(reports: Sequence[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Per-metric sample mean and Bessel-corrected standard deviation."""
    if len(reports) < 2:
        raise ValidationError("aggregate_seeds needs at least two reports")
    names = {r.method_name for r in reports}
    if len(names) != 1:
        raise ValidationError(f"cannot aggregate across methods {sorted(names)}")
    keys = list(reports[0].metric_values())
    out = {}
    for key in keys:
        vals = np.array([r.metric_values()[key] for r in reports])
        # centring on the first value makes identical inputs give exactly 0
        dev = vals - vals[0]
        out[key] = (float(vals[0] + dev.mean()), float(dev.std(ddof=1)))
    return out


def format_row(row: Mapping, digits: int = 2) -> dict:
    return {k: (f"{v:.{digits}f}" if isinstance(v, float) else v) for k, v in row.items()}
