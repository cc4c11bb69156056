"""Error-moment algebra for convex confidence fusion, plus separation statistics.

For two correctness estimators ``C_M`` and ``C_R`` with errors
``e_M = C_M - c`` and ``e_R = C_R - c``, the fixed-weight blend
``a * C_M + (1 - a) * C_R`` has mean squared error

    J(a) = a^2 s_M + (1 - a)^2 s_R + 2 a (1 - a) s_MR

where ``s_M = E[e_M^2]``, ``s_R = E[e_R^2]`` and ``s_MR = E[e_M e_R]`` are raw
(not mean-centred) second moments.  ``J`` is a convex quadratic, so the best
fixed weight has a closed form, and blending beats both endpoints exactly when
``s_MR < min(s_M, s_R)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import ConfidenceTable
from .errors import NumericError, ValidationError
from .metrics import aurc

KL_BINS = 50
KL_EPS = 1e-10
LAMBDA_STEP = 0.001


@dataclass(frozen=True)
class ErrorMoments:
    sigma2_m: float
    sigma2_r: float
    sigma_mr: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("ErrorMoments needs n >= 1")
        if self.sigma2_m < 0 or self.sigma2_r < 0:
            raise ValidationError("second moments must be non-negative")
        bound = math.sqrt(self.sigma2_m * self.sigma2_r)
        if abs(self.sigma_mr) > bound * (1 + 1e-9) + 1e-15:
            raise ValidationError(
                f"cross moment {self.sigma_mr} violates Cauchy-Schwarz bound {bound}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _aligned(a: ConfidenceTable, b: ConfidenceTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Confidences of ``a`` and ``b`` over the same ids, in ``a``'s order."""
    if len(a) != len(b) or set(a.ids) != set(b.ids):
        raise ValidationError("tables cover different ids")
    pos = {key: i for i, key in enumerate(b.ids)}
    order = np.array([pos[key] for key in a.ids], dtype=np.intp)
    if not np.array_equal(a.correct, b.correct[order]):
        raise ValidationError("tables disagree on correctness")
    return a.confidence, b.confidence[order], a.correct.astype(np.float64)


def moments_from_errors(err_m, err_r) -> ErrorMoments:
    em = np.asarray(err_m, dtype=np.float64)
    er = np.asarray(err_r, dtype=np.float64)
    if em.shape != er.shape or em.size == 0:
        raise ValidationError("error vectors must be non-empty and of equal length")
    return ErrorMoments(float(np.mean(em * em)), float(np.mean(er * er)), float(np.mean(em * er)), em.size)


def error_moments(msp_table: ConfidenceTable, rrh_table: ConfidenceTable) -> ErrorMoments:
    cm, cr, c = _aligned(msp_table, rrh_table)
    return moments_from_errors(cm - c, cr - c)


def alpha_star(m: ErrorMoments) -> float:
    """Closed-form minimiser of ``j_alpha`` over the real line."""
    denom = m.sigma2_m + m.sigma2_r - 2.0 * m.sigma_mr
    if denom <= 0.0:
        raise NumericError("estimators have identical errors; the optimal weight is undefined")
    return (m.sigma2_r - m.sigma_mr) / denom


def fusion_condition(m: ErrorMoments) -> tuple[bool, float]:
    """Whether blending strictly beats both endpoints, with the margin."""
    margin = min(m.sigma2_m, m.sigma2_r) - m.sigma_mr
    return margin > 0.0, margin


def j_alpha(m: ErrorMoments, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    return alpha**2 * m.sigma2_m + (1 - alpha) ** 2 * m.sigma2_r + 2 * alpha * (1 - alpha) * m.sigma_mr


@dataclass(frozen=True)
class FixedLambdaResult:
    lam: float
    mse: float
    alpha_star: float | None
    adaptive_mse: float | None = None

    @property
    def adaptive_wins(self) -> bool | None:
        if self.adaptive_mse is None:
            return None
        return self.adaptive_mse <= self.mse

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adaptive_wins"] = self.adaptive_wins
        return out


def best_fixed_lambda(
    msp_table: ConfidenceTable,
    rrh_table: ConfidenceTable,
    adaptive_table: ConfidenceTable | None = None,
    step: float = LAMBDA_STEP,
) -> FixedLambdaResult:
    """Grid-search the fixed blend weight with the lowest empirical MSE.

    ``lam`` weights the MSP side.  The closed-form optimum (clipped to [0, 1])
    is reported next to it; on a convex quadratic they agree to the grid step.
    """
    if not 0.0 < step <= 1.0:
        raise ValidationError("step must be in (0, 1]")
    m = error_moments(msp_table, rrh_table)
    grid = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)
    j = grid**2 * m.sigma2_m + (1 - grid) ** 2 * m.sigma2_r + 2 * grid * (1 - grid) * m.sigma_mr
    best = int(np.argmin(j))
    try:
        a_star = min(max(alpha_star(m), 0.0), 1.0)
    except NumericError:
        a_star = None
    adaptive = None
    if adaptive_table is not None:
        conf, _, c = _aligned(adaptive_table, msp_table)
        adaptive = float(np.mean((conf - c) ** 2))
    return FixedLambdaResult(float(grid[best]), float(j[best]), a_star, adaptive)


def brier_decomposition_check(table: ConfidenceTable, s_star: dict[str, float]) -> float:
    """``|E[(s-c)^2] - E[(s-s*)^2] - E[s*(1-s*)]|`` over the table."""
    try:
        post = np.array([s_star[key] for key in table.ids], dtype=np.float64)
    except KeyError as exc:
        raise ValidationError(f"no posterior for id {exc}") from None
    s = table.confidence
    c = table.correct.astype(np.float64)
    lhs = np.mean((s - c) ** 2)
    rhs = np.mean((s - post) ** 2) + np.mean(post * (1 - post))
    return float(abs(lhs - rhs))


# ---------------------------------------------------------------------------
# separation between correct and incorrect confidence distributions
# ---------------------------------------------------------------------------


def _sample(values, name: str, min_size: int = 1) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size < min_size:
        raise ValidationError(f"{name} needs at least {min_size} values")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains a non-finite value")
    return x


def cohens_d(group_a, group_b) -> float:
    a = _sample(group_a, "group_a", 2)
    b = _sample(group_b, "group_b", 2)
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2)
    if pooled <= 0.0:
        raise NumericError("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


def wasserstein1(a, b) -> float:
    """Exact 1-D W1 between two empirical measures, as the integral of |F_a - F_b|."""
    x = np.sort(_sample(a, "a"))
    y = np.sort(_sample(b, "b"))
    support = np.concatenate([x, y])
    support.sort()
    widths = np.diff(support)
    fx = np.searchsorted(x, support[:-1], side="right") / x.size
    fy = np.searchsorted(y, support[:-1], side="right") / y.size
    return float(np.sum(np.abs(fx - fy) * widths))


def _hist(x: np.ndarray, bins: int, eps: float) -> np.ndarray:
    counts, _ = np.histogram(x, bins=bins, range=(0.0, 1.0))
    p = counts / x.size + eps
    return p / p.sum()


def kl_divergence_hist(p_samples, q_samples, bins: int = KL_BINS, eps: float = KL_EPS) -> float:
    """KL(P || Q) between eps-smoothed equal-width histograms on [0, 1]."""
    if bins < 2:
        raise ValidationError("bins must be >= 2")
    if eps <= 0:
        raise ValidationError("eps must be positive")
    p_x = _sample(p_samples, "p_samples")
    q_x = _sample(q_samples, "q_samples")
    if p_x.min() < 0 or q_x.min() < 0 or p_x.max() > 1 or q_x.max() > 1:
        raise ValidationError("samples must lie in [0, 1]")
    p = _hist(p_x, bins, eps)
    q = _hist(q_x, bins, eps)
    return float(max(np.sum(p * np.log(p / q)), 0.0))


@dataclass(frozen=True)
class SeparationReport:
    method_name: str
    cohens_d: float
    wasserstein: float
    kl: float
    aurc: float
    kl_bins: int = KL_BINS
    kl_eps: float = KL_EPS
    kl_direction: str = "correct||incorrect"

    def to_dict(self) -> dict:
        return asdict(self)


def separation_report(table: ConfidenceTable, bins: int = KL_BINS, eps: float = KL_EPS) -> SeparationReport:
    """Separation of correct vs incorrect confidences; positive d means correct is higher."""
    mask = table.correct.astype(bool)
    good, bad = table.confidence[mask], table.confidence[~mask]
    if good.size < 2 or bad.size < 2:
        raise ValidationError("separation needs at least two correct and two incorrect records")
    return SeparationReport(
        method_name=table.method_name,
        cohens_d=cohens_d(good, bad),
        wasserstein=wasserstein1(good, bad),
        kl=kl_divergence_hist(good, bad, bins, eps),
        aurc=aurc(table),
        kl_bins=bins,
        kl_eps=eps,
    )


def fusion_report(msp_table: ConfidenceTable, rrh_table: ConfidenceTable) -> dict:
    """Moments, optimal weight, condition and the J profile in one object."""
    m = error_moments(msp_table, rrh_table)
    ok, margin = fusion_condition(m)
    try:
        a = alpha_star(m)
    except NumericError:
        a = None
    a_in = None if a is None else min(max(a, 0.0), 1.0)
    return {
        "moments": m.to_dict(),
        "alpha_star": a,
        "fusion_condition": ok,
        "margin": margin,
        "j_0": j_alpha(m, 0.0),
        "j_1": j_alpha(m, 1.0),
        "j_alpha_star": None if a_in is None else j_alpha(m, a_in),
    }
