"""Statistical elite-pixel labelling from amplitude and coherence time series.

PS candidates come from a threshold on amplitude dispersion, DS candidates from
a threshold on coherence dispersion.  Each DS candidate is compared with the
PS candidate owning its Voronoi cell through an F test on amplitude variances;
accepted DS join the PS candidates as elite pixels.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .stack_io import EliteMask, InterferogramStack


class AcceptanceRule(str, enum.Enum):
    PAPER_LITERAL = "paper_literal"
    TWO_SIDED = "two_sided"


class EmptyPSError(ValueError):
    """No PS candidate exists, so no Voronoi cell can own a DS candidate."""


class EmptyPSWarning(UserWarning):
    pass


class ConvergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SelectorConfig:
    ps_threshold: float = 0.25
    ds_threshold: float = 0.5
    alpha: float = 0.05
    rule: AcceptanceRule = AcceptanceRule.PAPER_LITERAL

    def __post_init__(self):
        object.__setattr__(self, "rule", AcceptanceRule(self.rule))
        if not 0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        if self.ps_threshold <= 0 or self.ds_threshold <= 0:
            raise ValueError("thresholds must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "SelectorConfig":
        known = {"ps_threshold", "ds_threshold", "alpha", "rule"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown selector options: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class DispersionMaps:
    mu: np.ndarray
    sigma: np.ndarray
    dispersion: np.ndarray  # NaN where the mean is zero
    valid: np.ndarray


@dataclass(frozen=True)
class FisherOutcome:
    statistic: float
    critical: float
    accepted: bool
    dof: tuple[int, int]
    ratio: float
    lower: Optional[float] = None
    degenerate: bool = False


# ---------------------------------------------------------------- dispersion

def _dispersion(band: np.ndarray) -> DispersionMaps:
    x = np.asarray(band, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 epochs, got {n}")
    mu = x.sum(axis=0) / n
    sigma = np.sqrt(((x - mu) ** 2).sum(axis=0) / (n - 1))
    valid = mu > 0
    d = np.full(mu.shape, np.nan)
    np.divide(sigma, mu, out=d, where=valid)
    return DispersionMaps(mu, sigma, d, valid)


def amplitude_dispersion(stack: InterferogramStack) -> DispersionMaps:
    """D_A = sigma_a / mu_a per pixel, sample std with divisor n_t - 1."""
    return _dispersion(stack.amplitude)


def coherence_dispersion(stack: InterferogramStack) -> DispersionMaps:
    return _dispersion(stack.coherence)


def select_candidates(d_a: DispersionMaps, d_c: DispersionMaps,
                      cfg: SelectorConfig = SelectorConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (ps, ds) maps; a pixel passing both thresholds is PS only."""
    ps = d_a.valid & (np.nan_to_num(d_a.dispersion, nan=np.inf) < cfg.ps_threshold)
    ds = d_c.valid & (np.nan_to_num(d_c.dispersion, nan=np.inf) < cfg.ds_threshold) & ~ps
    return ps, ds


# ------------------------------------------------------------------- voronoi

def voronoi_assign(ps: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Index into ``ps`` of the nearest PS for each DS point.

    Points are integer (row, col) pairs.  Equidistant PS are resolved in favour
    of the lowest linear index, i.e. the lexicographically smallest (row, col).
    """
    ps = np.asarray(ps, dtype=np.int64).reshape(-1, 2)
    ds = np.asarray(ds, dtype=np.int64).reshape(-1, 2)
    if len(ps) == 0:
        raise EmptyPSError("no PS candidates to form Voronoi cells")
    if len(ds) == 0:
        return np.zeros(0, dtype=np.int64)
    # rank PS by linear order so ties go to the smaller rank
    order = np.lexsort((ps[:, 1], ps[:, 0]))
    ranked = ps[order]
    tree = cKDTree(ranked.astype(np.float64))
    k = min(2, len(ranked))
    _, idx = tree.query(ds.astype(np.float64), k=k)
    idx = idx.reshape(len(ds), k)
    d2 = ((ranked[idx] - ds[:, None, :]) ** 2).sum(axis=-1)
    best = idx[:, 0].copy()
    best_d2 = d2[:, 0]
    if k == 2:
        # a tie with the runner-up means other PS may sit on the same circle
        suspect = np.nonzero(d2[:, 1] <= d2[:, 0])[0]
        if len(suspect):
            radius = np.sqrt(best_d2[suspect]) * (1 + 1e-9) + 1e-9
            balls = tree.query_ball_point(ds[suspect].astype(np.float64), radius)
            for j, cand in zip(suspect, balls):
                cand = np.asarray(cand, dtype=np.int64)
                cd2 = ((ranked[cand] - ds[j]) ** 2).sum(axis=-1)
                best[j] = cand[cd2 == cd2.min()].min()
    return order[best]


# ------------------------------------------------------------------ F quantile

def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ConvergenceError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_cdf(f: float, d1: int, d2: int) -> float:
    if f <= 0:
        return 0.0
    return betainc(d1 / 2.0, d2 / 2.0, d1 * f / (d1 * f + d2))


def f_critical(alpha: float, d1: int, d2: int, tol: float = 1e-10, max_iter: int = 400) -> float:
    """Upper-alpha point of F(d1, d2): the value whose CDF equals 1 - alpha.

    Bisects on the incomplete-beta argument x in (0, 1) and maps back through
    f = d2 x / (d1 (1 - x)).
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if d1 < 1 or d2 < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got ({d1}, {d2})")
    p = 1.0 - alpha
    a, b = d1 / 2.0, d2 / 2.0
    lo, hi = 0.0, 1.0
    best_x, best_res = 0.5, math.inf
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        res = betainc(a, b, mid) - p
        if abs(res) < best_res:
            best_x, best_res = mid, abs(res)
        if abs(res) <= tol:
            break
        if res < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-17:
            break
    if best_res > tol:
        raise ConvergenceError(f"F quantile bisection stalled at CDF residual {best_res:.3g}")
    return d2 * best_x / (d1 * (1.0 - best_x))


# ---------------------------------------------------------------- Fisher test

def _critical_bounds(cfg: SelectorConfig, dof: tuple[int, int]) -> tuple[Optional[float], float]:
    if cfg.rule is AcceptanceRule.PAPER_LITERAL:
        return None, f_critical(cfg.alpha, *dof)
    return f_critical(1 - cfg.alpha / 2, *dof), f_critical(cfg.alpha / 2, *dof)


def fisher_test(sigma_ps: float, sigma_ds: float, n_t: int,
                cfg: SelectorConfig = SelectorConfig()) -> FisherOutcome:
    """Variance-ratio test of a DS candidate against its PS.

    The statistic is (sigma_ds / sigma_ps)**2 with (n_t - 1, n_t - 1) degrees
    of freedom.  PAPER_LITERAL accepts when it exceeds the upper-alpha point;
    TWO_SIDED accepts when it lies between the alpha/2 and 1 - alpha/2 points.
    """
    if n_t < 2:
        raise ValueError(f"need n_t >= 2, got {n_t}")
    dof = (n_t - 1, n_t - 1)
    lower, upper = _critical_bounds(cfg, dof)
    if not sigma_ps > 0:
        return FisherOutcome(math.nan, upper, False, dof, math.nan, lower, degenerate=True)
    ratio = sigma_ds / sigma_ps
    stat = ratio * ratio
    if lower is None:
        accepted = stat > upper
    else:
        accepted = lower <= stat <= upper
    return FisherOutcome(stat, upper, bool(accepted), dof, ratio, lower)


# ------------------------------------------------------------------- labelling

@dataclass
class Selection:
    ps: np.ndarray
    ds: np.ndarray
    accepted_ds: np.ndarray
    owner: np.ndarray  # per DS pixel (row-major order): flat index of owning PS, -1 if none
    mask: EliteMask

    def counts(self) -> dict[str, int]:
        return {"ps": int(self.ps.sum()), "ds": int(self.ds.sum()),
                "accepted_ds": int(self.accepted_ds.sum()), "elite": int(self.mask.elite.sum())}


def select_elite(stack: InterferogramStack, cfg: SelectorConfig = SelectorConfig()) -> Selection:
    stack.validate()
    h, w = stack.shape
    d_a = amplitude_dispersion(stack)
    d_c = coherence_dispersion(stack)
    ps, ds = select_candidates(d_a, d_c, cfg)
    ps_pts = np.argwhere(ps)
    ds_pts = np.argwhere(ds)
    accepted = np.zeros_like(ds)
    owner = np.full(len(ds_pts), -1, dtype=np.int64)
    if len(ps_pts) == 0:
        warnings.warn("no PS candidates below the amplitude-dispersion threshold; "
                      "elite set is empty", EmptyPSWarning, stacklevel=2)
        return Selection(ps, ds, accepted, owner, EliteMask.full(np.zeros((h, w), bool)))
    if len(ds_pts):
        own = ps_pts[voronoi_assign(ps_pts, ds_pts)]
        owner = own[:, 0] * w + own[:, 1]
        sig_ps = d_a.sigma[own[:, 0], own[:, 1]]
        sig_ds = d_a.sigma[ds_pts[:, 0], ds_pts[:, 1]]
        lower, upper = _critical_bounds(cfg, (stack.n_t - 1, stack.n_t - 1))
        positive = sig_ps > 0
        ratio = np.divide(sig_ds, sig_ps, out=np.zeros_like(sig_ds), where=positive)
        stat = ratio * ratio
        if lower is None:
            ok = stat > upper
        else:
            ok = (stat >= lower) & (stat <= upper)
        ok &= positive
        accepted[ds_pts[:, 0], ds_pts[:, 1]] = ok
    return Selection(ps, ds, accepted, owner, EliteMask.full(ps | accepted))


def elite_labels(stack: InterferogramStack, cfg: SelectorConfig = SelectorConfig()) -> EliteMask:
    return select_elite(stack, cfg).mask
