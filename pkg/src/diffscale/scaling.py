"""Compute-optimal scaling laws from iso-FLOP profiles.

The pipeline reads each loss curve at a set of target compute budgets,
keeps the best (batch size, learning rate) configuration per model size,
locates the optimum per budget (raw minimum or parabola vertex), and fits
power laws ``y = A * C**alpha`` (optionally ``+ E``) to the frontier.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .curves import RunRecord, flops_per_token

logger = logging.getLogger(__name__)

CI_LEVELS = {"2sigma": 0.9544997361036416, "95%": 0.95, "99%": 0.99}


class ConvergenceError(RuntimeError):
    pass


class LowQualityWarning(UserWarning):
    pass


@dataclass
class PowerLawFit:
    A: float
    alpha: float
    E: float = 0.0
    r_squared: float = float("nan")
    n_points: int = 0
    with_intercept: bool = False
    ci: dict = field(default_factory=dict)
    ci_level: Optional[float] = None

    def predict(self, x):
        return self.A * np.asarray(x, dtype=float) ** self.alpha + self.E

    def to_json(self) -> dict:
        out = asdict(self)
        out["ci"] = {k: list(v) for k, v in self.ci.items()}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PowerLawFit":
        obj = dict(obj)
        obj["ci"] = {k: tuple(v) for k, v in obj.get("ci", {}).items()}
        return cls(**obj)


def _check_positive(xs, ys):
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-D arrays of equal length")
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("power-law data must be finite")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("power-law data must be positive")
    return xs, ys


def _r_squared(y, pred) -> float:
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


def fit_power_law(xs, ys, with_intercept: bool = False, max_nfev: int = 500) -> PowerLawFit:
    """Fit ``A * x**alpha`` by log-log least squares, or ``A * x**alpha + E`` (E >= 0).

    The intercept fit minimizes log-space residuals with a bounded
    trust-region solver, starting from the no-intercept solution.
    R^2 is reported in log space for both.
    """
    xs, ys = _check_positive(xs, ys)
    n_min = 4 if with_intercept else 3
    if len(xs) < n_min:
        raise ValueError(f"need at least {n_min} points, got {len(xs)}")
    lx, ly = np.log(xs), np.log(ys)
    if np.ptp(lx) == 0:
        raise ValueError("degenerate x-range: all xs are equal")
    alpha, log_a = np.polyfit(lx, ly, 1)
    if not with_intercept:
        pred = log_a + alpha * lx
        return PowerLawFit(float(np.exp(log_a)), float(alpha), 0.0, _r_squared(ly, pred), len(xs), False)

    def resid(theta):
        la, al, e = theta
        return np.log(np.exp(la + al * lx) + e) - ly

    def jac(theta):
        la, al, e = theta
        t = np.exp(la + al * lx)
        f = t + e
        return np.column_stack([t / f, t * lx / f, 1.0 / f])

    res = least_squares(
        resid, x0=[log_a, alpha, 0.0], jac=jac,
        bounds=([-np.inf, -np.inf, 0.0], [np.inf, np.inf, np.inf]),
        method="trf", xtol=1e-10, ftol=1e-12, gtol=1e-12, max_nfev=max_nfev,
    )
    if res.status <= 0:
        raise ConvergenceError(f"intercept fit did not converge: {res.message}")
    la, al, e = res.x
    return PowerLawFit(float(np.exp(la)), float(al), float(e), _r_squared(ly, ly + res.fun), len(xs), True)


class PowerLawRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_power_law` for 1-D inputs."""

    def __init__(self, with_intercept: bool = False):
        self.with_intercept = with_intercept

    def fit(self, X, y):
        x = np.asarray(X, dtype=float).reshape(-1)
        self.fit_ = fit_power_law(x, y, self.with_intercept)
        self.coef_ = self.fit_.alpha
        self.prefactor_ = self.fit_.A
        self.intercept_ = self.fit_.E
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.predict(np.asarray(X, dtype=float).reshape(-1))


def _level(level) -> float:
    if isinstance(level, str):
        try:
            return CI_LEVELS[level]
        except KeyError:
            raise ValueError(f"unknown CI level {level!r}; use one of {sorted(CI_LEVELS)} or a float") from None
    level = float(level)
    if not 0 < level < 1:
        raise ValueError("CI level must lie in (0, 1)")
    return level


def bootstrap_ci(
    fit: Callable[[np.ndarray, np.ndarray], dict],
    xs,
    ys,
    n_resamples: int = 1000,
    level="2sigma",
    rng_seed: int = 0,
    min_distinct: int = 3,
    max_retries: int = 100,
) -> dict:
    """Case-resampling percentile intervals for every coefficient returned by ``fit``.

    ``fit(xs, ys)`` returns a dict of named coefficients. Resamples with
    fewer than ``min_distinct`` distinct xs are redrawn.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n = len(xs)
    if n < 3:
        raise ValueError("bootstrap needs at least 3 points")
    if len(np.unique(xs)) < min_distinct:
        raise ValueError(f"data has fewer than {min_distinct} distinct x values")
    q = _level(level)
    seeds = np.random.SeedSequence(rng_seed).spawn(n_resamples)
    draws: dict[str, list] = {}
    for ss in seeds:
        rng = np.random.default_rng(ss)
        for _ in range(max_retries):
            idx = rng.integers(0, n, n)
            if len(np.unique(xs[idx])) >= min_distinct:
                break
        else:
            raise RuntimeError("could not draw a non-degenerate resample")
        for k, v in fit(xs[idx], ys[idx]).items():
            draws.setdefault(k, []).append(v)
    lo, hi = 100 * (1 - q) / 2, 100 * (1 + q) / 2
    return {k: (float(np.percentile(v, lo)), float(np.percentile(v, hi))) for k, v in draws.items()}


def power_law_with_ci(xs, ys, with_intercept=False, n_resamples=1000, level="2sigma", rng_seed=0) -> PowerLawFit:
    pl = fit_power_law(xs, ys, with_intercept)

    def coefs(x, y):
        f = fit_power_law(x, y, with_intercept)
        return {"A": f.A, "alpha": f.alpha, "E": f.E}

    pl.ci = bootstrap_ci(coefs, xs, ys, n_resamples, level, rng_seed)
    pl.ci_level = _level(level)
    return pl


def _local_line(x, y, x0, window):
    """Value at ``x0`` of a line fitted to ``window`` points around the point closest to ``x0``."""
    n = len(x)
    w = max(1, min(window, n))
    c = int(np.argmin(np.abs(x - x0)))
    lo = min(max(c - w // 2, 0), n - w)
    xs, ys = x[lo : lo + w], y[lo : lo + w]
    if w == 1 or np.ptp(xs) == 0:
        return float(ys[0]), True
    slope, icpt = np.polyfit(xs, ys, 1)
    return float(icpt + slope * x0), w < 3


def value_at(x, y, x0, window: int = 5, space: str = "log") -> Optional[float]:
    """Curve value at ``x0`` from a local line in log-x; ``None`` if ``x0`` is outside the data.

    ``space="log"`` fits log(y), ``"linear"`` fits y itself.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x0 < x.min() or x0 > x.max():
        return None
    lx = np.log(x)
    yy = np.log(y) if space == "log" else y
    v, low = _local_line(lx, yy, np.log(x0), window)
    if low:
        warnings.warn("local fit uses fewer than 3 points", LowQualityWarning, stacklevel=2)
    return float(np.exp(v)) if space == "log" else v


def crossing(x, y, target: float, window: int = 5, space: str = "log") -> Optional[float]:
    """Smallest ``x`` at which ``y`` first drops to ``target``; ``None`` if never reached."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    below = np.flatnonzero(y <= target)
    if below.size == 0 or below[0] == 0 and y[0] < target:
        return None
    i = below[0]
    lx = np.log(x)
    yy = np.log(y) if space == "log" else y
    t = np.log(target) if space == "log" else target
    if y[i] == target:
        return float(x[i])
    n = len(x)
    w = max(2, min(window, n))
    lo = min(max(i - w // 2, 0), n - w)
    slope, icpt = np.polyfit(lx[lo : lo + w], yy[lo : lo + w], 1)
    if slope >= 0:
        # locally flat or rising: fall back to the bracketing segment
        j = max(i - 1, 0)
        slope = (yy[i] - yy[j]) / (lx[i] - lx[j]) if i > j else 0.0
        icpt = yy[i] - slope * lx[i]
        if slope >= 0:
            return float(x[i])
    return float(np.exp((t - icpt) / slope))


@dataclass
class IsoFlopPoint:
    target_C: float
    model_M: float
    loss: float
    tokens_D: float
    params_P: float
    source: str = "raw"
    model: str = ""
    batch_size: Optional[int] = None
    lr: Optional[float] = None


def _single_noise(runs: Sequence[RunRecord]) -> None:
    noises = {r.noise_b for r in runs}
    if len(noises) > 1:
        raise ValueError(f"runs mix noise types {sorted(noises)}; fit one noise type at a time")


def extract_isoflop(
    runs: Sequence[RunRecord],
    targets,
    method: str = "method1",
    window: int = 5,
    space: str = "log",
) -> list[IsoFlopPoint]:
    """One point per (model size, target budget), keeping the best (batch, lr) run."""
    _single_noise(runs)
    best: dict = {}
    for run in runs:
        M = flops_per_token(run.model, method)
        C = run.flops(method)
        ok = C > 0
        for target in targets:
            loss = value_at(C[ok], run.loss[ok], target, window, space)
            if loss is None:
                logger.debug("run %s does not reach C=%g", run.run_id, target)
                continue
            key = (run.model, float(target))
            if key not in best or loss < best[key].loss:
                best[key] = IsoFlopPoint(
                    float(target), M, loss, float(target) / M, run.model.params,
                    "raw", run.model.label, run.batch_size, run.lr,
                )
    return sorted(best.values(), key=lambda p: (p.target_C, p.model_M))


def common_flop_targets(runs: Sequence[RunRecord], n: int = 5, method: str = "method1") -> np.ndarray:
    """``n`` log-spaced budgets inside the compute range reached by every model size."""
    by_model: dict = {}
    for r in runs:
        C = r.flops(method)
        lo, hi = by_model.get(r.model, (np.inf, 0.0))
        by_model[r.model] = (min(lo, C[C > 0].min()), max(hi, C.max()))
    lo = max(v[0] for v in by_model.values())
    hi = min(v[1] for v in by_model.values())
    if not hi > lo * 1.1025:
        raise ValueError("model sizes share no compute range")
    return np.geomspace(lo * 1.05, hi / 1.05, n)


def interior_flop_targets(
    runs: Sequence[RunRecord],
    n: int = 8,
    method: str = "method1",
    min_models: int = 5,
    window: int = 5,
    space: str = "log",
    n_candidates: int = 48,
) -> np.ndarray:
    """Budgets whose raw iso-FLOP minimum is bracketed by smaller and larger models.

    Candidates are log-spaced over the full compute range; those reached
    by fewer than ``min_models`` sizes, or whose best size sits at an end
    of the profile, are dropped. ``n`` survivors are kept, evenly spread.
    """
    lo = min(r.flops(method)[r.flops(method) > 0].min() for r in runs)
    hi = max(r.flops(method).max() for r in runs)
    cand = np.geomspace(lo, hi, n_candidates + 2)[1:-1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowQualityWarning)
        pts = extract_isoflop(runs, cand, method, window, space)
    keep = []
    for C in cand:
        prof = [p for p in pts if p.target_C == float(C)]
        if len(prof) < min_models:
            continue
        i = int(np.argmin([p.loss for p in prof]))
        if 0 < i < len(prof) - 1:
            keep.append(float(C))
    if len(keep) < 4:
        raise ValueError("fewer than 4 budgets have an interior iso-FLOP minimum; pass targets explicitly")
    idx = np.unique(np.round(np.linspace(0, len(keep) - 1, min(n, len(keep)))).astype(int))
    return np.array(keep)[idx]


@dataclass
class ParabolaOptimum:
    M_opt: float
    loss_opt: float
    fallback: bool = False


def parabola_optimum(M, loss) -> ParabolaOptimum:
    """Vertex of a least-squares quadratic in (log M, loss).

    Concave or degenerate fits, and vertices outside the sampled sizes,
    fall back to the raw minimum, flagged and with a warning.
    """
    M = np.asarray(M, dtype=float)
    loss = np.asarray(loss, dtype=float)
    i_min = int(np.argmin(loss))
    raw = ParabolaOptimum(float(M[i_min]), float(loss[i_min]), True)
    if len(np.unique(M)) < 3:
        warnings.warn("parabola needs 3 distinct model sizes; using the raw minimum", LowQualityWarning, stacklevel=2)
        return raw
    u = np.log(M)
    c2, c1, c0 = np.polyfit(u, loss, 2)
    if not c2 > 0:
        warnings.warn("iso-FLOP parabola is not convex; using the raw minimum", LowQualityWarning, stacklevel=2)
        return raw
    u0 = -c1 / (2 * c2)
    if not u.min() <= u0 <= u.max():
        warnings.warn("parabola vertex lies outside the sampled sizes; using the raw minimum", LowQualityWarning, stacklevel=2)
        return raw
    return ParabolaOptimum(float(np.exp(u0)), float(c0 - c1**2 / (4 * c2)), False)


def params_from_flops(M_star, family_M, family_P):
    """Map FLOPs/token to parameters by log-log interpolation along a model family."""
    order = np.argsort(family_M)
    lm = np.log(np.asarray(family_M, dtype=float)[order])
    lp = np.log(np.asarray(family_P, dtype=float)[order])
    if len(lm) == 1:
        return np.asarray(M_star) * family_P[0] / family_M[0]
    x = np.log(np.asarray(M_star, dtype=float))
    # interpolate inside the family, extend the end segments outside it
    y = np.interp(x, lm, lp)
    lo_slope = (lp[1] - lp[0]) / (lm[1] - lm[0])
    hi_slope = (lp[-1] - lp[-2]) / (lm[-1] - lm[-2])
    y = np.where(x < lm[0], lp[0] + lo_slope * (x - lm[0]), y)
    y = np.where(x > lm[-1], lp[-1] + hi_slope * (x - lm[-1]), y)
    return np.exp(y)


@dataclass
class ComputeOptimalLaws:
    M: PowerLawFit
    D: PowerLawFit
    P: PowerLawFit
    L: PowerLawFit
    frontier: list
    points: list
    method: str
    smoothing: str
    complementarity: float = 0.0
    flags: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "smoothing": self.smoothing,
            "laws": {k: getattr(self, k).to_json() for k in ("M", "D", "P", "L")},
            "complementarity": self.complementarity,
            "frontier": [asdict(p) for p in self.frontier],
            "flags": self.flags,
        }


def compute_optimal_laws(
    runs: Sequence[RunRecord],
    targets,
    method: str = "method1",
    smoothing: str = "sq-fit",
    window: int = 5,
    space: str = "log",
    parabola_points: Optional[int] = 7,
    n_bootstrap: int = 0,
    ci_level="2sigma",
    rng_seed: int = 0,
) -> ComputeOptimalLaws:
    """Fit ``M*(C)``, ``D*(C)``, ``P*(C)`` and ``L*(C)`` from iso-FLOP optima.

    With ``smoothing="sq-fit"`` the parabola uses the ``parabola_points``
    model sizes closest (in log M) to the raw minimum; ``None`` uses all.
    """
    if smoothing not in ("raw", "sq-fit"):
        raise ValueError("smoothing must be 'raw' or 'sq-fit'")
    targets = np.sort(np.asarray(targets, dtype=float))
    if len(targets) < 4:
        raise ValueError("need at least 4 target budgets")
    if len({r.model for r in runs}) < 3:
        raise ValueError("need at least 3 model sizes")
    points = extract_isoflop(runs, targets, method, window, space)
    family = {}
    for r in runs:
        family[flops_per_token(r.model, method)] = r.model.params
    fam_M = np.array(sorted(family))
    fam_P = np.array([family[m] for m in fam_M])

    frontier, flags = [], []
    for C in targets:
        pts = [p for p in points if p.target_C == C]
        if len(pts) < 3:
            flags.append(f"C={C:g}: only {len(pts)} model sizes reach this budget; skipped")
            continue
        Ms = np.array([p.model_M for p in pts])
        Ls = np.array([p.loss for p in pts])
        if smoothing == "raw":
            i = int(np.argmin(Ls))
            m_opt, l_opt, src = Ms[i], Ls[i], "raw"
        else:
            sel = np.arange(len(Ms))
            if parabola_points is not None and len(Ms) > parabola_points:
                dist = np.abs(np.log(Ms) - np.log(Ms[np.argmin(Ls)]))
                sel = np.sort(np.argsort(dist, kind="stable")[:parabola_points])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LowQualityWarning)
                opt = parabola_optimum(Ms[sel], Ls[sel])
            m_opt, l_opt, src = opt.M_opt, opt.loss_opt, "sq-fit"
            if opt.fallback:
                flags.append(f"C={C:g}: parabola fell back to the raw minimum")
                src = "raw"
        p_opt = float(params_from_flops(m_opt, fam_M, fam_P))
        frontier.append(IsoFlopPoint(float(C), float(m_opt), float(l_opt), float(C / m_opt), p_opt, src))
    if len(frontier) < 3:
        raise ValueError("fewer than 3 budgets produced an optimum")
    C = np.array([p.target_C for p in frontier])
    series = {
        "M": np.array([p.model_M for p in frontier]),
        "D": np.array([p.tokens_D for p in frontier]),
        "P": np.array([p.params_P for p in frontier]),
        "L": np.array([p.loss for p in frontier]),
    }
    fits = {}
    for k, y in series.items():
        if n_bootstrap:
            fits[k] = power_law_with_ci(C, y, False, n_bootstrap, ci_level, rng_seed)
        else:
            fits[k] = fit_power_law(C, y)
    comp = fits["M"].alpha + fits["D"].alpha
    if abs(comp - 1) > 0.01:
        flags.append(f"alpha_M + alpha_D = {comp:.4f} deviates from 1")
    return ComputeOptimalLaws(
        fits["M"], fits["D"], fits["P"], fits["L"], frontier, points, method, smoothing, comp, flags
    )
