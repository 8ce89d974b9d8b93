"""Hyperparameter laws and compute-budget planning.

Batch sizes are handled in tokens (sequences times sequence length) so
that fitted exponents do not depend on the unit; sequence counts are
derived for presentation only.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import brentq, least_squares
from scipy.special import expit, logit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .curves import RunRecord
from .elbo import BPB_PER_NAT
from .scaling import ConvergenceError, PowerLawFit, _r_squared, crossing, value_at

ANNEAL_IMPROVEMENT = 0.0245
ANNEAL_CI = 0.00138
DEFAULT_SEQ_LEN = 2048


class ExtrapolationWarning(UserWarning):
    pass


def load_published_laws(path=None) -> dict:
    """Bundled coefficient tables, or a JSON file of the same layout."""
    if path is None:
        text = resources.files("diffscale.fixtures").joinpath("published_laws.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


# -- hyperparameter laws ---------------------------------------------------

def loglog_fit(x, y, level: float = 0.99) -> PowerLawFit:
    """OLS of log y on log x with t-based intervals for slope and prefactor."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("law data must be positive")
    lx, ly = np.log(x), np.log(y)
    if np.ptp(lx) == 0:
        raise ValueError("degenerate x-range: all xs are equal")
    res = stats.linregress(lx, ly)
    pred = res.intercept + res.slope * lx
    n = len(x)
    ci = {}
    if n > 2:
        t = stats.t.ppf(0.5 + level / 2, n - 2)
        ci["alpha"] = (res.slope - t * res.stderr, res.slope + t * res.stderr)
        ci["A"] = (math.exp(res.intercept - t * res.intercept_stderr), math.exp(res.intercept + t * res.intercept_stderr))
    return PowerLawFit(math.exp(res.intercept), float(res.slope), 0.0, _r_squared(ly, pred), n, False, ci, level)


def fit_batch_law(tokens, batch_tokens, level: float = 0.99) -> PowerLawFit:
    """``B* = A_B * D^e_B``."""
    return loglog_fit(tokens, batch_tokens, level)


def fit_lr_law(batch_tokens, lr, level: float = 0.99) -> PowerLawFit:
    """``eta* = A_eta * B^e_eta``."""
    return loglog_fit(batch_tokens, lr, level)


def anchored_law(exponent: float, x0: float, y0: float) -> PowerLawFit:
    """Power law with a given exponent passing through ``(x0, y0)``."""
    return PowerLawFit(y0 / x0**exponent, exponent)


@dataclass
class HparamPoint:
    model: str
    tokens: float
    batch_tokens: float
    lr: float
    loss: float


def optimal_hparams(
    runs: Sequence[RunRecord], token_targets, window: int = 5, space: str = "log"
) -> list[HparamPoint]:
    """Best (batch size, learning rate) per (model, token budget) by interpolated loss."""
    best: dict = {}
    for run in runs:
        ok = run.tokens > 0
        for D in token_targets:
            loss = value_at(run.tokens[ok], run.loss[ok], D, window, space)
            if loss is None:
                continue
            key = (run.model, run.noise_b, float(D))
            if key not in best or loss < best[key].loss:
                best[key] = HparamPoint(run.model.label, float(D), float(run.batch_size * run.model.seq_len), run.lr, loss)
    return sorted(best.values(), key=lambda p: (p.model, p.tokens))


@dataclass
class BatchLrLaws:
    batch: PowerLawFit
    lr: PowerLawFit
    points: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"batch": self.batch.to_json(), "lr": self.lr.to_json(), "points": [asdict(p) for p in self.points]}


def fit_hparam_laws(runs: Sequence[RunRecord], token_targets, window: int = 5, level: float = 0.99) -> BatchLrLaws:
    pts = optimal_hparams(runs, token_targets, window)
    D = np.array([p.tokens for p in pts])
    B = np.array([p.batch_tokens for p in pts])
    lr = np.array([p.lr for p in pts])
    return BatchLrLaws(fit_batch_law(D, B, level), fit_lr_law(B, lr, level), pts)


# -- hyperbolic iso-loss law -----------------------------------------------

@dataclass
class HyperbolaFit:
    """``((S / S_min)^alpha - 1) * ((B / B_min)^alpha - 1) = 1``."""

    S_min: float
    B_min: float
    alpha: float
    residual: float = 0.0
    target_loss: Optional[float] = None
    unit: str = "sequences"
    n_points: int = 0

    def steps_for(self, B):
        """Steps needed at batch size ``B`` (infinite at or below ``B_min``)."""
        B = np.asarray(B, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = (B / self.B_min) ** self.alpha - 1
            return np.where(r > 0, self.S_min * (1 + 1 / r) ** (1 / self.alpha), np.inf)

    def token_optimal(self) -> tuple[float, float, float]:
        return token_optimal(self)


def token_optimal(fit: HyperbolaFit) -> tuple[float, float, float]:
    """Batch size, steps and tokens minimizing ``D = B * S`` along the curve."""
    k = 2.0 ** (1.0 / fit.alpha)
    B = k * fit.B_min
    S = k * fit.S_min
    return B, S, B * S


def _hyperbola_residuals(theta, u, v):
    p, q, la = theta[:3]
    phi = expit(theta[3:])
    inv = math.exp(-la)
    return np.concatenate([u - p + np.log(phi) * inv, v - q + np.log1p(-phi) * inv])


def _hyperbola_jac(theta, u, v):
    n = len(u)
    la = theta[2]
    phi = expit(theta[3:])
    inv = math.exp(-la)
    J = np.zeros((2 * n, 3 + n))
    J[:n, 0] = -1.0
    J[n:, 1] = -1.0
    J[:n, 2] = -np.log(phi) * inv
    J[n:, 2] = -np.log1p(-phi) * inv
    idx = np.arange(n)
    J[idx, 3 + idx] = inv * (1 - phi)
    J[n + idx, 3 + idx] = -inv * phi
    return J


def fit_hyperbola(
    B, S, target_loss: Optional[float] = None, unit: str = "sequences", alpha0: float = 0.15, max_nfev: int = 2000
) -> HyperbolaFit:
    """Orthogonal least squares in (log B, log S) with one curve position per point.

    Each point is matched to ``(B_min phi^(-1/alpha), S_min (1-phi)^(-1/alpha))``
    and both coordinates' log errors are minimized jointly.
    """
    B = np.asarray(B, dtype=float)
    S = np.asarray(S, dtype=float)
    if B.shape != S.shape or len(B) < 4:
        raise ValueError("need at least 4 (B, S) points")
    if np.any(B <= 0) or np.any(S <= 0):
        raise ValueError("batch sizes and step counts must be positive")
    u, v = np.log(B), np.log(S)
    p0, q0 = math.log(0.9 * B.min()), math.log(0.9 * S.min())
    # curve position from each coordinate under the initial guess, averaged
    phi_u = np.clip(np.exp(-alpha0 * (u - p0)), 1e-6, 1 - 1e-6)
    phi_v = np.clip(1 - np.exp(-alpha0 * (v - q0)), 1e-6, 1 - 1e-6)
    t0 = logit(np.clip(0.5 * (phi_u + phi_v), 1e-4, 1 - 1e-4))
    x0 = np.concatenate([[p0, q0, math.log(alpha0)], t0])
    res = least_squares(
        _hyperbola_residuals, x0, jac=_hyperbola_jac, args=(u, v),
        method="trf", xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=max_nfev,
    )
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise ConvergenceError(f"hyperbola fit did not converge: {res.message}")
    phi = expit(res.x[3:])
    if phi.max() < 0.5 or phi.min() > 0.5:
        raise ValueError("points cover only one arm of the hyperbola; both asymptotes are needed")
    p, q, la = res.x[:3]
    rms = float(np.sqrt(np.mean(res.fun**2)))
    return HyperbolaFit(math.exp(q), math.exp(p), math.exp(la), rms, target_loss, unit, len(B))


class HyperbolaRegressor(RegressorMixin, BaseEstimator):
    """Estimator form: ``X`` holds batch sizes, ``y`` step counts; predicts steps."""

    def __init__(self, alpha0: float = 0.15):
        self.alpha0 = alpha0

    def fit(self, X, y):
        self.fit_ = fit_hyperbola(np.asarray(X, dtype=float).reshape(-1), y, alpha0=self.alpha0)
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.steps_for(np.asarray(X, dtype=float).reshape(-1))


def iso_loss_points(runs: Sequence[RunRecord], target_loss: float, window: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Fewest steps to reach ``target_loss`` per batch size (best over learning rates)."""
    best: dict = {}
    for run in runs:
        ok = run.steps > 0
        s = crossing(run.steps[ok], run.loss[ok], target_loss, window)
        if s is None:
            continue
        if run.batch_size not in best or s < best[run.batch_size]:
            best[run.batch_size] = s
    bs = np.array(sorted(best), dtype=float)
    return bs, np.array([best[b] for b in sorted(best)])


def minimums_vs_loss(fits: Sequence[HyperbolaFit]) -> dict:
    """Power-law summaries of ``S_min`` and ``B_min`` against target loss.

    Only meaningful inside the range of losses fitted; extrapolation is
    not expected to hold.
    """
    losses = np.array([f.target_loss for f in fits], dtype=float)
    if np.any(~np.isfinite(losses)):
        raise ValueError("every hyperbola needs a target loss")
    warnings.warn(
        f"S_min/B_min power laws are descriptive only within loss range [{losses.min():g}, {losses.max():g}]",
        ExtrapolationWarning, stacklevel=2,
    )
    return {
        "S_min": loglog_fit(losses, [f.S_min for f in fits]),
        "B_min": loglog_fit(losses, [f.B_min for f in fits]),
        "loss_range": (float(losses.min()), float(losses.max())),
    }


# -- parameterization rules ------------------------------------------------

@dataclass(frozen=True)
class CompletePRules:
    sigma_base: float = 0.4
    sigma_aux: float = 0.02
    eta_base_ref: float = 0.3
    batch_ref_seqs: int = 64
    eta_aux_factor: float = 0.02
    eps_base: float = 1e-8
    residual_base: float = 4.0
    output_multiplier: float = 512.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")


def completep_lrs(rules: CompletePRules, d: int, L: int, eta_base: float) -> dict:
    """Per-group learning rates, initialization scales and multipliers for width d, depth L."""
    if d <= 0 or L <= 0:
        raise ValueError("width and depth must be positive")
    return {
        "eta_bulk": eta_base / d,
        "eta_aux": rules.eta_aux_factor * eta_base,
        "eps": rules.eps_base / (d * L),
        "sigma_bulk": rules.sigma_base * d**-0.5,
        "sigma_aux": rules.sigma_aux,
        "residual_multiplier": rules.residual_base / L,
        "output_multiplier": rules.output_multiplier,
    }


def beta2_policy(batch_seqs: float, threshold: int = 256) -> float:
    return 0.98 if batch_seqs >= threshold else 0.99


def anneal_adjust(loss: float, improvement: float = ANNEAL_IMPROVEMENT) -> float:
    """Loss after the learning-rate decay phase: a constant relative improvement."""
    if not loss > 0:
        raise ValueError("loss must be positive")
    return loss * (1 - improvement)


def anneal_interval(loss: float, improvement: float = ANNEAL_IMPROVEMENT, ci: float = ANNEAL_CI) -> tuple[float, float]:
    return anneal_adjust(loss, improvement + ci), anneal_adjust(loss, improvement - ci)


def unanneal(loss: float, improvement: float = ANNEAL_IMPROVEMENT) -> float:
    if not loss > 0:
        raise ValueError("loss must be positive")
    return loss / (1 - improvement)


# -- planning ----------------------------------------------------------------

def family_flops(layers, seq_len: int = DEFAULT_SEQ_LEN, width_per_layer: int = 64, method: str = "method1"):
    """FLOPs/token of the family ``d = width_per_layer * L``, ``P = 12 L d^2`` (continuous in L)."""
    L = np.asarray(layers, dtype=float)
    d = width_per_layer * L
    P = 12 * L * d * d
    return 6 * P + (12 * L * d * seq_len if method == "method1" else 0.0)


def params_for_flops(M: float, seq_len: int = DEFAULT_SEQ_LEN, width_per_layer: int = 64, method: str = "method1") -> tuple[float, float]:
    """Invert the family's FLOPs/token; returns (parameters, continuous depth)."""
    if not M > 0:
        raise ValueError("FLOPs per token must be positive")
    f = lambda L: float(family_flops(L, seq_len, width_per_layer, method)) - M
    hi = 1.0
    while f(hi) < 0:
        hi *= 2
        if hi > 1e9:
            raise ValueError("could not bracket the depth for this FLOP count")
    L = brentq(f, 0.0, hi, xtol=1e-12, rtol=1e-14)
    d = width_per_layer * L
    return 12 * L * d * d, L


def suggest_architecture(M: float, family: Optional[Sequence[tuple]] = None, seq_len: int = DEFAULT_SEQ_LEN,
                         method: str = "method1") -> dict:
    """Nearest (layers, width) by log FLOPs/token; default grid is ``d = 64 L`` for L in 1..256."""
    if family is None:
        family = [(L, 64 * L) for L in range(1, 257)]
    best = None
    for L, d in family:
        P = 12 * L * d * d
        m = 6 * P + (12 * L * d * seq_len if method == "method1" else 0)
        gap = abs(math.log(m / M))
        if best is None or gap < best[0]:
            best = (gap, {"layers": int(L), "hidden": int(d), "params": float(P), "flops_per_token": float(m)})
    return best[1]


@dataclass
class PlannerLaws:
    M: PowerLawFit
    L: PowerLawFit
    batch: PowerLawFit
    lr: PowerLawFit
    method: str = "method1"
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_published(cls, noise: str, method: str = "method1", smoothing: str = "sq-fit", path=None) -> "PlannerLaws":
        tables = load_published_laws(path)
        try:
            row = tables["laws"]["by_noise"][noise][method][smoothing]
        except KeyError:
            raise ValueError(f"no published laws for noise={noise!r}, method={method!r}, smoothing={smoothing!r}") from None
        hp = tables["hparams"]
        b, r = hp["batch"], hp["lr"]
        return cls(
            M=PowerLawFit(row["M"]["A"], row["M"]["alpha"]),
            L=PowerLawFit(row["L"]["A"], row["L"]["alpha"]),
            batch=anchored_law(b["exponent"], b["anchor"]["D"], b["anchor"]["B"]),
            lr=anchored_law(r["exponent"], r["anchor"]["B"], r["anchor"]["eta"]),
            method=method,
            provenance={
                "noise": noise, "method": method, "smoothing": smoothing,
                "source": tables["laws"]["origin"], "batch_law": b["anchor_note"], "lr_law": r["anchor_note"],
            },
        )

    @classmethod
    def from_json(cls, obj: dict) -> "PlannerLaws":
        return cls(
            **{k: PowerLawFit.from_json(obj[k]) for k in ("M", "L", "batch", "lr")},
            method=obj.get("method", "method1"), provenance=obj.get("provenance", {}),
        )

    def to_json(self) -> dict:
        return {**{k: getattr(self, k).to_json() for k in ("M", "L", "batch", "lr")},
                "method": self.method, "provenance": self.provenance}


@dataclass
class PlanResult:
    flops: float
    M: float
    P: float
    D: float
    loss: float
    bpb: float
    loss_annealed: float
    loss_annealed_interval: tuple
    architecture: dict
    batch_tokens: float
    batch_seqs: float
    eta_base: float
    groups: dict
    beta2: float
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["loss_annealed_interval"] = list(self.loss_annealed_interval)
        return out


def plan_run(
    flops: float,
    laws: PlannerLaws,
    rules: CompletePRules = CompletePRules(),
    seq_len: int = DEFAULT_SEQ_LEN,
    beta2_threshold: int = 256,
    family: Optional[Sequence[tuple]] = None,
) -> PlanResult:
    """Model size, data, loss and hyperparameters for a compute budget."""
    if not flops > 0:
        raise ValueError("compute budget must be positive")
    M = float(laws.M.predict(flops))
    D = flops / M
    P, _ = params_for_flops(M, seq_len, method=laws.method)
    loss = float(laws.L.predict(flops))
    arch = suggest_architecture(M, family, seq_len, laws.method)
    B_tok = float(laws.batch.predict(D))
    eta = float(laws.lr.predict(B_tok))
    B_seq = B_tok / seq_len
    return PlanResult(
        flops=float(flops), M=M, P=float(P), D=float(D), loss=loss, bpb=loss * BPB_PER_NAT,
        loss_annealed=anneal_adjust(loss), loss_annealed_interval=anneal_interval(loss),
        architecture=arch, batch_tokens=B_tok, batch_seqs=B_seq, eta_base=eta,
        groups=completep_lrs(rules, arch["hidden"], arch["layers"], eta),
        beta2=beta2_policy(B_seq, beta2_threshold),
        provenance={**laws.provenance, "rules": asdict(rules), "seq_len": seq_len},
    )
