"""Synthetic ground truth for the fitting pipelines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .curves import ModelSpec, RunRecord, flops_per_token, run_from_curve


def family_model(layers: int, seq_len: int = 2048, width_per_layer: int = 64) -> ModelSpec:
    """Model with ``d = width_per_layer * layers`` and ``P = 12 L d^2`` non-embedding parameters."""
    d = width_per_layer * layers
    return ModelSpec(layers=layers, hidden=d, heads=max(1, d // 64), seq_len=seq_len, params=12 * layers * d * d)


def log_spaced_family(n: int, d_lo: float = 256, d_hi: float = 4096, seq_len: int = 2048) -> list[ModelSpec]:
    """``n`` models with hidden sizes evenly spaced in log and ``L = d / 64`` layers (rounded)."""
    out = []
    for d in np.geomspace(d_lo, d_hi, n):
        d = int(round(d))
        L = max(1, int(round(d / 64)))
        out.append(ModelSpec(layers=L, hidden=d, heads=max(1, d // 64), seq_len=seq_len, params=12 * L * d * d))
    return out


@dataclass(frozen=True)
class ChinchillaSurface:
    """``L(M, D) = E + A M^-a + B D^-b`` with M in FLOPs per token and D in tokens."""

    E: float = 1.8
    A: float = 50.0
    a: float = 0.4
    B: float = 300.0
    b: float = 0.4

    def loss(self, M, D):
        return self.E + self.A * np.asarray(M, dtype=float) ** -self.a + self.B * np.asarray(D, dtype=float) ** -self.b

    @property
    def alpha_M(self) -> float:
        return self.b / (self.a + self.b)

    @property
    def alpha_D(self) -> float:
        return self.a / (self.a + self.b)

    def optimal_M(self, C):
        """Minimizer of ``L(M, C / M)``, solved in closed form."""
        coef = (self.a * self.A / (self.b * self.B)) ** (1.0 / (self.a + self.b))
        return coef * np.asarray(C, dtype=float) ** self.alpha_M

    def optimal_loss(self, C):
        M = self.optimal_M(C)
        return self.loss(M, np.asarray(C, dtype=float) / M)

    def brute_force_M(self, C: float) -> float:
        """Numerical minimizer along the iso-FLOP line, for cross-checking."""
        res = minimize_scalar(
            lambda u: float(self.loss(np.exp(u), C / np.exp(u))),
            bounds=(0.0, np.log(C)), method="bounded", options={"xatol": 1e-12},
        )
        return float(np.exp(res.x))

    def budgets_for(self, M_lo: float, M_hi: float, n: int) -> np.ndarray:
        """``n`` log-spaced budgets whose optimal M lies in ``[M_lo, M_hi]``."""
        coef = self.optimal_M(1.0)
        c_lo = (M_lo / coef) ** (1.0 / self.alpha_M)
        c_hi = (M_hi / coef) ** (1.0 / self.alpha_M)
        return np.geomspace(c_lo, c_hi, n)


def chinchilla_runs(
    surface: ChinchillaSurface,
    models: Sequence[ModelSpec],
    method: str = "method1",
    batch_sizes: Sequence[int] = (512,),
    lrs: Sequence[float] = (0.3,),
    n_points: int = 200,
    max_steps: int = 10_000_000,
    lr_penalty: float = 0.02,
    noise_b: float = 0.0,
) -> list[RunRecord]:
    """Loss curves on ``surface``; learning rates away from 0.3 pay a relative penalty."""
    runs = []
    for model in models:
        M = flops_per_token(model, method)
        for bs in batch_sizes:
            steps = np.unique(np.geomspace(1, max_steps, n_points).astype(np.int64))
            D = steps * float(bs) * model.seq_len
            for lr in lrs:
                loss = surface.loss(M, D) * (1 + lr_penalty * abs(np.log(lr / 0.3)))
                runs.append(run_from_curve(model, noise_b, bs, lr, steps, loss, meta={"generator": "chinchilla"}))
    return runs


def hyperbola_points(S_min: float, B_min: float, alpha: float, n: int, noise: float = 0.0, rng=None, spread: float = 4.0):
    """Points on ``((S/S_min)^alpha - 1)((B/B_min)^alpha - 1) = 1`` covering both arms.

    With ``phi`` in (0, 1), ``B = B_min phi^(-1/alpha)`` and
    ``S = S_min (1 - phi)^(-1/alpha)``. ``noise`` is a lognormal sigma
    applied to both coordinates.
    """
    # phi spaced evenly in logit so both asymptotes are approached
    logits = np.linspace(-spread, spread, n)
    phi = 1.0 / (1.0 + np.exp(-logits))
    B = B_min * phi ** (-1.0 / alpha)
    S = S_min * (1 - phi) ** (-1.0 / alpha)
    if noise:
        rng = rng if rng is not None else np.random.default_rng(0)
        B = B * np.exp(noise * rng.standard_normal(n))
        S = S * np.exp(noise * rng.standard_normal(n))
    return B, S
