"""Forward noising process of hybrid masking/uniform discrete diffusion.

Everything here is parameterized by the log signal-to-noise ratio
``lam = log(alpha / (1 - alpha))`` so that ``alpha = sigmoid(lam)``.
All functions broadcast over arrays of ``lam`` and return probability
vectors along the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

NOISE_SHIFTS = {
    "masked": -1000.0,
    "low-uniform": -2.0,
    "balanced": 0.0,
    "high-uniform": 2.0,
    "uniform": 1000.0,
}


class RangeError(ValueError):
    """A log-SNR value fell outside the schedule's clamp range."""


class InvalidScheduleError(ValueError):
    """The mixing schedule produced an invalid (negative) transition."""


@dataclass(frozen=True)
class Vocab:
    """Token alphabet with a distinguished mask symbol.

    ``size`` counts every symbol, including the mask. The optional empty
    (padding) symbol is treated as an ordinary token.
    """

    size: int
    mask_id: int
    empty_id: Optional[int] = None

    def __post_init__(self):
        if self.size < 3:
            raise ValueError(f"vocabulary needs at least 3 symbols, got {self.size}")
        if not 0 <= self.mask_id < self.size:
            raise ValueError(f"mask_id {self.mask_id} out of range for size {self.size}")
        if self.empty_id is not None:
            if not 0 <= self.empty_id < self.size:
                raise ValueError(f"empty_id {self.empty_id} out of range")
            if self.empty_id == self.mask_id:
                raise ValueError("empty_id must differ from mask_id")

    @classmethod
    def with_mask_last(cls, n_clean: int, empty: bool = False) -> "Vocab":
        """``n_clean`` ordinary tokens followed by the mask symbol."""
        size = n_clean + 1
        return cls(size=size, mask_id=n_clean, empty_id=n_clean - 1 if empty else None)

    @property
    def clean_ids(self) -> np.ndarray:
        return np.array([i for i in range(self.size) if i != self.mask_id])

    @property
    def n_clean(self) -> int:
        return self.size - 1

    def uniform(self) -> np.ndarray:
        """Uniform vector over every non-mask symbol."""
        u = np.full(self.size, 1.0 / (self.size - 1))
        u[self.mask_id] = 0.0
        return u

    def mask(self) -> np.ndarray:
        m = np.zeros(self.size)
        m[self.mask_id] = 1.0
        return m

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.size and (not np.issubdtype(tokens.dtype, np.integer)):
            raise ValueError("token indices must be integers")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.size):
            raise ValueError(f"token index out of range for vocabulary of size {self.size}")
        return tokens.astype(np.int64)


@dataclass(frozen=True)
class MixingSchedule:
    """Sigmoid blend between masking and uniform noise.

    ``pi(lam) = sigmoid(a*lam + b) * u + (1 - sigmoid(a*lam + b)) * m``.
    Large negative ``b`` gives pure masking, large positive ``b`` pure
    uniform noise.
    """

    a: float = 1.0
    b: float = 0.0
    lambda_min: float = -9.0
    lambda_max: float = 9.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"slope a must be positive, got {self.a}")
        if not self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must be below lambda_max")

    @classmethod
    def named(cls, noise: str, **kwargs) -> "MixingSchedule":
        try:
            b = NOISE_SHIFTS[noise]
        except KeyError:
            raise ValueError(f"unknown noise type {noise!r}; choose from {sorted(NOISE_SHIFTS)}") from None
        return cls(b=b, **kwargs)

    def check(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        if not np.all(np.isfinite(lam)):
            raise RangeError("log-SNR must be finite")
        if np.any(lam < self.lambda_min) or np.any(lam > self.lambda_max):
            raise RangeError(
                f"log-SNR outside clamp range [{self.lambda_min}, {self.lambda_max}]"
            )
        return lam

    def clamp(self, lam) -> np.ndarray:
        return np.clip(np.asarray(lam, dtype=float), self.lambda_min, self.lambda_max)

    def transition_time(self) -> float:
        """Time t at which masking and uniform noise are mixed 50/50 under alpha = 1 - t."""
        return float(expit(self.b / self.a))


def sigmoid(x):
    return expit(x)


def sigmoid_deriv(x):
    return expit(x) * expit(-x)


def _uniform_weight(sched: MixingSchedule, lam: np.ndarray) -> np.ndarray:
    return expit(sched.a * lam + sched.b)


def mixing_dist(sched: MixingSchedule, vocab: Vocab, lam) -> np.ndarray:
    """Mixing distribution ``pi(lam)``, shape ``lam.shape + (N,)``."""
    lam = sched.check(lam)
    s = _uniform_weight(sched, lam)[..., None]
    pi = s * vocab.uniform() + (1.0 - s) * vocab.mask()
    return pi / pi.sum(axis=-1, keepdims=True)


def mixing_dist_deriv(sched: MixingSchedule, vocab: Vocab, lam) -> np.ndarray:
    """Derivative of ``pi(lam)`` with respect to ``lam``; entries sum to 0."""
    lam = sched.check(lam)
    ds = sched.a * sigmoid_deriv(sched.a * lam + sched.b)
    return ds[..., None] * (vocab.uniform() - vocab.mask())


def _onehot(vocab: Vocab, x) -> np.ndarray:
    x = vocab.check_tokens(x)
    return np.eye(vocab.size)[x]


def forward_marginal(sched: MixingSchedule, vocab: Vocab, x, lam) -> np.ndarray:
    """``q_lam(x) = sigmoid(lam) * onehot(x) + sigmoid(-lam) * pi(lam)``.

    ``x`` and ``lam`` broadcast against each other.
    """
    lam = sched.check(lam)
    onehot = _onehot(vocab, x)
    pi = mixing_dist(sched, vocab, lam)
    return expit(lam)[..., None] * onehot + expit(-lam)[..., None] * pi


def forward_transition(sched: MixingSchedule, vocab: Vocab, z_s, lam_s, lam_t) -> np.ndarray:
    """Transition ``q(z_t | z_s)`` from the cleaner level ``lam_s`` to ``lam_t``.

    Requires ``lam_s >= lam_t``; equality gives the identity transition.
    """
    lam_s = sched.check(lam_s)
    lam_t = sched.check(lam_t)
    if np.any(lam_s < lam_t):
        raise ValueError("transition requires lam_s >= lam_t (s is the less noisy level)")
    onehot = _onehot(vocab, z_s)
    # alpha_{t|s} = sigmoid(lam_t) / sigmoid(lam_s), written stably in log space
    alpha_ts = np.exp(np.log(expit(lam_t)) - np.log(expit(lam_s)))[..., None]
    resid = (
        expit(-lam_t)[..., None] * mixing_dist(sched, vocab, lam_t)
        - alpha_ts * expit(-lam_s)[..., None] * mixing_dist(sched, vocab, lam_s)
    )
    probs = alpha_ts * onehot + resid
    if np.any(probs < -1e-12):
        raise InvalidScheduleError(
            f"negative transition probability {probs.min():.3e}; schedule violates monotonicity"
        )
    probs = np.clip(probs, 0.0, None)
    return probs / probs.sum(axis=-1, keepdims=True)


def transition_matrix(sched: MixingSchedule, vocab: Vocab, lam_s, lam_t) -> np.ndarray:
    """Row-stochastic matrix ``T[z_s, z_t]`` (broadcast over leading axes of the levels)."""
    lam_s = np.asarray(lam_s, dtype=float)[..., None]
    lam_t = np.asarray(lam_t, dtype=float)[..., None]
    return forward_transition(sched, vocab, np.arange(vocab.size), lam_s, lam_t)


def marginal_matrix(sched: MixingSchedule, vocab: Vocab, lam) -> np.ndarray:
    """``A[x, z] = q_lam(x)_z`` for every token pair."""
    lam = np.asarray(lam, dtype=float)[..., None]
    return forward_marginal(sched, vocab, np.arange(vocab.size), lam)


def elbo_coefficient(sched: MixingSchedule, vocab: Vocab, lam) -> np.ndarray:
    """``sigmoid(-lam) * (pi - pi')``: the integrand weight before dividing by ``q_lam(x)``."""
    lam = sched.check(lam)
    return expit(-lam)[..., None] * (
        mixing_dist(sched, vocab, lam) - mixing_dist_deriv(sched, vocab, lam)
    )


def pick(probs: np.ndarray, z) -> np.ndarray:
    """Select entry ``z`` along the last axis, broadcasting ``z`` over the rest."""
    z = np.asarray(z)
    shape = np.broadcast_shapes(probs.shape[:-1], z.shape)
    probs = np.broadcast_to(probs, shape + probs.shape[-1:])
    z = np.broadcast_to(z, shape)
    return np.take_along_axis(probs, z[..., None], axis=-1)[..., 0]


class UndefinedWeightError(ZeroDivisionError):
    pass


def elbo_weight(sched: MixingSchedule, vocab: Vocab, x, z, lam) -> np.ndarray:
    """Per-token ELBO weight ``[sigmoid(-lam)(pi - pi')]_z / [q_lam(x)]_z``."""
    z = vocab.check_tokens(z)
    coef = pick(elbo_coefficient(sched, vocab, lam), z)
    q = pick(forward_marginal(sched, vocab, x, lam), z)
    if np.any(q <= 0):
        raise UndefinedWeightError("token z has zero probability under q_lam(x)")
    w = coef / q
    return w if w.ndim else float(w)


def prior_dist(sched: MixingSchedule, vocab: Vocab) -> np.ndarray:
    """Distribution of a fully noised token at ``lambda_min``.

    The residual signal ``sigmoid(lambda_min)`` is spread uniformly over the
    non-mask tokens (the marginal averaged over a uniform reference token).
    """
    lam = sched.lambda_min
    p = expit(lam) * vocab.uniform() + expit(-lam) * mixing_dist(sched, vocab, lam)
    return p / p.sum()
