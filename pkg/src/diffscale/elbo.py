"""Likelihood bound estimators for hybrid discrete diffusion.

The negative ELBO is an integral over log-SNR of per-token divergences
between the forward marginal of the data and the forward marginal of the
denoiser's prediction. It can be estimated by Monte Carlo with any proposal
density over log-SNR, or integrated deterministically on a grid.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.integrate import simpson
from scipy.special import expit

from .noise import (
    MixingSchedule,
    Vocab,
    elbo_coefficient,
    forward_marginal,
    marginal_matrix,
    mixing_dist,
    pick,
    prior_dist,
)

BPB_PER_NAT = 0.34124
DIVERGENCE_FLOOR = 1e-30


class DivergenceError(ValueError):
    pass


@dataclass(frozen=True)
class LambdaDistribution:
    """Proposal density over log-SNR, truncated to ``[lambda_min, lambda_max]``.

    ``linear`` is the density ``sigmoid'(lam)`` induced by ``alpha = 1 - t``,
    ``uniform`` is flat on the range, and ``unit`` is the improper constant 1
    used by the unweighted training loss.
    """

    kind: Literal["linear", "uniform", "unit"] = "linear"
    lambda_min: float = -9.0
    lambda_max: float = 9.0

    def __post_init__(self):
        if self.kind not in ("linear", "uniform", "unit"):
            raise ValueError(f"unknown log-SNR density {self.kind!r}")
        if not self.lambda_min < self.lambda_max:
            raise ValueError("empty log-SNR range")

    @classmethod
    def for_schedule(cls, kind: str, sched: MixingSchedule) -> "LambdaDistribution":
        return cls(kind, sched.lambda_min, sched.lambda_max)

    @property
    def proper(self) -> bool:
        return self.kind != "unit"

    def mass(self) -> float:
        """Mass of the untruncated density inside the range."""
        if self.kind == "linear":
            return float(expit(self.lambda_max) - expit(self.lambda_min))
        if self.kind == "uniform":
            return 1.0
        return self.lambda_max - self.lambda_min

    def pdf(self, lam) -> np.ndarray:
        """Density of the truncated, renormalized distribution."""
        lam = np.asarray(lam, dtype=float)
        inside = (lam >= self.lambda_min) & (lam <= self.lambda_max)
        if self.kind == "linear":
            dens = expit(lam) * expit(-lam) / self.mass()
        elif self.kind == "uniform":
            dens = np.full_like(lam, 1.0 / (self.lambda_max - self.lambda_min))
        else:
            dens = np.ones_like(lam)
        return np.where(inside, dens, 0.0)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if not self.proper:
            raise ValueError("cannot sample from the improper unit density")
        u = rng.random(size)
        if self.kind == "uniform":
            return self.lambda_min + u * (self.lambda_max - self.lambda_min)
        # inverse CDF of the logistic distribution restricted to the range
        lo, hi = expit(self.lambda_min), expit(self.lambda_max)
        p = lo + u * (hi - lo)
        return np.clip(np.log(p) - np.log1p(-p), self.lambda_min, self.lambda_max)


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    std_error: float
    n_samples: int
    estimator: Literal["monte-carlo", "quadrature"]

    def interval(self, k: float = 3.0) -> tuple[float, float]:
        return self.value - k * self.std_error, self.value + k * self.std_error


def kl_divergence(p, q) -> float:
    """``KL(p || q)`` in nats for probability vectors on the last axis."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any((p > 0) & (q <= 0)):
        raise DivergenceError("q has zero mass where p is positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(np.where(q > 0, q, 1.0))), 0.0)
    out = np.maximum(terms.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def is_divergence(p, q):
    """Itakura-Saito divergence ``p/q - log(p/q) - 1`` for positive scalars."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(p <= 0) or np.any(q <= 0):
        raise DivergenceError("Itakura-Saito divergence needs positive arguments")
    delta = (p - q) / q
    out = delta - np.log1p(delta)
    return float(out) if out.ndim == 0 else out


def _kl_from_diff(q_pred: np.ndarray, diff: np.ndarray) -> np.ndarray:
    """KL(q_pred + diff || q_pred) summed on the last axis.

    Passing the difference explicitly avoids cancellation when the two
    marginals nearly coincide at low SNR.
    """
    q = np.maximum(q_pred, DIVERGENCE_FLOOR)
    p = q_pred + diff
    ratio = diff / q
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log1p(np.maximum(ratio, -1.0)) - diff, q_pred)
    return np.maximum(terms.sum(axis=-1), 0.0)


def _is_from_diff(q_pred: np.ndarray, diff: np.ndarray) -> np.ndarray:
    q = np.maximum(q_pred, DIVERGENCE_FLOOR)
    p = np.maximum(q_pred + diff, DIVERGENCE_FLOOR)
    delta = (p - q) / q
    return np.maximum(delta - np.log1p(delta), 0.0)


def divergence_terms(sched: MixingSchedule, vocab: Vocab, x, z, lam, xhat) -> np.ndarray:
    """``KL(q(x) || q(xhat)) + D_IS(q(x)_z || q(xhat)_z)`` broadcast over leading axes."""
    lam = np.asarray(lam, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    sig = expit(lam)[..., None]
    pi = mixing_dist(sched, vocab, lam)
    q_pred = sig * xhat + expit(-lam)[..., None] * pi
    diff = sig * (np.eye(vocab.size)[np.asarray(x)] - xhat)
    kl = _kl_from_diff(q_pred, diff)
    dis = _is_from_diff(pick(q_pred, z), pick(diff, z))
    return kl + dis


def pointwise_loss(sched: MixingSchedule, vocab: Vocab, x, z, lam, xhat):
    """Weighted per-token integrand ``w_lam(x)_z * (KL + D_IS)``.

    Tokens with zero probability under ``q_lam(x)`` contribute nothing.
    """
    x = vocab.check_tokens(x)
    z = vocab.check_tokens(z)
    lam = sched.check(lam)
    coef = pick(elbo_coefficient(sched, vocab, lam), z)
    q = pick(forward_marginal(sched, vocab, x, lam), z)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(q > 0, coef / np.where(q > 0, q, 1.0), 0.0)
    out = w * divergence_terms(sched, vocab, x, z, lam, xhat)
    return float(out) if out.ndim == 0 else out


def nats_to_bpb(nll, factor: float = BPB_PER_NAT):
    """Convert nats per token to bits per byte for a tokenizer-specific factor."""
    nll = np.asarray(nll, dtype=float)
    if np.any(nll < 0):
        raise ValueError("negative log-likelihood")
    out = factor * nll
    return float(out) if out.ndim == 0 else out


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    return np.minimum((u >= cdf).sum(axis=-1), probs.shape[-1] - 1)


def sample_forward(sched: MixingSchedule, vocab: Vocab, x, lam, rng: np.random.Generator) -> np.ndarray:
    """Draw ``z ~ q_lam(x)`` independently per token."""
    return _sample_categorical(rng, forward_marginal(sched, vocab, x, lam))


def nelbo_monte_carlo(
    seq,
    denoiser,
    sched: MixingSchedule,
    vocab: Vocab,
    p_lambda: LambdaDistribution,
    n_samples: int,
    rng_seed: int = 0,
    chunk_size: int = 50_000,
) -> ElboEstimate:
    """Importance-sampled NELBO in nats per token (the constant term excluded).

    Each sample draws one log-SNR from ``p_lambda`` (shared by all tokens)
    and a noisy sequence from the forward process.
    """
    x = vocab.check_tokens(seq)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("expected a non-empty 1-D token sequence")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not p_lambda.proper:
        raise ValueError("Monte Carlo estimation needs a proper log-SNR density")
    n_chunks = -(-n_samples // chunk_size)
    seeds = np.random.SeedSequence(rng_seed).spawn(n_chunks)
    total = total_sq = 0.0
    done = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        k = min(chunk_size, n_samples - done)
        lam = p_lambda.sample(rng, k)
        lam_tok = np.broadcast_to(lam[:, None], (k, x.size))
        z = sample_forward(sched, vocab, x[None, :], lam_tok, rng)
        xhat = denoiser.predict_proba(z, lam_tok)
        per_seq = pointwise_loss(sched, vocab, x[None, :], z, lam_tok, xhat).sum(axis=1)
        vals = per_seq / p_lambda.pdf(lam) / x.size
        total += vals.sum()
        total_sq += np.square(vals).sum()
        done += k
    mean = total / n_samples
    var = max(total_sq / n_samples - mean**2, 0.0)
    se = np.sqrt(var / max(n_samples - 1, 1))
    return ElboEstimate(float(mean), float(se), n_samples, "monte-carlo")


def _support(sched: MixingSchedule, vocab: Vocab, x_i: int, grid: np.ndarray) -> np.ndarray:
    q = forward_marginal(sched, vocab, x_i, grid)
    return np.flatnonzero(q.max(axis=0) > 0)


@functools.lru_cache(maxsize=16)
def _simpson_weights(lo: float, hi: float, n: int) -> np.ndarray:
    grid = np.linspace(lo, hi, n)
    w = simpson(np.eye(n), x=grid, axis=-1)
    w.setflags(write=False)
    return w


def quadrature_weights(grid: np.ndarray) -> np.ndarray:
    """Composite Simpson weights for a uniform ``grid`` (scipy's even-count end handling)."""
    return _simpson_weights(float(grid[0]), float(grid[-1]), int(grid.size))


def nelbo_integrand(seq, denoiser, sched: MixingSchedule, vocab: Vocab, grid) -> np.ndarray:
    """Exact expectation over noisy sequences of the summed per-token integrand.

    Enumerates every noisy sequence in the forward-process support, so only
    suitable for short sequences and small vocabularies.
    """
    x = vocab.check_tokens(seq)
    grid = sched.check(grid)
    supports = [_support(sched, vocab, int(xi), grid) for xi in x]
    combos = np.array(list(itertools.product(*supports)), dtype=np.int64)
    n_z, L = combos.shape
    coef_all = elbo_coefficient(sched, vocab, grid)  # (G, N)
    out = np.zeros(grid.size)
    step = max(1, 2_000_000 // max(n_z * L * vocab.size, 1))
    for g0 in range(0, grid.size, step):
        lam = grid[g0 : g0 + step]
        G = lam.size
        A = marginal_matrix(sched, vocab, lam)  # (G, N, N)
        qz = A[:, x[None, :], combos]  # (G, Z, L): q_lam(x_i)_{z_i}
        lam_tok = np.broadcast_to(lam[:, None, None], (G, n_z, L))
        z_rep = np.broadcast_to(combos[None], (G, n_z, L))
        xhat = denoiser.predict_proba(z_rep.reshape(-1, L), lam_tok.reshape(-1, L))
        xhat = xhat.reshape(G, n_z, L, vocab.size)
        div = divergence_terms(sched, vocab, x[None, None, :], z_rep, lam_tok, xhat)
        coef = coef_all[g0 : g0 + G][:, combos]  # (G, Z, L)
        others = np.ones_like(qz)
        for i in range(L):
            others[..., i] = np.prod(np.delete(qz, i, axis=-1), axis=-1)
        out[g0 : g0 + G] = (others * coef * div).sum(axis=(1, 2))
    return out


def endpoint_terms(seq, sched: MixingSchedule, vocab: Vocab) -> float:
    """Prior and reconstruction terms of the bound, summed over tokens.

    The prior term is ``KL(q_{lambda_min}(x) || prior)``. The reconstruction
    term uses the likelihood decoder ``p(x | z) propto q_{lambda_max}(x)_z``
    over non-mask tokens, which needs no denoiser call.
    """
    x = vocab.check_tokens(seq)
    prior = prior_dist(sched, vocab)
    q_min = forward_marginal(sched, vocab, x, sched.lambda_min)
    prior_kl = kl_divergence(q_min, np.broadcast_to(prior, q_min.shape))
    A = marginal_matrix(sched, vocab, sched.lambda_max)  # (x, z)
    A_clean = A[vocab.clean_ids]
    dec = A / np.maximum(A_clean.sum(axis=0, keepdims=True), DIVERGENCE_FLOOR)
    q_max = A[x]  # (L, N)
    with np.errstate(divide="ignore"):
        nll = np.where(q_max > 0, -np.log(np.maximum(dec[x], DIVERGENCE_FLOOR)), 0.0)
    recon = (q_max * nll).sum(axis=-1)
    return float(np.sum(prior_kl) + recon.sum())


def nelbo_quadrature(
    seq,
    denoiser,
    sched: MixingSchedule,
    vocab: Vocab,
    n_grid: int = 512,
    include_endpoints: bool = False,
) -> ElboEstimate:
    """Simpson-rule NELBO in nats per token over a uniform log-SNR grid.

    By default only the integral is reported (constant term set to 0). With
    ``include_endpoints`` the prior and reconstruction terms are added, which
    makes the value a proper upper bound on the sequence NLL.
    """
    if n_grid < 16:
        raise ValueError("n_grid must be >= 16")
    x = vocab.check_tokens(seq)
    grid = np.linspace(sched.lambda_min, sched.lambda_max, n_grid)
    f = nelbo_integrand(x, denoiser, sched, vocab, grid)
    value = float(quadrature_weights(grid) @ f)
    if include_endpoints:
        value += endpoint_terms(x, sched, vocab)
    return ElboEstimate(value / x.size, 0.0, n_grid, "quadrature")


def dataset_nelbo(data, denoiser, sched, vocab, n_grid=512, include_endpoints=False) -> float:
    """Probability-weighted mean per-token quadrature NELBO over an enumerable dataset."""
    vals = [
        nelbo_quadrature(s, denoiser, sched, vocab, n_grid, include_endpoints).value
        for s in data.sequences
    ]
    return float(np.dot(data.weights, vals))


def surrogate_loss(seq, denoiser, sched, vocab, lam, z=None, rng=None, loss_mask=None) -> float:
    """Unweighted training objective: summed integrand with unit density.

    ``lam`` carries one log-SNR per token. When ``z`` is omitted a noisy
    sequence is drawn from the forward process with ``rng``.
    """
    x = vocab.check_tokens(seq)
    lam = sched.check(lam)
    if lam.shape != x.shape:
        raise ValueError(f"expected {x.shape} log-SNR values, got {lam.shape}")
    if z is None:
        z = sample_forward(sched, vocab, x, lam, rng if rng is not None else np.random.default_rng())
    z = vocab.check_tokens(z)
    xhat = denoiser.predict_proba(z[None], lam[None])[0]
    per_tok = pointwise_loss(sched, vocab, x, z, lam, xhat)
    if loss_mask is not None:
        per_tok = per_tok * np.asarray(loss_mask, dtype=float)
    return float(np.sum(per_tok))
