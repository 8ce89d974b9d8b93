"""Ancestral and confidence-based adaptive sampling.

Trajectories are simulated in batches: states have shape ``(K, L)`` for
``K`` independent samples of length ``L``. Denoising levels can be shared
by all tokens or set per token (anisotropic schedules).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .elbo import _sample_categorical
from .noise import (
    MixingSchedule,
    Vocab,
    forward_marginal,
    forward_transition,
    marginal_matrix,
    mixing_dist,
    transition_matrix,
)


class ImpossibleStateError(ValueError):
    """The noisy token has zero probability given the clean token."""


@dataclass
class DenoiseSchedule:
    """Log-SNR levels visited while denoising, from ``lambda_min`` to ``lambda_max``.

    ``levels`` has shape ``(T + 1,)`` for a shared schedule or ``(T + 1, L)``
    for per-token trajectories. Shared levels must increase strictly;
    per-token levels may stay put between steps, which leaves that token
    untouched for the step.
    """

    levels: np.ndarray
    anisotropic: bool = False

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=float)
        lv = self.levels
        if lv.ndim != (2 if self.anisotropic else 1):
            raise ValueError("levels must be 1-D (shared) or 2-D (anisotropic)")
        if len(lv) < 2:
            raise ValueError("a schedule needs at least one step (T >= 1)")
        step = np.diff(lv, axis=0)
        if self.anisotropic:
            if np.any(step < 0):
                raise ValueError("per-token levels must be non-decreasing")
        elif np.any(step <= 0):
            raise ValueError("levels must be strictly increasing")

    @property
    def n_steps(self) -> int:
        return len(self.levels) - 1

    def check_range(self, sched: MixingSchedule) -> None:
        lv = self.levels
        if not (np.allclose(lv[0], sched.lambda_min) and np.allclose(lv[-1], sched.lambda_max)):
            raise ValueError("schedule must start at lambda_min and end at lambda_max")
        sched.check(lv)

    def per_token(self, length: int) -> np.ndarray:
        if self.anisotropic:
            if self.levels.shape[1] != length:
                raise ValueError(f"schedule covers {self.levels.shape[1]} tokens, sequence has {length}")
            return self.levels
        return np.repeat(self.levels[:, None], length, axis=1)

    @classmethod
    def uniform(cls, n_steps: int, sched: MixingSchedule) -> "DenoiseSchedule":
        """Evenly spaced in log-SNR."""
        return cls(np.linspace(sched.lambda_min, sched.lambda_max, n_steps + 1))

    @classmethod
    def time_uniform(cls, n_steps: int, sched: MixingSchedule) -> "DenoiseSchedule":
        """Evenly spaced in t under ``alpha = 1 - t``, i.e. ``lam = log((1 - t) / t)``."""
        t_hi = 1.0 / (1.0 + np.exp(sched.lambda_min))
        t_lo = 1.0 / (1.0 + np.exp(sched.lambda_max))
        t = np.linspace(t_hi, t_lo, n_steps + 1)
        lam = np.log1p(-t) - np.log(t)
        lam[0], lam[-1] = sched.lambda_min, sched.lambda_max
        return cls(lam)

    @classmethod
    def sequential(cls, order, sched: MixingSchedule) -> "DenoiseSchedule":
        """One token per step: token ``order[k]`` jumps to ``lambda_max`` at step ``k``."""
        order = np.asarray(order)
        L = len(order)
        if sorted(order.tolist()) != list(range(L)):
            raise ValueError("order must be a permutation of token positions")
        levels = np.full((L + 1, L), sched.lambda_min)
        for k, pos in enumerate(order):
            levels[k + 1 :, pos] = sched.lambda_max
        return cls(levels, anisotropic=True)


@dataclass
class SampleTrace:
    states: list = field(default_factory=list)
    confidences: list = field(default_factory=list)
    final: Optional[np.ndarray] = None

    def to_jsonl(self) -> str:
        lines = []
        for step, state in enumerate(self.states):
            rec = {"step": step, "state": np.asarray(state).tolist()}
            if step - 1 < len(self.confidences) and step >= 1:
                rec["confidence"] = np.asarray(self.confidences[step - 1]).tolist()
            lines.append(json.dumps(rec))
        lines.append(json.dumps({"step": "final", "state": np.asarray(self.final).tolist()}))
        return "\n".join(lines) + "\n"


def backward_posterior(sched: MixingSchedule, vocab: Vocab, z_t: int, x: int, lam_s: float, lam_t: float) -> np.ndarray:
    """``q(z_s | z_t, x)`` for a single token, by summing over the vocabulary."""
    if not lam_s > lam_t:
        raise ValueError("backward posterior needs lam_s > lam_t")
    denom = forward_marginal(sched, vocab, x, lam_t)[z_t]
    if denom <= 0:
        raise ImpossibleStateError(f"token {z_t} cannot arise from {x} at log-SNR {lam_t}")
    fwd = forward_transition(sched, vocab, np.arange(vocab.size), lam_s, lam_t)[:, z_t]
    post = fwd * forward_marginal(sched, vocab, x, lam_s) / denom
    return post / post.sum()


def _reverse_probs(sched, vocab, xhat, z_t, lam_s, lam_t, parameterization):
    """Per-position distribution of ``z_s``; levels have shape ``(L,)``, states ``(K, L)``."""
    L = z_t.shape[1]
    pos = np.arange(L)[None, :]
    T = transition_matrix(sched, vocab, lam_s, lam_t)  # (L, z_s, z_t)
    col = np.swapaxes(T, -1, -2)[pos, z_t]  # (K, L, z_s)
    A_s = marginal_matrix(sched, vocab, lam_s)  # (L, x, z)
    if parameterization == "plug-in":
        p = col * np.einsum("klx,lxz->klz", xhat, A_s)
    else:
        A_t = marginal_matrix(sched, vocab, lam_t)
        a_t = np.swapaxes(A_t, -1, -2)[pos, z_t]  # (K, L, x)
        ok = a_t > 0
        w = np.where(ok, xhat, 0.0)
        tot = w.sum(axis=-1, keepdims=True)
        consistent = ok & (np.arange(vocab.size) != vocab.mask_id)
        fallback = consistent / np.maximum(consistent.sum(axis=-1, keepdims=True), 1)
        w = np.where(tot > 0, w / np.where(tot > 0, tot, 1.0), fallback)
        ratio = np.where(ok, w / np.where(ok, a_t, 1.0), 0.0)
        p = col * np.einsum("klx,lxz->klz", ratio, A_s)
    norm = p.sum(axis=-1, keepdims=True)
    # a prediction that contradicts the observed token leaves it unchanged
    stay = np.eye(vocab.size)[z_t]
    return np.where(norm > 0, p / np.where(norm > 0, norm, 1.0), stay)


def _initial_state(sched, vocab, rng, n_samples, seq_len):
    # pure-noise limit; the residual signal at lambda_min would need the unknown data
    pi = mixing_dist(sched, vocab, sched.lambda_min)
    return _sample_categorical(rng, np.broadcast_to(pi, (n_samples, seq_len, vocab.size)))


def _apply_prompt(z, lam, prompt, sched):
    if prompt is None or len(prompt) == 0:
        return 0
    n = len(prompt)
    if n > z.shape[1]:
        raise ValueError("prompt longer than the sequence")
    z[:, :n] = prompt
    lam[:, :n] = sched.lambda_max
    return n


def ancestral_sample(
    denoiser,
    sched: MixingSchedule,
    vocab: Vocab,
    schedule: DenoiseSchedule,
    seq_len: int,
    prompt=None,
    rng_seed: int = 0,
    n_samples: int = 1,
    parameterization: str = "mixture",
    record_states: bool = True,
) -> SampleTrace:
    """Generate by stepping through ``schedule`` with the reverse process.

    ``parameterization="mixture"`` averages the exact backward posterior
    over the denoiser's clean-token distribution, which is exact when the
    denoiser returns ``p(x_i | z)``. ``"plug-in"`` inserts the prediction into
    the forward posterior instead, which is exact for ``p(x_i | z_{-i})``.
    Remaining mask tokens are decoded from the final prediction.
    """
    if parameterization not in ("mixture", "plug-in"):
        raise ValueError(f"unknown parameterization {parameterization!r}")
    schedule.check_range(sched)
    rng = np.random.default_rng(rng_seed)
    levels = schedule.per_token(seq_len).copy()
    z = _initial_state(sched, vocab, rng, n_samples, seq_len)
    if prompt is not None:
        prompt = vocab.check_tokens(prompt)
        n = _apply_prompt(z, levels, prompt, sched)
    trace = SampleTrace()
    if record_states:
        trace.states.append(z.copy())
    for k in range(schedule.n_steps):
        lam_t, lam_s = levels[k], levels[k + 1]
        xhat = denoiser.predict_proba(z, np.broadcast_to(lam_t, z.shape))
        probs = _reverse_probs(sched, vocab, xhat, z, lam_s, lam_t, parameterization)
        z = _sample_categorical(rng, probs)
        if record_states:
            trace.states.append(z.copy())
    masked = z == vocab.mask_id
    if np.any(masked):
        xhat = denoiser.predict_proba(z, np.broadcast_to(levels[-1], z.shape))
        z = np.where(masked, _sample_categorical(rng, xhat), z)
    if prompt is not None and n:
        z[:, :n] = prompt
    trace.final = z
    return trace


def confidence_prior(sched: MixingSchedule, vocab: Vocab) -> np.ndarray:
    """Noise target ``pi`` at ``lambda_min``: exactly the mask one-hot under pure masking."""
    return mixing_dist(sched, vocab, sched.lambda_min)


def confidence_scores(xhat, z, prior) -> np.ndarray:
    """``prior[z] * (max_v xhat[v] - xhat[z])`` per position."""
    xhat = np.asarray(xhat, dtype=float)
    z = np.asarray(z)
    prior = np.asarray(prior, dtype=float)
    own = np.take_along_axis(xhat, z[..., None], axis=-1)[..., 0]
    return prior[z] * (xhat.max(axis=-1) - own)


def adaptive_sample(
    denoiser,
    sched: MixingSchedule,
    vocab: Vocab,
    n_steps: int,
    seq_len: int,
    k: int = 1,
    prompt=None,
    rng_seed: int = 0,
    n_samples: int = 1,
    allow_unpin: bool = False,
    record_states: bool = True,
) -> SampleTrace:
    """Commit the ``k`` most confident positions per step to the argmax token.

    Committed positions are pinned at ``lambda_max``; the rest stay at
    ``lambda_min``. The denoiser is re-run on the whole sequence each step.
    With ``allow_unpin`` pinned positions stay eligible, so later steps can
    revise them. Ties go to the lowest position index.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(rng_seed)
    prior = confidence_prior(sched, vocab)
    z = _initial_state(sched, vocab, rng, n_samples, seq_len)
    lam = np.full(z.shape, sched.lambda_min)
    pinned = np.zeros(z.shape, dtype=bool)
    fixed = np.zeros(z.shape, dtype=bool)
    if prompt is not None:
        prompt = vocab.check_tokens(prompt)
        n = _apply_prompt(z, lam, prompt, sched)
        fixed[:, :n] = True
        pinned[:, :n] = True
    rows = np.arange(n_samples)[:, None]
    trace = SampleTrace()
    if record_states:
        trace.states.append(z.copy())
    for _ in range(n_steps):
        eligible = ~fixed if allow_unpin else ~pinned
        if not eligible.any():
            break
        xhat = denoiser.predict_proba(z, lam)
        conf = confidence_scores(xhat, z, prior)
        ranked = np.where(eligible, conf, -np.inf)
        top = np.argsort(-ranked, axis=1, kind="stable")[:, :k]
        chosen = np.zeros_like(pinned)
        chosen[rows, top] = True
        chosen &= eligible
        best = np.argmax(xhat, axis=-1)
        z = np.where(chosen, best, z)
        lam = np.where(chosen, sched.lambda_max, lam)
        pinned |= chosen
        if record_states:
            trace.states.append(z.copy())
            trace.confidences.append(conf)
    masked = z == vocab.mask_id
    if np.any(masked):
        xhat = denoiser.predict_proba(z, lam)
        z = np.where(masked, np.argmax(xhat, axis=-1), z)
    trace.final = z
    return trace
