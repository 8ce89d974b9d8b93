"""Denoisers: exact Bayes posterior, trainable lookup table, and baselines.

Every denoiser exposes ``predict_proba(z, lam)`` taking integer tokens of
shape ``(K, L)`` and per-token log-SNRs of the same shape, and returning
clean-token distributions of shape ``(K, L, N)`` with zero mask mass.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit, softmax
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .noise import MixingSchedule, Vocab, elbo_coefficient, mixing_dist

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class InconsistentObservationError(ValueError):
    """The noisy sequence has zero probability under every data sequence."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite training loss {value} at step {step}")
        self.step = step


@dataclass
class EnumerableDataset:
    """Finite distribution over equal-length token sequences."""

    sequences: np.ndarray
    weights: np.ndarray

    MAX_SEQUENCES = 10_000

    def __post_init__(self):
        self.sequences = np.atleast_2d(np.asarray(self.sequences, dtype=np.int64))
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.sequences) == 0:
            raise ValueError("dataset is empty")
        if len(self.sequences) > self.MAX_SEQUENCES:
            raise ValueError(f"at most {self.MAX_SEQUENCES} sequences can be enumerated")
        if self.weights.shape != (len(self.sequences),):
            raise ValueError("one weight per sequence required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")

    @classmethod
    def uniform(cls, sequences) -> "EnumerableDataset":
        seqs = np.atleast_2d(np.asarray(sequences, dtype=np.int64))
        return cls(seqs, np.full(len(seqs), 1.0 / len(seqs)))

    @classmethod
    def iid(cls, probs, length: int) -> "EnumerableDataset":
        """All sequences of ``length`` tokens drawn independently from ``probs``."""
        probs = np.asarray(probs, dtype=float)
        support = np.flatnonzero(probs > 0)
        seqs = np.array(list(itertools.product(support, repeat=length)), dtype=np.int64)
        weights = np.prod(probs[seqs], axis=1)
        return cls(seqs, weights / weights.sum())

    @classmethod
    def random(cls, rng: np.random.Generator, n_clean: int, length: int, n_seqs: int) -> "EnumerableDataset":
        n_all = n_clean**length
        n_seqs = min(n_seqs, n_all)
        codes = rng.choice(n_all, size=n_seqs, replace=False)
        seqs = np.array([np.unravel_index(c, (n_clean,) * length) for c in codes], dtype=np.int64)
        w = rng.dirichlet(np.ones(n_seqs))
        return cls(seqs.reshape(n_seqs, length), w)

    @property
    def length(self) -> int:
        return self.sequences.shape[1]

    def entropy(self) -> float:
        w = self.weights[self.weights > 0]
        return float(-(w * np.log(w)).sum())

    def nll_per_token(self) -> float:
        """Exact per-token negative log-likelihood of the data distribution."""
        return self.entropy() / self.length

    def marginals(self, n_symbols: int) -> np.ndarray:
        """Per-position token marginals, shape ``(L, n_symbols)``."""
        out = np.zeros((self.length, n_symbols))
        for i in range(self.length):
            np.add.at(out[i], self.sequences[:, i], self.weights)
        return out

    def token_marginal(self) -> "EnumerableDataset":
        """Single-token dataset of the position-pooled marginal."""
        flat = self.sequences.ravel()
        w = np.repeat(self.weights, self.length) / self.length
        toks = np.unique(flat)
        probs = np.array([w[flat == t].sum() for t in toks])
        return EnumerableDataset(toks[:, None], probs / probs.sum())

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.sequences), size=n, p=self.weights)
        return self.sequences[idx]

    def to_json(self) -> dict:
        return {"sequences": self.sequences.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "EnumerableDataset":
        weights = obj.get("weights")
        if weights is None:
            return cls.uniform(obj["sequences"])
        return cls(obj["sequences"], weights)


def _as_batch(z, lam):
    z = np.asarray(z, dtype=np.int64)
    lam = np.asarray(lam, dtype=float)
    squeeze = z.ndim == 1
    z = np.atleast_2d(z)
    lam = np.broadcast_to(np.atleast_2d(lam), z.shape)
    return z, lam, squeeze


class BayesOracleDenoiser(BaseEstimator):
    """Exact Bayes denoiser by enumerating a finite dataset.

    ``mode="posterior"`` returns ``p(x_i = v | z)``, conditioning on the whole
    noisy sequence. ``mode="leave-one-out"`` returns ``p(x_i = v | z_{-i})``,
    which drops the position's own observation. The latter is the minimizer
    of the NELBO when the prediction is plugged into the forward posterior;
    the two agree at masked positions, so they differ only once uniform
    noise is involved.

    ``on_inconsistent="raise"`` rejects noisy sequences that no data sequence
    can produce. ``"factorize"`` instead conditions each such position on its
    own token only (or nothing, if that is impossible too). Samplers that
    update positions independently can reach these states.
    """

    MODES = ("posterior", "leave-one-out")

    def __init__(
        self,
        sched: MixingSchedule = MixingSchedule(),
        vocab: Optional[Vocab] = None,
        mode: str = "posterior",
        on_inconsistent: str = "raise",
        chunk_size: int = 20_000,
    ):
        self.sched = sched
        self.vocab = vocab
        self.mode = mode
        self.on_inconsistent = on_inconsistent
        self.chunk_size = chunk_size

    def fit(self, X, sample_weight=None):
        if self.mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}, got {self.mode!r}")
        if self.on_inconsistent not in ("raise", "factorize"):
            raise ValueError(f"on_inconsistent must be 'raise' or 'factorize', got {self.on_inconsistent!r}")
        if isinstance(X, EnumerableDataset):
            data = X
        elif sample_weight is None:
            data = EnumerableDataset.uniform(X)
        else:
            data = EnumerableDataset(X, np.asarray(sample_weight) / np.sum(sample_weight))
        self.data_ = data
        self.vocab.check_tokens(data.sequences)
        self._onehot_ = np.eye(self.vocab.size)[data.sequences]  # (S, L, N)
        self.n_inconsistent_ = 0
        return self

    def _terms(self, z, lam) -> np.ndarray:
        lam = self.sched.check(lam)
        pi_z = np.take_along_axis(mixing_dist(self.sched, self.vocab, lam), z[..., None], -1)[..., 0]
        match = self.data_.sequences[None, :, :] == z[:, None, :]  # (K, S, L)
        return expit(lam)[:, None, :] * match + (expit(-lam) * pi_z)[:, None, :]

    def likelihood(self, z, lam) -> np.ndarray:
        """``prod_j q_{lam_j}(x_j)_{z_j}`` for every data sequence, shape ``(K, S)``."""
        check_is_fitted(self, "data_")
        z, lam, _ = _as_batch(z, lam)
        return self._terms(z, lam).prod(axis=-1)

    def _weights(self, z, lam) -> np.ndarray:
        """Unnormalized per-position weights over data sequences, shape ``(K, L, S)``."""
        terms = self._terms(z, lam)
        if self.mode == "posterior":
            w = np.repeat(terms.prod(axis=-1)[:, None, :], z.shape[1], axis=1)
        else:
            # product over j != i from prefix and suffix products (terms can be 0)
            ones = np.ones(terms.shape[:2] + (1,))
            left = np.cumprod(np.concatenate([ones, terms[..., :-1]], axis=-1), axis=-1)
            right = np.cumprod(np.concatenate([ones, terms[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
            w = np.moveaxis(left * right, 1, 2)
        return w * self.data_.weights

    def _fallback(self, w, norm, z, lam):
        terms = self._terms(z, lam)  # (K, S, L)
        own = np.moveaxis(terms, 1, 2) * self.data_.weights
        own = np.where(own.sum(axis=-1, keepdims=True) > 0, own, self.data_.weights)
        return np.where((norm <= 0)[..., None], own, w)

    def predict_proba(self, z, lam) -> np.ndarray:
        check_is_fitted(self, "data_")
        z, lam, squeeze = _as_batch(z, lam)
        if z.shape[1] != self.data_.length:
            raise ValueError(f"expected sequences of length {self.data_.length}, got {z.shape[1]}")
        out = np.empty(z.shape + (self.vocab.size,))
        for k0 in range(0, len(z), self.chunk_size):
            sl = slice(k0, k0 + self.chunk_size)
            w = self._weights(z[sl], lam[sl])  # (K, L, S)
            norm = w.sum(axis=-1)
            if np.any(norm <= 0):
                if self.on_inconsistent == "raise":
                    raise InconsistentObservationError("noisy sequence impossible under the dataset")
                self.n_inconsistent_ += int(np.sum(norm <= 0))
                w = self._fallback(w, norm, z[sl], lam[sl])
                norm = w.sum(axis=-1)
            out[sl] = np.einsum("kls,sln->kln", w / norm[..., None], self._onehot_)
        return out[0] if squeeze else out


class UniformDenoiser(BaseEstimator):
    """Predicts the uniform distribution over non-mask tokens everywhere."""

    def __init__(self, vocab: Optional[Vocab] = None):
        self.vocab = vocab

    def fit(self, X=None, sample_weight=None):
        self.probs_ = self.vocab.uniform()
        return self

    def predict_proba(self, z, lam) -> np.ndarray:
        check_is_fitted(self, "probs_")
        z, _, squeeze = _as_batch(z, lam)
        out = np.broadcast_to(self.probs_, z.shape + (self.vocab.size,)).copy()
        return out[0] if squeeze else out


class MarginalDenoiser(BaseEstimator):
    """Predicts each position's data marginal, ignoring the noisy input."""

    def __init__(self, vocab: Optional[Vocab] = None):
        self.vocab = vocab

    def fit(self, X, sample_weight=None):
        data = X if isinstance(X, EnumerableDataset) else EnumerableDataset(
            X, sample_weight if sample_weight is not None else np.full(len(X), 1.0 / len(X))
        )
        self.marginals_ = data.marginals(self.vocab.size)
        return self

    def predict_proba(self, z, lam) -> np.ndarray:
        check_is_fitted(self, "marginals_")
        z, _, squeeze = _as_batch(z, lam)
        out = np.broadcast_to(self.marginals_, z.shape + (self.vocab.size,)).copy()
        return out[0] if squeeze else out


def baseline_denoiser(kind: str, data: EnumerableDataset, vocab: Vocab):
    if kind == "uniform":
        return UniformDenoiser(vocab).fit()
    if kind in ("marginals", "product-of-marginals"):
        return MarginalDenoiser(vocab).fit(data)
    raise ValueError(f"unknown baseline {kind!r}")


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    learning_rate: float = 0.1
    batch_size: int = 64
    warmup_steps: int = 2000

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    @staticmethod
    def beta2_for_batch(batch_size: int) -> float:
        return 0.98 if batch_size >= 256 else 0.99

    def lr_at(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.learning_rate
        return self.learning_rate * min(1.0, step / self.warmup_steps)


class LaProp:
    """Adam variant that normalizes the gradient before momentum.

    ``v <- b2 v + (1 - b2) g^2``; ``m <- b1 m + (1 - b1) g / (sqrt(v_hat) + eps)``;
    ``theta <- theta - lr * m_hat`` with the usual bias corrections.
    """

    def __init__(self, shape, beta1=0.9, beta2=0.99, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        v_hat = self.v / (1 - self.beta2**self.t)
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad / (np.sqrt(v_hat) + self.eps)
        params -= lr * self.m / (1 - self.beta1**self.t)


class TabularDenoiser(BaseEstimator):
    """Lookup-table denoiser keyed by (log-SNR bucket, observed token).

    The prediction for a position is a softmax over non-mask tokens of the
    logit row for its bucket and observed token; context is ignored.
    """

    def __init__(self, sched: MixingSchedule = MixingSchedule(), vocab: Optional[Vocab] = None, n_buckets: int = 16):
        self.sched = sched
        self.vocab = vocab
        self.n_buckets = n_buckets

    def init_params(self, logits: Optional[np.ndarray] = None) -> "TabularDenoiser":
        if self.n_buckets < 1:
            raise ValueError("n_buckets must be >= 1")
        shape = (self.n_buckets, self.vocab.size, self.vocab.size)
        self.logits_ = np.zeros(shape) if logits is None else np.array(logits, dtype=float).reshape(shape)
        self.optimizer_ = None
        return self

    @property
    def n_params(self) -> int:
        return self.n_buckets * self.vocab.size * (self.vocab.size - 1)

    def bucket(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        frac = (lam - self.sched.lambda_min) / (self.sched.lambda_max - self.sched.lambda_min)
        return np.clip(np.floor(self.n_buckets * frac).astype(np.int64), 0, self.n_buckets - 1)

    def _probs(self, b, z) -> np.ndarray:
        logits = self.logits_[b, z].copy()
        logits[..., self.vocab.mask_id] = -np.inf
        return softmax(logits, axis=-1)

    def predict_proba(self, z, lam) -> np.ndarray:
        check_is_fitted(self, "logits_")
        z, lam, squeeze = _as_batch(z, lam)
        out = self._probs(self.bucket(self.sched.check(lam)), z)
        return out[0] if squeeze else out

    def loss_and_grad(self, x, z, lam, loss_mask=None) -> tuple[float, np.ndarray]:
        """Summed unweighted loss over flat token arrays and its gradient in the logits."""
        check_is_fitted(self, "logits_")
        sched, vocab = self.sched, self.vocab
        x, z, lam = np.ravel(x), np.ravel(z), np.ravel(lam)
        mask = np.ones(x.shape) if loss_mask is None else np.ravel(loss_mask).astype(float)
        b = self.bucket(lam)
        xhat = self._probs(b, z)
        sig = expit(lam)[:, None]
        pi = mixing_dist(sched, vocab, lam)
        eye = np.eye(vocab.size)
        p = sig * eye[x] + expit(-lam)[:, None] * pi
        q = np.maximum(sig * xhat + expit(-lam)[:, None] * pi, 1e-30)
        rows = np.arange(x.size)
        p_z, q_z = p[rows, z], q[rows, z]
        coef = elbo_coefficient(sched, vocab, lam)[rows, z]
        w = np.where(p_z > 0, coef / np.where(p_z > 0, p_z, 1.0), 0.0) * mask
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0) / q), 0.0).sum(axis=1)
        r = np.maximum(p_z, 1e-30) / q_z
        dis = r - np.log(r) - 1.0
        loss = float(np.sum(w * (kl + dis)))

        g_q = -p / q
        g_q[rows, z] += 1.0 / q_z - p_z / q_z**2
        g_xhat = (w[:, None] * sig) * g_q
        g_logit = xhat * (g_xhat - np.sum(xhat * g_xhat, axis=1, keepdims=True))
        grad = np.zeros_like(self.logits_)
        np.add.at(grad, (b, z), g_logit)
        return loss, grad

    def fit(self, X, sample_weight=None, **train_kwargs):
        """Train on sequences (or an :class:`EnumerableDataset`); see :func:`train_tabular`."""
        data = X if isinstance(X, EnumerableDataset) else EnumerableDataset(
            X, sample_weight if sample_weight is not None else np.full(len(X), 1.0 / len(X))
        )
        model, curve = train_tabular(data, self.sched, self.vocab, n_buckets=self.n_buckets, **train_kwargs)
        self.logits_ = model.logits_
        self.optimizer_ = model.optimizer_
        self.loss_curve_ = curve
        return self

    def save(self, path) -> None:
        check_is_fitted(self, "logits_")
        opt = self.optimizer_
        record = {
            "format": "diffscale.tabular",
            "version": CHECKPOINT_VERSION,
            "vocab": asdict(self.vocab),
            "schedule": asdict(self.sched),
            "n_buckets": self.n_buckets,
            "logits": self.logits_.tolist(),
            "optimizer": None if opt is None else {
                "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t,
                "m": opt.m.tolist(), "v": opt.v.tolist(),
            },
        }
        Path(path).write_text(json.dumps(record))

    @classmethod
    def load(cls, path) -> "TabularDenoiser":
        record = json.loads(Path(path).read_text())
        if record.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {record.get('version')}")
        model = cls(MixingSchedule(**record["schedule"]), Vocab(**record["vocab"]), record["n_buckets"])
        model.init_params(np.array(record["logits"]))
        opt = record.get("optimizer")
        if opt is not None:
            model.optimizer_ = LaProp(model.logits_.shape, opt["beta1"], opt["beta2"], opt["eps"])
            model.optimizer_.t = opt["t"]
            model.optimizer_.m = np.array(opt["m"])
            model.optimizer_.v = np.array(opt["v"])
        return model


@dataclass
class LossCurve:
    steps: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    surrogate: list = field(default_factory=list)
    eval_steps: list = field(default_factory=list)
    eval_nelbo: list = field(default_factory=list)


@dataclass
class TrainingBatch:
    x: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    loss_mask: np.ndarray
    prompt_mask: np.ndarray


def sample_linear_lambda(rng: np.random.Generator, sched: MixingSchedule, size) -> np.ndarray:
    """Log-SNR under ``alpha = 1 - t`` with uniform t, clamped to the schedule range."""
    t = rng.random(size)
    with np.errstate(divide="ignore"):
        lam = np.log1p(-t) - np.log(t)
    return sched.clamp(lam)


def prompt_length(r: np.ndarray, length: int) -> np.ndarray:
    """``floor(length * arccos(r))`` clamped so at least one token is left to complete."""
    return np.minimum(np.floor(length * np.arccos(r)).astype(np.int64), length - 1)


def training_batch(
    rng: np.random.Generator,
    data: EnumerableDataset,
    sched: MixingSchedule,
    vocab: Vocab,
    batch_size: int,
    forcing_fraction: float = 0.5,
    prompt_fraction: float = 0.2,
    empty_fraction_max: float = 0.0,
) -> TrainingBatch:
    """Draw one minibatch with diffusion forcing, prompts and empty-token padding."""
    from .elbo import sample_forward

    for name, frac in (("forcing", forcing_fraction), ("prompt", prompt_fraction), ("empty", empty_fraction_max)):
        if not 0 <= frac <= 1:
            raise ValueError(f"{name} fraction must lie in [0, 1]")
    x = data.sample(rng, batch_size)
    L = x.shape[1]
    valid = np.ones_like(x, dtype=bool)
    if empty_fraction_max > 0:
        if vocab.empty_id is None:
            raise ValueError("empty-token augmentation needs a vocabulary with empty_id")
        extra = int(math.floor(empty_fraction_max * L))
        n_empty = np.floor(rng.uniform(0, empty_fraction_max, batch_size) * L).astype(np.int64)
        x = np.concatenate([x, np.full((batch_size, extra), vocab.empty_id)], axis=1)
        valid = np.arange(L + extra)[None, :] < (L + n_empty)[:, None]
    width = x.shape[1]
    forced = rng.random(batch_size) < forcing_fraction
    lam = np.where(
        forced[:, None],
        sample_linear_lambda(rng, sched, (batch_size, width)),
        sample_linear_lambda(rng, sched, (batch_size, 1)),
    )
    prompted = rng.random(batch_size) < prompt_fraction
    n_prompt = np.where(prompted, prompt_length(rng.random(batch_size), L), 0)
    prompt_mask = np.arange(width)[None, :] < n_prompt[:, None]
    lam = np.where(prompt_mask, sched.lambda_max, lam)
    z = sample_forward(sched, vocab, x, lam, rng)
    z = np.where(prompt_mask, x, z)
    loss_mask = valid & ~prompt_mask
    return TrainingBatch(x, z, lam, loss_mask, prompt_mask)


def train_tabular(
    data: EnumerableDataset,
    sched: MixingSchedule,
    vocab: Vocab,
    cfg: Optional[OptimizerConfig] = None,
    n_steps: int = 1000,
    rng_seed: int = 0,
    forcing_fraction: float = 0.5,
    prompt_fraction: float = 0.2,
    empty_fraction_max: float = 0.0,
    n_buckets: int = 16,
    eval_every: int = 0,
    n_grid_eval: int = 128,
    init_logits: Optional[np.ndarray] = None,
    eval_steps=None,
) -> tuple[TabularDenoiser, LossCurve]:
    """Train a :class:`TabularDenoiser` with LaProp on the unweighted loss.

    The quadrature NELBO (per token, on the position-pooled marginal, which
    is exact for context-free models) is recorded every ``eval_every``
    steps, at the explicit ``eval_steps``, and after the last step whenever
    either is given.
    """
    from .elbo import dataset_nelbo

    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    cfg = cfg or OptimizerConfig()
    rng = np.random.default_rng(rng_seed)
    model = TabularDenoiser(sched, vocab, n_buckets).init_params(init_logits)
    opt = LaProp(model.logits_.shape, cfg.beta1, cfg.beta2, cfg.eps)
    model.optimizer_ = opt
    eval_data = data.token_marginal()
    eval_set = set(int(k) for k in (eval_steps or ()))
    curve = LossCurve()
    tokens_per_step = cfg.batch_size * data.length
    for step in range(1, n_steps + 1):
        batch = training_batch(rng, data, sched, vocab, cfg.batch_size, forcing_fraction, prompt_fraction, empty_fraction_max)
        loss, grad = model.loss_and_grad(batch.x, batch.z, batch.lam, batch.loss_mask)
        n_tok = max(int(batch.loss_mask.sum()), 1)
        loss /= n_tok
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        opt.step(model.logits_, grad / n_tok, cfg.lr_at(step))
        curve.steps.append(step)
        curve.tokens.append(step * tokens_per_step)
        curve.surrogate.append(loss)
        due = step in eval_set or (eval_every and step % eval_every == 0)
        if due or ((eval_every or eval_set) and step == n_steps):
            curve.eval_steps.append(step)
            curve.eval_nelbo.append(dataset_nelbo(eval_data, model, sched, vocab, n_grid_eval))
    return model, curve
