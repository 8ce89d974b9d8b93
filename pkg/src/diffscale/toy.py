"""Desk-scale scaling study with tabular denoisers on an enumerable dataset.

Model size is the number of log-SNR buckets of the lookup table. FLOPs
per token are taken as ``6P`` with ``P`` the number of free logits, so
the resulting runs feed the method-2 pipeline unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .curves import ModelSpec, RunRecord
from .denoisers import BayesOracleDenoiser, EnumerableDataset, OptimizerConfig, train_tabular
from .elbo import dataset_nelbo
from .noise import MixingSchedule, Vocab
from .scaling import common_flop_targets

logger = logging.getLogger(__name__)


def tabular_model_spec(n_buckets: int, vocab: Vocab, seq_len: int) -> ModelSpec:
    return ModelSpec(
        layers=1, hidden=vocab.size, heads=1, seq_len=seq_len,
        params=n_buckets * vocab.size * (vocab.size - 1), vocab_size=vocab.size,
        name=f"tab-{n_buckets}",
    )


@dataclass
class ToyConfig:
    noise: str = "balanced"
    token_probs: tuple = (0.5, 0.25, 0.15, 0.1)
    seq_len: int = 3
    bucket_sizes: tuple = (1, 4, 16)
    batch_sizes: tuple = (16, 32, 64, 128)
    lrs: tuple = (0.003, 0.01)
    n_steps: int = 2000
    warmup_steps: int = 100
    n_evals: int = 24
    n_grid: int = 128
    forcing_fraction: float = 0.5
    prompt_fraction: float = 0.2
    seed: int = 0

    def eval_steps(self) -> list[int]:
        return sorted(set(np.geomspace(10, self.n_steps, self.n_evals).astype(int).tolist()))


@dataclass
class ToyStudy:
    config: ToyConfig
    runs: list
    oracle_nelbo: float
    data_nll: float
    final_nelbo: dict = field(default_factory=dict)

    def best_gap(self, n_buckets: int) -> float:
        """Relative gap of the best final NELBO at a model size to the oracle."""
        vals = [v for (nb, _, _), v in self.final_nelbo.items() if nb == n_buckets]
        return min(vals) / self.oracle_nelbo - 1

    def summary(self) -> dict:
        return {
            "config": asdict(self.config),
            "oracle_nelbo": self.oracle_nelbo,
            "data_nll": self.data_nll,
            "gap_by_size": {nb: self.best_gap(nb) for nb in self.config.bucket_sizes},
        }


def run_toy_study(cfg: ToyConfig = ToyConfig()) -> ToyStudy:
    sched = MixingSchedule.named(cfg.noise)
    probs = np.asarray(cfg.token_probs, dtype=float)
    vocab = Vocab.with_mask_last(len(probs))
    data = EnumerableDataset.iid(probs / probs.sum(), cfg.seq_len)
    pooled = data.token_marginal()
    oracle = BayesOracleDenoiser(sched, vocab, mode="leave-one-out").fit(pooled)
    oracle_nelbo = dataset_nelbo(pooled, oracle, sched, vocab, cfg.n_grid)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(
        len(cfg.bucket_sizes) * len(cfg.batch_sizes) * len(cfg.lrs)
    )
    runs, finals = [], {}
    k = 0
    for nb in cfg.bucket_sizes:
        spec = tabular_model_spec(nb, vocab, cfg.seq_len)
        for bs in cfg.batch_sizes:
            for lr in cfg.lrs:
                opt = OptimizerConfig(
                    learning_rate=lr, batch_size=bs, warmup_steps=cfg.warmup_steps,
                    beta2=OptimizerConfig.beta2_for_batch(bs),
                )
                _, curve = train_tabular(
                    data, sched, vocab, opt, cfg.n_steps, int(seeds[k]),
                    forcing_fraction=cfg.forcing_fraction, prompt_fraction=cfg.prompt_fraction,
                    n_buckets=nb, n_grid_eval=cfg.n_grid, eval_steps=cfg.eval_steps(),
                )
                k += 1
                steps = np.asarray(curve.eval_steps)
                run = RunRecord(
                    spec, sched.b, bs, lr, steps, steps * float(bs) * cfg.seq_len, curve.eval_nelbo,
                    run_id=f"toy-nb{nb}-B{bs}-lr{lr:g}",
                    meta={"n_buckets": nb, "noise": cfg.noise, "oracle_nelbo": oracle_nelbo},
                ).validate()
                runs.append(run)
                finals[(nb, bs, lr)] = curve.eval_nelbo[-1]
                logger.info("trained %s: final NELBO %.5f", run.run_id, curve.eval_nelbo[-1])
    return ToyStudy(cfg, runs, oracle_nelbo, data.nll_per_token(), finals)


def toy_flop_targets(runs, n: int = 5) -> np.ndarray:
    """Budgets reached by every model size (method-2 FLOPs)."""
    return common_flop_targets(runs, n, "method2")


def toy_token_targets(runs, n: int = 6) -> np.ndarray:
    """Token budgets reached by at least two batch sizes."""
    lo = sorted(r.tokens[r.tokens > 0].min() for r in runs)[1]
    hi = sorted((r.tokens.max() for r in runs), reverse=True)[1]
    return np.geomspace(lo * 1.05, hi / 1.05, n)
