"""Command-line entry point: ``diffscale <command> [options]``.

Every command prints its JSON result to stdout and writes it (plus any
JSONL, CSV or SVG artifacts) atomically into the output directory, which
defaults to ``$DIFFSCALE_OUT`` or the current directory.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import warnings
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .curves import SCHEMA_VERSION, RunValidationError, dump_runs, load_runs, manifest_path
from .denoisers import (
    BayesOracleDenoiser,
    EnumerableDataset,
    InconsistentObservationError,
    MarginalDenoiser,
    TabularDenoiser,
    TrainingDivergedError,
    UniformDenoiser,
)
from .elbo import DivergenceError, LambdaDistribution, nelbo_monte_carlo, nelbo_quadrature
from .noise import NOISE_SHIFTS, InvalidScheduleError, MixingSchedule, RangeError, Vocab
from .planner import PlannerLaws, fit_hparam_laws, fit_hyperbola, iso_loss_points, plan_run
from .sampler import DenoiseSchedule, ImpossibleStateError, adaptive_sample, ancestral_sample
from .scaling import ConvergenceError, common_flop_targets, compute_optimal_laws, interior_flop_targets
from .svg import Chart
from .toy import ToyConfig, run_toy_study, toy_token_targets

logger = logging.getLogger("diffscale")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64
ENV_OUT = "DIFFSCALE_OUT"
NUMERIC_ERRORS = (ConvergenceError, TrainingDivergedError, DivergenceError, InvalidScheduleError, FloatingPointError)
INPUT_ERRORS = (
    RunValidationError, InconsistentObservationError, ImpossibleStateError, RangeError,
    ValueError, KeyError, FileNotFoundError, json.JSONDecodeError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- output helpers ----------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Context:
    """Collects inputs and artifacts of one command invocation."""

    def __init__(self, args):
        self.args = args
        self.command = args.command
        self.seed = args.seed
        self.inputs: dict = {}
        out = args.out or os.environ.get(ENV_OUT) or "."
        self.out_dir = Path(out)

    def add_input(self, label: str, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"{label}: no such file {path}")
        self.inputs[label] = {"path": path.name, "sha256": sha256_of(path)}
        return path

    def envelope(self, params: dict, result: dict) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool": {"name": "diffscale", "version": __version__},
            "command": self.command,
            "seed": self.seed,
            "inputs": self.inputs,
            "params": params,
            "result": result,
        }

    def artifact(self, name: str) -> Path:
        return self.out_dir / name

    def write_csv(self, name: str, rows: list[dict]) -> Path:
        buf = io.StringIO()
        if rows:
            cols = list(rows[0])
            w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _csv_cell(r.get(k)) for k in cols})
        path = self.artifact(name)
        atomic_write(path, buf.getvalue())
        return path

    def write_plot(self, name: str, chart: Chart) -> None:
        if self.args.plot:
            atomic_write(self.artifact(name), chart.render())


def _csv_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _emit(ctx: Context, params: dict, result: dict, rows: Optional[list] = None) -> int:
    doc = dumps(ctx.envelope(params, result))
    stem = ctx.command.replace("-", "_")
    if ctx.args.format == "csv":
        ctx.write_csv(f"{stem}.csv", rows if rows is not None else [_flatten(result)])
        # provenance for the CSV table
        atomic_write(ctx.artifact(f"{stem}.meta.json"), dumps(ctx.envelope(params, {"csv": f"{stem}.csv"})))
    else:
        atomic_write(ctx.artifact(f"{stem}.json"), doc)
    sys.stdout.write(doc)
    return EXIT_OK


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            out[key] = json.dumps(_jsonable(v))
        else:
            out[key] = v
    return out


# -- shared input handling ---------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _schedule(args) -> MixingSchedule:
    if args.b is not None:
        return MixingSchedule(b=args.b)
    return MixingSchedule.named(args.noise)


def load_dataset(path: Path) -> tuple[EnumerableDataset, Vocab]:
    """Dataset JSON: ``sequences``, optional ``weights`` and ``n_clean``; the mask id is ``n_clean``."""
    obj = json.loads(path.read_text())
    data = EnumerableDataset.from_json(obj)
    n_clean = int(obj.get("n_clean", int(data.sequences.max()) + 1))
    if data.sequences.max() >= n_clean:
        raise ValueError("dataset tokens must be below n_clean (the mask id)")
    return data, Vocab.with_mask_last(max(n_clean, 2))


def _denoiser(ctx: Context, kind: str, data, sched, vocab, oracle_mode: str):
    if kind == "oracle":
        return BayesOracleDenoiser(sched, vocab, mode=oracle_mode, on_inconsistent="factorize").fit(data)
    if kind == "marginal":
        return MarginalDenoiser(vocab).fit(data)
    if kind == "uniform":
        return UniformDenoiser(vocab).fit()
    if kind == "tabular":
        if not ctx.args.model:
            raise ValueError("--denoiser tabular needs --model")
        model = TabularDenoiser.load(ctx.add_input("model", ctx.args.model))
        if model.vocab.size != vocab.size:
            raise ValueError("model vocabulary does not match the dataset")
        return model
    raise ValueError(f"unknown denoiser {kind!r}")


def _load_runs(ctx: Context, path) -> list:
    p = ctx.add_input("runs", path)
    if p.suffix == ".csv":
        ctx.add_input("runs_manifest", manifest_path(p))
    return load_runs(p)


# -- commands ------------------------------------------------------------------

def cmd_elbo(ctx: Context) -> int:
    a = ctx.args
    data, vocab = load_dataset(ctx.add_input("data", a.data))
    sched = _schedule(a)
    den = _denoiser(ctx, a.denoiser, data, sched, vocab, a.oracle_mode)
    per_seq, ses = [], []
    for k, seq in enumerate(data.sequences):
        if a.estimator == "quadrature":
            est = nelbo_quadrature(seq, den, sched, vocab, a.n_grid, a.endpoints)
        else:
            dist = LambdaDistribution.for_schedule(a.p_lambda, sched)
            seed = int(np.random.SeedSequence([a.seed, k]).generate_state(1)[0])
            est = nelbo_monte_carlo(seq, den, sched, vocab, dist, a.n_samples, seed)
        per_seq.append(est.value)
        ses.append(est.std_error)
    w = data.weights
    value = float(np.dot(w, per_seq))
    stderr = float(np.sqrt(np.dot(w**2, np.square(ses))))
    result = {
        "nelbo_per_token": value,
        "stderr": stderr,
        "exact_nll_per_token": data.nll_per_token(),
        "per_sequence": [
            {"sequence": s.tolist(), "weight": float(wt), "nelbo_per_token": v, "stderr": e}
            for s, wt, v, e in zip(data.sequences, w, per_seq, ses)
        ],
    }
    params = {
        "noise_b": sched.b, "denoiser": a.denoiser, "oracle_mode": a.oracle_mode, "estimator": a.estimator,
        "n_grid": a.n_grid, "n_samples": a.n_samples, "p_lambda": a.p_lambda, "endpoints": a.endpoints,
    }
    rows = [{k: v for k, v in r.items() if k != "sequence"} | {"sequence": " ".join(map(str, r["sequence"]))}
            for r in result["per_sequence"]]
    return _emit(ctx, params, result, rows)


def cmd_sample(ctx: Context) -> int:
    a = ctx.args
    data, vocab = load_dataset(ctx.add_input("data", a.data))
    sched = _schedule(a)
    den = _denoiser(ctx, a.denoiser, data, sched, vocab, a.oracle_mode)
    seq_len = a.seq_len or data.length
    prompt = np.array(a.prompt, dtype=np.int64) if a.prompt else None
    if a.method == "ancestral":
        grid = DenoiseSchedule.time_uniform if a.grid == "time" else DenoiseSchedule.uniform
        trace = ancestral_sample(
            den, sched, vocab, grid(a.steps, sched), seq_len, prompt, a.seed, a.n_samples,
            a.parameterization, record_states=a.trace,
        )
    else:
        trace = adaptive_sample(
            den, sched, vocab, a.steps, seq_len, a.k, prompt, a.seed, a.n_samples,
            a.allow_unpin, record_states=a.trace,
        )
    final = np.asarray(trace.final)
    seqs, counts = np.unique(final, axis=0, return_counts=True)
    freq = counts / counts.sum()
    result = {
        "n_samples": int(final.shape[0]),
        "distribution": [{"sequence": s.tolist(), "frequency": float(f)} for s, f in zip(seqs, freq)],
        "mask_tokens_left": int(np.sum(final == vocab.mask_id)),
    }
    if seq_len == data.length and prompt is None:
        target = {tuple(s): float(wt) for s, wt in zip(data.sequences.tolist(), data.weights)}
        emp = {tuple(s): float(f) for s, f in zip(seqs.tolist(), freq)}
        keys = set(target) | set(emp)
        result["total_variation"] = 0.5 * sum(abs(target.get(k, 0.0) - emp.get(k, 0.0)) for k in keys)
    if a.trace:
        name = "sample_trace.jsonl"
        atomic_write(ctx.artifact(name), trace.to_jsonl())
        result["trace"] = name
    params = {
        "noise_b": sched.b, "denoiser": a.denoiser, "oracle_mode": a.oracle_mode, "method": a.method,
        "steps": a.steps, "grid": a.grid, "parameterization": a.parameterization, "k": a.k,
        "seq_len": seq_len, "prompt": a.prompt, "n_samples": a.n_samples,
    }
    rows = [{"sequence": " ".join(map(str, r["sequence"])), "frequency": r["frequency"]} for r in result["distribution"]]
    return _emit(ctx, params, result, rows)


def cmd_train_toy(ctx: Context) -> int:
    a = ctx.args
    cfg = ToyConfig(
        noise=a.noise, seq_len=a.seq_len, bucket_sizes=tuple(a.bucket_sizes), batch_sizes=tuple(a.batch_sizes),
        lrs=tuple(a.lrs), n_steps=a.steps, warmup_steps=a.warmup, n_evals=a.n_evals, seed=a.seed,
        **({"token_probs": tuple(a.token_probs)} if a.token_probs else {}),
    )
    study = run_toy_study(cfg)
    runs_path = ctx.artifact(a.runs_name)
    runs_path.parent.mkdir(parents=True, exist_ok=True)
    buf = Path(tempfile.mkstemp(dir=runs_path.parent, prefix=".runs.", suffix=".tmp")[1])
    try:
        dump_runs(study.runs, buf, "jsonl")
        os.replace(buf, runs_path)
    finally:
        if buf.exists():
            buf.unlink()
    summary = study.summary()
    result = {**summary, "runs": runs_path.name, "n_runs": len(study.runs)}
    chart = Chart("toy loss curves", "tokens", "NELBO (nats/token)", logx=True)
    for r in study.runs:
        if r.batch_size == max(cfg.batch_sizes) and r.lr == max(cfg.lrs):
            chart.add(r.tokens, r.loss, r.model.label)
    chart.add([study.runs[0].tokens[0], study.runs[-1].tokens[-1]], [study.oracle_nelbo] * 2, "oracle", color="#000000")
    ctx.write_plot("train_toy.svg", chart)
    rows = [{"n_buckets": nb, "gap_to_oracle": g} for nb, g in summary["gap_by_size"].items()]
    return _emit(ctx, summary["config"], result, rows)


def cmd_fit_scaling(ctx: Context) -> int:
    a = ctx.args
    runs = _load_runs(ctx, a.runs)
    if a.noise_b is not None:
        runs = [r for r in runs if r.noise_b == a.noise_b]
        if not runs:
            raise ValueError(f"no runs with noise_b={a.noise_b}")
    target_note = "explicit"
    if a.targets:
        targets = np.asarray(a.targets)
    else:
        try:
            targets = interior_flop_targets(runs, a.n_targets, a.method, window=a.window, space=a.space)
            target_note = "interior minima"
        except ValueError:
            targets = common_flop_targets(runs, a.n_targets, a.method)
            target_note = "common compute range (no interior iso-FLOP minima)"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        laws = compute_optimal_laws(
            runs, targets, a.method, a.smoothing, a.window, a.space, a.parabola_points,
            a.bootstrap, a.ci_level, a.seed,
        )
    result = laws.to_json()
    result["warnings"] = sorted({str(w.message) for w in caught})
    result["targets"] = [float(t) for t in np.sort(targets)]
    result["target_selection"] = target_note
    if a.plot:
        iso = Chart("iso-FLOP profiles", "FLOPs per token M", "loss", logx=True, logy=True)
        for C in result["targets"]:
            pts = [p for p in laws.points if p.target_C == C]
            iso.add([p.model_M for p in pts], [p.loss for p in pts], f"C={C:.2g}")
        iso.add([p.model_M for p in laws.frontier], [p.loss for p in laws.frontier], "optimum", "points", "#000000")
        ctx.write_plot("isoflop.svg", iso)
        fr = Chart("compute-optimal frontier", "compute C", "M*", logx=True, logy=True)
        C = np.array([p.target_C for p in laws.frontier])
        fr.add(C, [p.model_M for p in laws.frontier], "M* (iso-FLOP)", "points")
        fr.add(C, laws.M.predict(C), f"fit alpha={laws.M.alpha:.3f}")
        ctx.write_plot("frontier.svg", fr)
    params = {
        "method": a.method, "smoothing": a.smoothing, "window": a.window, "space": a.space,
        "parabola_points": a.parabola_points, "bootstrap": a.bootstrap, "ci_level": a.ci_level,
        "noise_b": runs[0].noise_b,
    }
    rows = [
        {"C": p.target_C, "M": p.model_M, "D": p.tokens_D, "P": p.params_P, "loss": p.loss, "source": p.source}
        for p in laws.frontier
    ]
    return _emit(ctx, params, result, rows)


def cmd_fit_hparams(ctx: Context) -> int:
    a = ctx.args
    runs = _load_runs(ctx, a.runs)
    targets = np.asarray(a.token_targets) if a.token_targets else toy_token_targets(runs, a.n_targets)
    laws = fit_hparam_laws(runs, targets, a.window, a.level)
    result = laws.to_json()
    result["token_targets"] = [float(t) for t in targets]
    if a.plot:
        pts = laws.points
        D = np.array([p.tokens for p in pts])
        B = np.array([p.batch_tokens for p in pts])
        ch = Chart("optimal batch size", "tokens D", "batch (tokens)", logx=True, logy=True)
        ch.add(D, B, "optimum", "points")
        grid = np.geomspace(D.min(), D.max(), 50)
        ch.add(grid, laws.batch.predict(grid), f"fit alpha={laws.batch.alpha:.3f}")
        ctx.write_plot("batch_law.svg", ch)
        ch = Chart("optimal learning rate", "batch (tokens)", "learning rate", logx=True, logy=True)
        ch.add(B, [p.lr for p in pts], "optimum", "points")
        grid = np.geomspace(B.min(), B.max(), 50)
        ch.add(grid, laws.lr.predict(grid), f"fit alpha={laws.lr.alpha:.3f}")
        ctx.write_plot("lr_law.svg", ch)
    params = {"window": a.window, "level": a.level}
    rows = [p for p in result["points"]]
    return _emit(ctx, params, result, rows)


def _read_points(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if path.suffix == ".csv":
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        try:
            return np.array([float(r["B"]) for r in rows]), np.array([float(r["S"]) for r in rows])
        except (KeyError, ValueError) as exc:
            raise ValueError(f"points CSV needs numeric columns B and S ({exc})") from None
    obj = json.loads(path.read_text())
    return np.asarray(obj["B"], dtype=float), np.asarray(obj["S"], dtype=float)


def cmd_fit_hyperbola(ctx: Context) -> int:
    a = ctx.args
    if bool(a.points) == bool(a.runs):
        raise ValueError("give exactly one of --points or --runs")
    if a.points:
        B, S = _read_points(ctx.add_input("points", a.points))
    else:
        if a.target_loss is None:
            raise ValueError("--runs needs --target-loss")
        B, S = iso_loss_points(_load_runs(ctx, a.runs), a.target_loss, a.window)
    fit = fit_hyperbola(B, S, a.target_loss, a.unit, a.alpha0)
    B_opt, S_opt, D_opt = fit.token_optimal()
    result = {
        "S_min": fit.S_min, "B_min": fit.B_min, "alpha": fit.alpha, "rms_log_residual": fit.residual,
        "target_loss": fit.target_loss, "unit": fit.unit, "n_points": fit.n_points,
        "token_optimal": {"steps": S_opt, "batch": B_opt, "tokens": D_opt},
        "points": {"B": B.tolist(), "S": S.tolist()},
    }
    if a.plot:
        ch = Chart("iso-loss hyperbola", f"batch size ({a.unit})", "steps", logx=True, logy=True)
        ch.add(B, S, "observed", "points")
        grid = fit.B_min * np.geomspace(1.0001, max(B.max() / fit.B_min, 2) * 2, 200)
        ch.add(grid, fit.steps_for(grid), f"fit alpha={fit.alpha:.3f}")
        ch.add([B_opt], [S_opt], "token optimum", "points", "#000000")
        ctx.write_plot("hyperbola.svg", ch)
    params = {"unit": a.unit, "alpha0": a.alpha0, "window": a.window}
    rows = [{"B": b, "S": s, "S_fit": float(fit.steps_for(np.array([b]))[0])} for b, s in zip(B, S)]
    return _emit(ctx, params, result, rows)


def cmd_plan(ctx: Context) -> int:
    a = ctx.args
    if a.laws:
        path = ctx.add_input("laws", a.laws)
        obj = json.loads(path.read_text())
        if "laws" in obj and "by_noise" in obj.get("laws", {}):
            laws = PlannerLaws.from_published(a.noise, a.method, a.smoothing, path)
        else:
            laws = PlannerLaws.from_json(obj)
    else:
        with resources.as_file(resources.files("diffscale.fixtures") / "published_laws.json") as p:
            ctx.add_input("laws", p)
        laws = PlannerLaws.from_published(a.noise, a.method, a.smoothing)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        plan = plan_run(a.flops, laws, seq_len=a.seq_len)
    result = plan.to_json()
    result["warnings"] = sorted({str(w.message) for w in caught})
    params = {"flops": a.flops, "noise": a.noise, "method": a.method, "smoothing": a.smoothing, "seq_len": a.seq_len}
    return _emit(ctx, params, result)


def cmd_validate_runs(ctx: Context) -> int:
    a = ctx.args
    runs = _load_runs(ctx, a.runs)
    models = sorted({r.model.label for r in runs})
    result = {
        "valid": True,
        "n_runs": len(runs),
        "n_points": int(sum(len(r.steps) for r in runs)),
        "models": models,
        "noise_b": sorted({r.noise_b for r in runs}),
        "batch_sizes": sorted({r.batch_size for r in runs}),
        "learning_rates": sorted({r.lr for r in runs}),
    }
    rows = [{"run_id": r.run_id, "model": r.model.label, "batch_size": r.batch_size, "lr": r.lr,
             "noise_b": r.noise_b, "n_points": len(r.steps)} for r in runs]
    return _emit(ctx, {}, result, rows)


# -- parser --------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    p.add_argument("--out", default=d(None), help=f"output directory (default ${ENV_OUT} or .)")
    p.add_argument("--format", choices=("json", "csv"), default=d("json"), help="artifact format")
    p.add_argument("--plot", action="store_true", default=d(False), help="also write SVG plots")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _noise_flags(p):
    p.add_argument("--noise", choices=sorted(NOISE_SHIFTS), default="masked")
    p.add_argument("--b", type=float, default=None, help="explicit mixing shift (overrides --noise)")


def _denoiser_flags(p):
    p.add_argument("--data", required=True, help="dataset JSON (sequences, weights, n_clean)")
    p.add_argument("--denoiser", choices=("oracle", "marginal", "uniform", "tabular"), default="oracle")
    p.add_argument("--model", help="saved tabular denoiser (JSON)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffscale", description="Hybrid discrete diffusion and scaling-law toolkit.")
    parser.add_argument("--version", action="version", version=f"diffscale {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("elbo", cmd_elbo, "NELBO of a denoiser on an enumerable dataset")
    _denoiser_flags(p)
    _noise_flags(p)
    p.add_argument("--oracle-mode", choices=BayesOracleDenoiser.MODES, default="leave-one-out")
    p.add_argument("--estimator", choices=("quadrature", "mc"), default="quadrature")
    p.add_argument("--n-grid", type=int, default=512)
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--p-lambda", choices=("linear", "uniform"), default="linear")
    p.add_argument("--endpoints", action="store_true", help="add prior and reconstruction terms")

    p = add("sample", cmd_sample, "ancestral or confidence-based sampling")
    _denoiser_flags(p)
    _noise_flags(p)
    p.add_argument("--oracle-mode", choices=BayesOracleDenoiser.MODES, default="posterior")
    p.add_argument("--method", choices=("ancestral", "adaptive"), default="ancestral")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--grid", choices=("time", "lambda"), default="time", help="ancestral step grid")
    p.add_argument("--parameterization", choices=("mixture", "plug-in"), default="mixture")
    p.add_argument("--k", type=int, default=1, help="positions committed per adaptive step")
    p.add_argument("--allow-unpin", action="store_true")
    p.add_argument("--n-samples", type=int, default=1000)
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--prompt", type=_ints, default=None, help="comma-separated prompt tokens")
    p.add_argument("--trace", action="store_true", help="write per-step states as JSONL")

    p = add("train-toy", cmd_train_toy, "train tabular denoisers and write RunRecord JSONL")
    p.add_argument("--noise", choices=sorted(NOISE_SHIFTS), default="balanced")
    p.add_argument("--token-probs", type=_floats, default=None)
    p.add_argument("--seq-len", type=int, default=3)
    p.add_argument("--bucket-sizes", type=_ints, default=[1, 4, 16])
    p.add_argument("--batch-sizes", type=_ints, default=[16, 32, 64, 128])
    p.add_argument("--lrs", type=_floats, default=[0.003, 0.01])
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--n-evals", type=int, default=24)
    p.add_argument("--runs-name", default="toy_runs.jsonl")

    p = add("fit-scaling", cmd_fit_scaling, "compute-optimal laws from iso-FLOP profiles")
    p.add_argument("--runs", required=True)
    p.add_argument("--method", choices=("method1", "method2"), default="method1")
    p.add_argument("--smoothing", choices=("raw", "sq-fit"), default="sq-fit")
    p.add_argument("--targets", type=_floats, default=None, help="comma-separated FLOP budgets")
    p.add_argument("--n-targets", type=int, default=8)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--space", choices=("log", "linear"), default="log")
    p.add_argument("--parabola-points", type=int, default=7)
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap resamples for CIs (0 = off)")
    p.add_argument("--ci-level", choices=("2sigma", "95", "99"), default="2sigma")
    p.add_argument("--noise-b", type=float, default=None, help="select runs of one noise type")

    p = add("fit-hparams", cmd_fit_hparams, "optimal batch size and learning-rate laws")
    p.add_argument("--runs", required=True)
    p.add_argument("--token-targets", type=_floats, default=None)
    p.add_argument("--n-targets", type=int, default=6)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--level", type=float, default=0.99)

    p = add("fit-hyperbola", cmd_fit_hyperbola, "iso-loss hyperbola between steps and batch size")
    p.add_argument("--points", help="CSV with B,S columns or JSON {B: [...], S: [...]}")
    p.add_argument("--runs", help="RunRecord file; needs --target-loss")
    p.add_argument("--target-loss", type=float, default=None)
    p.add_argument("--unit", default="sequences")
    p.add_argument("--alpha0", type=float, default=0.15)
    p.add_argument("--window", type=int, default=5)

    p = add("plan", cmd_plan, "model size, data, loss and hyperparameters for a FLOP budget")
    p.add_argument("--flops", type=float, required=True)
    p.add_argument("--noise", choices=sorted(NOISE_SHIFTS), default="masked")
    p.add_argument("--method", choices=("method1", "method2"), default="method1")
    p.add_argument("--smoothing", choices=("raw", "sq-fit"), default="sq-fit")
    p.add_argument("--laws", default=None, help="law tables JSON (default: bundled)")
    p.add_argument("--seq-len", type=int, default=2048)

    p = add("validate-runs", cmd_validate_runs, "lint a RunRecord JSONL or CSV file")
    p.add_argument("--runs", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    ctx = Context(args)
    try:
        return args.func(ctx)
    except NUMERIC_ERRORS as exc:
        print(f"diffscale {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        print(f"diffscale {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
