"""Run records, loss-curve I/O and FLOP accounting.

JSONL is the canonical format: one run per line with its points embedded.
CSV is accepted as a flat ``run_id,step,tokens,loss`` table next to a
``runs`` manifest (JSONL records without points).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FLOP_METHODS = ("method1", "method2")


class RunValidationError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    hidden: int
    heads: int
    seq_len: int
    params: float
    vocab_size: int = 131072
    name: str = ""

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "params", "vocab_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.seq_len < 0:
            raise ValueError("seq_len must be non-negative")

    @property
    def label(self) -> str:
        return self.name or f"L{self.layers}-D{self.hidden}"


def flops_per_token(model: ModelSpec, method: str = "method1") -> float:
    """``6P + 12 L d N`` (method1) or ``6P`` (method2)."""
    if method == "method1":
        return 6 * model.params + 12 * model.layers * model.hidden * model.seq_len
    if method == "method2":
        return 6 * model.params
    raise ValueError(f"unknown FLOP method {method!r}; choose from {FLOP_METHODS}")


@dataclass
class RunRecord:
    """One training run: model, hyperparameters and its validation-loss curve."""

    model: ModelSpec
    noise_b: float
    batch_size: int
    lr: float
    steps: np.ndarray
    tokens: np.ndarray
    loss: np.ndarray
    surrogate: Optional[np.ndarray] = None
    annealed: bool = False
    run_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.tokens = np.asarray(self.tokens, dtype=float)
        self.loss = np.asarray(self.loss, dtype=float)
        if self.surrogate is not None:
            self.surrogate = np.asarray(self.surrogate, dtype=float)
        if not self.run_id:
            self.run_id = f"{self.model.label}-B{self.batch_size}-lr{self.lr:g}-b{self.noise_b:g}"

    @property
    def key(self) -> tuple:
        return (self.model, self.batch_size, self.lr, self.noise_b)

    def validate(self, line: Optional[int] = None) -> "RunRecord":
        n = len(self.steps)
        if not (len(self.tokens) == len(self.loss) == n):
            raise RunValidationError("steps, tokens and loss must have equal length", line)
        if self.surrogate is not None and len(self.surrogate) != n:
            raise RunValidationError("surrogate series length mismatch", line)
        if self.batch_size < 1:
            raise RunValidationError("batch_size must be >= 1", line)
        if n and np.any(np.diff(self.steps) <= 0):
            raise RunValidationError("steps must be strictly increasing", line)
        if n and self.steps[0] < 0:
            raise RunValidationError("steps must be non-negative", line)
        expected = self.steps * float(self.batch_size) * self.model.seq_len
        if np.any(np.abs(self.tokens - expected) > 1.0):
            raise RunValidationError("tokens must equal step * batch_size * seq_len", line)
        if not np.all(np.isfinite(self.loss)) or np.any(self.loss <= 0):
            raise RunValidationError("losses must be finite and positive", line)
        return self

    def flops(self, method: str = "method1") -> np.ndarray:
        return flops_per_token(self.model, method) * self.tokens

    def to_json(self, with_points: bool = True) -> dict:
        rec = {
            "schema_version": SCHEMA_VERSION,
            "run_id": self.run_id,
            "model": asdict(self.model),
            "noise_b": self.noise_b,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "annealed": self.annealed,
        }
        if self.meta:
            rec["meta"] = self.meta
        if with_points:
            rec["points"] = [
                {"step": int(s), "tokens": float(t), "loss": float(l)}
                for s, t, l in zip(self.steps, self.tokens, self.loss)
            ]
            if self.surrogate is not None:
                rec["surrogate"] = self.surrogate.tolist()
        return rec

    @classmethod
    def from_json(cls, obj: dict, line: Optional[int] = None, points: Optional[list] = None) -> "RunRecord":
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise RunValidationError(f"unsupported or missing schema_version {obj.get('schema_version')!r}", line)
        try:
            pts = obj["points"] if points is None else points
            rec = cls(
                model=ModelSpec(**obj["model"]),
                noise_b=float(obj["noise_b"]),
                batch_size=int(obj["batch_size"]),
                lr=float(obj["lr"]),
                steps=[p["step"] for p in pts],
                tokens=[p["tokens"] for p in pts],
                loss=[p["loss"] for p in pts],
                surrogate=obj.get("surrogate"),
                annealed=bool(obj.get("annealed", False)),
                run_id=obj.get("run_id", ""),
                meta=obj.get("meta", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, RunValidationError):
                raise
            raise RunValidationError(f"malformed record: {exc}", line) from exc
        return rec.validate(line)


def cumulative_flops(run: RunRecord, at_step: int, method: str = "method1") -> float:
    if at_step == 0:
        return 0.0
    idx = np.flatnonzero(run.steps == at_step)
    if idx.size:
        tokens = run.tokens[idx[0]]
    elif run.steps.size and run.steps[0] <= at_step <= run.steps[-1]:
        tokens = at_step * run.batch_size * run.model.seq_len
    else:
        raise ValueError(f"step {at_step} outside the recorded range of {run.run_id}")
    return flops_per_token(run.model, method) * float(tokens)


def _check_unique(runs: list[RunRecord], lines: list[int]) -> None:
    seen = {}
    for run, line in zip(runs, lines):
        if run.key in seen:
            raise RunValidationError(f"duplicate run {run.run_id} (first seen on line {seen[run.key]})", line)
        seen[run.key] = line


def dump_runs(runs: Iterable[RunRecord], path, fmt: str = "jsonl") -> None:
    path = Path(path)
    runs = list(runs)
    if fmt == "jsonl":
        path.write_text("".join(json.dumps(r.to_json()) + "\n" for r in runs))
    elif fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run_id", "step", "tokens", "loss"])
            for r in runs:
                for s, t, l in zip(r.steps, r.tokens, r.loss):
                    w.writerow([r.run_id, int(s), repr(float(t)), repr(float(l))])
        manifest_path(path).write_text("".join(json.dumps(r.to_json(with_points=False)) + "\n" for r in runs))
    else:
        raise ValueError(f"unknown format {fmt!r}")


def manifest_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".runs.jsonl")


def _read_jsonl(path: Path):
    for i, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            yield i, json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RunValidationError(f"invalid JSON: {exc.msg}", i) from exc


def load_runs(path, fmt: Optional[str] = None) -> list[RunRecord]:
    """Read and validate run records; format defaults to the file extension."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "jsonl")
    runs, lines = [], []
    if fmt == "jsonl":
        for i, obj in _read_jsonl(path):
            runs.append(RunRecord.from_json(obj, i))
            lines.append(i)
    elif fmt == "csv":
        points: dict[str, list] = {}
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return []
            missing = {"run_id", "step", "tokens", "loss"} - set(reader.fieldnames)
            if missing:
                raise RunValidationError(f"CSV lacks columns {sorted(missing)}", 1)
            for i, row in enumerate(reader, start=2):
                try:
                    pt = {"step": int(row["step"]), "tokens": float(row["tokens"]), "loss": float(row["loss"])}
                except (TypeError, ValueError) as exc:
                    raise RunValidationError(f"bad numeric field: {exc}", i) from exc
                points.setdefault(row["run_id"], []).append(pt)
        mpath = manifest_path(path)
        if not mpath.exists():
            if points:
                raise RunValidationError(f"missing runs manifest {mpath.name}")
            return []
        for i, obj in _read_jsonl(mpath):
            runs.append(RunRecord.from_json(obj, i, points=points.pop(obj.get("run_id"), [])))
            lines.append(i)
        if points:
            raise RunValidationError(f"CSV rows for runs absent from the manifest: {sorted(points)}")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    _check_unique(runs, lines)
    return runs


def run_from_curve(model: ModelSpec, noise_b: float, batch_size: int, lr: float, steps, loss, **kw) -> RunRecord:
    steps = np.asarray(steps, dtype=np.int64)
    tokens = steps * float(batch_size) * model.seq_len
    return RunRecord(model, noise_b, batch_size, lr, steps, tokens, loss, **kw).validate()

