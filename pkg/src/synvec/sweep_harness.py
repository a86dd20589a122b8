"""Scaling-factor sweeps, relative-WER arithmetic, and domain-count ablations.

Scoring is delegated to a pluggable external evaluator: a command template
with a ``{checkpoint}`` placeholder (and optional ``{lambda}``) that must
print a single-line JSON object ``{"wer": <number>}`` to stdout and exit 0.
Anything else counts as a per-grid-point failure; a sweep only fails outright
when every grid point fails. ``SYNVEC_EVAL_TIMEOUT_SECS`` (default 3600)
bounds each invocation.

JSON/CSV serializations are canonical: stable key order, records sorted by
scaling factor, and no wall-clock times, so two runs with a deterministic
evaluator produce identical bytes.
"""

from __future__ import annotations

import json
import logging
import math
import os
import shlex
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EvaluatorError, ValidationError
from .tensor_store import TensorMap, write_checkpoint
from .vector_ops import TaskVector, apply_task_vector, ensemble_average

logger = logging.getLogger(__name__)

TIMEOUT_ENV_VAR = "SYNVEC_EVAL_TIMEOUT_SECS"
DEFAULT_TIMEOUT_SECS = 3600.0

# Sweep grid 0.0, 0.1, ..., 1.0; zero anchors the unmodified-model baseline.
DEFAULT_LAMBDA_GRID = tuple(round(i / 10, 1) for i in range(11))


def relative_wer(baseline: float, adapted: float) -> float:
    """100 * (baseline - adapted) / baseline; positive means improvement."""
    if not baseline > 0:
        raise ValidationError(f"baseline WER must be positive, got {baseline!r}")
    return 100.0 * (baseline - adapted) / baseline


@dataclass(frozen=True)
class SweepConfig:
    """Grid, evaluator command template, and working directory for a sweep."""

    evaluator: str
    workdir: Path
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    keep_checkpoints: bool = False
    parallel_workers: int = 1

    def __post_init__(self):
        if not self.evaluator or not self.evaluator.strip():
            raise ValidationError("evaluator command must be non-empty")
        grid = tuple(float(v) for v in self.lambda_grid)
        if not grid:
            raise ValidationError("lambda grid must be non-empty")
        if any(not math.isfinite(v) for v in grid):
            raise ValidationError("lambda grid values must be finite")
        if len(set(grid)) != len(grid):
            raise ValidationError("lambda grid values must be unique")
        object.__setattr__(self, "lambda_grid", tuple(sorted(grid)))
        object.__setattr__(self, "workdir", Path(self.workdir))
        if self.parallel_workers < 1:
            raise ValidationError("parallel_workers must be a positive integer")


@dataclass(frozen=True)
class EvalRecord:
    """One successful evaluation at one grid point."""

    lam: float
    wer: float
    checkpoint_path: str
    evaluator_stdout: str
    wall_time: float  # seconds; excluded from canonical serialization


@dataclass(frozen=True)
class EvalFailure:
    """One failed evaluation at one grid point."""

    lam: float
    kind: str  # spawn | exit | timeout | output | io
    message: str
    exit_code: int | None = None
    stderr: str = ""


@dataclass(frozen=True)
class SweepResult:
    lambda_grid: tuple[float, ...]
    records: tuple[EvalRecord, ...]
    failures: tuple[EvalFailure, ...]

    def to_json_obj(self) -> dict:
        return {
            "lambda_grid": list(self.lambda_grid),
            "records": [
                {
                    "lambda": r.lam,
                    "wer": r.wer,
                    "checkpoint_path": r.checkpoint_path,
                    "evaluator_stdout": r.evaluator_stdout,
                }
                for r in self.records
            ],
            "failures": [
                {
                    "lambda": f.lam,
                    "kind": f.kind,
                    "message": f.message,
                    "exit_code": f.exit_code,
                }
                for f in self.failures
            ],
            "best_lambda": best_lambda(self) if self.records else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), separators=(",", ":")) + "\n"

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SweepResult":
        records = tuple(
            EvalRecord(
                lam=float(r["lambda"]),
                wer=float(r["wer"]),
                checkpoint_path=str(r.get("checkpoint_path", "")),
                evaluator_stdout=str(r.get("evaluator_stdout", "")),
                wall_time=0.0,
            )
            for r in obj.get("records", [])
        )
        failures = tuple(
            EvalFailure(
                lam=float(f["lambda"]),
                kind=str(f.get("kind", "unknown")),
                message=str(f.get("message", "")),
                exit_code=f.get("exit_code"),
            )
            for f in obj.get("failures", [])
        )
        grid = tuple(float(v) for v in obj.get("lambda_grid", []))
        return cls(lambda_grid=grid, records=records, failures=failures)

    def to_csv(self) -> str:
        lines = ["lambda,wer"]
        lines += [f"{r.lam!r},{r.wer!r}" for r in self.records]
        return "\n".join(lines) + "\n"


def best_lambda(result: SweepResult) -> float:
    """Scaling factor with the lowest WER; ties break toward the smaller one."""
    if not result.records:
        raise ValidationError("sweep produced no successful records")
    best = result.records[0]
    for record in result.records[1:]:  # records sorted ascending by lambda
        if record.wer < best.wer:
            best = record
    return best.lam


def _eval_timeout() -> float:
    raw = os.environ.get(TIMEOUT_ENV_VAR)
    if raw is None:
        return DEFAULT_TIMEOUT_SECS
    try:
        timeout = float(raw)
    except ValueError:
        raise ValidationError(f"{TIMEOUT_ENV_VAR} must be a number, got {raw!r}")
    if timeout <= 0:
        raise ValidationError(f"{TIMEOUT_ENV_VAR} must be positive, got {raw!r}")
    return timeout


def _format_lambda(lam: float) -> str:
    return repr(float(lam))


def _failure(kind: str, message: str, exit_code: int | None = None,
             stderr: str = "") -> EvaluatorError:
    err = EvaluatorError(message)
    err.failure_kind = kind
    err.evaluator_exit_code = exit_code
    err.evaluator_stderr = stderr
    return err


def invoke_evaluator(
    command: str, checkpoint: Path, lam: float | None = None
) -> tuple[float, str, float]:
    """Run the evaluator once; return (wer, raw stdout, wall seconds).

    Raises EvaluatorError on spawn failure, nonzero exit, timeout, or output
    that is not a JSON object with a finite non-negative numeric "wer".
    """
    argv = []
    for token in shlex.split(command):
        token = token.replace("{checkpoint}", str(checkpoint))
        if lam is not None:
            token = token.replace("{lambda}", _format_lambda(lam))
        argv.append(token)
    start = time.monotonic()
    try:
        proc = subprocess.run(
            argv, capture_output=True, text=True, timeout=_eval_timeout()
        )
    except OSError as exc:
        raise _failure("spawn", f"could not spawn evaluator {argv[0]!r}: {exc}") from exc
    except subprocess.TimeoutExpired as exc:
        raise _failure(
            "timeout",
            f"evaluator timed out after {exc.timeout:g}s (set {TIMEOUT_ENV_VAR} to change)",
        ) from exc
    wall = time.monotonic() - start
    if proc.returncode != 0:
        raise _failure(
            "exit",
            f"evaluator exited with status {proc.returncode}: {proc.stderr.strip()[:500]}",
            exit_code=proc.returncode,
            stderr=proc.stderr,
        )
    text = proc.stdout.strip()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _failure("output", f"evaluator stdout is not valid JSON: {text[:200]!r}") from exc
    if not isinstance(payload, dict) or "wer" not in payload:
        raise _failure(
            "output", f"evaluator output must be an object with a 'wer' key: {text[:200]!r}"
        )
    wer = payload["wer"]
    if isinstance(wer, bool) or not isinstance(wer, (int, float)) or not math.isfinite(wer):
        raise _failure("output", f"evaluator 'wer' is not a finite number: {wer!r}")
    if wer < 0:
        raise _failure("output", f"evaluator 'wer' must be non-negative, got {wer!r}")
    return float(wer), proc.stdout, wall


def _normalize_vectors(vectors: TaskVector | Sequence[TaskVector]) -> list[TaskVector]:
    if isinstance(vectors, TaskVector):
        return [vectors]
    out = list(vectors)
    if not out:
        raise ValidationError("need at least one task vector")
    return out


def _evaluate_point(
    model: TensorMap,
    average: TaskVector,
    lam: float,
    checkpoint: Path,
    config: SweepConfig,
) -> EvalRecord | EvalFailure:
    try:
        applied = apply_task_vector(model, average, lam)
        write_checkpoint(applied, checkpoint)
    except OSError as exc:
        return EvalFailure(lam=lam, kind="io", message=str(exc))
    try:
        wer, stdout, wall = invoke_evaluator(config.evaluator, checkpoint, lam)
        logger.debug("lambda=%g wer=%g (%.2fs)", lam, wer, wall)
        return EvalRecord(
            lam=lam,
            wer=wer,
            checkpoint_path=str(checkpoint),
            evaluator_stdout=stdout,
            wall_time=wall,
        )
    except EvaluatorError as exc:
        logger.warning("evaluation failed at lambda=%g: %s", lam, exc)
        return EvalFailure(
            lam=lam,
            kind=getattr(exc, "failure_kind", "unknown"),
            message=str(exc),
            exit_code=getattr(exc, "evaluator_exit_code", None),
            stderr=getattr(exc, "evaluator_stderr", ""),
        )
    finally:
        if not config.keep_checkpoints:
            checkpoint.unlink(missing_ok=True)


def run_lambda_sweep(
    model: TensorMap,
    vectors: TaskVector | Sequence[TaskVector],
    config: SweepConfig,
) -> SweepResult:
    """Materialize model + lam * (ensemble mean of vectors) at every grid point
    and score each checkpoint with the external evaluator.

    Grid points are independent; up to ``parallel_workers`` evaluator
    subprocesses run concurrently, each on a private checkpoint file. Result
    assembly sorts by lambda, so it is order-independent. Individual failures
    are recorded per grid point; the sweep raises only if all points fail.
    """
    vector_list = _normalize_vectors(vectors)
    average = ensemble_average(vector_list)
    config.workdir.mkdir(parents=True, exist_ok=True)

    def point(indexed: tuple[int, float]) -> EvalRecord | EvalFailure:
        index, lam = indexed
        checkpoint = config.workdir / f"sweep_{index:03d}_lambda_{lam:g}.safetensors"
        return _evaluate_point(model, average, lam, checkpoint, config)

    tasks = list(enumerate(config.lambda_grid))
    if config.parallel_workers > 1:
        with ThreadPoolExecutor(max_workers=config.parallel_workers) as pool:
            outcomes = list(pool.map(point, tasks))
    else:
        outcomes = [point(task) for task in tasks]

    records = tuple(sorted((o for o in outcomes if isinstance(o, EvalRecord)),
                           key=lambda r: r.lam))
    failures = tuple(sorted((o for o in outcomes if isinstance(o, EvalFailure)),
                            key=lambda f: f.lam))
    if not records:
        raise EvaluatorError(
            f"all {len(config.lambda_grid)} grid points failed; "
            f"first failure: {failures[0].message}"
        )
    return SweepResult(lambda_grid=config.lambda_grid, records=records, failures=failures)


@dataclass(frozen=True)
class AblationPoint:
    k: int
    mean_wer: float
    per_seed: tuple[float, ...]


@dataclass(frozen=True)
class AblationResult:
    points: tuple[AblationPoint, ...]
    subset_policy: str  # "prefix" | "random"
    seeds: tuple[int, ...]
    lam: float
    failures: tuple[EvalFailure, ...] = field(default=())

    def to_json_obj(self) -> dict:
        return {
            "subset_policy": self.subset_policy,
            "seeds": list(self.seeds),
            "lambda": self.lam,
            "points": [
                {"k": p.k, "mean_wer": p.mean_wer, "per_seed": list(p.per_seed)}
                for p in self.points
            ],
            "failures": [
                {"k": None, "lambda": f.lam, "kind": f.kind, "message": f.message}
                for f in self.failures
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), separators=(",", ":")) + "\n"

    def to_csv(self) -> str:
        lines = ["k,mean_wer,seed_values"]
        for p in self.points:
            joined = ";".join(repr(v) for v in p.per_seed)
            lines.append(f"{p.k},{p.mean_wer!r},{joined}")
        return "\n".join(lines) + "\n"


def run_domain_ablation(
    model: TensorMap,
    vectors: Sequence[TaskVector],
    lam: float,
    config: SweepConfig,
    *,
    ks: Sequence[int] | None = None,
    policy: str = "prefix",
    seeds: Sequence[int] = (0,),
) -> AblationResult:
    """Score ensembles built from k of the given vectors, for each k.

    ``prefix`` takes the first k vectors of the configured list (one
    deterministic evaluation per k); ``random`` samples k vectors without
    replacement once per seed and averages the resulting WERs.
    """
    vector_list = _normalize_vectors(vectors)
    if not math.isfinite(lam):
        raise ValidationError(f"scaling factor must be finite, got {lam!r}")
    if policy not in ("prefix", "random"):
        raise ValidationError(f"policy must be 'prefix' or 'random', got {policy!r}")
    total = len(vector_list)
    if ks is None:
        ks = range(1, total + 1)
    ks = [int(k) for k in ks]
    if any(k < 1 or k > total for k in ks):
        raise ValidationError(f"every k must lie in 1..{total}, got {ks}")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValidationError(f"k values must be strictly increasing, got {ks}")
    seed_list = [int(s) for s in seeds]
    if policy == "random" and not seed_list:
        raise ValidationError("random policy needs at least one seed")
    config.workdir.mkdir(parents=True, exist_ok=True)

    points: list[AblationPoint] = []
    failures: list[EvalFailure] = []
    for k in ks:
        if policy == "prefix":
            subsets = [(0, vector_list[:k])]
        else:
            subsets = []
            for seed in seed_list:
                rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
                chosen = rng.choice(total, size=k, replace=False)
                subsets.append((seed, [vector_list[i] for i in chosen]))
        per_seed: list[float] = []
        for seed, subset in subsets:
            checkpoint = config.workdir / f"ablate_k{k:02d}_seed{seed}.safetensors"
            outcome = _evaluate_point(model, ensemble_average(subset), lam, checkpoint, config)
            if isinstance(outcome, EvalRecord):
                per_seed.append(outcome.wer)
            else:
                failures.append(outcome)
        if per_seed:
            points.append(
                AblationPoint(k=k, mean_wer=sum(per_seed) / len(per_seed),
                              per_seed=tuple(per_seed))
            )
    if not points:
        raise EvaluatorError(
            f"all ablation evaluations failed; first failure: {failures[0].message}"
        )
    return AblationResult(
        points=tuple(points),
        subset_policy=policy,
        seeds=tuple(seed_list),
        lam=float(lam),
        failures=tuple(failures),
    )
