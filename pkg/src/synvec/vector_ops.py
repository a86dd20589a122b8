"""Weight-space arithmetic between checkpoints that share a schema.

A task vector is the elementwise difference between two models fine-tuned
from the same parent (here: one on real data, one on synthetic data). Adding
a scaled task vector to a third compatible model transfers the encoded
condition shift. Per-domain vectors can be averaged into one ensemble vector.

Numerics: storage dtypes are preserved end to end, but every elementwise op
widens per tensor (F16/F32 -> F32, F64 -> F64) before computing and narrows
back with round-to-nearest-even, and every accumulation (dot products, norms,
means) runs in F64 with a deterministic, fixed reduction order regardless of
storage dtype. Small deltas between large weights survive this; they would
not survive F16 arithmetic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    FingerprintMismatchError,
    NonFiniteValueError,
    SchemaMismatchError,
    ValidationError,
    ZeroNormError,
)
from .tensor_store import (
    Dtype,
    Fingerprint,
    TensorMap,
    fingerprint,
    read_checkpoint,
    schema_compatible,
    schema_of,
    write_checkpoint,
)

# Elementwise compute dtypes: F16/F32 work in F32, F64 in F64.
_COMPUTE_DTYPE = {Dtype.F16: np.float32, Dtype.F32: np.float32, Dtype.F64: np.float64}

# Metadata keys used when serializing task vectors into the container format.
KIND_KEY = "synvec.kind"
BASE_SCHEMA_KEY = "synvec.base_schema"
DOMAIN_KEY = "synvec.domain"
REAL_LABEL_KEY = "synvec.real_label"
SYN_LABEL_KEY = "synvec.syn_label"
CREATED_FROM_KEY = "synvec.created_from"
TASK_VECTOR_KIND = "task_vector"
_RESERVED_KEYS = {
    KIND_KEY,
    BASE_SCHEMA_KEY,
    DOMAIN_KEY,
    REAL_LABEL_KEY,
    SYN_LABEL_KEY,
    CREATED_FROM_KEY,
}

_MEAN_CHUNK_ELEMENTS = 1 << 20  # bounds transient memory of ensemble averaging


@dataclass(frozen=True)
class Provenance:
    """Where a task vector came from."""

    source_domain_label: str | None = None
    real_condition_label: str | None = None
    syn_condition_label: str | None = None
    created_from: tuple[str, str] | None = None


@dataclass(frozen=True)
class TaskVector:
    """A schema-shaped set of finite parameter deltas plus provenance."""

    deltas: TensorMap
    base_schema: Fingerprint
    provenance: Provenance = Provenance()

    def __post_init__(self):
        actual = schema_of(self.deltas).schema_hash
        if actual != self.base_schema.schema_hash:
            raise FingerprintMismatchError(
                f"delta schema hash {actual[:12]}... does not match recorded "
                f"base schema {self.base_schema.schema_hash[:12]}..."
            )
        bad = self.deltas.non_finite_tensors()
        if bad:
            name, index = next(iter(bad.items()))
            raise NonFiniteValueError(
                f"task vector tensor {name!r} has a non-finite delta at flat index {index}",
                tensor=name,
                index=index,
            )


def _require_compatible(a: TensorMap, b: TensorMap) -> None:
    report = schema_compatible(a, b)
    if not report.ok:
        raise SchemaMismatchError(report)


def _require_finite(tmap: TensorMap, role: str) -> None:
    bad = tmap.non_finite_tensors()
    if bad:
        name, index = next(iter(bad.items()))
        raise NonFiniteValueError(
            f"{role} tensor {name!r} has a non-finite value at flat index {index}; "
            "pass allow_non_finite=True to proceed anyway",
            tensor=name,
            index=index,
        )


def compute_task_vector(
    real: TensorMap,
    syn: TensorMap,
    provenance: Provenance | None = None,
    *,
    allow_non_finite: bool = False,
) -> TaskVector:
    """Subtract two schema-compatible parameter sets: delta = real - syn.

    Differences are computed per tensor in the widened dtype and narrowed back
    to the storage dtype, so the output schema equals the input schema.
    """
    _require_compatible(real, syn)
    if not allow_non_finite:
        _require_finite(real, "real model")
        _require_finite(syn, "synthetic model")
    deltas = {}
    for name, real_arr in real.items():
        compute = _COMPUTE_DTYPE[Dtype.from_numpy(real_arr.dtype)]
        delta = real_arr.astype(compute) - syn[name].astype(compute)
        deltas[name] = delta.astype(real_arr.dtype)
    return TaskVector(
        deltas=TensorMap(deltas),
        base_schema=fingerprint(real),
        provenance=provenance or Provenance(),
    )


def apply_task_vector(
    model: TensorMap,
    tau: TaskVector,
    lam: float,
    *,
    allow_non_finite: bool = False,
) -> TensorMap:
    """Return model + lam * deltas, keeping the model's dtypes and metadata.

    lam == 0 is a bitwise no-op: the returned map shares the model's values.
    A non-finite result (e.g. an F16 overflow after narrowing) is an error
    naming the tensor and the first offending element.
    """
    if not isinstance(lam, (int, float)) or not math.isfinite(lam):
        raise ValidationError(f"scaling factor must be a finite scalar, got {lam!r}")
    _require_compatible(model, tau.deltas)
    if not allow_non_finite:
        _require_finite(model, "model")
    if lam == 0.0:
        return TensorMap(dict(model.items()), model.metadata)
    out = {}
    for name, arr in model.items():
        compute = _COMPUTE_DTYPE[Dtype.from_numpy(arr.dtype)]
        shifted = arr.astype(compute) + compute(lam) * tau.deltas[name].astype(compute)
        with np.errstate(over="ignore"):  # overflow is detected and reported below
            narrowed = shifted.astype(arr.dtype)
        if not allow_non_finite and narrowed.size and not np.isfinite(narrowed).all():
            index = int(np.argmin(np.isfinite(narrowed.reshape(-1))))
            raise NonFiniteValueError(
                f"applying scale {lam} produced a non-finite value in tensor "
                f"{name!r} at flat index {index}",
                tensor=name,
                index=index,
            )
        out[name] = narrowed
    return TensorMap(out, model.metadata)


def _merged_provenance(vectors: Sequence[TaskVector]) -> Provenance:
    domains = [v.provenance.source_domain_label for v in vectors]
    merged_domain = None
    if all(d is not None for d in domains):
        merged_domain = "+".join(sorted(domains))
    real_labels = {v.provenance.real_condition_label for v in vectors}
    syn_labels = {v.provenance.syn_condition_label for v in vectors}
    return Provenance(
        source_domain_label=merged_domain,
        real_condition_label=real_labels.pop() if len(real_labels) == 1 else None,
        syn_condition_label=syn_labels.pop() if len(syn_labels) == 1 else None,
        created_from=None,
    )


def ensemble_average(vectors: Sequence[TaskVector]) -> TaskVector:
    """Per-element arithmetic mean of task vectors sharing one base schema.

    The k addends of every element are sorted before a fixed F64 reduction,
    which makes the result exactly invariant under permutation of the input
    list. Provenance records all constituent domains.
    """
    if not vectors:
        raise ValidationError("ensemble_average needs at least one task vector")
    hashes = {v.base_schema.schema_hash for v in vectors}
    if len(hashes) > 1:
        raise FingerprintMismatchError(
            f"task vectors come from {len(hashes)} different base schemas"
        )
    if len(vectors) == 1:
        return vectors[0]
    k = len(vectors)
    deltas = {}
    for name, first in vectors[0].deltas.items():
        flat_inputs = [v.deltas[name].reshape(-1) for v in vectors]
        n = first.size
        mean = np.empty(n, dtype=np.float64)
        for start in range(0, n, _MEAN_CHUNK_ELEMENTS):
            stop = min(start + _MEAN_CHUNK_ELEMENTS, n)
            stacked = np.stack([flat[start:stop].astype(np.float64) for flat in flat_inputs])
            stacked.sort(axis=0)
            mean[start:stop] = stacked.sum(axis=0) / k
        deltas[name] = mean.reshape(first.shape).astype(first.dtype)
    return TaskVector(
        deltas=TensorMap(deltas),
        base_schema=Fingerprint(schema_hash=hashes.pop()),
        provenance=_merged_provenance(vectors),
    )


def apply_ensemble(
    model: TensorMap,
    vectors: Sequence[TaskVector],
    lam: float,
    *,
    allow_non_finite: bool = False,
) -> TensorMap:
    """model + (lam / k) * sum of k task vectors, via their ensemble average."""
    return apply_task_vector(
        model, ensemble_average(vectors), lam, allow_non_finite=allow_non_finite
    )


def _dot_and_norms(a: TensorMap, b: TensorMap, name: str) -> tuple[float, float, float]:
    # np.sum on the F64 product keeps a fixed pairwise reduction order.
    x = a[name].reshape(-1).astype(np.float64)
    y = b[name].reshape(-1).astype(np.float64)
    return float(np.sum(x * y)), float(np.sum(x * x)), float(np.sum(y * y))


def cosine_similarity(
    a: TaskVector,
    b: TaskVector,
    granularity: str = "global",
) -> float | dict[str, float | None]:
    """Cosine similarity between two task vectors.

    ``global`` flattens all tensors in canonical (lexicographic name) order
    and returns one scalar in [-1, 1]; both vectors must have nonzero norm.
    ``per_tensor`` returns a name -> value map where tensors with zero norm
    on either side are reported as None (undefined) rather than a number.
    """
    if granularity not in ("global", "per_tensor"):
        raise ValidationError(f"granularity must be 'global' or 'per_tensor', got {granularity!r}")
    _require_compatible(a.deltas, b.deltas)
    if granularity == "per_tensor":
        out: dict[str, float | None] = {}
        for name in a.deltas.names():
            dot, na, nb = _dot_and_norms(a.deltas, b.deltas, name)
            if na == 0.0 or nb == 0.0:
                out[name] = None
            else:
                out[name] = float(np.clip(dot / math.sqrt(na * nb), -1.0, 1.0))
        return out
    dot_total = norm_a = norm_b = 0.0
    for name in a.deltas.names():
        dot, na, nb = _dot_and_norms(a.deltas, b.deltas, name)
        dot_total += dot
        norm_a += na
        norm_b += nb
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroNormError("global cosine similarity is undefined for a zero-norm task vector")
    return float(np.clip(dot_total / math.sqrt(norm_a * norm_b), -1.0, 1.0))


@dataclass(frozen=True)
class TensorStats:
    l2_norm: float
    max_abs: float
    mean_abs: float
    num_elements: int


@dataclass(frozen=True)
class NormReport:
    per_tensor: dict[str, TensorStats]
    total: TensorStats


def norm_stats(tau: TaskVector) -> NormReport:
    """Per-tensor and global magnitude statistics, accumulated in F64.

    The global l2 norm is the square root of the sum of per-tensor squared
    sums, so it equals the norm of the full flattened vector.
    """
    per_tensor: dict[str, TensorStats] = {}
    sq_total = 0.0
    abs_total = 0.0
    max_total = 0.0
    n_total = 0
    for name, arr in tau.deltas.items():
        x = np.abs(arr.reshape(-1).astype(np.float64))
        sq = float(np.sum(x * x))
        per_tensor[name] = TensorStats(
            l2_norm=math.sqrt(sq),
            max_abs=float(x.max()) if x.size else 0.0,
            mean_abs=float(np.sum(x) / x.size) if x.size else 0.0,
            num_elements=int(x.size),
        )
        sq_total += sq
        abs_total += float(np.sum(x))
        max_total = max(max_total, per_tensor[name].max_abs)
        n_total += int(x.size)
    total = TensorStats(
        l2_norm=math.sqrt(sq_total),
        max_abs=max_total,
        mean_abs=abs_total / n_total if n_total else 0.0,
        num_elements=n_total,
    )
    return NormReport(per_tensor=per_tensor, total=total)


def scale_task_vector(tau: TaskVector, factor: float) -> TaskVector:
    """Multiply all deltas by a finite scalar, keeping schema and provenance."""
    if not math.isfinite(factor):
        raise ValidationError(f"scale factor must be finite, got {factor!r}")
    deltas = {}
    for name, arr in tau.deltas.items():
        compute = _COMPUTE_DTYPE[Dtype.from_numpy(arr.dtype)]
        deltas[name] = (arr.astype(compute) * compute(factor)).astype(arr.dtype)
    return TaskVector(
        deltas=TensorMap(deltas), base_schema=tau.base_schema, provenance=tau.provenance
    )


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Square matrix of pairwise cosine similarities with row/column labels.

    Symmetric, unit diagonal, values clamped to [-1, 1]; undefined entries
    (zero-norm tensors in per-tensor mode) are NaN.
    """

    labels: tuple[str, ...]
    values: np.ndarray  # [n, n] float64


def similarity_matrix(
    labeled_vectors: Sequence[tuple[str, TaskVector]],
    granularity: str = "global",
) -> SimilarityMatrix | dict[str, SimilarityMatrix]:
    """Pairwise cosine similarities over a labeled list of task vectors.

    Returns one matrix for global granularity; for per_tensor granularity,
    a map from tensor name to its matrix.
    """
    if len(labeled_vectors) < 2:
        raise ValidationError("similarity matrix needs at least two task vectors")
    labels = tuple(label for label, _ in labeled_vectors)
    vectors = [vector for _, vector in labeled_vectors]
    n = len(vectors)
    if granularity == "global":
        values = np.eye(n, dtype=np.float64)
        for i in range(n):
            for j in range(i + 1, n):
                values[i, j] = values[j, i] = cosine_similarity(vectors[i], vectors[j], "global")
        return SimilarityMatrix(labels=labels, values=values)
    if granularity != "per_tensor":
        raise ValidationError(f"granularity must be 'global' or 'per_tensor', got {granularity!r}")
    names = vectors[0].deltas.names()
    matrices = {name: np.eye(n, dtype=np.float64) for name in names}
    for i in range(n):
        for j in range(i + 1, n):
            per_tensor = cosine_similarity(vectors[i], vectors[j], "per_tensor")
            for name, value in per_tensor.items():
                cell = np.nan if value is None else value
                matrices[name][i, j] = matrices[name][j, i] = cell
    # A zero-norm tensor also has an undefined self-similarity.
    for name in names:
        for i, vector in enumerate(vectors):
            if not np.any(vector.deltas[name]):
                matrices[name][i, i] = np.nan
    return {name: SimilarityMatrix(labels=labels, values=m) for name, m in matrices.items()}


def save_task_vector(tau: TaskVector, path: str | Path) -> None:
    """Serialize a task vector to the checkpoint container format.

    Provenance and the base-schema fingerprint travel in ``__metadata__``
    under ``synvec.*`` keys; any reserved keys already present on the delta
    map are overwritten.
    """
    metadata = {k: v for k, v in tau.deltas.metadata.items() if k not in _RESERVED_KEYS}
    metadata[KIND_KEY] = TASK_VECTOR_KIND
    metadata[BASE_SCHEMA_KEY] = tau.base_schema.schema_hash
    prov = tau.provenance
    if prov.source_domain_label is not None:
        metadata[DOMAIN_KEY] = prov.source_domain_label
    if prov.real_condition_label is not None:
        metadata[REAL_LABEL_KEY] = prov.real_condition_label
    if prov.syn_condition_label is not None:
        metadata[SYN_LABEL_KEY] = prov.syn_condition_label
    if prov.created_from is not None:
        metadata[CREATED_FROM_KEY] = json.dumps(list(prov.created_from), separators=(",", ":"))
    write_checkpoint(TensorMap(dict(tau.deltas.items()), metadata), path)


def load_task_vector(path: str | Path) -> TaskVector:
    """Read a task vector container written by :func:`save_task_vector`."""
    tmap = read_checkpoint(path)
    metadata = tmap.metadata
    if metadata.get(KIND_KEY) != TASK_VECTOR_KIND:
        raise ValidationError(
            f"{path}: not a task vector container (missing {KIND_KEY}={TASK_VECTOR_KIND!r})"
        )
    recorded = metadata.get(BASE_SCHEMA_KEY)
    actual = schema_of(tmap).schema_hash
    if recorded != actual:
        raise FingerprintMismatchError(
            f"{path}: recorded base schema {str(recorded)[:12]}... does not match "
            f"the stored tensors ({actual[:12]}...)"
        )
    created_from = None
    if CREATED_FROM_KEY in metadata:
        try:
            pair = json.loads(metadata[CREATED_FROM_KEY])
            created_from = (str(pair[0]), str(pair[1]))
        except (ValueError, IndexError, TypeError):
            raise ValidationError(f"{path}: malformed {CREATED_FROM_KEY} metadata")
    provenance = Provenance(
        source_domain_label=metadata.get(DOMAIN_KEY),
        real_condition_label=metadata.get(REAL_LABEL_KEY),
        syn_condition_label=metadata.get(SYN_LABEL_KEY),
        created_from=created_from,
    )
    plain = {k: v for k, v in metadata.items() if k not in _RESERVED_KEYS}
    deltas = TensorMap(dict(tmap.items()), plain)
    return TaskVector(deltas=deltas, base_schema=Fingerprint(schema_hash=actual),
                      provenance=provenance)
