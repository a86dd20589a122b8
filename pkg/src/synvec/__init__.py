"""Task-vector arithmetic between checkpoints fine-tuned on real vs. synthetic data.

Core pieces: a bit-exact checkpoint container (tensor_store), weight-space
arithmetic and cosine analysis (vector_ops), evaluator-driven scaling-factor
sweeps and ablations (sweep_harness), a desk-scale end-to-end validation
experiment (toy_experiment), and deterministic CSV/SVG reports (report).
"""

from ._version import __version__
from .errors import (
    ByteRangeError,
    ContainerError,
    EvaluatorError,
    FingerprintMismatchError,
    InvalidHeaderError,
    NonFiniteValueError,
    SchemaMismatchError,
    SynvecError,
    TrainingDivergedError,
    TruncatedDataError,
    UnknownDtypeError,
    ValidationError,
    ZeroNormError,
)
from .tensor_store import (
    CompatReport,
    Dtype,
    Fingerprint,
    ModelSchema,
    TensorMap,
    TensorMeta,
    fingerprint,
    read_checkpoint,
    schema_compatible,
    schema_of,
    write_checkpoint,
)
from .vector_ops import (
    Provenance,
    SimilarityMatrix,
    TaskVector,
    apply_ensemble,
    apply_task_vector,
    compute_task_vector,
    cosine_similarity,
    ensemble_average,
    load_task_vector,
    norm_stats,
    save_task_vector,
    scale_task_vector,
    similarity_matrix,
)

__all__ = [
    "__version__",
    "SynvecError",
    "ValidationError",
    "ContainerError",
    "InvalidHeaderError",
    "UnknownDtypeError",
    "ByteRangeError",
    "TruncatedDataError",
    "NonFiniteValueError",
    "SchemaMismatchError",
    "FingerprintMismatchError",
    "ZeroNormError",
    "TrainingDivergedError",
    "EvaluatorError",
    "Dtype",
    "TensorMeta",
    "TensorMap",
    "ModelSchema",
    "Fingerprint",
    "CompatReport",
    "read_checkpoint",
    "write_checkpoint",
    "schema_of",
    "schema_compatible",
    "fingerprint",
    "Provenance",
    "TaskVector",
    "SimilarityMatrix",
    "compute_task_vector",
    "apply_task_vector",
    "ensemble_average",
    "apply_ensemble",
    "cosine_similarity",
    "norm_stats",
    "scale_task_vector",
    "similarity_matrix",
    "save_task_vector",
    "load_task_vector",
]
