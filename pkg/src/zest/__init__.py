"""Partition-function estimation for log-linear models via LSH sampling."""

from ._kernels import BACKEND
from .estimators import (
    GumbelConfig,
    PartitionEstimate,
    SampleSet,
    exact_estimate,
    exact_gumbel_estimate,
    lsh_budget_estimate,
    lsh_estimate,
    mips_gumbel_estimate,
    topk_gumbel_estimate,
    uniform_is_estimate,
)
from .lsh_core import HashTableSet, LshParams, build_tables, query_candidates
from .model_store import (
    ContextBatch,
    LabeledDataset,
    LogLinearModel,
    Snapshot,
    exact_partition,
    generate_synthetic,
    load_snapshot,
    log_partition,
    save_snapshot,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ContextBatch",
    "GumbelConfig",
    "HashTableSet",
    "LabeledDataset",
    "LogLinearModel",
    "LshParams",
    "PartitionEstimate",
    "SampleSet",
    "Snapshot",
    "build_tables",
    "exact_estimate",
    "exact_gumbel_estimate",
    "exact_partition",
    "generate_synthetic",
    "load_snapshot",
    "log_partition",
    "lsh_budget_estimate",
    "lsh_estimate",
    "mips_gumbel_estimate",
    "query_candidates",
    "save_snapshot",
    "topk_gumbel_estimate",
    "uniform_is_estimate",
]
