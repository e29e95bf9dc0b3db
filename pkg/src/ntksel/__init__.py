"""Kernel-similarity auxiliary data selection engine.

Two-stage selection (embedding-KNN pre-selection, then gradient-kernel
utility ranking) over a bit-exact binary feature format, plus a toy-scale
probe that numerically verifies the kernel-stability algebra the selection
criterion rests on.
"""
from .domain import PipelineConfig, RunManifest, SampleId, validate_config
from .feature_store import (
    EmbeddingRecord,
    FeatureFileHeader,
    FeatureRecord,
    read_features,
    write_features,
)
from .kernel import (
    KernelMatrix,
    KernelSnapshot,
    assemble_kernel_matrix,
    cross_term_diagnostic,
    exact_ntk,
    frobenius_cos,
    jf_ntk,
)
from .preselect import RelevanceTable, accelerated_knn_relevance, knn_relevance, top_m
from .projection import ProjectionSpec, project, project_batch, project_chunked, sign
from .select import SelectionResult, UtilityScores, run_pipeline, select_top_n, utility_scores
from .toy_model import AdapterGradient, ToyDataset, ToyNetwork

__version__ = "0.1.0"
