"""Detection of mean and variance-covariance nonstationarity in
grid-indexed trial data by partitioning into stationary random-field
patches, plus the simulation and evaluation harness around it."""

from .errors import GridPatchError
from .grid import (
    Adjacency,
    GridShape,
    Partition,
    Patch,
    TrialGrid,
    parse_trial,
)
from .grf import (
    Correlation,
    EvidenceLevel,
    FittedModel,
    GrfFamily,
    GrfParams,
    ScoreKind,
    all_families,
    bayes_factor,
    build_covariance,
    cv_nll,
    fit_mle,
    log_likelihood,
    select_model,
)
from .tree import IndexTree, SplitConstraints, TreeKind, build_binary_tree, build_quad_tree
from .segment import (
    AuthMode,
    IdentifyKind,
    PipelineConfig,
    QcReport,
    VerifyStage,
    authenticate,
    authenticate_final,
    detect,
    identify_bottom_up,
    identify_top_down,
    report_to_dict,
    verify,
)
from .analysis import DesignMatrix, FirstStageFit, build_design, gls_fit
from .simulate import PriorConfig, SimTrial, lloyd_partition, run_study, simulate_trial
from .evaluate import (
    BenchmarkSummary,
    BenchmarkVariant,
    SimilarityScore,
    optimal_merge,
    oracle_authenticate,
    oracle_bottom_up,
    run_benchmark,
    similarity,
)
from .estimators import GlsResidualTransformer, GridPatchDetector
from .render import svg_heatmap

__version__ = "0.1.0"

__all__ = [
    "Adjacency", "AuthMode", "BenchmarkSummary", "BenchmarkVariant",
    "Correlation", "DesignMatrix", "EvidenceLevel", "FirstStageFit",
    "FittedModel", "GlsResidualTransformer", "GridPatchDetector",
    "GridPatchError", "GridShape", "GrfFamily", "GrfParams", "IdentifyKind",
    "IndexTree", "Partition", "Patch", "PipelineConfig", "PriorConfig",
    "QcReport", "ScoreKind", "SimTrial", "SimilarityScore",
    "SplitConstraints", "TreeKind", "TrialGrid", "VerifyStage",
    "all_families", "authenticate", "authenticate_final", "bayes_factor",
    "build_binary_tree", "build_covariance", "build_design",
    "build_quad_tree", "cv_nll", "detect", "fit_mle", "gls_fit",
    "identify_bottom_up", "identify_top_down", "lloyd_partition",
    "log_likelihood", "optimal_merge", "oracle_authenticate",
    "oracle_bottom_up", "parse_trial", "report_to_dict", "run_benchmark",
    "run_study", "select_model", "similarity", "simulate_trial",
    "svg_heatmap", "verify",
]
