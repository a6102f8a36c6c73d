"""Sheaf-diffusion collaborative filtering.

A cellular-sheaf diffusion model over the bipartite user-item graph, trained
with pairwise ranking losses through a small built-in reverse-mode engine,
plus top-K evaluation metrics and an experiment CLI.
"""

from .autodiff import ArrayBackend, GradientStore, Tape, Tensor, UnsupportedOperationError
from .data import (
    BipartiteGraph,
    InteractionSet,
    ParseError,
    SplitSet,
    adapt_bipartite,
    build_bipartite,
    parse_ratings,
    split_interactions,
)
from .evaluation import (
    EvaluationError,
    MetricsReport,
    evaluate,
    f1_score,
    measure_rec_time,
    mrr_at_k,
    ndcg_at_k,
    precision_recall_at_k,
)
from .model import (
    FinalRepresentations,
    ModelConfig,
    ModelState,
    count_parameters,
    forward,
    init_model,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    score_all,
    top_k,
)
from .sheaf import (
    BlockSparseOperator,
    Cochain0,
    Cochain1,
    MissingRestrictionError,
    NormalizationError,
    RestrictionMap,
    SheafError,
    SheafStructure,
    StalkConfig,
    build_coboundary,
    diffusion_step,
    identity_sheaf,
    normalized_sheaf_laplacian,
    sheaf_laplacian,
    unit_euler_step,
)
from .synthetic import generate_synthetic
from .training import (
    AdamW,
    SamplingError,
    TrainConfig,
    TrainingDivergedError,
    TripletBatch,
    bce_loss,
    bpr_loss,
    bpr_loss_pairwise,
    rmse_loss,
    sample_batch,
    train,
)

__version__ = "0.1.0"
