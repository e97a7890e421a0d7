"""Desk-scale decentralized federated distillation with exact transport
similarity weighting of returned teacher models."""

from .checkpoint import Checkpoint
from .config import ExperimentConfig, config_from_dict, load_config
from .data import (
    Dataset,
    EpochSampler,
    Minibatch,
    UnseenSplit,
    generate_synthetic,
    load_manifest,
    partition_unseen,
    sample_minibatch,
    save_manifest,
)
from .distill import (
    DistillConfig,
    Teacher,
    TeacherSet,
    distill_loss,
    local_pretrain_step,
    local_update,
)
from .errors import (
    ConfigError,
    DegeneracyError,
    FedemdError,
    NumericError,
    ProtocolError,
    SolverError,
)
from .federation import (
    AggregationSpec,
    MessageBus,
    RoundState,
    RunResult,
    SiloGraph,
    aggregate,
    overseas_train,
    run_round,
    run_training,
)
from .finetune import FinetuneReport, finetune_compare
from .model import (
    ArchSpec,
    FeatureMap,
    Gradients,
    ModelWeights,
    cross_entropy,
    evaluate,
    forward,
    sgd_step,
    softmax_temperature,
    value_and_grad,
)
from .tensor import Tensor, backward, softmax_rows
from .transport import (
    LpProblem,
    MarginalWeights,
    TransportSolution,
    build_lp,
    cost_matrix,
    emd_between_models,
    emd_score,
    emd_score_gradient,
    emd_similarity,
    flow_jacobian,
    kkt_residual,
    marginal_weights,
    solve_transport,
)

__version__ = "0.1.0"
