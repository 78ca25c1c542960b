"""Cross-stage feature distillation: a student's stage features are
supervised by all teacher stages at or below them, collapsed into a residual
fusion chain with attention-gated merging and a pyramid-pooled distance."""

from .core import (
    ConfigError,
    DistillConfig,
    EpochStats,
    FeatureMap,
    RunRecord,
    ShapeMismatchError,
    StageOutputs,
    TrainingDiverged,
    TrainSchedule,
    config_hash,
    load_config_file,
    save_config_file,
    validate_config,
    validate_schedule,
)
from .data import (
    DataBundle,
    Dataset,
    LabeledBatch,
    load_cifar,
    load_cifar_bundle,
    synthetic_dataset,
)
from .experiments import (
    EXPERIMENT_SCHEDULE,
    AblationResult,
    AblationRow,
    ExperimentSettings,
    StageGridResult,
    run_ablation,
    run_stage_grid,
)
from .fusion import ABF, HCL
from .losses import (
    DistillModules,
    LossBreakdown,
    ResidualFusers,
    TransformSet,
    build_residual_fusers,
    build_transforms,
    distance,
    kd_logit_loss,
    mkd_loss,
    mkd_review_naive_loss,
    mkd_review_reordered_loss,
    mkd_review_residual_loss,
    pair_loss,
    skd_loss,
    skd_review_loss,
    total_loss,
)
from .nets import ARCHITECTURES, StageNet, StudentTransform, build_net, build_pair, list_archs
from .report import REPORT_FORMATS, emit_report
from .training import (
    DESK_SCHEDULE,
    PAPER_SCHEDULE,
    evaluate,
    forward_trace,
    load_checkpoint,
    lr_at_epoch,
    parameter_checksum,
    save_checkpoint,
    train_distill,
    train_plain,
)

__version__ = "0.1.0"
