"""Class-incremental learning with anchor-queried unlabeled data."""

from .config import ExperimentConfig, load_config
from .data import LabeledExample, Task, TaskStream, UnlabeledExample, build_stream
from .inference import (
    ENSEMBLE,
    EnsembleConfig,
    ensemble_predict,
    evaluate_ra,
    evaluate_sa,
    predict,
)
from .losses import (
    AttackConfig,
    consistency_loss,
    cross_entropy,
    ft_loss,
    kd_loss,
    pgd_attack,
    robust_ft_loss,
    robust_kd_loss,
)
from .models import (
    AUXILIARY,
    PRIMARY,
    BackboneConfig,
    DualHeadModel,
    Hyperparameters,
    load_checkpoint,
    save_checkpoint,
    take_snapshot,
)
from .query import (
    QueriedPool,
    query_feature_knn,
    query_largest_logit,
    query_random,
)
from .reporting import StreamAborted, StreamReport, emit_report
from .sampling import (
    BatchTriple,
    MemoryBank,
    build_class_balanced_batch,
    build_random_batch,
    build_unlabeled_batch,
    update_memory_bank,
)
from .stream import run_stream
from .bounds import run_baseline_bounds
from .training import (
    SessionConfig,
    SessionResult,
    select_model,
    train_session_robust,
    train_session_standard,
    train_session_vanilla,
)

__version__ = "0.1.0"
