"""Self-knowledge distillation with a shallow auxiliary teacher and ranked-logit regularisation."""

from .losses import (
    classification_loss,
    combined_loss,
    cross_entropy,
    drg_loss,
    dsr_loss,
    hard_label_loss,
    kd_loss,
    kl_divergence,
    rank_ascending,
    reverse_guidance_loss,
    shape_regularization_loss,
    softened_distribution,
)
from .models import ACSpec, Scaffold, attach_auxiliary, model_registry, parameter_partition
from .data import AugmentationPolicy, BatchPlan, augment, build_batches, load_dataset
from .training import (
    Trainer,
    TrainingConfig,
    build_model,
    load_checkpoint,
    lr_at,
    train_combined,
    train_drg,
    train_dsr,
    train_vanilla,
)
from .analysis import (
    MetricsLog,
    export_logits,
    pearson,
    profile_run,
    ranked_output_variance,
    top1_accuracy,
)

__version__ = "0.1.0"
