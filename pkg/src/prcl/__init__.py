"""Probabilistic pixel representations with prototype-contrastive semi-supervised training."""

from .contrastive import (
    ContrastBatch,
    SchedulerConfig,
    infonce_l2_loss,
    lambda_c,
    lambda_u,
    prcl_loss,
    softmax_contrast_term,
    total_loss,
)
from .data import DatasetSpec, PixelDataset, augment, corrupt_labels, generate, load_dataset, save_dataset
from .harness import (
    DivergenceError,
    EpochRecord,
    RunConfig,
    RunReport,
    evaluate,
    read_report,
    sweep,
    train,
)
from .model import (
    ModelConfig,
    OptimConfig,
    TeacherStudent,
    ToyModel,
    backward_step,
    ce_loss,
    ema_update,
    forward,
    load_checkpoint,
    pseudo_label,
    save_checkpoint,
)
from .prob_embed import (
    SIGMA2_MAX,
    SIGMA2_MIN,
    DistPrototype,
    PointPrototype,
    ProbRep,
    fuse_prototype,
    mls,
    mls_grad,
    point_prototype,
    update_prototype,
)
from .sampling import (
    PixelCandidate,
    SamplingConfig,
    allocate_negatives,
    filter_valid,
    largest_remainder,
    sample_anchors,
)

__version__ = "0.1.0"
