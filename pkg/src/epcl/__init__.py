"""Semi-supervised 3D volumetric segmentation with Mean-Teacher training,
joint uncertainty quantification, CutMix augmentation and prototype
consistency learning."""

__version__ = "0.1.0"

from .volume_io import (  # noqa: F401
    LabelVolume,
    PatchGrid,
    Volume,
    assemble_prediction,
    load_volume,
    normalize_intensity,
    plan_sliding_window,
    save_volume,
    synth_dataset,
)
from .augmentation import (  # noqa: F401
    AugmentedSample,
    CutMask,
    Sample,
    augment_labeled_batch,
    augment_unlabeled_batch,
    cutmix,
    generate_cut_mask,
    random_flip_rotate,
)
from .model import (  # noqa: F401
    BackboneConfig,
    PredictionSet,
    SegmentationModel,
    TeacherStudentPair,
    build_pair,
    ema_update,
)
from .uncertainty import (  # noqa: F401
    PseudoLabel,
    ReliabilityMap,
    UncertaintyMap,
    dist_uncertainty_norm,
    entropy_map,
    entropy_norm,
    juq,
    refine_pseudo_labels,
    reliability_map,
)
from .prototypes import (  # noqa: F401
    ClassPrototype,
    FusedPrototypes,
    SimilarityMap,
    fuse_global,
    fuse_unlabeled,
    labeled_prototypes,
    masked_average_pool,
    similarity_map,
    unlabeled_prototypes,
)
from .losses import (  # noqa: F401
    LossReport,
    ce_loss,
    consistency_losses,
    dice_loss,
    focal_loss,
    iou_loss,
    ramp_lambda,
    supervised_loss,
    total_loss,
)
from .metrics import (  # noqa: F401
    MetricReport,
    evaluate_segmentation,
    overlap_metrics,
    surface_metrics,
)
from .trainer import (  # noqa: F401
    TrainConfig,
    TrainState,
    TrainingData,
    init_state,
    load_config,
    predict,
    run_training,
    train_step,
)
