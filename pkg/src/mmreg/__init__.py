"""Multi-metric MRF deformable registration with learned metric aggregation."""

from .volume import (
    ControlGrid,
    DeformationField,
    LabelSpace,
    SegmentationMask,
    Volume,
    extract_patch,
    interpolate_dense,
    make_control_grid,
    warp,
    warp_mask,
)
from .metrics import (
    METRIC_NAMES,
    MetricConfig,
    WeightMatrix,
    aggregated_unary,
    compute_metric,
    dominant_class,
    unary_features,
)
from .graphreg import (
    MrfInstance,
    PyramidConfig,
    build_instance,
    initialize_label_space,
    refine_label_space,
    register,
    solve,
    solve_bruteforce,
)
from .learn import (
    TrainConfig,
    TrainingSample,
    assemble_model,
    dice_loss,
    impute_latent,
    most_violated,
    solve_qp,
    train_class,
)
from .evaluation import exact_dice, run_benchmark
from .synth import SynthSpec, synth_dataset

__version__ = "0.1.0"
