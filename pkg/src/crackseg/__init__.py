"""Pixel-level pavement crack segmentation toolkit.

From-scratch reverse-mode autodiff, a widened U-Net, an image tiling
and manifest pipeline, a synthetic two-style corpus generator, pixel
metrics, and a deterministic trainer with resumable checkpoints.
"""

from .tensor import Tensor, backward, no_grad, GradientStateError
from .ops import (
    conv2d,
    maxpool2,
    upsample2,
    upconv2,
    concat_channels,
    relu,
    sigmoid,
    bce_loss,
    BCE_EPSILON,
)
from .optim import Adam, adam_step
from .unet import UNetConfig, UNetModel, build, channel_schedule, count_parameters
from .data import (
    Sample,
    DatasetManifest,
    TileSpec,
    DataError,
    tile_image,
    stitch_predictions,
    load_image,
    load_sample,
    dihedral_transform,
    augment,
    make_splits,
    load_manifest,
    save_manifest,
    merge_manifests,
)
from .synth import SynthStyle, STYLE_A, STYLE_B, generate, generate_corpus
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    confusion,
    precision,
    recall,
    f1_score,
    iou,
    evaluate_dataset,
)
from .train import (
    TrainConfig,
    TrainState,
    TrainingDivergedError,
    CheckpointError,
    CheckpointVersionError,
    CheckpointCorruptError,
    train,
    save_checkpoint,
    load_checkpoint,
    ExperimentSpec,
    ExperimentResult,
    run_experiment,
)

__version__ = "0.1.0"
