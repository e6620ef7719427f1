"""Portrait photo retouching toolkit: an image-adaptive 3D LUT enhancer
with human-region-weighted fidelity measures and a group-consistency
measure, plus synthetic benchmark generation and a training loop."""

__version__ = "0.1.0"

from .color import ColorSpaceTag, lab_to_srgb, linear_to_srgb, srgb_to_lab, srgb_to_linear
from .errors import (
    DimensionMismatchError,
    FormatError,
    ImageIOError,
    ManifestError,
    PprkitError,
    TagMismatchError,
    TrainingDivergedError,
)
from .imaging import (
    Dataset,
    Group,
    ImageBuffer,
    PhotoRecord,
    WeightMask,
    load_image,
    load_manifest,
    load_mask,
    save_image,
    save_mask,
)
from .lut import Lut3D, LutBlend, apply, make_identity, read_cube, write_cube
from .metrics import MetricReport, delta_e, glc_measure, psnr, weighted_mse
from .model import ModelState, enhance, initial_state, load_checkpoint, save_checkpoint
from .synthdata import SynthConfig, generate, generate_lut_recovery
from .training import TrainConfig, TrainResult, evaluate, loss_glc, loss_hc, train

__all__ = [
    "ColorSpaceTag",
    "Dataset",
    "DimensionMismatchError",
    "FormatError",
    "Group",
    "ImageBuffer",
    "ImageIOError",
    "Lut3D",
    "LutBlend",
    "ManifestError",
    "MetricReport",
    "ModelState",
    "PhotoRecord",
    "PprkitError",
    "SynthConfig",
    "TagMismatchError",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "WeightMask",
    "apply",
    "delta_e",
    "enhance",
    "evaluate",
    "generate",
    "generate_lut_recovery",
    "glc_measure",
    "initial_state",
    "lab_to_srgb",
    "linear_to_srgb",
    "load_checkpoint",
    "load_image",
    "load_manifest",
    "load_mask",
    "loss_glc",
    "loss_hc",
    "make_identity",
    "psnr",
    "read_cube",
    "save_checkpoint",
    "save_image",
    "save_mask",
    "srgb_to_lab",
    "srgb_to_linear",
    "train",
    "weighted_mse",
    "write_cube",
]
