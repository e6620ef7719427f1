"""Color spaces, conversions, and per-pixel color difference.

Images move between three representations: nonlinear sRGB (what files
store), linear RGB (where physical adjustments such as exposure act), and
CIELAB (where perceptual differences are measured). Conversion math always
runs in float64 and results are cast back to the caller's dtype, which keeps
round-trip error bounded by the final rounding step and lets metric code
request full double precision by passing float64 arrays.
"""

from __future__ import annotations

import dataclasses
import logging
from enum import Enum
from typing import NamedTuple

import numpy as np

from .errors import TagMismatchError

logger = logging.getLogger(__name__)

__all__ = [
    "ColorSpaceTag",
    "LabPixel",
    "srgb_to_linear",
    "linear_to_srgb",
    "srgb_to_lab",
    "lab_to_srgb",
    "rgb_to_lab",
    "lab_to_rgb",
    "delta_e_pixel",
]


class ColorSpaceTag(Enum):
    """How the values in an image buffer are to be interpreted."""

    SRGB_NONLINEAR = "srgb"
    LINEAR_RGB = "linear-rgb"
    CIELAB = "cielab"


class LabPixel(NamedTuple):
    """One CIELAB color; L in [0,100], a/b opponent axes."""

    L: float
    a: float
    b: float


# Piecewise sRGB transfer (IEC 61966-2-1). Decode keeps the published knee
# 0.04045. The encode knee sits at the exact crossover of the two encode
# branches: the rounded 0.0031308 leaves a ~2.9e-8 downward step there,
# which would break strict monotonicity.
_DECODE_KNEE = 0.04045
_ENCODE_KNEE = 0.003130668442500634
_LINEAR_SLOPE = 12.92
_GAIN = 1.055
_OFFSET = 0.055
_GAMMA = 2.4

# sRGB (D65, 2-degree observer) to XYZ, Bruce Lindbloom's matrix.
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)
WHITE_POINT_D65 = np.array([0.95047, 1.0, 1.08883])

_LAB_DELTA = 6.0 / 29.0
_LAB_DELTA2 = _LAB_DELTA**2
_LAB_DELTA3 = _LAB_DELTA**3


def _clamp_unit(work: np.ndarray, where: str) -> np.ndarray:
    """Clamp to [0,1] in place, reporting how many values were outside."""
    n_out = int(np.count_nonzero((work < 0.0) | (work > 1.0)))
    if n_out:
        logger.debug("%s: clamped %d out-of-range values", where, n_out)
    return np.clip(work, 0.0, 1.0, out=work)


def _restore(out: np.ndarray, like: np.ndarray):
    """Cast a float64 result back to the input's dtype (or python float)."""
    if like.ndim == 0:
        return float(out)
    if like.dtype.kind == "f" and like.dtype != np.float64:
        return out.astype(like.dtype)
    return out


def srgb_to_linear(values):
    """Decode nonlinear sRGB channel values to linear RGB.

    Accepts scalars or arrays of any shape. Inputs are clamped to [0,1]
    first (clamp count logged at DEBUG level); math runs in float64 and the
    result is cast back to the input dtype.
    """
    arr = np.asarray(values)
    work = _clamp_unit(arr.astype(np.float64), "srgb_to_linear")
    out = np.where(
        work <= _DECODE_KNEE,
        work / _LINEAR_SLOPE,
        ((work + _OFFSET) / _GAIN) ** _GAMMA,
    )
    return _restore(out, arr)


def linear_to_srgb(values):
    """Encode linear RGB channel values to nonlinear sRGB (inverse of
    srgb_to_linear, round-trip error < 1e-7 in double precision)."""
    arr = np.asarray(values)
    work = _clamp_unit(arr.astype(np.float64), "linear_to_srgb")
    out = np.where(
        work <= _ENCODE_KNEE,
        work * _LINEAR_SLOPE,
        _GAIN * work ** (1.0 / _GAMMA) - _OFFSET,
    )
    return _restore(out, arr)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _LAB_DELTA3, np.cbrt(t), t / (3.0 * _LAB_DELTA2) + 4.0 / 29.0)


def _lab_f_inv(u: np.ndarray) -> np.ndarray:
    return np.where(u > _LAB_DELTA, u**3, 3.0 * _LAB_DELTA2 * (u - 4.0 / 29.0))


def _require_rgb_shape(arr: np.ndarray, where: str) -> None:
    if arr.ndim < 1 or arr.shape[-1] != 3:
        raise ValueError(f"{where}: expected trailing axis of 3 channels, got shape {arr.shape}")


def srgb_to_lab(rgb):
    """Convert sRGB values (..., 3) in [0,1] to CIELAB (..., 3).

    D65 white point, 2-degree observer. Result dtype follows the input.
    """
    arr = np.asarray(rgb)
    _require_rgb_shape(arr, "srgb_to_lab")
    lin = _clamp_unit(arr.astype(np.float64), "srgb_to_lab")
    lin = np.where(
        lin <= _DECODE_KNEE, lin / _LINEAR_SLOPE, ((lin + _OFFSET) / _GAIN) ** _GAMMA
    )
    xyz = lin @ RGB_TO_XYZ.T
    f = _lab_f(xyz / WHITE_POINT_D65)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    lab = np.stack(
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1
    )
    return _restore(lab, arr)


def lab_to_srgb(lab):
    """Convert CIELAB values (..., 3) back to sRGB in [0,1].

    Out-of-gamut results are clamped (count logged at DEBUG level).
    """
    arr = np.asarray(lab)
    _require_rgb_shape(arr, "lab_to_srgb")
    work = arr.astype(np.float64)
    fy = (work[..., 0] + 16.0) / 116.0
    fx = fy + work[..., 1] / 500.0
    fz = fy - work[..., 2] / 200.0
    xyz = _lab_f_inv(np.stack([fx, fy, fz], axis=-1)) * WHITE_POINT_D65
    lin = _clamp_unit(xyz @ XYZ_TO_RGB.T, "lab_to_srgb")
    out = np.where(
        lin <= _ENCODE_KNEE,
        lin * _LINEAR_SLOPE,
        _GAIN * lin ** (1.0 / _GAMMA) - _OFFSET,
    )
    return _restore(out, arr)


def rgb_to_lab(buffer):
    """Convert an sRGB-tagged image buffer to a CIELAB-tagged one."""
    if buffer.space is not ColorSpaceTag.SRGB_NONLINEAR:
        raise TagMismatchError(
            f"rgb_to_lab expects an sRGB buffer, got {buffer.space.value!r}"
        )
    return dataclasses.replace(
        buffer, data=srgb_to_lab(buffer.data), space=ColorSpaceTag.CIELAB
    )


def lab_to_rgb(buffer):
    """Convert a CIELAB-tagged image buffer back to sRGB."""
    if buffer.space is not ColorSpaceTag.CIELAB:
        raise TagMismatchError(
            f"lab_to_rgb expects a CIELAB buffer, got {buffer.space.value!r}"
        )
    return dataclasses.replace(
        buffer, data=lab_to_srgb(buffer.data), space=ColorSpaceTag.SRGB_NONLINEAR
    )


def delta_e_pixel(p, q) -> float:
    """Euclidean distance between two CIELAB colors.

    Symmetric, nonnegative, zero only for equal colors.
    """
    a = np.asarray(p, dtype=np.float64)
    b = np.asarray(q, dtype=np.float64)
    if a.shape != (3,) or b.shape != (3,):
        raise ValueError(f"delta_e_pixel expects two Lab triples, got {a.shape} and {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))
