"""Tonal jitter, paired overlapping crops, and geometric transforms.

The crop-pair sampler plus two independent jitters manufacture the
appearance of two inconsistently developed shots of one scene from a single
image; consistency training compares model output on the pixel-aligned
overlap."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import color
from .errors import PprkitError

# Rec. 709 luma on nonlinear values, used by the saturation operator.
_LUMA = np.array([0.2126, 0.7152, 0.0722], dtype=np.float32)

_HIGHLIGHT_KNEE = 0.7


@dataclass(frozen=True)
class TonalJitter:
    """Six tonal adjustments; all-zero is the identity (within 1e-6)."""

    exposure: float = 0.0  # stops, applied as a linear-RGB gain 2^stops
    temperature: float = 0.0  # warm/cool: R gain 1+0.2t, B gain 1-0.2t
    tint: float = 0.0  # green/magenta: G gain 1+0.2*tint
    highlights: float = 0.0  # lift/crush above the 0.7 knee
    contrast: float = 0.0  # s-curve slope around 0.5
    saturation: float = 0.0  # lerp between luma and pixel by 1+s


@dataclass(frozen=True)
class JitterRanges:
    """Symmetric sampling ranges for each jitter attribute."""

    exposure: float = 1.0
    temperature: float = 0.3
    tint: float = 0.3
    highlights: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3


@dataclass(frozen=True)
class AugmentConfig:
    crop_min: float = 0.6  # crop side as a fraction of the short side
    crop_max: float = 0.9
    min_overlap: float = 0.25  # of the smaller crop's area
    hflip_prob: float = 0.5
    rotate_prob: float = 0.0
    jitter: JitterRanges = field(default_factory=JitterRanges)


def sample_jitter(rng: np.random.Generator, ranges: JitterRanges) -> TonalJitter:
    """Draw each attribute uniformly from its symmetric range. Always draws
    all six values so the random stream advances identically regardless of
    which ranges are zero."""
    vals = [
        float(rng.uniform(-r, r))
        for r in (
            ranges.exposure,
            ranges.temperature,
            ranges.tint,
            ranges.highlights,
            ranges.contrast,
            ranges.saturation,
        )
    ]
    return TonalJitter(*vals)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def apply_jitter(image: np.ndarray, jitter: TonalJitter) -> np.ndarray:
    """Apply the six adjustments in their fixed order to an sRGB image in
    [0,1]; returns float32.

    Order: decode to linear; exposure gain; temperature gains on R/B; tint
    gain on G; re-encode; highlights (smoothstep ramp above 0.7 toward 1 by
    factor h); contrast s-curve; saturation luma lerp; final clamp."""
    arr = np.asarray(image, dtype=np.float32)
    lin = color.srgb_to_linear(arr)
    lin = lin * np.float32(2.0**jitter.exposure)
    gains = np.array(
        [
            1.0 + 0.2 * jitter.temperature,
            1.0 + 0.2 * jitter.tint,
            1.0 - 0.2 * jitter.temperature,
        ],
        dtype=np.float32,
    )
    lin = lin * gains
    v = color.linear_to_srgb(lin)
    ramp = _smoothstep((v - _HIGHLIGHT_KNEE) / (1.0 - _HIGHLIGHT_KNEE))
    v = v + np.float32(jitter.highlights) * ramp * (1.0 - v)
    v = (v - 0.5) * np.float32(1.0 + jitter.contrast) + 0.5
    luma = (v * _LUMA).sum(axis=-1, keepdims=True)
    v = luma + (v - luma) * np.float32(1.0 + jitter.saturation)
    return np.clip(v, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# crop pairs


@dataclass(frozen=True)
class CropRect:
    y0: int
    x0: int
    height: int
    width: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y0 + self.height), slice(self.x0, self.x0 + self.width)

    @property
    def area(self) -> int:
        return self.height * self.width


def _intersect(a: CropRect, b: CropRect) -> CropRect | None:
    y0 = max(a.y0, b.y0)
    x0 = max(a.x0, b.x0)
    y1 = min(a.y0 + a.height, b.y0 + b.height)
    x1 = min(a.x0 + a.width, b.x0 + b.width)
    if y1 <= y0 or x1 <= x0:
        return None
    return CropRect(y0, x0, y1 - y0, x1 - x0)


@dataclass(frozen=True)
class CropPair:
    """Two in-bounds rectangles, their intersection (image coordinates),
    and optionally the jitter assigned to each branch."""

    first: CropRect
    second: CropRect
    overlap: CropRect
    jitter_first: TonalJitter | None = None
    jitter_second: TonalJitter | None = None

    def overlap_in(self, rect: CropRect) -> tuple[slice, slice]:
        """The overlap expressed in a crop's local coordinates."""
        return (
            slice(self.overlap.y0 - rect.y0, self.overlap.y0 - rect.y0 + self.overlap.height),
            slice(self.overlap.x0 - rect.x0, self.overlap.x0 - rect.x0 + self.overlap.width),
        )

    def with_jitters(self, j1: TonalJitter, j2: TonalJitter) -> "CropPair":
        return replace(self, jitter_first=j1, jitter_second=j2)


def sample_crop_pair(
    shape: tuple[int, int], rng: np.random.Generator, config: AugmentConfig
) -> CropPair:
    """Two square crops with sides uniform in [crop_min, crop_max] of the
    short side, positioned uniformly, rejected until the overlap covers at
    least min_overlap of the smaller crop."""
    h, w = int(shape[0]), int(shape[1])
    short = min(h, w)
    lo = int(round(config.crop_min * short))
    hi = int(round(config.crop_max * short))
    if lo < 1 or hi < lo:
        raise PprkitError(f"image {w}x{h} too small for crop fractions "
                          f"[{config.crop_min}, {config.crop_max}]")

    def draw() -> CropRect:
        side = int(round(rng.uniform(lo, hi)))
        side = min(side, short)
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        return CropRect(y, x, side, side)

    for _ in range(1000):
        first, second = draw(), draw()
        ov = _intersect(first, second)
        if ov is not None and ov.area >= config.min_overlap * min(first.area, second.area):
            return CropPair(first, second, ov)
    # pathological config; concentric crops always satisfy the constraint
    side = lo
    rect = CropRect((h - side) // 2, (w - side) // 2, side, side)
    return CropPair(rect, rect, rect)


# ---------------------------------------------------------------------------
# geometric ops


@dataclass(frozen=True)
class GeometricOp:
    hflip: bool = False
    quarter_turns: int = 0  # counterclockwise 90-degree turns, 0..3


def sample_geometric(rng: np.random.Generator, config: AugmentConfig) -> GeometricOp:
    """Draws are unconditional to keep the stream position config-free."""
    flip_draw = rng.uniform()
    rot_draw = rng.uniform()
    turns = int(rng.integers(1, 4))
    flip = bool(flip_draw < config.hflip_prob)
    rotate = bool(rot_draw < config.rotate_prob)
    return GeometricOp(hflip=flip, quarter_turns=turns if rotate else 0)


def geometric_augment(image: np.ndarray, mask: np.ndarray | None, op: GeometricOp):
    """Apply the same flip/rotation to an image and its aligned mask (mask
    may be None). hflip twice is the identity; four quarter turns too."""

    def one(arr: np.ndarray) -> np.ndarray:
        out = arr[:, ::-1] if op.hflip else arr
        if op.quarter_turns % 4:
            out = np.rot90(out, k=op.quarter_turns % 4, axes=(0, 1))
        return np.ascontiguousarray(out)

    return one(np.asarray(image)), (None if mask is None else one(np.asarray(mask)))
