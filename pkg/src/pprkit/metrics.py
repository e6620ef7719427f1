"""The five retouching measures: PSNR and mean Lab color difference, their
human-region weighted variants, and group-level tonal consistency.

Weighted definitions reduce exactly to the basic ones under any uniform
mask: weights are canonicalized by dividing by their maximum, so a uniform
mask becomes all-ones and follows literally the same arithmetic path as the
unweighted call. Reductions run in float64.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import color
from .errors import DimensionMismatchError, TagMismatchError
from .imaging import ImageBuffer, WeightMask, atomic_write_json, atomic_write_text

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0

# Evaluation-time mask weights (training uses its own; see training module).
EVAL_HUMAN_WEIGHT = 1.0
EVAL_BACKGROUND_ALPHA = 0.5

DEFAULT_GLC_CHANNELS = "ab"

_RGB_CHANNELS = {"R": 0, "G": 1, "B": 2}
_LAB_CHANNELS = {"L": 0, "a": 1, "b": 2}


def _as_srgb_f64(image, where: str) -> np.ndarray:
    if isinstance(image, ImageBuffer):
        if image.space is not color.ColorSpaceTag.SRGB_NONLINEAR:
            raise TagMismatchError(f"{where} expects sRGB images, got {image.space.value!r}")
        return image.data.astype(np.float64)
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{where}: expected (H, W, 3) image, got shape {arr.shape}")
    return arr


def _paired(pred, target, where: str) -> tuple[np.ndarray, np.ndarray]:
    a = _as_srgb_f64(pred, where)
    b = _as_srgb_f64(target, where)
    if a.shape != b.shape:
        raise DimensionMismatchError(
            f"{where}: prediction is {a.shape[1]}x{a.shape[0]}, target is {b.shape[1]}x{b.shape[0]}"
        )
    return a, b


def canonical_weights(weights, shape: tuple[int, int]) -> np.ndarray:
    """Resolve a mask argument to float64 (H, W) weights scaled so
    max(w) == 1; None means uniform. The measures are scale-invariant, and
    this normalization makes any uniform mask exactly all-ones."""
    if weights is None:
        return np.ones(shape, dtype=np.float64)
    if isinstance(weights, WeightMask):
        w = weights.weights
    else:
        w = np.asarray(weights)
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and strictly positive")
    if w.shape != tuple(shape):
        raise DimensionMismatchError(
            f"weights are {w.shape[1]}x{w.shape[0]}, image is {shape[1]}x{shape[0]}"
        )
    w = w.astype(np.float64)
    return w / w.max()


def weighted_mse(pred, target, weights=None) -> float:
    """Squared-weight mean squared error:
    sum(w^2 (pred-target)^2) / (3 sum(w^2)). Uniform weights give plain MSE."""
    a, b = _paired(pred, target, "weighted_mse")
    w = canonical_weights(weights, a.shape[:2])
    w2 = w * w
    num = (w2[:, :, None] * (a - b) ** 2).sum()
    return float(num / (3.0 * w2.sum()))


def psnr(pred, target, weights=None) -> float:
    """PSNR in dB with MAX=1; identical images return the 100 dB cap."""
    mse = weighted_mse(pred, target, weights)
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def delta_e(pred, target, weights=None) -> float:
    """Weighted mean per-pixel Euclidean Lab distance:
    sum(w d) / sum(w). Uniform weights give the plain mean distance."""
    a, b = _paired(pred, target, "delta_e")
    w = canonical_weights(weights, a.shape[:2])
    d = np.sqrt(((color.srgb_to_lab(a) - color.srgb_to_lab(b)) ** 2).sum(axis=-1))
    return float((w * d).sum() / w.sum())


# ---------------------------------------------------------------------------
# group-level consistency


def parse_channels(channels: str) -> tuple[str, ...]:
    """Validate a channel-set string over {R,G,B,L,a,b} (case matters:
    'b' is the Lab axis, 'B' the RGB one)."""
    chans = tuple(channels)
    if not chans:
        raise ValueError("channel set must not be empty")
    for c in chans:
        if c not in _RGB_CHANNELS and c not in _LAB_CHANNELS:
            raise ValueError(f"unknown channel {c!r} (allowed: R, G, B, L, a, b)")
    if len(set(chans)) != len(chans):
        raise ValueError(f"duplicate channel in {channels!r}")
    return chans


def channel_means(image, channels: str = DEFAULT_GLC_CHANNELS) -> np.ndarray:
    """Mean value of each requested channel, float64, in channel order."""
    chans = parse_channels(channels)
    if isinstance(image, ImageBuffer) and image.space is color.ColorSpaceTag.CIELAB:
        if any(c in _RGB_CHANNELS for c in chans):
            raise TagMismatchError("RGB channel means need an RGB image, got CIELAB")
        lab = image.data.astype(np.float64)
        rgb = None
    else:
        rgb = _as_srgb_f64(image, "channel_means")
        lab = color.srgb_to_lab(rgb) if any(c in _LAB_CHANNELS for c in chans) else None
    out = np.empty(len(chans), dtype=np.float64)
    for i, c in enumerate(chans):
        plane = rgb[..., _RGB_CHANNELS[c]] if c in _RGB_CHANNELS else lab[..., _LAB_CHANNELS[c]]
        out[i] = plane.mean(dtype=np.float64)
    return out


def glc_from_means(member_means: np.ndarray) -> float:
    """Group consistency from per-member channel means of shape (m, C):
    sum over channels of the population variance of the member means.

    Means are sorted per channel before the fold, which makes the result
    bitwise invariant to member order.
    """
    means = np.asarray(member_means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise ValueError(f"need (m >= 2, C) member means, got shape {means.shape}")
    total = 0.0
    for c in range(means.shape[1]):
        vals = np.sort(means[:, c])
        if vals[0] == vals[-1]:
            continue  # constant channel: exactly zero, skip the rounding of mean()
        mu = vals.mean()
        total += float(((vals - mu) ** 2).mean())
    return total


@dataclass(frozen=True)
class GlcResult:
    per_group: Mapping[str, float]
    mean: float
    skipped: tuple[str, ...]
    channels: str


def glc_measure(groups, channels: str = DEFAULT_GLC_CHANNELS) -> GlcResult:
    """Group-level consistency over {group_id: [images]} (or an iterable of
    such pairs). Groups with fewer than two members are skipped with a
    warning and excluded from the dataset mean (arithmetic mean over
    groups, folded in sorted group order)."""
    parse_channels(channels)
    items = groups.items() if isinstance(groups, Mapping) else groups
    per_group: dict[str, float] = {}
    skipped: list[str] = []
    for gid, images in sorted(items, key=lambda kv: kv[0]):
        if len(images) < 2:
            skipped.append(gid)
            continue
        means = np.stack([channel_means(im, channels) for im in images])
        per_group[gid] = glc_from_means(means)
    if skipped:
        logger.warning(
            "glc_measure: skipped %d group(s) with fewer than two members: %s",
            len(skipped),
            ", ".join(skipped),
        )
    mean = float(np.mean(list(per_group.values()))) if per_group else float("nan")
    return GlcResult(per_group=per_group, mean=mean, skipped=tuple(skipped), channels=channels)


# ---------------------------------------------------------------------------
# report model and emission


@dataclass(frozen=True)
class PhotoMetrics:
    photo_id: str
    group_id: str
    resolution: str
    psnr: float
    delta_e: float
    psnr_hc: float
    delta_e_hc: float


@dataclass(frozen=True)
class GroupMetrics:
    group_id: str
    resolution: str
    members: int
    m_glc: float


_SUMMARY_MEASURES = ("psnr", "delta_e", "psnr_hc", "delta_e_hc", "m_glc")


@dataclass
class MetricReport:
    """Per-photo rows, per-group consistency rows, and a summary block of
    the five measures keyed by resolution."""

    photos: list[PhotoMetrics] = field(default_factory=list)
    groups: list[GroupMetrics] = field(default_factory=list)
    summary: dict[str, dict[str, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "meta": dict(self.meta),
            "summary": {res: dict(vals) for res, vals in self.summary.items()},
            "photos": [vars(p).copy() for p in self.photos],
            "groups": [vars(g).copy() for g in self.groups],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricReport":
        return cls(
            photos=[PhotoMetrics(**row) for row in data.get("photos", ())],
            groups=[GroupMetrics(**row) for row in data.get("groups", ())],
            summary={res: dict(v) for res, v in data.get("summary", {}).items()},
            meta=dict(data.get("meta", {})),
        )

    def write_json(self, path) -> None:
        atomic_write_json(path, self.to_dict())

    def write_csv(self, photos_path, groups_path) -> None:
        atomic_write_text(photos_path, self._rows_csv(self.photos))
        atomic_write_text(groups_path, self._rows_csv(self.groups))

    @staticmethod
    def _rows_csv(rows: Sequence) -> str:
        if not rows:
            return ""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        fields = list(vars(rows[0]))
        writer.writerow(fields)
        for row in rows:
            writer.writerow([getattr(row, f) for f in fields])
        return buf.getvalue()

    def summary_text(self) -> str:
        """Fixed-width summary table: one row per measure, one column per
        resolution."""
        resolutions = list(self.summary)
        header = f"{'measure':<12}" + "".join(f"{res:>12}" for res in resolutions)
        lines = [header]
        for measure in _SUMMARY_MEASURES:
            cells = []
            for res in resolutions:
                value = self.summary.get(res, {}).get(measure)
                cells.append(f"{value:>12.4f}" if value is not None else f"{'-':>12}")
            lines.append(f"{measure:<12}" + "".join(cells))
        return "\n".join(lines) + "\n"
