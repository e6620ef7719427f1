"""Image buffers, masks, resizing, file IO, and the dataset manifest."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import cv2
import numpy as np

from .color import ColorSpaceTag
from .errors import (
    DimensionMismatchError,
    FormatError,
    ImageIOError,
    ManifestError,
)

logger = logging.getLogger(__name__)

EXPERTS = ("a", "b", "c")

_PNG_SUFFIXES = {".png", ".tif", ".tiff"}
_PNM_SUFFIXES = {".ppm", ".pnm"}


@dataclass(frozen=True)
class ImageBuffer:
    """An H x W x 3 float32 image in a declared color space.

    RGB-tagged buffers hold values in [0,1] after load; CIELAB buffers use
    the usual Lab ranges. Immutable once constructed, safe to share.
    """

    data: np.ndarray
    space: ColorSpaceTag = ColorSpaceTag.SRGB_NONLINEAR

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"ImageBuffer expects (H, W, 3) data, got {arr.shape}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class WeightMask:
    """Per-pixel positive weights paired with an image of the same size."""

    weights: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.weights)
        if arr.ndim != 2:
            raise ValueError(f"WeightMask expects (H, W) weights, got {arr.shape}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
            raise ValueError("WeightMask weights must be finite and strictly positive")
        object.__setattr__(self, "weights", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @classmethod
    def from_mask(
        cls, mask: np.ndarray, human_weight: float = 1.0, background_alpha: float = 0.5
    ) -> "WeightMask":
        """human_weight on foreground pixels, background_alpha elsewhere."""
        if human_weight <= 0 or background_alpha <= 0:
            raise ValueError("mask weights must be strictly positive")
        m = np.asarray(mask)
        if m.ndim != 2:
            raise ValueError(f"expected a 2-d binary mask, got shape {m.shape}")
        w = np.where(m.astype(bool), np.float32(human_weight), np.float32(background_alpha))
        return cls(w)

    @classmethod
    def uniform(cls, shape: tuple[int, int], value: float = 1.0) -> "WeightMask":
        return cls(np.full(shape, np.float32(value)))


# ---------------------------------------------------------------------------
# file IO


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM/PNM (P6) file")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        # skip whitespace and '#' comments between header tokens
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: malformed header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte separating header from raster
    width, height, maxval = fields
    if maxval == 255:
        dtype, itemsize = np.dtype(np.uint8), 1
    elif maxval == 65535:
        dtype, itemsize = np.dtype(">u2"), 2  # 16-bit samples are big-endian
    else:
        raise FormatError(f"{path}: unsupported maxval {maxval} (need 255 or 65535)")
    need = width * height * 3 * itemsize
    data = raw[pos : pos + need]
    if len(data) != need:
        raise FormatError(f"{path}: raster truncated ({len(data)} of {need} bytes)")
    arr = np.frombuffer(data, dtype=dtype).reshape(height, width, 3)
    return arr.astype(np.uint16) if itemsize == 2 else arr


def _write_pnm(path: Path, arr: np.ndarray) -> None:
    maxval = 255 if arr.dtype == np.uint8 else 65535
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    payload = arr.tobytes() if maxval == 255 else arr.astype(">u2").tobytes()
    path.write_bytes(header + payload)


def _read_png(path: Path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageIOError(f"cannot read image: {path}")
    if arr.ndim != 3 or arr.shape[2] != 3:
        got = 1 if arr.ndim == 2 else arr.shape[2]
        raise FormatError(f"{path}: expected 3 channels, got {got}")
    return arr[:, :, ::-1]  # BGR -> RGB


def load_image_raw(path) -> tuple[np.ndarray, int]:
    """Load an image as its native integer array; returns (array, bit depth)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in _PNM_SUFFIXES:
        arr = _read_pnm(path)
    elif suffix in _PNG_SUFFIXES:
        if not path.exists():
            raise ImageIOError(f"cannot read image: {path}")
        arr = _read_png(path)
    else:
        raise FormatError(f"{path}: unsupported image format {suffix!r}")
    if arr.dtype == np.uint8:
        return arr, 8
    if arr.dtype == np.uint16:
        return arr, 16
    raise FormatError(f"{path}: unsupported sample type {arr.dtype}")


def load_image(path, bit_depth: int | None = None) -> ImageBuffer:
    """Load an 8/16-bit PNG or PPM/PNM into an sRGB-tagged float buffer.

    Values are divided by (2^depth - 1) into [0,1]. If bit_depth is given,
    a file at a different depth is a format error.
    """
    arr, depth = load_image_raw(path)
    if bit_depth is not None and depth != bit_depth:
        raise FormatError(f"{path}: expected {bit_depth}-bit samples, found {depth}-bit")
    scale = float(2**depth - 1)
    data = (arr.astype(np.float64) / scale).astype(np.float32)
    return ImageBuffer(data, ColorSpaceTag.SRGB_NONLINEAR)


def save_image(path, buffer: ImageBuffer, bit_depth: int = 8) -> None:
    """Quantize to the given depth and write PNG or PPM/PNM by suffix."""
    if buffer.space is not ColorSpaceTag.SRGB_NONLINEAR:
        from .errors import TagMismatchError

        raise TagMismatchError(
            f"save_image expects an sRGB buffer, got {buffer.space.value!r}"
        )
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    maxval = 2**bit_depth - 1
    q = np.round(np.clip(buffer.data.astype(np.float64), 0.0, 1.0) * maxval)
    arr = q.astype(np.uint8 if bit_depth == 8 else np.uint16)
    save_image_raw(path, arr)


def save_image_raw(path, arr: np.ndarray) -> None:
    """Write a uint8/uint16 (H, W, 3) RGB array by file suffix."""
    path = Path(path)
    if arr.dtype not in (np.uint8, np.uint16):
        raise ValueError(f"expected uint8/uint16 samples, got {arr.dtype}")
    suffix = path.suffix.lower()
    if suffix in _PNM_SUFFIXES:
        _write_pnm(path, arr)
    elif suffix in _PNG_SUFFIXES:
        ok = cv2.imwrite(str(path), np.ascontiguousarray(arr[:, :, ::-1]))
        if not ok:
            raise ImageIOError(f"cannot write image: {path}")
    else:
        raise FormatError(f"{path}: unsupported image format {suffix!r}")


def load_mask(path, image_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Load a single-channel 8-bit mask; pixels >= 128 are human region.

    If image_shape is given, a size mismatch is an error naming both sizes.
    """
    path = Path(path)
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageIOError(f"cannot read mask: {path}")
    if arr.ndim != 2:
        raise FormatError(f"{path}: masks must be single-channel, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise FormatError(f"{path}: masks must be 8-bit, got {arr.dtype}")
    if image_shape is not None and arr.shape != tuple(image_shape):
        raise DimensionMismatchError(
            f"{path}: mask is {arr.shape[1]}x{arr.shape[0]}, "
            f"image is {image_shape[1]}x{image_shape[0]}"
        )
    return arr >= 128


def save_mask(path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), np.uint8(255), np.uint8(0))
    ok = cv2.imwrite(str(Path(path)), arr)
    if not ok:
        raise ImageIOError(f"cannot write mask: {path}")


# ---------------------------------------------------------------------------
# resizing


def _short_side_dims(h: int, w: int, target: int) -> tuple[int, int]:
    # never upscale: the proxy render exists to bound compute
    if min(h, w) <= target:
        return h, w
    scale = target / min(h, w)
    if h <= w:
        return target, max(1, int(round(w * scale)))
    return max(1, int(round(h * scale))), target


def resize_short_side(buffer: ImageBuffer, target: int) -> ImageBuffer:
    """Bilinear resize so the short side equals target, aspect preserved.

    An image at or below the target size is returned unchanged.
    """
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    h, w = buffer.shape
    nh, nw = _short_side_dims(h, w, target)
    if (nh, nw) == (h, w):
        return buffer
    return resize_to(buffer, (nh, nw))


def resize_to(buffer: ImageBuffer, shape: tuple[int, int]) -> ImageBuffer:
    """Bilinear resize to an explicit (height, width)."""
    h, w = buffer.shape
    nh, nw = int(shape[0]), int(shape[1])
    if (nh, nw) == (h, w):
        return buffer
    data = cv2.resize(buffer.data, (nw, nh), interpolation=cv2.INTER_LINEAR)
    return ImageBuffer(data, buffer.space)


def resize_mask_to(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize for binary masks."""
    m = np.asarray(mask, dtype=bool)
    nh, nw = int(shape[0]), int(shape[1])
    if m.shape == (nh, nw):
        return m
    out = cv2.resize(m.astype(np.uint8), (nw, nh), interpolation=cv2.INTER_NEAREST)
    return out.astype(bool)


def resize_mask_short_side(mask: np.ndarray, target: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return resize_mask_to(m, _short_side_dims(m.shape[0], m.shape[1], target))


# ---------------------------------------------------------------------------
# manifest / dataset model

_MANIFEST_KEYS = ("id", "group_id", "input", "target_a", "target_b", "target_c", "mask")


@dataclass(frozen=True)
class PhotoRecord:
    """One photo: input, per-expert targets, human mask, optional split."""

    id: str
    group_id: str
    input_path: Path
    target_paths: Mapping[str, Path]
    mask_path: Path
    split: str | None = None

    def target_for(self, expert: str) -> Path:
        if expert not in self.target_paths:
            raise KeyError(f"photo {self.id}: no target for expert {expert!r}")
        return self.target_paths[expert]


@dataclass(frozen=True)
class Group:
    """An ordered set of photos sharing a group id; the GLC unit."""

    group_id: str
    members: tuple[PhotoRecord, ...]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Dataset:
    groups: tuple[Group, ...] = ()

    def split(self, name: str) -> tuple[Group, ...]:
        return tuple(g for g in self.groups if g.split == name)

    @property
    def train_groups(self) -> tuple[Group, ...]:
        return self.split("train")

    @property
    def test_groups(self) -> tuple[Group, ...]:
        return self.split("test")

    def photos(self, split: str | None = None) -> tuple[PhotoRecord, ...]:
        groups = self.groups if split is None else self.split(split)
        return tuple(p for g in groups for p in g.members)


def split_groups(
    group_ids: Sequence[str], test_fraction: float, seed: int
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Deterministic whole-group split, invariant to input order."""
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must be in [0,1], got {test_fraction}")
    ids = sorted(group_ids)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test = {ids[i] for i in perm[:n_test]}
    return (
        tuple(g for g in ids if g not in test),
        tuple(g for g in ids if g in test),
    )


def write_manifest(path, rows: Iterable[Mapping]) -> None:
    """Write one JSON object per line."""
    path = Path(path)
    lines = [json.dumps(dict(row), sort_keys=False) for row in rows]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_manifest(
    path,
    *,
    test_fraction: float = 0.2,
    split_seed: int = 0,
    check_files: bool = True,
) -> Dataset:
    """Parse a JSON-lines manifest into groups with a train/test split.

    Split assignment comes from the per-record "split" field when present
    (all records must then carry one and agree within each group), otherwise
    from a seeded shuffle of the sorted group ids. All validation problems
    are collected and reported together.
    """
    path = Path(path)
    base = path.parent
    problems: list[str] = []
    records: list[PhotoRecord] = []
    seen_ids: set[str] = set()

    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"cannot read manifest: {path} ({exc})") from exc

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"line {lineno}: invalid JSON ({exc.msg})")
            continue
        if not isinstance(row, dict):
            problems.append(f"line {lineno}: expected an object")
            continue
        missing = [k for k in _MANIFEST_KEYS if not str(row.get(k, "") or "").strip()]
        if missing:
            ident = row.get("id", f"line {lineno}")
            problems.append(f"{ident}: missing field(s) {', '.join(missing)}")
            continue
        pid = str(row["id"])
        if pid in seen_ids:
            problems.append(f"{pid}: duplicate photo id")
            continue
        seen_ids.add(pid)
        split = row.get("split")
        if split is not None and split not in ("train", "test"):
            problems.append(f"{pid}: split must be 'train' or 'test', got {split!r}")
            continue

        def _resolve(p: str) -> Path:
            q = Path(p)
            return q if q.is_absolute() else base / q

        rec = PhotoRecord(
            id=pid,
            group_id=str(row["group_id"]),
            input_path=_resolve(row["input"]),
            target_paths={e: _resolve(row[f"target_{e}"]) for e in EXPERTS},
            mask_path=_resolve(row["mask"]),
            split=split,
        )
        if check_files:
            for label, fp in (
                ("input", rec.input_path),
                ("target_a", rec.target_paths["a"]),
                ("target_b", rec.target_paths["b"]),
                ("target_c", rec.target_paths["c"]),
                ("mask", rec.mask_path),
            ):
                if not fp.exists():
                    problems.append(f"{pid}: missing {label} file {fp}")
        records.append(rec)

    with_split = [r for r in records if r.split is not None]
    if with_split and len(with_split) != len(records):
        for r in records:
            if r.split is None:
                problems.append(f"{r.id}: split missing while other records carry one")

    by_group: dict[str, list[PhotoRecord]] = {}
    for rec in records:
        by_group.setdefault(rec.group_id, []).append(rec)

    explicit = bool(with_split) and len(with_split) == len(records)
    if explicit:
        for gid, members in by_group.items():
            splits = {m.split for m in members}
            if len(splits) > 1:
                problems.append(f"group {gid}: members straddle the split {sorted(splits)}")

    if problems:
        raise ManifestError(problems)

    if not records:
        logger.warning("manifest %s is empty", path)
        return Dataset(())

    if explicit:
        group_split = {gid: members[0].split for gid, members in by_group.items()}
    else:
        train_ids, test_ids = split_groups(list(by_group), test_fraction, split_seed)
        group_split = {g: "train" for g in train_ids} | {g: "test" for g in test_ids}

    groups = tuple(
        Group(
            group_id=gid,
            members=tuple(sorted(by_group[gid], key=lambda r: r.id)),
            split=group_split[gid],
        )
        for gid in sorted(by_group)
    )
    return Dataset(groups)


# ---------------------------------------------------------------------------
# atomic writes (reports must never exist half-written)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def atomic_write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")
