"""Trilinear 3D lookup tables: construction, application, blending,
analytic derivatives, and .cube interchange.

A table of lattice size S stores an S x S x S grid of RGB outputs over the
unit cube; entry [i, j, k] is the output for input (i, j, k) / (S - 1),
with the first axis indexed by red. Application interpolates the eight
lattice entries that enclose each pixel. The map is linear both in the
table entries and, for blends, in the blend weights; the training
gradients rely on exactly those two linearities.

Two execution paths exist: a compiled float32 kernel used by the public
``apply`` (parallel over pixels), and a pure-numpy cache path that
preserves the input dtype, which training and double-precision gradient
verification share.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .color import ColorSpaceTag
from .errors import FormatError, PprkitError, TagMismatchError
from .imaging import ImageBuffer

logger = logging.getLogger(__name__)

DEFAULT_SIZE = 33
DEFAULT_NUM_LUTS = 5

try:  # the compiled kernel is optional; everything falls back to numpy
    import numba
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


@dataclass(frozen=True)
class Lut3D:
    """An S x S x S x 3 float32 lattice over the unit RGB cube."""

    table: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.table)
        if arr.ndim != 4 or arr.shape[3] != 3 or len(set(arr.shape[:3])) != 1:
            raise ValueError(f"Lut3D expects (S, S, S, 3) entries, got {arr.shape}")
        if arr.shape[0] < 2:
            raise ValueError(f"lattice size must be >= 2, got {arr.shape[0]}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Lut3D entries must be finite")
        object.__setattr__(self, "table", arr)

    @property
    def size(self) -> int:
        return self.table.shape[0]


@dataclass(frozen=True)
class LutBlend:
    """A weighted combination of same-size basis tables."""

    basis: tuple[Lut3D, ...]
    weights: np.ndarray

    def __post_init__(self):
        basis = tuple(self.basis)
        if not basis:
            raise ValueError("LutBlend needs at least one basis table")
        sizes = {b.size for b in basis}
        if len(sizes) != 1:
            raise ValueError(f"basis tables must share one lattice size, got {sorted(sizes)}")
        w = np.asarray(self.weights, dtype=np.float32).reshape(-1)
        if w.shape[0] != len(basis):
            raise ValueError(f"{len(basis)} basis tables but {w.shape[0]} weights")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.basis[0].size

    def effective(self) -> Lut3D:
        """Collapse to a single table: sum of weight_n * basis_n."""
        stack = np.stack([b.table for b in self.basis]).astype(np.float64)
        eff = np.tensordot(self.weights.astype(np.float64), stack, axes=1)
        return Lut3D(eff.astype(np.float32))


def make_identity(size: int = DEFAULT_SIZE) -> Lut3D:
    """Identity lattice: entry (i, j, k) = (i, j, k) / (S - 1)."""
    if size < 2:
        raise ValueError(f"lattice size must be >= 2, got {size}")
    axis = np.linspace(0.0, 1.0, size, dtype=np.float32)
    r, g, b = np.meshgrid(axis, axis, axis, indexing="ij")
    return Lut3D(np.stack([r, g, b], axis=-1))


def identity_basis(num_luts: int = DEFAULT_NUM_LUTS, size: int = DEFAULT_SIZE) -> tuple[Lut3D, ...]:
    """Basis 0 is the identity, the rest are zero lattices; with blend
    weights (1, 0, ..., 0) the untrained model is the identity map."""
    if num_luts < 1:
        raise ValueError(f"need at least one basis table, got {num_luts}")
    zero = Lut3D(np.zeros((size, size, size, 3), dtype=np.float32))
    return (make_identity(size),) + (zero,) * (num_luts - 1)


def perturb(lut: Lut3D, magnitude: float, seed: int) -> Lut3D:
    """Add seeded uniform noise in +-magnitude to every entry, clamped."""
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-magnitude, magnitude, size=lut.table.shape)
    return Lut3D(np.clip(lut.table.astype(np.float64) + noise, 0.0, 1.0).astype(np.float32))


def random_smooth(size: int, magnitude: float, seed: int) -> Lut3D:
    """Identity plus a smooth random tone deviation bounded by magnitude.

    The deviation per output channel is a sum of low-frequency sinusoids of
    the lattice coordinates, normalized so its peak equals magnitude; good
    stand-in for a plausible global retouch.
    """
    rng = np.random.default_rng(seed)
    ident = make_identity(size).table.astype(np.float64)
    coords = [ident[..., c] for c in range(3)]
    mixed = sum(coords) / 3.0
    delta = np.zeros_like(ident)
    for c in range(3):
        field = np.zeros(ident.shape[:3])
        for axis in (*coords, mixed):
            amp = rng.uniform(0.3, 1.0)
            freq = rng.uniform(0.3, 1.1)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            field += amp * np.sin(2.0 * np.pi * freq * axis + phase)
        peak = np.max(np.abs(field))
        if peak > 0:
            delta[..., c] = magnitude * field / peak
    return Lut3D(np.clip(ident + delta, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# numpy cache path (dtype-preserving; shared by training and verification)

_CORNER_STEPS = [(di, dj, dk) for di in (0, 1) for dj in (0, 1) for dk in (0, 1)]


@dataclass(frozen=True)
class TrilinearCache:
    """Per-pixel lattice indices and interpolation weights, reusable across
    tables of the same size."""

    size: int
    base: np.ndarray     # (P,) int32 flat index of the low corner in (S,S,S)
    weights: np.ndarray  # (P, 8) corner weights, same dtype as the pixels

    @property
    def offsets(self) -> np.ndarray:
        s = self.size
        return np.array([(di * s + dj) * s + dk for di, dj, dk in _CORNER_STEPS], dtype=np.int32)

    def apply(self, tables: np.ndarray) -> np.ndarray:
        """Interpolate tables of shape (..., S^3, 3) at the cached pixels;
        returns (..., P, 3)."""
        offs = self.offsets
        out = None
        for corner in range(8):
            idx = self.base + offs[corner]
            term = self.weights[:, corner, None] * tables[..., idx, :]
            out = term if out is None else out + term
        return out

    def scatter(self, upstream: np.ndarray) -> np.ndarray:
        """Adjoint of apply for a single table: accumulate (P, 3) upstream
        gradients onto the (S^3, 3) entries, in float64."""
        s3 = self.size**3
        offs = self.offsets
        out = np.zeros((s3, 3), dtype=np.float64)
        up = np.asarray(upstream, dtype=np.float64)
        for corner in range(8):
            idx = self.base + offs[corner]
            w = self.weights[:, corner].astype(np.float64)
            for c in range(3):
                out[:, c] += np.bincount(idx, weights=w * up[:, c], minlength=s3)
        return out


def trilinear_cache(size: int, pixels: np.ndarray) -> TrilinearCache:
    """Build the interpolation cache for (P, 3) pixels in any float dtype.

    Inputs are clamped to [0,1]. At exact lattice nodes the fractional
    parts are zero, so node inputs reproduce entries exactly.
    """
    p = np.clip(np.asarray(pixels), 0.0, 1.0)
    scaled = p * p.dtype.type(size - 1)
    idx = np.minimum(scaled.astype(np.int32), size - 2)
    frac = scaled - idx
    lo = 1.0 - frac
    parts = [
        (frac[:, 0] if di else lo[:, 0])
        * (frac[:, 1] if dj else lo[:, 1])
        * (frac[:, 2] if dk else lo[:, 2])
        for di, dj, dk in _CORNER_STEPS
    ]
    weights = np.stack(parts, axis=1).astype(p.dtype)
    base = (idx[:, 0].astype(np.int32) * size + idx[:, 1]) * size + idx[:, 2]
    return TrilinearCache(size=size, base=base, weights=weights)


@dataclass(frozen=True)
class LutGradients:
    """Analytic derivatives from ``gradients``: per-entry grads for every
    basis table and per-weight grads, accumulated in float64."""

    tables: np.ndarray  # (N, S, S, S, 3)
    weights: np.ndarray  # (N,)


def gradients(blend: LutBlend, image, upstream) -> LutGradients:
    """Exact derivatives of unclamped application w.r.t. every basis-table
    entry and every blend weight.

    Output is linear in entries and weights, so the entry gradient is the
    upstream scattered through the trilinear weights (scaled by the blend
    weight), and each weight gradient is the inner product of that scatter
    with the corresponding basis table.
    """
    pixels = _as_pixels(image)
    up = np.asarray(upstream).reshape(pixels.shape)
    cache = trilinear_cache(blend.size, pixels)
    d_eff = cache.scatter(up)  # (S^3, 3) float64
    flat = np.stack([b.table.reshape(-1, 3) for b in blend.basis]).astype(np.float64)
    d_weights = np.einsum("nec,ec->n", flat, d_eff)
    w = blend.weights.astype(np.float64)
    n = len(blend.basis)
    s = blend.size
    d_tables = (w[:, None, None] * d_eff).reshape(n, s, s, s, 3)
    return LutGradients(tables=d_tables, weights=d_weights)


# ---------------------------------------------------------------------------
# compiled kernel

if _HAVE_NUMBA:
    _F0 = np.float32(0.0)
    _F1 = np.float32(1.0)

    _CHUNK = 128  # pixels per block; small enough that the staging arrays stay in L1

    @njit(parallel=True, cache=True, fastmath=True)
    def _trilinear_f32(table, size, pixels, out):  # pragma: no cover - compiled
        # table: flat (S^3*3,) float32, layout [i, j, k, c] with i = red.
        # Two stages per block: the index/weight stage is straight-line math
        # LLVM vectorizes outright, and splitting it from the gather stage
        # lets the corner loads come out as hardware gathers instead of a
        # scalar dependency chain.  All arithmetic stays in float32; mixing
        # in int intermediates promotes to float64 and halves throughput.
        n = pixels.shape[0] // 3
        smax = size - 2
        step_g = size * 3
        step_r = size * size * 3
        scale = np.float32(size - 1)
        nblocks = (n + _CHUNK - 1) // _CHUNK
        for blk in prange(nblocks):
            lo = blk * _CHUNK
            m = min(lo + _CHUNK, n) - lo
            base = np.empty(_CHUNK, np.int64)
            w = np.empty((8, _CHUNK), np.float32)
            for t in range(m):
                p = lo + t
                r = min(max(pixels[3 * p], _F0), _F1) * scale
                g = min(max(pixels[3 * p + 1], _F0), _F1) * scale
                b = min(max(pixels[3 * p + 2], _F0), _F1) * scale
                i0 = min(int(r), smax)
                j0 = min(int(g), smax)
                k0 = min(int(b), smax)
                fr = r - np.float32(i0)
                fg = g - np.float32(j0)
                fb = b - np.float32(k0)
                gr = _F1 - fr
                gg = _F1 - fg
                gb = _F1 - fb
                w00 = gr * gg
                w10 = fr * gg
                w01 = gr * fg
                w11 = fr * fg
                w[0, t] = w00 * gb
                w[1, t] = w10 * gb
                w[2, t] = w01 * gb
                w[3, t] = w11 * gb
                w[4, t] = w00 * fb
                w[5, t] = w10 * fb
                w[6, t] = w01 * fb
                w[7, t] = w11 * fb
                base[t] = ((i0 * size + j0) * size + k0) * 3
            for t in range(m):
                p = lo + t
                b000 = base[t]
                b100 = b000 + step_r
                b010 = b000 + step_g
                b110 = b000 + step_r + step_g
                w000 = w[0, t]
                w100 = w[1, t]
                w010 = w[2, t]
                w110 = w[3, t]
                w001 = w[4, t]
                w101 = w[5, t]
                w011 = w[6, t]
                w111 = w[7, t]
                for c in range(3):
                    out[3 * p + c] = (
                        w000 * table[b000 + c]
                        + w100 * table[b100 + c]
                        + w010 * table[b010 + c]
                        + w110 * table[b110 + c]
                        + w001 * table[b000 + 3 + c]
                        + w101 * table[b100 + 3 + c]
                        + w011 * table[b010 + 3 + c]
                        + w111 * table[b110 + 3 + c]
                    )


def resolve_threads(requested: int | None = None) -> int:
    """Thread count for parallel application: PPR_THREADS env var wins,
    then the explicit request, then the machine's CPU count."""
    env = os.environ.get("PPR_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise PprkitError(f"PPR_THREADS must be an integer, got {env!r}") from None
    elif requested is not None:
        n = int(requested)
    else:
        n = os.cpu_count() or 1
    return max(1, n)


def _as_pixels(image) -> np.ndarray:
    if isinstance(image, ImageBuffer):
        return image.data.reshape(-1, 3)
    arr = np.asarray(image)
    if arr.ndim < 1 or arr.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) RGB values, got shape {arr.shape}")
    return arr.reshape(-1, 3)


_NUMPY_CHUNK = 1 << 19  # pixels per slice on the fallback path, bounds memory


def _apply_array(table: Lut3D, arr: np.ndarray, threads: int | None) -> np.ndarray:
    pixels = arr.reshape(-1, 3)
    if _HAVE_NUMBA and pixels.dtype == np.float32:
        n = resolve_threads(threads)
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
        flat_in = np.ascontiguousarray(pixels).reshape(-1)
        out = np.empty_like(flat_in)
        _trilinear_f32(table.table.reshape(-1), table.size, flat_in, out)
        return out.reshape(arr.shape)
    # dtype-preserving fallback, chunked
    out = np.empty_like(pixels)
    flat = table.table.reshape(-1, 3).astype(pixels.dtype)
    for start in range(0, pixels.shape[0], _NUMPY_CHUNK):
        chunk = pixels[start : start + _NUMPY_CHUNK]
        cache = trilinear_cache(table.size, chunk)
        out[start : start + _NUMPY_CHUNK] = cache.apply(flat)
    return out.reshape(arr.shape)


def apply(lut, image, *, clamp: bool = True, threads: int | None = None):
    """Apply a table or blend to an image by trilinear interpolation.

    Accepts an ImageBuffer (RGB tags only; the tag is preserved) or a bare
    (..., 3) float array. Inputs are clamped to the unit cube; outputs are
    clamped to [0,1] unless ``clamp=False``. float32 data takes the
    compiled parallel kernel; other float dtypes take the exact numpy path.
    """
    table = lut.effective() if isinstance(lut, LutBlend) else lut
    if not isinstance(table, Lut3D):
        raise TypeError(f"expected Lut3D or LutBlend, got {type(lut).__name__}")
    if isinstance(image, ImageBuffer):
        if image.space is ColorSpaceTag.CIELAB:
            raise TagMismatchError("apply expects an RGB-tagged buffer, got CIELAB")
        out = _apply_array(table, image.data, threads)
        if clamp:
            np.clip(out, 0.0, 1.0, out=out)
        return ImageBuffer(out, image.space)
    arr = np.asarray(image)
    if arr.ndim < 1 or arr.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) RGB values, got shape {arr.shape}")
    out = _apply_array(table, arr, threads)
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return out


# ---------------------------------------------------------------------------
# .cube interchange (header LUT_3D_SIZE S, then S^3 RGB lines, red fastest)


def write_cube(path, lut: Lut3D, title: str | None = None) -> None:
    lines = []
    if title:
        lines.append(f'TITLE "{title}"')
    lines.append(f"LUT_3D_SIZE {lut.size}")
    table = lut.table
    s = lut.size
    # red varies fastest: iterate blue outermost
    for k in range(s):
        for j in range(s):
            for i in range(s):
                r, g, b = table[i, j, k]
                lines.append("%.9g %.9g %.9g" % (r, g, b))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_cube(path) -> Lut3D:
    path = Path(path)
    size = None
    values: list[tuple[float, float, float]] = []
    for lineno, raw in enumerate(path.read_text(encoding="ascii").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        upper = line.upper()
        if upper.startswith("TITLE"):
            continue
        if upper.startswith("LUT_3D_SIZE"):
            parts = line.split()
            if len(parts) != 2 or not parts[1].isdigit():
                raise FormatError(f"{path}:{lineno}: malformed LUT_3D_SIZE line")
            size = int(parts[1])
            continue
        if upper.startswith("DOMAIN_MIN") or upper.startswith("DOMAIN_MAX"):
            vals = line.split()[1:]
            expected = "0 0 0" if upper.startswith("DOMAIN_MIN") else "1 1 1"
            if [float(v) for v in vals] != [float(v) for v in expected.split()]:
                raise FormatError(f"{path}:{lineno}: only the unit domain is supported")
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        try:
            values.append(tuple(float(v) for v in parts))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric entry") from None
    if size is None:
        raise FormatError(f"{path}: missing LUT_3D_SIZE header")
    if len(values) != size**3:
        raise FormatError(f"{path}: expected {size**3} entries, found {len(values)}")
    flat = np.asarray(values, dtype=np.float32)
    # file order is red-fastest: reshape as (b, g, r, c) then transpose
    table = flat.reshape(size, size, size, 3).transpose(2, 1, 0, 3)
    return Lut3D(np.ascontiguousarray(table))
