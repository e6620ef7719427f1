"""Image-adaptive enhancement model: global image statistics drive blend
weights over a small bank of lookup tables.

The weight predictor is a plain affine map from a 54-dimensional feature
vector (per-channel 16-bin histograms plus per-channel mean and standard
deviation). Initialized to emit (1, 0, ..., 0) over an identity-plus-zeros
basis, so the untrained model is the identity."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lut as lut_mod
from .errors import FormatError
from .imaging import ImageBuffer, atomic_write_json

HIST_BINS = 16
FEATURE_DIM = 3 * HIST_BINS + 6


def extract_features(image) -> np.ndarray:
    """54 global statistics of an RGB image in [0,1]: per-channel 16-bin
    histogram fractions (bins sum to 1 per channel), then per-channel mean,
    then per-channel population standard deviation. Invariant to pixel
    permutation by construction."""
    if isinstance(image, ImageBuffer):
        arr = image.data
    else:
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    work = np.clip(arr.reshape(-1, 3).astype(np.float64), 0.0, 1.0)
    n = work.shape[0]
    parts = []
    for c in range(3):
        counts, _ = np.histogram(work[:, c], bins=HIST_BINS, range=(0.0, 1.0))
        parts.append(counts.astype(np.float64) / n)
    means = work.mean(axis=0)
    stds = work.std(axis=0)
    return np.concatenate(parts + [means, stds]).astype(np.float32)


@dataclass(frozen=True)
class Predictor:
    """Affine map from features to blend weights: w = W f + b."""

    weight: np.ndarray  # (N, F) float32
    bias: np.ndarray  # (N,) float32

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError(f"inconsistent predictor shapes {w.shape} / {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("predictor parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def num_luts(self) -> int:
        return self.bias.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]


def initial_predictor(num_luts: int = lut_mod.DEFAULT_NUM_LUTS, feature_dim: int = FEATURE_DIM) -> Predictor:
    bias = np.zeros(num_luts, dtype=np.float32)
    bias[0] = 1.0
    return Predictor(np.zeros((num_luts, feature_dim), dtype=np.float32), bias)


def predict_weights(predictor: Predictor, features: np.ndarray) -> np.ndarray:
    """Blend weights for one feature vector; unconstrained affine output."""
    f = np.asarray(features, dtype=np.float32).reshape(-1)
    if f.shape[0] != predictor.feature_dim:
        raise ValueError(
            f"feature length {f.shape[0]} does not match predictor ({predictor.feature_dim})"
        )
    return predictor.bias + predictor.weight @ f


def predictor_gradients(features: np.ndarray, d_weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the affine map: dL/dW = d_weights outer features,
    dL/db = d_weights."""
    f = np.asarray(features, dtype=np.float64).reshape(-1)
    dw = np.asarray(d_weights, dtype=np.float64).reshape(-1)
    return np.outer(dw, f), dw


@dataclass(frozen=True)
class ModelState:
    """A full enhancement model: basis tables, weight predictor, and the
    hash of the training config that produced it."""

    luts: tuple[lut_mod.Lut3D, ...]
    predictor: Predictor
    config_hash: str = ""

    def __post_init__(self):
        luts = tuple(self.luts)
        if len(luts) != self.predictor.num_luts:
            raise ValueError(
                f"{len(luts)} tables but predictor emits {self.predictor.num_luts} weights"
            )
        object.__setattr__(self, "luts", luts)

    @property
    def size(self) -> int:
        return self.luts[0].size

    @property
    def num_luts(self) -> int:
        return len(self.luts)

    def blend_for(self, image_or_features) -> lut_mod.LutBlend:
        if isinstance(image_or_features, np.ndarray) and image_or_features.ndim == 1:
            feats = image_or_features
        else:
            feats = extract_features(image_or_features)
        return lut_mod.LutBlend(self.luts, predict_weights(self.predictor, feats))


def initial_state(
    num_luts: int = lut_mod.DEFAULT_NUM_LUTS,
    size: int = lut_mod.DEFAULT_SIZE,
    feature_dim: int = FEATURE_DIM,
    config_hash: str = "",
) -> ModelState:
    return ModelState(
        luts=lut_mod.identity_basis(num_luts, size),
        predictor=initial_predictor(num_luts, feature_dim),
        config_hash=config_hash,
    )


def enhance(
    state: ModelState,
    image: ImageBuffer,
    *,
    feature_image: ImageBuffer | None = None,
    clamp: bool = True,
    threads: int | None = None,
) -> ImageBuffer:
    """Retouch one image: features (optionally from a separate render, e.g.
    the 360p proxy of a full-resolution input) pick the blend, which is then
    applied to ``image``."""
    blend = state.blend_for(feature_image if feature_image is not None else image)
    return lut_mod.apply(blend, image, clamp=clamp, threads=threads)


def config_hash(config_dict: dict) -> str:
    """Stable hash of a JSON-serializable config mapping."""
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# checkpoint IO: single JSON file, float32 payloads as base64

_CHECKPOINT_FORMAT = "pprkit-model"
_CHECKPOINT_VERSION = 1


def _encode_array(arr: np.ndarray) -> dict:
    le = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "dtype": "float32",
        "data": base64.b64encode(le.tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict, where: str) -> np.ndarray:
    try:
        raw = base64.b64decode(obj["data"])
        arr = np.frombuffer(raw, dtype="<f4").reshape(obj["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"checkpoint field {where}: {exc}") from exc
    return arr.astype(np.float32)


def save_checkpoint(path, state: ModelState) -> None:
    stacked = np.stack([l.table for l in state.luts])
    payload = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "lut_size": state.size,
        "num_luts": state.num_luts,
        "feature_dim": state.predictor.feature_dim,
        "config_hash": state.config_hash,
        "luts": _encode_array(stacked),
        "predictor_weight": _encode_array(state.predictor.weight),
        "predictor_bias": _encode_array(state.predictor.bias),
    }
    atomic_write_json(path, payload)


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != _CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a model checkpoint")
    if payload.get("version") != _CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    stacked = _decode_array(payload["luts"], "luts")
    n, s = payload["num_luts"], payload["lut_size"]
    if stacked.shape != (n, s, s, s, 3):
        raise FormatError(f"{path}: table payload shape {stacked.shape} mismatches header")
    predictor = Predictor(
        _decode_array(payload["predictor_weight"], "predictor_weight"),
        _decode_array(payload["predictor_bias"], "predictor_bias"),
    )
    luts = tuple(lut_mod.Lut3D(stacked[i]) for i in range(n))
    return ModelState(luts=luts, predictor=predictor, config_hash=payload.get("config_hash", ""))
