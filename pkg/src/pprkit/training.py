"""Optimization of the LUT-blend model under the weighted fidelity loss and
the crop-pair consistency loss, plus the evaluation protocol.

The fidelity loss uses the same squared-weight normalization as the
weighted PSNR measure, so optimizing the loss provably optimizes the
metric. The consistency loss compares model output on the pixel-aligned
overlap of two independently jittered crops of the same photo; both crop
branches are differentiated.

The trainer is single-threaded and bit-reproducible given (seed, config,
dataset): the random stream is consumed in a fixed order and gradient
sums fold in fixed photo order.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import augment as aug
from . import lut as lut_mod
from . import metrics as metrics_mod
from . import model as model_mod
from .errors import DimensionMismatchError, PprkitError, TrainingDivergedError
from .imaging import (
    Dataset,
    ImageBuffer,
    WeightMask,
    atomic_write_text,
    load_image,
    load_mask,
    resize_mask_to,
    resize_short_side,
    resize_to,
)

logger = logging.getLogger(__name__)

EXPERTS = ("a", "b", "c")
RESOLUTIONS = ("lr", "hr")

# Training-time mask weights: human regions dominate, background stays at 1.
TRAIN_HUMAN_WEIGHT = 5.0
TRAIN_BACKGROUND_ALPHA = 1.0


@dataclass(frozen=True)
class TrainConfig:
    expert: str = "a"
    lut_size: int = lut_mod.DEFAULT_SIZE
    num_luts: int = lut_mod.DEFAULT_NUM_LUTS
    epochs: int = 100
    batch_size: int = 16
    learning_rate_lut: float = 1e-2
    learning_rate_predictor: float = 1e-3
    momentum: float = 0.9
    glc_weight: float = 1.0  # weight of the consistency term in the total loss
    human_weight: float = TRAIN_HUMAN_WEIGHT
    background_alpha: float = TRAIN_BACKGROUND_ALPHA
    short_side: int = 360
    metrics_interval: int = 10  # epochs between metric log rows; 0 = final only
    seed: int = 0
    augment: aug.AugmentConfig = field(default_factory=aug.AugmentConfig)

    def __post_init__(self):
        if self.expert not in EXPERTS:
            raise ValueError(f"expert must be one of {EXPERTS}, got {self.expert!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.glc_weight < 0:
            raise ValueError("glc_weight must be >= 0")
        if self.human_weight <= 0 or self.background_alpha <= 0:
            raise ValueError("mask weights must be strictly positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.learning_rate_lut < 0 or self.learning_rate_predictor < 0:
            raise ValueError("learning rates must be >= 0")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "augment"}
        a = self.augment
        d["augment"] = {
            "crop_min": a.crop_min,
            "crop_max": a.crop_max,
            "min_overlap": a.min_overlap,
            "hflip_prob": a.hflip_prob,
            "rotate_prob": a.rotate_prob,
            "jitter": {f.name: getattr(a.jitter, f.name) for f in fields(a.jitter)},
        }
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        if "augment" in data:
            a = dict(data["augment"])
            jit = aug.JitterRanges(**a.pop("jitter", {}))
            data["augment"] = aug.AugmentConfig(jitter=jit, **a)
        return cls(**data)

    def hash(self) -> str:
        return model_mod.config_hash(self.to_dict())


@dataclass(frozen=True)
class LossBreakdown:
    l_hc: float
    l_glc: float
    total: float


# ---------------------------------------------------------------------------
# losses


def loss_hc(pred, target, weight_mask=None) -> tuple[float, np.ndarray]:
    """Weighted fidelity loss and its gradient w.r.t. the prediction.

    Value is identical to the squared-weight MSE inside the weighted PSNR
    (same code path); gradient is 2 w^2 (pred - target) / (3 sum w^2),
    returned in float64 at the prediction's shape.
    """
    value = metrics_mod.weighted_mse(pred, target, weight_mask)
    a = np.asarray(pred.data if isinstance(pred, ImageBuffer) else pred, dtype=np.float64)
    b = np.asarray(target.data if isinstance(target, ImageBuffer) else target, dtype=np.float64)
    w = metrics_mod.canonical_weights(weight_mask, a.shape[:2])
    w2 = w * w
    grad = (2.0 / (3.0 * w2.sum())) * w2[:, :, None] * (a - b)
    return value, grad


def loss_glc(overlap_first, overlap_second) -> tuple[float, np.ndarray, np.ndarray]:
    """Consistency loss between pixel-aligned overlap predictions: mean
    squared difference over (pixels x 3), with gradients for both branches."""
    a = np.asarray(overlap_first, dtype=np.float64)
    b = np.asarray(overlap_second, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"overlap shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    n = diff.size
    value = float((diff**2).sum() / n)
    g = (2.0 / n) * diff
    return value, g, -g


# ---------------------------------------------------------------------------
# trainer internals


@dataclass
class _TrainPhoto:
    photo_id: str
    group_id: str
    image: np.ndarray  # (H, W, 3) float32 sRGB
    target: np.ndarray  # (H, W, 3) float32 sRGB
    mask: np.ndarray  # (H, W) bool
    q: np.ndarray  # (H, W) float32: w^2 / (3 sum w^2), the loss weights


def _load_train_photos(dataset: Dataset, config: TrainConfig) -> list[_TrainPhoto]:
    photos: list[_TrainPhoto] = []
    for group in dataset.train_groups:
        for rec in group.members:
            img = resize_short_side(load_image(rec.input_path), config.short_side)
            tgt = resize_to(
                load_image(rec.target_for(config.expert)), img.shape
            )
            mask = resize_mask_to(load_mask(rec.mask_path), img.shape)
            w = metrics_mod.canonical_weights(
                WeightMask.from_mask(mask, config.human_weight, config.background_alpha),
                img.shape,
            )
            w2 = w * w
            q = (w2 / (3.0 * w2.sum())).astype(np.float32)
            photos.append(
                _TrainPhoto(
                    photo_id=rec.id,
                    group_id=rec.group_id,
                    image=img.data,
                    target=tgt.data,
                    mask=mask,
                    q=q,
                )
            )
    if not photos:
        raise PprkitError("train split is empty")
    return photos


@dataclass
class _Grads:
    tables: np.ndarray  # (N, S^3, 3) float32
    weight: np.ndarray  # (N, F) float32
    bias: np.ndarray  # (N,) float32

    @classmethod
    def zeros(cls, n: int, s: int, f: int) -> "_Grads":
        return cls(
            tables=np.zeros((n, s**3, 3), dtype=np.float32),
            weight=np.zeros((n, f), dtype=np.float32),
            bias=np.zeros(n, dtype=np.float32),
        )

    def scale(self, factor: float) -> None:
        self.tables *= np.float32(factor)
        self.weight *= np.float32(factor)
        self.bias *= np.float32(factor)


class _Model:
    """Mutable training view of the model: flat tables plus predictor."""

    def __init__(self, config: TrainConfig):
        basis = lut_mod.identity_basis(config.num_luts, config.lut_size)
        self.size = config.lut_size
        self.tables = np.stack([b.table.reshape(-1, 3) for b in basis])  # (N, S^3, 3)
        pred = model_mod.initial_predictor(config.num_luts)
        self.weight = pred.weight.copy()
        self.bias = pred.bias.copy()

    def blend_weights(self, feats: np.ndarray) -> np.ndarray:
        return self.bias + self.weight @ feats

    def forward(self, pixels: np.ndarray, blend_w: np.ndarray):
        """Unclamped prediction plus the reusable interpolation cache."""
        cache = lut_mod.trilinear_cache(self.size, pixels)
        eff = np.tensordot(blend_w, self.tables, axes=1)  # (S^3, 3) float32
        return cache.apply(eff), cache

    def backward(self, cache, upstream: np.ndarray, blend_w: np.ndarray, feats: np.ndarray, grads: _Grads):
        """Accumulate gradients for one branch. The weight gradient uses
        the adjoint identity <apply(T_n, img), g> = <T_n, scatter(g)>, so a
        single scatter serves every basis table."""
        d_eff = cache.scatter(upstream)  # (S^3, 3) float64
        d_w = np.einsum("nec,ec->n", self.tables.astype(np.float64), d_eff)
        grads.tables += blend_w[:, None, None] * d_eff.astype(np.float32)
        grads.weight += np.outer(d_w, feats).astype(np.float32)
        grads.bias += d_w.astype(np.float32)

    def state(self, config_hash: str) -> model_mod.ModelState:
        s = self.size
        luts = tuple(
            lut_mod.Lut3D(self.tables[n].reshape(s, s, s, 3).copy())
            for n in range(self.tables.shape[0])
        )
        return model_mod.ModelState(
            luts=luts,
            predictor=model_mod.Predictor(self.weight.copy(), self.bias.copy()),
            config_hash=config_hash,
        )


def _epoch_metrics(
    photos: Sequence[_TrainPhoto],
    net: _Model,
    channels: str,
) -> dict[str, float]:
    """The five measures on the (unaugmented) train photos with evaluation
    weights; used for the periodic training log."""
    rows = {"psnr": [], "psnr_hc": [], "delta_e": [], "delta_e_hc": []}
    group_means: dict[str, list[np.ndarray]] = {}
    for p in photos:
        feats = model_mod.extract_features(p.image)
        blend_w = net.blend_weights(feats)
        pred_flat, _ = net.forward(p.image.reshape(-1, 3), blend_w)
        pred = np.clip(pred_flat.reshape(p.image.shape), 0.0, 1.0)
        wm = WeightMask.from_mask(
            p.mask, metrics_mod.EVAL_HUMAN_WEIGHT, metrics_mod.EVAL_BACKGROUND_ALPHA
        )
        rows["psnr"].append(metrics_mod.psnr(pred, p.target))
        rows["delta_e"].append(metrics_mod.delta_e(pred, p.target))
        rows["psnr_hc"].append(metrics_mod.psnr(pred, p.target, wm))
        rows["delta_e_hc"].append(metrics_mod.delta_e(pred, p.target, wm))
        group_means.setdefault(p.group_id, []).append(
            metrics_mod.channel_means(pred, channels)
        )
    out = {k: float(np.mean(v)) for k, v in rows.items()}
    glc_vals = [
        metrics_mod.glc_from_means(np.stack(v))
        for _, v in sorted(group_means.items())
        if len(v) >= 2
    ]
    out["m_glc"] = float(np.mean(glc_vals)) if glc_vals else float("nan")
    return out


@dataclass
class TrainResult:
    state: model_mod.ModelState
    log_rows: list[dict]
    final_loss: LossBreakdown

    def write_log_csv(self, path) -> None:
        columns = ["epoch", "l_hc", "l_glc", "total", "psnr", "psnr_hc", "delta_e", "delta_e_hc", "m_glc"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in self.log_rows:
            writer.writerow([row.get(c, "") for c in columns])
        atomic_write_text(path, buf.getvalue())


def train(
    dataset: Dataset,
    config: TrainConfig,
    *,
    glc_channels: str = metrics_mod.DEFAULT_GLC_CHANNELS,
) -> TrainResult:
    """Mini-batch SGD with momentum over LUT entries and predictor
    parameters. Per photo step: geometric augment; fidelity loss on the
    full image; when glc_weight > 0, a crop pair with independent tonal
    jitters feeds the consistency loss through both branches. Deterministic
    given the seed; aborts on a non-finite loss."""
    rng = np.random.default_rng(config.seed)
    photos = _load_train_photos(dataset, config)
    net = _Model(config)
    n, s, f = config.num_luts, config.lut_size, net.weight.shape[1]

    vel = _Grads.zeros(n, s, f)
    log_rows: list[dict] = []
    last = LossBreakdown(0.0, 0.0, 0.0)
    step = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(photos))
        sum_hc = 0.0
        sum_glc = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grads = _Grads.zeros(n, s, f)
            batch_hc = 0.0
            batch_glc = 0.0
            for idx in batch:
                l_hc, l_glc = _step(photos[idx], net, rng, config, grads)
                batch_hc += l_hc
                batch_glc += l_glc
                step += 1
            total = batch_hc + config.glc_weight * batch_glc
            if not np.isfinite(total):
                raise TrainingDivergedError(epoch, step, total)
            grads.scale(1.0 / len(batch))
            mu = np.float32(config.momentum)
            vel.tables = mu * vel.tables + grads.tables
            vel.weight = mu * vel.weight + grads.weight
            vel.bias = mu * vel.bias + grads.bias
            net.tables -= np.float32(config.learning_rate_lut) * vel.tables
            net.weight -= np.float32(config.learning_rate_predictor) * vel.weight
            net.bias -= np.float32(config.learning_rate_predictor) * vel.bias
            sum_hc += batch_hc
            sum_glc += batch_glc
        mean_hc = sum_hc / len(photos)
        mean_glc = sum_glc / len(photos)
        last = LossBreakdown(mean_hc, mean_glc, mean_hc + config.glc_weight * mean_glc)
        row = {"epoch": epoch, "l_hc": mean_hc, "l_glc": mean_glc, "total": last.total}
        is_last = epoch == config.epochs - 1
        if is_last or (config.metrics_interval > 0 and (epoch + 1) % config.metrics_interval == 0):
            row.update(_epoch_metrics(photos, net, glc_channels))
            logger.info(
                "epoch %d: total %.6f, psnr_hc %.3f dB, m_glc %.5f",
                epoch,
                last.total,
                row["psnr_hc"],
                row["m_glc"],
            )
        log_rows.append(row)

    return TrainResult(state=net.state(config.hash()), log_rows=log_rows, final_loss=last)


def _step(
    photo: _TrainPhoto,
    net: _Model,
    rng: np.random.Generator,
    config: TrainConfig,
    grads: _Grads,
) -> tuple[float, float]:
    op = aug.sample_geometric(rng, config.augment)
    img, _ = aug.geometric_augment(photo.image, None, op)
    tgt, _ = aug.geometric_augment(photo.target, None, op)
    q, _ = aug.geometric_augment(photo.q, None, op)

    # fidelity on the full augmented image
    feats = model_mod.extract_features(img)
    blend_w = net.blend_weights(feats)
    pred, cache = net.forward(img.reshape(-1, 3), blend_w)
    diff = pred - tgt.reshape(-1, 3)
    qflat = q.reshape(-1, 1)
    l_hc = float((qflat * diff.astype(np.float64) ** 2).sum())
    g_hc = (2.0 * qflat) * diff
    net.backward(cache, g_hc, blend_w, feats, grads)

    l_glc = 0.0
    if config.glc_weight > 0:
        pair = aug.sample_crop_pair(img.shape, rng, config.augment)
        j1 = aug.sample_jitter(rng, config.augment.jitter)
        j2 = aug.sample_jitter(rng, config.augment.jitter)
        crops = (
            aug.apply_jitter(img[pair.first.slices], j1),
            aug.apply_jitter(img[pair.second.slices], j2),
        )
        branches = []
        for crop in crops:
            c_feats = model_mod.extract_features(crop)
            c_w = net.blend_weights(c_feats)
            c_pred, c_cache = net.forward(crop.reshape(-1, 3), c_w)
            branches.append((crop.shape, c_feats, c_w, c_pred, c_cache))
        o1 = branches[0][3].reshape(branches[0][0])[pair.overlap_in(pair.first)]
        o2 = branches[1][3].reshape(branches[1][0])[pair.overlap_in(pair.second)]
        diff_o = o1.astype(np.float64) - o2.astype(np.float64)
        n_el = diff_o.size
        l_glc = float((diff_o**2).sum() / n_el)
        g = (config.glc_weight * 2.0 / n_el) * diff_o
        for branch, sign, local in (
            (branches[0], 1.0, pair.overlap_in(pair.first)),
            (branches[1], -1.0, pair.overlap_in(pair.second)),
        ):
            shape, c_feats, c_w, _, c_cache = branch
            g_full = np.zeros(shape, dtype=np.float32)
            g_full[local] = (sign * g).astype(np.float32)
            net.backward(c_cache, g_full.reshape(-1, 3), c_w, c_feats, grads)
    return l_hc, l_glc


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    model,
    dataset: Dataset,
    *,
    split: str = "test",
    expert: str = "a",
    resolutions: Sequence[str] = ("lr",),
    channels: str = metrics_mod.DEFAULT_GLC_CHANNELS,
    short_side: int = 360,
    human_weight: float = metrics_mod.EVAL_HUMAN_WEIGHT,
    background_alpha: float = metrics_mod.EVAL_BACKGROUND_ALPHA,
    threads: int | None = None,
) -> metrics_mod.MetricReport:
    """Apply a model (ModelState, LutBlend, or fixed Lut3D) to every photo
    of a split and report the five measures per photo/group/summary.

    Blend weights always come from the 360p render; the blended table is
    applied at each requested resolution ("lr" = the 360p render, "hr" =
    the original). Targets and masks are resized to the prediction's size.
    """
    if expert not in EXPERTS:
        raise ValueError(f"expert must be one of {EXPERTS}, got {expert!r}")
    for res in resolutions:
        if res not in RESOLUTIONS:
            raise ValueError(f"resolution must be 'lr' or 'hr', got {res!r}")
    metrics_mod.parse_channels(channels)
    groups = dataset.split(split)
    if not groups:
        raise PprkitError(f"split {split!r} is empty")

    photo_rows: list[metrics_mod.PhotoMetrics] = []
    group_rows: list[metrics_mod.GroupMetrics] = []
    means: dict[str, dict[str, list[np.ndarray]]] = {res: {} for res in resolutions}

    fixed_lut = model if isinstance(model, (lut_mod.Lut3D, lut_mod.LutBlend)) else None

    for group in groups:
        for rec in group.members:
            full = load_image(rec.input_path)
            proxy = resize_short_side(full, short_side)
            blend = fixed_lut if fixed_lut is not None else model.blend_for(proxy)
            target_full = load_image(rec.target_for(expert))
            mask_full = load_mask(rec.mask_path)
            for res in resolutions:
                src = proxy if res == "lr" else full
                pred = lut_mod.apply(blend, src, clamp=True, threads=threads)
                target = resize_to(target_full, pred.shape)
                mask = resize_mask_to(mask_full, pred.shape)
                wm = WeightMask.from_mask(mask, human_weight, background_alpha)
                photo_rows.append(
                    metrics_mod.PhotoMetrics(
                        photo_id=rec.id,
                        group_id=group.group_id,
                        resolution=res,
                        psnr=metrics_mod.psnr(pred, target),
                        delta_e=metrics_mod.delta_e(pred, target),
                        psnr_hc=metrics_mod.psnr(pred, target, wm),
                        delta_e_hc=metrics_mod.delta_e(pred, target, wm),
                    )
                )
                means[res].setdefault(group.group_id, []).append(
                    metrics_mod.channel_means(pred, channels)
                )

    summary: dict[str, dict[str, float]] = {}
    for res in resolutions:
        rows = [r for r in photo_rows if r.resolution == res]
        glc_skipped = []
        for gid, m in sorted(means[res].items()):
            if len(m) < 2:
                glc_skipped.append(gid)
                continue
            group_rows.append(
                metrics_mod.GroupMetrics(
                    group_id=gid,
                    resolution=res,
                    members=len(m),
                    m_glc=metrics_mod.glc_from_means(np.stack(m)),
                )
            )
        if glc_skipped:
            logger.warning(
                "evaluate: %d group(s) too small for the consistency measure: %s",
                len(glc_skipped),
                ", ".join(glc_skipped),
            )
        glc_vals = [g.m_glc for g in group_rows if g.resolution == res]
        summary[res] = {
            "psnr": float(np.mean([r.psnr for r in rows])),
            "delta_e": float(np.mean([r.delta_e for r in rows])),
            "psnr_hc": float(np.mean([r.psnr_hc for r in rows])),
            "delta_e_hc": float(np.mean([r.delta_e_hc for r in rows])),
            "m_glc": float(np.mean(glc_vals)) if glc_vals else float("nan"),
        }

    config_hash = getattr(model, "config_hash", "")
    report = metrics_mod.MetricReport(
        photos=photo_rows,
        groups=group_rows,
        summary=summary,
        meta={
            "split": split,
            "expert": expert,
            "channels": channels,
            "resolutions": list(resolutions),
            "short_side": short_side,
            "human_weight": human_weight,
            "background_alpha": background_alpha,
            "num_photos": len(dataset.photos(split)),
            "num_groups": len(groups),
            "config_hash": config_hash,
        },
    )
    return report
