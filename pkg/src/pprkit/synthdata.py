"""Synthetic benchmark generation.

Two generators:

* ``generate``: a desk-scale portrait-retouching benchmark. Each group
  renders one shared scene (gradient background plus one or two warm
  elliptical subjects with a subject mask); members are overlapping crops
  of that scene, each degraded by an independent tonal jitter (16-bit
  inputs). Ground-truth targets come from three fixed "retoucher" styles,
  each a pair of subject/background tone transforms baked into 3D tables
  and composited with the mask over the clean (unjittered) crop. Subject
  and background transforms differ on purpose: a single global table
  cannot match both, which is what makes region weighting measurable.

* ``generate_lut_recovery``: noise images pushed through one known random
  smooth table; used to check that training can recover a table it has
  enough data to identify.

All randomness derives from per-group child seeds, so group k's pixels do
not depend on how many groups precede it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import lut as lut_mod
from .augment import JitterRanges, TonalJitter, apply_jitter, sample_jitter
from .color import ColorSpaceTag
from .imaging import (
    ImageBuffer,
    save_image,
    save_mask,
    split_groups,
    write_manifest,
)

STYLE_TRANSFORMS: dict[str, tuple[TonalJitter, TonalJitter]] = {
    # expert -> (subject transform, background transform)
    "a": (
        TonalJitter(exposure=0.35, temperature=0.25, tint=0.05,
                    highlights=0.2, contrast=0.15, saturation=0.3),
        TonalJitter(exposure=-0.15, temperature=-0.2, tint=0.0,
                    highlights=0.0, contrast=-0.1, saturation=-0.25),
    ),
    "b": (
        TonalJitter(exposure=0.2, temperature=-0.3, tint=0.1,
                    highlights=0.3, contrast=0.25, saturation=0.1),
        TonalJitter(exposure=-0.25, temperature=0.15, tint=-0.1,
                    highlights=0.0, contrast=0.2, saturation=-0.4),
    ),
    "c": (
        TonalJitter(exposure=-0.1, temperature=0.1, tint=-0.05,
                    highlights=0.25, contrast=0.3, saturation=0.45),
        TonalJitter(exposure=0.2, temperature=-0.1, tint=0.05,
                    highlights=0.1, contrast=-0.2, saturation=-0.1),
    ),
}


@dataclass(frozen=True)
class SynthConfig:
    num_groups: int = 40
    members_min: int = 4
    members_max: int = 8
    member_short: int = 360  # member crops are portrait member_short * aspect
    aspect: float = 1.5
    scene_margin: float = 0.25  # extra scene extent per side, in member units
    test_fraction: float = 0.2
    seed: int = 0
    jitter: JitterRanges = field(
        default_factory=lambda: JitterRanges(
            exposure=0.5, temperature=0.25, tint=0.15,
            highlights=0.2, contrast=0.2, saturation=0.25,
        )
    )

    def __post_init__(self):
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")
        if not 2 <= self.members_min <= self.members_max:
            raise ValueError("need members_max >= members_min >= 2")
        if self.member_short < 16:
            raise ValueError("member_short must be >= 16")
        if not 0.0 <= self.test_fraction <= 1.0:
            raise ValueError("test_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "jitter"}
        d["jitter"] = {f.name: getattr(self.jitter, f.name) for f in fields(self.jitter)}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        if "jitter" in data:
            data["jitter"] = JitterRanges(**data["jitter"])
        return cls(**data)


def style_tables(size: int = lut_mod.DEFAULT_SIZE) -> dict[str, tuple[lut_mod.Lut3D, lut_mod.Lut3D]]:
    """Bake each expert's (subject, background) tone transforms into 3D
    tables by evaluating the transform at every lattice node. The jitter
    chain is pixelwise, so sampling it on the identity lattice is exact."""
    out = {}
    ident = lut_mod.make_identity(size).table
    flat = ident.reshape(-1, 1, 3)
    for expert, (subj, bg) in STYLE_TRANSFORMS.items():
        subj_t = apply_jitter(flat, subj).reshape(ident.shape)
        bg_t = apply_jitter(flat, bg).reshape(ident.shape)
        out[expert] = (lut_mod.Lut3D(subj_t), lut_mod.Lut3D(bg_t))
    return out


def _render_scene(rng: np.random.Generator, height: int, width: int):
    """Shared group scene: a two-color gradient background with low-frequency
    texture, plus 1-2 shaded elliptical subjects whose union is the mask.
    Subject centers stay inside the region common to all member crops."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yn, xn = yy / height, xx / width

    # background colors overlap the subjects' warm range on purpose: the
    # same input color then needs different outputs inside and outside the
    # mask, which a single global table cannot satisfy; region weighting
    # is only measurable under that conflict
    c0 = np.array([rng.uniform(0.38, 0.8), rng.uniform(0.28, 0.6), rng.uniform(0.2, 0.5)])
    c1 = np.array([rng.uniform(0.38, 0.8), rng.uniform(0.28, 0.6), rng.uniform(0.2, 0.5)])
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = (np.cos(angle) * yn + np.sin(angle) * xn + 1.0) / 3.0
    scene = c0[None, None, :] + (c1 - c0)[None, None, :] * ramp[:, :, None]
    for c in range(3):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        ph = rng.uniform(0.0, 2.0 * np.pi)
        scene[:, :, c] += 0.05 * np.sin(2.0 * np.pi * (fy * yn + fx * xn) + ph)

    # portrait framing: subjects take a large central share of every crop
    mask = np.zeros((height, width), dtype=bool)
    short = min(height, width)
    for _ in range(int(rng.integers(1, 3))):
        cy = rng.uniform(0.42, 0.58) * height
        cx = rng.uniform(0.42, 0.58) * width
        ay = rng.uniform(0.30, 0.44) * short
        ax = rng.uniform(0.22, 0.34) * short
        color = np.array([rng.uniform(0.5, 0.8), rng.uniform(0.32, 0.55), rng.uniform(0.25, 0.45)])
        r2 = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2
        inside = r2 <= 1.0
        shade = np.clip(1.0 - 0.35 * r2, 0.0, 1.0)
        for c in range(3):
            scene[:, :, c] = np.where(inside, color[c] * shade, scene[:, :, c])
        mask |= inside
    return np.clip(scene, 0.02, 0.98).astype(np.float32), mask


def generate(out_dir, config: SynthConfig | None = None):
    """Write the benchmark tree under out_dir and return the manifest path.

    Layout: inputs/ (16-bit PNG), targets_a|b|c/ (8-bit PNG), masks/
    (8-bit PNG), manifest.jsonl with explicit train/test split and paths
    relative to the manifest.
    """
    config = config or SynthConfig()
    out = Path(out_dir)
    for sub in ("inputs", "targets_a", "targets_b", "targets_c", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    styles = style_tables()
    mh = int(round(config.member_short * config.aspect))
    mw = config.member_short
    sh = int(round(mh * (1.0 + 2.0 * config.scene_margin)))
    sw = int(round(mw * (1.0 + 2.0 * config.scene_margin)))

    gids = [f"g{gi:03d}" for gi in range(config.num_groups)]
    train_ids, test_ids = split_groups(gids, config.test_fraction, config.seed)
    split_of = {gid: "train" for gid in train_ids}
    split_of.update({gid: "test" for gid in test_ids})

    rows = []
    children = np.random.SeedSequence(config.seed).spawn(config.num_groups)
    for gi, gid in enumerate(gids):
        rng = np.random.default_rng(children[gi])
        scene, scene_mask = _render_scene(rng, sh, sw)
        count = int(rng.integers(config.members_min, config.members_max + 1))
        for pi in range(count):
            y0 = int(rng.integers(0, sh - mh + 1))
            x0 = int(rng.integers(0, sw - mw + 1))
            crop = scene[y0 : y0 + mh, x0 : x0 + mw]
            mask = scene_mask[y0 : y0 + mh, x0 : x0 + mw]

            degraded = apply_jitter(crop, sample_jitter(rng, config.jitter))
            pid = f"{gid}_p{pi:02d}"
            rel = {
                "input": f"inputs/{pid}.png",
                "target_a": f"targets_a/{pid}.png",
                "target_b": f"targets_b/{pid}.png",
                "target_c": f"targets_c/{pid}.png",
                "mask": f"masks/{pid}.png",
            }
            save_image(out / rel["input"], ImageBuffer(degraded, ColorSpaceTag.SRGB_NONLINEAR), bit_depth=16)
            m3 = mask[:, :, None]
            for expert in ("a", "b", "c"):
                subj_lut, bg_lut = styles[expert]
                styled = np.where(
                    m3,
                    lut_mod.apply(subj_lut, crop),
                    lut_mod.apply(bg_lut, crop),
                )
                save_image(
                    out / rel[f"target_{expert}"],
                    ImageBuffer(styled, ColorSpaceTag.SRGB_NONLINEAR),
                    bit_depth=8,
                )
            save_mask(out / rel["mask"], mask)
            rows.append({"id": pid, "group_id": gid, "split": split_of[gid], **rel})

    manifest_path = out / "manifest.jsonl"
    write_manifest(manifest_path, rows)
    config_path = out / "gen_config.json"
    config_path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest_path


def generate_lut_recovery(
    out_dir,
    *,
    train_count: int = 200,
    test_count: int = 24,
    image_size: int = 64,
    lut_size: int = 17,
    magnitude: float = 0.12,
    seed: int = 0,
):
    """Uniform-noise photos mapped through one random smooth table.

    Inputs and targets are both 16-bit so quantization stays far below the
    recovery error of interest. Masks are empty (all background). Returns
    (manifest_path, ground_truth_lut); the table is also written as
    gt.cube next to the manifest.
    """
    if train_count % 2 or test_count % 2:
        raise ValueError("train_count and test_count must be even (photos pair into groups of two)")
    out = Path(out_dir)
    for sub in ("inputs", "targets", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    gt = lut_mod.random_smooth(lut_size, magnitude, seed)
    rng = np.random.default_rng(seed + 1)
    # every photo is the same size, so one all-background mask serves all
    save_mask(out / "masks/r0000.png", np.zeros((image_size, image_size), dtype=bool))

    rows = []
    total = train_count + test_count
    for i in range(total):
        img = rng.uniform(0.0, 1.0, size=(image_size, image_size, 3)).astype(np.float32)
        target = lut_mod.apply(gt, img)
        pid = f"r{i:04d}"
        rel_in = f"inputs/{pid}.png"
        rel_tg = f"targets/{pid}.png"
        save_image(out / rel_in, ImageBuffer(img, ColorSpaceTag.SRGB_NONLINEAR), bit_depth=16)
        save_image(out / rel_tg, ImageBuffer(target, ColorSpaceTag.SRGB_NONLINEAR), bit_depth=16)
        rows.append(
            {
                "id": pid,
                "group_id": f"rg{i // 2:03d}",
                "split": "train" if i < train_count else "test",
                "input": rel_in,
                "target_a": rel_tg,
                "target_b": rel_tg,
                "target_c": rel_tg,
                "mask": "masks/r0000.png",
            }
        )

    manifest_path = out / "manifest.jsonl"
    write_manifest(manifest_path, rows)
    lut_mod.write_cube(out / "gt.cube", gt, title="recovery ground truth")
    return manifest_path, gt
