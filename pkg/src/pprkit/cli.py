"""Command-line entry point.

Subcommands: gen-data, train, eval, apply, augment-preview, report. Every
run writes a machine-readable result.json plus a run_meta.json sidecar;
timestamps live only in the sidecar so identical runs produce identical
result bytes. Reports are written atomically, so a failed run never
leaves a partial report behind.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import cv2
import numpy as np

from . import __version__
from . import imaging, lut, metrics, model, synthdata, training
from .augment import JitterRanges, apply_jitter, sample_jitter
from .color import ColorSpaceTag
from .errors import PprkitError
from .imaging import ImageBuffer, atomic_write_json

_RESOLUTION_SETS = {"lr": ("lr",), "hr": ("hr",), "both": ("lr", "hr")}


def _read_config(path) -> dict:
    p = Path(path)
    if p.suffix.lower() != ".json":
        raise PprkitError(f"config must be a .json file, got {p.name}")
    try:
        return json.loads(p.read_text())
    except OSError as exc:
        raise PprkitError(f"cannot read config {p}: {exc}") from exc


def _load_dataset(args) -> imaging.Dataset:
    return imaging.load_manifest(
        args.manifest,
        test_fraction=args.test_fraction,
        split_seed=args.split_seed,
    )


def _load_model(args):
    """A checkpoint gives the adaptive model; a .cube file a fixed table."""
    if getattr(args, "checkpoint", None):
        return model.load_checkpoint(args.checkpoint)
    return lut.read_cube(args.lut)


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--test-fraction", type=float, default=0.2,
                   help="test share when the manifest has no explicit split")
    p.add_argument("--split-seed", type=int, default=0,
                   help="shuffle seed for the derived split")


# ---------------------------------------------------------------------------
# command handlers; each returns (meta_dir, result_payload)


def _cmd_gen_data(args):
    config = synthdata.SynthConfig.from_dict(_read_config(args.config)) if args.config else synthdata.SynthConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    out = Path(args.out_dir)
    manifest = synthdata.generate(out, config)
    dataset = imaging.load_manifest(manifest)
    n_photos = len(dataset.photos())
    n_groups = len(dataset.groups)
    print(f"wrote {n_photos} photos in {n_groups} groups under {out}")
    return out, {
        "manifest": manifest.name,
        "num_photos": n_photos,
        "num_groups": n_groups,
        "config": config.to_dict(),
    }


def _cmd_train(args):
    config = training.TrainConfig.from_dict(_read_config(args.config)) if args.config else training.TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)
    if args.expert is not None:
        config = replace(config, expert=args.expert)
    dataset = _load_dataset(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    result = training.train(dataset, config)
    model.save_checkpoint(out / "checkpoint.json", result.state)
    result.write_log_csv(out / "train_log.csv")

    last = result.log_rows[-1] if result.log_rows else {}
    print(f"trained {config.epochs} epoch(s); final loss "
          f"hc {result.final_loss.l_hc:.6f}, glc {result.final_loss.l_glc:.6f}, "
          f"total {result.final_loss.total:.6f}")
    if "psnr_hc" in last:
        print(f"train-split measures: psnr {last['psnr']:.3f} dB, "
              f"psnr_hc {last['psnr_hc']:.3f} dB, m_glc {last['m_glc']:.6f}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return out, {
        "checkpoint": "checkpoint.json",
        "train_log": "train_log.csv",
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "final_loss": {
            "l_hc": result.final_loss.l_hc,
            "l_glc": result.final_loss.l_glc,
            "total": result.final_loss.total,
        },
        "last_log_row": last,
    }


def _cmd_eval(args):
    dataset = _load_dataset(args)
    net = _load_model(args)
    report = training.evaluate(
        net,
        dataset,
        split=args.split,
        expert=args.expert,
        resolutions=_RESOLUTION_SETS[args.resolution],
        channels=args.channels,
        threads=args.threads,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_csv(out / "photos.csv", out / "groups.csv")
    imaging.atomic_write_text(out / "summary.txt", report.summary_text() + "\n")
    print(report.summary_text())
    return out, {
        "report": "report.json",
        "photos_csv": "photos.csv",
        "groups_csv": "groups.csv",
        "summary": report.summary,
        "meta": report.meta,
    }


def _cmd_apply(args):
    net = _load_model(args)
    raw, depth = imaging.load_image_raw(args.input)
    maxval = np.float32(255 if depth == 8 else 65535)

    if isinstance(net, model.ModelState):
        h, w = raw.shape[:2]
        th, tw = imaging._short_side_dims(h, w, 360)
        proxy = raw if (th, tw) == (h, w) else cv2.resize(raw, (tw, th), interpolation=cv2.INTER_LINEAR)
        feats = model.extract_features(proxy.astype(np.float32) / maxval)
        table = net.blend_for(feats).effective()
    else:
        table = net

    out_arr = np.empty_like(raw)
    tile = max(1, args.tile_rows)
    for r0 in range(0, raw.shape[0], tile):
        block = raw[r0 : r0 + tile].astype(np.float32) / maxval
        mapped = lut.apply(table, block, clamp=True, threads=args.threads)
        out_arr[r0 : r0 + tile] = np.round(mapped * maxval).astype(raw.dtype)

    imaging.save_image_raw(args.output, out_arr)
    h, w = raw.shape[:2]
    print(f"wrote {args.output} ({w}x{h}, {depth}-bit)")
    return Path(args.output).parent, {
        "output": str(args.output),
        "width": w,
        "height": h,
        "bit_depth": depth,
        "lut_size": table.size,
    }


def _cmd_augment_preview(args):
    img = imaging.load_image(args.input)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    ranges = JitterRanges()
    rows = []
    for k in range(args.count):
        jit = sample_jitter(rng, ranges)
        after = apply_jitter(img.data, jit)
        before_path = out / f"preview_{k:02d}_before.png"
        after_path = out / f"preview_{k:02d}_after.png"
        imaging.save_image(before_path, img, bit_depth=8)
        imaging.save_image(after_path, ImageBuffer(after, ColorSpaceTag.SRGB_NONLINEAR), bit_depth=8)
        rows.append({
            "index": k,
            "before": before_path.name,
            "after": after_path.name,
            "jitter": {f: getattr(jit, f) for f in
                       ("exposure", "temperature", "tint", "highlights", "contrast", "saturation")},
        })
    print(f"wrote {args.count} before/after pair(s) under {out}")
    return out, {"pairs": rows}


def _cmd_report(args):
    data = json.loads(Path(args.report).read_text())
    report = metrics.MetricReport.from_dict(data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "photos.csv", out / "groups.csv")
    imaging.atomic_write_text(out / "summary.txt", report.summary_text() + "\n")
    print(report.summary_text())
    return out, {"photos_csv": "photos.csv", "groups_csv": "groups.csv", "summary": report.summary}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pprkit",
        description="Portrait photo retouching toolkit: data generation, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"pprkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="SynthConfig overrides (.json)")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the adaptive model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="TrainConfig overrides (.json)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--expert", choices=training.EXPERTS, default=None)
    _add_split_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or fixed .cube table")
    p.add_argument("--manifest", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--lut", help="a .cube file applied to every photo")
    p.add_argument("--expert", choices=training.EXPERTS, default="a")
    p.add_argument("--resolution", choices=sorted(_RESOLUTION_SETS), default="lr")
    p.add_argument("--channels", default=metrics.DEFAULT_GLC_CHANNELS,
                   help="consistency channels, e.g. ab, Lab, RGB (case-sensitive)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=None)
    _add_split_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("apply", help="apply a checkpoint or .cube to one image")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--lut")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--tile-rows", type=int, default=512,
                   help="rows per streaming tile; bounds peak memory")
    p.set_defaults(func=_cmd_apply)

    p = sub.add_parser("augment-preview", help="write tonal-jitter before/after pairs")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, default=3)
    p.set_defaults(func=_cmd_augment_preview)

    p = sub.add_parser("report", help="re-render CSV/text views from a report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        meta_dir, payload = args.func(args)
    except (PprkitError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    atomic_write_json(meta_dir / "result.json", payload)
    atomic_write_json(
        meta_dir / "run_meta.json",
        {
            "command": args.command,
            "argv": list(argv) if argv is not None else sys.argv[1:],
            "started": started,
            "elapsed_s": time.perf_counter() - t0,
            "package": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
