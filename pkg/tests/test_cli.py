import json
from pathlib import Path

import numpy as np
import pytest

from pprkit import cli, imaging, lut, model
from pprkit.color import ColorSpaceTag
from pprkit.imaging import ImageBuffer

GEN_CONFIG = {
    "num_groups": 3,
    "members_min": 2,
    "members_max": 3,
    "member_short": 32,
    "test_fraction": 0.34,
    "seed": 9,
}

TRAIN_CONFIG = {
    "lut_size": 9,
    "num_luts": 2,
    "epochs": 1,
    "batch_size": 4,
    "short_side": 32,
    "metrics_interval": 0,
    "seed": 3,
}


def run(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated benchmark plus one 1-epoch checkpoint, shared by the
    command tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    (root / "gen.json").write_text(json.dumps(GEN_CONFIG))
    (root / "train.json").write_text(json.dumps(TRAIN_CONFIG))
    assert run(["gen-data", "--out-dir", data, "--config", root / "gen.json"]) == 0
    runs = root / "run"
    assert (
        run(
            [
                "train",
                "--manifest",
                data / "manifest.jsonl",
                "--out-dir",
                runs,
                "--config",
                root / "train.json",
            ]
        )
        == 0
    )
    return root


def test_version_and_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--version"])
    assert exc.value.code == 0
    assert "pprkit" in capsys.readouterr().out
    with pytest.raises(SystemExit) as exc:
        run([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run(["launder"])  # unknown subcommand
    assert exc.value.code == 2


def test_eval_flag_validation(workspace):
    man = workspace / "data" / "manifest.jsonl"
    ckpt = workspace / "run" / "checkpoint.json"
    with pytest.raises(SystemExit) as exc:  # unknown expert name
        run(["eval", "--manifest", man, "--checkpoint", ckpt, "--expert", "z", "--out-dir", workspace / "x"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:  # model sources are exclusive
        run(["eval", "--manifest", man, "--checkpoint", ckpt, "--lut", "x.cube", "--out-dir", workspace / "x"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:  # a model source is required
        run(["eval", "--manifest", man, "--out-dir", workspace / "x"])
    assert exc.value.code == 2


def test_gen_data_outputs(workspace):
    data = workspace / "data"
    result = json.loads((data / "result.json").read_text())
    assert result["num_groups"] == 3
    assert result["config"]["seed"] == 9
    meta = json.loads((data / "run_meta.json").read_text())
    assert meta["command"] == "gen-data"
    assert "started" in meta and "elapsed_s" in meta
    # timestamps stay out of result.json
    assert "started" not in result and "elapsed_s" not in result
    ds = imaging.load_manifest(data / "manifest.jsonl")
    assert len(ds.groups) == 3


def test_gen_data_seed_override_and_determinism(tmp_path):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps(GEN_CONFIG))
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["gen-data", "--out-dir", a, "--config", cfg, "--seed", 21]) == 0
    assert run(["gen-data", "--out-dir", b, "--config", cfg, "--seed", 21]) == 0
    assert (a / "result.json").read_bytes() == (b / "result.json").read_bytes()
    assert json.loads((a / "result.json").read_text())["config"]["seed"] == 21
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()


def test_train_outputs(workspace, capsys):
    runs = workspace / "run"
    assert (runs / "checkpoint.json").exists()
    state = model.load_checkpoint(runs / "checkpoint.json")
    assert state.num_luts == 2 and state.size == 9
    log = (runs / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("epoch,l_hc,l_glc,total")
    assert len(log) == 2  # header + one epoch
    result = json.loads((runs / "result.json").read_text())
    assert result["config_hash"] == state.config_hash
    assert result["final_loss"]["total"] > 0


def test_train_epoch_zero_checkpoint_is_initial(workspace, tmp_path):
    man = workspace / "data" / "manifest.jsonl"
    cfg = workspace / "train.json"
    out = tmp_path / "run0"
    assert run(["train", "--manifest", man, "--out-dir", out, "--config", cfg, "--epochs", 0]) == 0
    state = model.load_checkpoint(out / "checkpoint.json")
    ref = model.initial_state(num_luts=2, size=9)
    for got, want in zip(state.luts, ref.luts):
        assert np.array_equal(got.table, want.table)
    assert np.array_equal(state.predictor.weight, ref.predictor.weight)
    assert np.array_equal(state.predictor.bias, ref.predictor.bias)


def test_train_determinism(workspace, tmp_path):
    man = workspace / "data" / "manifest.jsonl"
    cfg = workspace / "train.json"
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train", "--manifest", man, "--out-dir", a, "--config", cfg]) == 0
    assert run(["train", "--manifest", man, "--out-dir", b, "--config", cfg]) == 0
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
    assert (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    assert (a / "result.json").read_bytes() == (b / "result.json").read_bytes()


def test_eval_outputs_and_determinism(workspace, tmp_path):
    man = workspace / "data" / "manifest.jsonl"
    ckpt = workspace / "run" / "checkpoint.json"
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["eval", "--manifest", man, "--checkpoint", ckpt, "--out-dir", out]) == 0
    for name in ("report.json", "photos.csv", "groups.csv", "summary.txt", "result.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    report = json.loads((a / "report.json").read_text())
    assert report["meta"]["split"] == "test"
    assert {"photos", "groups", "summary", "meta"} <= set(report)
    text = (a / "summary.txt").read_text()
    assert "psnr_hc" in text and "m_glc" in text


def test_eval_channel_sets_decompose(workspace, tmp_path):
    # the consistency measure is a sum of per-channel variance terms, so the
    # Lab result splits exactly into the L-only and ab-only runs
    man = workspace / "data" / "manifest.jsonl"
    ckpt = workspace / "run" / "checkpoint.json"
    got = {}
    for channels in ("Lab", "ab", "L"):
        out = tmp_path / channels
        assert run(
            ["eval", "--manifest", man, "--checkpoint", ckpt, "--channels", channels, "--out-dir", out]
        ) == 0
        report = json.loads((out / "report.json").read_text())
        got[channels] = {g["group_id"]: g["m_glc"] for g in report["groups"]}
    assert set(got["Lab"]) == set(got["ab"]) == set(got["L"]) != set()
    for gid in got["Lab"]:
        assert got["Lab"][gid] == pytest.approx(got["ab"][gid] + got["L"][gid], rel=1e-9)
        assert got["Lab"][gid] >= got["ab"][gid]


def test_eval_both_resolutions(workspace, tmp_path):
    man = workspace / "data" / "manifest.jsonl"
    ckpt = workspace / "run" / "checkpoint.json"
    out = tmp_path / "both"
    assert run(
        ["eval", "--manifest", man, "--checkpoint", ckpt, "--resolution", "both", "--out-dir", out]
    ) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["summary"]) == {"lr", "hr"}
    # members are below the proxy size, so the two resolutions coincide
    assert report["summary"]["lr"]["psnr"] == report["summary"]["hr"]["psnr"]


def test_eval_with_fixed_lut(workspace, tmp_path):
    man = workspace / "data" / "manifest.jsonl"
    cube = tmp_path / "identity.cube"
    lut.write_cube(cube, lut.make_identity(9))
    out = tmp_path / "fixed"
    assert run(["eval", "--manifest", man, "--lut", cube, "--out-dir", out]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["meta"]["config_hash"] == ""
    assert report["summary"]["lr"]["psnr"] > 10.0


def test_apply_identity_cube_is_lossless(tmp_path, rng):
    cube = tmp_path / "identity.cube"
    lut.write_cube(cube, lut.make_identity(17))
    for name, depth in (("deep.png", 16), ("flat.png", 8), ("plain.ppm", 8)):
        src = tmp_path / name
        img = ImageBuffer(rng.uniform(0, 1, (20, 24, 3)).astype(np.float32), ColorSpaceTag.SRGB_NONLINEAR)
        imaging.save_image(src, img, bit_depth=depth)
        dst = tmp_path / f"out_{name}"
        assert run(["apply", "--lut", cube, "--input", src, "--output", dst]) == 0
        before, d_in = imaging.load_image_raw(src)
        after, d_out = imaging.load_image_raw(dst)
        assert d_in == d_out == depth
        assert np.array_equal(before, after), name


def test_apply_tiling_does_not_change_output(tmp_path, rng):
    cube = tmp_path / "style.cube"
    lut.write_cube(cube, lut.random_smooth(9, 0.1, seed=2))
    src = tmp_path / "in.png"
    imaging.save_image(
        src,
        ImageBuffer(rng.uniform(0, 1, (33, 15, 3)).astype(np.float32), ColorSpaceTag.SRGB_NONLINEAR),
        bit_depth=16,
    )
    out_a, out_b = tmp_path / "a.png", tmp_path / "b.png"
    assert run(["apply", "--lut", cube, "--input", src, "--output", out_a]) == 0
    assert run(["apply", "--lut", cube, "--input", src, "--output", out_b, "--tile-rows", 7]) == 0
    assert (out_a).read_bytes() == (out_b).read_bytes()


def test_apply_with_checkpoint(workspace, tmp_path, rng):
    ckpt = workspace / "run" / "checkpoint.json"
    src = tmp_path / "photo.png"
    imaging.save_image(
        src,
        ImageBuffer(rng.uniform(0, 1, (40, 30, 3)).astype(np.float32), ColorSpaceTag.SRGB_NONLINEAR),
        bit_depth=8,
    )
    dst = tmp_path / "retouched.png"
    assert run(["apply", "--checkpoint", ckpt, "--input", src, "--output", dst]) == 0
    arr, depth = imaging.load_image_raw(dst)
    assert arr.shape == (40, 30, 3) and depth == 8
    payload = json.loads((tmp_path / "result.json").read_text())
    assert payload["width"] == 30 and payload["bit_depth"] == 8


def test_augment_preview(tmp_path, rng):
    src = tmp_path / "in.png"
    imaging.save_image(
        src,
        ImageBuffer(rng.uniform(0, 1, (16, 16, 3)).astype(np.float32), ColorSpaceTag.SRGB_NONLINEAR),
        bit_depth=8,
    )
    out = tmp_path / "prev"
    assert run(["augment-preview", "--input", src, "--out-dir", out, "--seed", 1, "--count", 2]) == 0
    pairs = json.loads((out / "result.json").read_text())["pairs"]
    assert len(pairs) == 2
    for pair in pairs:
        assert (out / pair["before"]).exists() and (out / pair["after"]).exists()
        assert abs(pair["jitter"]["exposure"]) <= 1.0


def test_report_rerenders_eval_outputs(workspace, tmp_path):
    man = workspace / "data" / "manifest.jsonl"
    ckpt = workspace / "run" / "checkpoint.json"
    evaldir = tmp_path / "eval"
    assert run(["eval", "--manifest", man, "--checkpoint", ckpt, "--out-dir", evaldir]) == 0
    rerender = tmp_path / "views"
    assert run(["report", "--report", evaldir / "report.json", "--out-dir", rerender]) == 0
    for name in ("photos.csv", "groups.csv", "summary.txt"):
        assert (rerender / name).read_bytes() == (evaldir / name).read_bytes(), name


def test_runtime_errors_exit_one(workspace, tmp_path, capsys):
    man = workspace / "data" / "manifest.jsonl"
    # missing checkpoint file
    assert run(["eval", "--manifest", man, "--checkpoint", tmp_path / "nope.json", "--out-dir", tmp_path / "x"]) == 1
    assert "error:" in capsys.readouterr().err
    # malformed manifest
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{ not json\n")
    assert run(["train", "--manifest", bad, "--out-dir", tmp_path / "y"]) == 1
    # config must be JSON
    toml = tmp_path / "cfg.toml"
    toml.write_text("epochs = 1\n")
    assert run(["train", "--manifest", man, "--out-dir", tmp_path / "z", "--config", toml]) == 1
    err = capsys.readouterr().err
    assert ".json" in err
