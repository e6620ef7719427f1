"""End-to-end acceptance checks.

Each test prints one visible ACCEPTANCE PASS/FAIL line (conftest hook).
Reference computations are implemented here from the published formulas,
independent of the package code paths they are checking.
"""

import json
import math
import statistics
import time

import numpy as np
import pytest

from pprkit import cli, imaging, lut, metrics, model, synthdata, training
from pprkit.color import ColorSpaceTag
from pprkit.imaging import ImageBuffer, WeightMask

# ---------------------------------------------------------------------------
# independent references (published constants as data, own code path)

_REF_M = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_REF_WHITE = np.array([0.95047, 1.0, 1.08883])
_REF_DELTA = 6.0 / 29.0


def _ref_lab(rgb):
    v = np.asarray(rgb, dtype=np.float64)
    lin = np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)
    xyz = np.einsum("...c,rc->...r", lin, _REF_M)
    t = xyz / _REF_WHITE
    f = np.where(t > _REF_DELTA**3, np.cbrt(t), t / (3.0 * _REF_DELTA**2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def _ref_psnr(a, b, w):
    num = 0.0
    den = 0.0
    for c in range(3):
        num += (w * w * (a[..., c] - b[..., c]) ** 2).sum()
        den += (w * w).sum()
    return 10.0 * np.log10(den / num)


def _ref_delta_e(a, b, w):
    d = np.sqrt(((_ref_lab(a) - _ref_lab(b)) ** 2).sum(axis=-1))
    return float((w * d).sum() / w.sum())


# ---------------------------------------------------------------------------


def test_criterion_01_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    uniform = np.ones((32, 32))
    for _ in range(200):
        a = rng.uniform(0.0, 1.0, (32, 32, 3))
        b = rng.uniform(0.0, 1.0, (32, 32, 3))
        mask = rng.uniform(size=(32, 32)) < 0.5
        wm = WeightMask.from_mask(mask, human_weight=1.0, background_alpha=0.5)
        w = np.where(mask, 1.0, 0.5)

        assert abs(metrics.psnr(a, b) - _ref_psnr(a, b, uniform)) < 1e-4
        assert abs(metrics.delta_e(a, b) - _ref_delta_e(a, b, uniform)) < 1e-4
        assert abs(metrics.psnr(a, b, wm) - _ref_psnr(a, b, w)) < 1e-4
        assert abs(metrics.delta_e(a, b, wm) - _ref_delta_e(a, b, w)) < 1e-4
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"oracle comparison took {elapsed:.2f}s"


def test_criterion_02_basic_measure_reduction():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a = rng.uniform(0, 1, (24, 18, 3))
        b = rng.uniform(0, 1, (24, 18, 3))
        mask = rng.uniform(size=(24, 18)) < rng.uniform()
        alpha = float(rng.uniform(0.1, 3.0))
        wm = WeightMask.from_mask(mask, human_weight=alpha, background_alpha=alpha)
        assert metrics.psnr(a, b, wm) == metrics.psnr(a, b)
        assert metrics.delta_e(a, b, wm) == metrics.delta_e(a, b)
        assert metrics.weighted_mse(a, b, wm) == metrics.weighted_mse(a, b)


def test_criterion_03_glc_measure():
    rng = np.random.default_rng(21)
    # identical members
    img = rng.uniform(0, 1, (16, 16, 3))
    assert metrics.glc_measure({"g": [img, img.copy(), img.copy()]}).per_group["g"] == 0.0
    # known two-member value: (a,b) means (0,0) and (2,4) give 1 + 4
    m1 = ImageBuffer(np.tile(np.float32([60.0, 0.0, 0.0]), (8, 8, 1)), ColorSpaceTag.CIELAB)
    m2 = ImageBuffer(np.tile(np.float32([60.0, 2.0, 4.0]), (8, 8, 1)), ColorSpaceTag.CIELAB)
    got = metrics.glc_measure({"g": [m1, m2]}, "ab").per_group["g"]
    assert got == pytest.approx(5.0, abs=1e-6)
    assert metrics.glc_from_means([[0.0, 0.0], [2.0, 4.0]]) == pytest.approx(5.0, abs=1e-6)
    # permutation invariance
    means = rng.uniform(-30, 70, (7, 2))
    base = metrics.glc_from_means(means)
    for _ in range(100):
        assert metrics.glc_from_means(rng.permutation(means, axis=0)) == base


def test_criterion_04_trilinear_engine():
    rng = np.random.default_rng(4)
    ident = lut.make_identity(33)
    for _ in range(10):
        img = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        assert np.max(np.abs(lut.apply(ident, img) - img)) < 1e-6
    # lattice nodes reproduce entries exactly
    table = lut.Lut3D(rng.uniform(0, 1, (17, 17, 17, 3)).astype(np.float32))
    nodes = lut.make_identity(17).table.reshape(-1, 3)
    assert np.array_equal(lut.apply(table, nodes, clamp=False), table.table.reshape(-1, 3))

    # analytic vs central finite differences on J = <upstream, output>
    size, n_luts = 5, 2
    basis = tuple(lut.random_smooth(size, 0.2, seed=s) for s in range(n_luts))
    weights = np.array([0.8, 0.3], dtype=np.float32)
    blend = lut.LutBlend(basis, weights)
    img = rng.uniform(0, 1, (8, 8, 3))
    upstream = rng.uniform(-1, 1, (8, 8, 3))
    analytic = lut.gradients(blend, img, upstream)

    cache = lut.trilinear_cache(size, img.reshape(-1, 3))
    up_flat = upstream.reshape(-1, 3)
    tabs = np.stack([b.table for b in basis]).astype(np.float64)

    def forward(t, w):
        eff = np.tensordot(w, t, axes=1).reshape(-1, 3)
        return float((cache.apply(eff) * up_flat).sum())

    step = 1e-3

    def check(got, expect, what):
        if abs(expect) < 1e-12:
            assert abs(got) < 1e-9, what
        else:
            assert abs(got - expect) / abs(expect) < 1e-4, what

    w64 = weights.astype(np.float64)
    for n in range(n_luts):
        for flat in rng.choice(size**3 * 3, size=80, replace=False):
            i, c = divmod(int(flat), 3)
            idx = np.unravel_index(i, (size, size, size))
            up_t = tabs.copy()
            up_t[(n, *idx, c)] += step
            dn_t = tabs.copy()
            dn_t[(n, *idx, c)] -= step
            fd = (forward(up_t, w64) - forward(dn_t, w64)) / (2 * step)
            check(fd, analytic.tables[(n, *idx, c)], f"entry {(n, *idx, c)}")
    for n in range(n_luts):
        up_w = w64.copy()
        up_w[n] += step
        dn_w = w64.copy()
        dn_w[n] -= step
        fd = (forward(tabs, up_w) - forward(tabs, dn_w)) / (2 * step)
        check(fd, analytic.weights[n], f"weight {n}")


def test_criterion_05_lut_recovery(tmp_path):
    manifest, _ = synthdata.generate_lut_recovery(
        tmp_path, train_count=200, test_count=24, image_size=64, lut_size=17,
        magnitude=0.12, seed=0,
    )
    dataset = imaging.load_manifest(manifest)
    config = training.TrainConfig(
        lut_size=17,
        num_luts=1,
        epochs=20,
        batch_size=16,
        learning_rate_lut=20.0,
        learning_rate_predictor=0.0,
        glc_weight=0.0,
        short_side=64,
        metrics_interval=0,
        seed=0,
    )
    t0 = time.perf_counter()
    result = training.train(dataset, config)
    elapsed = time.perf_counter() - t0
    report = training.evaluate(result.state, dataset, split="test", short_side=64, threads=1)
    psnr = report.summary["lr"]["psnr"]
    assert psnr > 40.0, f"held-out PSNR {psnr:.2f} dB"
    assert elapsed < 60.0, f"training took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# trend criteria share one benchmark and one set of baseline runs


@pytest.fixture(scope="module")
def trend_results(tmp_path_factory):
    """Nine runs: {baseline, human-weighted, consistency} x seeds {0,1,2}."""
    root = tmp_path_factory.mktemp("trend")
    gen = synthdata.SynthConfig(
        num_groups=14, members_min=4, members_max=5,
        member_short=120, test_fraction=0.5, seed=11,
    )
    t0 = time.perf_counter()
    dataset = imaging.load_manifest(synthdata.generate(root, gen))

    base = dict(
        lut_size=17, num_luts=3, epochs=20, batch_size=8,
        learning_rate_lut=10.0, learning_rate_predictor=0.05,
        short_side=360, metrics_interval=0,
    )
    arms = {
        "baseline": dict(human_weight=1.0, background_alpha=1.0, glc_weight=0.0),
        "hrp": dict(human_weight=5.0, background_alpha=1.0, glc_weight=0.0),
        "glc": dict(human_weight=1.0, background_alpha=1.0, glc_weight=1.0),
    }
    results: dict[str, dict[int, dict[str, float]]] = {name: {} for name in arms}
    for seed in (0, 1, 2):
        for name, extra in arms.items():
            cfg = training.TrainConfig(seed=seed, **base, **extra)
            state = training.train(dataset, cfg).state
            report = training.evaluate(state, dataset, split="test")
            results[name][seed] = dict(report.summary["lr"])
    results["elapsed"] = time.perf_counter() - t0
    return results


def test_criterion_06_hrp_trend(trend_results):
    margins = [
        trend_results["hrp"][s]["psnr_hc"] - trend_results["baseline"][s]["psnr_hc"]
        for s in (0, 1, 2)
    ]
    assert statistics.median(margins) >= 0.1, f"margins {margins}"
    assert trend_results["elapsed"] < 600.0, f"trend runs took {trend_results['elapsed']:.0f}s"


def test_criterion_07_glc_trend(trend_results):
    with_glc = [trend_results["glc"][s]["m_glc"] for s in (0, 1, 2)]
    without = [trend_results["baseline"][s]["m_glc"] for s in (0, 1, 2)]
    assert statistics.median(with_glc) < statistics.median(without), (
        f"consistency-trained {with_glc} vs baseline {without}"
    )


def test_criterion_08_determinism(tmp_path):
    gen_cfg = tmp_path / "gen.json"
    gen_cfg.write_text(json.dumps({
        "num_groups": 4, "members_min": 2, "members_max": 3,
        "member_short": 48, "test_fraction": 0.5, "seed": 13,
    }))
    train_cfg = tmp_path / "train.json"
    train_cfg.write_text(json.dumps({
        "lut_size": 9, "num_luts": 2, "epochs": 2, "batch_size": 4,
        "short_side": 48, "metrics_interval": 1, "seed": 1,
    }))

    def pipeline(tag):
        d = tmp_path / tag
        assert cli.main(["gen-data", "--out-dir", str(d / "data"), "--config", str(gen_cfg)]) == 0
        assert cli.main([
            "train", "--manifest", str(d / "data" / "manifest.jsonl"),
            "--out-dir", str(d / "run"), "--config", str(train_cfg),
        ]) == 0
        assert cli.main([
            "eval", "--manifest", str(d / "data" / "manifest.jsonl"),
            "--checkpoint", str(d / "run" / "checkpoint.json"),
            "--out-dir", str(d / "eval"),
        ]) == 0
        return d

    a = pipeline("a")
    b = pipeline("b")
    for rel in (
        "data/manifest.jsonl",
        "run/checkpoint.json",
        "run/train_log.csv",
        "eval/report.json",
        "eval/photos.csv",
        "eval/groups.csv",
        "eval/summary.txt",
    ):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def _best_time(fn, repeats):
    # Steady-state timing: min over repeats, the least noise-contaminated
    # statistic (same doctrine as timeit).
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def test_criterion_09_throughput():
    rng = np.random.default_rng(6)
    table = lut.Lut3D(rng.uniform(0, 1, (33, 33, 33, 3)).astype(np.float32))
    lut.apply(table, rng.random((16, 16, 3), dtype=np.float32))  # JIT warmup

    img = rng.random((2160, 4096, 3), dtype=np.float32)
    megapixels = img.shape[0] * img.shape[1] / 1e6
    # One untimed full-size pass so page faults on the freshly grown heap
    # don't get billed to the kernel; the target is sustained throughput.
    lut.apply(table, img, threads=8)

    t8 = _best_time(lambda: lut.apply(table, img, threads=8), repeats=5)
    rate = megapixels / t8
    assert rate >= 50.0, f"{rate:.1f} MP/s"

    t1 = _best_time(lambda: lut.apply(table, img, threads=1), repeats=3)
    assert t1 < 1.0, f"single-threaded 4096x2160 took {t1:.3f}s"


def test_criterion_10_format_fidelity(tmp_path, rng):
    # .cube round trip is exact for arbitrary float32 entries
    for name, table in (
        ("random.cube", lut.Lut3D(rng.uniform(0, 1, (33, 33, 33, 3)).astype(np.float32))),
        ("smooth.cube", lut.random_smooth(17, 0.12, seed=8)),
    ):
        lut.write_cube(tmp_path / name, table)
        assert np.array_equal(lut.read_cube(tmp_path / name).table, table.table), name

    # 16-bit load -> save -> load preserves every sample
    for ext in ("png", "ppm"):
        first = tmp_path / f"first.{ext}"
        imaging.save_image_raw(first, rng.integers(0, 65536, (21, 17, 3), dtype=np.uint16))
        buf1 = imaging.load_image(first)
        second = tmp_path / f"second.{ext}"
        imaging.save_image(second, buf1, bit_depth=16)
        buf2 = imaging.load_image(second)
        assert np.array_equal(buf1.data, buf2.data), ext
        assert first.read_bytes() == second.read_bytes(), ext
