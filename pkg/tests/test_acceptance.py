"""Acceptance criteria 1 to 10, one test each.

Every test records a PASS/FAIL line (see the terminal summary) before it
asserts. Criteria 6, 7, 9 and 10 share one desk-scale experiment: pretraining
plus 5000 iterations for each variant and seed, which takes about an hour on
a single CPU core.
"""

import time
import zlib

import numpy as np
import pytest
from oracles import conv2d_loops

from svddip.autodiff import Tensor, ops
from svddip.autodiff.gradcheck import max_relative_error
from svddip.ct import ParallelGeometry, add_noise, disk_phantom, fbp, generate_ellipses, poisson_counts, radon_forward
from svddip.ct.noise import DEFAULT_PHOTONS
from svddip.experiment import STANDARD_PLANS, RunPlan, run_experiment
from svddip.losses import data_loss_l2, data_loss_mean, poisson_loss, psnr, tv_aniso
from svddip.model import DESK_UNET, LayerAddress, UNetConfig, build_unet, default_svd_addresses, replace_with_svd
from svddip.report import CURVE_HEADER, compare, curves_csv
from svddip.svd import factorize_conv
from svddip.training import METRICS_HEADER, RunMetrics

SEEDS = (0, 1, 2)
VARIANTS = ("dip", "edip", "svd-dip")
TRUNCATED = RunPlan("svd-dip-rank50", "svd-dip", {"truncation": "rank 0.5"})


# -- 1. folding lemma -----------------------------------------------------------------


def test_criterion_1_lemma(verdict):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        cout, cin = (int(v) for v in rng.integers(1, 7, size=2))
        k = int(rng.choice([1, 3, 5]))
        w = rng.standard_normal((cout, cin, k, k))
        x = rng.standard_normal((cin, 8, 8))
        u, s, v = factorize_conv(w)
        composed = ops.conv2d(ops.channel_scale(ops.conv2d(Tensor(x), Tensor(v)), Tensor(s)), Tensor(u)).data
        worst = max(worst, float(np.abs(composed - conv2d_loops(x, w, None, 1, (k - 1) // 2)).max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 10
    assert verdict(1, ok, f"max abs error {worst:.2e} (< 1e-9), {elapsed:.1f} s (< 10 s)")


# -- 2. function preservation ---------------------------------------------------------


def test_criterion_2_function_preservation(verdict):
    rng = np.random.default_rng(2)
    net = build_unet(DESK_UNET, 0, dtype=np.float32)
    zs = rng.standard_normal((10, 1, 64, 64)).astype(np.float32)
    before = np.stack([net(z).data for z in zs])
    replace_with_svd(net, default_svd_addresses(net))
    after = np.stack([net(z).data for z in zs])
    err = float(np.abs(after - before).max())
    assert verdict(2, err < 1e-4, f"max abs output change {err:.2e} over 10 inputs (< 1e-4, float32)")


# -- 3. compression -------------------------------------------------------------------


def test_criterion_3_compression(verdict):
    net = build_unet(UNetConfig(channels=(128, 128), skip_channels=(0, 0)), 0)
    addr = LayerAddress("down", 1, 1)
    raw = net.convs[addr].weight.size
    replace_with_svd(net, [addr])
    net.set_trainable(False)
    net.convs[addr].s.trainable = True
    after = net.count_trainable()
    assert verdict(3, (raw, after) == (147456, 128), f"128x128x3x3 conv: {raw} raw, {after} after replacement")


# -- 4. gradients ---------------------------------------------------------------------

GEOM = ParallelGeometry(8, 4, 13)
OP = GEOM.operator()
GRAD_CASES = {
    "loss l2": (lambda a, y: data_loss_l2(a, y), [(30,), (30,)], 1e-5),
    "loss mean-l2": (lambda a, y: data_loss_mean(a, y), [(30,), (30,)], 1e-5),
    "loss poisson": (lambda a, y: poisson_loss(a, y), "poisson", 1e-7),
    "loss tv": (lambda x: tv_aniso(x), [(7, 6)], 1e-5),
    "add": (lambda a, b: ops.sum(ops.square(ops.add(a, b))), [(3, 4), (3, 4)], 1e-5),
    "sub": (lambda a, b: ops.sum(ops.square(ops.sub(a, b))), [(3, 4), (3, 4)], 1e-5),
    "mul": (lambda a, b: ops.sum(ops.square(ops.mul(a, b))), [(3, 4), (3, 4)], 1e-5),
    "scale": (lambda a: ops.sum(ops.square(ops.scale(a, -1.7))), [(5, 5)], 1e-5),
    "square": (lambda a: ops.sum(ops.mul(ops.square(a), a)), [(5, 5)], 1e-5),
    "exp": (lambda a: ops.sum(ops.exp(a)), [(5, 5)], 1e-5),
    "abs": (lambda a: ops.sum(ops.mul(ops.abs(a), a)), [(5, 5)], 1e-5),
    "leaky_relu": (lambda a: ops.sum(ops.square(ops.leaky_relu(a, 0.2))), [(5, 5)], 1e-5),
    "sigmoid": (lambda a: ops.sum(ops.square(ops.sigmoid(a))), [(5, 5)], 1e-5),
    "sum": (lambda a: ops.square(ops.sum(a)), [(5, 5)], 1e-5),
    "mean": (lambda a: ops.square(ops.mean(a)), [(5, 5)], 1e-5),
    "reshape": (lambda a: ops.sum(ops.mul(ops.reshape(a, (25,)), Tensor(np.arange(25.0)))), [(5, 5)], 1e-5),
    "getitem": (lambda a: ops.sum(ops.square(ops.getitem(a, (slice(1, None), slice(None, -1))))), [(5, 5)], 1e-5),
    "concat": (lambda a, b: ops.sum(ops.square(ops.concat([a, b], axis=0))), [(2, 3, 3), (1, 3, 3)], 1e-5),
    "linear_map": (lambda x: ops.sum(ops.square(ops.linear_map(x, OP.forward, OP.adjoint))), [(8, 8)], 1e-5),
    "conv2d": (lambda x, w, b: ops.sum(ops.square(ops.conv2d(x, w, b))), [(2, 6, 6), (3, 2, 3, 3), (3,)], 1e-5),
    "conv2d stride 2": (lambda x, w: ops.sum(ops.square(ops.conv2d(x, w, stride=2))), [(2, 7, 6), (3, 2, 3, 3)], 1e-5),
    "conv2d 5x5": (lambda x, w: ops.sum(ops.square(ops.conv2d(x, w))), [(2, 6, 6), (2, 2, 5, 5)], 1e-5),
    "conv2d 1x1": (lambda x, w: ops.sum(ops.square(ops.conv2d(x, w))), [(3, 4, 4), (2, 3, 1, 1)], 1e-5),
    "upsample": (lambda x: ops.sum(ops.square(ops.upsample_bilinear2x(x))), [(2, 3, 4)], 1e-5),
    "group_norm": (
        lambda x, g, b: ops.sum(ops.square(ops.mul(ops.group_norm(x, 2, g, b), ops.exp(x)))),
        [(4, 3, 3), (4,), (4,)],
        1e-5,
    ),
    "channel_scale": (lambda x, s: ops.sum(ops.square(ops.channel_scale(x, s))), [(3, 4, 4), (3,)], 1e-5),
}


def test_criterion_4_gradients(verdict):
    start = time.perf_counter()
    errors = {}
    for name, (fn, shapes, h) in GRAD_CASES.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        if shapes == "poisson":
            inputs = [rng.uniform(0.0, 0.03, 30), Tensor(rng.uniform(0.0, 0.03, 30))]
            errors[name] = max_relative_error(lambda a: fn(a, inputs[1]), inputs[:1], probes=20, h=h)
        else:
            errors[name] = max_relative_error(fn, [rng.standard_normal(s) for s in shapes], probes=20, h=h)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-5 and elapsed < 60
    detail = f"{len(errors)} functions, worst {worst} {errors[worst]:.2e} (< 1e-5), {elapsed:.1f} s (< 60 s)"
    assert verdict(4, ok, detail), errors


# -- 5. noise models ------------------------------------------------------------------


def test_criterion_5_noise(verdict):
    # Desk-geometry sinogram of one ellipse phantom, tiled to 10**6 entries.
    g = ParallelGeometry(64, 20, 95, pixel_size=1 / 64)
    y = np.resize(g.operator().forward(generate_ellipses(64, 12, rng_seed=5)), 10**6)
    noisy = add_noise(y, "gaussian 0.05", 5).data
    sigma_ratio = float(np.std(noisy - y) / (0.05 * np.mean(np.abs(y))))
    counts = poisson_counts(np.zeros(10**6), DEFAULT_PHOTONS, 6)
    var_ratio = float(counts.var() / DEFAULT_PHOTONS)
    ok = abs(sigma_ratio - 1) < 0.01 and abs(var_ratio - 1) < 0.02
    detail = f"gaussian sigma / target {sigma_ratio:.4f} (1 +- 0.01), poisson variance / N0 {var_ratio:.4f} (1 +- 0.02)"
    assert verdict(5, ok, detail)


# -- 6, 7, 9, 10. desk-scale experiment -----------------------------------------------


@pytest.fixture(scope="module")
def experiment(desk_spec, desk_pretrained, tmp_path_factory):
    out = tmp_path_factory.mktemp("experiment")
    results = run_experiment(desk_spec, SEEDS, list(STANDARD_PLANS) + [TRUNCATED], checkpoint=desk_pretrained.net, out_dir=out)
    return out, results


def mean_of(results, label, column):
    return float(np.mean([m.summary()[column] for m in results[label]]))


def test_criterion_6_stability(verdict, experiment):
    _, results = experiment
    gap = {v: mean_of(results, v, "MaxMinusFinal") for v in VARIANTS}
    final = {v: mean_of(results, v, "Final") for v in VARIANTS}
    a = gap["svd-dip"] < 0.3
    b = gap["svd-dip"] < gap["dip"] and gap["svd-dip"] < gap["edip"]
    c = final["svd-dip"] >= final["edip"]
    detail = (
        f"mean Max-Final gap dB: dip {gap['dip']:.3f}, edip {gap['edip']:.3f}, svd-dip {gap['svd-dip']:.3f}; "
        f"mean Final dB: dip {final['dip']:.2f}, edip {final['edip']:.2f}, svd-dip {final['svd-dip']:.2f}; "
        f"(a) {'ok' if a else 'no'} (b) {'ok' if b else 'no'} (c) {'ok' if c else 'no'}"
    )
    assert verdict(6, a and b and c, detail)


def test_criterion_7_truncation(verdict, experiment):
    _, results = experiment
    full = mean_of(results, "svd-dip", "Final")
    half = mean_of(results, TRUNCATED.label, "Final")
    ok = abs(full - half) <= 1.0
    assert verdict(7, ok, f"mean Final: untruncated {full:.2f} dB, 50% rank {half:.2f} dB, difference {abs(full - half):.2f} (<= 1.0)")


def test_criterion_8_fbp(verdict):
    g = ParallelGeometry(64, 180, 95)
    disk = disk_phantom(64, 0.4)
    value = psnr(fbp(radon_forward(disk, g), g), disk, 1.0)
    assert verdict(8, value > 25.0, f"64x64 disk, 180 angles: FBP PSNR {value:.2f} dB (> 25)")


def test_criterion_9_tv_traces(verdict, experiment, desk_spec):
    out, results = experiment
    iterations = desk_spec["dip"]["iterations"]
    dirs = [out / label / f"seed{s}" for label in results for s in SEEDS]
    problems = []
    for d in dirs:
        text = (d / "metrics.csv").read_text().splitlines()
        if text[0] != ",".join(METRICS_HEADER):
            problems.append(f"{d}: header {text[0]}")
        tv = RunMetrics.read_csv(d / "metrics.csv").column("tv")
        if tv.size != iterations + 1 or not np.all(np.isfinite(tv)):
            problems.append(f"{d}: {tv.size} TV values")
    curves, _ = compare(dirs)
    header = curves_csv(curves).splitlines()[0].split(",")
    has_tv = {"mean_tv", "sd_tv", "mean_psnr", "sd_psnr"} <= set(header) and header == list(CURVE_HEADER)
    ok = not problems and has_tv and len(curves) == len(results) * (iterations + 1)
    detail = f"{len(dirs)} runs with {iterations + 1} TV values each; compare columns {', '.join(header[3:7])}"
    assert verdict(9, ok, detail), problems


def test_criterion_10_determinism(verdict, experiment, desk_spec, desk_pretrained, tmp_path):
    out, _ = experiment
    run_experiment(desk_spec, (SEEDS[0],), STANDARD_PLANS, checkpoint=desk_pretrained.net, out_dir=tmp_path)
    same = {
        v: (out / v / f"seed{SEEDS[0]}" / "metrics.csv").read_bytes() == (tmp_path / v / f"seed{SEEDS[0]}" / "metrics.csv").read_bytes()
        for v in VARIANTS
    }
    detail = "rerun of seed 0: " + ", ".join(f"{v} {'identical' if s else 'differs'}" for v, s in same.items())
    assert verdict(10, all(same.values()), detail)
