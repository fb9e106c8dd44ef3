"""Acceptance criteria 1-12.

Each test prints one ``criterion N: PASS|FAIL`` line and then asserts, so a
failing criterion is both visible in the log and red in the test summary.
Expensive Monte-Carlo runs are shared through module-scoped fixtures.
"""

import math
import time

import numpy as np
import pytest

from resprop import analytic
from resprop.model import BlockKind, InitScheme, NetworkConfig, float_format
from resprop.montecarlo import (
    bn_finite_N_convergence,
    compare,
    delta_ratio,
    deviations_shrink,
    experiment_report,
    run_experiment,
)
from resprop.propagation import forward, probe_loss, run
from resprop.sampling import SeedPlan, sample_weights
from resprop.trainer import DatasetConfig, TrainConfig, train

SEED = 0
PLAIN_TRIALS = 64  # 64 trials x 256 rows x 64 units = 1,048,576 samples per layer
BN_TRIALS = 200
CONVERGENCE_TRIALS = 50


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number}: {detail}"

    return report


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


def plain_config(activation):
    return NetworkConfig(32, 64, activation, BlockKind.PLAIN, InitScheme.proposed(1.0), batch_size=256)


def bn_config(activation="identity", block=BlockKind.BN_PRE_ADD, **changes):
    cfg = NetworkConfig(64, 64, activation, block, InitScheme.glorot(), batch_size=256, input_variance=1.0)
    return cfg.replace(**changes) if changes else cfg


@pytest.fixture(scope="module")
def plain_identity():
    cfg = plain_config("identity")
    (stats, report), seconds = timed(experiment_report, cfg, PLAIN_TRIALS, SEED, 1)
    return cfg, stats, report, seconds


@pytest.fixture(scope="module")
def plain_relu():
    cfg = plain_config("relu")
    stats, seconds = timed(run_experiment, cfg, PLAIN_TRIALS, SEED, 1)
    return cfg, stats, seconds


@pytest.fixture(scope="module")
def bn_identity():
    cfg = bn_config()
    (stats, report), seconds = timed(experiment_report, cfg, BN_TRIALS, SEED, 1)
    return cfg, stats, report, seconds


def max_rel(empirical, reference):
    rel = np.abs(np.asarray(empirical) / np.asarray(reference) - 1.0)
    i = int(np.argmax(rel))
    return float(rel[i]), i


# -- 1 -------------------------------------------------------------------------


def _fd_gradients(cfg, W, X, h=1e-6):
    mats = [w.copy() for w in W]
    out = []
    for w in mats:
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            keep = w[idx]
            w[idx] = keep + h
            up = probe_loss(cfg, type(W)(tuple(mats)), X)
            w[idx] = keep - h
            down = probe_loss(cfg, type(W)(tuple(mats)), X)
            w[idx] = keep
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_criterion_01_gradient_exactness(verdict):
    rng = np.random.default_rng(20240601)
    kinds = list(BlockKind)
    worst = 0.0
    start = time.perf_counter()
    for i in range(50):
        block = kinds[i % 3]
        activation = ("identity", "relu")[(i // 3) % 2]
        cfg = NetworkConfig(
            depth=int(rng.integers(1, 5)),
            width=int(rng.integers(1, 6)),
            activation=activation,
            block=block,
            init=InitScheme.fixed(float(rng.uniform(0.1, 1.0))),
            batch_size=int(rng.integers(2, 7)),
        )
        W = sample_weights(cfg, SeedPlan(7, i))
        X = rng.normal(size=(cfg.batch_size, cfg.width))
        trace = forward(cfg, W, X)
        grads = run(cfg, W, X, trace.output).grad
        fd = _fd_gradients(cfg, W, X)
        num = math.sqrt(sum(np.sum((g - f) ** 2) for g, f in zip(grads, fd)))
        den = math.sqrt(sum(np.sum(f**2) for f in fd))
        worst = max(worst, num / den if den > 0 else num)
    seconds = time.perf_counter() - start
    verdict(1, worst <= 1e-6 and seconds < 10,
            f"max relative error {worst:.2e} over 50 configs (limit 1e-6), {seconds:.1f}s (limit 10s)")


# -- 2 / 3 / 4 -------------------------------------------------------------------


def test_criterion_02_identity_forward_law(verdict, plain_identity):
    cfg, stats, _, seconds = plain_identity
    layers = np.arange(1, 33)
    expected = (1 + 1 / 32) ** layers
    samples = int(stats.count("z")[0])
    worst, i = max_rel(stats.variance("z"), expected)
    top = float(stats.variance("z")[-1])
    ok = samples >= 10**6 and worst <= 0.05 and abs(top / 2.677 - 1) <= 0.05 and seconds < 60
    verdict(2, ok, f"max |rel| {worst:.4f} at l={i + 1} (limit 0.05), Var[z^L]={top:.4f} (target 2.677), "
                   f"{samples} samples/layer, {seconds:.1f}s (limit 60s)")


def test_criterion_03_relu_lower_bound(verdict, plain_relu):
    cfg, stats, _ = plain_relu
    layers = np.arange(1, 33)
    bound = (1 + 1 / 128) ** layers
    emp = stats.variance("z")
    se = stats.stderr_variance("z")
    margin = (emp + 2 * se) / bound
    np.testing.assert_allclose(analytic.forward_variance_relu_lower_bound(cfg).value, bound, rtol=1e-12)
    i = int(np.argmin(margin))
    verdict(3, bool(np.all(margin >= 1.0)),
            f"smallest (Var[z]+2se)/bound = {margin[i]:.4f} at l={i + 1} (must be >= 1)")


def test_criterion_04_backward_laws(verdict, plain_identity, plain_relu):
    cfg_i, stats_i, _, _ = plain_identity
    cfg_r, stats_r, _ = plain_relu
    L = 32
    layers = np.arange(1, L + 1)
    identity_expected = (1 + 1 / 32) ** (L - layers)
    np.testing.assert_allclose(analytic.backward_delta_variance(cfg_i).value, identity_expected, rtol=1e-12)
    worst_i, li = max_rel(stats_i.variance("delta"), identity_expected)
    worst_r, lr = max_rel(stats_r.variance("delta"), analytic.backward_delta_variance(cfg_r).value)
    active_z = np.abs(stats_r.mean("active") - 0.5) / stats_r.stderr_mean("active")
    ok_i = worst_i <= 0.05
    ok_r = worst_r <= 0.10
    ok_a = bool(np.all(active_z <= 4))
    verdict(4, ok_i and ok_r and ok_a,
            f"identity max |rel| {worst_i:.4f} at l={li + 1} (limit 0.05) {'ok' if ok_i else 'FAIL'}; "
            f"relu max |rel| {worst_r:.4f} at l={lr + 1} (limit 0.10) {'ok' if ok_r else 'FAIL'}; "
            f"active fraction max z-score {active_z.max():.2f} (limit 4) {'ok' if ok_a else 'FAIL'}")


# -- 5 -------------------------------------------------------------------------


def test_criterion_05_robustness_contrast(verdict):
    plain = analytic.robustness_factors(20, 2.0).plain_factor
    resnet = analytic.robustness_factors(10**4, 2.0).resnet_factor
    rel = abs(resnet / math.exp(2) - 1)
    verdict(5, plain == 1048576 and rel <= 0.005,
            f"plain factor {plain!r} (target 1048576), resnet factor {resnet:.5f} vs e^2, rel {rel:.2e} (limit 5e-3)")


# -- 6 / 7 / 8 -------------------------------------------------------------------


def test_criterion_06_bn_sigma_law(verdict, bn_identity):
    cfg, stats, _, seconds = bn_identity
    layers = np.arange(1, 65)
    expected = layers * 64 * (1 / 64) + 1.0
    worst, i = max_rel(stats.mean("sigma2"), expected)
    verdict(6, worst <= 0.10 and seconds < 300,
            f"max |rel| {worst:.4f} at l={i + 1} (limit 0.10), {seconds:.1f}s (limit 300s)")


def _ratios(stats):
    top = stats.variance("delta_z")[-1]
    return stats.variance("delta_z") / top, stats.variance("grad_sample") / top


def test_criterion_07_bn_telescoping_law(verdict, bn_identity):
    cfg, stats, _, _ = bn_identity
    L = cfg.depth
    layers = np.arange(4, L + 1)
    delta, grad = _ratios(stats)
    worst_d, ld = max_rel(delta[3:], L / layers)
    worst_g, lg = max_rel(grad[3:], L / layers)
    ok_d, ok_g = worst_d <= 0.10, worst_g <= 0.15
    verdict(7, ok_d and ok_g,
            f"delta ratio max |rel| {worst_d:.4f} at l={ld + 4} (limit 0.10) {'ok' if ok_d else 'FAIL'}; "
            f"gradient ratio max |rel| {worst_g:.4f} at l={lg + 4} (limit 0.15) {'ok' if ok_g else 'FAIL'}")


def test_criterion_08_pre_activation_variant(verdict):
    cfg = bn_config("relu", BlockKind.BN_PRE_ACT)
    stats = run_experiment(cfg, BN_TRIALS, SEED, 1)
    L = cfg.depth
    layers = np.arange(4, L + 1)
    _, grad = _ratios(stats)
    worst, i = max_rel(grad[3:], 0.5 * L / layers)
    verdict(8, worst <= 0.15, f"gradient ratio max |rel| {worst:.4f} at l={i + 4} vs L/(2l) (limit 0.15)")


# -- 9 -------------------------------------------------------------------------


def test_criterion_09_finite_batch_convergence(verdict):
    # small Var[x] so that the N -> infinity ratio at l=1 is L/l itself
    cfg = bn_config(input_variance=0.01)
    rows = bn_finite_N_convergence(cfg, [8, 32, 128, 512], CONVERGENCE_TRIALS, SEED, 1, layer=1)
    pair = run_experiment(cfg.replace(batch_size=2), 4, SEED, 1)
    ratio2 = float(delta_ratio(pair, 1)[0])
    shrink = deviations_shrink(rows, k=2.0)
    exact = abs(ratio2 - 1.0) <= 1e-12
    devs = ", ".join(f"N={r.batch_size}: {r.deviation:.3f}+-{r.stderr:.3f}" for r in rows)
    verdict(9, shrink and exact, f"deviations from L/l {devs}; N=2 ratio {ratio2!r}")


# -- 10 ------------------------------------------------------------------------


def test_criterion_10_depth_limit(verdict):
    limit = analytic.depth_limit(float_format("fp16"), 64, 1.0)
    verdict(10, limit.max_depth == 256 and not limit.saturated, f"fp16 n=64 c=1 max depth {limit.max_depth}")


# -- 11 ------------------------------------------------------------------------


def test_criterion_11_training_surrogate(verdict):
    net = NetworkConfig(100, 64, "relu", BlockKind.PLAIN, InitScheme.proposed(1.0), batch_size=64)
    start = time.perf_counter()
    results = {}
    for name, init in (("he", InitScheme.he()), ("proposed", InitScheme.proposed(1.0))):
        tc = TrainConfig(net.replace(init=init), steps=20, repeats=9, dataset=DatasetConfig(samples=512))
        results[name] = train(tc, seed=SEED)
    seconds = time.perf_counter() - start
    he, prop = results["he"], results["proposed"]
    ratio = he.step0_mean_grad_norm() / prop.step0_mean_grad_norm()
    finite = all(len(r.losses) == 21 and np.all(np.isfinite(r.losses)) for r in prop.runs)
    events = he.divergences() + he.plateaus()
    ok = ratio > 1e4 and finite and events >= 1 and seconds < 300
    verdict(11, ok, f"step-0 grad norm ratio {ratio:.3e} (limit 1e4), proposed finite at every step: {finite}, "
                    f"he events {events} ({he.divergences()} divergences), {seconds:.1f}s (limit 300s)")


# -- 12 ------------------------------------------------------------------------


def test_criterion_12_determinism(verdict, plain_identity, bn_identity):
    cfg2, _, report2, _ = plain_identity
    cfg6, _, report6, _ = bn_identity
    again2 = experiment_report(cfg2, PLAIN_TRIALS, SEED, workers=3)[1]
    stats6 = run_experiment(cfg6, BN_TRIALS, SEED, workers=4)
    again6 = compare(stats6, analytic.predict(cfg6))
    same2 = report2.to_csv() == again2.to_csv()
    same6 = report6.to_csv() == again6.to_csv()
    verdict(12, same2 and same6,
            f"criterion 2 CSV identical across 1/3 workers: {same2}; criterion 6 CSV identical across 1/4 workers: {same6}")
