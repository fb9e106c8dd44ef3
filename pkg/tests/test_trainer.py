import numpy as np
import pytest

from resprop import analytic
from resprop.model import ConfigError, InitScheme, NetworkConfig
from resprop.sampling import SeedPlan, aux_rng
from resprop.trainer import (
    CURVE_COLUMNS,
    DatasetConfig,
    RunResult,
    TrainConfig,
    make_dataset,
    step0_rank_correlation,
    train,
)


def test_config_validation():
    net = NetworkConfig(2, 4)
    with pytest.raises(ConfigError):
        TrainConfig(net, steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(net, repeats=0)
    with pytest.raises(ConfigError):
        TrainConfig(net, learning_rate=0.0)
    with pytest.raises(ConfigError):
        DatasetConfig(classes=3)


def test_dataset_is_balanced_and_separated():
    X, t = make_dataset(DatasetConfig(samples=4000, separation=4.0), 8, np.random.default_rng(0))
    assert set(np.unique(t)) == {-1.0, 1.0}
    assert abs(t.mean()) < 0.1
    gap = X[t > 0].mean(axis=0) - X[t < 0].mean(axis=0)
    assert np.linalg.norm(gap) == pytest.approx(4.0, rel=0.1)


def test_zero_weights_skip_only_gradients():
    # with W = 0 the output is the input, and every block sees the same
    # step-0 gradient: batch mean of delta_out (x) x
    net = NetworkConfig(4, 6, init=InitScheme.fixed(1e-300), batch_size=512)
    tc = TrainConfig(net, steps=1, dataset=DatasetConfig(samples=512))
    result = train(tc, seed=3)
    norms = result.runs[0].step0_grad_norms
    np.testing.assert_allclose(norms, norms[0], rtol=1e-12)
    X, t = make_dataset(tc.dataset, 6, aux_rng(SeedPlan(3, 0), 0))
    y = X.mean(axis=1)
    assert result.runs[0].losses[0] == pytest.approx(np.mean((y - t) ** 2), rel=1e-12)
    D = np.repeat((2 * (y - t) / 6)[:, None], 6, axis=1)
    assert norms[0] == pytest.approx(np.linalg.norm(D.T @ X / 512), rel=1e-10)


def test_deterministic_per_seed():
    net = NetworkConfig(5, 8, "relu", init=InitScheme.proposed(1.0), batch_size=32)
    tc = TrainConfig(net, steps=5, repeats=2, dataset=DatasetConfig(samples=64))
    a = train(tc, seed=11)
    b = train(tc, seed=11, workers=2)
    assert a.to_csv() == b.to_csv()
    assert train(tc, seed=12).to_csv() != a.to_csv()


def test_divergence_is_recorded_not_raised():
    net = NetworkConfig(30, 16, "relu", init=InitScheme.he(8.0), batch_size=32)
    result = train(TrainConfig(net, steps=5, learning_rate=1.0, dataset=DatasetConfig(samples=64)), seed=0)
    run = result.runs[0]
    assert run.diverged
    assert run.divergence_step is not None
    assert result.divergences() == 1
    rows = result.to_csv().splitlines()
    assert rows[0].split(",") == list(CURVE_COLUMNS)
    assert rows[-1].endswith(",1")


def test_plateau_detection():
    flat = RunResult([1.0] * 21, [], 0.5)
    falling = RunResult(list(np.linspace(1.0, 0.5, 21)), [], 0.5)
    assert flat.plateaued(20, 0.01)
    assert not falling.plateaued(20, 0.01)
    assert not RunResult([1.0] * 5, [], 0.5).plateaued(20, 0.01)


def test_step0_gradients_follow_bn_law():
    # batch-normalized blocks: ||G^l||^2 should fall off like L/l
    net = NetworkConfig(24, 32, "identity", "bn_pre_add", InitScheme.he(), batch_size=256)
    tc = TrainConfig(net, steps=1, repeats=4, dataset=DatasetConfig(samples=256))
    result = train(tc, seed=2)
    rho = step0_rank_correlation(result, analytic.bn_gradient_variance(net).value)
    assert rho >= 0.9
