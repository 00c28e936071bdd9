import numpy as np
import pytest

from conftest import make_dataset
from lcroll import vrnn as V
from lcroll.curve_data import CurveDataset, HyperparameterConfig, make_curve
from lcroll.forest import (
    ForestTrainConfig,
    RegressionForest,
    RegressionTree,
    fit_forest,
    forest_predict,
    sample_prediction,
)
from lcroll.rollout import (
    RolloutConfig,
    RolloutResult,
    aggregate,
    make_training_windows,
    roll_out,
    trajectory_streams,
    vrnn_predictor,
    windowed_forest_predictor,
)

THETA = HyperparameterConfig(np.array([0.3, -1.0]))


def constant_forest(mean, var, feature_dim):
    leaf = RegressionTree([-1], [0.0], [-1], [-1], [mean], [var], [1])
    return RegressionForest((leaf,), feature_dim, ForestTrainConfig(num_trees=1))


@pytest.fixture(scope="module")
def fitted():
    ds = make_dataset(n_curves=12, length=10, dim=2, seed=4)
    X, y = make_training_windows(ds, 2)
    return ds, fit_forest(X, y, ForestTrainConfig(num_trees=10, seed=1))


# -- aggregation ------------------------------------------------------------


def test_two_values_hand_check():
    mean, var = aggregate(np.array([[0.2], [0.4]]))
    assert mean[0] == pytest.approx(0.3, abs=1e-15)
    assert var[0] == pytest.approx(0.01, abs=1e-15)


def test_aggregate_matches_loops():
    traj = np.random.default_rng(0).normal(size=(7, 5))
    mean, var = aggregate(traj)
    for j in range(5):
        col = [traj[r, j] for r in range(7)]
        mu = sum(col) / 7
        assert mean[j] == pytest.approx(mu, rel=1e-13)
        assert var[j] == pytest.approx(sum((v - mu) ** 2 for v in col) / 7, rel=1e-12)


def test_aggregate_row_order_invariant():
    traj = np.random.default_rng(1).normal(size=(9, 4))
    a = aggregate(traj)
    b = aggregate(traj[np.random.default_rng(2).permutation(9)])
    np.testing.assert_allclose(a[0], b[0], rtol=1e-14)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12)


def test_single_rollout_zero_variance(fitted):
    ds, forest = fitted
    c = ds.curves[0]
    res = roll_out(windowed_forest_predictor(forest, 2), c.config, c.values[:4],
                   RolloutConfig(1, 10, 0))
    assert np.all(res.variance == 0.0)
    assert np.array_equal(res.mean, res.trajectories[0])


# -- forest rollouts --------------------------------------------------------


def test_zero_variance_predictor_identical_trajectories():
    pred = windowed_forest_predictor(constant_forest(0.42, 0.0, 4), 2, config_dim=2)
    res = roll_out(pred, THETA, [0.1, 0.2, 0.3], RolloutConfig(6, 9, 3))
    assert np.all(res.trajectories == 0.42)
    assert np.all(res.variance == 0.0)


def test_result_layout_respects_prefix(fitted):
    ds, forest = fitted
    c = ds.curves[1]
    observed = c.values[:5].copy()
    res = roll_out(windowed_forest_predictor(forest, 2), c.config, observed, RolloutConfig(4, 10, 0))
    assert res.trajectories.shape == (4, 5)
    assert res.first_epoch == 6
    assert list(res.epochs) == [6, 7, 8, 9, 10]
    assert np.array_equal(observed, c.values[:5])
    with pytest.raises(IndexError):
        res.at(5)


def test_only_last_window_of_prefix_matters(fitted):
    ds, forest = fitted
    c = ds.curves[2]
    pred = windowed_forest_predictor(forest, 2)
    cfg = RolloutConfig(5, 10, 11)
    a = roll_out(pred, c.config, [0.9, 0.1, 0.5, 0.6], cfg)
    b = roll_out(pred, c.config, [0.0, 0.0, 0.5, 0.6], cfg)
    assert np.array_equal(a.trajectories, b.trajectories)


def test_fifo_window():
    pred = windowed_forest_predictor(constant_forest(0.5, 0.01, 5), 3, config_dim=2)
    streams = trajectory_streams(0, 2)
    ctx = pred.start(THETA, np.array([0.1, 0.2, 0.3, 0.4]), streams)
    assert np.array_equal(ctx["X"][:, 2:], [[0.2, 0.3, 0.4]] * 2)
    s1 = pred.step(ctx)
    np.testing.assert_array_equal(ctx["X"][:, 2:], np.column_stack([[0.3] * 2, [0.4] * 2, s1]))
    s2 = pred.step(ctx)
    np.testing.assert_array_equal(ctx["X"][:, 2:], np.column_stack([[0.4] * 2, s1, s2]))
    np.testing.assert_array_equal(ctx["X"][:, :2], [[0.3, -1.0]] * 2)


def test_batched_equals_one_at_a_time(fitted):
    ds, forest = fitted
    c = ds.curves[3]
    observed = c.values[:3]
    res = roll_out(windowed_forest_predictor(forest, 2), c.config, observed, RolloutConfig(4, 9, 5))
    for r, rng in enumerate(trajectory_streams(5, 4)):
        lags = list(observed[-2:])
        for j in range(6):
            g = forest_predict(forest, np.concatenate([c.config.values, lags]))
            y = sample_prediction(g, rng)
            assert res.trajectories[r, j] == pytest.approx(y, abs=1e-14)
            lags = lags[1:] + [y]


def test_trajectories_exchangeable_across_r(fitted):
    ds, forest = fitted
    c = ds.curves[0]
    pred = windowed_forest_predictor(forest, 2)
    small = roll_out(pred, c.config, c.values[:3], RolloutConfig(3, 10, 8))
    large = roll_out(pred, c.config, c.values[:3], RolloutConfig(7, 10, 8))
    assert np.array_equal(small.trajectories, large.trajectories[:3])


def test_horizon_extension_keeps_prefix(fitted):
    ds, forest = fitted
    c = ds.curves[0]
    pred = windowed_forest_predictor(forest, 2)
    short = roll_out(pred, c.config, c.values[:3], RolloutConfig(5, 8, 2))
    long = roll_out(pred, c.config, c.values[:3], RolloutConfig(5, 20, 2))
    assert np.array_equal(short.trajectories, long.trajectories[:, :5])


def test_rollouts_deterministic(fitted):
    ds, forest = fitted
    c = ds.curves[0]
    pred = windowed_forest_predictor(forest, 2)
    a = roll_out(pred, c.config, c.values[:3], RolloutConfig(5, 10, 2))
    b = roll_out(pred, c.config, c.values[:3], RolloutConfig(5, 10, 2))
    assert np.array_equal(a.trajectories, b.trajectories)
    c2 = roll_out(pred, c.config, c.values[:3], RolloutConfig(5, 10, 3))
    assert not np.array_equal(a.trajectories, c2.trajectories)


def test_constant_curves_give_exact_constant_rollouts():
    rng = np.random.default_rng(0)
    ds = CurveDataset(tuple(make_curve(f"k{i}", rng.normal(size=2), np.full(8, 0.5))
                            for i in range(6)), "flat", 2)
    X, y = make_training_windows(ds, 3)
    forest = fit_forest(X, y, ForestTrainConfig(num_trees=5))
    res = roll_out(windowed_forest_predictor(forest, 3), ds.curves[0].config, np.full(3, 0.5),
                   RolloutConfig(20, 30, 0))
    assert np.all(res.trajectories == 0.5)
    assert np.all(res.variance == 0.0)


def test_iid_gaussian_statistics():
    mu, var, R = 0.3, 0.04, 4000
    pred = windowed_forest_predictor(constant_forest(mu, var, 3), 1, config_dim=2)
    res = roll_out(pred, THETA, [0.0], RolloutConfig(R, 4, 1))
    tol_mean = 4 * np.sqrt(var / R)
    tol_var = 4 * var * np.sqrt(2 / R)
    assert np.all(np.abs(res.mean - mu) < tol_mean)
    assert np.all(np.abs(res.variance - var) < tol_var)


def test_rollout_argument_errors(fitted):
    ds, forest = fitted
    pred = windowed_forest_predictor(forest, 2)
    c = ds.curves[0]
    with pytest.raises(ValueError, match="at least 2"):
        roll_out(pred, c.config, c.values[:1], RolloutConfig(2, 10))
    with pytest.raises(ValueError, match="horizon"):
        roll_out(pred, c.config, c.values[:5], RolloutConfig(2, 5))
    with pytest.raises(ValueError):
        windowed_forest_predictor(forest, 3, config_dim=2)
    with pytest.raises(ValueError):
        RolloutConfig(0, 5)


# -- VRNN rollouts ----------------------------------------------------------


def small_vrnn(d):
    return V.init_model(2, V.Architecture(3, 4, 5), d, 7)


def test_vrnn_no_dropout_zero_variance():
    res = roll_out(vrnn_predictor(small_vrnn(0.0)), THETA, [0.2, 0.3], RolloutConfig(8, 10, 0))
    assert np.all(res.variance == 0.0)
    assert np.all(res.trajectories == res.trajectories[0])


def test_vrnn_dropout_gives_spread_and_empty_prefix():
    res = roll_out(vrnn_predictor(small_vrnn(0.5)), THETA, [], RolloutConfig(16, 6, 0))
    assert res.first_epoch == 1
    assert np.all(res.variance > 0.0)


def test_vrnn_trajectory_matches_sequence_forward():
    model = small_vrnn(0.4)
    observed = np.array([0.1, 0.25, 0.3])
    res = roll_out(vrnn_predictor(model), THETA, observed, RolloutConfig(3, 7, 4))
    for r, rng in enumerate(trajectory_streams(4, 3)):
        masks = V.sample_masks(model, rng)
        traj = res.trajectories[r]
        inputs = np.concatenate([[0.0], observed, traj[:-1]])
        seq = V.forward_sequence(model, THETA.values, inputs, masks)
        np.testing.assert_allclose(seq[3:], traj, rtol=0, atol=1e-12)


def test_vrnn_masks_fixed_during_rollout(monkeypatch):
    import lcroll.rollout as ro

    calls = []
    original = ro.sample_masks

    def spy(model, rng, n=None):
        calls.append(n)
        return original(model, rng, n)

    monkeypatch.setattr(ro, "sample_masks", spy)
    pred = vrnn_predictor(small_vrnn(0.3))
    streams = trajectory_streams(0, 4)
    ctx = pred.start(THETA, np.array([0.2]), streams)
    z1, z2 = (z.copy() for z in ctx["masks"])
    for _ in range(6):
        pred.step(ctx)
    assert len(calls) == 4  # once per trajectory, before the first step
    assert np.array_equal(ctx["masks"][0], z1) and np.array_equal(ctx["masks"][1], z2)


def test_vrnn_rollout_deterministic():
    pred = vrnn_predictor(small_vrnn(0.3))
    a = roll_out(pred, THETA, [0.2], RolloutConfig(5, 8, 1))
    b = roll_out(pred, THETA, [0.2], RolloutConfig(5, 8, 1))
    assert np.array_equal(a.trajectories, b.trajectories)


# -- training windows -------------------------------------------------------


def test_training_windows_enumeration():
    ds = CurveDataset((make_curve("a", [7.0], [1.0, 2.0, 3.0, 4.0]),), "w", 1)
    X, y = make_training_windows(ds, 2)
    assert X.tolist() == [[7.0, 1.0, 2.0], [7.0, 2.0, 3.0]]
    assert y.tolist() == [3.0, 4.0]


@pytest.mark.parametrize("K", [1, 2, 5])
def test_training_window_count(K):
    ds = make_dataset(n_curves=3, length=9, dim=2)
    X, y = make_training_windows(ds, K)
    assert X.shape == (3 * (9 - K), 2 + K) and y.shape == (3 * (9 - K),)
    # each row's lags are the K values preceding its target
    i = 9 - K + 1  # second row of the second curve
    c = ds.curves[1]
    assert np.array_equal(X[i, 2:], c.values[1:1 + K]) and y[i] == c.values[1 + K]


def test_training_windows_short_curve_error():
    ds = make_dataset(n_curves=2, length=4)
    with pytest.raises(ValueError, match="K\\+1"):
        make_training_windows(ds, 4)


# -- export -----------------------------------------------------------------


def test_write_csv(tmp_path):
    res = RolloutResult.from_trajectories(np.array([[0.2, 0.5], [0.4, 0.5]]), 3)
    res.write_csv(tmp_path / "r.csv", tmp_path / "t.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean,variance"
    epoch, mean, var = lines[1].split(",")
    assert epoch == "3" and float(mean) == res.mean[0] and float(var) == res.variance[0]
    assert lines[2] == "4,0.5,0.0"
    traj = (tmp_path / "t.csv").read_text().splitlines()
    assert traj[0] == "epoch,rollout_idx,value"
    assert traj[1:] == ["3,0,0.2", "3,1,0.4", "4,0,0.5", "4,1,0.5"]
