import csv

import numpy as np
import pytest

from metatree.data import RatingsDataset, FeatureScaler, UserSet
from metatree.evaluation import (COLDSTART_BINS, RunningMetrics, build_user_tree,
                                 coldstart_study, contrarian_study, evaluate,
                                 jaccard, meta_feature_path, predict_with_tree,
                                 rmse_mae, robustness_study, sensitivity_sweep)
from metatree.networks import MetaModel, ModelConfig
from metatree.training import TrainConfig
from metatree.tree import Leaf


def tiny_dataset(rng, n_users=6, n_train=10, n_test=4, d_x=4):
    names = [f"f{i}" for i in range(d_x - 1)] + ["avg_rating"]
    scalers = [FeatureScaler("minmax", 0.0, 1.0) for _ in names]
    train, test = {}, {}
    for uid in range(n_users):
        X = rng.uniform(size=(n_train + n_test, d_x))
        y = np.clip(1 + 4 * X[:, -1] + 0.2 * rng.standard_normal(len(X)), 1, 5)
        train[str(uid)] = UserSet(str(uid), X[:n_train], y[:n_train],
                                  np.arange(n_train))
        test[str(uid)] = UserSet(str(uid), X[n_train:], y[n_train:],
                                 np.arange(n_train, n_train + n_test))
    return RatingsDataset(train, test, names, scalers, (1.0, 5.0))


@pytest.fixture
def model4(rng):
    return MetaModel(ModelConfig(d_x=4, d_h=8, max_depth=2,
                                 output_range=(1.0, 5.0)), rng)


# -- metrics -------------------------------------------------------------------------


def test_rmse_mae_simple():
    rmse, mae = rmse_mae(np.array([1.0, 3.0]), np.array([2.0, 1.0]))
    assert rmse == pytest.approx(np.sqrt(2.5))
    assert mae == pytest.approx(1.5)


def test_streaming_matches_batch(rng):
    """Two independent code paths agree to 1e-12."""
    preds = rng.uniform(1, 5, 1000)
    targets = rng.uniform(1, 5, 1000)
    batch_rmse, batch_mae = rmse_mae(preds, targets)
    running = RunningMetrics()
    for lo in range(0, 1000, 17):
        running.update(preds[lo:lo + 17], targets[lo:lo + 17])
    assert abs(running.rmse - batch_rmse) <= 1e-12
    assert abs(running.mae - batch_mae) <= 1e-12


def test_rmse_mae_length_mismatch():
    with pytest.raises(ValueError):
        rmse_mae(np.zeros(3), np.zeros(4))


# -- evaluate ------------------------------------------------------------------------


def test_evaluate_report_fields(model4, rng):
    ds = tiny_dataset(rng)
    report = evaluate(model4, ds, routing="soft", sparsified=True)
    assert report.n_users == 6
    assert report.n_ratings == 24
    assert np.isfinite(report.rmse) and np.isfinite(report.mae)
    assert report.mae <= report.rmse + 1e-12
    assert len(report.per_user) == 6


def test_evaluate_workers_agree(model4, rng):
    ds = tiny_dataset(rng)
    serial = evaluate(model4, ds, workers=1)
    threaded = evaluate(model4, ds, workers=3)
    assert serial.rmse == pytest.approx(threaded.rmse, abs=1e-12)
    assert sorted(serial.per_user) == sorted(threaded.per_user)


def test_evaluate_hard_vs_soft_routing(model4, rng):
    ds = tiny_dataset(rng)
    hard = evaluate(model4, ds, routing="hard", sparsified=True)
    soft = evaluate(model4, ds, routing="soft", sparsified=True)
    assert np.isfinite(hard.rmse) and np.isfinite(soft.rmse)


def test_evaluate_skips_orphan_test_users(model4, rng):
    ds = tiny_dataset(rng)
    orphan = UserSet("orphan", rng.uniform(size=(3, 4)),
                     np.array([2.0, 3.0, 4.0]), np.arange(3))
    ds.test_users["orphan"] = orphan
    report = evaluate(model4, ds)
    assert report.n_skipped_users == 1
    assert report.n_users == 6


def test_predict_with_tree_unknown_routing(model4, rng):
    ds = tiny_dataset(rng)
    tree = build_user_tree(model4, ds.train_users["0"])
    with pytest.raises(ValueError):
        predict_with_tree(tree, ds.train_users["0"].X, "medium")


def test_build_user_tree_semi_sparse_variant_keeps_dense_rules(model4, rng):
    ds = tiny_dataset(rng)
    user = ds.train_users["0"]
    dense = build_user_tree(model4, user, variant="semi_sparse_eval",
                            sparsified=True)
    inner = dense.inner_nodes()
    assert inner and all(node.stump is None for node in inner)


# -- structural stability ------------------------------------------------------------


def test_jaccard_cases():
    assert jaccard([1, 2], [1, 2]) == 1.0
    assert jaccard([1], [2]) == 0.0
    assert jaccard([1, 2, 3], [2, 3, 4]) == pytest.approx(0.5)
    assert jaccard([], []) == 1.0
    assert jaccard([1, 1, 2], [1, 2]) == 1.0  # multiplicity ignored


def test_meta_feature_path_preorder_and_range(model4, rng):
    ds = tiny_dataset(rng)
    user = ds.train_users["0"]
    feats = meta_feature_path(model4, user.X, user.y)
    assert 1 <= len(feats) <= 3
    assert all(0 <= f < 4 for f in feats)


def test_robustness_zero_removal_all_match(model4, rng, tmp_path):
    ds = tiny_dataset(rng)
    out = tmp_path / "robust.csv"
    rows = robustness_study(model4, ds.train_users, [0.0, 0.3], repeats=2,
                            out_path=out)
    zero = [r for r in rows if r["removal_fraction"] == 0.0]
    assert len(zero) == 2
    for r in zero:
        assert r["exact_match_rate"] == 1.0
        assert r["feature_set_match_rate"] == 1.0
        assert r["mean_jaccard"] == 1.0
    nonzero = [r for r in rows if r["removal_fraction"] == 0.3]
    for r in nonzero:
        assert 0.0 <= r["mean_jaccard"] <= 1.0
    with open(out) as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_robustness_deterministic(model4, rng):
    ds = tiny_dataset(rng)
    a = robustness_study(model4, ds.train_users, [0.2], repeats=2, seed=3)
    b = robustness_study(model4, ds.train_users, [0.2], repeats=2, seed=3)
    assert a == b


# -- appendix studies ----------------------------------------------------------------


def test_coldstart_study_bins_and_csv(model4, rng, tmp_path):
    ds = tiny_dataset(rng)
    out = tmp_path / "cold.csv"
    rows = coldstart_study(model4, ds, out_path=out)
    assert len(rows) == len(COLDSTART_BINS)
    ten = next(r for r in rows if r["bin_lo"] == 0)
    assert ten["n_users"] == 6  # all users have 10 training ratings
    assert 0.0 <= ten["avg_rating_only_fraction"] <= 1.0
    assert out.exists()


def test_contrarian_study_correlations(model4, rng, tmp_path):
    ds = tiny_dataset(rng)
    per_user, bins = contrarian_study(model4, ds,
                                      out_path=tmp_path / "u.csv",
                                      bins_path=tmp_path / "b.csv")
    assert len(per_user) == 6
    for row in per_user:
        assert row["correlation"] == pytest.approx(
            np.corrcoef(ds.train_users[row["user_id"]].y,
                        ds.train_users[row["user_id"]].X[:, -1])[0, 1], abs=1e-12)
    assert sum(r["n_users"] for r in bins) == 6


def test_sensitivity_sweep_runs(rng, tmp_path):
    ds = tiny_dataset(rng)
    base = ModelConfig(d_x=4, d_h=8, max_depth=2, output_range=(1.0, 5.0))
    out = tmp_path / "sweep.csv"
    rows = sensitivity_sweep("d_h", [4, 8], list(ds.train_users.values()), ds,
                             base, TrainConfig(epochs=1, batch_size=4),
                             out_path=out)
    assert [r["value"] for r in rows] == [4, 8]
    assert all(np.isfinite(r["rmse_soft_sparse"]) for r in rows)
    with open(out) as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_sensitivity_sweep_rejects_unknown_param(rng):
    ds = tiny_dataset(rng)
    with pytest.raises(ValueError):
        sensitivity_sweep("width", [1], list(ds.train_users.values()), ds,
                          ModelConfig(d_x=4, d_h=8), TrainConfig())
