import numpy as np
import pytest

from metatree import autodiff
from metatree.autodiff import Adam
from metatree.data import UserSet
from metatree.networks import MetaModel, ModelConfig
from metatree.training import (VARIANTS, TaskBatch, TrainConfig, apply_variant,
                               batch_loss, split_user, train)


def make_batch(rng, n_users=4, d_x=4, lo=1.0, hi=5.0):
    users = []
    for _ in range(n_users):
        Xb = rng.standard_normal((8, d_x))
        Xl = rng.standard_normal((5, d_x))
        users.append((Xb, rng.uniform(lo, hi, 8), Xl, rng.uniform(lo, hi, 5)))
    return TaskBatch(users)


# -- configuration -------------------------------------------------------------------


def test_variant_enum_complete():
    assert VARIANTS == ("none", "semi_sparse_eval", "no_sparsity_loss",
                        "mean_leaf", "drop_global_r", "fixed_beta",
                        "fixed_beta_signed_w", "onehot_w_st",
                        "hard_route_st_loss", "loss_includes_build_set")


@pytest.mark.parametrize("variant,attr,value", [
    ("semi_sparse_eval", "skip_sparsify_at_eval", True),
    ("no_sparsity_loss", "zero_sparsity_weight", True),
    ("hard_route_st_loss", "hard_st_loss", True),
    ("loss_includes_build_set", "include_build_in_loss", True),
])
def test_apply_variant_behavior_flags(variant, attr, value):
    assert getattr(apply_variant(variant), attr) is value


@pytest.mark.parametrize("variant,attr", [
    ("mean_leaf", "mean_leaf"),
    ("drop_global_r", "drop_global_r"),
    ("fixed_beta", "fixed_beta"),
    ("onehot_w_st", "onehot_st"),
])
def test_apply_variant_grow_flags(variant, attr):
    assert getattr(apply_variant(variant).grow, attr) is True


def test_apply_variant_signed_w_implies_fixed_beta():
    b = apply_variant("fixed_beta_signed_w")
    assert b.grow.fixed_beta and b.grow.signed_w


def test_apply_variant_unknown_rejected():
    with pytest.raises(ValueError):
        apply_variant("nope")


@pytest.mark.parametrize("kwargs", [
    {"loss_kind": "huber"},
    {"variant": "bogus"},
    {"split_fraction": 0.0},
    {"split_fraction": 1.0},
    {"sparsity_weight": -0.1},
])
def test_train_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_sparsity_warmup_schedule():
    cfg = TrainConfig(sparsity_weight=0.1, sparsity_warmup_steps=100)
    assert cfg.effective_sparsity_weight(1) == pytest.approx(0.001)
    assert cfg.effective_sparsity_weight(50) == pytest.approx(0.05)
    assert cfg.effective_sparsity_weight(100) == pytest.approx(0.1)
    assert cfg.effective_sparsity_weight(10_000) == pytest.approx(0.1)
    flat = TrainConfig(sparsity_weight=0.1, sparsity_warmup_steps=0)
    assert flat.effective_sparsity_weight(1) == pytest.approx(0.1)


# -- batch_loss ----------------------------------------------------------------------


def test_batch_loss_empty_batch(tiny_model):
    with pytest.raises(ValueError):
        batch_loss(TaskBatch([]), tiny_model, TrainConfig())


def test_batch_loss_scalar_and_stats(tiny_model, rng):
    loss, stats = batch_loss(make_batch(rng), tiny_model, TrainConfig())
    assert loss.data.shape == ()
    assert np.isfinite(loss.data)
    assert stats["n_loss_samples"] == 20
    assert 0.0 <= stats["mean_node_sparsity"] <= 1.0


def test_batch_loss_no_sparsity_variant_drops_penalty(tiny_model, rng):
    batch = make_batch(rng)
    base, _ = batch_loss(batch, tiny_model, TrainConfig(sparsity_weight=10.0,
                                                        variant="no_sparsity_loss"))
    zero, _ = batch_loss(batch, tiny_model, TrainConfig(sparsity_weight=0.0))
    assert base.data == pytest.approx(zero.data)


def test_batch_loss_warmup_step_zeroish_penalty(tiny_model, rng):
    batch = make_batch(rng)
    cfg = TrainConfig(sparsity_weight=0.5, sparsity_warmup_steps=1000)
    early, _ = batch_loss(batch, tiny_model, cfg, step=1)
    late, _ = batch_loss(batch, tiny_model, cfg, step=1000)
    off, _ = batch_loss(batch, tiny_model, TrainConfig(sparsity_weight=0.0))
    assert abs(early.data - off.data) < abs(late.data - off.data)


def test_batch_loss_build_set_variant_counts_more_samples(tiny_model, rng):
    batch = make_batch(rng)
    _, base = batch_loss(batch, tiny_model, TrainConfig())
    _, inc = batch_loss(batch, tiny_model,
                        TrainConfig(variant="loss_includes_build_set"))
    assert inc["n_loss_samples"] == base["n_loss_samples"] + 4 * 8


def test_batch_loss_logistic_needs_unit_range(rng):
    model = MetaModel(ModelConfig(d_x=4, d_h=8, max_depth=2,
                                  output_range=(0.0, 1.0)), rng)
    batch = make_batch(rng, lo=0.0, hi=1.0)
    loss, _ = batch_loss(batch, model, TrainConfig(loss_kind="logistic"))
    assert np.isfinite(loss.data)


def test_batch_loss_decreases_under_adam(rng):
    model = MetaModel(ModelConfig(d_x=4, d_h=16, max_depth=2,
                                  output_range=(1.0, 5.0)), rng)
    batch = make_batch(rng)
    cfg = TrainConfig(sparsity_weight=0.0)
    opt = Adam(model.parameters(), learning_rate=3e-3)
    first = None
    for _ in range(40):
        loss, _ = batch_loss(batch, model, cfg)
        if first is None:
            first = float(loss.data)
        autodiff.backward(loss)
        opt.step()
    assert float(loss.data) < 0.8 * first


# -- split_user ----------------------------------------------------------------------


def test_split_user_sizes_and_disjointness(rng):
    X = np.arange(40.0).reshape(10, 4)
    y = np.arange(10.0)
    Xb, yb, Xl, yl = split_user(X, y, 0.8, rng)
    assert Xb.shape == (8, 4) and Xl.shape == (2, 4)
    assert set(yb).isdisjoint(set(yl))  # no sample leaks across the split
    assert set(yb) | set(yl) == set(y)


def test_split_user_both_sides_nonempty_extremes(rng):
    X = np.zeros((2, 3))
    y = np.array([1.0, 2.0])
    for frac in (0.01, 0.99):
        Xb, yb, Xl, yl = split_user(X, y, frac, rng)
        assert len(yb) == 1 and len(yl) == 1


def test_split_user_too_small(rng):
    with pytest.raises(ValueError):
        split_user(np.zeros((1, 3)), np.zeros(1), 0.8, rng)


def test_split_user_reproducible():
    X = np.arange(24.0).reshape(6, 4)
    y = np.arange(6.0)
    a = split_user(X, y, 0.8, np.random.default_rng(3))
    b = split_user(X, y, 0.8, np.random.default_rng(3))
    for left, right in zip(a, b):
        assert np.array_equal(left, right)


# -- train loop ----------------------------------------------------------------------


def make_users(rng, n_users=15, n_samples=12, d_x=4):
    users = []
    for uid in range(n_users):
        X = rng.standard_normal((n_samples, d_x))
        y = np.clip(3.0 + X[:, 0] + 0.5 * rng.standard_normal(n_samples), 1, 5)
        users.append(UserSet(str(uid), X, y, list(range(n_samples))))
    return users


def test_train_returns_report(rng, tmp_path):
    model = MetaModel(ModelConfig(d_x=4, d_h=8, max_depth=2,
                                  output_range=(1.0, 5.0)), rng)
    log = tmp_path / "log.csv"
    report = train(make_users(rng), model, TrainConfig(epochs=2, batch_size=8),
                   log_path=log)
    assert len(report.rows) == 2
    assert report.best_epoch in (0, 1)
    assert report.wall_clock > 0
    assert log.exists()
    header = log.read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_rmse,val_mae"


def test_train_excludes_tiny_users(rng, caplog):
    users = make_users(rng, n_users=12)
    users.append(UserSet("tiny", np.zeros((1, 4)), np.array([3.0]), [0]))
    model = MetaModel(ModelConfig(d_x=4, d_h=8, max_depth=2,
                                  output_range=(1.0, 5.0)), rng)
    import logging
    with caplog.at_level(logging.WARNING, logger="metatree.training"):
        train(users, model, TrainConfig(epochs=1, batch_size=8))
    assert any("excluded" in r.message for r in caplog.records)


def test_train_no_users_raises(rng):
    model = MetaModel(ModelConfig(d_x=4, d_h=8, max_depth=2,
                                  output_range=(1.0, 5.0)), rng)
    with pytest.raises(ValueError):
        train([], model, TrainConfig(epochs=1))


def test_train_deterministic_for_fixed_seed():
    def run():
        rng = np.random.default_rng(5)
        model = MetaModel(ModelConfig(d_x=4, d_h=8, max_depth=2,
                                      output_range=(1.0, 5.0)), rng)
        report = train(make_users(rng), model,
                       TrainConfig(epochs=2, batch_size=8, seed=11))
        return report.rows

    a, b = run(), run()
    assert a == b
