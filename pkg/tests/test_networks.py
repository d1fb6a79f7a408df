import numpy as np
import pytest

from metatree import autodiff
from metatree.autodiff import Tensor
from metatree.networks import MetaModel, ModelConfig
from metatree.training import TaskBatch, TrainConfig, batch_loss

from conftest import finite_diff_grad, rel_err


def zeroed(model):
    for p in model.parameters():
        p.data[...] = 0.0
    return model


def test_embedding_shape_contract(tiny_model, rng):
    x = rng.standard_normal(4)
    out = tiny_model.embed(x, 3.0)
    assert out.shape == (8,)
    batch = tiny_model.embed(rng.standard_normal((6, 4)), rng.standard_normal(6))
    assert batch.shape == (6, 8)


def test_embedding_zero_weights_zero_output(tiny_model, rng):
    zeroed(tiny_model)
    out = tiny_model.embed(rng.standard_normal(4), 2.0)
    assert np.array_equal(out.data, np.zeros(8))


def test_embedding_deterministic(tiny_model, rng):
    x = rng.standard_normal(4)
    a = tiny_model.embed(x, 4.0).data
    b = tiny_model.embed(x.copy(), 4.0).data
    assert np.array_equal(a, b)


def test_embed_dimension_mismatch(tiny_model, rng):
    with pytest.raises(ValueError):
        tiny_model.embed(rng.standard_normal(5), 1.0)


def test_pool_singleton_and_mean():
    e = Tensor(np.array([[0.0, 2.0], [2.0, 0.0]]))
    assert np.allclose(MetaModel.pool(e).data, [1.0, 1.0])
    single = Tensor(np.array([[3.0, 7.0]]))
    assert np.allclose(MetaModel.pool(single).data, [3.0, 7.0])


def test_pool_permutation_invariant(rng):
    rows = rng.standard_normal((5, 3))
    a = MetaModel.pool(Tensor(rows)).data
    b = MetaModel.pool(Tensor(rows[::-1].copy())).data
    assert np.allclose(a, b, atol=1e-15)


def test_pool_empty_raises():
    with pytest.raises(ValueError):
        MetaModel.pool(Tensor(np.zeros((0, 3))))


def test_rule_params_simplex_contract(tiny_model, rng):
    r = Tensor(rng.standard_normal(8))
    r_node = Tensor(rng.standard_normal(8))
    w, b, beta = tiny_model.rule_params(r, r_node)
    assert w.shape == (4,)
    assert (w.data >= 0).all()
    assert abs(w.data.sum() - 1.0) <= 1e-12


def test_rule_params_zero_weights_uniform(tiny_model):
    zeroed(tiny_model)
    r = Tensor(np.zeros(8))
    w, b, beta = tiny_model.rule_params(r, r)
    assert np.allclose(w.data, 0.25)
    assert b.item() == 0.0
    assert beta.item() == 0.0


def test_leaf_value_midpoint_and_bounds(tiny_model, rng):
    zeroed(tiny_model)
    r = Tensor(np.zeros(8))
    v = tiny_model.leaf_value(r, r)
    assert abs(v.item() - 3.0) < 1e-12  # sigmoid(0)=0.5 -> midpoint of (1,5)
    for _ in range(20):
        r1 = Tensor(rng.standard_normal(8) * 5)
        v = tiny_model.leaf_value(r1, r1)
        assert 1.0 <= v.item() <= 5.0


def test_classification_range_gives_probability(rng):
    model = MetaModel(ModelConfig(d_x=4, d_h=8, output_range=(0.0, 1.0)), rng)
    r = Tensor(rng.standard_normal(8))
    v = model.leaf_value(r, r)
    assert 0.0 <= v.item() <= 1.0


def test_architecture_audit(tiny_model):
    # embedder: 4 affine layers, rule/leaf nets: 2 each
    assert len(tiny_model.h_layers) == 4
    assert len(tiny_model.f_layers) == 2
    assert len(tiny_model.g_layers) == 2
    c = tiny_model.config
    assert tiny_model.h_layers[0][0].shape == (c.d_x + c.d_y, c.d_h)
    assert tiny_model.f_layers[0][0].shape == (2 * c.d_h, 20)
    assert tiny_model.f_layers[1][0].shape == (20, c.d_x + 2)
    assert tiny_model.g_layers[0][0].shape == (2 * c.d_h, 50)
    assert tiny_model.g_layers[1][0].shape == (50, 1)


def test_checkpoint_round_trip(tiny_model, tmp_path, rng):
    path = tmp_path / "model.npz"
    tiny_model.save(path)
    loaded = MetaModel.load(path)
    assert loaded.config == tiny_model.config
    x = rng.standard_normal(4)
    assert np.array_equal(loaded.embed(x, 2.0).data, tiny_model.embed(x, 2.0).data)


def test_checkpoint_rejects_wrong_schema(tiny_model, tmp_path):
    import json
    path = tmp_path / "model.npz"
    tiny_model.save(path)
    with np.load(path) as archive:
        arrays = dict(archive)
    meta = json.loads(arrays["__meta__"].tobytes().decode())
    meta["schema_version"] = 999
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(ValueError):
        MetaModel.load(path)


def test_describe_lists_layers(tiny_model):
    text = tiny_model.describe()
    assert "h.0.weight" in text and "g.1.bias" in text


def test_end_to_end_gradcheck_toy_user(rng):
    """d(total loss)/d(parameter) vs central differences on a 5-sample user."""
    model = MetaModel(ModelConfig(d_x=3, d_h=6, max_depth=2,
                                  output_range=(1.0, 5.0)), rng)
    Xb = rng.standard_normal((5, 3))
    yb = rng.uniform(1, 5, size=5)
    Xl = rng.standard_normal((4, 3))
    yl = rng.uniform(1, 5, size=4)
    cfg = TrainConfig(seed=0)
    batch = TaskBatch([(Xb, yb, Xl, yl)])

    loss, _ = batch_loss(batch, model, cfg)
    autodiff.backward(loss)

    def loss_value():
        value, _ = batch_loss(batch, model, cfg)
        return float(value.data)

    check_rng = np.random.default_rng(7)
    for name, p in model.named_parameters().items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        for _ in range(3):
            i = int(check_rng.integers(p.data.size))
            fd = finite_diff_grad(loss_value, p.data, i)
            an = grad.ravel()[i]
            assert rel_err(fd, an) <= 1e-3 or abs(fd - an) < 1e-8, \
                f"{name}[{i}]: fd={fd} analytic={an}"
