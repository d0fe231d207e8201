import numpy as np
import pytest

from maxkgnn.cbsr import densify
from maxkgnn.datasets import sbm_dataset
from maxkgnn.errors import DivergenceError, StateError
from maxkgnn.gnn import (
    LinearLayer,
    MaxkGnnLayer,
    MlpApproxModel,
    TrainConfig,
    approx_demo,
    build_gnn,
    sigmoid_bce,
    softmax_cross_entropy,
    train_full_batch,
)
from maxkgnn.graph import add_self_loops, from_coo, identity, normalize

from .conftest import layer_gradcheck, maxk_layer_instance, random_graph, sort_oracle_topk


def dense_pipeline(g, x, weight, bias, k):
    y = x @ weight + bias
    h = np.zeros_like(y)
    for r in range(y.shape[0]):
        idx = sort_oracle_topk(y[r].tolist(), k)
        h[r, idx] = y[r, idx]
    return g.to_dense() @ h


def test_forward_matches_dense_pipeline(rng):
    for _ in range(20):
        layer, g, x, _ = maxk_layer_instance(rng, n=int(rng.integers(2, 30)), k=int(rng.integers(1, 9)))
        out = layer.forward(g, x)
        ref = dense_pipeline(g, x, layer.linear.weight, layer.linear.bias, layer.k)
        assert np.abs(out - ref).max() <= 1e-5


def test_float32_forward_matches_dense_pipeline(rng):
    g = normalize(add_self_loops(random_graph(rng, 25, 0.2, weighted=False)), "symmetric")
    layer = MaxkGnnLayer(LinearLayer.init(6, 16, rng), k=4)
    x = rng.standard_normal((25, 6)).astype(np.float32)
    out = layer.forward(g, x)
    ref = dense_pipeline(g, x.astype(np.float64), layer.linear.weight.astype(np.float64), 0.0, 4)
    assert np.abs(out - ref).max() <= 1e-5


def test_full_k_identity_graph_is_linear(rng):
    layer = MaxkGnnLayer(LinearLayer.init(4, 6, rng, np.float64), k=6)
    x = rng.standard_normal((9, 4))
    np.testing.assert_array_equal(layer.forward(identity(9).astype(np.float64), x), layer.linear.forward(x))


def test_zero_input_zero_bias_gives_zero(rng):
    layer, g, x, _ = maxk_layer_instance(rng)
    layer.linear.bias[:] = 0
    assert not layer.forward(g, np.zeros_like(x)).any()


def test_gradients_match_central_differences(rng):
    layer, g, x, upstream = maxk_layer_instance(rng)
    assert layer_gradcheck(layer, g, x, upstream) <= 1e-3


@pytest.mark.parametrize("nonlinearity", ["relu", "none"])
def test_baseline_gradients(rng, nonlinearity):
    layer, g, x, upstream = maxk_layer_instance(rng)
    layer.nonlinearity = nonlinearity
    assert layer_gradcheck(layer, g, x, upstream) <= 1e-3


def test_two_layer_model_gradients(rng):
    g = normalize(add_self_loops(random_graph(rng, 10, 0.3, weighted=False)), "mean").astype(np.float64)
    model = build_gnn(4, 8, 3, k=3, dtype=np.float64, seed=1)
    x = rng.standard_normal((10, 4))
    labels = rng.integers(0, 3, 10)
    mask = np.ones(10, bool)

    def loss():
        return softmax_cross_entropy(model.forward(g, x), labels, mask)[0]

    model.zero_grad()
    _, grad = softmax_cross_entropy(model.forward(g, x), labels, mask)
    model.backward(g, grad)
    for p, gp in model.parameters():
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + 1e-4
            up = loss()
            p[idx] = keep - 1e-4
            down = loss()
            p[idx] = keep
            num = (up - down) / 2e-4
            assert abs(num - gp[idx]) <= 1e-3 * max(abs(num), abs(gp[idx]), 1e-6)


def test_zero_upstream_gives_zero_gradients(rng):
    layer, g, x, upstream = maxk_layer_instance(rng)
    layer.forward(g, x)
    dx = layer.backward(g, np.zeros_like(upstream))
    assert not dx.any()
    assert all(not grad.any() for _, grad in layer.parameters())


def test_identity_full_k_gradients_equal_linear(rng):
    g = identity(7).astype(np.float64)
    layer = MaxkGnnLayer(LinearLayer.init(3, 5, rng, np.float64), k=5)
    plain = LinearLayer(layer.linear.weight.copy(), layer.linear.bias.copy())
    x = rng.standard_normal((7, 3))
    up = rng.standard_normal((7, 5))
    layer.forward(g, x)
    plain.forward(x)
    np.testing.assert_array_equal(layer.backward(g, up), plain.backward(up))
    for (_, a), (_, b) in zip(layer.parameters(), plain.parameters()):
        np.testing.assert_array_equal(a, b)


def test_full_k_equals_no_nonlinearity(rng):
    _, g, x, up = maxk_layer_instance(rng, f_out=6)
    weight = rng.standard_normal((5, 6))
    maxk = MaxkGnnLayer(LinearLayer(weight.copy()), k=6)
    none = MaxkGnnLayer(LinearLayer(weight.copy()), nonlinearity="none")
    np.testing.assert_allclose(maxk.forward(g, x), none.forward(g, x), rtol=0, atol=1e-12)
    np.testing.assert_allclose(maxk.backward(g, up), none.backward(g, up), rtol=0, atol=1e-12)
    np.testing.assert_allclose(maxk.linear.grad_weight, none.linear.grad_weight, rtol=0, atol=1e-12)


def test_backward_requires_forward(rng):
    layer, g, _, up = maxk_layer_instance(rng)
    with pytest.raises(StateError):
        layer.backward(g, up)


def test_selection_pattern_is_cached(rng):
    layer, g, x, _ = maxk_layer_instance(rng)
    layer.forward(g, x)
    assert layer.pattern.num_rows == 12 and layer.pattern.dim_k == 3
    dense = densify(layer.pattern)
    assert (np.count_nonzero(dense, axis=1) <= 3).all()


def test_losses_gradients(rng):
    logits = rng.standard_normal((6, 3))
    mask = np.array([1, 1, 0, 1, 1, 0], bool)
    for fn, target in (
        (softmax_cross_entropy, rng.integers(0, 3, 6)),
        (sigmoid_bce, (rng.random((6, 3)) < 0.5).astype(float)),
    ):
        _, grad = fn(logits, target, mask)
        assert not grad[~mask].any()
        for idx in np.ndindex(logits.shape):
            e = np.zeros_like(logits)
            e[idx] = 1e-6
            num = (fn(logits + e, target, mask)[0] - fn(logits - e, target, mask)[0]) / 2e-6
            assert num == pytest.approx(grad[idx], abs=1e-7)


@pytest.fixture(scope="module")
def small_sbm():
    ds = sbm_dataset(200, 4, 0.1, 0.01, feature_dim=16, signal=0.5, seed=3)
    g = normalize(add_self_loops(ds.graph), "symmetric")
    return ds, g


def test_lr_zero_is_fixed_point(small_sbm):
    ds, g = small_sbm
    model = build_gnn(16, 16, 4, k=4, seed=0)
    before = model.state()
    log = train_full_batch(model, g, ds.features, ds.labels, TrainConfig(epochs=5, lr=0.0), ds.train_mask)
    for a, b in zip(before, model.state()):
        np.testing.assert_array_equal(a, b)
    assert len(set(log.losses().tolist())) == 1


def test_epochs_zero_logs_one_row(small_sbm):
    ds, g = small_sbm
    log = train_full_batch(build_gnn(16, 16, 4, k=4), g, ds.features, ds.labels, TrainConfig(epochs=0))
    assert [r.epoch for r in log.records] == [0]


def test_training_reduces_loss_and_is_deterministic(small_sbm):
    ds, g = small_sbm

    def run():
        model = build_gnn(16, 32, 4, k=4, seed=5)
        log = train_full_batch(model, g, ds.features, ds.labels, TrainConfig(epochs=30, lr=0.1), ds.train_mask)
        return log

    a, b = run(), run()
    assert a.to_csv(include_timing=False) == b.to_csv(include_timing=False)
    assert a.final.loss < a.records[0].loss
    assert a.final.train_acc > 0.8


def test_bce_training_runs(small_sbm):
    ds, g = small_sbm
    onehot = np.eye(4)[ds.labels]
    log = train_full_batch(
        build_gnn(16, 16, 4, k=4), g, ds.features, onehot, TrainConfig(epochs=10, lr=0.1, loss="bce")
    )
    assert log.final.loss < log.records[0].loss


def test_divergence_raises(small_sbm):
    ds, g = small_sbm
    model = build_gnn(16, 16, 4, k=4)
    with pytest.raises(DivergenceError):
        train_full_batch(model, g, ds.features * 1e30, ds.labels, TrainConfig(epochs=3, lr=1e10))


def test_csv_log_columns(small_sbm):
    ds, g = small_sbm
    log = train_full_batch(build_gnn(16, 8, 4, k=2), g, ds.features, ds.labels, TrainConfig(epochs=2))
    lines = [line for line in log.to_csv().splitlines() if not line.startswith("#")]
    assert lines[0] == "epoch,loss,train_acc,val_acc,epoch_seconds"
    assert len(lines) == 4


def test_approx_zero_target(rng):
    m = MlpApproxModel(1, 16, 1, 4, rng)
    m.readout.weight[:] = 0
    assert not m.forward(np.linspace(-1, 1, 11)[:, None]).any()
    for _, mse in approx_demo("zero", (4, 16), epochs=3000):
        assert mse < 1e-5


def test_approx_model_uses_ceil_rule(rng):
    m = MlpApproxModel(1, 10, 1, 3, rng)
    m.forward(np.linspace(-1, 1, 7)[:, None])
    assert (m._mask.sum(axis=1) == 3).all()


def test_approx_gradients(rng):
    m = MlpApproxModel(2, 12, 1, 3, rng)
    x = rng.standard_normal((9, 2))
    m.zero_grad()
    m.forward(x)
    m.backward(np.ones((9, 1)))
    for p, gp in m.parameters():
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + 1e-6
            up = m.forward(x).sum()
            p[idx] = keep - 1e-6
            down = m.forward(x).sum()
            p[idx] = keep
            assert (up - down) / 2e-6 == pytest.approx(gp[idx], rel=1e-5, abs=1e-7)


def test_isolated_nodes_train(rng):
    g = from_coo(6, [0, 1], [1, 0])
    model = build_gnn(3, 4, 2, k=2)
    x = rng.standard_normal((6, 3)).astype(np.float32)
    log = train_full_batch(model, normalize(g, "symmetric"), x, np.array([0, 1, 0, 1, 0, 1]), TrainConfig(epochs=3))
    assert np.isfinite(log.losses()).all()
