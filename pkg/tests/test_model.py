import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twafl.model import (
    Batch, LayerDesc, ModelSpec, UnsupportedSpecError, accuracy, client_sgd, dense_spec,
    forward, har_lstm_spec, init_params, loss, loss_and_grad, mnist_cnn_spec, param_count,
    zeros_params,
)
from twafl.params import LayeredParams, StructureError, linear_combine, partition_sizes


def random_batch(rng, n, dim, classes):
    return Batch(rng.normal(size=(n, dim)), rng.integers(0, classes, size=n))


def numeric_grad(spec, params, batch, h=1e-5):
    """Central differences of the forward-pass loss, one element at a time."""
    arrays = [a.copy() for a in params.arrays()]
    out = []
    for a in arrays:
        g = np.zeros(a.size)
        flat = a.reshape(-1)
        for i in range(a.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss(spec, LayeredParams.from_arrays(arrays, params.split_index), batch)
            flat[i] = keep - h
            down = loss(spec, LayeredParams.from_arrays(arrays, params.split_index), batch)
            flat[i] = keep
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return np.concatenate(out)


def grads_agree(analytic, numeric, rtol=1e-4, atol=1e-8):
    small = np.abs(numeric) < atol
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-300)
    return bool(np.all(np.where(small, np.abs(analytic - numeric) < 1e-6, rel < rtol)))


def test_init_is_deterministic():
    spec = dense_spec(4, [3], 2)
    a = init_params(spec, np.random.default_rng(5))
    b = init_params(spec, np.random.default_rng(5))
    assert a.equals(b)
    assert not a.equals(init_params(spec, np.random.default_rng(6)))


def test_init_biases_zero_and_split():
    spec = dense_spec(4, [3, 5], 2, split_index=2)
    p = init_params(spec, np.random.default_rng(0))
    for b in p.blocks[1::2]:
        assert np.all(b.values == 0.0)
    assert p.split_index == 4
    assert [b.shape for b in p.blocks] == [(4, 3), (3,), (3, 5), (5,), (5, 2), (2,)]


def test_init_weight_variance():
    spec = dense_spec(1000, [1000], 2)
    w = init_params(spec, np.random.default_rng(11)).blocks[0].values
    assert abs(w.var() / (2 / 1000) - 1) < 0.2
    assert abs(w.mean()) < 0.01


def test_init_rejects_count_only():
    with pytest.raises(UnsupportedSpecError):
        init_params(mnist_cnn_spec(), np.random.default_rng(0))


def test_param_count_table2():
    counts = dict(param_count(mnist_cnn_spec()))
    assert counts["conv2d_1/kernel"] == 800 and counts["conv2d_1/bias"] == 32
    assert counts["dense_2/kernel"] == 5120 and counts["dense_2/bias"] == 10
    assert partition_sizes(zeros_params(mnist_cnn_spec())) == (52096, 529930)


def test_param_count_table3_shapes():
    spec = har_lstm_spec()
    shapes = [s for layer in spec.layers for _, s in layer.param_shapes()]
    assert shapes == [(9, 100), (25, 100), (100,), (25, 100), (25, 100), (100,),
                      (25, 256), (256,), (256, 6), (6,)]


def test_param_count_tiny_dense():
    layer = LayerDesc("dense_trainable", (1, 1), "softmax")
    assert [int(np.prod(s)) for _, s in layer.param_shapes()] == [1, 1]


def test_spec_chain_is_checked():
    with pytest.raises(StructureError):
        ModelSpec((LayerDesc("dense_trainable", (4, 3)), LayerDesc("dense_trainable", (2, 2), "softmax")), 4, 2, 1)
    with pytest.raises(StructureError):
        dense_spec(4, [3], 2, split_index=2)
    with pytest.raises(StructureError):
        ModelSpec((LayerDesc("dense_trainable", (4, 3)), LayerDesc("dense_trainable", (3, 2), "softmax")), 5, 2, 1)


def test_forward_zero_params_uniform(rng):
    spec = dense_spec(4, [3], 5)
    p = linear_combine([(0.0, init_params(spec, rng))])
    probs = forward(spec, p, random_batch(rng, 7, 4, 5))
    assert np.allclose(probs, 1 / 5, atol=0, rtol=1e-15)


def test_forward_rows_normalised(rng):
    spec = dense_spec(6, [8, 4], 3)
    probs = forward(spec, init_params(spec, rng), random_batch(rng, 20, 6, 3))
    assert np.all(np.abs(probs.sum(axis=1) - 1) < 1e-12)


def test_forward_matches_hand_computation():
    spec = dense_spec(2, [2], 2)
    p = LayeredParams.from_arrays(
        [np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.0, 0.5]),
         np.array([[1.0, 0.0], [-1.0, 1.0]]), np.array([0.1, -0.1])], 2)
    batch = Batch(np.array([[1.0, 2.0], [-1.0, 0.5]]), [0, 1])
    # hidden: [2, 3.5] and relu([-0.75, 2.5]); logits [-1.4, 3.4] and [-2.4, 2.4]
    p0 = 1 / (1 + math.exp(4.8))
    expected = np.array([[p0, 1 - p0], [p0, 1 - p0]])
    assert np.allclose(forward(spec, p, batch), expected, rtol=1e-14, atol=0)
    assert loss(spec, p, batch) == pytest.approx(-(math.log(p0) + math.log(1 - p0)) / 2, rel=1e-13)


def test_forward_shape_mismatch(rng):
    spec = dense_spec(4, [3], 2)
    with pytest.raises(StructureError):
        forward(spec, init_params(spec, rng), random_batch(rng, 3, 5, 2))
    other = init_params(dense_spec(4, [6], 2), rng)
    with pytest.raises(StructureError):
        forward(spec, other, random_batch(rng, 3, 4, 2))


def test_loss_zero_params_is_log_classes(rng):
    spec = dense_spec(4, [3], 6)
    p = linear_combine([(0.0, init_params(spec, rng))])
    value, grads = loss_and_grad(spec, p, random_batch(rng, 9, 4, 6))
    assert abs(value - math.log(6)) < 1e-9
    assert grads.layout() == p.layout() and grads.split_index == p.split_index


def test_loss_rejects_bad_labels(rng):
    spec = dense_spec(4, [3], 2)
    with pytest.raises(StructureError):
        loss_and_grad(spec, init_params(spec, rng), Batch(np.zeros((1, 4)), [2]))


def test_gradient_matches_finite_differences(rng):
    spec = dense_spec(4, [3], 2)
    p = init_params(spec, rng)
    noise = LayeredParams.from_arrays([rng.normal(size=b.shape) for b in p.blocks],
                                      p.split_index, [b.layer_id for b in p.blocks])
    p = linear_combine([(1.0, p), (0.1, noise)])
    batch = random_batch(rng, 5, 4, 2)
    _, g = loss_and_grad(spec, p, batch)
    assert grads_agree(g.vector(), numeric_grad(spec, p, batch))


def test_duplicated_batch_is_invariant(rng):
    spec = dense_spec(4, [3], 3)
    p = init_params(spec, rng)
    batch = random_batch(rng, 6, 4, 3)
    twice = Batch(np.vstack([batch.features, batch.features]), np.concatenate([batch.labels] * 2))
    l1, g1 = loss_and_grad(spec, p, batch)
    l2, g2 = loss_and_grad(spec, p, twice)
    assert abs(l1 - l2) < 1e-12
    assert np.max(np.abs(g1.vector() - g2.vector())) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8), scale=st.floats(0.1, 20))
def test_loss_is_non_negative_and_pure(seed, n, scale):
    rng = np.random.default_rng(seed)
    spec = dense_spec(3, [4], 3)
    p = linear_combine([(scale, init_params(spec, rng))])
    batch = random_batch(rng, n, 3, 3)
    first = loss_and_grad(spec, p, batch)
    second = loss_and_grad(spec, p, batch)
    assert first[0] >= 0
    assert first[0] == second[0] and first[1].equals(second[1])
    assert np.array_equal(forward(spec, p, batch), forward(spec, p, batch))


def test_sgd_zero_step_is_identity(rng):
    spec = dense_spec(4, [3], 2)
    p = init_params(spec, rng)
    data = random_batch(rng, 10, 4, 2)
    assert client_sgd(spec, p, data, B=10, E=1, eta=0.0, rng=rng).equals(p)


def test_sgd_single_batch_is_one_gradient_step(rng):
    spec = dense_spec(4, [3], 2)
    p = init_params(spec, rng)
    data = random_batch(rng, 10, 4, 2)
    _, g = loss_and_grad(spec, p, data)
    expected = linear_combine([(1.0, p), (-0.3, g)])
    got = client_sgd(spec, p, data, B=10, E=1, eta=0.3, rng=np.random.default_rng(0))
    assert got.max_abs_diff(expected) < 1e-12


def test_sgd_keeps_short_last_batch(rng):
    spec = dense_spec(2, [2], 2)
    p = init_params(spec, rng)
    data = random_batch(rng, 5, 2, 2)
    # reference: shuffle with the same stream, batches of 2, 2, 1
    order = np.random.default_rng(9).permutation(5)
    ref = p
    for start in (0, 2, 4):
        idx = order[start:start + 2]
        _, g = loss_and_grad(spec, ref, Batch(data.features[idx], data.labels[idx]))
        ref = linear_combine([(1.0, ref), (-0.2, g)])
    got = client_sgd(spec, p, data, B=2, E=1, eta=0.2, rng=np.random.default_rng(9))
    assert got.max_abs_diff(ref) < 1e-12


def test_sgd_deterministic_and_pure(rng):
    spec = dense_spec(4, [3], 2)
    p = init_params(spec, rng)
    snapshot = p.vector().copy()
    data = random_batch(rng, 23, 4, 2)
    a = client_sgd(spec, p, data, 4, 3, 0.1, np.random.default_rng(42))
    b = client_sgd(spec, p, data, 4, 3, 0.1, np.random.default_rng(42))
    assert a.equals(b)
    assert np.array_equal(p.vector(), snapshot)


def test_sgd_errors(rng):
    spec = dense_spec(4, [3], 2)
    p = init_params(spec, rng)
    with pytest.raises(ValueError):
        client_sgd(spec, p, Batch(np.zeros((0, 4)), []), 4, 1, 0.1, rng)
    with pytest.raises(ValueError):
        client_sgd(spec, p, random_batch(rng, 3, 4, 2), 0, 1, 0.1, rng)


def test_sgd_learns_separable_problem():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    spec = dense_spec(2, [8], 2)
    data = Batch(x, y)
    p = client_sgd(spec, init_params(spec, rng), data, B=16, E=40, eta=0.2, rng=rng)
    assert accuracy(spec, p, data) > 0.95
