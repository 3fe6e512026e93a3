import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fglleak.errors import FormatError, NumericError, ShapeError
from fglleak.graph import Graph
from fglleak.nn import (
    AdamState,
    GradientBundle,
    ModelParams,
    PoolingDescriptor,
    adam_step,
    average_batch,
    backward_analytic,
    bundle_from_dict,
    bundle_to_dict,
    forward,
    init_params,
    load_params,
    save_params,
    solve_min_norm,
)
from fglleak.verify import (
    finite_difference_grads,
    gradient_mismatch,
    random_gradient_instance,
    random_graph,
    random_params,
)


def test_zero_weights_give_bias_logits():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 4, 3)
    params = ModelParams([np.zeros((3, 5)), np.zeros((5, 5))], np.zeros((3, 5)), np.array([0.5, -1.0, 2.0]),
                         PoolingDescriptor("sum"))
    tr = forward(params, g, label=1)
    np.testing.assert_array_equal(tr.logits, params.bias)
    z = params.bias
    assert tr.loss == pytest.approx(-(z[1] - np.log(np.exp(z).sum())), abs=1e-14)


def test_single_node_sum_pool_is_node_embedding():
    rng = np.random.default_rng(1)
    g = random_graph(rng, 1, 3)
    params = random_params(rng, 3, [4, 4], 2)
    tr = forward(params, g)
    np.testing.assert_array_equal(tr.pooled, tr.activations[-1][0])


def test_forward_matches_scalar_loops():
    rng = np.random.default_rng(2)
    g = random_graph(rng, 5, 3)
    params = random_params(rng, 3, [4, 3], 3, "mean")
    n = g.node_count
    a = g.adjacency + np.eye(n)
    deg = a.sum(axis=1)
    h = g.node_features.tolist()
    for w in params.gcn_weights:
        out = [[0.0] * w.shape[1] for _ in range(n)]
        for i in range(n):
            for j in range(n):
                c = a[i, j] / np.sqrt(deg[i] * deg[j])
                for k in range(w.shape[0]):
                    for m in range(w.shape[1]):
                        out[i][m] += c * h[j][k] * w[k, m]
        h = [[max(v, 0.0) for v in row] for row in out]
    pooled = [sum(h[i][m] for i in range(n)) / n for m in range(len(h[0]))]
    logits = [sum(params.fc[c, m] * pooled[m] for m in range(len(pooled))) + params.bias[c]
              for c in range(params.classes)]
    loss = -logits[g.label] + np.log(sum(np.exp(z) for z in logits))
    assert forward(params, g).loss == pytest.approx(loss, abs=1e-12)


def test_bias_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(3)
    params, g = random_gradient_instance(rng)
    tr = forward(params, g)
    expected = tr.probs.copy()
    expected[g.label] -= 1
    np.testing.assert_allclose(backward_analytic(tr, params, g).grad_b, expected, atol=1e-15)


def test_dead_relus_zero_all_gcn_grads():
    rng = np.random.default_rng(4)
    g = Graph(np.abs(rng.normal(size=(4, 3))) + 0.1, np.zeros((4, 4)), 0)
    params = ModelParams([-np.ones((3, 5)), rng.normal(size=(5, 5))], rng.normal(size=(2, 5)), np.zeros(2),
                         PoolingDescriptor("sum"))
    b = backward_analytic(forward(params, g), params, g)
    assert all(not np.any(w) for w in b.grad_gcn)


@pytest.mark.parametrize("pooling", ["sum", "mean", "max"])
def test_gradients_match_finite_differences(pooling):
    rng = np.random.default_rng(5)
    for _ in range(10):
        params, g = random_gradient_instance(rng, pooling=pooling)
        ok, worst, _ = gradient_mismatch(backward_analytic(forward(params, g), params, g).arrays(),
                                      finite_difference_grads(params, g))
        assert ok, worst


def test_max_pool_close_to_hard_max():
    rng = np.random.default_rng(6)
    h = rng.random((12, 5)) * 3
    soft = PoolingDescriptor("max", 50).pool(h)
    # log-sum-exp overshoots max by at most log(n)/K; with distinct rows it is tighter
    assert np.all(soft >= h.max(axis=0))
    assert np.max(soft - h.max(axis=0)) < np.log(12) / 50
    spaced = np.arange(10.0)[:, None] * np.ones((1, 3))
    assert np.max(PoolingDescriptor("max", 50).pool(spaced) - 9.0) < 1e-3


def test_sum_and_mean_pool_as_matrix():
    h = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(PoolingDescriptor("sum").pool(h), h.sum(axis=0))
    np.testing.assert_allclose(PoolingDescriptor("mean").pool(h), h.mean(axis=0))


def _bundle(rng, shapes=((3, 4), (4, 2))):
    return GradientBundle([rng.normal(size=s) for s in shapes], rng.normal(size=(2, 2)), rng.normal(size=2))


def test_average_batch_examples():
    rng = np.random.default_rng(7)
    b = _bundle(rng)
    np.testing.assert_array_equal(average_batch([b]).flat(), b.flat())
    neg = b.from_flat(-b.flat())
    assert not np.any(average_batch([b, neg]).flat())
    bs = [_bundle(rng) for _ in range(3)]
    avg = average_batch(bs)
    manual = np.zeros_like(bs[0].flat())
    for x in bs:
        manual = manual + x.flat()
    np.testing.assert_allclose(avg.flat(), manual / 3, atol=1e-15)
    assert avg.batch_size == 3
    with pytest.raises(ShapeError):
        average_batch([b, _bundle(rng, ((3, 4), (4, 3)))])


def test_solve_min_norm_examples():
    rng = np.random.default_rng(8)
    b = rng.normal(size=(4, 2))
    np.testing.assert_allclose(solve_min_norm(np.eye(4), b), b)
    np.testing.assert_array_equal(solve_min_norm(np.zeros((4, 3)), b), np.zeros((3, 2)))
    a = rng.normal(size=(8, 3))
    x0 = rng.normal(size=(3, 2))
    np.testing.assert_allclose(solve_min_norm(a, a @ x0), x0, atol=1e-8)
    with pytest.raises(NumericError):
        solve_min_norm(np.array([[np.nan]]), np.ones(1))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.one_of(st.just(0.0), st.floats(0.01, 5), st.floats(-5, -0.01))),
       st.integers(0, 2 ** 31))
def test_min_norm_is_orthogonal_to_null_space(a, seed):
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(a.shape[0], 2))
    x = solve_min_norm(a, b)
    np.testing.assert_allclose(x, np.linalg.pinv(a, rcond=1e-10) @ b, atol=1e-7)
    _, s, vt = np.linalg.svd(a)
    null = vt[np.sum(s > 1e-10 * (s[0] if s.size and s[0] > 0 else 1)):]
    if null.size:
        assert np.abs(null @ x).max() < 1e-7


def test_adam_examples():
    p = [np.array([1.0, -2.0])]
    state = AdamState.zeros_like(p)
    same, _ = adam_step(p, [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(same[0], p[0])
    moved, _ = adam_step(p, [np.array([3.0, -0.5])], state, lr=0.1)
    np.testing.assert_allclose(moved[0] - p[0], [-0.1, 0.1], rtol=1e-6)


def test_adam_quadratic_monotone():
    c = np.array([1.0, -3.0, 2.0])
    x = [np.zeros(3)]
    state = AdamState.zeros_like(x)
    losses = []
    for _ in range(50):
        losses.append(float(np.sum((x[0] - c) ** 2)))
        x, state = adam_step(x, [2 * (x[0] - c)], state, lr=0.05)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    params = init_params(5, [7, 3], 2, 4, rng, PoolingDescriptor("max", 20))
    save_params(params, tmp_path / "m.json")
    back = load_params(tmp_path / "m.json")
    assert back.pooling == params.pooling
    for a, b in zip(params.arrays(), back.arrays()):
        assert a.tobytes() == b.tobytes()
    bundle = _bundle(rng)
    again = bundle_from_dict(json.loads(json.dumps(bundle_to_dict(bundle))))
    assert again.flat().tobytes() == bundle.flat().tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_params(tmp_path / "bad.json")


def test_init_shapes():
    params = init_params(6, 16, 2, 3, np.random.default_rng(0))
    assert params.layers == 2 and params.classes == 3 and params.input_dim == 6 and params.embedding_dim == 16
    with pytest.raises(ShapeError):
        init_params(6, [4], 2, 3, np.random.default_rng(0))
