import numpy as np
import pytest

from bouncelab import nnet
from bouncelab.core import rng_stream

from conftest import central_diff, rel_error


def test_dense_identity():
    rng = rng_stream(0)
    layer = nnet.Dense(3, 3, rng)
    layer.weight = np.eye(3)
    layer.bias = np.zeros(3)
    x = rng.standard_normal((5, 3))
    assert np.array_equal(layer.forward(x), x)


def test_relu_values():
    r = nnet.Relu()
    out = r.forward(np.array([[-3.0, 2.0, 0.0]]))
    assert np.array_equal(out, [[0.0, 2.0, 0.0]])


def test_l2_normalize_value():
    n = nnet.L2Normalize()
    out = n.forward(np.array([[3.0, 4.0]]))
    assert np.allclose(out, [[0.6, 0.8]], atol=1e-15)
    with pytest.raises(ValueError):
        n.forward(np.array([[0.0, 0.0]]))


def test_l2_normalize_output_norm():
    rng = rng_stream(3)
    x = rng.standard_normal((50, 7)) * 10
    out = nnet.L2Normalize().forward(x)
    assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 1e-12


def test_maxpool_forward_and_routing():
    pool = nnet.MaxPoolSet()
    x = np.array([[[1.0, 5.0], [3.0, 2.0], [2.0, 5.0]]])  # tie in column 1
    out = pool.forward(x)
    assert np.array_equal(out, [[3.0, 5.0]])
    grad = pool.backward(np.array([[1.0, 1.0]]))
    expect = np.zeros_like(x)
    expect[0, 1, 0] = 1.0  # argmax row for feature 0
    expect[0, 0, 1] = 1.0  # first of the tied rows for feature 1
    assert np.array_equal(grad, expect)


def test_backward_before_forward_raises():
    layer = nnet.Dense(2, 2, rng_stream(0))
    with pytest.raises(RuntimeError):
        layer.backward(np.zeros((1, 2)))


def test_scalar_chain_matches_hand_formula():
    # f(x) = relu(w x + b), single unit
    rng = rng_stream(7)
    layer = nnet.Dense(1, 1, rng)
    layer.weight[:] = 2.0
    layer.bias[:] = 1.0
    net = nnet.Sequential(layer, nnet.Relu())
    x = np.array([[3.0]])
    y = net.forward(x)
    assert y[0, 0] == 7.0
    nnet.zero_grads(net)
    gx = net.backward(np.ones((1, 1)))
    assert gx[0, 0] == 2.0           # df/dx = w
    assert layer.grad_weight[0, 0] == 3.0  # df/dw = x
    assert layer.grad_bias[0] == 1.0


def _net_loss(net, x, w_target):
    out = net.forward(x)
    return float(np.sum(out * w_target))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_three_layer_net_gradients_match_fd(seed):
    rng = rng_stream(seed, "fdnet")
    net = nnet.Sequential(
        nnet.Dense(4, 6, rng), nnet.Relu(),
        nnet.Dense(6, 5, rng), nnet.Relu(),
        nnet.Dense(5, 3, rng), nnet.L2Normalize(),
    )
    x = rng.standard_normal((3, 4))
    w_target = rng.standard_normal((3, 3))

    nnet.zero_grads(net)
    net.forward(x)
    net.backward(w_target)
    analytic = [g.copy() for g in net.gradients()]

    for p, g in zip(net.parameters(), analytic):
        numeric = central_diff(lambda _: _net_loss(net, x, w_target), p)
        assert rel_error(g, numeric) < 1e-6


def test_input_gradient_matches_fd(rng):
    net = nnet.Sequential(nnet.Dense(3, 4, rng), nnet.Relu(), nnet.Dense(4, 2, rng))
    x = rng.standard_normal((2, 3))
    w = rng.standard_normal((2, 2))
    net.forward(x)
    gx = net.backward(w)
    numeric = central_diff(lambda xv: _net_loss(net, xv, w), x.copy())
    assert rel_error(gx, numeric) < 1e-6


def test_maxpool_gradient_matches_fd(rng):
    pool = nnet.MaxPoolSet()
    x = rng.standard_normal((2, 5, 3))
    w = rng.standard_normal((2, 3))
    pool.forward(x)
    gx = pool.backward(w)
    numeric = central_diff(lambda xv: float(np.sum(pool.forward(xv) * w)), x.copy())
    assert rel_error(gx, numeric) < 1e-6


def test_adam_first_step_hand_check():
    p = np.array([1.0])
    opt = nnet.Adam([p], lr=0.1)
    opt.step([np.array([1.0])])
    # bias-corrected first step: delta = -lr * 1 / (1 + eps)
    assert p[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)


def test_adam_zero_grad_no_decay_is_noop():
    p = np.array([1.0, -2.0])
    before = p.copy()
    opt = nnet.Adam([p], lr=0.1, weight_decay=0.0)
    opt.step([np.zeros(2)])
    assert np.array_equal(p, before)


def test_adam_deterministic():
    def run():
        rng = rng_stream(5)
        p = rng.standard_normal(4)
        opt = nnet.Adam([p], lr=0.01, weight_decay=5e-4)
        for i in range(20):
            opt.step([np.sin(p + i)])
        return p

    assert np.array_equal(run(), run())


def test_adam_decoupled_differs_from_coupled():
    p1, p2 = np.array([1.0]), np.array([1.0])
    nnet.Adam([p1], lr=0.1, weight_decay=0.1, decoupled=False).step([np.array([0.5])])
    nnet.Adam([p2], lr=0.1, weight_decay=0.1, decoupled=True).step([np.array([0.5])])
    assert p1[0] != p2[0]


def test_mse_values_and_grad(rng):
    assert nnet.mse([1.0, 0.0], [0.0, 0.0]) == 1.0
    a = rng.standard_normal(6)
    assert nnet.mse(a, a) == 0.0
    b = rng.standard_normal(6)
    numeric = central_diff(lambda av: nnet.mse(av, b), a.copy())
    assert rel_error(nnet.mse_grad(a, b), numeric) < 1e-6
    with pytest.raises(ValueError):
        nnet.mse(np.zeros(3), np.zeros(4))


def _unit(v):
    return v / np.linalg.norm(v)


def test_triplet_loss_values():
    e = np.eye(4)
    # t_p == t_o, orthogonal negatives, margin 0.5 -> max(0 - 1 + 0.5, 0) = 0
    assert nnet.triplet_cosine_loss(e[0], e[0], e[1:3], 0.5) == 0.0
    # everything identical -> margin
    assert nnet.triplet_cosine_loss(e[0], e[0], e[:1], 0.5) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        nnet.triplet_cosine_loss(e[0], e[0], np.zeros((0, 4)), 0.5)


def test_triplet_loss_grad_matches_fd(rng):
    t_p = _unit(rng.standard_normal(6))
    t_o = _unit(rng.standard_normal(6))
    neg = np.stack([_unit(rng.standard_normal(6)) for _ in range(4)])
    margin = 0.5
    value, g_tp, g_to, g_neg = nnet.triplet_cosine_loss_grad(t_p, t_o, neg, margin)
    assert value > 0
    for arr, g in [(t_p, g_tp), (t_o, g_to), (neg, g_neg)]:
        def f(x, arr=arr):
            subs = {id(t_p): t_p, id(t_o): t_o, id(neg): neg}
            subs[id(arr)] = x
            return nnet.triplet_cosine_loss(subs[id(t_p)], subs[id(t_o)], subs[id(neg)], margin)
        assert rel_error(g, central_diff(f, arr.copy())) < 1e-6


def test_batch_triplet_matches_single_and_fd(rng):
    b, e = 5, 8
    t_p = np.stack([_unit(rng.standard_normal(e)) for _ in range(b)])
    t_o = np.stack([_unit(rng.standard_normal(e)) for _ in range(b)])
    margin = 0.5
    loss, g_tp, g_to = nnet.batch_triplet_cosine_loss(t_p, t_o, margin)

    # matches the mean of per-sample single-anchor losses
    singles = [
        nnet.triplet_cosine_loss(t_p[j], t_o[j], np.delete(t_o, j, axis=0), margin)
        for j in range(b)
    ]
    assert loss == pytest.approx(np.mean(singles), rel=1e-12)

    numeric_tp = central_diff(
        lambda x: nnet.batch_triplet_cosine_loss(x, t_o, margin)[0], t_p.copy())
    numeric_to = central_diff(
        lambda x: nnet.batch_triplet_cosine_loss(t_p, x, margin)[0], t_o.copy())
    assert rel_error(g_tp, numeric_tp) < 1e-6
    assert rel_error(g_to, numeric_to) < 1e-6

    with pytest.raises(ValueError):
        nnet.batch_triplet_cosine_loss(t_p[:1], t_o[:1], margin)


def test_dense_shape_mismatch():
    layer = nnet.Dense(3, 2, rng_stream(0))
    with pytest.raises(ValueError):
        layer.forward(np.zeros((4, 5)))
