import numpy as np
import pytest

from sonet import autodiff as ad
from sonet.autodiff import BatchNormState, Tape, Tensor, gradcheck
from sonet.errors import ShapeMismatchError
from sonet.grouping import Groups

TOL = 1e-4


def _proj(y, R):
    """Scalar <y, R> built from recorded ops, so every output entry gets a distinct weight."""
    flat = ad.reshape(y, (1, -1))
    return ad.sum_all(ad.dense(flat, Tensor(R.reshape(-1, 1)), Tensor(np.zeros(1))))


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _check(f_out, params, out_shape, rng):
    R = rng.normal(size=out_shape)
    return gradcheck(lambda: _proj(f_out(), R), params)


def test_dense_identity():
    x = np.arange(6.0).reshape(2, 3)
    y = ad.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x)


def test_dense_hand_example():
    x, W, b = (Tensor([[2.0]], True), Tensor([[3.0]], True), Tensor([1.0], True))
    with Tape() as tape:
        y = ad.dense(x, W, b)
    assert y.data[0, 0] == 7
    tape.backward(y)
    assert W.grad[0, 0] == 2 and x.grad[0, 0] == 3 and b.grad[0] == 1


def test_dense_shape_error():
    with pytest.raises(ShapeMismatchError):
        ad.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(5))
def test_dense_gradcheck(seed):
    rng = np.random.default_rng(seed)
    b_, fi, fo = rng.integers(1, 6, 3)
    x, W, b = _param(rng, b_, fi), _param(rng, fi, fo), _param(rng, fo)
    assert _check(lambda: ad.dense(x, W, b), [x, W, b], (b_, fo), rng) <= TOL


def test_relu_examples():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = Tensor(-np.ones((2, 3)), True)
    with Tape() as tape:
        y = ad.sum_all(ad.relu(x))
    tape.backward(y)
    assert y.data == 0 and np.all(x.grad == 0)


@pytest.mark.parametrize("seed", range(5))
def test_relu_gradcheck(seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(4, 5))
    data[np.abs(data) < 1e-3] = 0.5
    x = Tensor(data, True)
    assert _check(lambda: ad.relu(x), [x], (4, 5), rng) <= TOL


def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(3, 2, (64, 5)))
    y = ad.batchnorm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), BatchNormState.create(5), True)
    assert np.abs(y.data.mean(axis=0)).max() < 1e-6
    # eps=1e-5 shrinks the variance slightly below 1
    assert np.abs(y.data.var(axis=0) - 1).max() < 1e-4


def test_batchnorm_constant_column_gives_beta():
    x = np.ones((8, 2))
    x[:, 1] = np.arange(8)
    beta = np.array([0.7, 0.0])
    y = ad.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(beta), BatchNormState.create(2), True)
    np.testing.assert_allclose(y.data[:, 0], 0.7, atol=1e-12)


def test_batchnorm_running_stats_and_eval():
    rng = np.random.default_rng(1)
    x = rng.normal(2, 3, (10, 3))
    st = BatchNormState.create(3)
    ad.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st, True)
    np.testing.assert_allclose(st.running_mean, 0.1 * x.mean(0))
    np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * x.var(0, ddof=1))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    y = ad.batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), st, False)
    np.testing.assert_allclose(y.data, (x - st.running_mean) / np.sqrt(st.running_var + 1e-5) * gamma + beta)
    y2 = ad.batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), st, False)
    np.testing.assert_array_equal(y.data, y2.data)


def test_batchnorm_rejects_single_row():
    with pytest.raises(ValueError):
        ad.batchnorm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormState.create(3), True)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradcheck(seed, train):
    rng = np.random.default_rng(seed)
    x, g, b = _param(rng, 6, 4), _param(rng, 4), _param(rng, 4)
    st = BatchNormState(rng.normal(size=4), rng.uniform(0.5, 2, 4))
    assert _check(lambda: ad.batchnorm(x, g, b, st, train), [x, g, b], (6, 4), rng) <= TOL


@pytest.mark.parametrize("seed", range(5))
def test_batchnorm_4d_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _param(rng, 2, 3, 2, 2), _param(rng, 3), _param(rng, 3)
    st = BatchNormState.create(3)
    assert _check(lambda: ad.batchnorm(x, g, b, st, True), [x, g, b], (2, 3, 2, 2), rng) <= TOL


def _conv_oracle(x, K, b):
    B, C, H, W = x.shape
    O, _, kh, kw = K.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.zeros((B, O, H, W))
    for n in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    out[n, o, i, j] = np.sum(xp[n, :, i : i + kh, j : j + kw] * K[o]) + b[o]
    return out


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4, 5))
    K = np.zeros((3, 3, 3, 3))
    for c in range(3):
        K[c, c, 1, 1] = 1
    np.testing.assert_array_equal(ad.conv2d_3x3(Tensor(x), Tensor(K), Tensor(np.zeros(3))).data, x)


def test_conv_single_pixel_padding():
    y = ad.conv2d_3x3(Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert y.shape == (1, 1, 1, 1) and y.data.item() == 2


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x, K, b = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    np.testing.assert_allclose(ad.conv2d_3x3(Tensor(x), Tensor(K), Tensor(b)).data, _conv_oracle(x, K, b), atol=1e-12)
    K1 = rng.normal(size=(2, 3, 1, 1))
    np.testing.assert_allclose(
        ad.conv2d_1x1(Tensor(x), Tensor(K1), Tensor(b[:2])).data, _conv_oracle(x, K1, b[:2]), atol=1e-12
    )


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatchError):
        ad.conv2d_3x3(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeMismatchError):
        ad.conv2d_1x1(Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("ksize", [1, 3])
def test_conv_gradcheck(seed, ksize):
    rng = np.random.default_rng(seed)
    B, C, O, H, W = 2, int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x, K, b = _param(rng, B, C, H, W), _param(rng, O, C, ksize, ksize), _param(rng, O)
    assert _check(lambda: ad.conv2d(x, K, b), [x, K, b], (B, O, H, W), rng) <= TOL


def test_upsample_examples():
    y = ad.upsample_nn_2x(Tensor([[[[3.5]]]]))
    np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 3.5))
    x = Tensor(np.ones((1, 2, 3, 2)), True)
    with Tape() as tape:
        y = ad.upsample_nn_2x(x)
    tape.backward(y, np.ones(y.shape))
    np.testing.assert_array_equal(x.grad, 4.0)


@pytest.mark.parametrize("seed", range(5))
def test_upsample_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, 1, 2, 2, 3)
    assert _check(lambda: ad.upsample_nn_2x(x), [x], (1, 2, 4, 6), rng) <= TOL


@pytest.mark.parametrize("seed", range(5))
def test_concat_gather_reshape_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = _param(rng, 4, 2), _param(rng, 4, 3)
    idx = rng.integers(0, 4, 7)

    def f():
        c = ad.concat([a, b], axis=-1)
        g = ad.gather_rows(c, idx)
        return ad.transpose(ad.reshape(g, (7, 5, 1)), (2, 0, 1))

    assert _check(f, [a, b], (1, 7, 5), rng) <= TOL


@pytest.mark.parametrize("seed", range(5))
def test_group_max_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, 12, 3)
    groups = Groups.from_owner(rng.integers(0, 5, 12), 6)
    assert _check(lambda: ad.group_max(x, groups), [x], (6, 3), rng) <= TOL


def test_group_mean_examples():
    y = ad.group_mean(Tensor([[1.0, 3.0], [3.0, 5.0]]), [[0, 1]])
    np.testing.assert_array_equal(y.data, [[2, 4]])
    y = ad.group_mean(Tensor([[1.0, 3.0]]), [[0], []])
    np.testing.assert_array_equal(y.data[1], [0, 0])


@pytest.mark.parametrize("seed", range(5))
def test_group_mean_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, 10, 3)
    groups = Groups.from_owner(rng.integers(0, 4, 10), 5)
    assert _check(lambda: ad.group_mean(x, groups), [x], (5, 3), rng) <= TOL


def test_dropout_behaviour():
    x = Tensor(np.ones((100, 100)))
    assert ad.dropout(x, 1.0, np.random.default_rng(0)) is x
    assert ad.dropout(x, 0.4, np.random.default_rng(0), train=False) is x
    a = ad.dropout(x, 0.4, np.random.default_rng(5)).data
    b = ad.dropout(x, 0.4, np.random.default_rng(5)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1 / 0.4}
    assert abs(a.mean() - 1) < 0.05
    with pytest.raises(ValueError):
        ad.dropout(x, 0.0, np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(5))
def test_dropout_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, 4, 4)
    R = rng.normal(size=(4, 4))
    assert gradcheck(lambda: _proj(ad.dropout(x, 0.5, np.random.default_rng(seed)), R), [x]) <= TOL


def test_softmax_cross_entropy_examples():
    loss = ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert float(loss.data) == pytest.approx(np.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [2])
    big = ad.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
    assert np.isfinite(big.data) and float(big.data) == pytest.approx(0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_cross_entropy_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, 5, 4, scale=2)
    labels = rng.integers(0, 4, 5)
    assert gradcheck(lambda: ad.softmax_cross_entropy(x, labels), [x]) <= TOL


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = _param(rng, 3, 4), _param(rng, 4)

    def f():
        return ad.mean_all(ad.scale(a + b, 2.5)) + ad.sum_all(ad.getitem(a, (slice(1, 3), 2)))

    assert gradcheck(f, [a, b]) <= TOL


def test_gradcheck_quadratic():
    x = Tensor(np.array([3.0]), True)

    def f():
        return _square(x)

    with Tape() as tape:
        y = f()
    tape.backward(y)
    assert x.grad[0] == pytest.approx(6, abs=1e-12)
    assert gradcheck(f, [x]) < 1e-9


def _square(x):
    # x^2 via dense(x, x): the weight is the input itself
    m = ad.reshape(x, (1, 1))
    return ad.sum_all(ad.dense(m, m, Tensor(np.zeros(1))))


@pytest.mark.parametrize("seed", range(5))
def test_composite_dense_relu_bn_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x, W, b = _param(rng, 8, 3), _param(rng, 3, 4), _param(rng, 4)
    g, beta = Tensor(rng.uniform(0.5, 1.5, 4), True), _param(rng, 4)
    st = BatchNormState.create(4)
    f = lambda: ad.relu(ad.batchnorm(ad.dense(x, W, b), g, beta, st, True))  # noqa: E731
    assert _check(f, [x, W, b, g, beta], (8, 4), rng) <= TOL


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([[1.0, 2.0]]), True)
    with Tape() as tape:
        y = ad.sum_all(x + x)
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[2, 2]])


def test_no_tape_no_record():
    x = Tensor(np.ones(3), True)
    y = ad.relu(x)
    assert y.node_id is None and not y.requires_grad


def test_tape_order_and_forward_determinism():
    rng = np.random.default_rng(3)
    x, W, b = _param(rng, 5, 3), _param(rng, 3, 2), _param(rng, 2)
    with Tape() as tape:
        h = ad.dense(x, W, b)
        y = ad.sum_all(ad.relu(h))
    assert [rec[0].node_id for rec in tape.records] == list(range(len(tape.records)))
    y2 = ad.sum_all(ad.relu(ad.dense(x, W, b)))
    assert np.array_equal(y.data, y2.data)


def test_debug_mode_catches_nan():
    ad.DEBUG = True
    try:
        with pytest.raises(FloatingPointError):
            ad.scale(Tensor([1.0]), np.inf)
    finally:
        ad.DEBUG = False
