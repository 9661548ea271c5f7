import numpy as np
import pytest

from weatherunet import autodiff as ad

from gradcheck import REL_TOL, check_op

SEEDS = range(5)


def rand(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


def away_from_kinks(x, gap=0.05):
    # keep ReLU / max-pool inputs away from nondifferentiable points
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def distinct(seed, shape):
    n = int(np.prod(shape))
    vals = np.random.default_rng(seed).permutation(n) * 0.1 - n * 0.05
    return vals.reshape(shape).astype(np.float64)


# -- conv2d ----------------------------------------------------------------

def test_conv_identity_kernel():
    x = rand(0, 2, 3, 5, 4)
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_input_gives_bias():
    b = np.array([0.5, -2.0])
    out = ad.conv2d(ad.Tensor(np.zeros((1, 3, 4, 4))), ad.Tensor(rand(1, 2, 3, 3, 3)), ad.Tensor(b))
    np.testing.assert_array_equal(out.data, np.broadcast_to(b[None, :, None, None], (1, 2, 4, 4)))


def test_conv_matches_direct_loop():
    x, w, b = rand(2, 2, 3, 5, 6), rand(3, 4, 3, 3, 3), rand(4, 4)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 6))
    for n in range(2):
        for f in range(4):
            for i in range(5):
                for j in range(6):
                    ref[n, f, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[f]) + b[f]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((1, 3, 3, 3))), ad.Tensor(np.zeros(1)))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradcheck(seed):
    errs = check_op(ad.conv2d, [rand(seed, 1, 2, 4, 4), rand(seed + 10, 3, 2, 3, 3), rand(seed + 20, 3)], seed)
    assert max(errs) < REL_TOL, errs


@pytest.mark.parametrize("seed", SEEDS)
def test_conv1x1_gradcheck(seed):
    errs = check_op(ad.conv2d, [rand(seed, 2, 3, 2, 3), rand(seed + 1, 2, 3, 1, 1), rand(seed + 2, 2)], seed)
    assert max(errs) < REL_TOL, errs


# -- maxpool / upsample ----------------------------------------------------

def test_maxpool_constant():
    out = ad.maxpool2(ad.Tensor(np.full((1, 2, 4, 6), 3.5)))
    assert out.shape == (1, 2, 2, 3)
    assert np.all(out.data == 3.5)


def test_maxpool_unique_argmax_gradient():
    x = ad.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    out = ad.maxpool2(x)
    assert out.data.item() == 4.0
    ad.backward(ad.tsum(out))
    np.testing.assert_array_equal(x.grad, [[[[0, 0], [0, 1]]]])


def test_maxpool_tie_goes_to_first():
    x = ad.Tensor(np.array([[[[5.0, 5.0], [0.0, 0.0]]]]), requires_grad=True)
    ad.backward(ad.tsum(ad.maxpool2(x)))
    np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])


def test_maxpool_odd_dims():
    with pytest.raises(ad.ShapeError):
        ad.maxpool2(ad.Tensor(np.zeros((1, 1, 3, 4))))


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradcheck(seed):
    errs = check_op(ad.maxpool2, [distinct(seed, (2, 2, 4, 6))], seed)
    assert max(errs) < REL_TOL, errs


def test_upsample_values_and_grad():
    x = ad.Tensor(np.array([[[[7.0]]]]), requires_grad=True)
    out = ad.upsample_nn2(x)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))
    ad.backward(ad.tsum(out))
    np.testing.assert_array_equal(x.grad, [[[[4.0]]]])


@pytest.mark.parametrize("seed", SEEDS)
def test_upsample_gradcheck(seed):
    errs = check_op(ad.upsample_nn2, [rand(seed, 2, 3, 3, 2)], seed)
    assert max(errs) < REL_TOL, errs


# -- concat ----------------------------------------------------------------

def test_concat_with_empty():
    x = rand(0, 2, 3, 4, 4)
    out = ad.concat_channels(ad.Tensor(x), ad.Tensor(np.zeros((2, 0, 4, 4))))
    np.testing.assert_array_equal(out.data, x)


def test_concat_layout_and_grad_split():
    a, b = rand(1, 1, 2, 3, 3), rand(2, 1, 4, 3, 3)
    ta, tb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
    out = ad.concat_channels(ta, tb)
    np.testing.assert_array_equal(out.data[:, :2], a)
    np.testing.assert_array_equal(out.data[:, 2:], b)
    proj = rand(3, 1, 6, 3, 3)
    ad.backward(ad.tsum(ad.mul(out, ad.Tensor(proj))))
    # gradient of the split equals the split of the upstream gradient
    np.testing.assert_array_equal(ta.grad, proj[:, :2])
    np.testing.assert_array_equal(tb.grad, proj[:, 2:])


def test_concat_spatial_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.concat_channels(ad.Tensor(np.zeros((1, 1, 4, 4))), ad.Tensor(np.zeros((1, 1, 4, 2))))


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_gradcheck(seed):
    errs = check_op(ad.concat_channels, [rand(seed, 1, 2, 3, 3), rand(seed + 5, 1, 1, 3, 3)], seed)
    assert max(errs) < REL_TOL, errs


# -- activations, loss -----------------------------------------------------

def test_relu_sigmoid_values():
    np.testing.assert_array_equal(ad.relu(ad.Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
    assert ad.sigmoid(ad.Tensor(np.array([0.0]))).data[0] == 0.5
    big = ad.sigmoid(ad.Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(big))


def test_relu_subgradient_at_zero():
    x = ad.Tensor(np.array([0.0, 1.0]), requires_grad=True)
    ad.backward(ad.tsum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradcheck(seed):
    errs = check_op(ad.relu, [away_from_kinks(rand(seed, 2, 3, 4))], seed)
    assert max(errs) < REL_TOL, errs


@pytest.mark.parametrize("seed", SEEDS)
def test_sigmoid_gradcheck(seed):
    errs = check_op(ad.sigmoid, [rand(seed, 2, 3, 4) * 3], seed)
    assert max(errs) < REL_TOL, errs


def test_mse_values_and_grad():
    assert ad.mse_loss(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(3))).item() == 0.0
    p = ad.Tensor(np.array([1.0, 0.0]), requires_grad=True)
    loss = ad.mse_loss(p, ad.Tensor(np.zeros(2)))
    assert loss.item() == 0.5
    ad.backward(loss)
    np.testing.assert_array_equal(p.grad, [1.0, 0.0])


def test_mse_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.mse_loss(ad.Tensor(np.zeros(2)), ad.Tensor(np.zeros(3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_mse_gradcheck(seed):
    errs = check_op(lambda a, b: ad.mse_loss(a, b), [rand(seed, 2, 5), rand(seed + 3, 2, 5)], seed)
    assert max(errs) < REL_TOL, errs


# -- backward --------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = ad.Tensor(rand(0, 3, 2), requires_grad=True)
    ad.backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_mse_scalar():
    x = ad.Tensor(np.array([3.0]), requires_grad=True)
    ad.backward(ad.mse_loss(x, ad.Tensor(np.zeros(1))))
    np.testing.assert_array_equal(x.grad, [6.0])


@pytest.mark.parametrize("seed", SEEDS)
def test_diamond_graph_accumulates(seed):
    # x feeds both branches: f = sum(relu(x) * sigmoid(x))
    def op(x):
        return ad.mul(ad.relu(x), ad.sigmoid(x))

    errs = check_op(op, [away_from_kinks(rand(seed, 3, 4))], seed)
    assert max(errs) < REL_TOL, errs


def test_backward_contract_errors():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.backward(ad.relu(x))
    loss = ad.tsum(x)
    ad.backward(loss)
    with pytest.raises(ad.GraphError):
        ad.backward(loss)


def test_float32_default_and_float64_passthrough():
    assert ad.Tensor([1, 2]).dtype == np.float32
    assert ad.Tensor(np.zeros(2)).dtype == np.float64


# -- adam ------------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    ad.adam_step([p], ad.AdamState(lr=0.01))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert p.grad is None


def test_adam_first_step_scalar():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    state = ad.AdamState(lr=0.01)
    ad.adam_step([p], state)
    assert state.step == 1
    assert p.data[0] == pytest.approx(1 - 0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_reference_loop():
    # independent scalar Adam on f = theta^2
    theta, m, v = 1.0, 0.0, 0.0
    ref = []
    for t in range(1, 201):
        g = 2 * theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        ref.append(theta)
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.01)
    for t in range(200):
        ad.backward(ad.tsum(ad.mul(p, p)))
        opt.step()
        assert p.data[0] == pytest.approx(ref[t], rel=1e-12, abs=1e-15)
    assert abs(p.data[0]) < 0.05


def test_adam_missing_grad():
    p = ad.Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.adam_step([p], ad.AdamState())
