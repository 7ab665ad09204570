import numpy as np
import pytest

from dnrecon.nn import (AdamState, BatchNormLayer, ConvLayer, ResNetOperator, adam_step,
                        batchnorm_backward, batchnorm_forward, conv_backward, conv_forward,
                        leaky_relu, leaky_relu_backward, mse_loss, resnet_apply)

from gradcheck import numeric_grad, rel_err

F64 = np.float64


def conv64(cin, cout, seed=0):
    return ConvLayer(cin, cout, rng=seed, dtype=F64)


# --- convolution -------------------------------------------------------------

def test_conv_identity_kernel(rng):
    layer = conv64(1, 1)
    layer.weight[...] = 0
    layer.weight[0, 0, 1, 1] = 1
    x = rng.normal(size=(2, 1, 6, 6))
    np.testing.assert_array_equal(conv_forward(layer, x), x)


def test_conv_ones_kernel_on_one_hot():
    layer = conv64(1, 1)
    layer.weight[...] = 1
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1
    out = conv_forward(layer, x)[0, 0]
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1
    np.testing.assert_array_equal(out, expected)


def test_conv_zero_kernel_gives_bias(rng):
    layer = conv64(3, 2)
    layer.weight[...] = 0
    layer.bias[...] = [0.5, -1.5]
    out = conv_forward(layer, rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(out[:, 0], 0.5)
    np.testing.assert_array_equal(out[:, 1], -1.5)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ValueError):
        conv_forward(conv64(2, 1), rng.normal(size=(1, 3, 4, 4)))


def test_conv_backward_zero_grad(rng):
    layer = conv64(2, 3)
    x = rng.normal(size=(1, 2, 5, 5))
    gx, gw, gb = conv_backward(layer, x, np.zeros((1, 3, 5, 5)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_single_pixel():
    # 1x1 image: only the kernel center touches data, out = w_c * x + b
    layer = conv64(1, 1)
    layer.weight[...] = np.arange(9.0).reshape(1, 1, 3, 3)
    x = np.array([[[[2.0]]]])
    g = np.array([[[[3.0]]]])
    gx, gw, gb = conv_backward(layer, x, g)
    assert gx[0, 0, 0, 0] == 4.0 * 3.0
    expected_w = np.zeros((1, 1, 3, 3))
    expected_w[0, 0, 1, 1] = 2.0 * 3.0
    np.testing.assert_array_equal(gw, expected_w)
    assert gb[0] == 3.0


def test_conv_backward_shape_mismatch(rng):
    layer = conv64(1, 2)
    with pytest.raises(ValueError):
        conv_backward(layer, rng.normal(size=(1, 1, 4, 4)), np.zeros((1, 1, 4, 4)))


@pytest.mark.parametrize("seed", range(5))
def test_conv_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    layer = conv64(2, 3, seed)
    layer.bias[...] = rng.normal(size=3)
    x = rng.normal(size=(1, 2, 8, 8))
    loss = lambda: 0.5 * np.sum(conv_forward(layer, x) ** 2)
    gx, gw, gb = conv_backward(layer, x, conv_forward(layer, x))
    assert rel_err(gx, numeric_grad(loss, x)) <= 1e-6
    assert rel_err(gw, numeric_grad(loss, layer.weight)) <= 1e-6
    assert rel_err(gb, numeric_grad(loss, layer.bias)) <= 1e-6


# --- batch norm --------------------------------------------------------------

def test_batchnorm_train_statistics(rng):
    bn = BatchNormLayer(3, dtype=F64)
    x = rng.normal(5.0, 3.0, size=(4, 3, 6, 6))
    out, _ = batchnorm_forward(bn, x, training=True)
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-6
    # eps = 1e-5 shifts the variance by about eps / var
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() <= 1e-5


def test_batchnorm_constant_channel_gives_beta():
    bn = BatchNormLayer(2, dtype=F64)
    bn.params["beta"][...] = [0.3, -0.2]
    out, _ = batchnorm_forward(bn, np.full((2, 2, 3, 3), 7.0), training=True)
    np.testing.assert_allclose(out[:, 0], 0.3, atol=1e-12)
    np.testing.assert_allclose(out[:, 1], -0.2, atol=1e-12)


def test_batchnorm_running_update(rng):
    bn = BatchNormLayer(1, momentum=0.9, dtype=F64)
    x = rng.normal(2.0, 1.5, size=(2, 1, 4, 4))
    batchnorm_forward(bn, x, training=True)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.1 * x.mean())
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batchnorm_eval_uses_running_stats(rng):
    bn = BatchNormLayer(1, dtype=F64)
    bn.buffers["running_mean"][...] = 2.0
    bn.buffers["running_var"][...] = 4.0
    x = rng.normal(size=(1, 1, 3, 3))
    out, _ = batchnorm_forward(bn, x, training=False)
    np.testing.assert_allclose(out, (x - 2.0) / np.sqrt(4.0 + 1e-5))
    np.testing.assert_array_equal(bn.buffers["running_mean"], [2.0])


def test_batchnorm_eval_rejects_uninitialized_variance():
    bn = BatchNormLayer(2, dtype=F64)
    bn.buffers["running_var"][...] = 0
    with pytest.raises(RuntimeError):
        batchnorm_forward(bn, np.ones((1, 2, 2, 2)), training=False)


def test_batchnorm_train_needs_two_values():
    with pytest.raises(ValueError):
        batchnorm_forward(BatchNormLayer(1, dtype=F64), np.ones((1, 1, 1, 1)), training=True)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients_match_finite_differences(seed, training):
    rng = np.random.default_rng(seed)
    bn = BatchNormLayer(2, dtype=F64)
    bn.params["gamma"][...] = rng.uniform(0.5, 1.5, 2)
    bn.params["beta"][...] = rng.normal(size=2)
    bn.buffers["running_mean"][...] = rng.normal(size=2)
    bn.buffers["running_var"][...] = rng.uniform(0.5, 2, 2)
    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=x.shape)
    saved = {k: v.copy() for k, v in bn.buffers.items()}

    def loss():
        out, _ = batchnorm_forward(bn, x, training)
        for k, v in saved.items():
            bn.buffers[k][...] = v
        return float(np.sum(w * out))

    _, cache = batchnorm_forward(bn, x, training)
    gx, gg, gb = batchnorm_backward(bn, cache, w)
    assert rel_err(gx, numeric_grad(loss, x)) <= 1e-6
    assert rel_err(gg, numeric_grad(loss, bn.params["gamma"])) <= 1e-6
    assert rel_err(gb, numeric_grad(loss, bn.params["beta"])) <= 1e-6


# --- leaky relu --------------------------------------------------------------

def test_leaky_relu_values():
    x = np.array([0.0, 1.5, -2.0])
    np.testing.assert_array_equal(leaky_relu(x, 0.01), [0.0, 1.5, -0.02])
    np.testing.assert_array_equal(leaky_relu_backward(x, np.ones(3), 0.01), [0.01, 1.0, 0.01])


@pytest.mark.parametrize("seed", range(5))
def test_leaky_relu_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 5, 5))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    w = rng.normal(size=x.shape)
    loss = lambda: float(np.sum(w * leaky_relu(x, 0.1)))
    assert rel_err(leaky_relu_backward(x, w, 0.1), numeric_grad(loss, x)) <= 1e-6


# --- ResNet operator ---------------------------------------------------------

def test_resnet_zero_projection_gives_zero(rng):
    op = ResNetOperator(channels=4, rng=0, dtype=F64)
    op.project.weight[...] = 0
    out = resnet_apply(op, rng.normal(size=(2, 1, 8, 8)), training=True)
    np.testing.assert_array_equal(out, 0)


def test_resnet_identity_configuration(rng):
    op = ResNetOperator(channels=3, rng=0, dtype=F64)
    for conv in (op.lift, op.project):
        conv.weight[...] = 0
    op.lift.weight[0, 0, 1, 1] = 1
    op.project.weight[0, 0, 1, 1] = 1
    for block in op.blocks:
        block.conv1.weight[...] = 0
        block.conv2.weight[...] = 0
    x = rng.uniform(0.1, 2.0, size=(1, 1, 8, 8))
    # positive inputs survive the LeakyReLU skips; BN(0) in eval with stats (0, 1) is 0
    np.testing.assert_allclose(resnet_apply(op, x, training=False), x, rtol=1e-12)


@pytest.mark.parametrize("n", [16, 32, 64])
def test_resnet_shape_contract(n, rng):
    op = ResNetOperator(channels=4, rng=1)
    assert resnet_apply(op, rng.normal(size=(2, 1, n, n)).astype(np.float32)).shape == (2, 1, n, n)


def test_resnet_rejects_multichannel_input(rng):
    with pytest.raises(ValueError):
        resnet_apply(ResNetOperator(channels=4, rng=0), rng.normal(size=(1, 2, 8, 8)))


def test_resnet_tensor_count():
    op = ResNetOperator(channels=4, rng=0)
    names = [name for name, _ in op.named_tensors()]
    # lift (w, b) + 2 x (conv1 w,b, conv2 w,b, bn gamma,beta,mean,var) + project (w, b)
    assert len(names) == 20 and len(set(names)) == 20


def test_resnet_deterministic(rng):
    op = ResNetOperator(channels=8, rng=3)
    x = rng.normal(size=(2, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(resnet_apply(op, x), resnet_apply(op, x))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("training", [True, False])
def test_resnet_gradients_match_finite_differences(seed, training):
    rng = np.random.default_rng(seed)
    op = ResNetOperator(channels=3, rng=seed, dtype=F64)
    for name, p, _ in op.named_parameters():
        if name.endswith("gamma"):
            p[...] = rng.uniform(0.5, 1.5, p.shape)
        elif p.ndim == 1:
            p[...] = rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(2, 1, 6, 6))
    w = rng.normal(size=x.shape)
    saved = [b.copy() for _, b in op.named_tensors()]

    def restore():
        for (_, b), s in zip(op.named_tensors(), saved):
            b[...] = s

    def loss():
        out = resnet_apply(op, x, training)
        restore()
        return float(np.sum(w * out))

    op.zero_grad()
    out, cache = op.forward(x, training)
    restore()
    gx = op.backward(cache, w)
    assert rel_err(gx, numeric_grad(loss, x)) <= 1e-5
    # biases feeding a train-mode BN have an exactly zero gradient; compare
    # those against the overall gradient scale instead of their own
    scale = max(np.abs(g).max() for _, _, g in op.named_parameters())
    for name, p, g in op.named_parameters():
        fd = numeric_grad(loss, p)
        if np.abs(g).max() < 1e-9 * scale:
            assert np.abs(fd).max() <= 1e-5 * scale, name
        else:
            assert rel_err(g, fd) <= 1e-5, name


# --- loss and optimizer ------------------------------------------------------

def test_mse_examples(rng):
    t = rng.normal(size=(8, 8))
    loss, grad = mse_loss(t.copy(), t)
    assert loss == 0 and not grad.any()
    loss, _ = mse_loss(t + 0.25, t)
    assert loss == pytest.approx(0.0625)
    with pytest.raises(ValueError):
        mse_loss(t, t[:4])


def test_mse_gradient_matches_finite_differences(rng):
    pred, truth = rng.normal(size=(2, 6, 6))
    _, grad = mse_loss(pred, truth)
    fd = numeric_grad(lambda: mse_loss(pred, truth)[0], pred)
    np.testing.assert_allclose(grad, fd, rtol=1e-8, atol=1e-10)


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    adam_step(AdamState(), [p], [np.zeros(2)])
    np.testing.assert_array_equal(p, [1.0, -2.0])


def scalar_adam(p, g, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        out.append(p)
    return out


def test_adam_first_step_hand_value():
    p = np.array([0.0])
    state = adam_step(AdamState(), [p], [np.array([1.0])])
    assert state.t == 1
    assert p[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-18)
    assert p[0] == pytest.approx(-0.000999999990, abs=1e-15)


def test_adam_two_steps_match_scalar_oracle():
    p = np.array([0.3])
    state = AdamState()
    expected = scalar_adam(0.3, 1.0, 2)
    for k in range(2):
        adam_step(state, [p], [np.array([1.0])])
        assert abs(p[0] - expected[k]) <= 1e-12


def test_adam_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        adam_step(AdamState(), [np.zeros(2)], [np.zeros(3)])
