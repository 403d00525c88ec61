from __future__ import annotations

import numpy as np
import pytest

from src.errors import BatchNormStateError, ShapeError
from src.gradcheck import grad_check, weighted_sum
from src.tensor import (
    BatchNormState,
    Tensor,
    abs_layer,
    activation,
    add,
    avg_pool,
    batch_norm,
    bce_loss,
    bmm,
    concat_channels,
    conv2d,
    default_dtype,
    fully_connected,
    global_avg_pool,
    mse_loss,
    permute,
    reshape,
    softmax,
    split_channels,
)


def _scalar(out: Tensor, seed: int = 0) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return weighted_sum(out, w)


def test_conv_1x1_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
    w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    out = conv2d(x, w, Tensor(np.zeros(3)))
    assert np.array_equal(out.numpy(), x.numpy())


def test_conv_box_filter_on_constant_image():
    x = Tensor(np.full((1, 1, 6, 6), 7.0))
    w = Tensor(np.full((1, 1, 3, 3), 1 / 9))
    out = conv2d(x, w, Tensor(np.zeros(1)), padding=1).numpy()[0, 0]
    assert np.allclose(out[1:-1, 1:-1], 7.0, atol=1e-5)
    # zero padding attenuates the border
    assert out[0, 0] < 7.0
    assert out[0, 3] < 7.0


def test_conv_paths_agree():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 7, 7)), dtype=np.float64)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)), dtype=np.float64)
    b = Tensor(rng.normal(size=4), dtype=np.float64)
    a = conv2d(x, w, b, stride=2, padding=1, method="im2col").numpy()
    d = conv2d(x, w, b, stride=2, padding=1, method="direct").numpy()
    assert a.shape == (2, 4, 4, 4)
    assert np.allclose(a, d, atol=1e-12)


def test_conv_rejects_mismatched_channels():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    w = Tensor(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(x, w, Tensor(np.zeros(1)))


def test_conv_rejects_even_kernel():
    x = Tensor(np.zeros((1, 1, 5, 5)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))


def test_batch_norm_train_normalizes():
    x = Tensor(np.random.default_rng(2).normal(3.0, 2.0, size=(4, 3, 5, 5)))
    out = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormState()).numpy()
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-6
    assert np.abs(out.var(axis=(0, 2, 3)) - 1.0).max() <= 1e-4


def test_batch_norm_affine_collapse():
    x = Tensor(np.random.default_rng(3).normal(size=(2, 2, 3, 3)))
    out = batch_norm(x, Tensor(np.zeros(2)), Tensor(np.full(2, 5.0)), BatchNormState()).numpy()
    assert np.all(out == 5.0)


def test_batch_norm_eval_before_train_raises():
    x = Tensor(np.zeros((2, 2, 3, 3)))
    with pytest.raises(BatchNormStateError):
        batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState(), mode="eval")


def test_batch_norm_eval_uses_running_stats():
    state = BatchNormState()
    x = Tensor(np.random.default_rng(4).normal(size=(4, 2, 3, 3)))
    batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state)
    assert state.initialized
    first = batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, mode="eval").numpy()
    second = batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, mode="eval").numpy()
    assert np.array_equal(first, second)


def test_activation_values():
    x = Tensor(np.array([[-4.0], [4.0]]).reshape(2, 1, 1, 1))
    out = activation(x, "prelu", alpha=Tensor(np.array([0.25]))).numpy().reshape(-1)
    assert out.tolist() == [-1.0, 4.0]
    zero = Tensor(np.zeros((1, 1)))
    assert activation(zero, "sigmoid").item() == 0.5
    assert activation(zero, "tanh").item() == 0.0


def test_activation_unknown_kind():
    with pytest.raises(ValueError):
        activation(Tensor(np.zeros(2)), "gelu")


def test_abs_layer_value_and_gradient():
    assert abs_layer(Tensor(np.array([-1.0, 0.0, 2.0]))).numpy().tolist() == [1.0, 0.0, 2.0]
    x = Tensor(np.array([-3.0]), requires_grad=True)
    reshape(abs_layer(x), (1, 1)).backward(np.ones((1, 1)))
    assert x.grad.tolist() == [-1.0]


def test_concat_and_split_shapes():
    a = Tensor(np.zeros((1, 2, 4, 4)))
    b = Tensor(np.ones((1, 3, 4, 4)))
    cat = concat_channels([a, b])
    assert cat.shape == (1, 5, 4, 4)
    assert np.array_equal(concat_channels([a]).numpy(), a.numpy())
    left, right = split_channels(cat, [2, 3])
    assert np.array_equal(right.numpy(), b.numpy())
    with pytest.raises(ShapeError):
        concat_channels([a, Tensor(np.zeros((1, 1, 3, 3)))])


def test_pooling():
    plane = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2))
    assert global_avg_pool(plane).item() == 4.0
    const = Tensor(np.full((1, 2, 9, 9), 3.0))
    assert np.allclose(global_avg_pool(const).numpy(), 3.0)
    assert avg_pool(const, 3, 2, padding=1).shape == (1, 2, 5, 5)


def test_softmax_stable():
    assert np.allclose(softmax(Tensor(np.array([[0.0, 0.0]]))).numpy(), [[0.5, 0.5]])
    big = softmax(Tensor(np.array([[1000.0, 0.0]]), dtype=np.float64)).numpy()
    assert np.isfinite(big).all()
    assert big[0, 0] == pytest.approx(1.0)
    assert big[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_losses():
    p = Tensor(np.ones((2, 3)))
    assert mse_loss(p, np.ones((2, 3))).item() == 0.0
    assert mse_loss(p, np.full((2, 3), -1.0)).item() == pytest.approx(4.0)
    half = Tensor(np.full(6, 0.5), dtype=np.float64)
    assert bce_loss(half, [0, 1, 1, 0, 1, 0]).item() == pytest.approx(0.693147, abs=1e-6)
    exact = Tensor(np.array([0.0, 1.0]), dtype=np.float64)
    assert bce_loss(exact, [0, 1]).item() <= -np.log(1 - 1e-7) + 1e-12


def test_add_rejects_broadcasting():
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_fully_connected_gradients_are_exact():
    rng = np.random.default_rng(5)
    with default_dtype(np.float64):
        x = Tensor(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=(2, 4)))
        b = Tensor(rng.normal(size=2))
        report = grad_check(lambda: _scalar(fully_connected(x, w, b)), [x, w, b], tolerance=1e-9)
    assert report.passed, report.summary()


def test_conv_and_batch_norm_gradients():
    rng = np.random.default_rng(6)
    with default_dtype(np.float64):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        gamma = Tensor(rng.normal(size=3))
        beta = Tensor(rng.normal(size=3))

        def fragment() -> Tensor:
            y = conv2d(x, w, b, stride=2, padding=1)
            return _scalar(batch_norm(y, gamma, beta, BatchNormState()))

        report = grad_check(fragment, [x, w, b, gamma, beta], tolerance=1e-5)
    assert report.passed, report.summary()


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "relu", "lrelu"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(7)
    with default_dtype(np.float64):
        values = rng.normal(size=(2, 3, 3, 3))
        # keep away from the kink at zero
        values = np.where(np.abs(values) < 1e-2, 0.5, values)
        x = Tensor(values)
        report = grad_check(lambda: _scalar(activation(x, kind)), [x], tolerance=1e-6)
    assert report.passed, report.summary()


def test_prelu_abs_pool_attention_pieces_gradients():
    rng = np.random.default_rng(8)
    with default_dtype(np.float64):
        values = rng.normal(size=(2, 3, 6, 6))
        values = np.where(np.abs(values) < 1e-3, 0.5, values)
        x = Tensor(values)
        alpha = Tensor(np.full(3, 0.25))
        a = Tensor(rng.normal(size=(2, 3, 4)))
        c = Tensor(rng.normal(size=(2, 4, 5)))

        def fragment() -> Tensor:
            y = avg_pool(abs_layer(activation(x, "prelu", alpha)), 3, 2, padding=1)
            z = softmax(reshape(permute(y, (0, 2, 3, 1)), (2 * 9, 3)))
            return add(_scalar(z, 1), _scalar(bmm(a, c), 2))

        report = grad_check(fragment, [x, alpha, a, c], tolerance=1e-5)
    assert report.passed, report.summary()


def test_bce_gradient_inside_clamp():
    with default_dtype(np.float64):
        p = Tensor(np.array([0.2, 0.7, 0.4, 0.9]))
        report = grad_check(lambda: bce_loss(p, [0, 1, 0, 1]), [p], tolerance=1e-6)
    assert report.passed, report.summary()


def test_grad_check_requires_float64():
    x = Tensor(np.ones((2, 2)), dtype=np.float32)
    with pytest.raises(ValueError):
        grad_check(lambda: _scalar(x), [x])
