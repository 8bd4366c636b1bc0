import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointcar import model as net
from jointcar.nn import checkpoint
from jointcar.nn.core import (
    FilterBank, activation, avg_pool_boxcar, bce_grad, bce_loss, conv2d_valid, gabor_bank,
    gabor_kernel, output_sigmoid,
)
from jointcar.nn.gradcheck import grad_check
from jointcar.nn.optim import TrainingDivergence, sgd_step
from test_kernels import conv_oracle


class _P:
    def __init__(self, **groups):
        self.groups = {k: np.asarray(v, dtype=np.float64) for k, v in groups.items()}


def test_conv_shapes_and_identity():
    rng = np.random.default_rng(0)
    bank = FilterBank(rng.standard_normal((64, 3, 9, 9)), np.zeros(64))
    assert conv2d_valid(rng.standard_normal((3, 84, 28)), bank).shape == (64, 76, 20)
    x = rng.standard_normal((1, 6, 5))
    np.testing.assert_array_equal(conv2d_valid(x, FilterBank(np.ones((1, 1, 1, 1)), np.zeros(1))), x)


def test_conv_small_instance_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 5, 5))
    bank = FilterBank(rng.standard_normal((1, 1, 3, 3)), rng.standard_normal(1))
    got = conv2d_valid(x, bank)
    np.testing.assert_allclose(got, conv_oracle(x[None], bank.weights, bank.biases)[0],
                               rtol=0, atol=1e-12)


def test_conv_argument_errors():
    with pytest.raises(ValueError):
        conv2d_valid(np.zeros((2, 5, 5)), FilterBank(np.zeros((1, 3, 3, 3)), np.zeros(1)))
    with pytest.raises(ValueError):
        conv2d_valid(np.zeros((1, 2, 5)), FilterBank(np.zeros((1, 1, 3, 3)), np.zeros(1)))
    with pytest.raises(ValueError):
        FilterBank(np.zeros((2, 1, 3, 3)), np.zeros(3))


def test_pool_examples():
    assert avg_pool_boxcar(np.zeros((64, 76, 20))).shape == (64, 19, 5)
    np.testing.assert_allclose(avg_pool_boxcar(np.full((2, 8, 12), 3.25)), 3.25)
    assert avg_pool_boxcar(np.arange(1, 17, dtype=float).reshape(1, 4, 4))[0, 0, 0] == 8.5
    with pytest.raises(ValueError):
        avg_pool_boxcar(np.zeros((1, 3, 8)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-5, 5))
def test_pool_commutes_with_scaling(seed, k):
    x = np.random.default_rng(seed).standard_normal((2, 9, 13))
    np.testing.assert_allclose(avg_pool_boxcar(k * x), k * avg_pool_boxcar(x), atol=1e-12)


def test_activations():
    assert activation(0.0) == 0 and output_sigmoid(0.0) == 0.5
    z = np.random.default_rng(2).standard_normal(100) * 30
    np.testing.assert_array_equal(activation(-z), -activation(z))
    np.testing.assert_allclose(output_sigmoid(z) + output_sigmoid(-z), 1.0, atol=1e-15)
    assert np.all(np.isfinite(output_sigmoid(np.array([-1e4, 1e4]))))


def test_gabor_bank_properties():
    bank = gabor_bank(64, 9, 9, 3)
    assert bank.weights.shape == (64, 3, 9, 9) and not bank.biases.any()
    for w in bank.weights:
        assert abs(w.mean()) < 1e-9
        assert abs(np.linalg.norm(w) - 1) < 1e-9
    np.testing.assert_array_equal(gabor_bank().weights, bank.weights)
    with pytest.raises(ValueError):
        gabor_bank(60)


def test_gabor_half_turn_symmetry():
    # documented convention: even kernels unchanged, odd kernels flip sign
    for theta in np.linspace(0, np.pi, 5):
        even = gabor_kernel(9, 9, theta, 2.0, 6.0, 0.0)
        odd = gabor_kernel(9, 9, theta, 2.0, 6.0, np.pi / 2)
        np.testing.assert_allclose(gabor_kernel(9, 9, theta + np.pi, 2.0, 6.0, 0.0), even, atol=1e-12)
        np.testing.assert_allclose(gabor_kernel(9, 9, theta + np.pi, 2.0, 6.0, np.pi / 2), -odd,
                                   atol=1e-12)


def test_sgd_examples():
    p = _P(a=[1.0])
    sgd_step(p, {"a": np.array([2.0])}, lr=0.1, momentum=0.0)
    assert p.groups["a"][0] == pytest.approx(0.8)
    q = _P(a=[1.0, -2.0])
    sgd_step(q, {"a": np.zeros(2)}, lr=0.1, momentum=0.9)
    np.testing.assert_array_equal(q.groups["a"], [1.0, -2.0])


def test_sgd_momentum_recurrence():
    p = _P(a=[0.0])
    v = None
    for _ in range(2):
        v = sgd_step(p, {"a": np.array([1.0])}, lr=0.5, momentum=0.9, velocity=v)
    # v1 = -0.5, p1 = -0.5 ; v2 = 0.9*-0.5 - 0.5 = -0.95, p2 = -1.45
    assert p.groups["a"][0] == pytest.approx(-1.45)


def test_sgd_rejects_nonfinite_and_projects():
    p = _P(a=[0.0])
    with pytest.raises(TrainingDivergence):
        sgd_step(p, {"a": np.array([np.nan])}, 0.1, 0.9)
    q = _P(**{"deform.coeffs": np.full((8, 4), -0.01)})
    sgd_step(q, {"deform.coeffs": np.full((8, 4), -1.0)}, 0.1, 0.0)
    assert np.all(q.groups["deform.coeffs"][:, :2] <= 0)
    assert np.all(q.groups["deform.coeffs"][:, 2:] > 0)


def test_bce_examples():
    assert bce_loss(0.5, 1) == pytest.approx(math.log(2))
    assert bce_loss(0.5, 0) == pytest.approx(math.log(2))
    assert bce_loss(1.0, 1) <= -math.log(1 - 1e-7) + 1e-15
    assert bce_loss(0.0, 0) <= -math.log(1 - 1e-7) + 1e-15
    assert bce_loss(0.25, 1) == pytest.approx(math.log(4))
    assert np.isfinite(bce_loss(0.0, 1))


def test_bce_grad_matches_difference():
    for yh, y in ((0.3, 1.0), (0.8, 0.0), (0.5, 1.0)):
        h = 1e-7
        fd = (bce_loss(yh + h, y) - bce_loss(yh - h, y)) / (2 * h)
        assert bce_grad(np.array(yh), y) == pytest.approx(fd, rel=1e-6)


def _stage_params(stage, seed=0):
    rng = np.random.default_rng(seed)
    p = net.init_stage1(rng, np.float64)
    if stage >= 2:
        p = net.grow_to_stage2(p, rng)
    if stage >= 3:
        p = net.grow_to_stage3(p, rng)
    return p, rng


def test_gradcheck_linear_head_is_exact():
    p, rng = _stage_params(1)
    x = rng.standard_normal((4, 3, 84, 28))
    y = np.array([0, 1, 0, 1.0])
    res = grad_check(p, x, y, epsilon=1e-4, per_group=200, groups=["head.weight", "head.bias"])
    assert res.max_rel_error < 1e-8, str(res)


def test_gradcheck_zero_input_conv1():
    p, _ = _stage_params(1)
    x = np.zeros((2, 3, 84, 28))
    _, grads, _ = net.loss_and_grads(p, x, np.array([0, 1.0]))
    assert not grads["conv1.weight"].any()
    res = grad_check(p, x, np.array([0, 1.0]), groups=["conv1.weight"])
    assert res.max_rel_error == 0.0


@pytest.mark.slow
def test_gradcheck_full_model():
    p, rng = _stage_params(3, seed=3)
    x = rng.standard_normal((4, 3, 84, 28))
    res = grad_check(p, x, np.array([0, 1, 1, 0.0]), per_group=10)
    assert res.max_rel_error < 1e-4, str(res)
    assert "deform.coeffs" in res.per_group


def test_gradcheck_epsilon_range():
    p, rng = _stage_params(1)
    with pytest.raises(ValueError):
        grad_check(p, np.zeros((1, 3, 84, 28)), np.zeros(1), epsilon=1e-2)


def test_checkpoint_round_trip(tmp_path):
    p, _ = _stage_params(3)
    p = p.astype(np.float32)
    blob = checkpoint.dumps(p.meta(), p.groups)
    meta, groups = checkpoint.loads(blob)
    assert checkpoint.dumps(meta, groups) == blob
    assert list(groups) == list(p.groups)
    path = tmp_path / "a.ckpt"
    d1 = net.save_params(str(path), p)
    q = net.load_params(str(path))
    d2 = net.save_params(str(tmp_path / "b.ckpt"), q)
    assert d1 == d2
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOTACKPT" + bytes(20))
    p, _ = _stage_params(1)
    blob = checkpoint.dumps(p.meta(), p.astype(np.float32).groups)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-3])
