"""SGD update rule, learning-rate decay, and ParamSet bookkeeping."""

import numpy as np
import pytest

from mshnet import tensor as T
from mshnet.errors import StateError, UsageError
from mshnet.params import ParamSet, exp_lr_decay, fan_in_uniform, sgd_step
from mshnet.tensor import Tensor


def single_param(value, grad):
    ps = ParamSet()
    p = ps.add("p", Tensor(np.array([value], dtype=np.float32)))
    p.grad = np.array([grad], dtype=np.float32)
    return ps, p


def test_zero_lr_is_identity():
    ps, p = single_param(1.5, 2.0)
    sgd_step(ps, lr=0.0, momentum=0.9, weight_decay=0.1)
    assert p.data[0] == np.float32(1.5)


def test_plain_gradient_step():
    ps, p = single_param(1.0, 1.0)
    sgd_step(ps, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p.data[0] == pytest.approx(0.9)


def test_two_momentum_steps():
    # v1 = 1 -> p = -0.1; v2 = 0.9 + 1 = 1.9 -> p = -0.29
    ps, p = single_param(0.0, 1.0)
    sgd_step(ps, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p.data[0] == pytest.approx(-0.1)
    p.grad = np.array([1.0], dtype=np.float32)
    sgd_step(ps, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p.data[0] == pytest.approx(-0.29)


def test_weight_decay_enters_velocity():
    ps, p = single_param(2.0, 0.0)
    sgd_step(ps, lr=0.1, momentum=0.0, weight_decay=0.5)
    # v = 0 + 0 + 0.5*2 = 1 -> p = 2 - 0.1
    assert p.data[0] == pytest.approx(1.9)


def test_missing_gradient_raises_state_error():
    ps = ParamSet()
    ps.add("p", Tensor(np.ones(2, dtype=np.float32)))
    with pytest.raises(StateError, match="p"):
        sgd_step(ps, lr=0.1)


def test_gradients_cleared_after_step():
    ps, p = single_param(1.0, 1.0)
    sgd_step(ps, lr=0.1)
    assert p.grad is None
    with pytest.raises(StateError):
        sgd_step(ps, lr=0.1)


def test_duplicate_name_rejected():
    ps = ParamSet()
    ps.add("p", Tensor(np.ones(1, dtype=np.float32)))
    with pytest.raises(UsageError):
        ps.add("p", Tensor(np.ones(1, dtype=np.float32)))


def test_exp_lr_decay_values():
    assert exp_lr_decay(0.025, 0.9, 0) == pytest.approx(0.025)
    assert exp_lr_decay(0.025, 1.0, 57) == pytest.approx(0.025)
    assert exp_lr_decay(0.025, 0.9, 2) == pytest.approx(0.02025)


def test_exp_lr_decay_validation():
    with pytest.raises(UsageError):
        exp_lr_decay(0.025, 0.0, 1)
    with pytest.raises(UsageError):
        exp_lr_decay(0.025, 0.9, -1)


def test_fan_in_uniform_bound_and_determinism():
    a = fan_in_uniform(np.random.default_rng(5), (4, 6), fan_in=6)
    b = fan_in_uniform(np.random.default_rng(5), (4, 6), fan_in=6)
    bound = np.sqrt(6.0 / 6)
    assert np.all(np.abs(a.data) <= bound)
    assert np.array_equal(a.data, b.data)


def test_element_count():
    ps = ParamSet()
    ps.add("a", Tensor(np.zeros((2, 3), dtype=np.float32)))
    ps.add("b", Tensor(np.zeros(5, dtype=np.float32)))
    assert ps.element_count() == 11
