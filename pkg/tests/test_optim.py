"""Optimizers: update rules, decoupled decay, lr schedules."""

import math

import numpy as np
import pytest

from qtlab.engine import Tensor
from qtlab.optim import SGD, AdamW, lr_at


def make_param(value, grad):
    p = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
    p.grad = np.asarray(grad, dtype=np.float64)
    return p


class TestSgd:
    def test_vanilla_step(self):
        p = make_param([1.0], [0.5])
        SGD([p], lr=0.1).step()
        assert p.data.tolist() == [1.0 - 0.05]

    def test_momentum_accumulates(self):
        p = make_param([0.0], [1.0])
        opt = SGD([p], lr=1.0, momentum=0.5)
        opt.step()           # v = 1
        p.grad = np.array([1.0])
        opt.step()           # v = 1.5
        assert p.data.tolist() == [-2.5]

    def test_weight_decay_added_to_gradient(self):
        p = make_param([2.0], [0.0])
        SGD([p], lr=0.1, weight_decay=0.5).step()
        assert p.data == pytest.approx([2.0 - 0.1 * 0.5 * 2.0])

    def test_parameters_without_grad_skipped(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        SGD([p], lr=0.1).step()
        assert p.data.tolist() == [1.0]


class TestAdamW:
    def test_first_step_moves_by_about_lr(self):
        p = make_param([0.0], [0.3])
        AdamW([p], lr=0.01).step()
        # bias-corrected first step is ~lr * sign(grad)
        assert p.data[0] == pytest.approx(-0.01, rel=1e-4)

    def test_decay_is_decoupled_from_gradient(self):
        # zero gradient: AdamW still shrinks weights, and the shrinkage does
        # not enter the moment estimates
        p = make_param([4.0], [0.0])
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        opt.step()
        assert p.data[0] == pytest.approx(4.0 * (1 - 0.1 * 0.5))

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            p = make_param([1.0, -2.0], [0.1, 0.2])
            opt = AdamW([p], lr=0.05, weight_decay=0.01)
            for _ in range(5):
                opt.step()
            runs.append(p.data.copy())
        assert np.array_equal(runs[0], runs[1])


class TestLrSchedule:
    def test_constant(self):
        assert lr_at(0.1, "constant", 7, 10) == 0.1

    def test_cosine_endpoints(self):
        assert lr_at(0.1, "cosine", 0, 100) == pytest.approx(0.1)
        assert lr_at(0.1, "cosine", 50, 100) == pytest.approx(0.05)
        assert lr_at(0.1, "cosine", 99, 100) == pytest.approx(
            0.1 * 0.5 * (1 + math.cos(math.pi * 0.99)))

    def test_unknown_schedule(self):
        with pytest.raises(ValueError, match="schedule"):
            lr_at(0.1, "linear", 0, 10)
