import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from morph4d.gate import BERNOULLI, THRESHOLD, TRAIN_OPACITY, GateMode, counter_uniform, gate_infer, gate_train


def test_train_product():
    assert gate_train(np.array([0.8]), np.array([0.5]))[0] == pytest.approx(0.4, abs=1e-16)


def test_train_near_one_keeps_opacity():
    eps = 1e-6
    alpha = np.linspace(0, 1, 11)
    out = gate_train(alpha, np.full(11, 1 - eps))
    assert np.all(np.abs(out - alpha) <= eps * alpha * (1 + 1e-9) + 1e-18)


def test_train_gradients_both_ways():
    a = torch.tensor([0.8, 0.3], dtype=torch.float64, requires_grad=True)
    p = torch.tensor([0.5, 0.9], dtype=torch.float64, requires_grad=True)
    gate_train(a, p).sum().backward()
    assert torch.equal(p.grad, a.detach()) and torch.equal(a.grad, p.detach())


def test_train_arity_mismatch():
    with pytest.raises(ValueError):
        gate_train(np.ones(3), np.ones(2))


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=50))
def test_train_range(pairs):
    a, p = np.array(pairs).T
    out = gate_train(a, p)
    assert np.all((out >= 0) & (out <= 1))


@pytest.mark.parametrize("mode", [BERNOULLI, THRESHOLD])
def test_extremes(mode):
    ids = np.arange(1000)
    assert gate_infer(ids, np.ones(1000), GateMode(mode, 1), frame=3).all()
    assert not gate_infer(ids, np.zeros(1000), GateMode(mode, 1), frame=3).any()


def test_bernoulli_frequency():
    mask = gate_infer(np.arange(10000), np.full(10000, 0.3), GateMode(BERNOULLI, 0), frame=0)
    assert 0.28 <= mask.mean() <= 0.32


def test_bernoulli_redraws_per_frame_threshold_does_not():
    ids = np.arange(2000)
    p = np.full(2000, 0.5)
    b = GateMode(BERNOULLI, 4)
    t = GateMode(THRESHOLD, 4)
    assert not np.array_equal(gate_infer(ids, p, b, 0), gate_infer(ids, p, b, 1))
    assert np.array_equal(gate_infer(ids, p, t, 0), gate_infer(ids, p, t, 9))


def test_draws_order_independent():
    ids = np.arange(500)
    perm = np.random.default_rng(0).permutation(500)
    u = counter_uniform(7, ids, 3, stream=2)
    assert np.array_equal(counter_uniform(7, ids[perm], 3, stream=2), u[perm])
    assert np.all((u >= 0) & (u < 1))


def test_streams_and_seeds_differ():
    ids = np.arange(100)
    assert not np.array_equal(counter_uniform(1, ids), counter_uniform(2, ids))
    assert not np.array_equal(counter_uniform(1, ids, stream=0), counter_uniform(1, ids, stream=1))


@given(st.integers(0, 2**31), st.lists(st.floats(0, 1), min_size=16, max_size=16))
def test_threshold_monotone_never_flickers(seed, steps):
    ids = np.arange(200)
    ramp = np.cumsum(np.array(steps)) / max(sum(steps), 1e-9)
    mode = GateMode(THRESHOLD, seed)
    masks = np.stack([gate_infer(ids, np.full(200, min(r, 1.0)), mode, frame=k) for k, r in enumerate(ramp)])
    assert np.all(masks[1:] >= masks[:-1])


def test_infer_rejects_train_mode():
    with pytest.raises(ValueError):
        gate_infer(np.arange(3), np.ones(3), GateMode(TRAIN_OPACITY), 0)


def test_unknown_mode():
    with pytest.raises(ValueError):
        GateMode("sometimes")
