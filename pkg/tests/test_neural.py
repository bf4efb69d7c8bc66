import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from morph4d.neural import (CheckpointError, DeformationNet, Mlp, Tape, TapeError, TransitionNet,
                            apply_deformation, backward, deform, load_checkpoint, param_vector,
                            positional_encode, save_checkpoint, transition_prob)

F64 = torch.float64


def _inputs(n=8, seed=0):
    g = np.random.default_rng(seed)
    q = g.normal(size=(n, 4))
    return (torch.from_numpy(g.uniform(-1, 1, (n, 3))), torch.from_numpy(q / np.linalg.norm(q, axis=1, keepdims=True)))


# ---- positional encoding

def test_encode_passthrough():
    np.testing.assert_array_equal(positional_encode([0.0], 0), [0.0])


def test_encode_zero_two_bands():
    np.testing.assert_array_equal(positional_encode([0.0], 2), [0, 0, 1, 0, 1])


def test_encode_half_one_band():
    np.testing.assert_allclose(positional_encode([0.5], 1), [0.5, 1.0, 0.0], atol=1e-16)


@given(st.integers(1, 5), st.integers(0, 6))
def test_encode_length(d, bands):
    assert positional_encode(np.zeros(d), bands).shape == (d * (1 + 2 * bands),)


def test_encode_negative_bands():
    with pytest.raises(ValueError):
        positional_encode([0.0], -1)


# ---- nets

def test_default_widths():
    net = DeformationNet()
    assert net.backbone.dims == [52, 64, 64, 64, 7]
    assert TransitionNet().backbone.dims[-1] == 1


def test_fresh_deform_is_exact_zero():
    x, q = _inputs()
    dx, dq = deform(DeformationNet(seed=4, dtype=F64), x, q, 0.3)
    assert torch.count_nonzero(dx) == 0 and torch.count_nonzero(dq) == 0


@pytest.mark.parametrize("w", [1.0, 10.0, 50.0])
def test_fresh_transition_is_half(w):
    x, q = _inputs()
    p = transition_prob(TransitionNet(seed=2, w_trans=w, dtype=F64), x, q, 0.7)
    assert torch.all(p == 0.5)


def _set_logit(net, h):
    with torch.no_grad():
        net.backbone.layers[-1].bias.fill_(h)


def test_transition_sigmoid_value():
    net = TransitionNet(dtype=F64)
    _set_logit(net, 0.2)
    x, q = _inputs(1)
    assert transition_prob(net, x, q, 0.0).item() == pytest.approx(0.8807970779778823, rel=1e-15)


def test_transition_monotone_in_logit():
    x, q = _inputs(1)
    vals = []
    for h in np.linspace(-2, 2, 41):
        net = TransitionNet(dtype=F64)
        _set_logit(net, float(h))
        vals.append(transition_prob(net, x, q, 0.5).item())
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert all(0 < v < 1 for v in vals)


def test_w_trans_must_be_at_least_one():
    with pytest.raises(ValueError):
        TransitionNet(w_trans=0.5)


def test_apply_deformation_normalizes():
    x, q = _inputs(4)
    _, q_t = apply_deformation(x, q, torch.zeros_like(x), torch.full_like(q, 0.3))
    np.testing.assert_allclose(q_t.norm(dim=-1).numpy(), 1.0, atol=1e-15)


def test_seeded_init_deterministic():
    a, b = DeformationNet(seed=9), DeformationNet(seed=9)
    assert np.array_equal(param_vector([a]), param_vector([b]))
    assert not np.array_equal(param_vector([a]), param_vector([DeformationNet(seed=10)]))


def _train(seed, steps=10):
    torch.manual_seed(0)
    net = DeformationNet(seed=seed)
    opt = torch.optim.SGD(net.parameters(), lr=1e-2)
    x, q = _inputs(16, seed=1)
    x, q = x.float(), q.float()
    for _ in range(steps):
        dx, dq = net(x, q, 0.4)
        loss = ((dx - 0.1) ** 2).sum() + (dq ** 2).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return param_vector([net])


def test_training_bit_identical():
    assert np.array_equal(_train(3), _train(3))


# ---- tape

def test_tape_single_parameter():
    w = torch.tensor(2.0, dtype=F64)
    with Tape() as tape:
        w = tape.watch("w", w)
        v = tape.watch("v", torch.tensor(5.0, dtype=F64))
        tape.record(w * 1.0)
    grads = backward(tape, 1.0)
    assert grads["w"] == 1.0 and grads["v"] == 0.0


def test_tape_one_layer_closed_form():
    g = np.random.default_rng(3)
    W = torch.from_numpy(g.normal(size=(4, 3)))
    v = torch.from_numpy(g.normal(size=3))
    with Tape() as tape:
        Wt = tape.watch("W", W)
        tape.record(((Wt @ v) ** 2).sum())
    grads = backward(tape)
    expect = 2 * np.outer(W.numpy() @ v.numpy(), v.numpy())
    np.testing.assert_allclose(grads["W"], expect, rtol=1e-12, atol=1e-12)


def test_tape_twice_raises():
    with Tape() as tape:
        tape.record(tape.watch("a", torch.tensor(1.0, dtype=F64)) * 3)
    backward(tape)
    with pytest.raises(TapeError):
        backward(tape)


def test_deform_gradients_match_finite_differences():
    net = DeformationNet(seed=1, dtype=F64)
    with torch.no_grad():
        net.backbone.layers[-1].weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(1))
    x, q = _inputs(6, seed=2)
    target = torch.from_numpy(np.random.default_rng(5).normal(size=(6, 3)))

    def loss():
        dx, dq = net(x, q, 0.35)
        return ((dx - target) ** 2).sum() + (dq ** 2).sum()

    with Tape() as tape:
        tape.watch_module("net", net)
        tape.record(loss())
    grads = backward(tape)
    g = np.random.default_rng(7)
    params = dict(net.named_parameters())
    h = 1e-4
    for _ in range(30):
        name = list(params)[g.integers(len(params))]
        p = params[name]
        idx = tuple(int(g.integers(s)) for s in p.shape)
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + h
            up = loss().item()
            p[idx] = old - h
            down = loss().item()
            p[idx] = old
        fd = (up - down) / (2 * h)
        assert abs(grads[f"net.{name}"][idx] - fd) <= max(1e-3 * abs(fd), 1e-5)


# ---- checkpoints

def _nets(dtype=torch.float32):
    return {"deform.0": DeformationNet(seed=1, dtype=dtype), "trans.0": TransitionNet(seed=2, w_trans=12.0, dtype=dtype)}


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_checkpoint_roundtrip_bitwise(dtype):
    nets = _nets(dtype)
    with torch.no_grad():
        for n in nets.values():
            for p in n.parameters():
                p.add_(torch.randn(p.shape, dtype=dtype, generator=torch.Generator().manual_seed(3)))
    back = load_checkpoint(save_checkpoint(nets))
    for name, net in nets.items():
        assert np.array_equal(param_vector([net]), param_vector([back[name]]))
        assert back[name].backbone.dims == net.backbone.dims
    assert back["trans.0"].w_trans == 12.0


def test_checkpoint_size_is_params_plus_header():
    nets = _nets()
    count = sum(n.backbone.param_count for n in nets.values())
    size = len(save_checkpoint(nets))
    assert 0 < size - 4 * count < 256


def test_checkpoint_file_path(tmp_path):
    path = tmp_path / "nets.t4dn"
    data = save_checkpoint(_nets(), path)
    assert path.read_bytes() == data
    assert set(load_checkpoint(path)) == {"deform.0", "trans.0"}


@pytest.mark.parametrize("mangle,code", [
    (lambda b: b[:-10], "ckpt.truncated"),
    (lambda b: b[:30], "ckpt.truncated"),
    (lambda b: b"XXXX" + b[4:], "ckpt.magic"),
    (lambda b: b[:4] + (99).to_bytes(4, "little") + b[8:], "ckpt.version"),
    (lambda b: b + b"\0", "ckpt.trailing"),
])
def test_checkpoint_errors(mangle, code):
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(mangle(save_checkpoint(_nets())))
    assert err.value.code == code


def test_checkpoint_dim_mismatch():
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(save_checkpoint(_nets()), expect_dims={"deform.0": [52, 32, 7]})
    assert err.value.code == "ckpt.dims"


def test_mlp_rejects_bad_dims():
    with pytest.raises(ValueError):
        Mlp([3])
