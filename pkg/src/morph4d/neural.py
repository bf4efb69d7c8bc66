"""Coordinate MLPs for per-point deformation and transition probability.

Gradients come from torch autograd; :class:`Tape` scopes one forward pass
so that a recorded graph is consumed by exactly one :func:`backward`.
"""

from __future__ import annotations

import io
import math
import struct
from typing import Sequence

import numpy as np
import torch
from torch import nn

DEFAULT_DTYPE = torch.float32
HIDDEN = (64, 64, 64)
POS_BANDS = 6
TIME_BANDS = 4
W_TRANS = 10.0

CKPT_MAGIC = b"T4DN"
CKPT_VERSION = 1
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_KIND_CODES = {"deform": 0, "transition": 1, "mlp": 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class TapeError(RuntimeError):
    pass


class CheckpointError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def positional_encode(v, bands: int):
    """``[v, sin(2^k pi v), cos(2^k pi v) for k < bands]``, grouped by band.

    Accepts a torch tensor (..., d) or anything numpy can read; returns the
    same kind.
    """
    if bands < 0:
        raise ValueError("bands must be >= 0")
    if not torch.is_tensor(v):
        arr = np.asarray(v, dtype=np.float64)
        out = positional_encode(torch.from_numpy(np.atleast_1d(arr)), bands)
        return out.numpy()
    parts = [v]
    for k in range(bands):
        arg = (2.0 ** k) * math.pi * v
        parts += [torch.sin(arg), torch.cos(arg)]
    return torch.cat(parts, dim=-1)


class Mlp(nn.Module):
    """Dense ReLU network; the output layer is zero-initialised."""

    def __init__(self, dims: Sequence[int], seed: int = 0, dtype=DEFAULT_DTYPE,
                 zero_output: bool = True):
        super().__init__()
        dims = [int(d) for d in dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"bad layer dims {dims}")
        self.dims = dims
        gen = torch.Generator().manual_seed(seed)
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            lin = nn.Linear(fan_in, fan_out, dtype=dtype)
            last = k == len(dims) - 2
            with torch.no_grad():
                if last and zero_output:
                    lin.weight.zero_()
                    lin.bias.zero_()
                else:
                    bound = math.sqrt(6.0 / fan_in)  # He-uniform for ReLU
                    lin.weight.uniform_(-bound, bound, generator=gen)
                    lin.bias.zero_()
            layers.append(lin)
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.layers[:-1]:
            x = torch.relu(lin(x))
        return self.layers[-1](x)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class _CoordNet(nn.Module):
    """Shared featurisation of (x, q, t)."""

    out_dim = 1
    kind = "mlp"

    def __init__(self, hidden=HIDDEN, pos_bands=POS_BANDS, time_bands=TIME_BANDS,
                 seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.pos_bands = pos_bands
        self.time_bands = time_bands
        in_dim = 3 * (1 + 2 * pos_bands) + 4 + (1 + 2 * time_bands)
        self.backbone = Mlp([in_dim, *hidden, self.out_dim], seed=seed, dtype=dtype)

    @property
    def dtype(self):
        return self.backbone.layers[0].weight.dtype

    def features(self, x: torch.Tensor, q: torch.Tensor, t) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=self.dtype)
        q = torch.as_tensor(q, dtype=self.dtype)
        if x.ndim == 1:
            x, q = x[None], q[None]
        t_col = torch.full((x.shape[0], 1), float(t), dtype=self.dtype)
        return torch.cat([positional_encode(x, self.pos_bands), q,
                          positional_encode(t_col, self.time_bands)], dim=-1)


class DeformationNet(_CoordNet):
    out_dim = 7
    kind = "deform"

    def forward(self, x, q, t):
        out = self.backbone(self.features(x, q, t))
        return out[..., :3], out[..., 3:]


class TransitionNet(_CoordNet):
    out_dim = 1
    kind = "transition"

    def __init__(self, *args, w_trans: float = W_TRANS, **kwargs):
        super().__init__(*args, **kwargs)
        if w_trans < 1:
            raise ValueError("w_trans must be >= 1")
        self.w_trans = float(w_trans)

    def logit(self, x, q, t) -> torch.Tensor:
        return self.backbone(self.features(x, q, t))[..., 0]

    def forward(self, x, q, t, sign: float = 1.0):
        return torch.sigmoid(sign * self.w_trans * self.logit(x, q, t))


def deform(net: DeformationNet, x, q, t):
    """Offsets ``(dx, dq)``; callers form ``x + dx`` and ``normalize(q + dq)``."""
    return net(x, q, t)


def transition_prob(net: TransitionNet, x_t, q_t, t):
    return net(x_t, q_t, t)


def apply_deformation(x: torch.Tensor, q: torch.Tensor, dx: torch.Tensor, dq: torch.Tensor):
    q_t = q + dq
    return x + dx, q_t / q_t.norm(dim=-1, keepdim=True)


# --------------------------------------------------------------------- tape

class Tape:
    """One recorded forward pass.

    ``watch`` marks tensors (or every parameter of a module) whose gradients
    are wanted; ``record`` stores the output. :func:`backward` consumes the
    tape exactly once.
    """

    def __init__(self):
        self.sources: dict[str, torch.Tensor] = {}
        self.output: torch.Tensor | None = None
        self.consumed = False

    def watch(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if not tensor.requires_grad:
            tensor = tensor.detach().requires_grad_(True)
        self.sources[name] = tensor
        return tensor

    def watch_module(self, prefix: str, module: nn.Module) -> None:
        for name, p in module.named_parameters():
            self.sources[f"{prefix}.{name}" if prefix else name] = p

    def record(self, output: torch.Tensor) -> torch.Tensor:
        self.output = output
        return output

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def backward(tape: Tape, loss_seed=1.0) -> dict[str, np.ndarray]:
    """Vector-Jacobian product of the recorded output with ``loss_seed``.

    Sources the output does not depend on get zero gradients.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    if tape.output is None:
        raise TapeError("nothing recorded on tape")
    tape.consumed = True
    out = tape.output
    seed = torch.as_tensor(loss_seed, dtype=out.dtype)
    if seed.shape != out.shape:
        seed = seed.expand(out.shape)
    names = list(tape.sources)
    tensors = [tape.sources[n] for n in names]
    grads = torch.autograd.grad(out, tensors, grad_outputs=seed, allow_unused=True)
    return {n: (np.zeros(tuple(t.shape)) if g is None else g.detach().double().numpy())
            for n, t, g in zip(names, tensors, grads)}


# --------------------------------------------------------------- checkpoints

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(nets: dict[str, _CoordNet], path=None) -> bytes:
    """Serialise nets; writes to ``path`` when given and returns the bytes.

    Layout (little-endian): magic ``T4DN``, u32 version, u32 net count, then per
    net a table entry (name, kind, dtype, dims, bands, w_trans), followed by
    every net's parameters in layer order (weight then bias), in the net's
    own float width.
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(nets)))
    for name, net in nets.items():
        dims = net.backbone.dims
        buf.write(_pack_str(name))
        buf.write(struct.pack("<BB", _KIND_CODES[net.kind], _DTYPE_CODES[net.dtype]))
        buf.write(struct.pack("<I", len(dims)))
        buf.write(struct.pack(f"<{len(dims)}I", *dims))
        buf.write(struct.pack("<IId", net.pos_bands, net.time_bands,
                              getattr(net, "w_trans", 0.0)))
    for net in nets.values():
        np_dtype = "<f4" if net.dtype == torch.float32 else "<f8"
        for lin in net.backbone.layers:
            buf.write(lin.weight.detach().numpy().astype(np_dtype).tobytes())
            buf.write(lin.bias.detach().numpy().astype(np_dtype).tobytes())
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def load_checkpoint(source, expect_dims: dict[str, Sequence[int]] | None = None) -> dict[str, _CoordNet]:
    """Inverse of :func:`save_checkpoint`; ``source`` is a path or bytes."""
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("ckpt.truncated", f"needed {n} bytes at offset {pos}, file has {len(data)}")
        chunk = view[pos:pos + n]
        pos += n
        return bytes(chunk)

    if take(4) != CKPT_MAGIC:
        raise CheckpointError("ckpt.magic", "not a T4DN checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError("ckpt.version", f"version {version}, expected {CKPT_VERSION}")
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        kind_code, dtype_code = struct.unpack("<BB", take(2))
        (ndims,) = struct.unpack("<I", take(4))
        dims = list(struct.unpack(f"<{ndims}I", take(4 * ndims)))
        pos_bands, time_bands, w_trans = struct.unpack("<IId", take(16))
        table.append((name, _CODE_KINDS[kind_code], _CODE_DTYPES[dtype_code], dims,
                      pos_bands, time_bands, w_trans))
    nets = {}
    for name, kind, dtype, dims, pos_bands, time_bands, w_trans in table:
        if expect_dims and name in expect_dims and list(expect_dims[name]) != dims:
            raise CheckpointError("ckpt.dims", f"{name}: file dims {dims}, expected {list(expect_dims[name])}")
        cls = DeformationNet if kind == "deform" else TransitionNet
        kwargs = {"w_trans": w_trans} if kind == "transition" else {}
        net = cls(hidden=tuple(dims[1:-1]), pos_bands=pos_bands, time_bands=time_bands,
                  dtype=dtype, **kwargs)
        if net.backbone.dims != dims:
            raise CheckpointError("ckpt.dims", f"{name}: dims {dims} inconsistent with bands")
        np_dtype = "<f4" if dtype == torch.float32 else "<f8"
        width = np.dtype(np_dtype).itemsize
        with torch.no_grad():
            for lin in net.backbone.layers:
                for p in (lin.weight, lin.bias):
                    raw = take(p.numel() * width)
                    p.copy_(torch.from_numpy(np.frombuffer(raw, dtype=np_dtype).reshape(p.shape).copy()))
        nets[name] = net
    if pos != len(data):
        raise CheckpointError("ckpt.trailing", f"{len(data) - pos} unexpected trailing bytes")
    return nets


def param_vector(modules) -> np.ndarray:
    """All parameters flattened (float64 copy); used for hashing and tests."""
    parts = [p.detach().double().reshape(-1).numpy() for m in modules for p in m.parameters()]
    return np.concatenate(parts) if parts else np.zeros(0)
