"""The time-dependent scene: pose -> deformation -> transition -> gate.

Deformation happens in each object's canonical frame (``x_t = x + dx``,
``q_t = normalize(q + dq)``), then the rigid pose maps it into world space.
Each transition pair owns one :class:`TransitionNet`; source points see
``sigmoid(w h)`` and target points ``sigmoid(-w h)``, so the pair shares one
notion of transition progress. Objects outside every pair are always on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .gate import TRAIN_OPACITY, GateMode, gate_infer
from .kinematics import object_pose
from .neural import (DEFAULT_DTYPE, HIDDEN, POS_BANDS, TIME_BANDS, W_TRANS, DeformationNet,
                     TransitionNet, apply_deformation, load_checkpoint, save_checkpoint)
from .plan import TimelineProgram
from .render import Camera, FrameBatch, render_gaussians
from .scene import GaussianCloud, matrix_to_quat


def quat_mul_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


class CloudParams(nn.Module):
    """Trainable view of one canonical cloud (activations applied on read)."""

    def __init__(self, cloud: GaussianCloud, dtype=DEFAULT_DTYPE, trainable: bool = False):
        super().__init__()
        t = lambda a: nn.Parameter(torch.from_numpy(np.array(a, dtype=np.float64)).to(dtype),
                                   requires_grad=trainable)
        alpha = np.clip(cloud.opacities, 1e-7, 1 - 1e-7)
        self.means = t(cloud.positions)
        self.log_scales = t(np.log(cloud.scales))
        self.quats = t(cloud.rotations)
        self.opacity_logit = t(np.log(alpha) - np.log1p(-alpha))
        self.colors = t(cloud.colors)
        self.register_buffer("point_ids", torch.from_numpy(cloud.point_ids.copy()))
        self.label = cloud.label
        self._opacity_exact = None if trainable else torch.from_numpy(cloud.opacities.copy()).to(dtype)

    def __len__(self) -> int:
        return int(self.point_ids.shape[0])

    @property
    def opacity(self) -> torch.Tensor:
        # untouched clouds use the stored alpha exactly (logit round-trips are lossy)
        if self._opacity_exact is not None:
            return self._opacity_exact
        return torch.sigmoid(self.opacity_logit)

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def set_trainable(self, flag: bool) -> None:
        if flag:
            self._opacity_exact = None
        for p in self.parameters():
            p.requires_grad_(flag)

    def to_cloud(self, canonical: bool = True) -> GaussianCloud:
        d = lambda x: x.detach().double().numpy()
        return GaussianCloud(
            positions=d(self.means), scales=d(self.scales), rotations=d(self.quats),
            opacities=d(self.opacity).clip(0.0, 1.0), colors=d(self.colors).clip(0.0, 1.0),
            point_ids=self.point_ids.numpy(), canonical=canonical, label=self.label,
        )


class DynamicsModel(nn.Module):
    """Per-object deformation nets plus transition nets (per pair or shared)."""

    def __init__(self, n_objects: int, pairs: list[tuple[int, int]], seed: int = 0,
                 dtype=DEFAULT_DTYPE, shared_transition: bool = False, w_trans: float = W_TRANS,
                 hidden=HIDDEN, pos_bands: int = POS_BANDS, time_bands: int = TIME_BANDS):
        super().__init__()
        kw = dict(hidden=hidden, pos_bands=pos_bands, time_bands=time_bands, dtype=dtype)
        self.pairs = [tuple(int(v) for v in p) for p in pairs]
        self.shared_transition = shared_transition
        self.deform = nn.ModuleList([DeformationNet(seed=seed + 1000 * i, **kw) for i in range(n_objects)])
        n_trans = min(1, len(self.pairs)) if shared_transition else len(self.pairs)
        self.trans = nn.ModuleList([TransitionNet(seed=seed + 7919 + 1000 * k, w_trans=w_trans, **kw)
                                    for k in range(n_trans)])

    @classmethod
    def for_program(cls, program: TimelineProgram, **kwargs) -> "DynamicsModel":
        pairs = [(tr.source, tr.target) for tr in program.transitions]
        return cls(program.n_objects, pairs, **kwargs)

    @property
    def dtype(self):
        return self.deform[0].dtype if len(self.deform) else DEFAULT_DTYPE

    def trans_net(self, k: int) -> TransitionNet:
        return self.trans[0 if self.shared_transition else k]

    def net_dict(self) -> dict[str, nn.Module]:
        nets = {f"deform.{i}": n for i, n in enumerate(self.deform)}
        nets.update({f"trans.{k}": n for k, n in enumerate(self.trans)})
        return nets

    def save(self, path=None) -> bytes:
        return save_checkpoint(self.net_dict(), path)

    def load_state_from(self, source) -> None:
        """Copy parameters from a checkpoint written by :meth:`save`."""
        expect = {name: net.backbone.dims for name, net in self.net_dict().items()}
        loaded = load_checkpoint(source, expect_dims=expect)
        mine = self.net_dict()
        if set(loaded) != set(mine):
            raise ValueError(f"checkpoint nets {sorted(loaded)} do not match model {sorted(mine)}")
        with torch.no_grad():
            for name, net in mine.items():
                for p, q in zip(net.parameters(), loaded[name].parameters()):
                    p.copy_(q.to(p.dtype))


@dataclass
class SceneState:
    """Differentiable world-space scene at one time."""

    means: torch.Tensor
    quats: torch.Tensor
    scales: torch.Tensor
    alpha: torch.Tensor
    p_trans: torch.Tensor
    opacity: torch.Tensor  # effective
    colors: torch.Tensor
    keys: np.ndarray
    slices: list[slice]
    t: float

    def render(self, camera: Camera, cutoff=None, workers: int = 1) -> torch.Tensor:
        return render_gaussians(self.means, self.quats, self.scales, self.opacity, self.colors,
                                self.keys, camera, cutoff, workers)

    def object_means(self, i: int) -> torch.Tensor:
        return self.means[self.slices[i]]


def transition_probs(dyn: DynamicsModel, x_t: list, q_t: list, t: float, n_objects: int) -> list:
    """Per-object p_trans tensors (None where the object is never gated)."""
    probs: list = [None] * n_objects
    for k, (src, dst) in enumerate(dyn.pairs):
        net = dyn.trans_net(k)
        for obj, sign in ((src, 1.0), (dst, -1.0)):
            p = net(x_t[obj], q_t[obj], t, sign=sign)
            probs[obj] = p if probs[obj] is None else probs[obj] * p
    return probs


def evaluate_scene(clouds: list[CloudParams], program: TimelineProgram, dyn: DynamicsModel, t: float,
                   gate: GateMode | None = None, frame: int = 0) -> SceneState:
    """Assemble the scene at time ``t``.

    ``gate=None`` or train_opacity mode multiplies opacity by p_trans; the
    inference modes zero out gated points.
    """
    n = len(clouds)
    if n != program.n_objects:
        raise ValueError(f"{n} clouds for a {program.n_objects}-object timeline")
    dtype = dyn.dtype
    x_t, q_t = [], []
    for i, cp in enumerate(clouds):
        x = cp.means.to(dtype)
        q = cp.quats.to(dtype)
        q = q / q.norm(dim=-1, keepdim=True)
        dx, dq = dyn.deform[i](x, q, t)
        xi, qi = apply_deformation(x, q, dx, dq)
        x_t.append(xi)
        q_t.append(qi)
    probs = transition_probs(dyn, x_t, q_t, t, n)

    means, quats, scales, alphas, ps, effs, colors, keys, slices = [], [], [], [], [], [], [], [], []
    start = 0
    for i, cp in enumerate(clouds):
        pose = object_pose(program, i, t)
        rot = torch.from_numpy(pose.rotation).to(dtype)
        trans = torch.from_numpy(pose.translation).to(dtype)
        q_rot = torch.from_numpy(matrix_to_quat(pose.rotation)).to(dtype)
        means.append(x_t[i] @ rot.T + trans)
        quats.append(quat_mul_tensor(q_rot.expand_as(q_t[i]), q_t[i]))
        scales.append(cp.scales.to(dtype))
        alpha = cp.opacity.to(dtype)
        p = probs[i] if probs[i] is not None else torch.ones_like(alpha)
        if gate is None or gate.mode == TRAIN_OPACITY:
            eff = alpha * p
        else:
            mask = gate_infer(cp.point_ids.numpy(), p.detach().double().numpy(), gate, frame, stream=i)
            eff = alpha * torch.from_numpy(mask).to(dtype)
        alphas.append(alpha)
        ps.append(p)
        effs.append(eff)
        colors.append(cp.colors.to(dtype))
        ids = cp.point_ids.numpy()
        keys.append(np.stack([np.full(len(ids), i), ids], 1))
        slices.append(slice(start, start + len(ids)))
        start += len(ids)
    cat = lambda xs, shape: torch.cat(xs) if xs else torch.zeros(shape, dtype=dtype)
    return SceneState(
        means=cat(means, (0, 3)), quats=cat(quats, (0, 4)), scales=cat(scales, (0, 3)),
        alpha=cat(alphas, (0,)), p_trans=cat(ps, (0,)), opacity=cat(effs, (0,)),
        colors=cat(colors, (0, 3)),
        keys=np.concatenate(keys) if keys else np.zeros((0, 2), np.int64),
        slices=slices, t=float(t),
    )


def render_sequence(clouds, program: TimelineProgram, dyn: DynamicsModel, gate: GateMode,
                    cameras, frames: int | None = None, cutoff=None, workers: int = 1) -> FrameBatch:
    """Render ``frames`` images at ``t_k = k / (frames - 1)``.

    ``clouds`` are GaussianClouds or CloudParams; ``cameras`` is one camera or
    one per frame.
    """
    frames = program.frame_count if frames is None else frames
    params = [c if isinstance(c, CloudParams) else CloudParams(c, dtype=dyn.dtype) for c in clouds]
    cams = [cameras] * frames if isinstance(cameras, Camera) else list(cameras)
    if len(cams) != frames:
        raise ValueError(f"{len(cams)} cameras for {frames} frames")
    times = program.frame_times(frames)
    images = []
    with torch.no_grad():
        for k, (t, cam) in enumerate(zip(times, cams)):
            state = evaluate_scene(params, program, dyn, float(t), gate, frame=k)
            images.append(state.render(cam, cutoff, workers).double().numpy())
    return FrameBatch(np.clip(np.stack(images), 0.0, 1.0).astype(np.float32), times, cams)
