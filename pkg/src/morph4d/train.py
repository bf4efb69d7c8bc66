"""Two-phase optimisation.

Phase ``dynamics`` updates only the deformation and transition nets over
16-frame batches with a constant point count. Phase ``refine`` updates only
the cloud parameters from single frames at random times and periodically
clones, splits and prunes points. Both consume a :class:`GuidanceProvider`,
which returns per-pixel gradients for rendered frames.
"""

from __future__ import annotations

import hashlib
import io
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch

from .pipeline import CloudParams, DynamicsModel, evaluate_scene
from .plan import TimelineProgram
from .render import Camera, FrameBatch
from .scene import GaussianCloud, quat_to_matrix

DYNAMICS = "dynamics"
REFINE = "refine"
DEFAULT_STEPS = {DYNAMICS: 4500, REFINE: 4000, "pretrain": 5000}
FULL_SCALE_FIXED_POINTS = 20000  # per-object count at full scale; desk runs default to 2000


class NumericAbort(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class PhaseViolation(AssertionError):
    pass


# ------------------------------------------------------------------ guidance

@dataclass
class GuidanceResult:
    grad: np.ndarray  # same shape as the frames
    loss: float


@dataclass
class GuidanceContext:
    view: int
    frame_indices: np.ndarray
    times: np.ndarray
    prompt: str = ""


class GuidanceProvider(Protocol):
    cameras: list[Camera]

    def evaluate(self, frames: np.ndarray, ctx: GuidanceContext) -> GuidanceResult: ...


class ReconstructionGuidance:
    """Pixel-space stand-in for score distillation: match oracle frames.

    One target :class:`FrameBatch` per view; every batch holds the same frame
    times. Gradient per frame is ``2 (rendered - target) / (H * W)``; the
    reported loss is the mean squared error over all values.
    """

    def __init__(self, targets: list[FrameBatch]):
        if not targets:
            raise ValueError("at least one target view required")
        for fb in targets:
            if not np.all(np.isfinite(fb.images)):
                raise ValueError("target frames must be finite")
        shape = targets[0].images.shape
        if any(fb.images.shape != shape for fb in targets):
            raise ValueError("all target views must share frame count and size")
        self.targets = targets
        self.cameras = [fb.cameras[0] if fb.cameras else None for fb in targets]
        self.times = np.asarray(targets[0].times, dtype=np.float64)

    def evaluate(self, frames: np.ndarray, ctx: GuidanceContext) -> GuidanceResult:
        target = self.targets[ctx.view].images[np.asarray(ctx.frame_indices)].astype(np.float64)
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape != target.shape:
            raise ValueError(f"frame shape {frames.shape} does not match targets {target.shape}")
        diff = frames - target
        pixels = frames.shape[-3] * frames.shape[-2]
        return GuidanceResult(2.0 * diff / pixels, float(np.mean(diff ** 2)))


def reconstruction_guidance(targets) -> ReconstructionGuidance:
    if isinstance(targets, FrameBatch):
        targets = [targets]
    return ReconstructionGuidance(list(targets))


class ZeroGuidance:
    """Always-zero gradient; training under it must be a no-op."""

    def __init__(self, cameras: list[Camera], times):
        self.cameras = list(cameras)
        self.times = np.asarray(times, dtype=np.float64)

    def evaluate(self, frames, ctx):
        return GuidanceResult(np.zeros_like(np.asarray(frames, dtype=np.float64)), 0.0)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros(tuple(p.shape)) for p in params], [np.zeros(tuple(p.shape)) for p in params])


BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def step_adam(params: list[torch.Tensor], grads: list, state: AdamState, lr) -> AdamState:
    """One bias-corrected Adam update, in place. ``lr`` may be per-param."""
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    grads = [np.zeros(tuple(p.shape)) if g is None else
             (g.detach().double().numpy() if torch.is_tensor(g) else np.asarray(g, dtype=np.float64))
             for p, g in zip(params, grads)]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    state.step += 1
    bc1 = 1.0 - BETA1 ** state.step
    bc2 = 1.0 - BETA2 ** state.step
    with torch.no_grad():
        for k, (p, g) in enumerate(zip(params, grads)):
            state.m[k] = BETA1 * state.m[k] + (1 - BETA1) * g
            state.v[k] = BETA2 * state.v[k] + (1 - BETA2) * g * g
            update = lrs[k] * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + EPS)
            p.sub_(torch.from_numpy(update).to(p.dtype))
    return state


# ------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    phase: str = DYNAMICS
    steps: int | None = None
    frame_count: int = 16
    frames_per_step: int | None = None  # None: whole batch (dynamics) / 1 (refine)
    fixed_points: int | None = 2000
    lr_nets: float = 1e-3
    lr_position: float = 1.6e-4
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_scale: float = 2.5e-3
    lr_rotation: float = 1e-3
    densify: bool = True
    densify_interval: int = 100
    densify_until: int | None = None
    grad_threshold: float = 2e-4
    scale_threshold: float = 0.01
    prune_alpha: float = 0.005
    schedule_weight: float = 0.0
    seed: int = 0
    prompt: str = ""

    def __post_init__(self):
        if self.phase not in (DYNAMICS, REFINE):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.steps is None:
            self.steps = DEFAULT_STEPS[self.phase]

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    step: int = 0
    adam: dict[str, AdamState] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    grad_accum: list[np.ndarray] = field(default_factory=list)
    grad_count: list[np.ndarray] = field(default_factory=list)
    peak_points: int = 0

    def losses(self) -> np.ndarray:
        return np.array([h["loss"] for h in self.history])


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator, so resuming needs no stored RNG stream."""
    return np.random.default_rng([seed, step])


def params_digest(modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, p in m.named_parameters():
            h.update(name.encode())
            h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- dynamics

def _point_counts(clouds) -> list[int]:
    return [len(c) for c in clouds]


def _schedule_penalty(state, program: TimelineProgram, t: float):
    """Extension: pull mean p_trans toward a step at each transition midpoint."""
    total = 0.0
    for tr in program.transitions:
        mid = 0.5 * (tr.start + tr.end)
        src_goal = 1.0 if t < mid else 0.0
        p_src = state.p_trans[state.slices[tr.source]].mean()
        p_dst = state.p_trans[state.slices[tr.target]].mean()
        total = total + (p_src - src_goal) ** 2 + (p_dst - (1.0 - src_goal)) ** 2
    return total


def train_dynamics(clouds: list[CloudParams], program: TimelineProgram, dyn: DynamicsModel,
                   guidance: GuidanceProvider, config: TrainConfig, state: TrainState | None = None,
                   until: int | None = None, callback: Callable | None = None) -> TrainState:
    """Optimise deformation and transition nets; clouds stay frozen.

    Runs from ``state.step`` up to ``until`` (default ``config.steps``).
    """
    if config.phase != DYNAMICS:
        raise ValueError("train_dynamics needs phase='dynamics'")
    counts = _point_counts(clouds)
    if config.fixed_points is not None and any(n != config.fixed_points for n in counts):
        raise PhaseViolation(f"dynamics phase needs {config.fixed_points} points per object, got {counts}")
    for cp in clouds:
        cp.set_trainable(False)
    params = [p for p in dyn.parameters()]
    for p in params:
        p.requires_grad_(True)
    state = state or TrainState()
    state.adam.setdefault("nets", AdamState.zeros_like(params))
    cloud_digest = params_digest(clouds)
    times = np.asarray(guidance.times)
    until = config.steps if until is None else until
    while state.step < until:
        t0 = time.perf_counter()
        rng = step_rng(config.seed, state.step)
        view = int(rng.integers(len(guidance.cameras)))
        if config.frames_per_step is None or config.frames_per_step >= len(times):
            idx = np.arange(len(times))
        else:
            idx = np.sort(rng.choice(len(times), size=config.frames_per_step, replace=False))
        camera = guidance.cameras[view]
        frames, penalty = [], 0.0
        live = 0
        for k in idx:
            st = evaluate_scene(clouds, program, dyn, float(times[k]))
            live = max(live, int(st.means.shape[0]))
            frames.append(st.render(camera))
            if config.schedule_weight:
                penalty = penalty + _schedule_penalty(st, program, float(times[k]))
        batch = torch.stack(frames)
        res = guidance.evaluate(batch.detach().double().numpy(),
                                GuidanceContext(view, idx, times[idx], config.prompt))
        loss = res.loss
        if not np.isfinite(loss):
            raise NumericAbort(state.step, "loss")
        for p in params:
            p.grad = None
        surrogate = (batch * torch.from_numpy(res.grad).to(batch.dtype)).sum()
        if config.schedule_weight:
            surrogate = surrogate + config.schedule_weight * penalty / len(idx)
            loss += float(config.schedule_weight * penalty / len(idx))
        if surrogate.requires_grad:
            surrogate.backward()
        try:
            step_adam(params, [p.grad for p in params], state.adam["nets"], config.lr_nets)
        except FloatingPointError:
            raise NumericAbort(state.step, "gradient") from None
        if _point_counts(clouds) != counts or params_digest(clouds) != cloud_digest:
            raise PhaseViolation(f"cloud changed during the dynamics phase at step {state.step}")
        state.peak_points = max(state.peak_points, live)
        state.history.append({"step": state.step, "loss": loss, "points": live,
                              "wall_ms": (time.perf_counter() - t0) * 1e3})
        state.step += 1
        if callback:
            callback(state, clouds)
    for p in params:
        p.grad = None
    return state


# ---------------------------------------------------------------- refine

def _principal_axes(cloud: GaussianCloud):
    rot = quat_to_matrix(cloud.rotations)
    k = np.argmax(cloud.scales, axis=1)
    axis = rot[np.arange(len(cloud)), :, k]
    return axis, cloud.scales[np.arange(len(cloud)), k]


def densify_plan(cloud: GaussianCloud, grad_mag: np.ndarray, config: TrainConfig):
    """New cloud plus, per new point, the index of the point it came from."""
    grad_mag = np.asarray(grad_mag, dtype=np.float64)
    if grad_mag.shape != (len(cloud),):
        raise ValueError("one gradient magnitude per point required")
    if len(cloud) == 0:
        return cloud, np.zeros(0, np.int64)
    keep = cloud.opacities >= config.prune_alpha
    high = (grad_mag > config.grad_threshold) & keep
    axis, smax = _principal_axes(cloud)
    split = high & (smax > config.scale_threshold)
    clone = high & ~split
    next_id = int(cloud.point_ids.max()) + 1

    pos = cloud.positions.copy()
    scales = cloud.scales.copy()
    pos[clone] += 0.5 * (smax[clone, None] * axis[clone])
    pos[split] += smax[split, None] * axis[split]
    scales[split] /= 1.6
    base = cloud.replace(positions=pos, scales=scales)

    extra = np.nonzero(clone | split)[0]
    new_pos = cloud.positions[extra].copy()
    new_pos[clone[extra]] -= 0.5 * (smax[extra][clone[extra], None] * axis[extra][clone[extra]])
    new_pos[split[extra]] -= smax[extra][split[extra], None] * axis[extra][split[extra]]
    new_scales = scales[extra]
    kept = np.nonzero(keep)[0]
    parents = np.concatenate([kept, extra])
    out = GaussianCloud(
        positions=np.concatenate([base.positions[kept], new_pos]),
        scales=np.concatenate([base.scales[kept], new_scales]),
        rotations=np.concatenate([cloud.rotations[kept], cloud.rotations[extra]]),
        opacities=np.concatenate([cloud.opacities[kept], cloud.opacities[extra]]),
        colors=np.concatenate([cloud.colors[kept], cloud.colors[extra]]),
        point_ids=np.concatenate([cloud.point_ids[kept], next_id + np.arange(len(extra))]),
        canonical=cloud.canonical, label=cloud.label,
    )
    return out, parents


def densify(cloud: GaussianCloud, grad_mag, config: TrainConfig) -> GaussianCloud:
    """Clone small / split large high-gradient points, prune faint ones.

    A point with mean positional gradient above ``grad_threshold`` is cloned
    (two copies half a scale apart along its longest axis) when its largest
    scale is at most ``scale_threshold``, otherwise split into two copies one
    scale apart with scales divided by 1.6. Points with opacity below
    ``prune_alpha`` are dropped. New points get fresh ids above the maximum.
    """
    return densify_plan(cloud, grad_mag, config)[0]


_CLOUD_GROUPS = ("means", "log_scales", "quats", "opacity_logit", "colors")


def _cloud_lrs(config: TrainConfig):
    return [config.lr_position, config.lr_scale, config.lr_rotation, config.lr_opacity, config.lr_color]


def _reparent(params: CloudParams, cloud: GaussianCloud, parents: np.ndarray, adam: AdamState,
              dtype) -> tuple[CloudParams, AdamState]:
    """Fresh trainable params for ``cloud``, carrying raw values and Adam moments."""
    new = CloudParams(cloud, dtype=dtype, trainable=True)
    newborn = ~np.isin(cloud.point_ids, params.point_ids.numpy())
    with torch.no_grad():
        for name in ("quats", "opacity_logit", "colors"):
            getattr(new, name).copy_(getattr(params, name)[torch.from_numpy(parents)])
    m = [adam.m[k][parents] * (~newborn).reshape((-1,) + (1,) * (adam.m[k].ndim - 1)) for k in range(len(adam.m))]
    v = [adam.v[k][parents] * (~newborn).reshape((-1,) + (1,) * (adam.v[k].ndim - 1)) for k in range(len(adam.v))]
    return new, AdamState(m, v, adam.step)


def train_refine(clouds: list[CloudParams], program: TimelineProgram, dyn: DynamicsModel,
                 guidance: GuidanceProvider, config: TrainConfig, state: TrainState | None = None,
                 until: int | None = None, callback: Callable | None = None):
    """Optimise cloud parameters under frozen nets; returns (clouds, state).

    ``clouds`` may be replaced by densification, so use the returned list.
    """
    if config.phase != REFINE:
        raise ValueError("train_refine needs phase='refine'")
    for p in dyn.parameters():
        p.requires_grad_(False)
    net_digest = params_digest([dyn])
    dtype = dyn.dtype
    clouds = list(clouds)
    for cp in clouds:
        cp.set_trainable(True)
    state = state or TrainState()
    for i, cp in enumerate(clouds):
        state.adam.setdefault(f"cloud.{i}", AdamState.zeros_like([getattr(cp, g) for g in _CLOUD_GROUPS]))
    if not state.grad_accum:
        state.grad_accum = [np.zeros(len(cp)) for cp in clouds]
        state.grad_count = [np.zeros(len(cp)) for cp in clouds]
    times = np.asarray(guidance.times)
    until = config.steps if until is None else until
    lrs = _cloud_lrs(config)
    while state.step < until:
        t0 = time.perf_counter()
        rng = step_rng(config.seed, state.step)
        view = int(rng.integers(len(guidance.cameras)))
        k = int(rng.integers(len(times)))
        st = evaluate_scene(clouds, program, dyn, float(times[k]))
        frame = st.render(guidance.cameras[view])
        res = guidance.evaluate(frame.detach().double().numpy()[None],
                                GuidanceContext(view, np.array([k]), times[[k]], config.prompt))
        if not np.isfinite(res.loss):
            raise NumericAbort(state.step, "loss")
        for cp in clouds:
            for g in _CLOUD_GROUPS:
                getattr(cp, g).grad = None
        (frame * torch.from_numpy(res.grad[0]).to(frame.dtype)).sum().backward()
        for i, cp in enumerate(clouds):
            group = [getattr(cp, g) for g in _CLOUD_GROUPS]
            g_means = cp.means.grad
            if g_means is not None:
                mag = g_means.detach().double().norm(dim=-1).numpy()
                state.grad_accum[i] += mag
                state.grad_count[i] += 1
            try:
                step_adam(group, [p.grad for p in group], state.adam[f"cloud.{i}"], lrs)
            except FloatingPointError:
                raise NumericAbort(state.step, "gradient") from None
            with torch.no_grad():
                cp.colors.clamp_(0.0, 1.0)
        state.peak_points = max(state.peak_points, sum(len(c) for c in clouds))
        state.history.append({"step": state.step, "loss": res.loss, "points": sum(len(c) for c in clouds),
                              "wall_ms": (time.perf_counter() - t0) * 1e3})
        state.step += 1
        limit = config.densify_until if config.densify_until is not None else config.steps
        if config.densify and state.step % config.densify_interval == 0 and state.step < limit:
            clouds = _densify_all(clouds, state, config, dtype)
        if callback:
            callback(state, clouds)
    if params_digest([dyn]) != net_digest:
        raise PhaseViolation("dynamics nets changed during refinement")
    for cp in clouds:
        for p in cp.parameters():
            p.grad = None
    return clouds, state


def _densify_all(clouds, state: TrainState, config: TrainConfig, dtype):
    out = []
    for i, cp in enumerate(clouds):
        mean_grad = state.grad_accum[i] / np.maximum(state.grad_count[i], 1)
        cloud = cp.to_cloud()
        new_cloud, parents = densify_plan(cloud, mean_grad, config)
        new_cp, adam = _reparent(cp, new_cloud, parents, state.adam[f"cloud.{i}"], dtype)
        state.adam[f"cloud.{i}"] = adam
        state.grad_accum[i] = np.zeros(len(new_cp))
        state.grad_count[i] = np.zeros(len(new_cp))
        out.append(new_cp)
    return out


# ---------------------------------------------------------------- resume

def save_resume(path, clouds, dyn: DynamicsModel, state: TrainState) -> None:
    """Everything needed to continue a run bit-for-bit."""
    blob = {
        "dyn": dyn.state_dict(),
        "clouds": [{"state": cp.state_dict(), "label": cp.label,
                    "exact": cp._opacity_exact} for cp in clouds],
        "state": {
            "step": state.step,
            "adam": {k: {"m": a.m, "v": a.v, "step": a.step} for k, a in state.adam.items()},
            "history": state.history,
            "grad_accum": state.grad_accum,
            "grad_count": state.grad_count,
            "peak_points": state.peak_points,
        },
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_resume(path, dyn: DynamicsModel, dtype=None):
    """Restore (clouds, state) into ``dyn`` from :func:`save_resume` output."""
    blob = torch.load(path, weights_only=False)
    dyn.load_state_dict(blob["dyn"])
    dtype = dtype or dyn.dtype
    clouds = []
    for entry in blob["clouds"]:
        sd = entry["state"]
        n = sd["point_ids"].shape[0]
        cp = CloudParams(GaussianCloud.empty(), dtype=dtype)
        cp.means = torch.nn.Parameter(torch.zeros(n, 3, dtype=dtype), requires_grad=False)
        cp.log_scales = torch.nn.Parameter(torch.zeros(n, 3, dtype=dtype), requires_grad=False)
        cp.quats = torch.nn.Parameter(torch.zeros(n, 4, dtype=dtype), requires_grad=False)
        cp.opacity_logit = torch.nn.Parameter(torch.zeros(n, dtype=dtype), requires_grad=False)
        cp.colors = torch.nn.Parameter(torch.zeros(n, 3, dtype=dtype), requires_grad=False)
        cp.point_ids = torch.zeros(n, dtype=torch.int64)
        cp.load_state_dict(sd)
        cp.label = entry["label"]
        cp._opacity_exact = entry["exact"]
        clouds.append(cp)
    s = blob["state"]
    state = TrainState(
        step=s["step"],
        adam={k: AdamState(a["m"], a["v"], a["step"]) for k, a in s["adam"].items()},
        history=s["history"], grad_accum=s["grad_accum"], grad_count=s["grad_count"],
        peak_points=s["peak_points"],
    )
    return clouds, state


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(ref, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)
