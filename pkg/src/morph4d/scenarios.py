"""Small synthetic scenes with known answers, shared by tests and scripts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .pipeline import CloudParams, DynamicsModel, evaluate_scene
from .plan import ObjectTrack, TimelineProgram, Transition, static_timeline
from .render import Camera, FrameBatch, eval_orbit
from .scene import GaussianCloud, make_primitive

RED = (0.9, 0.1, 0.1)
BLUE = (0.1, 0.2, 0.9)


def oracle_frames(clouds: list[GaussianCloud], program: TimelineProgram, visible, camera: Camera,
                  frames: int | None = None) -> FrameBatch:
    """Render with hard visibility ``visible(obj, t) -> bool`` and no nets."""
    frames = program.frame_count if frames is None else frames
    times = program.frame_times(frames)
    bare = TimelineProgram(program.objects, [], program.frame_count, program.euler)
    images = []
    with torch.no_grad():
        for t in times:
            keep = [i for i in range(len(clouds)) if visible(i, float(t))]
            sub = TimelineProgram([bare.objects[i] for i in keep], [], bare.frame_count, bare.euler)
            sub_dyn = DynamicsModel(len(keep), [], dtype=torch.float64)
            params = [CloudParams(clouds[i], dtype=torch.float64) for i in keep]
            if params:
                img = evaluate_scene(params, sub, sub_dyn, float(t)).render(camera).numpy()
            else:
                img = np.zeros((camera.height, camera.width, 3))
            images.append(img)
    return FrameBatch(np.clip(np.stack(images), 0, 1).astype(np.float32), times, [camera] * frames)


@dataclass
class TransitionScenario:
    clouds: list[GaussianCloud]
    program: TimelineProgram
    cameras: list[Camera]
    targets: list[FrameBatch]
    switch: float


def transition_scenario(n_points: int = 500, size: int = 32, azimuths=(-120, 0, 120),
                        period=(0.4, 0.6), switch: float = 0.5, frames: int = 16,
                        seed: int = 0) -> TransitionScenario:
    """Red sphere visible before ``switch``, blue box from ``switch`` on.

    Both sit at the origin; the plan declares one transition pair 0 -> 1.
    """
    a = make_primitive("sphere", n_points, seed=seed + 1, color=RED, label="sphere")
    b = make_primitive("box", n_points, seed=seed + 2, color=BLUE, label="box")
    base = static_timeline(2, frame_count=frames)
    program = TimelineProgram(base.objects, [Transition(0, 1, *period)], frames)
    cams = [Camera(azimuth=az, elevation=15.0, radius=4.5, fov=45.0, width=size, height=size)
            for az in azimuths]
    visible = lambda i, t: (t < switch) if i == 0 else (t >= switch)
    targets = [oracle_frames([a, b], program, visible, c, frames) for c in cams]
    return TransitionScenario([a, b], program, cams, targets, switch)


def crossing_fraction(p_before: np.ndarray, p_after: np.ndarray, falling: bool) -> float:
    """Share of points with p on opposite sides of 0.5 at two times.

    ``p`` is continuous in t, so opposite sides imply a crossing in between.
    """
    if falling:
        return float(np.mean((p_before > 0.5) & (p_after < 0.5)))
    return float(np.mean((p_before < 0.5) & (p_after > 0.5)))


@dataclass
class RefineScenario:
    start: GaussianCloud
    target: GaussianCloud
    program: TimelineProgram
    cameras: list[Camera]
    targets: list[FrameBatch]


def refine_scenario(start_points: int = 200, target_points: int = 2000, size: int = 48,
                    color=(0.9, 0.5, 0.1), frames: int = 16, seed: int = 0) -> RefineScenario:
    """Sparse gray sphere to be refined toward renders of a dense colored one."""
    start = make_primitive("sphere", start_points, seed=seed + 11, color=(0.5, 0.5, 0.5), opacity=0.5)
    target = make_primitive("sphere", target_points, seed=seed + 12, color=color)
    program = static_timeline(1, frame_count=frames)
    cams = eval_orbit(Camera(elevation=15.0, radius=4.0, fov=45.0, width=size, height=size))
    targets = [oracle_frames([target], program, lambda i, t: True, c, frames) for c in cams]
    return RefineScenario(start, target, program, cams, targets)
