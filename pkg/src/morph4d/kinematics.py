"""Rigid object motion: ``x = R(angles(t)) x_canonical + translation(t)``.

Angles compose extrinsically about x, then y, then z:
``R = Rz(gamma) @ Ry(beta) @ Rx(alpha)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .plan import TimelineProgram
from .scene import GaussianCloud, matrix_to_quat, quat_multiply


@dataclass(frozen=True)
class Pose:
    translation: np.ndarray
    angles: np.ndarray
    rotation: np.ndarray

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.zeros(3), np.eye(3))

    @classmethod
    def from_angles(cls, translation, angles) -> "Pose":
        angles = np.asarray(angles, dtype=np.float64)
        return cls(np.asarray(translation, dtype=np.float64), angles, rotation_matrix(angles))


def rotation_matrix(angles) -> np.ndarray:
    a, b, c = (float(v) for v in np.asarray(angles, dtype=np.float64).reshape(3))
    if not all(np.isfinite([a, b, c])):
        raise ValueError("rotation angles must be finite")
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz @ ry @ rx


def object_pose(program: TimelineProgram, obj: int, t: float) -> Pose:
    if not 0 <= obj < program.n_objects:
        raise IndexError(f"object index {obj} outside [0, {program.n_objects})")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    track = program.objects[obj]
    translation = track.init_pos + track.displacement(t)
    angles = track.init_angle + track.rotation_angle(t)
    return Pose(translation, angles, rotation_matrix(angles))


def transform_point(pose: Pose, x) -> np.ndarray:
    return pose.rotation @ np.asarray(x, dtype=np.float64) + pose.translation


def transform_cloud(cloud: GaussianCloud, pose: Pose) -> GaussianCloud:
    """Rigidly move a canonical cloud into world space."""
    if np.array_equal(pose.rotation, np.eye(3)):
        positions = cloud.positions + pose.translation
        rotations = cloud.rotations
    else:
        positions = cloud.positions @ pose.rotation.T + pose.translation
        rotations = quat_multiply(matrix_to_quat(pose.rotation), cloud.rotations)
    if not np.any(pose.translation) and rotations is cloud.rotations:
        positions = cloud.positions
    return cloud.replace(positions=positions, rotations=rotations, canonical=False)
