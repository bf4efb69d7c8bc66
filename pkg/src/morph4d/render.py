"""Differentiable CPU splatting.

Gaussians are projected with the usual EWA linearisation
(``J W Sigma W^T J^T`` plus a 0.3 px^2 floor), sorted by camera depth (ties by
object then point id) and composited front to back over a black background.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import _raster
from .scene import GaussianCloud, GaussianPoint, SceneSnapshot, eval_field

COV2D_FLOOR = 0.3
CULL_SIGMA = 4.0
NEAR = 0.01
TILE_ROWS = 16
EVAL_ORBIT_AZIMUTHS = (-120.0, -60.0, 0.0, 60.0, 120.0, 180.0)


@dataclass(frozen=True)
class Camera:
    """Orbit camera; world is y-up, azimuth 0 looks down -z from +z."""

    azimuth: float = 0.0
    elevation: float = 15.0
    radius: float = 4.0
    fov: float = 45.0
    width: int = 256
    height: int = 256
    target: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("camera radius must be positive")
        if not 0.0 < self.fov < 180.0:
            raise ValueError("fov must lie in (0, 180) degrees")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def position(self) -> np.ndarray:
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        offset = np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        return np.asarray(self.target, dtype=np.float64) + self.radius * offset

    @property
    def world_to_cam(self) -> np.ndarray:
        """Rows are the camera x (right), y (down), z (forward) axes."""
        fwd = np.asarray(self.target, dtype=np.float64) - self.position
        fwd /= np.linalg.norm(fwd)
        up = np.array([0.0, 1.0, 0.0])
        if abs(fwd @ up) > 1 - 1e-9:
            up = np.array([0.0, 0.0, -1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(self.fov) / 2)

    @property
    def principal(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def with_(self, **changes) -> "Camera":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return Camera(**fields)

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in ((k, getattr(self, k)) for k in self.__dataclass_fields__)}

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        obj = dict(obj)
        if "target" in obj:
            obj["target"] = tuple(obj["target"])
        return cls(**obj)


def eval_orbit(base: Camera) -> list[Camera]:
    return [base.with_(azimuth=az) for az in EVAL_ORBIT_AZIMUTHS]


@dataclass
class Splat2D:
    mean: np.ndarray
    cov: np.ndarray
    depth: float
    point_id: int
    opacity: float
    color: np.ndarray


@dataclass
class FrameBatch:
    images: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    times: np.ndarray
    cameras: list[Camera] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


# ---------------------------------------------------------- torch geometry

def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def covariance_tensor(scales: torch.Tensor, quats: torch.Tensor) -> torch.Tensor:
    rot = quat_to_rotmat(quats)
    m = rot * scales[..., None, :]
    return m @ m.transpose(-1, -2)


def project_tensors(means: torch.Tensor, cov3d: torch.Tensor, camera: Camera):
    """Screen means (N, 2), 2D covariances (N, 2, 2) and depths (N,)."""
    dtype = means.dtype
    w2c = torch.as_tensor(camera.world_to_cam, dtype=dtype)
    pos = torch.as_tensor(camera.position, dtype=dtype)
    cam = (means - pos) @ w2c.T
    x, y, z = cam.unbind(-1)
    f = camera.focal
    cx, cy = camera.principal
    safe_z = torch.where(z > NEAR, z, torch.full_like(z, 1.0))
    u = f * x / safe_z + cx
    v = f * y / safe_z + cy
    zero = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([f / safe_z, zero, -f * x / safe_z ** 2], -1),
        torch.stack([zero, f / safe_z, -f * y / safe_z ** 2], -1),
    ], -2)
    t = jac @ w2c
    cov2d = t @ cov3d @ t.transpose(-1, -2)
    cov2d = cov2d + COV2D_FLOOR * torch.eye(2, dtype=dtype)
    return torch.stack([u, v], -1), cov2d, z


def visible_mask(means2d: np.ndarray, cov2d: np.ndarray, depth: np.ndarray, camera: Camera) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    r = CULL_SIGMA * np.sqrt(lam)
    u, v = means2d[:, 0], means2d[:, 1]
    inside = (u > -r) & (u < camera.width + r) & (v > -r) & (v < camera.height + r)
    return (depth > NEAR) & inside & np.isfinite(u) & np.isfinite(v)


def project(point: GaussianPoint, effective_opacity: float, camera: Camera) -> Splat2D | None:
    """Single-point projection; ``None`` when culled."""
    means = torch.tensor(point.position[None], dtype=torch.float64)
    cov = covariance_tensor(torch.tensor(point.scale[None]), torch.tensor(point.rotation[None]))
    m2, c2, z = project_tensors(means, cov, camera)
    m2, c2, z = m2.numpy(), c2.numpy(), z.numpy()
    if not visible_mask(m2, c2, z, camera)[0]:
        return None
    return Splat2D(m2[0], c2[0], float(z[0]), point.point_id, float(effective_opacity), point.color.copy())


# ------------------------------------------------------------- compositing

def _tiles(height: int):
    return [(r0, min(height, r0 + TILE_ROWS)) for r0 in range(0, height, TILE_ROWS)]


def _tile_candidates(my: np.ndarray, radius: np.ndarray | None, r0: int, r1: int) -> np.ndarray:
    n = len(my)
    if radius is None:
        return np.arange(n, dtype=np.int64)
    keep = (my + radius >= r0) & (my - radius <= r1)
    return np.nonzero(keep)[0].astype(np.int64)


def _run_tiles(fn, tiles, workers: int):
    if workers <= 1 or len(tiles) <= 1:
        return [fn(k, tile) for k, tile in enumerate(tiles)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda kt: fn(*kt), enumerate(tiles)))


class _Composite(torch.autograd.Function):
    """Front-to-back alpha compositing of pre-sorted 2D splats."""

    @staticmethod
    def forward(ctx, means2d, conics, opacity, colors, height, width, cutoff, workers):
        arrays = [np.ascontiguousarray(x.detach().double().numpy()) for x in (means2d, conics, opacity, colors)]
        m2, con, op, col = arrays
        cutoff2 = 0.0 if cutoff is None else float(cutoff) ** 2
        radius = None
        if cutoff is not None and len(op):
            a, b, c = con[:, 0], con[:, 1], con[:, 2]
            lam_min = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)
            radius = cutoff / np.sqrt(np.maximum(lam_min, 1e-300))
        tiles = _tiles(height)
        cands = [_tile_candidates(m2[:, 1], radius, r0, r1) for r0, r1 in tiles]
        out = np.zeros((height, width, 3))

        def run(k, tile):
            _raster.forward_tile(tile[0], tile[1], width, cands[k], m2[:, 0].copy(), m2[:, 1].copy(),
                                 con[:, 0].copy(), con[:, 1].copy(), con[:, 2].copy(), op, col, cutoff2, out)

        _run_tiles(run, tiles, workers)
        ctx.saved = (m2, con, op, col, cutoff2, tiles, cands, width, workers)
        ctx.dtype = means2d.dtype
        return torch.from_numpy(out).to(means2d.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        m2, con, op, col, cutoff2, tiles, cands, width, workers = ctx.saved
        g = np.ascontiguousarray(grad_out.detach().double().numpy())
        n = len(op)
        partials = np.zeros((len(tiles), n, _raster.N_GRAD))
        cols = (m2[:, 0].copy(), m2[:, 1].copy(), con[:, 0].copy(), con[:, 1].copy(), con[:, 2].copy())

        def run(k, tile):
            _raster.backward_tile(tile[0], tile[1], width, cands[k], *cols, op, col, cutoff2, g, partials[k])

        _run_tiles(run, tiles, workers)
        total = _raster.reduce_tiles(partials) if len(tiles) else np.zeros((n, _raster.N_GRAD))
        as_t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(ctx.dtype)
        return (as_t(total[:, 0:2]), as_t(total[:, 2:5]), as_t(total[:, 5]), as_t(total[:, 6:9]),
                None, None, None, None)


def conic_tensor(cov2d: torch.Tensor) -> torch.Tensor:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], -1)


def render_gaussians(means: torch.Tensor, quats: torch.Tensor, scales: torch.Tensor,
                     opacity: torch.Tensor, colors: torch.Tensor, keys: np.ndarray,
                     camera: Camera, cutoff: float | None = None, workers: int = 1) -> torch.Tensor:
    """Render world-space Gaussians to an (H, W, 3) tensor.

    ``keys`` is an (N, 2) integer array (object index, point id) used to break
    depth ties. Gradients flow to every tensor argument; the depth order is
    treated as locally constant.
    """
    h, w = camera.height, camera.width
    if means.shape[0] == 0:
        return torch.zeros((h, w, 3), dtype=means.dtype) + 0.0 * means.sum()
    cov3d = covariance_tensor(scales, quats)
    m2, c2, depth = project_tensors(means, cov3d, camera)
    m2n, c2n, dn = m2.detach().numpy(), c2.detach().numpy(), depth.detach().numpy()
    keep = np.nonzero(visible_mask(m2n, c2n, dn, camera))[0]
    keys = np.asarray(keys).reshape(-1, 2)
    order = keep[np.lexsort((keys[keep, 1], keys[keep, 0], dn[keep]))]
    order_t = torch.from_numpy(order)
    return _Composite.apply(m2[order_t], conic_tensor(c2[order_t]), opacity[order_t], colors[order_t],
                            h, w, cutoff, workers)


# ------------------------------------------------------------ snapshots

@dataclass
class SnapshotTensors:
    means: torch.Tensor
    quats: torch.Tensor
    scales: torch.Tensor
    opacity: torch.Tensor
    colors: torch.Tensor
    keys: np.ndarray


def snapshot_tensors(snapshot: SceneSnapshot, dtype=torch.float64) -> SnapshotTensors:
    clouds = snapshot.clouds
    cat = lambda attr: torch.from_numpy(np.concatenate([getattr(c, attr) for c in clouds])
                                        if clouds else np.zeros((0, 3))).to(dtype)
    keys = (np.concatenate([np.stack([np.full(len(c), k), c.point_ids], 1) for k, c in enumerate(clouds)])
            if clouds else np.zeros((0, 2), np.int64))
    eff = torch.from_numpy(np.concatenate(snapshot.effective_opacity) if clouds else np.zeros(0)).to(dtype)
    quats = torch.from_numpy(np.concatenate([c.rotations for c in clouds]) if clouds
                             else np.zeros((0, 4))).to(dtype)
    return SnapshotTensors(cat("positions"), quats, cat("scales"), eff, cat("colors"), keys)


def render_frame(snapshot: SceneSnapshot, camera: Camera, record_tape: bool = False,
                 cutoff: float | None = None, workers: int = 1, dtype=torch.float64):
    """Render a snapshot; returns an (H, W, 3) array, or (image tensor, tape).

    With ``record_tape`` the tape watches ``opacity`` (base alpha), ``p_trans``,
    ``color`` and ``means`` so that :func:`morph4d.neural.backward` returns
    gradients for each.
    """
    from .neural import Tape

    st = snapshot_tensors(snapshot, dtype)
    if not record_tape:
        with torch.no_grad():
            img = render_gaussians(st.means, st.quats, st.scales, st.opacity, st.colors, st.keys,
                                   camera, cutoff, workers)
        return img.numpy().astype(np.float64)
    tape = Tape()
    alpha = torch.from_numpy(np.concatenate([c.opacities for c in snapshot.clouds])).to(dtype)
    if snapshot.p_trans is not None:
        p = torch.from_numpy(np.concatenate(snapshot.p_trans)).to(dtype)
    else:
        p = torch.ones_like(alpha)
    alpha = tape.watch("opacity", alpha)
    p = tape.watch("p_trans", p)
    colors = tape.watch("color", st.colors)
    means = tape.watch("means", st.means)
    img = render_gaussians(means, st.quats, st.scales, alpha * p, colors, st.keys, camera, cutoff, workers)
    tape.record(img)
    return img, tape


def eval_field_image(cloud: GaussianCloud, camera: Camera, depth: float | None = None) -> np.ndarray:
    """Occlusion-free field sampled on the plane ``z_cam = depth``.

    Pixel centers are back-projected to that plane (default: the depth of the
    look-at target), so a Gaussian centered on the plane peaks at its
    projected mean.
    """
    if depth is None:
        depth = camera.radius
    h, w = camera.height, camera.width
    f = camera.focal
    cx, cy = camera.principal
    vs, us = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    cam = np.stack([(us - cx) / f * depth, (vs - cy) / f * depth, np.full_like(us, depth)], -1)
    world = cam.reshape(-1, 3) @ camera.world_to_cam + camera.position
    return eval_field(cloud, world).reshape(h, w, 3)


# ------------------------------------------------------------------ files

def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_pfm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines, pos = [], 0
    while len(lines) < 3:
        nl = data.index(b"\n", pos)
        lines.append(data[pos:nl].decode("ascii").strip())
        pos = nl + 1
    if lines[0] != "PF":
        raise ValueError(f"{path}: only color PFM supported")
    w, h = (int(v) for v in lines[1].split())
    endian = "<" if float(lines[2]) < 0 else ">"
    img = np.frombuffer(data, dtype=endian + "f4", count=w * h * 3, offset=pos).reshape(h, w, 3)
    return img[::-1].astype(np.float64)
