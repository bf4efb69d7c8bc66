"""Gaussian point clouds: representation, field evaluation and PLY I/O.

Covariances are stored factored as (scale, unit quaternion wxyz) and
expanded as ``R diag(s)^2 R^T`` on demand.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SH_C0 = 0.28209479177387814

PLY_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)

CANONICAL_CENTROID_TOL = 0.05


class CloudError(ValueError):
    """Invalid point or cloud data."""


class PlyError(CloudError):
    pass


class SingularCovarianceError(CloudError):
    def __init__(self, point_id: int):
        super().__init__(f"singular covariance at point_id {point_id}")
        self.point_id = point_id


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) unit quaternions in wxyz order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (wxyz, w >= 0) for a single rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return -q if q[0] < 0 else q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b for broadcastable (..., 4) wxyz arrays."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


@dataclass(frozen=True)
class GaussianPoint:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    point_id: int

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise CloudError(f"point {self.point_id}: scale must be positive, got {scale}")
        if not 0.0 <= self.opacity <= 1.0:
            raise CloudError(f"point {self.point_id}: opacity {self.opacity} outside [0, 1]")
        norm = np.linalg.norm(rot)
        if not np.isfinite(norm) or norm == 0:
            raise CloudError(f"point {self.point_id}: degenerate quaternion")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", rot / norm)
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "point_id", int(self.point_id))


def _frozen(a, dtype, shape) -> np.ndarray:
    a = np.array(a, dtype=dtype).reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianCloud:
    """One object's Gaussians, stored as parallel arrays sorted by nothing in
    particular; ``point_ids`` fix the identity and summation order."""

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    point_ids: np.ndarray
    canonical: bool = True
    label: str = ""

    def __post_init__(self):
        n = len(np.asarray(self.point_ids).reshape(-1))
        object.__setattr__(self, "positions", _frozen(self.positions, np.float64, (n, 3)))
        object.__setattr__(self, "scales", _frozen(self.scales, np.float64, (n, 3)))
        rot = np.array(self.rotations, dtype=np.float64).reshape(n, 4)
        norms = np.linalg.norm(rot, axis=1)
        if n and (not np.all(np.isfinite(norms)) or np.any(norms == 0)):
            raise CloudError("degenerate quaternion in cloud")
        off = np.abs(norms - 1.0) > 1e-12
        if np.any(off):
            rot[off] = rot[off] / norms[off, None]
        object.__setattr__(self, "rotations", _frozen(rot, np.float64, (n, 4)))
        object.__setattr__(self, "opacities", _frozen(self.opacities, np.float64, (n,)))
        object.__setattr__(self, "colors", _frozen(self.colors, np.float64, (n, 3)))
        object.__setattr__(self, "point_ids", _frozen(self.point_ids, np.int64, (n,)))
        if n:
            if np.any(~(self.scales > 0)):
                raise CloudError("scales must be positive")
            if np.any(~((self.opacities >= 0) & (self.opacities <= 1))):
                raise CloudError("opacities must lie in [0, 1]")
            if len(np.unique(self.point_ids)) != n:
                raise CloudError("point_ids must be unique")

    def __len__(self) -> int:
        return len(self.point_ids)

    @property
    def points(self) -> tuple[GaussianPoint, ...]:
        return tuple(
            GaussianPoint(self.positions[i], self.scales[i], self.rotations[i],
                          self.opacities[i], self.colors[i], self.point_ids[i])
            for i in range(len(self))
        )

    @classmethod
    def from_points(cls, points: Iterable[GaussianPoint], canonical: bool = True,
                    label: str = "") -> "GaussianCloud":
        pts = list(points)
        if not pts:
            return cls.empty(canonical=canonical, label=label)
        return cls(
            positions=np.stack([p.position for p in pts]),
            scales=np.stack([p.scale for p in pts]),
            rotations=np.stack([p.rotation for p in pts]),
            opacities=np.array([p.opacity for p in pts]),
            colors=np.stack([p.color for p in pts]),
            point_ids=np.array([p.point_id for p in pts]),
            canonical=canonical,
            label=label,
        )

    @classmethod
    def empty(cls, canonical: bool = True, label: str = "") -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros(0, dtype=np.int64), canonical, label)

    def replace(self, **changes) -> "GaussianCloud":
        return dataclasses.replace(self, **changes)

    def subset(self, index) -> "GaussianCloud":
        return self.replace(
            positions=self.positions[index], scales=self.scales[index],
            rotations=self.rotations[index], opacities=self.opacities[index],
            colors=self.colors[index], point_ids=self.point_ids[index],
        )

    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0) if len(self) else np.zeros(3)

    def covariances(self) -> np.ndarray:
        rot = quat_to_matrix(self.rotations)
        return rot @ (self.scales[:, :, None] ** 2 * np.swapaxes(rot, 1, 2))


def concat_clouds(clouds: Sequence[GaussianCloud], label: str = "") -> GaussianCloud:
    """Concatenate clouds; point ids must already be disjoint."""
    clouds = list(clouds)
    if not clouds:
        return GaussianCloud.empty(label=label)
    return GaussianCloud(
        positions=np.concatenate([c.positions for c in clouds]),
        scales=np.concatenate([c.scales for c in clouds]),
        rotations=np.concatenate([c.rotations for c in clouds]),
        opacities=np.concatenate([c.opacities for c in clouds]),
        colors=np.concatenate([c.colors for c in clouds]),
        point_ids=np.concatenate([c.point_ids for c in clouds]),
        canonical=all(c.canonical for c in clouds),
        label=label or clouds[0].label,
    )


@dataclass
class SceneSnapshot:
    """World-space clouds at one time, with per-point effective opacity."""

    clouds: list[GaussianCloud]
    effective_opacity: list[np.ndarray]
    t: float
    p_trans: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.clouds) != len(self.effective_opacity):
            raise CloudError("one effective-opacity array per cloud required")
        for cloud, eff in zip(self.clouds, self.effective_opacity):
            eff = np.asarray(eff)
            if eff.shape != (len(cloud),):
                raise CloudError("effective opacity arity mismatch")
            if np.any((eff < 0) | (eff > 1)):
                raise CloudError("effective opacity outside [0, 1]")

    @classmethod
    def static(cls, clouds: Sequence[GaussianCloud], t: float = 0.0) -> "SceneSnapshot":
        return cls(list(clouds), [c.opacities.copy() for c in clouds], t)


def covariance_of(point: GaussianPoint) -> np.ndarray:
    rot = quat_to_matrix(point.rotation)
    cov = rot @ np.diag(point.scale ** 2) @ rot.T
    return 0.5 * (cov + cov.T)


def eval_field(cloud: GaussianCloud, x) -> np.ndarray:
    """Occlusion-free Gaussian field sum at one or more positions.

    ``x`` is a 3-vector or an (K, 3) array; returns RGB of matching shape.
    Terms are accumulated in ascending point_id order.
    """
    if len(cloud) == 0:
        raise CloudError("eval_field needs a nonempty cloud")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x.reshape(-1, 3)
    with np.errstate(divide="ignore", over="ignore"):
        inv_scale2 = 1.0 / cloud.scales ** 2
    bad = ~np.all(np.isfinite(inv_scale2), axis=1)
    if np.any(bad):
        raise SingularCovarianceError(int(cloud.point_ids[np.argmax(bad)]))
    rot = quat_to_matrix(cloud.rotations)
    out = np.zeros((len(xs), 3))
    for i in np.argsort(cloud.point_ids, kind="stable"):
        local = (xs - cloud.positions[i]) @ rot[i]
        maha = local ** 2 @ inv_scale2[i]
        out += (cloud.opacities[i] * np.exp(-0.5 * maha))[:, None] * cloud.colors[i]
    return out[0] if single else out


# ---------------------------------------------------------------- PLY I/O

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


def _f32_preimage(values: np.ndarray, decode, guess: np.ndarray) -> np.ndarray:
    """float32 ``s`` near ``guess`` with ``decode(float64(s)) == values``.

    Falls back to ``guess`` where no neighbor within 2 ulp decodes exactly;
    one more import/export cycle then becomes a fixed point.
    """
    guess = np.asarray(guess, dtype=np.float32)
    out = guess.copy()
    found = decode(guess.astype(np.float64)) == values
    for steps in (1, -1, 2, -2):
        if found.all():
            break
        cand = guess.copy()
        direction = np.float32(np.inf) if steps > 0 else np.float32(-np.inf)
        for _ in range(abs(steps)):
            cand = np.nextafter(cand, direction)
        hit = ~found & (decode(cand.astype(np.float64)) == values)
        out[hit] = cand[hit]
        found |= hit
    return out


def _quat_preimage(q: np.ndarray) -> np.ndarray:
    guess = q.astype(np.float32)
    out = guess.copy()
    found = np.all(quat_normalize(guess.astype(np.float64)) == q, axis=1)
    if found.all():
        return out
    ups = np.nextafter(guess, np.float32(np.inf))
    downs = np.nextafter(guess, np.float32(-np.inf))
    choices = np.stack([guess, ups, downs])  # (3, N, 4)
    for combo in np.ndindex(3, 3, 3, 3):
        if found.all():
            break
        cand = np.stack([choices[c, :, k] for k, c in enumerate(combo)], axis=1)
        hit = ~found & np.all(quat_normalize(cand.astype(np.float64)) == q, axis=1)
        out[hit] = cand[hit]
        found |= hit
    return out


def _decode_color(f):
    return 0.5 + SH_C0 * f


def encode_fields(cloud: GaussianCloud) -> dict[str, np.ndarray]:
    """Stored float32 PLY columns for a cloud."""
    logits = np.clip(_logit(cloud.opacities), -60.0, 60.0)
    f_dc = _f32_preimage(cloud.colors, _decode_color, (cloud.colors - 0.5) / SH_C0)
    fields = {
        "x": cloud.positions[:, 0].astype(np.float32),
        "y": cloud.positions[:, 1].astype(np.float32),
        "z": cloud.positions[:, 2].astype(np.float32),
        "opacity": _f32_preimage(cloud.opacities, _sigmoid, logits),
    }
    for k in range(3):
        fields[f"f_dc_{k}"] = f_dc[:, k]
    log_scale = _f32_preimage(cloud.scales, np.exp, np.log(cloud.scales))
    for k in range(3):
        fields[f"scale_{k}"] = log_scale[:, k]
    rot = _quat_preimage(cloud.rotations) if len(cloud) else np.zeros((0, 4), np.float32)
    for k in range(4):
        fields[f"rot_{k}"] = rot[:, k]
    return fields


def decode_fields(fields: dict[str, np.ndarray], point_ids=None, canonical: bool = False,
                  label: str = "", recenter: bool = False) -> GaussianCloud:
    n = len(fields["x"])
    col = lambda *names: np.stack([np.asarray(fields[k], dtype=np.float32).astype(np.float64)
                                   for k in names], axis=1) if n else np.zeros((0, len(names)))
    positions = col("x", "y", "z")
    raw_rot = col("rot_0", "rot_1", "rot_2", "rot_3")
    norms = np.linalg.norm(raw_rot, axis=1)
    if np.any(norms == 0):
        raise PlyError(f"zero quaternion at element {int(np.argmax(norms == 0))}")
    scales = np.exp(col("scale_0", "scale_1", "scale_2"))
    if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
        bad = np.argmax(np.any((scales <= 0) | ~np.isfinite(scales), axis=1))
        raise PlyError(f"scale under/overflows at element {int(bad)}")
    if recenter and n:
        c = positions.mean(axis=0)
        if np.linalg.norm(c) > CANONICAL_CENTROID_TOL:
            positions = (positions - c).astype(np.float32).astype(np.float64)
    return GaussianCloud(
        positions=positions,
        scales=scales,
        rotations=raw_rot / norms[:, None] if n else raw_rot,
        opacities=_sigmoid(np.asarray(fields["opacity"], np.float32).astype(np.float64)),
        colors=_decode_color(col("f_dc_0", "f_dc_1", "f_dc_2")),
        point_ids=np.arange(n) if point_ids is None else point_ids,
        canonical=canonical,
        label=label,
    )


def ply_representable(cloud: GaussianCloud) -> GaussianCloud:
    """Snap a cloud to values that survive a PLY round-trip bitwise."""
    snapped = decode_fields(encode_fields(cloud), point_ids=cloud.point_ids,
                            canonical=cloud.canonical, label=cloud.label)
    return decode_fields(encode_fields(snapped), point_ids=cloud.point_ids,
                         canonical=cloud.canonical, label=cloud.label)


def export_ply(cloud: GaussianCloud) -> bytes:
    fields = encode_fields(cloud)
    header = ["ply", "format binary_little_endian 1.0"]
    if cloud.label:
        header.append(f"comment label {cloud.label}")
    header.append(f"element vertex {len(cloud)}")
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    dtype = np.dtype([(name, "<f4") for name in PLY_PROPERTIES])
    body = np.empty(len(cloud), dtype=dtype)
    for name in PLY_PROPERTIES:
        body[name] = fields[name]
    return ("\n".join(header) + "\n").encode("ascii") + body.tobytes()


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def import_ply(data: bytes, canonical: bool = False, label: str | None = None) -> GaussianCloud:
    """Parse a binary little-endian 3DGS PLY.

    With ``canonical=True`` the cloud is recentered (and re-quantized to
    float32) when its centroid is more than 0.05 from the origin.
    """
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("not a PLY file (missing magic or end_header)")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyError("truncated header")
    header = data[:nl].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    file_label = ""
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment" and len(parts) >= 3 and parts[1] == "label":
            file_label = " ".join(parts[2:])
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyError("property before element")
            if parts[1] == "list":
                raise PlyError(f"list property {parts[-1]} not supported")
            if parts[1] not in _PLY_TYPES:
                raise PlyError(f"unknown property type {parts[1]}")
            elements[-1][2].append((parts[2], "<" + _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise PlyError(f"unsupported PLY format {fmt!r}")
    offset = 0
    vertex = None
    for name, count, props in elements:
        dtype = np.dtype(props)
        size = dtype.itemsize * count
        if offset + size > len(body):
            raise PlyError(f"truncated body in element {name!r}")
        if name == "vertex":
            vertex = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        offset += size
    if vertex is None:
        raise PlyError("no vertex element")
    names = vertex.dtype.names or ()
    missing = [p for p in PLY_PROPERTIES if p not in names]
    if missing:
        raise PlyError(f"missing required property {missing[0]!r}" +
                       (f" (and {', '.join(missing[1:])})" if len(missing) > 1 else ""))
    fields = {p: np.asarray(vertex[p]) for p in PLY_PROPERTIES}
    for p in PLY_PROPERTIES:
        bad = ~np.isfinite(fields[p].astype(np.float64))
        if np.any(bad):
            raise PlyError(f"non-finite {p!r} at element {int(np.argmax(bad))}")
    return decode_fields(fields, canonical=canonical,
                         label=file_label if label is None else label, recenter=canonical)


# ---------------------------------------------------------- primitives

PRIMITIVE_AREAS = {
    "sphere": 4 * np.pi,
    "box": 24.0,
    "torus": 4 * np.pi ** 2 * 0.7 * 0.3,
    "disk": np.pi,
}


def _sample_primitive(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "box":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts = np.empty((n, 3))
        for a in range(3):
            others = [b for b in range(3) if b != a]
            sel = axis == a
            pts[sel, a] = sign[sel]
            pts[np.ix_(sel, others)] = uv[sel]
        return pts
    if kind == "torus":
        big, small = 0.7, 0.3
        out = np.empty((0, 3))
        while len(out) < n:
            u = rng.uniform(0, 2 * np.pi, size=2 * n)
            v = rng.uniform(0, 2 * np.pi, size=2 * n)
            # area element is proportional to (R + r cos v)
            keep = rng.uniform(0, big + small, size=2 * n) < big + small * np.cos(v)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out = np.concatenate([out, np.stack(
                [ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)])
        return out[:n]
    if kind == "disk":
        r = np.sqrt(rng.uniform(0, 1, size=n))
        a = rng.uniform(0, 2 * np.pi, size=n)
        return np.stack([r * np.cos(a), r * np.sin(a), np.zeros(n)], axis=1)
    raise CloudError(f"unknown primitive kind {kind!r}")


def make_primitive(kind: str, n_points: int, seed: int = 0, color=(0.8, 0.8, 0.8),
                   opacity: float = 0.9, label: str | None = None) -> GaussianCloud:
    """Canonical test object sampled on a unit-sized primitive surface.

    Scales are isotropic, half the mean point spacing
    ``sqrt(area / n_points)``. The result is snapped to PLY precision.
    """
    if kind not in PRIMITIVE_AREAS:
        raise CloudError(f"unknown primitive kind {kind!r}")
    if n_points < 1:
        raise CloudError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    pos = _sample_primitive(kind, n_points, rng)
    s = 0.5 * np.sqrt(PRIMITIVE_AREAS[kind] / n_points)
    cloud = GaussianCloud(
        positions=pos,
        scales=np.full((n_points, 3), s),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n_points, 1)),
        opacities=np.full(n_points, opacity),
        colors=np.tile(np.asarray(color, dtype=np.float64), (n_points, 1)),
        point_ids=np.arange(n_points),
        canonical=True,
        label=label if label is not None else kind,
    )
    return ply_representable(cloud)

