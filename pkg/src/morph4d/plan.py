"""4D planning documents: parsing, validation and timeline compilation.

A plan file is UTF-8 JSON::

    {"sample": {"obj_prompt": [...],
                "TrajParams": {"init_pos": ..., "move_list": ..., "move_time": ...,
                               "init_angle": ..., "rotations": ..., "rotations_time": ...,
                               "trans_list": ..., "trans_period": ...}}}

Segment convention: the movement boundaries of object ``i`` are
``[0] + move_time[i] + [1]`` and segment ``k`` of ``move_list[i]`` is active on
``[b_k, b_{k+1})``. Rotation windows are given per object either as a flat
boundary list (``len(rotations[i]) + 1`` times) or as one ``[start, end]``
pair per rotation vector. Per-frame vectors become per-unit-time rates by
multiplying with the frame count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

TRAJ_KEYS = ("init_pos", "move_list", "move_time", "init_angle",
             "rotations", "rotations_time", "trans_list", "trans_period")
REQUIRED_TRAJ_KEYS = ("init_pos", "move_list", "move_time", "init_angle",
                      "rotations", "rotations_time")
DEFAULT_FRAME_COUNT = 16
TIMELINE_VERSION = 1
SCENE_BOUND = 1.0
VISIBILITY_SAMPLES = 64

# Every finding code emitted anywhere in this module.
CODES = {
    "plan.syntax": "document is not valid JSON",
    "plan.empty": "obj_prompt is empty",
    "plan.missing-key": "a required key is absent",
    "plan.arity": "a list or vector has the wrong length",
    "plan.type": "a value has the wrong type",
    "plan.unknown-key": "unrecognised key preserved and ignored",
    "time.range": "a time lies outside [0, 1]",
    "time.order": "a period has start >= end or boundaries are not increasing",
    "move.arity": "move_list and move_time lengths are inconsistent",
    "move.padded": "missing movement segments zero-padded (lenient mode)",
    "rot.arity": "rotations and rotations_time lengths are inconsistent",
    "rot.padded": "missing rotation segments zero-padded (lenient mode)",
    "trans.arity": "trans_list and trans_period lengths differ",
    "trans.index": "transition object index out of range",
    "trans.self": "an object transitions into itself",
    "trans.overlap": "overlapping transition periods share an object",
    "scene.never-visible": "object center never inside [-1, 1]^3",
}


class PlanError(ValueError):
    """Parse failure; ``code`` is one of :data:`CODES`."""

    def __init__(self, code: str, message: str):
        assert code in CODES, code
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


@dataclass
class Finding:
    severity: str  # "error" | "warning"
    code: str
    obj: int | None
    message: str

    def __post_init__(self):
        assert self.code in CODES, self.code

    def line(self) -> str:
        return f"{self.code}\t{'-' if self.obj is None else self.obj}\t{self.message}"


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "error"]

    @property
    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self) -> list[str]:
        return [f.code for f in self.findings]

    def error(self, code, obj, message):
        self.findings.append(Finding("error", code, obj, message))

    def warn(self, code, obj, message):
        self.findings.append(Finding("warning", code, obj, message))

    def render(self) -> str:
        return "\n".join(f.line() for f in self.findings)


@dataclass
class PlanDocument:
    obj_prompt: list[str]
    init_pos: list[list[float]]
    move_list: list[list[list[float]]]
    move_time: list[list[float]]
    init_angle: list[list[float]]
    rotations: list[list[list[float]]]
    rotations_time: list[list]
    trans_list: list[list[int]] = field(default_factory=list)
    trans_period: list[list[float]] = field(default_factory=list)
    unknown: dict[str, Any] = field(default_factory=dict)

    @property
    def n_objects(self) -> int:
        return len(self.obj_prompt)

    def to_json(self) -> dict:
        traj = {k: getattr(self, k) for k in TRAJ_KEYS}
        sample: dict[str, Any] = {"obj_prompt": list(self.obj_prompt), "TrajParams": traj}
        for key, value in self.unknown.items():
            where, _, name = key.partition(".")
            if where == "TrajParams":
                traj[name] = value
            elif where == "sample":
                sample[name] = value
        return {"sample": sample}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


# ------------------------------------------------------------------ parsing

def _number(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise PlanError("plan.type", f"{where}: expected a number, got {v!r}")
    return float(v)


def _vec3(v, where: str) -> list[float]:
    if not isinstance(v, list):
        raise PlanError("plan.type", f"{where}: expected a 3-vector, got {v!r}")
    if len(v) != 3:
        raise PlanError("plan.arity", f"{where}: expected 3 components, got {len(v)}")
    return [_number(x, f"{where}[{k}]") for k, x in enumerate(v)]


def _per_object(traj: dict, key: str, m: int) -> list:
    value = traj[key]
    if not isinstance(value, list):
        raise PlanError("plan.type", f"{key}: expected a list")
    if len(value) != m:
        raise PlanError("plan.arity", f"{key}: expected {m} entries (one per object), got {len(value)}")
    return value


def _vec_list(value, where: str) -> list[list[float]]:
    if not isinstance(value, list):
        raise PlanError("plan.type", f"{where}: expected a list of 3-vectors")
    return [_vec3(v, f"{where}[{k}]") for k, v in enumerate(value)]


def _times(value, where: str) -> list:
    """A flat list of times or a list of [start, end] pairs."""
    if not isinstance(value, list):
        raise PlanError("plan.type", f"{where}: expected a list of times")
    out = []
    for k, v in enumerate(value):
        if isinstance(v, list):
            if len(v) != 2:
                raise PlanError("plan.arity", f"{where}[{k}]: expected [start, end], got {len(v)} values")
            out.append([_number(x, f"{where}[{k}]") for x in v])
        else:
            out.append(_number(v, f"{where}[{k}]"))
    return out


def parse_plan(data: bytes | str) -> PlanDocument:
    """Parse plan JSON into a :class:`PlanDocument` (no semantic checks)."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PlanError("plan.syntax", f"not UTF-8 at byte {exc.start}") from None
    try:
        root = json.loads(data)
    except json.JSONDecodeError as exc:
        raise PlanError("plan.syntax", f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(root, dict) or "sample" not in root:
        raise PlanError("plan.missing-key", "sample")
    sample = root["sample"]
    if not isinstance(sample, dict):
        raise PlanError("plan.type", "sample must be an object")
    for key in ("obj_prompt", "TrajParams"):
        if key not in sample:
            raise PlanError("plan.missing-key", key)
    prompts = sample["obj_prompt"]
    if not isinstance(prompts, list) or not all(isinstance(p, str) for p in prompts):
        raise PlanError("plan.type", "obj_prompt must be a list of strings")
    if not prompts:
        raise PlanError("plan.empty", "obj_prompt lists no objects")
    traj = sample["TrajParams"]
    if not isinstance(traj, dict):
        raise PlanError("plan.type", "TrajParams must be an object")
    for key in REQUIRED_TRAJ_KEYS:
        if key not in traj:
            raise PlanError("plan.missing-key", key)
    m = len(prompts)

    unknown = {f"sample.{k}": v for k, v in sample.items() if k not in ("obj_prompt", "TrajParams")}
    unknown.update({f"TrajParams.{k}": v for k, v in traj.items() if k not in TRAJ_KEYS})
    unknown.update({f"root.{k}": v for k, v in root.items() if k != "sample"})

    init_pos = [_vec3(v, f"init_pos[{i}]") for i, v in enumerate(_per_object(traj, "init_pos", m))]
    init_angle = [_vec3(v, f"init_angle[{i}]") for i, v in enumerate(_per_object(traj, "init_angle", m))]
    move_list = [_vec_list(v, f"move_list[{i}]") for i, v in enumerate(_per_object(traj, "move_list", m))]
    move_time = []
    for i, v in enumerate(_per_object(traj, "move_time", m)):
        times = _times(v, f"move_time[{i}]")
        if any(isinstance(t, list) for t in times):
            raise PlanError("plan.type", f"move_time[{i}]: expected a flat list of times")
        move_time.append(times)
    rotations = [_vec_list(v, f"rotations[{i}]") for i, v in enumerate(_per_object(traj, "rotations", m))]
    rotations_time = [_times(v, f"rotations_time[{i}]")
                      for i, v in enumerate(_per_object(traj, "rotations_time", m))]

    trans_list = traj.get("trans_list", [])
    trans_period = traj.get("trans_period", [])
    if not isinstance(trans_list, list) or not isinstance(trans_period, list):
        raise PlanError("plan.type", "trans_list and trans_period must be lists")
    pairs = []
    for k, pair in enumerate(trans_list):
        if not isinstance(pair, list) or len(pair) != 2:
            raise PlanError("plan.arity", f"trans_list[{k}]: expected [source, target]")
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in pair):
            raise PlanError("plan.type", f"trans_list[{k}]: indices must be integers")
        pairs.append(list(pair))
    periods = []
    for k, per in enumerate(trans_period):
        if not isinstance(per, list) or len(per) != 2:
            raise PlanError("plan.arity", f"trans_period[{k}]: expected [start, end]")
        periods.append([_number(x, f"trans_period[{k}]") for x in per])

    return PlanDocument(
        obj_prompt=list(prompts), init_pos=init_pos, move_list=move_list, move_time=move_time,
        init_angle=init_angle, rotations=rotations, rotations_time=rotations_time,
        trans_list=pairs, trans_period=periods, unknown=unknown,
    )


# --------------------------------------------------------------- segments

def _rotation_windows(rates: list, times: list, lenient: bool):
    """Return ([(start, end)], rates, padded, problem) for one object."""
    n = len(rates)
    if times and all(isinstance(t, list) for t in times):
        windows = [tuple(t) for t in times]
        if len(windows) != n:
            if lenient and len(windows) > n:
                return windows, rates + [[0.0, 0.0, 0.0]] * (len(windows) - n), True, None
            return None, rates, False, f"{n} rotation vectors but {len(windows)} windows"
        return windows, rates, False, None
    if any(isinstance(t, list) for t in times):
        return None, rates, False, "rotations_time mixes times and [start, end] pairs"
    if n == 0:
        if times:
            return None, rates, False, f"no rotation vectors but {len(times)} times"
        return [], rates, False, None
    if len(times) != n + 1:
        if lenient and len(times) > n + 1:
            pad = len(times) - 1 - n
            return (list(zip(times[:-1], times[1:])),
                    rates + [[0.0, 0.0, 0.0]] * pad, True, None)
        return None, rates, False, f"{n} rotation vectors need {n + 1} boundary times, got {len(times)}"
    return list(zip(times[:-1], times[1:])), rates, False, None


def _move_segments(rates: list, times: list, lenient: bool):
    """Return (boundaries, rates, padded, problem) for one object."""
    n = len(rates)
    if n == 0 and not times:
        return [0.0, 1.0], [[0.0, 0.0, 0.0]], False, None
    if n != len(times) + 1:
        if lenient and n < len(times) + 1:
            return ([0.0] + list(times) + [1.0],
                    rates + [[0.0, 0.0, 0.0]] * (len(times) + 1 - n), True, None)
        return None, rates, False, f"{n} movement vectors need {n - 1} boundary times, got {len(times)}"
    return [0.0] + list(times) + [1.0], rates, False, None


def _integrate(boundaries, rates, t: float) -> np.ndarray:
    """Exact integral of a piecewise-constant rate from 0 to t."""
    total = np.zeros(3)
    for (a, b), r in zip(boundaries, rates):
        lo, hi = max(a, 0.0), min(b, t)
        if hi > lo:
            total = total + np.asarray(r, dtype=np.float64) * (hi - lo)
    return total


def _center_track(doc: PlanDocument, i: int, frame_count: int, lenient: bool):
    bounds, rates, _, problem = _move_segments(doc.move_list[i], doc.move_time[i], lenient)
    if problem:
        return None
    segs = list(zip(bounds[:-1], bounds[1:]))
    rates = [np.asarray(r) * frame_count for r in rates]
    eta = np.asarray(doc.init_pos[i])
    return [eta + _integrate(segs, rates, t) for t in np.linspace(0.0, 1.0, VISIBILITY_SAMPLES)]


# -------------------------------------------------------------- validation

def validate_plan(doc: PlanDocument, lenient: bool = False,
                  frame_count: int = DEFAULT_FRAME_COUNT) -> ValidationReport:
    rep = ValidationReport()
    m = doc.n_objects
    for key in doc.unknown:
        rep.warn("plan.unknown-key", None, f"unknown key {key!r} preserved")

    def check_time(t, obj, where):
        if not (0.0 <= t <= 1.0) or not math.isfinite(t):
            rep.error("time.range", obj, f"{where}: time {t} outside [0, 1]")
            return False
        return True

    for i in range(m):
        times = doc.move_time[i]
        ok = all([check_time(t, i, f"move_time[{i}]") for t in times])
        if ok and any(b <= a for a, b in zip(times[:-1], times[1:])):
            rep.error("time.order", i, f"move_time[{i}] not strictly increasing: {times}")
        _, _, padded, problem = _move_segments(doc.move_list[i], times, lenient)
        if problem:
            rep.error("move.arity", i, f"move_list/move_time[{i}]: {problem}")
        elif padded:
            rep.warn("move.padded", i, f"move_list[{i}] zero-padded to match move_time")

        rtimes = doc.rotations_time[i]
        flat = [x for t in rtimes for x in (t if isinstance(t, list) else [t])]
        ok = all([check_time(t, i, f"rotations_time[{i}]") for t in flat])
        windows, _, padded, problem = _rotation_windows(doc.rotations[i], rtimes, lenient)
        if problem:
            rep.error("rot.arity", i, f"rotations/rotations_time[{i}]: {problem}")
        elif ok and windows is not None:
            if any(b <= a for a, b in windows):
                rep.error("time.order", i, f"rotations_time[{i}]: window with start >= end")
            if padded:
                rep.warn("rot.padded", i, f"rotations[{i}] zero-padded to match rotations_time")

    if len(doc.trans_list) != len(doc.trans_period):
        rep.error("trans.arity", None,
                  f"{len(doc.trans_list)} transition pairs but {len(doc.trans_period)} periods")
    for k, (src, dst) in enumerate(doc.trans_list):
        for idx in (src, dst):
            if not 0 <= idx < m:
                rep.error("trans.index", idx, f"trans_list[{k}]: index {idx} outside [0, {m})")
        if src == dst:
            rep.error("trans.self", src, f"trans_list[{k}]: object {src} transitions into itself")
    for k, (a, b) in enumerate(doc.trans_period):
        ok = check_time(a, None, f"trans_period[{k}]") & check_time(b, None, f"trans_period[{k}]")
        if ok and a >= b:
            rep.error("time.order", None, f"trans_period[{k}]: start {a} >= end {b}")

    n_pairs = min(len(doc.trans_list), len(doc.trans_period))
    for j in range(n_pairs):
        for k in range(j + 1, n_pairs):
            shared = set(doc.trans_list[j]) & set(doc.trans_list[k])
            (a0, a1), (b0, b1) = doc.trans_period[j], doc.trans_period[k]
            if shared and a0 < b1 and b0 < a1:
                rep.warn("trans.overlap", min(shared),
                         f"transitions {j} and {k} overlap in time and share object(s) {sorted(shared)}")

    for i in range(m):
        track = _center_track(doc, i, frame_count, lenient)
        if track is None:
            continue
        if not any(np.all(np.abs(c) <= SCENE_BOUND) for c in track):
            rep.warn("scene.never-visible", i,
                     f"object {i} ({doc.obj_prompt[i]!r}) never enters [-1, 1]^3")
    return rep


# ------------------------------------------------------------- compilation

@dataclass
class ObjectTrack:
    init_pos: np.ndarray
    init_angle: np.ndarray  # radians
    move_boundaries: list[float]
    move_rates: list[np.ndarray]  # scene units per unit time
    rot_windows: list[tuple[float, float]]
    rot_rates: list[np.ndarray]  # radians per unit time

    def velocity(self, t: float) -> np.ndarray:
        for (a, b), r in zip(zip(self.move_boundaries[:-1], self.move_boundaries[1:]), self.move_rates):
            if a <= t < b or (t == 1.0 and b == 1.0 and a < b):
                return r.copy()
        return np.zeros(3)

    def angular_rate(self, t: float) -> np.ndarray:
        total = np.zeros(3)
        for (a, b), r in zip(self.rot_windows, self.rot_rates):
            if a <= t < b or (t == 1.0 and b == 1.0 and a < b):
                total = total + r
        return total

    def displacement(self, t: float) -> np.ndarray:
        segs = list(zip(self.move_boundaries[:-1], self.move_boundaries[1:]))
        return _integrate(segs, self.move_rates, t)

    def rotation_angle(self, t: float) -> np.ndarray:
        return _integrate(self.rot_windows, self.rot_rates, t)

    def max_rate(self) -> tuple[float, float]:
        lin = max((float(np.linalg.norm(r)) for r in self.move_rates), default=0.0)
        ang = max((float(np.linalg.norm(r)) for r in self.rot_rates), default=0.0)
        return lin, ang


@dataclass
class Transition:
    source: int
    target: int
    start: float
    end: float


@dataclass
class TimelineProgram:
    objects: list[ObjectTrack]
    transitions: list[Transition]
    frame_count: int = DEFAULT_FRAME_COUNT
    euler: str = "xyz-extrinsic"

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def frame_times(self, frames: int | None = None) -> np.ndarray:
        f = self.frame_count if frames is None else frames
        return np.linspace(0.0, 1.0, f) if f > 1 else np.zeros(1)

    def to_json(self) -> dict:
        return {
            "version": TIMELINE_VERSION,
            "frame_count": self.frame_count,
            "euler": self.euler,
            "angle_unit": "rad",
            "rate_unit": "per unit time",
            "objects": [{
                "init_pos": o.init_pos.tolist(),
                "init_angle": o.init_angle.tolist(),
                "move": {"boundaries": list(o.move_boundaries),
                         "rates": [r.tolist() for r in o.move_rates]},
                "rotate": {"windows": [list(w) for w in o.rot_windows],
                           "rates": [r.tolist() for r in o.rot_rates]},
            } for o in self.objects],
            "transitions": [{"source": tr.source, "target": tr.target,
                             "start": tr.start, "end": tr.end} for tr in self.transitions],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, obj: dict) -> "TimelineProgram":
        if obj.get("version") != TIMELINE_VERSION:
            raise ValueError(f"unsupported timeline version {obj.get('version')!r}")
        objects = [ObjectTrack(
            init_pos=np.asarray(o["init_pos"], dtype=np.float64),
            init_angle=np.asarray(o["init_angle"], dtype=np.float64),
            move_boundaries=[float(b) for b in o["move"]["boundaries"]],
            move_rates=[np.asarray(r, dtype=np.float64) for r in o["move"]["rates"]],
            rot_windows=[(float(a), float(b)) for a, b in o["rotate"]["windows"]],
            rot_rates=[np.asarray(r, dtype=np.float64) for r in o["rotate"]["rates"]],
        ) for o in obj["objects"]]
        transitions = [Transition(int(t["source"]), int(t["target"]), float(t["start"]), float(t["end"]))
                       for t in obj["transitions"]]
        return cls(objects, transitions, int(obj["frame_count"]), obj.get("euler", "xyz-extrinsic"))


def compile_timeline(doc: PlanDocument, frame_count: int = DEFAULT_FRAME_COUNT,
                     lenient: bool = False) -> TimelineProgram:
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    report = validate_plan(doc, lenient=lenient, frame_count=frame_count)
    if not report.ok:
        first = report.errors[0]
        raise PlanError(first.code, f"plan does not validate: {first.message}")
    objects = []
    for i in range(doc.n_objects):
        bounds, rates, _, _ = _move_segments(doc.move_list[i], doc.move_time[i], lenient)
        windows, rrates, _, _ = _rotation_windows(doc.rotations[i], doc.rotations_time[i], lenient)
        objects.append(ObjectTrack(
            init_pos=np.asarray(doc.init_pos[i], dtype=np.float64),
            init_angle=np.radians(np.asarray(doc.init_angle[i], dtype=np.float64)),
            move_boundaries=[float(b) for b in bounds],
            move_rates=[np.asarray(r, dtype=np.float64) * frame_count for r in rates],
            rot_windows=[(float(a), float(b)) for a, b in windows],
            rot_rates=[np.radians(np.asarray(r, dtype=np.float64) * frame_count) for r in rrates],
        ))
    transitions = [Transition(int(s), int(d), float(a), float(b))
                   for (s, d), (a, b) in zip(doc.trans_list, doc.trans_period)]
    return TimelineProgram(objects, transitions, frame_count)


def static_timeline(n_objects: int, positions=None, frame_count: int = DEFAULT_FRAME_COUNT) -> TimelineProgram:
    """A timeline where nothing moves; handy for single-object scenes."""
    positions = np.zeros((n_objects, 3)) if positions is None else np.asarray(positions, dtype=np.float64)
    return TimelineProgram([
        ObjectTrack(positions[i].copy(), np.zeros(3), [0.0, 1.0], [np.zeros(3)], [], [])
        for i in range(n_objects)
    ], [], frame_count)


def load_plan(path) -> PlanDocument:
    with open(path, "rb") as fh:
        return parse_plan(fh.read())
