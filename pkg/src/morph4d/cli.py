"""Command line: plan, validate, compile, init, render, train, eval.

Exit codes: 0 success, 1 validation findings, 2 input or config error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .gate import MODES, GateMode
from .pipeline import CloudParams, DynamicsModel, render_sequence
from .plan import PlanError, TimelineProgram, compile_timeline, parse_plan, static_timeline, validate_plan
from .planner import PlannerConfig, PlannerError, request_plan
from .render import Camera, FrameBatch, eval_orbit, read_pfm, read_png, write_pfm, write_png
from .scene import CloudError, GaussianCloud, export_ply, import_ply, make_primitive
from .train import (DYNAMICS, REFINE, NumericAbort, PhaseViolation, TrainConfig, TrainState,
                    load_resume, psnr, reconstruction_guidance, save_resume, train_dynamics, train_refine)

EXIT_OK, EXIT_FINDINGS, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class InputError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- manifest

@dataclass
class ObjectEntry:
    label: str
    ply: Path | None = None
    primitive: dict | None = None
    prompt: str = ""


@dataclass
class SceneManifest:
    """Scene wiring loaded from TOML or JSON; relative paths follow the file."""

    objects: list[ObjectEntry]
    plan: Path | None = None
    nets: Path | None = None
    gate: GateMode = field(default_factory=GateMode)
    camera: Camera = field(default_factory=Camera)
    frame_count: int = 16
    source: Path | None = None

    @classmethod
    def load(cls, path) -> "SceneManifest":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise InputError(f"cannot read manifest: {exc}") from None
        try:
            data = json.loads(raw) if path.suffix == ".json" else tomllib.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise InputError(f"{path}: {exc}") from None
        return cls.from_dict(data, path.parent, path)

    @classmethod
    def from_dict(cls, data: dict, base: Path, source: Path | None = None) -> "SceneManifest":
        def resolve(p):
            if p is None:
                return None
            q = Path(p)
            q = q if q.is_absolute() else base / q
            if not q.exists():
                raise InputError(f"manifest path does not exist: {q}")
            return q

        objects = []
        for i, o in enumerate(data.get("objects", [])):
            if ("ply" in o) == ("primitive" in o):
                raise InputError(f"object {i} needs exactly one of 'ply' or 'primitive'")
            objects.append(ObjectEntry(o.get("label", f"object{i}"), resolve(o.get("ply")),
                                       o.get("primitive"), o.get("prompt", "")))
        if not objects:
            raise InputError("manifest lists no objects")
        labels = [o.label for o in objects]
        if len(set(labels)) != len(labels):
            raise InputError(f"object labels must be unique: {labels}")
        try:
            gate = GateMode(**data.get("gate", {}))
            camera = Camera.from_json(data.get("camera", {}))
        except (TypeError, ValueError) as exc:
            raise InputError(f"manifest: {exc}") from None
        return cls(objects, resolve(data.get("plan")), resolve(data.get("nets")), gate, camera,
                   int(data.get("frame_count", 16)), source)

    def clouds(self) -> list[GaussianCloud]:
        out = []
        for o in self.objects:
            try:
                if o.ply is not None:
                    out.append(import_ply(o.ply.read_bytes(), canonical=True, label=o.label))
                else:
                    spec = dict(o.primitive)
                    out.append(make_primitive(spec.pop("kind"), int(spec.pop("points")),
                                              label=o.label, **spec))
            except (CloudError, KeyError, TypeError) as exc:
                raise InputError(f"object {o.label!r}: {exc}") from None
        return out

    def program(self) -> TimelineProgram:
        if self.plan is None:
            return static_timeline(len(self.objects), frame_count=self.frame_count)
        raw = self.plan.read_bytes()
        try:
            data = json.loads(raw)
        except ValueError:
            data = None
        try:
            if isinstance(data, dict) and "version" in data and "objects" in data:
                program = TimelineProgram.from_json(data)
            else:
                program = compile_timeline(parse_plan(raw), self.frame_count)
        except PlanError as exc:
            raise InputError(f"plan {self.plan}: {exc}") from None
        if program.n_objects != len(self.objects):
            raise InputError(f"plan has {program.n_objects} objects, manifest {len(self.objects)}")
        return program

    def dynamics(self, program: TimelineProgram, seed: int = 0) -> DynamicsModel:
        dyn = DynamicsModel.for_program(program, seed=seed)
        if self.nets is not None:
            try:
                dyn.load_state_from(self.nets)
            except ValueError as exc:
                raise InputError(f"nets {self.nets}: {exc}") from None
        return dyn


# ---------------------------------------------------------------- commands

def cmd_plan(args) -> int:
    cfg = PlannerConfig.from_env(endpoint=args.endpoint, model=args.model, timeout=args.timeout,
                                 replay_dir=args.replay, retries=args.retries)
    try:
        doc = request_plan(cfg, args.prompt)
    except PlannerError as exc:
        _err(str(exc))
        if exc.report is not None:
            print(exc.report.render(), file=sys.stderr)
        return EXIT_INPUT
    text = doc.dumps()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def _load_doc(path):
    try:
        return parse_plan(Path(path).read_bytes())
    except OSError as exc:
        raise InputError(str(exc)) from None
    except PlanError as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_validate(args) -> int:
    doc = _load_doc(args.plan)
    report = validate_plan(doc, lenient=args.lenient, frame_count=args.frame_count)
    for f in report.findings:
        print(f.line())
    return EXIT_OK if report.ok else EXIT_FINDINGS


def cmd_compile(args) -> int:
    doc = _load_doc(args.plan)
    report = validate_plan(doc, lenient=args.lenient, frame_count=args.frame_count)
    if not report.ok:
        for f in report.findings:
            print(f.line())
        return EXIT_FINDINGS
    text = compile_timeline(doc, args.frame_count, lenient=args.lenient).dumps()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_init(args) -> int:
    color = tuple(float(c) for c in args.color.split(","))
    try:
        cloud = make_primitive(args.primitive, args.points, seed=args.seed, color=color,
                               opacity=args.opacity, label=args.label)
    except (CloudError, ValueError) as exc:
        raise InputError(str(exc)) from None
    Path(args.out).write_bytes(export_ply(cloud))
    return EXIT_OK


def _parse_camera(text: str, base: Camera) -> Camera:
    try:
        az, el, r = (float(v) for v in text.split(","))
        return base.with_(azimuth=az, elevation=el, radius=r)
    except ValueError as exc:
        raise InputError(f"--camera expects az,el,r: {exc}") from None


def _views(args, manifest: SceneManifest) -> list[tuple[str | None, Camera]]:
    base = manifest.camera
    if args.size:
        base = base.with_(width=args.size, height=args.size)
    if args.camera:
        base = _parse_camera(args.camera, base)
    if args.preset == "eval-orbit":
        return [(f"view_{int(c.azimuth):+04d}", c) for c in eval_orbit(base)]
    return [(None, base)]


def cmd_render(args) -> int:
    manifest = SceneManifest.load(args.manifest)
    program = manifest.program()
    clouds = manifest.clouds()
    dyn = manifest.dynamics(program)
    gate = GateMode(args.mode or manifest.gate.mode, manifest.gate.seed if args.seed is None else args.seed)
    frames = args.frames or program.frame_count
    out = Path(args.out)
    sidecar = {"manifest": str(Path(args.manifest).resolve()), "gate": {"mode": gate.mode, "seed": gate.seed},
               "frames": frames, "views": []}
    for name, cam in _views(args, manifest):
        batch = render_sequence(clouds, program, dyn, gate, cam, frames, workers=args.workers)
        vdir = out / name if name else out
        vdir.mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(batch.images):
            write_png(vdir / f"frame_{k:04d}.png", img)
            if args.pfm:
                write_pfm(vdir / f"frame_{k:04d}.pfm", img)
        sidecar["views"].append({"dir": name or ".", "camera": cam.to_json(), "times": batch.times.tolist()})
    (out / "render.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return EXIT_OK


def _read_frames(directory: Path) -> np.ndarray:
    pfm = sorted(directory.glob("frame_*.pfm"))
    files = pfm or sorted(directory.glob("frame_*.png"))
    if not files:
        raise InputError(f"no frame_*.pfm or frame_*.png files in {directory}")
    reader = read_pfm if pfm else read_png
    return np.stack([reader(f) for f in files]).astype(np.float32)


def load_targets(directory) -> list[FrameBatch]:
    """Frame batches written by ``render`` (one per view, cameras from render.json)."""
    directory = Path(directory)
    meta_path = directory / "render.json"
    if not meta_path.is_file():
        raise InputError(f"{directory} has no render.json sidecar")
    meta = json.loads(meta_path.read_text())
    out = []
    for view in meta["views"]:
        images = _read_frames(directory / view["dir"])
        cam = Camera.from_json(view["camera"])
        out.append(FrameBatch(images, np.asarray(view["times"]), [cam] * len(images)))
    return out


def _write_loss(path: Path, state: TrainState) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "wall_ms"])
        for h in state.history:
            w.writerow([h["step"], repr(h["loss"]), f"{h['wall_ms']:.3f}"])


def cmd_train(args) -> int:
    if not args.target:
        raise InputError("--target is required (reconstruction guidance needs target frames)")
    manifest = SceneManifest.load(args.manifest)
    program = manifest.program()
    targets = load_targets(args.target)
    if len(targets[0].images) != program.frame_count:
        raise InputError(f"targets hold {len(targets[0].images)} frames, timeline {program.frame_count}")
    cfg = TrainConfig(phase=args.phase, steps=args.steps, seed=args.seed,
                      fixed_points=None if args.fixed_points == 0 else args.fixed_points,
                      frames_per_step=args.frames_per_step, densify=not args.no_densify,
                      schedule_weight=args.schedule_weight, frame_count=program.frame_count)
    run = Path(args.out)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    dyn = manifest.dynamics(program, seed=args.seed)
    if args.resume:
        clouds, state = load_resume(args.resume, dyn)
    else:
        clouds = [CloudParams(c, dtype=dyn.dtype) for c in manifest.clouds()]
        state = None
    config_blob = {"train": cfg.to_json(), "manifest": str(Path(args.manifest).resolve()),
                   "target": str(Path(args.target).resolve()), "resume": args.resume,
                   "version": __version__}
    (run / "config.json").write_text(json.dumps(config_blob, indent=2) + "\n")
    guidance = reconstruction_guidance(targets)
    every = args.checkpoint_every

    def checkpoint(st, cl):
        if every and st.step % every == 0:
            save_resume(run / "checkpoints" / f"step_{st.step:06d}.pt", cl, dyn, st)

    try:
        if cfg.phase == DYNAMICS:
            state = train_dynamics(clouds, program, dyn, guidance, cfg, state, callback=checkpoint)
        else:
            clouds, state = train_refine(clouds, program, dyn, guidance, cfg, state, callback=checkpoint)
    except NumericAbort as exc:
        _err(str(exc))
        return EXIT_NUMERIC
    except PhaseViolation as exc:
        raise InputError(str(exc)) from None
    _write_loss(run / "loss.csv", state)
    save_resume(run / "state.pt", clouds, dyn, state)
    dyn.save(run / "nets.t4dn")
    (run / "objects").mkdir(exist_ok=True)
    for cp in clouds:
        (run / "objects" / f"{cp.label}.ply").write_bytes(export_ply(cp.to_cloud()))
    print(f"{cfg.phase}: {state.step} steps, final loss {state.history[-1]['loss']:.6g}" if state.history
          else f"{cfg.phase}: nothing to do")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = _read_frames(Path(args.pred))
    ref = _read_frames(Path(args.ref))
    if pred.shape != ref.shape:
        raise InputError(f"frame stacks differ: {pred.shape} vs {ref.shape}")
    scores = [psnr(p, r) for p, r in zip(pred, ref)]
    fmt = lambda v: "inf" if math.isinf(v) else f"{v:.6f}"
    print("frame,psnr")
    for k, s in enumerate(scores):
        print(f"{k},{fmt(s)}")
    print(f"mean,{fmt(float(np.mean(scores)))}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morph4d", description="Plan-driven 4D Gaussian scenes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("plan", help="run the planning chain and write a plan file")
    s.add_argument("prompt")
    s.add_argument("--replay", help="directory of recorded responses (no network)")
    s.add_argument("--endpoint", help="overrides PLANNER_ENDPOINT")
    s.add_argument("--model", help="overrides PLANNER_MODEL")
    s.add_argument("--timeout", type=float)
    s.add_argument("--retries", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_plan)

    for name, func, hlp in (("validate", cmd_validate, "check a plan file"),
                            ("compile", cmd_compile, "compile a plan into a timeline")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("plan")
        s.add_argument("--lenient", action="store_true", help="zero-pad short segment lists")
        s.add_argument("--frame-count", type=int, default=16)
        if name == "compile":
            s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("init", help="write a primitive object as PLY")
    s.add_argument("--primitive", required=True)
    s.add_argument("--points", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--color", default="0.8,0.8,0.8")
    s.add_argument("--opacity", type=float, default=0.9)
    s.add_argument("--label")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("render", help="render frame sequences for a scene manifest")
    s.add_argument("manifest")
    s.add_argument("--frames", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--camera", help="az,el,r in degrees and scene units")
    s.add_argument("--preset", choices=["eval-orbit"])
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--seed", type=int)
    s.add_argument("--size", type=int, help="square image size in pixels")
    s.add_argument("--pfm", action="store_true", help="also write float PFM frames")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", help="run one training phase")
    s.add_argument("manifest")
    s.add_argument("--phase", choices=[DYNAMICS, REFINE], required=True)
    s.add_argument("--target", help="directory written by 'render --pfm'")
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fixed-points", type=int, default=2000, help="dynamics-phase point count per object (0: any)")
    s.add_argument("--frames-per-step", type=int)
    s.add_argument("--no-densify", action="store_true")
    s.add_argument("--schedule-weight", type=float, default=0.0)
    s.add_argument("--checkpoint-every", type=int, default=500)
    s.add_argument("--resume", help="state file from a previous run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-frame PSNR between two frame directories")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        _err(str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
