"""Refine a sparse gray sphere toward renders of a dense colored one.

    python scripts/refine_demo.py [--steps 1000] [--out runs/refine]

Prints mean PSNR over the six orbit views every 100 steps, then writes the
refined cloud as PLY plus before/after renders.
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from morph4d.pipeline import DynamicsModel, CloudParams, evaluate_scene
from morph4d.render import write_png
from morph4d.scenarios import refine_scenario
from morph4d.scene import export_ply
from morph4d.train import TrainConfig, psnr, reconstruction_guidance, train_refine


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--start-points", type=int, default=200)
    ap.add_argument("--target-points", type=int, default=2000)
    ap.add_argument("--size", type=int, default=48)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/refine")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = refine_scenario(args.start_points, args.target_points, args.size, seed=args.seed)
    dyn = DynamicsModel.for_program(sc.program)

    def views(clouds):
        with torch.no_grad():
            st = evaluate_scene(clouds, sc.program, dyn, 0.0)
            return [st.render(c).numpy() for c in sc.cameras]

    def score(images):
        return float(np.mean([psnr(img, fb.images[0]) for img, fb in zip(images, sc.targets)]))

    clouds = [CloudParams(sc.start, dtype=dyn.dtype)]
    before = views(clouds)
    print(f"step     0  PSNR {score(before):6.2f} dB  points {len(sc.start)}")

    def progress(state, current):
        if state.step % 100 == 0:
            print(f"step {state.step:5d}  PSNR {score(views(current)):6.2f} dB  points {len(current[0])}")

    clouds, _ = train_refine(clouds, sc.program, dyn, reconstruction_guidance(sc.targets),
                             TrainConfig("refine", steps=args.steps, seed=args.seed), callback=progress)
    after = views(clouds)
    print(f"PSNR {score(before):.2f} -> {score(after):.2f} dB")

    (out / "refined.ply").write_bytes(export_ply(clouds[0].to_cloud()))
    rows = [np.concatenate(imgs, 1) for imgs in (before, after, [fb.images[0] for fb in sc.targets])]
    write_png(out / "before_after_target.png", np.concatenate(rows, 0))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
