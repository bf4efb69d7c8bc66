"""Train the transition nets on the red-sphere / blue-box swap and report p_trans.

    python scripts/transition_demo.py [--steps 300] [--points 500] [--out runs/transition]

Writes loss.csv, the trained nets, and a strip of rendered frames (threshold
gating) next to the oracle frames for the first camera.
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np
import torch

from morph4d.gate import THRESHOLD, GateMode
from morph4d.pipeline import CloudParams, DynamicsModel, evaluate_scene, render_sequence
from morph4d.render import write_png
from morph4d.scenarios import crossing_fraction, transition_scenario
from morph4d.train import TrainConfig, reconstruction_guidance, train_dynamics


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--points", type=int, default=500)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/transition")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = transition_scenario(n_points=args.points, size=args.size, seed=args.seed)
    dyn = DynamicsModel.for_program(sc.program, seed=args.seed)
    clouds = [CloudParams(c, dtype=dyn.dtype) for c in sc.clouds]

    def progress(state, _):
        if state.step % 25 == 0:
            h = state.history[-1]
            print(f"step {state.step:5d}  loss {h['loss']:.6f}  {h['wall_ms']:.0f} ms")

    t0 = time.perf_counter()
    state = train_dynamics(clouds, sc.program, dyn, reconstruction_guidance(sc.targets),
                           TrainConfig(steps=args.steps, fixed_points=args.points, seed=args.seed),
                           callback=progress)
    print(f"trained {state.step} steps in {time.perf_counter() - t0:.0f}s")

    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows([h["step"], h["loss"]] for h in state.history)
    dyn.save(out / "nets.t4dn")

    a, b = slice(0, args.points), slice(args.points, 2 * args.points)
    print("   t    mean p(A)  mean p(B)")
    with torch.no_grad():
        for t in np.linspace(0, 1, 11):
            p = evaluate_scene(clouds, sc.program, dyn, float(t)).p_trans.numpy()
            print(f"{t:5.2f}    {p[a].mean():.3f}      {p[b].mean():.3f}")
        p0 = evaluate_scene(clouds, sc.program, dyn, 0.35).p_trans.numpy()
        p1 = evaluate_scene(clouds, sc.program, dyn, 0.65).p_trans.numpy()
    print(f"crossing in [0.35, 0.65]: A {crossing_fraction(p0[a], p1[a], True):.3f}, "
          f"B {crossing_fraction(p0[b], p1[b], False):.3f}")

    with torch.no_grad():
        frames = render_sequence(clouds, sc.program, dyn, GateMode(THRESHOLD, args.seed), sc.cameras[0])
    strip = np.concatenate([np.concatenate(list(sc.targets[0].images), 1),
                            np.concatenate(list(frames.images), 1)], 0)
    write_png(out / "oracle_vs_learned.png", strip)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
