"""Motion-conditioning ablation on held-out synthetic tasks.

Spatial edits are sampled with motion guidance on (s_M, default 2) and scored
by how closely the generated shape follows the source trajectory; motion
edits are sampled with s_M = 0 and scored by whether the generated motion
points in the prompted direction. Uses the cached toy model from
train_toy_model.py with the same setup flags.

    python3 scripts/motion_ablation.py --out runs/acceptance
    python3 scripts/motion_ablation.py --scale-motion 1 3 5 --steps 32
"""
from __future__ import annotations

import argparse
import json
import logging
from dataclasses import replace

import torch

from motionanim.experiments import TrainingSetup, cached_ablation, cached_training_run
from motionanim.guidance import GuidanceScales


def main() -> None:
    default = TrainingSetup()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/acceptance", help="cache directory")
    ap.add_argument("--steps", type=int, default=64, help="DDIM steps")
    ap.add_argument("--train-steps", type=int, default=default.steps)
    ap.add_argument("--width", type=int, default=default.model.base_width)
    ap.add_argument("--lr", type=float, default=default.optim.lr)
    ap.add_argument("--scale-image", type=float, default=1.0)
    ap.add_argument("--scale-text", type=float, default=1.0)
    ap.add_argument("--scale-motion", type=float, nargs="+", default=[2.0])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    setup = replace(default, steps=args.train_steps, model=replace(default.model, base_width=args.width),
                    optim=replace(default.optim, lr=args.lr))
    model, _ = cached_training_run(args.out, setup, log_every=50)
    motion_scales = GuidanceScales(args.scale_image, args.scale_text, 0.0)
    with torch.no_grad():
        for s_m in args.scale_motion:
            spatial = GuidanceScales(args.scale_image, args.scale_text, s_m)
            res = cached_ablation(args.out, model, setup, args.steps, spatial, motion_scales)
            print(json.dumps({"s_M": s_m, "mean_spatial_mae": round(res.mean_spatial_mae, 3),
                              "motion_hit_rate": res.motion_hit_rate}))


if __name__ == "__main__":
    main()
