"""Toy training run behind acceptance criteria 4 and 5.

Trains the denoiser on the synthetic corpus (or reuses a cached run with the
same setup) and prints the step-0 and final losses on a fixed batch.

    python3 scripts/train_toy_model.py --out runs/acceptance
    python3 scripts/train_toy_model.py --width 64 --lr 1e-4 --steps 4000
"""
from __future__ import annotations

import argparse
import json
import logging
from dataclasses import replace

from motionanim.experiments import TrainingSetup, cached_training_run


def main() -> None:
    default = TrainingSetup()
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/acceptance", help="cache directory")
    ap.add_argument("--clips", type=int, default=default.clips)
    ap.add_argument("--steps", type=int, default=default.steps)
    ap.add_argument("--seed", type=int, default=default.seed)
    ap.add_argument("--width", type=int, default=default.model.base_width)
    ap.add_argument("--lr", type=float, default=default.optim.lr)
    ap.add_argument("--batch-size", type=int, default=default.optim.batch_size)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    setup = replace(default, clips=args.clips, steps=args.steps, seed=args.seed,
                    model=replace(default.model, base_width=args.width),
                    optim=replace(default.optim, lr=args.lr, batch_size=args.batch_size))
    _, summary = cached_training_run(args.out, setup, log_every=50)
    print(json.dumps({k: summary[k] for k in ("key", "initial_loss", "final_loss", "seconds")}, indent=2))
    print(f"final / initial = {summary['final_loss'] / summary['initial_loss']:.3f}")


if __name__ == "__main__":
    main()
