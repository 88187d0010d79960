"""Reusable experiment drivers: toy training run and the motion-conditioning ablation."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .benchmark import EditType, SyntheticTask, synthetic_tasks, training_scenes
from .codec import CodecConfig, VideoTensor
from .denoiser import Denoiser, DenoiserConfig
from .flow import SceneFlowEstimator
from .guidance import DropoutPolicy, GuidanceScales
from .pipeline import (EditRequest, OptimConfig, RecolorOracleEditor, TrainingData, encode_clips, evaluate_loss,
                       moca_edit_batch, new_train_state, train_step)
from .scenes import centroids, foreground_masks, render
from .schedule import SamplerConfig, make_schedule
from .vocab import DIRECTIONS, parse_prompt

log = logging.getLogger(__name__)

SPATIAL = (EditType.STYLE, EditType.BACKGROUND, EditType.OBJECT, EditType.MULTI_SPATIAL)
MOTIONAL = (EditType.MOTION, EditType.MULTI_MOTION)


def build_training_data(n_clips: int, seed: int, codec=CodecConfig(), any_direction: bool = False) -> TrainingData:
    scenes = training_scenes(n_clips, seed, any_direction=any_direction)
    frames = np.stack([render(s) for s in scenes])
    return encode_clips(frames, scenes, codec, [s.prompt() for s in scenes])


@dataclass
class TrainRunResult:
    model: Denoiser
    losses: list[float]
    initial_loss: float
    final_loss: float
    seconds: float


def run_training(data: TrainingData, steps: int, seed: int = 0, model_cfg: DenoiserConfig = DenoiserConfig(),
                 optim: OptimConfig = OptimConfig(), policy: DropoutPolicy = DropoutPolicy(),
                 eval_batch: int = 64, log_every: int = 100) -> TrainRunResult:
    """Train from scratch; initial/final loss are measured on one fixed held-in batch with fixed noise."""
    schedule = make_schedule()
    state = new_train_state(model_cfg, optim, seed)
    initial = evaluate_loss(state.model, data, schedule, policy, eval_batch, seed + 17)
    start = time.time()
    for _ in range(steps):
        loss = train_step(state, data, schedule, policy, optim)
        if log_every and state.step % log_every == 0:
            log.info("step %d loss %.4f (%.1fs)", state.step, loss, time.time() - start)
    final = evaluate_loss(state.model, data, schedule, policy, eval_batch, seed + 17)
    return TrainRunResult(state.model, state.losses, initial, final, time.time() - start)


def ablation_tasks(n_scenes: int = 16, seed: int = 9001) -> tuple[list[SyntheticTask], list[SyntheticTask]]:
    """32 spatial tasks (8 scenes x 4 spatial types) and 32 motion tasks (16 scenes x 2 types)."""
    tasks = synthetic_tasks(n_scenes, seed)
    spatial = [t for t in tasks if t.record.edit_type in SPATIAL and int(t.record.id.split("-")[1]) < n_scenes // 2]
    motion = [t for t in tasks if t.record.edit_type in MOTIONAL]
    return spatial, motion


def trajectory_error(generated: np.ndarray, source: np.ndarray) -> float:
    """Mean per-frame Euclidean distance between foreground centroids; empty frames count as 64 px."""
    gen = centroids(foreground_masks(generated))
    src = centroids(foreground_masks(source))
    d = np.linalg.norm(gen - src, axis=1)
    return float(np.mean(np.where(np.isnan(d), 64.0, d)))


def direction_cosine(generated: np.ndarray, direction: str) -> float:
    cents = centroids(foreground_masks(generated))
    steps = np.diff(cents, axis=0)
    steps = steps[~np.isnan(steps).any(axis=1)]
    if not len(steps):
        return 0.0
    v = steps.mean(axis=0)
    d = np.array(DIRECTIONS[direction], dtype=np.float64)
    n = np.linalg.norm(v)
    return float(v @ d / n) if n > 1e-9 else 0.0


@dataclass
class AblationResult:
    spatial_mae: list[float]
    motion_cosines: list[float]

    @property
    def mean_spatial_mae(self) -> float:
        return float(np.mean(self.spatial_mae))

    @property
    def motion_hit_rate(self) -> float:
        return float(np.mean(np.array(self.motion_cosines) >= 0.8))

    def to_dict(self) -> dict:
        return {"spatial_mae": self.spatial_mae, "motion_cosines": self.motion_cosines,
                "mean_spatial_mae": self.mean_spatial_mae, "motion_hit_rate": self.motion_hit_rate}


def _requests(tasks: list[SyntheticTask], scales: GuidanceScales, seed: int) -> list[EditRequest]:
    return [EditRequest(VideoTensor(torch.from_numpy(render(t.source))), t.record.source_prompt,
                        t.record.edit_prompt, t.record.edit_type, scales, seed + i)
            for i, t in enumerate(tasks)]


def motion_ablation(model: Denoiser, spatial_scales: GuidanceScales = GuidanceScales(1.0, 1.0, 2.0),
                    motion_scales: GuidanceScales = GuidanceScales(1.0, 1.0, 0.0), steps: int = 64,
                    seed: int = 0, tasks=None) -> AblationResult:
    spatial, motion = tasks or ablation_tasks()
    sampler = SamplerConfig(num_inference_steps=steps)
    schedule = make_schedule()
    editor = RecolorOracleEditor()
    s_out = moca_edit_batch(_requests(spatial, spatial_scales, seed), model,
                            [SceneFlowEstimator(t.source) for t in spatial], editor, schedule=schedule,
                            sampler=sampler)
    mae = [trajectory_error(v.frames.numpy(), render(t.source)) for v, t in zip(s_out, spatial)]
    m_reqs = _requests(motion, motion_scales, seed + 1000)
    m_out = moca_edit_batch(m_reqs, model, [SceneFlowEstimator(t.source) for t in motion], editor,
                            schedule=schedule, sampler=sampler)
    cos = [direction_cosine(v.frames.numpy(), parse_prompt(t.record.edit_prompt).direction)
           for v, t in zip(m_out, motion)]
    return AblationResult(mae, cos)


# -- cached acceptance runs --------------------------------------------------------------

@dataclass(frozen=True)
class TrainingSetup:
    """Everything that determines a toy training run (and so its cache key)."""

    clips: int = 512
    steps: int = 2000
    seed: int = 0
    model: DenoiserConfig = DenoiserConfig(base_width=32)
    optim: OptimConfig = OptimConfig(lr=1e-3)
    eval_batch: int = 64
    # start positions that do not give away the direction of motion
    any_direction: bool = True

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def cached_training_run(out_dir: str | Path, setup: TrainingSetup = TrainingSetup(),
                        log_every: int = 100) -> tuple[Denoiser, dict]:
    """Train (or reuse a finished run with the same setup) and return the model plus its summary."""
    from .denoiser import load_checkpoint, save_checkpoint

    out = Path(out_dir)
    ckpt, summary_path = out / f"model-{setup.key()}.ckpt", out / f"train-{setup.key()}.json"
    if ckpt.exists() and summary_path.exists():
        log.info("reusing cached training run %s", ckpt)
        return load_checkpoint(ckpt)[0], json.loads(summary_path.read_text())
    data = build_training_data(setup.clips, setup.seed, any_direction=setup.any_direction)
    res = run_training(data, setup.steps, setup.seed, setup.model, setup.optim, eval_batch=setup.eval_batch,
                       log_every=log_every)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, res.model, {"setup": asdict(setup)})
    summary = {"setup": asdict(setup), "key": setup.key(), "initial_loss": res.initial_loss,
               "final_loss": res.final_loss, "seconds": res.seconds, "losses": res.losses}
    summary_path.write_text(json.dumps(summary) + "\n")
    return res.model, summary


def cached_ablation(out_dir: str | Path, model: Denoiser, setup: TrainingSetup, steps: int = 64,
                    spatial_scales: GuidanceScales = GuidanceScales(1.0, 1.0, 2.0),
                    motion_scales: GuidanceScales = GuidanceScales(1.0, 1.0, 0.0)) -> AblationResult:
    tag = hashlib.sha256(json.dumps([setup.key(), steps, asdict(spatial_scales), asdict(motion_scales)])
                         .encode()).hexdigest()[:16]
    path = Path(out_dir) / f"ablation-{tag}.json"
    if path.exists():
        d = json.loads(path.read_text())
        return AblationResult(d["spatial_mae"], d["motion_cosines"])
    res = motion_ablation(model, spatial_scales, motion_scales, steps=steps)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(res.to_dict()) + "\n")
    return res
