"""Training loop for the animation model and the edit pipeline (first-frame edit, then animate)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .benchmark import EditType
from .codec import Codec, CodecConfig, LatentVideo, VideoTensor, decode_video, encode_video
from .denoiser import ConditioningBundle, Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint
from .flow import FlowEstimator, avg_flow_magnitude, flow_to_rgb, synthetic_flow
from .guidance import DropoutPolicy, GuidanceScales, cfg_sample, sample_dropout_masks
from .scenes import SceneSpec, compose_frames, foreground_masks
from .schedule import NoiseSchedule, SamplerConfig, add_noise, make_schedule, v_target
from .vocab import parse_prompt

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    batch_size: int = 16
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_steps: int = 0


# -- data ----------------------------------------------------------------------------

@dataclass
class TrainingData:
    """Pre-encoded clips: latents N x T x C x H' x W', flow-RGB latents, magnitudes, prompts."""

    latents: torch.Tensor
    motion: torch.Tensor
    magnitudes: torch.Tensor
    prompts: list[str]

    def __len__(self) -> int:
        return self.latents.shape[0]


def encode_clips(frames: np.ndarray, scenes: Sequence[SceneSpec] | None, codec: Codec | CodecConfig,
                 prompts: Sequence[str], flow_estimator: FlowEstimator | None = None) -> TrainingData:
    """Encode clips and their flows. Flow comes from scene sidecars when given, else the estimator."""
    latents, motion, mags = [], [], []
    for i, clip in enumerate(frames):
        video = VideoTensor(torch.as_tensor(clip))
        flow = synthetic_flow(scenes[i]) if scenes is not None else flow_estimator.estimate(video)
        latents.append(encode_video(video, codec).latents)
        motion.append(encode_video(flow_to_rgb(flow), codec).latents)
        mags.append(avg_flow_magnitude(flow))
    return TrainingData(torch.stack(latents), torch.stack(motion), torch.tensor(mags, dtype=torch.float32),
                        list(prompts))


# -- training ------------------------------------------------------------------------

@dataclass
class TrainState:
    model: Denoiser
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    gen: torch.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)


def make_optimizer(model: Denoiser, cfg: OptimConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)


def new_train_state(model_cfg: DenoiserConfig, optim: OptimConfig, seed: int) -> TrainState:
    torch.manual_seed(seed)
    model = Denoiser(model_cfg)
    return TrainState(model, make_optimizer(model, optim), np.random.default_rng(seed),
                      torch.Generator().manual_seed(seed))


def diffusion_loss(model: Denoiser, schedule: NoiseSchedule, latents: torch.Tensor, image: torch.Tensor,
                   motion: torch.Tensor, magnitudes: torch.Tensor, prompts: Sequence[str], nulls: np.ndarray,
                   gen: torch.Generator) -> torch.Tensor:
    """MSE between the predicted and true v with t ~ U{1..N}, eps ~ N(0, I).

    ``nulls`` is B x 3 (image, text, motion) with True meaning NULL.
    """
    b = latents.shape[0]
    t = torch.randint(1, schedule.num_train_steps + 1, (b,), generator=gen)
    eps = torch.randn(latents.shape, generator=gen)
    z_t = add_noise(schedule, latents, eps, t).float()
    target = v_target(schedule, latents, eps, t).float()
    nulls_t = torch.from_numpy(nulls)
    text, text_mask = model.text.batch([None if nulls[i, 1] else p for i, p in enumerate(prompts)])
    pred = model(z_t, t, text, text_mask, image, ~nulls_t[:, 0], motion, ~nulls_t[:, 2], magnitudes)
    return ((pred - target) ** 2).mean()


def train_step(state: TrainState, data: TrainingData, schedule: NoiseSchedule, policy: DropoutPolicy,
               optim: OptimConfig) -> float:
    """One optimizer update on a random batch; the first latent frame is the image conditioning."""
    idx = state.rng.choice(len(data), size=optim.batch_size, replace=len(data) < optim.batch_size)
    nulls = sample_dropout_masks(state.rng, optim.batch_size, policy)
    latents = data.latents[idx]
    state.model.train()
    loss = diffusion_loss(state.model, schedule, latents, latents[:, 0], data.motion[idx], data.magnitudes[idx],
                          [data.prompts[i] for i in idx], nulls, state.gen)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {state.step} (batch {idx.tolist()})")
    if optim.warmup_steps:
        for group in state.optimizer.param_groups:
            group["lr"] = optim.lr * min(1.0, (state.step + 1) / optim.warmup_steps)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(state.model.parameters(), optim.grad_clip)
    state.optimizer.step()
    state.step += 1
    state.losses.append(value)
    return value


@torch.no_grad()
def evaluate_loss(model: Denoiser, data: TrainingData, schedule: NoiseSchedule, policy: DropoutPolicy,
                  batch_size: int, seed: int) -> float:
    """Loss on a fixed batch with fixed noise; no parameter update."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    idx = rng.choice(len(data), size=batch_size, replace=len(data) < batch_size)
    nulls = sample_dropout_masks(rng, batch_size, policy)
    latents = data.latents[idx]
    model.eval()
    loss = diffusion_loss(model, schedule, latents, latents[:, 0], data.motion[idx], data.magnitudes[idx],
                          [data.prompts[i] for i in idx], nulls, gen)
    return float(loss)


def save_train_state(path: str | Path, state: TrainState, extra: dict | None = None) -> None:
    opt_tensors = {}
    opt_meta = []
    params = list(state.model.parameters())
    for i, p in enumerate(params):
        st = state.optimizer.state.get(p, {})
        if st:
            opt_tensors[f"optim.{i}.exp_avg"] = st["exp_avg"]
            opt_tensors[f"optim.{i}.exp_avg_sq"] = st["exp_avg_sq"]
            opt_meta.append([i, float(st["step"])])
    opt_tensors["rng.torch"] = state.gen.get_state()
    meta = dict(extra or {})
    meta.update(step=state.step, optim_steps=opt_meta, rng_numpy=state.rng.bit_generator.state,
                lr=[g["lr"] for g in state.optimizer.param_groups])
    save_checkpoint(path, state.model, meta, opt_tensors)


def load_train_state(path: str | Path, optim: OptimConfig) -> tuple[TrainState, dict]:
    model, meta, tensors = load_checkpoint(path)
    optimizer = make_optimizer(model, optim)
    params = list(model.parameters())
    for i, step in meta.get("optim_steps", []):
        optimizer.state[params[i]] = {"step": torch.tensor(step),
                                      "exp_avg": tensors[f"optim.{i}.exp_avg"].clone(),
                                      "exp_avg_sq": tensors[f"optim.{i}.exp_avg_sq"].clone()}
    for group, lr in zip(optimizer.param_groups, meta.get("lr", [])):
        group["lr"] = lr
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_numpy"]
    gen = torch.Generator()
    gen.set_state(tensors["rng.torch"].to(torch.uint8))
    return TrainState(model, optimizer, rng, gen, int(meta["step"])), meta


# -- editing -------------------------------------------------------------------------

class FirstFrameEditor(Protocol):
    def edit(self, frame: torch.Tensor, source_prompt: str, edit_prompt: str,
             edit_type: EditType) -> torch.Tensor: ...


class IdentityEditor:
    def edit(self, frame, source_prompt, edit_prompt, edit_type):
        return frame.clone()


class RecolorOracleEditor:
    """Exact first-frame editor for synthetic scenes.

    The shape support is segmented against the modal background; the frame
    is then repainted with the colors and style named by the edit prompt.
    Motion-only edits return the frame unchanged.
    """

    def __init__(self):
        self.calls = 0

    def edit(self, frame: torch.Tensor, source_prompt: str, edit_prompt: str, edit_type: EditType) -> torch.Tensor:
        self.calls += 1
        edit_type = EditType(edit_type)
        src, dst = parse_prompt(source_prompt), parse_prompt(edit_prompt)
        if edit_type is EditType.MOTION:
            return frame.clone()
        if dst.shape != src.shape:
            raise ValueError("the recolor editor cannot change the shape kind")
        pixels = frame.detach().double().numpy()[None]
        mask = foreground_masks(pixels)
        out = compose_frames(mask, dst.shape_color, dst.background, dst.style)[0]
        return torch.from_numpy(out)


def recolor_oracle_editor(frame, source_prompt, edit_prompt, edit_type):
    return RecolorOracleEditor().edit(frame, source_prompt, edit_prompt, edit_type)


@dataclass
class EditRequest:
    source: VideoTensor
    source_prompt: str
    edit_prompt: str
    edit_type: EditType
    scales: GuidanceScales = GuidanceScales()
    seed: int = 0


@dataclass
class EditPlan:
    """Everything the sampler is conditioned on for one request."""

    bundle: ConditioningBundle
    scales: GuidanceScales
    edited_frame: torch.Tensor
    motion_dropped: bool


def plan_edit(req: EditRequest, codec: Codec | CodecConfig, flow_estimator: FlowEstimator,
              editor: FirstFrameEditor) -> EditPlan:
    edit_type = EditType(req.edit_type)
    motion_edit = edit_type.is_motion
    motion = magnitude = None
    if not motion_edit:
        flow = flow_estimator.estimate(req.source)
        motion = encode_video(flow_to_rgb(flow), codec).latents
        magnitude = avg_flow_magnitude(flow)
    first = req.source.frames[0]
    if edit_type is not EditType.MOTION:
        first = editor.edit(first, req.source_prompt, req.edit_prompt, edit_type)
    if tuple(first.shape) != tuple(req.source.frames[0].shape):
        raise ValueError("first-frame editor changed the frame shape")
    image = encode_video(VideoTensor(first[None]), codec).latents[0]
    scales = req.scales
    if motion_edit:
        scales = GuidanceScales(scales.image, scales.text, 0.0)
    bundle = ConditioningBundle(text=req.edit_prompt, image=image, motion=motion, magnitude=magnitude)
    assert bundle.is_null("motion") == motion_edit
    return EditPlan(bundle, scales, first, motion_edit)


def moca_edit(req: EditRequest, model: Denoiser, flow_estimator: FlowEstimator, editor: FirstFrameEditor,
              codec: Codec | CodecConfig = CodecConfig(), schedule: NoiseSchedule | None = None,
              sampler: SamplerConfig = SamplerConfig()) -> VideoTensor:
    schedule = schedule or make_schedule()
    plan = plan_edit(req, codec, flow_estimator, editor)
    if plan.motion_dropped:
        log.info("motion edit: motion conditioning dropped (s_M = 0)")
    shape = (req.source.shape[0], model.cfg.latent_channels, *plan.bundle.image.shape[-2:])
    z = cfg_sample(model, shape, plan.bundle, plan.scales, schedule, sampler, seed=req.seed)
    return decode_video(LatentVideo(z), codec, fps=req.source.fps)


def moca_edit_batch(reqs: Sequence[EditRequest], model: Denoiser, flow_estimators: Sequence[FlowEstimator],
                    editor: FirstFrameEditor, codec: Codec | CodecConfig = CodecConfig(),
                    schedule: NoiseSchedule | None = None, sampler: SamplerConfig = SamplerConfig()
                    ) -> list[VideoTensor]:
    """Batched edits sharing one guidance setting per group of equal scales."""
    schedule = schedule or make_schedule()
    plans = [plan_edit(r, codec, fe, editor) for r, fe in zip(reqs, flow_estimators)]
    dropped = sum(p.motion_dropped for p in plans)
    if dropped:
        log.info("motion edit: motion conditioning dropped (s_M = 0) for %d of %d request(s)", dropped, len(plans))
    out: list[VideoTensor | None] = [None] * len(reqs)
    groups: dict[GuidanceScales, list[int]] = {}
    for i, p in enumerate(plans):
        groups.setdefault(p.scales, []).append(i)
    for scales, idx in groups.items():
        first = reqs[idx[0]]
        shape = (first.source.shape[0], model.cfg.latent_channels, *plans[idx[0]].bundle.image.shape[-2:])
        z = cfg_sample(model, shape, [plans[i].bundle for i in idx], scales, schedule, sampler,
                       seed=[reqs[i].seed for i in idx])
        for j, i in enumerate(idx):
            out[i] = decode_video(LatentVideo(z[j]), codec, fps=reqs[i].source.fps)
    return out
