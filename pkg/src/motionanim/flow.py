"""Optical flow fields: analytic ground truth, color-wheel RGB encoding, average magnitude."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb

from .codec import VideoTensor
from .scenes import SceneSpec, centroids, foreground_masks, scene_masks


@dataclass
class FlowField:
    """Per-frame motion, T x 2 x H x W in pixels/frame; channel 0 is x (right), 1 is y (down).

    Entry i is the motion from frame i to i+1. The last entry repeats the
    previous motion so the length matches the clip.
    """

    vectors: torch.Tensor

    def __post_init__(self):
        self.vectors = torch.as_tensor(self.vectors, dtype=torch.float32)
        if self.vectors.ndim != 4 or self.vectors.shape[1] != 2:
            raise ValueError(f"flow must be T x 2 x H x W, got {tuple(self.vectors.shape)}")
        if not torch.isfinite(self.vectors).all():
            raise ValueError("flow contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.vectors.shape)


class FlowEstimator(Protocol):
    def estimate(self, video: VideoTensor) -> FlowField: ...


def pad_flow(pairwise: np.ndarray) -> np.ndarray:
    """Extend T-1 pairwise flows to T entries by repeating the last one."""
    pairwise = np.asarray(pairwise)
    if pairwise.shape[0] == 0:
        raise ValueError("need at least one pairwise flow")
    return np.concatenate([pairwise, pairwise[-1:]], axis=0)


def flow_to_rgb(flow: FlowField) -> VideoTensor:
    """Color-wheel encoding: hue from direction, saturation from |f| / max|f| over the clip."""
    vec = flow.vectors.double().numpy()
    u, v = vec[:, 0], vec[:, 1]
    mag = np.hypot(u, v)
    peak = mag.max()
    sat = mag / peak if peak > 0 else np.zeros_like(mag)
    hue = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    rgb = hsv_to_rgb(hsv).transpose(0, 3, 1, 2)
    return VideoTensor(torch.from_numpy(np.clip(rgb, 0.0, 1.0).astype(np.float32)))


def avg_flow_magnitude(flow: FlowField) -> float:
    vec = flow.vectors.double()
    return float(torch.sqrt(vec[:, 0] ** 2 + vec[:, 1] ** 2).mean())


def synthetic_flow(scene: SceneSpec) -> FlowField:
    """Scene velocity on the shape's support at every frame, zero on the static background."""
    masks = scene_masks(scene).astype(np.float32)
    vx, vy = scene.velocity
    vec = np.stack([masks * vx, masks * vy], axis=1)
    return FlowField(torch.from_numpy(vec))


class SceneFlowEstimator:
    """Ground-truth flow from the scene sidecar of a synthetic clip."""

    def __init__(self, scene: SceneSpec):
        self.scene = scene
        self.calls = 0

    def estimate(self, video: VideoTensor) -> FlowField:
        self.calls += 1
        flow = synthetic_flow(self.scene)
        if flow.shape[0] != video.shape[0] or flow.shape[2:] != video.shape[2:]:
            raise ValueError("scene sidecar does not match the video it is paired with")
        return flow


class CentroidFlowEstimator:
    """Rigid-translation estimator: foreground centroid displacement painted on the foreground.

    Exact for single translating shapes on a static background.
    """

    def __init__(self):
        self.calls = 0

    def estimate(self, video: VideoTensor) -> FlowField:
        self.calls += 1
        frames = video.frames.double().numpy()
        masks = foreground_masks(frames)
        cents = centroids(masks)
        t, _, h, w = frames.shape
        if t == 1:
            return FlowField(torch.zeros(1, 2, h, w))
        disp = np.nan_to_num(np.diff(cents, axis=0))
        disp = pad_flow(disp)
        vec = masks[:, None, :, :] * disp[:, :, None, None]
        return FlowField(torch.from_numpy(vec.astype(np.float32)))
