"""Moving-shape scenes with analytic rendering.

Positions are shape centers in continuous pixel coordinates, where pixel
(row i, col j) has its center at (x=j+0.5, y=i+0.5).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .vocab import COLORS, DIRECTIONS, PALETTE, SHAPES, STYLES, PromptParts, apply_style, format_prompt


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "square"
    shape_color: str = "red"
    background: str = "white"
    size: int = 16
    start: tuple[float, float] = (32.0, 32.0)
    velocity: tuple[float, float] = (0.0, 0.0)
    style: str = "plain"
    frames: int = 8
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SceneError(f"unknown shape {self.shape!r}")
        for c in (self.shape_color, self.background):
            if c not in COLORS:
                raise SceneError(f"unknown color {c!r}")
        if self.shape_color == self.background:
            raise SceneError("shape and background colors must differ")
        if self.style not in STYLES:
            raise SceneError(f"unknown style {self.style!r}")
        if self.size < 2 or self.frames < 1:
            raise SceneError("size must be >= 2 and frames >= 1")
        half = self.size / 2
        for k in range(self.frames):
            cx, cy = self.center(k)
            if cx - half < 0 or cy - half < 0 or cx + half > self.width or cy + half > self.height:
                raise SceneError(f"shape leaves the {self.width}x{self.height} frame at frame {k}")

    def center(self, k: int) -> tuple[float, float]:
        return (self.start[0] + k * self.velocity[0], self.start[1] + k * self.velocity[1])

    @property
    def direction(self) -> str:
        vx, vy = self.velocity
        if vx == 0 and vy == 0:
            return "still"
        unit = (int(np.sign(vx)), int(np.sign(vy)))
        for name, d in DIRECTIONS.items():
            if d == unit:
                return name
        raise SceneError(f"velocity {self.velocity} has no direction word")

    def prompt(self) -> str:
        return format_prompt(PromptParts(self.shape_color, self.shape, self.direction, self.background, self.style))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        d["start"] = tuple(d["start"])
        d["velocity"] = tuple(d["velocity"])
        return cls(**d)

    def with_(self, **changes) -> "SceneSpec":
        return replace(self, **changes)


def shape_mask(shape: str, size: int, center: tuple[float, float], height: int, width: int) -> np.ndarray:
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    cx, cy = center
    half = size / 2
    if shape == "square":
        return (np.abs(xs - cx) < half) & (np.abs(ys - cy) < half)
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
    if shape == "triangle":
        depth = ys - (cy - half)  # distance below the apex
        return (depth >= 0) & (depth < size) & (np.abs(xs - cx) <= depth / 2)
    raise SceneError(f"unknown shape {shape!r}")


def scene_masks(scene: SceneSpec) -> np.ndarray:
    """Boolean support of the shape, T x H x W."""
    return np.stack([shape_mask(scene.shape, scene.size, scene.center(k), scene.height, scene.width)
                     for k in range(scene.frames)])


def compose_frames(masks: np.ndarray, shape_color: str, background: str, style: str) -> np.ndarray:
    """Paint T x H x W masks into T x 3 x H x W frames."""
    fg = apply_style(np.array(PALETTE[shape_color]), style)
    bg = apply_style(np.array(PALETTE[background]), style)
    m = masks[:, None, :, :].astype(np.float64)
    frames = m * fg[None, :, None, None] + (1.0 - m) * bg[None, :, None, None]
    return frames.astype(np.float32)


def render(scene: SceneSpec) -> np.ndarray:
    return compose_frames(scene_masks(scene), scene.shape_color, scene.background, scene.style)


class NoForegroundError(ValueError):
    pass


def background_color(frames: np.ndarray) -> np.ndarray:
    """Modal color of a T x 3 x H x W clip after quantizing to 1/32 steps."""
    q = np.rint(np.asarray(frames, dtype=np.float64) * 32).astype(np.int64)
    keys = (q[:, 0] * 33 + q[:, 1]) * 33 + q[:, 2]
    values, counts = np.unique(keys.ravel(), return_counts=True)
    mode = int(values[np.argmax(counts)])
    mask = keys == mode
    return np.asarray(frames, dtype=np.float64).transpose(1, 0, 2, 3)[:, mask].mean(axis=1)


def foreground_masks(frames: np.ndarray, largest_only: bool = True) -> np.ndarray:
    """Per-frame foreground support: pixels far from the modal background color.

    The cut is half the 99th-percentile distance to the background (floored at
    0.05), so clean renders split exactly and noisy samples still separate.
    """
    frames = np.asarray(frames, dtype=np.float64)
    bg = background_color(frames)
    dist = np.linalg.norm(frames - bg[None, :, None, None], axis=1)
    cut = max(0.05, 0.5 * float(np.percentile(dist, 99)))
    masks = dist > cut
    if largest_only:
        for k in range(masks.shape[0]):
            labels, n = ndimage.label(masks[k])
            if n > 1:
                sizes = ndimage.sum(masks[k], labels, index=np.arange(1, n + 1))
                masks[k] = labels == (1 + int(np.argmax(sizes)))
    return masks


def centroids(masks: np.ndarray) -> np.ndarray:
    """(x, y) centroid per frame in continuous pixel coordinates; NaN where a frame is empty."""
    out = np.full((masks.shape[0], 2), np.nan)
    for k, m in enumerate(masks):
        ys, xs = np.nonzero(m)
        if len(xs):
            out[k] = (xs.mean() + 0.5, ys.mean() + 0.5)
    return out
