"""Frame-wise video codec between pixel clips and diffusion latents.

Two kinds are supported. ``identity-patch`` is a pure space-to-channel
rearrangement (exactly invertible, the default). ``learned-tiny`` is a small
convolutional autoencoder trained on synthetic frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    kind: Literal["identity-patch", "learned-tiny"] = "identity-patch"
    factor: int = 4
    channels: int = 48

    def __post_init__(self):
        if self.kind not in ("identity-patch", "learned-tiny"):
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.factor < 1:
            raise ValueError("codec factor must be a positive integer")
        if self.kind == "identity-patch" and self.channels != 3 * self.factor ** 2:
            raise ValueError(
                f"identity-patch needs channels = 3*f^2 = {3 * self.factor ** 2}, got {self.channels}")
        if self.kind == "learned-tiny" and self.factor not in (1, 2, 4, 8):
            raise ValueError("learned-tiny supports factors 1, 2, 4, 8")


@dataclass
class VideoTensor:
    """Pixel clip, frames T x 3 x H x W in [0, 1]."""

    frames: torch.Tensor
    fps: float = 4.0

    def __post_init__(self):
        self.frames = torch.as_tensor(self.frames, dtype=torch.float32)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3 or self.frames.shape[0] < 1:
            raise DimensionError(f"video must be T x 3 x H x W with T >= 1, got {tuple(self.frames.shape)}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"video values must lie in [0, 1], got [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.frames.shape)


@dataclass
class LatentVideo:
    latents: torch.Tensor  # T x C x H' x W'

    def __post_init__(self):
        if self.latents.ndim != 4:
            raise DimensionError(f"latent video must be T x C x H' x W', got {tuple(self.latents.shape)}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.latents.shape)


class TinyAutoencoder(nn.Module):
    """Per-frame conv autoencoder; one stride-2 stage per factor of two."""

    def __init__(self, cfg: CodecConfig, width: int = 32):
        super().__init__()
        self.cfg = cfg
        stages = int(np.log2(cfg.factor))
        enc: list[nn.Module] = [nn.Conv2d(3, width, 3, padding=1), nn.SiLU()]
        for _ in range(stages):
            enc += [nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
        enc.append(nn.Conv2d(width, cfg.channels, 3, padding=1))
        dec: list[nn.Module] = [nn.Conv2d(cfg.channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(stages):
            dec += [nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
        dec.append(nn.Conv2d(width, 3, 3, padding=1))
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.encoder(frames * 2.0 - 1.0))

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return (self.decoder(latents) + 1.0) / 2.0


@dataclass
class Codec:
    """A codec config plus, for the learned kind, its network."""

    config: CodecConfig = field(default_factory=CodecConfig)
    net: TinyAutoencoder | None = None

    def __post_init__(self):
        if self.config.kind == "learned-tiny" and self.net is None:
            self.net = TinyAutoencoder(self.config)

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """Frames N x 3 x H x W in [0,1] -> N x C x H/f x W/f."""
        f = self.config.factor
        h, w = frames.shape[-2:]
        if h % f or w % f:
            raise DimensionError(f"frame size {h}x{w} not divisible by codec factor {f}")
        if self.config.kind == "identity-patch":
            return F.pixel_unshuffle(frames * 2.0 - 1.0, f)
        return self.net.encode(frames)

    def decode_frames(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.shape[-3] != self.config.channels:
            raise DimensionError(
                f"latent has {latents.shape[-3]} channels, codec expects {self.config.channels}")
        if self.config.kind == "identity-patch":
            out = (F.pixel_shuffle(latents, self.config.factor) + 1.0) / 2.0
        else:
            out = self.net.decode(latents)
        return out.clamp(0.0, 1.0)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {} if self.net is None else {k: v.detach().clone() for k, v in self.net.state_dict().items()}


def _as_codec(codec: Codec | CodecConfig) -> Codec:
    if isinstance(codec, Codec):
        return codec
    if codec.kind != "identity-patch":
        raise ValueError("learned-tiny codec needs trained weights; pass a Codec instance")
    return Codec(codec)


def encode_video(video: VideoTensor, codec: Codec | CodecConfig) -> LatentVideo:
    codec = _as_codec(codec)
    with torch.no_grad():
        return LatentVideo(codec.encode_frames(video.frames))


def decode_video(latent: LatentVideo, codec: Codec | CodecConfig, fps: float = 4.0) -> VideoTensor:
    codec = _as_codec(codec)
    with torch.no_grad():
        return VideoTensor(codec.decode_frames(latent.latents), fps=fps)


def train_tiny_codec(frames: torch.Tensor, cfg: CodecConfig, steps: int = 1500, batch_size: int = 32,
                     lr: float = 2e-3, seed: int = 0) -> Codec:
    """Fit a learned-tiny codec on a pool of frames (N x 3 x H x W) with an L1 reconstruction loss."""
    if cfg.kind != "learned-tiny":
        raise ValueError("train_tiny_codec needs a learned-tiny config")
    torch.manual_seed(seed)
    codec = Codec(cfg)
    opt = torch.optim.Adam(codec.net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        idx = torch.randint(0, frames.shape[0], (batch_size,), generator=gen)
        batch = frames[idx]
        recon = codec.net.decode(codec.net.encode(batch))
        loss = (recon - batch).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    codec.net.eval()
    return codec
