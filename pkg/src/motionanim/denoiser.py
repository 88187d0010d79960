"""Toy spatiotemporal v-prediction network.

Inputs are concatenated channel-wise as [noisy latent, first-frame latent
repeated over time, flow-RGB latent]. Text enters through cross-attention,
the diffusion step and the average flow magnitude through an additive
embedding. Every spatial block is followed by a temporal 1D conv, and every
attention block by a temporal attention block.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .vocab import VOCAB, token_ids

CHECKPOINT_SCHEMA = "motionanim.denoiser/1"
SLOTS = ("image", "text", "motion")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 48
    base_width: int = 64
    temporal_depth: int = 1
    vocab_size: int = len(VOCAB)
    embed_width: int = 64
    time_width: int = 64
    heads: int = 4
    max_frames: int = 16
    max_tokens: int = 16
    magnitude_scale: float = 100.0
    groups: int = 8

    @property
    def in_channels(self) -> int:
        return 3 * self.latent_channels


@dataclass
class ConditioningBundle:
    """Conditioning for one clip. ``None`` or membership in ``null`` means NULL."""

    text: str | None = None
    image: torch.Tensor | None = None  # C x H' x W'
    motion: torch.Tensor | None = None  # T x C x H' x W'
    magnitude: float | None = None
    null: frozenset[str] = frozenset()

    def is_null(self, slot: str) -> bool:
        if slot in self.null:
            return True
        if slot == "text":
            return self.text is None
        if slot == "image":
            return self.image is None
        return self.motion is None

    def without(self, *slots: str) -> "ConditioningBundle":
        for s in slots:
            if s not in SLOTS:
                raise ValueError(f"unknown conditioning slot {s!r}")
        return replace(self, null=self.null | frozenset(slots))

    def keep_only(self, *slots: str) -> "ConditioningBundle":
        return self.without(*[s for s in SLOTS if s not in slots])


def sinusoidal_features(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """[cos(x w_k), sin(x w_k)] with geometric frequencies; x has shape (B,)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = x.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).float()


class TextEmbedder(nn.Module):
    """Lookup-table stand-in for a frozen text encoder."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.tokens = nn.Embedding(cfg.vocab_size, cfg.embed_width)
        self.positions = nn.Embedding(cfg.max_tokens, cfg.embed_width)
        self.null_sequence = nn.Parameter(torch.randn(1, cfg.embed_width) * 0.02)

    def forward(self, prompt: str | None) -> torch.Tensor:
        ids = token_ids(prompt) if prompt else []
        if not ids:
            return self.null_sequence
        if len(ids) > self.cfg.max_tokens:
            raise ValueError(f"prompt has {len(ids)} tokens, limit is {self.cfg.max_tokens}")
        idx = torch.tensor(ids)
        return self.tokens(idx) + self.positions(torch.arange(len(ids)))

    def batch(self, prompts: Sequence[str | None]) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded B x L x D sequences plus a B x L validity mask."""
        seqs = [self(p) for p in prompts]
        length = max(s.shape[0] for s in seqs)
        out = torch.zeros(len(seqs), length, self.cfg.embed_width, dtype=seqs[0].dtype)
        mask = torch.zeros(len(seqs), length, dtype=torch.bool)
        for i, s in enumerate(seqs):
            out[i, :s.shape[0]] = s
            mask[i, :s.shape[0]] = True
        return out, mask


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, ch), ch)


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb: int, groups: int):
        super().__init__()
        self.norm1 = _norm(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb, cout)
        self.norm2 = _norm(cout, groups)
        self.conv2 = _zero(nn.Conv2d(cout, cout, 3, padding=1))
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TemporalConv(nn.Module):
    """Residual 1D conv over frames; zero-initialized so it starts as identity."""

    def __init__(self, ch: int, groups: int, depth: int = 1):
        super().__init__()
        layers: list[nn.Module] = []
        for i in range(depth):
            layers += [_norm(ch, groups), nn.SiLU(), nn.Conv1d(ch, ch, 3, padding=1)]
        _zero(layers[-1])
        self.net = nn.Sequential(*layers)

    def forward(self, x, frames: int):
        bt, c, h, w = x.shape
        seq = x.reshape(bt // frames, frames, c, h, w).permute(0, 3, 4, 2, 1).reshape(-1, c, frames)
        seq = seq + self.net(seq)
        return seq.reshape(bt // frames, h, w, c, frames).permute(0, 4, 3, 1, 2).reshape(bt, c, h, w)


class Attention(nn.Module):
    def __init__(self, dim: int, context_dim: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = _norm(dim, groups)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(context_dim, dim, bias=False)
        self.v = nn.Linear(context_dim, dim, bias=False)
        self.out = _zero(nn.Linear(dim, dim))

    def attend(self, tokens, context, mask=None):
        b, n, d = tokens.shape
        h = self.heads
        q = self.q(tokens).reshape(b, n, h, d // h).transpose(1, 2)
        k = self.k(context).reshape(b, context.shape[1], h, d // h).transpose(1, 2)
        v = self.v(context).reshape(b, context.shape[1], h, d // h).transpose(1, 2)
        attn_mask = None if mask is None else mask[:, None, None, :]
        o = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.out(o.transpose(1, 2).reshape(b, n, d))


class SpatialAttention(Attention):
    """Self-attention over the H*W positions of each frame, or cross-attention to text."""

    def forward(self, x, context=None, mask=None):
        bt, c, h, w = x.shape
        tokens = self.norm(x).reshape(bt, c, h * w).transpose(1, 2)
        ctx = tokens if context is None else context
        out = self.attend(tokens, ctx, mask)
        return x + out.transpose(1, 2).reshape(bt, c, h, w)


class TemporalAttention(Attention):
    def __init__(self, dim: int, heads: int, groups: int, max_frames: int):
        super().__init__(dim, dim, heads, groups)
        self.pos = nn.Parameter(torch.randn(max_frames, dim) * 0.02)

    def forward(self, x, frames: int):
        bt, c, h, w = x.shape
        b = bt // frames
        tokens = self.norm(x).reshape(b, frames, c, h * w).permute(0, 3, 1, 2).reshape(b * h * w, frames, c)
        tokens = tokens + self.pos[:frames]
        out = self.attend(tokens, tokens)
        out = out.reshape(b, h * w, frames, c).permute(0, 2, 3, 1).reshape(bt, c, h, w)
        return x + out


class Stage(nn.Module):
    """ResBlock -> temporal conv -> [self-attn] -> cross-attn -> temporal attn."""

    def __init__(self, cin: int, cout: int, cfg: DenoiserConfig, emb: int, self_attention: bool):
        super().__init__()
        g = cfg.groups
        self.res = ResBlock(cin, cout, emb, g)
        self.tconv = TemporalConv(cout, g, cfg.temporal_depth)
        self.self_attn = SpatialAttention(cout, cout, cfg.heads, g) if self_attention else None
        self.cross = SpatialAttention(cout, cfg.embed_width, cfg.heads, g)
        self.tattn = TemporalAttention(cout, cfg.heads, g, cfg.max_frames)

    def forward(self, x, emb, text, text_mask, frames: int, temporal: bool):
        x = self.res(x, emb)
        if temporal:
            x = self.tconv(x, frames)
        if self.self_attn is not None:
            x = self.self_attn(x)
        x = self.cross(x, text, text_mask)
        if temporal:
            x = self.tattn(x, frames)
        return x


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        emb = 4 * cfg.time_width
        self.text = TextEmbedder(cfg)
        self.magnitude_proj = nn.Linear(cfg.time_width, cfg.time_width)
        self.null_magnitude = nn.Parameter(torch.randn(cfg.time_width) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_width, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.conv_in = nn.Conv2d(cfg.in_channels, w, 3, padding=1)
        self.down = Stage(w, w, cfg, emb, self_attention=False)
        self.downsample = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.mid = Stage(w, 2 * w, cfg, emb, self_attention=True)
        self.upsample = nn.Conv2d(2 * w, w, 3, padding=1)
        self.up = Stage(2 * w, w, cfg, emb, self_attention=False)
        self.norm_out = _norm(w, cfg.groups)
        self.conv_out = _zero(nn.Conv2d(w, cfg.latent_channels, 3, padding=1))
        self.temporal = True

    # -- embeddings -----------------------------------------------------------------
    def embed_text(self, prompt: str | None) -> torch.Tensor:
        return self.text(prompt)

    def magnitude_features(self, m: torch.Tensor) -> torch.Tensor:
        feats = sinusoidal_features(torch.as_tensor(m, dtype=torch.float64).reshape(-1) * self.cfg.magnitude_scale,
                                    self.cfg.time_width)
        return feats.to(self.magnitude_proj.weight.dtype)

    def embed_magnitude(self, m) -> torch.Tensor:
        m = torch.as_tensor(m, dtype=torch.float64).reshape(-1)
        if (m < 0).any():
            raise ValueError("flow magnitude must be non-negative")
        return self.magnitude_proj(self.magnitude_features(m))

    def step_features(self, t: torch.Tensor) -> torch.Tensor:
        return sinusoidal_features(t, self.cfg.time_width).to(self.magnitude_proj.weight.dtype)

    # -- forward --------------------------------------------------------------------
    def forward(self, z_t: torch.Tensor, t: torch.Tensor, text: torch.Tensor, text_mask: torch.Tensor,
                image: torch.Tensor, image_on: torch.Tensor, motion: torch.Tensor, motion_on: torch.Tensor,
                magnitude: torch.Tensor) -> torch.Tensor:
        """Batched forward on tensors.

        z_t: B x T x C x H x W; t: (B,); text: B x L x D with mask B x L;
        image: B x C x H x W; motion: B x T x C x H x W; magnitude: (B,);
        image_on / motion_on: (B,) booleans. NULL slots read as zeros no matter
        what tensor is passed.
        """
        b, frames, c, h, w = z_t.shape
        if c != self.cfg.latent_channels:
            raise ValueError(f"latent has {c} channels, model expects {self.cfg.latent_channels}")
        if frames > self.cfg.max_frames:
            raise ValueError(f"{frames} frames exceed max_frames={self.cfg.max_frames}")
        zero = torch.zeros((), dtype=z_t.dtype)
        image = torch.where(image_on[:, None, None, None], image, zero)
        motion = torch.where(motion_on[:, None, None, None, None], motion, zero)
        magnitude = torch.where(motion_on, magnitude, zero)
        x = torch.cat([z_t, image[:, None].expand(-1, frames, -1, -1, -1), motion], dim=2)
        x = x.reshape(b * frames, 3 * c, h, w)

        mag = torch.where(motion_on[:, None], self.embed_magnitude(magnitude), self.null_magnitude[None])
        emb = self.time_mlp(self.step_features(t) + mag)
        emb = emb.repeat_interleave(frames, dim=0)
        text = text.repeat_interleave(frames, dim=0)
        text_mask = text_mask.repeat_interleave(frames, dim=0)

        temporal = self.temporal
        h0 = self.conv_in(x)
        h1 = self.down(h0, emb, text, text_mask, frames, temporal)
        h2 = self.mid(self.downsample(h1), emb, text, text_mask, frames, temporal)
        up = self.upsample(F.interpolate(h2, scale_factor=2, mode="nearest"))
        h3 = self.up(torch.cat([up, h1], dim=1), emb, text, text_mask, frames, temporal)
        out = self.conv_out(F.silu(self.norm_out(h3)))
        return out.reshape(b, frames, c, h, w)

    def collate(self, bundles: Sequence[ConditioningBundle], like: torch.Tensor) -> dict[str, torch.Tensor]:
        """Stack per-clip bundles into the tensors ``forward`` takes; like is B x T x C x H x W."""
        b, frames, c, h, w = like.shape
        texts = [None if bd.is_null("text") else bd.text for bd in bundles]
        text, text_mask = self.text.batch(texts)
        image = torch.zeros(b, c, h, w, dtype=like.dtype)
        motion = torch.zeros(b, frames, c, h, w, dtype=like.dtype)
        magnitude = torch.zeros(b, dtype=like.dtype)
        image_on = torch.zeros(b, dtype=torch.bool)
        motion_on = torch.zeros(b, dtype=torch.bool)
        for i, bd in enumerate(bundles):
            if not bd.is_null("image"):
                if tuple(bd.image.shape) != (c, h, w):
                    raise ValueError(f"image conditioning {tuple(bd.image.shape)} != {(c, h, w)}")
                image[i] = bd.image
                image_on[i] = True
            if not bd.is_null("motion"):
                if tuple(bd.motion.shape) != (frames, c, h, w):
                    raise ValueError(f"motion conditioning {tuple(bd.motion.shape)} != {(frames, c, h, w)}")
                if bd.magnitude is None:
                    raise ValueError("motion conditioning needs an average flow magnitude")
                motion[i] = bd.motion
                magnitude[i] = bd.magnitude
                motion_on[i] = True
        return dict(text=text, text_mask=text_mask, image=image, image_on=image_on,
                    motion=motion, motion_on=motion_on, magnitude=magnitude)

    def denoise_batch(self, z_t: torch.Tensor, t, bundles: Sequence[ConditioningBundle]) -> torch.Tensor:
        if len(bundles) != z_t.shape[0]:
            raise ValueError(f"{len(bundles)} bundles for a batch of {z_t.shape[0]}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(z_t.shape[0])
        return self(z_t, t, **self.collate(bundles, z_t))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def denoise(model: Denoiser, z_t: torch.Tensor, t: int, cond: ConditioningBundle) -> torch.Tensor:
    """v-prediction for a single clip z_t of shape T x C x H' x W'."""
    if z_t.ndim != 4:
        raise ValueError(f"expected T x C x H' x W', got {tuple(z_t.shape)}")
    return model.denoise_batch(z_t[None], t, [cond])[0]


class temporal_disabled:
    """Context manager that bypasses every temporal layer (for factorization probes)."""

    def __init__(self, model: Denoiser):
        self.model = model

    def __enter__(self):
        self.prev = self.model.temporal
        self.model.temporal = False
        return self.model

    def __exit__(self, *exc):
        self.model.temporal = self.prev


def save_checkpoint(path, model: Denoiser, extra: dict | None = None, tensors: dict | None = None) -> None:
    from .io import save_bundle

    named = {f"model.{k}": v for k, v in model.state_dict().items()}
    for k, v in (tensors or {}).items():
        named[k] = v
    meta = {"schema": CHECKPOINT_SCHEMA, "config": asdict(model.cfg), "extra": extra or {}}
    save_bundle(path, named, meta)


def load_checkpoint(path) -> tuple[Denoiser, dict, dict[str, torch.Tensor]]:
    """Returns (model, extra metadata, non-model tensors)."""
    from .io import FormatError, load_bundle

    named, meta = load_bundle(path)
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise FormatError(f"{path}: checkpoint schema {meta.get('schema')!r}, expected {CHECKPOINT_SCHEMA!r}")
    model = Denoiser(DenoiserConfig(**meta["config"]))
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in named.items() if k.startswith("model.")}
    model.load_state_dict(state)
    rest = {k: torch.from_numpy(v) for k, v in named.items() if not k.startswith("model.")}
    return model, meta.get("extra", {}), rest
