"""Three-way classifier-free guidance, the conditioning-dropout policy and the guided sampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import torch

from .denoiser import ConditioningBundle, Denoiser
from .schedule import NoiseSchedule, SamplerConfig, ddim_step

IMAGE, TEXT, MOTION = 0, 1, 2
# the six non-empty proper subsets of {image, text, motion}
COMBOS = ((IMAGE,), (TEXT,), (MOTION,), (IMAGE, TEXT), (IMAGE, MOTION), (TEXT, MOTION))


@dataclass(frozen=True)
class GuidanceScales:
    image: float = 1.0
    text: float = 1.0
    motion: float = 1.0

    def __post_init__(self):
        for name in ("image", "text", "motion"):
            if getattr(self, name) < 0:
                raise ValueError(f"guidance scale s_{name} must be >= 0")


@dataclass(frozen=True)
class DropoutPolicy:
    """Which conditionings are nulled per training example.

    ``compositional``: each combination in COMBOS is drawn with p_combo
    (else keep all), then motion is additionally dropped with p_extra. With
    the defaults the marginal motion-null rate is 0.3 + 0.7 * 2/7 = 0.5.
    ``flat``: combos over image/text only, motion dropped independently
    with p_motion.
    """

    p_combo: float = 0.10
    p_extra: float = 2 / 7
    mode: Literal["compositional", "flat"] = "compositional"
    p_motion: float = 0.5

    def __post_init__(self):
        if self.mode not in ("compositional", "flat"):
            raise ValueError(f"unknown dropout mode {self.mode!r}")
        if not 0 <= 6 * self.p_combo <= 1:
            raise ValueError("need 6 * p_combo <= 1")
        if not (0 <= self.p_extra <= 1 and 0 <= self.p_motion <= 1):
            raise ValueError("probabilities must lie in [0, 1]")

    def marginals(self) -> dict[str, float]:
        if self.mode == "flat":
            return {"image": 2 * self.p_combo, "text": 2 * self.p_combo, "motion": self.p_motion}
        base_m = 3 * self.p_combo
        return {"image": 3 * self.p_combo, "text": 3 * self.p_combo,
                "motion": base_m + (1 - base_m) * self.p_extra}


def sample_dropout_masks(rng: np.random.Generator, n: int, policy: DropoutPolicy = DropoutPolicy()) -> np.ndarray:
    """n x 3 boolean array; column order (image, text, motion), True = NULL."""
    out = np.zeros((n, 3), dtype=bool)
    u = rng.random(n)
    if policy.mode == "compositional":
        combos = COMBOS
    else:
        combos = ((IMAGE,), (TEXT,), (IMAGE, TEXT))
    for k, combo in enumerate(combos):
        hit = (u >= k * policy.p_combo) & (u < (k + 1) * policy.p_combo)
        for slot in combo:
            out[hit, slot] = True
    extra = rng.random(n) < (policy.p_extra if policy.mode == "compositional" else policy.p_motion)
    out[:, MOTION] |= extra
    return out


def sample_dropout_mask(rng: np.random.Generator, policy: DropoutPolicy = DropoutPolicy()) -> frozenset[str]:
    row = sample_dropout_masks(rng, 1, policy)[0]
    return frozenset(name for name, off in zip(("image", "text", "motion"), row) if off)


def compose_guidance(u000, u00I, u0TI, uMTI, s: GuidanceScales):
    """u000 + s_I (u00I - u000) + s_T (u0TI - u00I) + s_M (uMTI - u0TI).

    Evaluated as the equivalent affine combination of the four branches, so
    s = (1, 1, 1) returns uMTI and s = (0, 0, 0) returns u000 without rounding.
    """
    shapes = {tuple(u.shape) for u in (u000, u00I, u0TI, uMTI)}
    if len(shapes) != 1:
        raise ValueError(f"guidance branches differ in shape: {sorted(shapes)}")
    return ((1 - s.image) * u000 + (s.image - s.text) * u00I + (s.text - s.motion) * u0TI
            + s.motion * uMTI)


def guided_v(model: Denoiser, z: torch.Tensor, t: int, conds: Sequence[ConditioningBundle], s: GuidanceScales,
             skip_zero_motion: bool = True) -> torch.Tensor:
    """Guided v for a batch z (B x T x C x H x W); all branches go through one batched call."""
    b = z.shape[0]
    with_motion = not (skip_zero_motion and s.motion == 0)
    branches = [[c.keep_only() for c in conds],
                [c.keep_only("image") for c in conds],
                [c.keep_only("image", "text") for c in conds]]
    if with_motion:
        branches.append(list(conds))
    zz = z.repeat(len(branches), *([1] * (z.ndim - 1)))
    out = model.denoise_batch(zz, t, [bd for branch in branches for bd in branch])
    parts = list(out.split(b))
    if not with_motion:
        parts.append(parts[2])
    return compose_guidance(*parts, s)


@torch.no_grad()
def cfg_sample(model: Denoiser, shape: Sequence[int], conds: ConditioningBundle | Sequence[ConditioningBundle],
               s: GuidanceScales, schedule: NoiseSchedule, sampler: SamplerConfig = SamplerConfig(),
               seed: int | Sequence[int] = 0, skip_zero_motion: bool = True) -> torch.Tensor:
    """Guided DDIM sampling from pure noise at t = N.

    ``shape`` is T x C x H' x W'. A single bundle returns one latent clip; a
    list of bundles (with one seed each) returns a batch.
    """
    single = isinstance(conds, ConditioningBundle)
    conds = [conds] if single else list(conds)
    seeds = [seed] * len(conds) if isinstance(seed, int) else list(seed)
    if len(seeds) != len(conds):
        raise ValueError("need one seed per bundle")
    dtype = next(model.parameters()).dtype
    z = torch.stack([torch.randn(tuple(shape), generator=torch.Generator().manual_seed(int(sd)), dtype=dtype)
                     for sd in seeds])
    noise_rng = torch.Generator().manual_seed(int(seeds[0]) + 1)
    ts = sampler.timesteps(schedule)
    was_training = model.training
    model.eval()
    try:
        for t, t_prev in zip(ts[:-1], ts[1:]):
            v = guided_v(model, z, t, conds, s, skip_zero_motion)
            z = ddim_step(schedule, z, v, t, t_prev, sampler, noise_rng)
    finally:
        model.train(was_training)
    return z[0] if single else z
