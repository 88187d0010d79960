"""Zero-terminal-SNR noise schedule, v-parameterization and the DDIM update."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    num_train_steps: int
    alpha_bar: np.ndarray  # length N+1, alpha_bar[0] = 1, alpha_bar[N] = 0

    @property
    def alphas(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    def snr(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.alpha_bar / (1.0 - self.alpha_bar)

    def alpha(self, t):
        return _gather(self.alphas, t, self.num_train_steps)

    def sigma(self, t):
        return _gather(self.sigmas, t, self.num_train_steps)


@dataclass(frozen=True)
class SamplerConfig:
    num_inference_steps: int = 64
    eta: float = 0.0

    def __post_init__(self):
        if self.num_inference_steps < 1:
            raise ScheduleError("num_inference_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ScheduleError("eta must lie in [0, 1]")

    def timesteps(self, schedule: NoiseSchedule) -> list[int]:
        """Descending step indices N = t_0 > t_1 > ... > t_S = 0."""
        n = schedule.num_train_steps
        if self.num_inference_steps > n:
            raise ScheduleError(f"{self.num_inference_steps} inference steps exceed {n} training steps")
        ts = np.rint(np.linspace(n, 0, self.num_inference_steps + 1)).astype(int)
        return [int(t) for t in ts]


def _base_alpha_bar(n: int, base: str) -> np.ndarray:
    if base == "linear":
        betas = np.linspace(1e-4, 0.02, n, dtype=np.float64)
        return np.cumprod(1.0 - betas)
    if base == "cosine":
        s = 0.008
        steps = np.arange(n + 1, dtype=np.float64) / n
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        return np.clip(f[1:] / f[0], 0.0, 1.0)
    raise ScheduleError(f"unknown base schedule {base!r}")


def make_schedule(n: int = 1000, base: Literal["linear", "cosine"] = "linear") -> NoiseSchedule:
    """Base curve with sqrt(alpha_bar) shifted and rescaled so step N has SNR exactly 0.

    sqrt(alpha_bar[1]) keeps its base value; the affine map is positive so
    monotonicity carries over from the base curve.
    """
    if int(n) != n or n < 2:
        raise ScheduleError(f"need an integer N >= 2, got {n!r}")
    root = np.sqrt(_base_alpha_bar(int(n), base))
    first, last = root[0], root[-1]
    root = (root - last) * (first / (first - last))
    root[-1] = 0.0
    alpha_bar = np.concatenate([[1.0], root ** 2])
    return NoiseSchedule(int(n), alpha_bar)


def _gather(table: np.ndarray, t, n: int):
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if (t < 0).any() or (t > n).any():
            raise ScheduleError(f"step out of range [0, {n}]")
        return torch.as_tensor(table, dtype=torch.float64)[t.long()]
    t = int(t)
    if not 0 <= t <= n:
        raise ScheduleError(f"step {t} out of range [0, {n}]")
    return float(table[t])


def _broadcast(coef, like):
    if isinstance(coef, torch.Tensor):
        coef = coef.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))
    return coef


def _check_shapes(*arrays):
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ScheduleError(f"shape mismatch: {sorted(shapes)}")


def add_noise(schedule: NoiseSchedule, x0, eps, t):
    """z_t = alpha_t * x0 + sigma_t * eps. ``t`` may be a scalar or one step per leading item."""
    _check_shapes(x0, eps)
    a = _broadcast(schedule.alpha(t), x0)
    s = _broadcast(schedule.sigma(t), x0)
    return a * x0 + s * eps


def v_target(schedule: NoiseSchedule, x0, eps, t):
    _check_shapes(x0, eps)
    a = _broadcast(schedule.alpha(t), x0)
    s = _broadcast(schedule.sigma(t), x0)
    return a * eps - s * x0


def predict_x0_from_v(schedule: NoiseSchedule, z_t, v, t):
    _check_shapes(z_t, v)
    a = _broadcast(schedule.alpha(t), z_t)
    s = _broadcast(schedule.sigma(t), z_t)
    return a * z_t - s * v


def predict_eps_from_v(schedule: NoiseSchedule, z_t, v, t):
    _check_shapes(z_t, v)
    a = _broadcast(schedule.alpha(t), z_t)
    s = _broadcast(schedule.sigma(t), z_t)
    return s * z_t + a * v


def ddim_step(schedule: NoiseSchedule, z_t: torch.Tensor, v_pred: torch.Tensor, t: int, t_prev: int,
              cfg: SamplerConfig = SamplerConfig(), rng: torch.Generator | None = None) -> torch.Tensor:
    """One DDIM move from step t to t_prev < t, driven by a v prediction.

    Neither x0_hat nor eps_hat divides by alpha_t, so the first step from
    t = N (alpha = 0) is well defined.
    """
    if not t_prev < t:
        raise ScheduleError(f"DDIM steps must descend, got t={t}, t_prev={t_prev}")
    x0_hat = predict_x0_from_v(schedule, z_t, v_pred, t)
    eps_hat = predict_eps_from_v(schedule, z_t, v_pred, t)
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = float(schedule.alpha_bar[t_prev])
    a_prev = float(np.sqrt(ab_prev))
    if cfg.eta == 0.0:
        return a_prev * x0_hat + float(np.sqrt(1.0 - ab_prev)) * eps_hat
    var = cfg.eta ** 2 * (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
    dir_coef = float(np.sqrt(max(1.0 - ab_prev - var, 0.0)))
    noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
    return a_prev * x0_hat + dir_coef * eps_hat + float(np.sqrt(var)) * noise


def ddim_sample(schedule: NoiseSchedule, denoise_fn, z_init: torch.Tensor, cfg: SamplerConfig = SamplerConfig(),
                rng: torch.Generator | None = None) -> torch.Tensor:
    """Run the DDIM chain from z_init at t = N down to t = 0. ``denoise_fn(z, t)`` returns v."""
    ts = cfg.timesteps(schedule)
    z = z_init
    for t, t_prev in zip(ts[:-1], ts[1:]):
        z = ddim_step(schedule, z, denoise_fn(z, t), t, t_prev, cfg, rng)
    return z
