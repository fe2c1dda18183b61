"""Noise schedule, forward process, loss, guidance and the DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DimensionError

DEFAULT_GUIDANCE = 7.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances ``beta`` (length T) and cumulative ``alpha_bar`` (length T+1).

    ``alpha_bar[0]`` is 1 so that timestep 0 means "no noise".
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(np.array(self.alpha_bar), dtype=dtype)


def schedule_from_betas(beta: Sequence[float]) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ConfigError("beta must be a non-empty 1-D sequence")
    if not np.all((beta > 0) & (beta < 1)):
        raise ConfigError("every beta must lie in (0, 1)")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T=int(beta.size), beta=beta, alpha_bar=alpha_bar)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be an integer >= 1, got {T!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return schedule_from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def _coefficients(t, s: NoiseSchedule, like: torch.Tensor):
    ab = s.alpha_bar_tensor(torch.float64)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.min() < 0 or t.max() > s.T:
            raise IndexError(f"timesteps must lie in [0, {s.T}]")
        a = ab[t.long()]
        a = a.reshape(-1, *([1] * (like.ndim - 1)))
    else:
        t = int(t)
        if not 0 <= t <= s.T:
            raise IndexError(f"timestep {t} outside [0, {s.T}]")
        a = ab[t]
    return a.sqrt().to(like.dtype), (1 - a).sqrt().to(like.dtype)


def forward_noise(z0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Noisy latent ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` is an int, or a 1-D tensor with one timestep per leading batch item.
    """
    _check_same_shape(z0, eps, "forward_noise")
    signal, noise = _coefficients(t, s, z0)
    return signal * z0 + noise * eps


def denoising_loss(pred_eps: torch.Tensor, true_eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    _check_same_shape(pred_eps, true_eps, "denoising_loss")
    return ((pred_eps - true_eps) ** 2).mean()


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float = DEFAULT_GUIDANCE) -> torch.Tensor:
    """Classifier-free guidance: ``w * cond + (1 - w) * uncond``."""
    _check_same_shape(eps_cond, eps_uncond, "cfg_combine")
    w = float(w)
    if not np.isfinite(w) or w < 0:
        raise ConfigError(f"guidance scale must be finite and >= 0, got {w}")
    return w * eps_cond + (1 - w) * eps_uncond


def sampling_timesteps(steps: int, T: int) -> list[int]:
    """Descending timesteps visited by the sampler, ending just above 0."""
    if int(steps) != steps or not 1 <= steps <= T:
        raise ConfigError(f"steps must be an integer in [1, {T}], got {steps!r}")
    ts = np.round(np.linspace(T, 1, int(steps))).astype(int)
    return [int(t) for t in ts]


def ddim_step(z: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, s: NoiseSchedule,
              clip: Optional[float] = None) -> torch.Tensor:
    """One deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    With ``clip`` the clean-latent estimate is clamped to ``[-clip, clip]``
    and the noise estimate is re-derived from the clamped value.
    """
    ab_t = float(s.alpha_bar[t])
    ab_prev = float(s.alpha_bar[t_prev])
    z0_hat = (z - (1 - ab_t) ** 0.5 * eps) / ab_t ** 0.5
    if clip is not None:
        z0_hat = z0_hat.clamp(-clip, clip)
        eps = (z - ab_t ** 0.5 * z0_hat) / (1 - ab_t) ** 0.5
    return ab_prev ** 0.5 * z0_hat + (1 - ab_prev) ** 0.5 * eps


# predict(z_t, t, conditions_or_None) -> eps
Predictor = Callable[[torch.Tensor, int, Optional[Any]], torch.Tensor]


@torch.no_grad()
def sample(
    predict: Predictor,
    conditions: Any,
    *,
    shape: Sequence[int],
    steps: int,
    schedule: NoiseSchedule,
    w: float = DEFAULT_GUIDANCE,
    seed: int = 0,
    dtype=torch.float32,
    clip: Optional[float] = None,
) -> torch.Tensor:
    """Deterministic guided sampling from pure noise.

    Every step evaluates ``predict`` once with ``conditions`` and once with
    ``None`` (the unconditional branch) and mixes them with :func:`cfg_combine`.
    The starting noise comes from a private generator seeded with ``seed``.
    ``clip`` bounds the clean-latent estimate at every step (see :func:`ddim_step`).
    """
    ts = sampling_timesteps(steps, schedule.T)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_c = predict(z, t, conditions)
        eps_u = predict(z, t, None)
        eps = cfg_combine(eps_c, eps_u, w)
        z = ddim_step(z, eps, t, t_prev, schedule, clip)
    return z
