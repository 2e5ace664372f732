"""Rectified-flow interpolation, guidance, and Euler sampling.

Convention: t = 1 is pure noise, t = 0 is data.  The interpolant is
x_t = (1 - t) * x_data + t * noise, whose exact velocity field
noise - x_data is constant in t, so Euler integration of the oracle field
recovers x_data to round-off for any step count.

Sampling walks the uniform grid t_k = k / T for k = T..1 and finishes at
t = 0: x <- x - (t_now - t_next) * v.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .lora import apply_adapters
from .model import ModelWeights, forward_velocity

CFG_MODES = ("affine", "paper_literal")


@dataclass(frozen=True)
class ScheduleConfig:
    num_steps: int = 50

    def validate(self) -> None:
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {self.num_steps}")


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 6.0
    mode: str = "affine"

    def validate(self) -> None:
        if self.scale < 0.0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.scale}")
        if self.mode not in CFG_MODES:
            raise ConfigError(f"guidance mode must be one of {CFG_MODES}, got {self.mode!r}")


def make_timesteps(num_steps: int) -> list[float]:
    """Descending grid [1, (T-1)/T, ..., 1/T]; the step after the last is 0."""
    if num_steps < 1:
        raise ConfigError(f"num_steps must be >= 1, got {num_steps}")
    return [k / num_steps for k in range(num_steps, 0, -1)]


def flow_interpolate(x_data: np.ndarray, noise: np.ndarray, t: float):
    """Return (x_t, v_target) for the straight-line interpolant."""
    if x_data.shape != noise.shape:
        raise ConfigError(f"data {x_data.shape} and noise {noise.shape} shapes differ")
    if not (0.0 <= t <= 1.0):
        raise ConfigError(f"interpolation time must lie in [0, 1], got {t}")
    t = float(t)
    x_t = (1.0 - t) * x_data + t * noise
    v_target = noise - x_data
    return x_t, v_target


def cfg_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, scale: float,
                 mode: str = "affine") -> np.ndarray:
    """Classifier-free guidance combination of two velocity predictions.

    affine:        v_uncond + scale * (v_cond - v_uncond)
    paper_literal: (1 + scale) * v_cond - v_uncond
    """
    if v_cond.shape != v_uncond.shape:
        raise ConfigError(f"cond {v_cond.shape} and uncond {v_uncond.shape} shapes differ")
    if scale < 0.0:
        raise ConfigError(f"guidance scale must be >= 0, got {scale}")
    scale = float(scale)
    if mode == "affine":
        return v_uncond + scale * (v_cond - v_uncond)
    if mode == "paper_literal":
        return (1.0 + scale) * v_cond - v_uncond
    raise ConfigError(f"guidance mode must be one of {CFG_MODES}, got {mode!r}")


def euler_step(x: np.ndarray, v: np.ndarray, t_now: float, t_next: float) -> np.ndarray:
    if not (0.0 <= t_next < t_now <= 1.0):
        raise ConfigError(f"need 0 <= t_next < t_now <= 1, got t_now={t_now}, t_next={t_next}")
    if x.shape != v.shape:
        raise ConfigError(f"state {x.shape} and velocity {v.shape} shapes differ")
    return x - (float(t_now) - float(t_next)) * v


def sample_noise(shape, seed: int) -> np.ndarray:
    """Seeded standard-normal float32 noise (PCG64)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(tuple(shape), dtype=np.float32)


def integrate_flow(velocity_fn, x_init: np.ndarray, timesteps: list[float]) -> np.ndarray:
    """Run Euler steps along a descending timestep grid, ending at t = 0.

    ``velocity_fn(x, t)`` supplies the field; the sampler itself stays
    agnostic so oracles and models share one integration loop.
    """
    if not timesteps:
        raise ConfigError("timesteps must be non-empty")
    prev = 1.0 + 1e-9
    for t in timesteps:
        if not (0.0 < t <= 1.0) or t >= prev + 1e-12:
            raise ConfigError(f"timesteps must be strictly descending in (0, 1], got {timesteps}")
        prev = t
    x = x_init
    for i, t in enumerate(timesteps):
        t_next = timesteps[i + 1] if i + 1 < len(timesteps) else 0.0
        v = velocity_fn(x, t)
        x = euler_step(x, v, t, t_next)
    return x


def velocity(weights: ModelWeights, adapters, x: np.ndarray, t: float, prompt) -> np.ndarray:
    """One-off adapter-aware velocity prediction (merges, then forwards)."""
    return forward_velocity(apply_adapters(weights, adapters), x, t, prompt)


def sample_single(
    weights: ModelWeights,
    adapters,
    prompt,
    shape,
    seed: int,
    schedule: ScheduleConfig | None = None,
    guidance: GuidanceConfig | None = None,
) -> np.ndarray:
    """Generate one latent with a single prompt and adapter stack.

    Adapters are merged into the weights once up front; each step runs a
    conditional and an unconditional forward pass combined by CFG.  The
    unconditional prompt is the empty token list.
    """
    schedule = schedule or ScheduleConfig()
    guidance = guidance or GuidanceConfig()
    schedule.validate()
    guidance.validate()
    if len(shape) != 4:
        raise ConfigError(f"latent shape must have 4 dims, got {tuple(shape)}")
    eff = apply_adapters(weights, adapters)

    def field(x, t):
        v_c = forward_velocity(eff, x, t, prompt)
        v_u = forward_velocity(eff, x, t, [])
        return cfg_velocity(v_c, v_u, guidance.scale, guidance.mode)

    x = sample_noise(shape, seed)
    return integrate_flow(field, x, make_timesteps(schedule.num_steps))
