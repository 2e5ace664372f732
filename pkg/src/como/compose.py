"""Divide-and-merge compositional sampling.

The latent canvas is split into overlapping square regions, one motion
adapter and prompt per region.  At every denoising step each region gets
its own guided velocity prediction with only its adapter active; the
regional fields are padded back onto the canvas and fused with normalised
bivariate Gaussian weights.  During the first ``global_blend_steps`` steps
the fused field is additionally blended with a globally guided prediction
that runs with the uniform average of the region adapters, which keeps the
overall layout coherent before the regions take over.

All velocity fusion happens in velocity space; the latent state is shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .flow import cfg_velocity, euler_step, make_timesteps, sample_noise
from .lora import apply_adapters, average_adapters
from .model import ModelWeights, forward_velocity


@dataclass(frozen=True)
class Region:
    h0: int
    w0: int
    height: int
    width: int

    def validate(self) -> None:
        if self.h0 < 0 or self.w0 < 0 or self.height < 1 or self.width < 1:
            raise ConfigError(f"bad region {self}")

    @property
    def h_slice(self) -> slice:
        return slice(self.h0, self.h0 + self.height)

    @property
    def w_slice(self) -> slice:
        return slice(self.w0, self.w0 + self.width)


@dataclass
class RegionPlan:
    regions: list[Region]
    prompts: list[list[int]]
    scales: list[float]
    overlap: int = 0  # realized minimum pairwise overlap, informational

    def validate(self) -> None:
        n = len(self.regions)
        if n < 1:
            raise ConfigError("plan needs at least one region")
        if len(self.prompts) != n or len(self.scales) != n:
            raise ConfigError(
                f"plan lists disagree: {n} regions, {len(self.prompts)} prompts, "
                f"{len(self.scales)} scales"
            )
        for r in self.regions:
            r.validate()
        for s in self.scales:
            if s < 0:
                raise ConfigError(f"guidance scale must be >= 0, got {s}")


@dataclass
class ComposeConfig:
    latent_shape: tuple[int, int, int, int]
    global_prompt: list[int] = field(default_factory=list)
    num_steps: int = 50
    lam: float = 0.5
    global_blend_steps: int = 10
    guidance_scale: float = 6.0
    cfg_mode: str = "affine"
    sigma_frac: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if len(self.latent_shape) != 4 or min(self.latent_shape) < 1:
            raise ConfigError(f"latent_shape must be 4 positive dims, got {self.latent_shape}")
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {self.num_steps}")
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not (0 <= self.global_blend_steps <= self.num_steps):
            raise ConfigError(
                f"global_blend_steps must lie in [0, num_steps], got "
                f"{self.global_blend_steps} with num_steps {self.num_steps}"
            )
        if self.guidance_scale < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.guidance_scale}")
        if self.sigma_frac <= 0:
            raise ConfigError(f"sigma_frac must be positive, got {self.sigma_frac}")


def partition_regions(height: int, width: int, n_regions: int, min_overlap: int = 1) -> list[Region]:
    """Square regions of side ``height`` spread over a wide canvas.

    One region covers the whole canvas.  For N > 1, left edges sit at
    round(i * (W - H) / (N - 1)); adjacent regions must overlap by at least
    ``min_overlap`` (>= 1) columns.
    """
    if n_regions < 1:
        raise ConfigError(f"n_regions must be >= 1, got {n_regions}")
    if height < 1 or width < height:
        raise ConfigError(f"need width >= height >= 1, got {height}x{width}")
    if min_overlap < 1:
        raise ConfigError(f"min_overlap must be >= 1, got {min_overlap}")
    if n_regions == 1:
        return [Region(0, 0, height, width)]
    span = width - height
    offsets = [int(np.floor(i * span / (n_regions - 1) + 0.5)) for i in range(n_regions)]
    regions = [Region(0, off, height, height) for off in offsets]
    realized = realized_overlap(regions)
    if realized < min_overlap:
        max_width = height + (n_regions - 1) * (height - min_overlap)
        raise ConfigError(
            f"regions too sparse: adjacent overlap {realized} < {min_overlap}; "
            f"with height {height} and {n_regions} regions the width may be at "
            f"most {max_width} (got {width})"
        )
    return regions


def realized_overlap(regions: list[Region]) -> int:
    """Minimum pairwise overlap (columns) between horizontally adjacent regions."""
    if len(regions) < 2:
        return 0
    ordered = sorted(regions, key=lambda r: r.w0)
    return min(
        ordered[i].w0 + ordered[i].width - ordered[i + 1].w0
        for i in range(len(ordered) - 1)
    )


def gaussian_weight_map(height: int, width: int, sigma_frac: float = 0.25) -> np.ndarray:
    """Separable Gaussian bump over a region, peak coefficient 1 at the center.

    Center is ((H-1)/2, (W-1)/2); sigma per axis is sigma_frac times the side.
    """
    if height < 1 or width < 1:
        raise ConfigError(f"weight map dims must be >= 1, got {height}x{width}")
    if sigma_frac <= 0:
        raise ConfigError(f"sigma_frac must be positive, got {sigma_frac}")
    ch, cw = (height - 1) / 2.0, (width - 1) / 2.0
    sh, sw = sigma_frac * height, sigma_frac * width
    dh = (np.arange(height, dtype=np.float64) - ch) ** 2 / (2.0 * sh * sh)
    dw = (np.arange(width, dtype=np.float64) - cw) ** 2 / (2.0 * sw * sw)
    return np.exp(-(dh[:, None] + dw[None, :])).astype(np.float32)


def pad_region(v_region: np.ndarray, region: Region, shape) -> np.ndarray:
    """Place a regional field onto a zeroed full-canvas tensor."""
    c, f, h, w = shape
    region.validate()
    if region.h0 + region.height > h or region.w0 + region.width > w:
        raise ConfigError(f"region {region} exceeds canvas {h}x{w}")
    if v_region.shape != (c, f, region.height, region.width):
        raise ConfigError(
            f"regional field shape {v_region.shape} does not match region "
            f"{region} on canvas {shape}"
        )
    out = np.zeros(shape, dtype=v_region.dtype)
    out[:, :, region.h_slice, region.w_slice] = v_region
    return out


def merge_local(items, shape) -> np.ndarray:
    """Fuse regional velocity fields with normalised Gaussian weights.

    ``items`` is a list of (v_region, region, weight_map).  Every canvas
    cell must be covered by at least one region.  With a single full-canvas
    region the fusion multiplies by exactly 1, so the input passes through
    bit for bit.
    """
    if not items:
        raise ContractViolation("merge_local needs at least one region")
    c, f, h, w = shape
    weight_sum = np.zeros((h, w), dtype=np.float32)
    for v_region, region, wmap in items:
        if wmap.shape != (region.height, region.width):
            raise ConfigError(
                f"weight map shape {wmap.shape} does not match region {region}"
            )
        if np.any(wmap <= 0):
            raise ConfigError("weight maps must be strictly positive")
        weight_sum[region.h_slice, region.w_slice] += wmap
    if np.any(weight_sum == 0.0):
        uncovered = int(np.count_nonzero(weight_sum == 0.0))
        raise ContractViolation(f"{uncovered} latent cells are covered by no region")
    merged = np.zeros(shape, dtype=np.result_type(*[it[0].dtype for it in items]))
    for v_region, region, wmap in items:
        if v_region.shape != (c, f, region.height, region.width):
            raise ConfigError(
                f"regional field shape {v_region.shape} does not match region "
                f"{region} on canvas {shape}"
            )
        norm = wmap / weight_sum[region.h_slice, region.w_slice]
        merged[:, :, region.h_slice, region.w_slice] += v_region * norm
    return merged


def blend_global(v_local: np.ndarray, v_global: np.ndarray, lam: float) -> np.ndarray:
    """lam * global + (1 - lam) * local; lam = 1 returns the global field exactly."""
    if v_local.shape != v_global.shape:
        raise ConfigError(f"local {v_local.shape} and global {v_global.shape} shapes differ")
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    lam = float(lam)
    return lam * v_global + (1.0 - lam) * v_local


def predict_region_velocity(
    eff_weights: ModelWeights,
    x: np.ndarray,
    region: Region,
    t: float,
    prompt,
    scale: float,
    mode: str = "affine",
) -> np.ndarray:
    """Guided velocity for one region crop of the shared latent state.

    Both the conditional and the unconditional pass run with the region's
    merged weights; guidance steers the prompt, not the adapter.
    """
    crop = np.ascontiguousarray(x[:, :, region.h_slice, region.w_slice])
    v_c = forward_velocity(eff_weights, crop, t, prompt)
    v_u = forward_velocity(eff_weights, crop, t, [])
    return cfg_velocity(v_c, v_u, scale, mode)


def compose_sample(
    weights: ModelWeights,
    region_adapters: list,
    plan: RegionPlan,
    config: ComposeConfig,
    trace: list | None = None,
) -> np.ndarray:
    """Sample one latent with per-region adapters fused at every step.

    ``region_adapters`` aligns with ``plan.regions``; ``None`` entries run
    the bare base model in that region.  When global blending is active the
    global pass uses the uniform average of the non-None region adapters
    under ``config.global_prompt``.  ``trace`` (if given) receives one dict
    per step with norms and the number of global forward passes, which is
    the instrumentation hook tests use to count work.
    """
    config.validate()
    plan.validate()
    c, f, h, w = config.latent_shape
    n = len(plan.regions)
    if len(region_adapters) != n:
        raise ContractViolation(
            f"{len(region_adapters)} adapters for {n} regions; counts must match"
        )
    for region in plan.regions:
        if region.h0 + region.height > h or region.w0 + region.width > w:
            raise ConfigError(f"region {region} exceeds canvas {h}x{w}")

    eff_regional = [
        apply_adapters(weights, [] if ad is None else [ad]) for ad in region_adapters
    ]
    use_global = config.lam > 0.0 and config.global_blend_steps > 0
    eff_global = None
    if use_global:
        present = [ad for ad in region_adapters if ad is not None]
        if not present:
            raise ContractViolation(
                "global blending (lambda > 0) needs at least one region adapter"
            )
        eff_global = apply_adapters(weights, [average_adapters(present)])

    wmaps = [gaussian_weight_map(r.height, r.width, config.sigma_frac) for r in plan.regions]
    x = sample_noise(config.latent_shape, config.seed)
    timesteps = make_timesteps(config.num_steps)
    for k, t in enumerate(timesteps):
        t_next = timesteps[k + 1] if k + 1 < len(timesteps) else 0.0
        items = []
        for i, region in enumerate(plan.regions):
            v_i = predict_region_velocity(
                eff_regional[i], x, region, t, plan.prompts[i],
                plan.scales[i], config.cfg_mode,
            )
            items.append((v_i, region, wmaps[i]))
        v_local = merge_local(items, x.shape)
        blended = use_global and k < config.global_blend_steps
        global_passes = 0
        v_global = None
        if blended:
            v_c = forward_velocity(eff_global, x, t, config.global_prompt)
            v_u = forward_velocity(eff_global, x, t, [])
            v_global = cfg_velocity(v_c, v_u, config.guidance_scale, config.cfg_mode)
            global_passes = 2
            v_final = blend_global(v_local, v_global, config.lam)
        else:
            v_final = v_local
        if trace is not None:
            trace.append({
                "step": k,
                "t": t,
                "blended": bool(blended),
                "global_passes": global_passes,
                "region_norms": [float(np.linalg.norm(it[0])) for it in items],
                "local_norm": float(np.linalg.norm(v_local)),
                "global_norm": None if v_global is None else float(np.linalg.norm(v_global)),
            })
        x = euler_step(x, v_final, t, t_next)
    return x
