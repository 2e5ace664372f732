"""Shared test utilities: tiny configs, scene builders, gradient checking."""

from __future__ import annotations

import numpy as np

from como import lora, metrics, synthdata, training
from como.model import DenoiserConfig, ModelWeights, cast_params, init_model


def tiny_config(**overrides) -> DenoiserConfig:
    """Smallest config that still exercises every layer type."""
    base = dict(embed_dim=16, num_blocks=1, num_heads=2, vocab_size=48, max_prompt_len=6)
    base.update(overrides)
    return DenoiserConfig(**base)


def tiny_model(seed: int = 0, **overrides) -> ModelWeights:
    return init_model(tiny_config(**overrides), seed=seed)


def sweep_scene(shape="disc", color="red", size=10.0, start=(32.0, 18.0),
                vel=(0.0, 3.0), frames=8, height=64, width=64) -> synthdata.SceneSpec:
    return synthdata.SceneSpec(
        subjects=[synthdata.Subject(
            synthdata.AppearanceSpec(shape, synthdata.PALETTE[color], size),
            synthdata.MotionProgram("sweep", {
                "start_h": float(start[0]), "start_w": float(start[1]),
                "vel_h": float(vel[0]), "vel_w": float(vel[1])}),
        )],
        frames=frames, height=height, width=width,
    )


def to_f64_weights(weights: ModelWeights) -> ModelWeights:
    return ModelWeights(config=weights.config,
                        params=cast_params(weights.params, np.float64),
                        frozen=weights.frozen)


def to_f64_adapter(adapter: lora.Adapter) -> lora.Adapter:
    layers = {name: (down.astype(np.float64), up.astype(np.float64))
              for name, (down, up) in adapter.layers.items()}
    return lora.Adapter(layers=layers, rank=adapter.rank, alpha=adapter.alpha,
                        kind=adapter.kind, trainable=adapter.trainable,
                        dropout_rate=adapter.dropout_rate)


def perturbed_adapter(config: DenoiserConfig, rank: int, seed: int, kind: str) -> lora.Adapter:
    """Fresh adapter with both factors randomized (nonzero deltas for tests)."""
    adapter = lora.new_adapter(config, rank=rank, seed=seed, kind=kind, dropout_rate=0.0)
    rng = np.random.default_rng(seed + 1)
    for name, (down, up) in adapter.layers.items():
        up += rng.standard_normal(up.shape).astype(up.dtype) * 0.05
        down += rng.standard_normal(down.shape).astype(down.dtype) * 0.05
    return adapter


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def finite_diff_check(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      coords_per_param: int = 2, h: float = 1e-5, seed: int = 0):
    """Central finite differences against analytic grads, in float64.

    ``loss_fn()`` must recompute the loss from the *current* contents of the
    arrays in ``params``.  Returns a list of (key, flat_index, analytic, fd,
    relative_error) tuples for every sampled coordinate.
    """
    rng = np.random.default_rng(seed)
    results = []
    for key, arr in params.items():
        flat = arr.reshape(-1)
        idxs = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
        for idx in idxs:
            keep = flat[idx]
            flat[idx] = keep + h
            up = loss_fn()
            flat[idx] = keep - h
            down = loss_fn()
            flat[idx] = keep
            fd = (up - down) / (2.0 * h)
            an = float(grads[key].reshape(-1)[idx])
            results.append((key, int(idx), an, fd, relative_error(an, fd)))
    return results


def fixed_batch_static_loss(weights, static, frames, prompt, seed=11, batch_size=2):
    """Static loss with a frozen RNG stream so finite differences are clean."""
    def compute(need=None):
        rng = np.random.Generator(np.random.PCG64(seed))
        return training.loss_static(weights, static, frames, prompt, rng,
                                    batch_size=batch_size, cfg_drop_prob=0.0,
                                    train=True, need=need)
    return compute


def fixed_batch_dynamic_loss(weights, static, dynamic, latent, prompt, seed=13, batch_size=2):
    def compute(need=None):
        rng = np.random.Generator(np.random.PCG64(seed))
        return training.loss_dynamic(weights, static, dynamic, latent, prompt, rng,
                                     batch_size=batch_size, cfg_drop_prob=0.0,
                                     train=True, need=need)
    return compute


def clean_track_scene_error(scene: synthdata.SceneSpec) -> float:
    """Max abs tracker error versus the analytic trajectory, in pixels."""
    rendered = synthdata.render_video(scene)
    track = metrics.extract_tracklet(rendered.video)
    return float(np.abs(track - rendered.centroids[0]).max())
