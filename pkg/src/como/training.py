"""Two-phase adapter training and the joint-tuning baseline.

Phase 1 (static): a static adapter learns subject appearance from randomly
drawn single-frame latents under the appearance prompt.  Phase 2 (dynamic):
with the static adapter frozen but active, a dynamic adapter learns the
motion from the full video latent under the motion prompt.  The joint
baseline trains one adapter on the union of reference videos directly.

The objective everywhere is flow matching: for noise eps, time t and data x,
predict v = eps - x from the interpolant (1 - t) x + t eps.  The optimiser
is AdamW (decoupled weight decay, bias-corrected moments).

Per training step the RNG is consumed in a fixed documented order, so runs
are bit-reproducible: for each batch element draw (sample index if
applicable, t, noise, prompt-drop coin, dropout masks inside the forward).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .flow import flow_interpolate
from .lora import Adapter
from .model import ModelWeights, backward, forward_train, param_names

DEFAULT_LR = 5e-5
DEFAULT_WD = 1e-4


@dataclass
class TrainConfig:
    steps: int = 100
    learning_rate: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WD
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 2
    cfg_drop_prob: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ConfigError("learning_rate and eps must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0.0 <= self.cfg_drop_prob <= 1.0):
            raise ConfigError("cfg_drop_prob must lie in [0, 1]")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One AdamW update, in place.  Weight decay is decoupled from moments.

    Hand check (first step, grad 1, zero weight): m_hat = g, v_hat = g^2,
    so the parameter decreases by lr / (1 + eps) ~ lr.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for key, p in params.items():
        if key not in grads:
            raise ContractViolation(f"missing gradient for parameter {key!r}")
        g = grads[key]
        m = state.m[key]
        v = state.v[key]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        if config.weight_decay:
            p *= 1.0 - config.learning_rate * config.weight_decay
        p -= config.learning_rate * (m_hat / (np.sqrt(v_hat) + config.eps))


def adapter_param_keys(adapter: Adapter, stack_index: int) -> dict[str, np.ndarray]:
    """Gradient-key -> array view for one adapter at its stack position."""
    out = {}
    for layer, (down, up) in adapter.layers.items():
        out[f"adapter{stack_index}.{layer}.down"] = down
        out[f"adapter{stack_index}.{layer}.up"] = up
    return out


def _mse_sample(weights, adapters, x_data, prompt, rng, *, cfg_drop_prob, train, need):
    """One flow-matching sample: returns (loss, grads or None).

    RNG draw order: t, noise, prompt-drop coin (only if cfg_drop_prob > 0),
    then any dropout masks inside the forward.
    """
    t = float(rng.random())
    noise = rng.standard_normal(x_data.shape, dtype=x_data.dtype)
    used_prompt = list(prompt)
    if cfg_drop_prob > 0.0 and rng.random() < cfg_drop_prob:
        used_prompt = []
    x_t, v_target = flow_interpolate(x_data, noise, t)
    v, cache = forward_train(weights, adapters, x_t, t, used_prompt, rng=rng, train=train)
    diff = v - v_target
    loss = float(np.mean(diff * diff, dtype=np.float64))
    if not need:
        return loss, None
    dv = (2.0 / diff.size) * diff
    return loss, backward(cache, dv, need)


def _accumulate(total: dict, part: dict) -> None:
    for k, g in part.items():
        if k in total:
            total[k] += g
        else:
            total[k] = g.copy()


def loss_static(
    weights: ModelWeights,
    static_adapter: Adapter,
    frames: list[np.ndarray],
    prompt,
    rng: np.random.Generator,
    *,
    batch_size: int = 1,
    cfg_drop_prob: float = 0.0,
    train: bool = False,
    need: set | None = None,
):
    """Appearance loss on randomly drawn single-frame latents.

    The adapter stack is just the static adapter.  Returns (loss, grads);
    grads is None unless ``need`` names gradient keys (stack index 0).
    """
    if not frames:
        raise ConfigError("loss_static needs at least one frame latent")
    need = need or set()
    total_loss = 0.0
    total_grads: dict[str, np.ndarray] = {}
    for _ in range(batch_size):
        idx = int(rng.integers(len(frames)))
        loss, grads = _mse_sample(
            weights, [static_adapter], frames[idx], prompt, rng,
            cfg_drop_prob=cfg_drop_prob, train=train, need=need,
        )
        total_loss += loss
        if grads:
            _accumulate(total_grads, grads)
    scale = 1.0 / batch_size
    for g in total_grads.values():
        g *= scale
    return total_loss * scale, (total_grads if need else None)


def loss_dynamic(
    weights: ModelWeights,
    static_adapter: Adapter,
    dynamic_adapter: Adapter,
    video_latent: np.ndarray,
    prompt,
    rng: np.random.Generator,
    *,
    batch_size: int = 1,
    cfg_drop_prob: float = 0.0,
    train: bool = False,
    need: set | None = None,
):
    """Motion loss on the full video latent.

    The frozen static adapter stays active in the forward pass (stack index
    0); only the dynamic adapter (stack index 1) may be trainable.
    """
    if static_adapter.trainable:
        raise ContractViolation("static adapter must be frozen during the dynamic phase")
    need = need or set()
    total_loss = 0.0
    total_grads: dict[str, np.ndarray] = {}
    for _ in range(batch_size):
        loss, grads = _mse_sample(
            weights, [static_adapter, dynamic_adapter], video_latent, prompt, rng,
            cfg_drop_prob=cfg_drop_prob, train=train, need=need,
        )
        total_loss += loss
        if grads:
            _accumulate(total_grads, grads)
    scale = 1.0 / batch_size
    for g in total_grads.values():
        g *= scale
    return total_loss * scale, (total_grads if need else None)


def _run_adapter_phase(loss_fn, params, config: TrainConfig) -> list[float]:
    config.validate()
    if config.steps == 0:
        warnings.warn("training with steps=0 leaves the adapter unchanged")
        return []
    rng = np.random.Generator(np.random.PCG64(config.seed))
    state = init_adam(params)
    need = set(params)
    losses = []
    for _ in range(config.steps):
        loss, grads = loss_fn(rng, need)
        adam_step(params, grads, state, config)
        losses.append(loss)
    return losses


def train_static(
    weights: ModelWeights,
    static_adapter: Adapter,
    frames: list[np.ndarray],
    prompt,
    config: TrainConfig,
) -> list[float]:
    """Phase 1: tune the static adapter on frame latents.  Returns losses."""
    if not weights.frozen:
        raise ContractViolation("base weights must be frozen before adapter training")
    if not static_adapter.trainable:
        raise ContractViolation("static adapter is not trainable")
    params = adapter_param_keys(static_adapter, 0)

    def step(rng, need):
        return loss_static(
            weights, static_adapter, frames, prompt, rng,
            batch_size=config.batch_size, cfg_drop_prob=config.cfg_drop_prob,
            train=True, need=need,
        )

    return _run_adapter_phase(step, params, config)


def train_dynamic(
    weights: ModelWeights,
    static_adapter: Adapter,
    dynamic_adapter: Adapter,
    video_latent: np.ndarray,
    prompt,
    config: TrainConfig,
) -> list[float]:
    """Phase 2: tune the dynamic adapter with the static one frozen, active."""
    if not weights.frozen:
        raise ContractViolation("base weights must be frozen before adapter training")
    if static_adapter.trainable:
        raise ContractViolation("static adapter must be frozen during the dynamic phase")
    if not dynamic_adapter.trainable:
        raise ContractViolation("dynamic adapter is not trainable")
    if not list(prompt):
        warnings.warn("dynamic phase running with an empty prompt")
    params = adapter_param_keys(dynamic_adapter, 1)

    def step(rng, need):
        return loss_dynamic(
            weights, static_adapter, dynamic_adapter, video_latent, prompt, rng,
            batch_size=config.batch_size, cfg_drop_prob=config.cfg_drop_prob,
            train=True, need=need,
        )

    return _run_adapter_phase(step, params, config)


def train_joint_baseline(
    weights: ModelWeights,
    adapter: Adapter,
    corpus: list[tuple[np.ndarray, list]],
    config: TrainConfig,
) -> list[float]:
    """Baseline: one adapter tuned on the union of reference videos.

    Each batch element draws a (latent, prompt) pair uniformly.  RNG order
    per element: corpus index, then the usual (t, noise, drop, masks).
    """
    if not weights.frozen:
        raise ContractViolation("base weights must be frozen before adapter training")
    if not adapter.trainable:
        raise ContractViolation("joint adapter is not trainable")
    if not corpus:
        raise ConfigError("joint baseline needs a non-empty corpus")
    params = adapter_param_keys(adapter, 0)

    def step(rng, need):
        total_loss = 0.0
        total_grads: dict[str, np.ndarray] = {}
        for _ in range(config.batch_size):
            idx = int(rng.integers(len(corpus)))
            latent, prompt = corpus[idx]
            loss, grads = _mse_sample(
                weights, [adapter], latent, prompt, rng,
                cfg_drop_prob=config.cfg_drop_prob, train=True, need=need,
            )
            total_loss += loss
            if grads:
                _accumulate(total_grads, grads)
        scale = 1.0 / config.batch_size
        for g in total_grads.values():
            g *= scale
        return total_loss * scale, total_grads

    return _run_adapter_phase(step, params, config)


def train_base(
    weights: ModelWeights,
    corpus: list[tuple[np.ndarray, list]],
    config: TrainConfig,
) -> list[float]:
    """Pretrain every base parameter on a mixed corpus of (latent, prompt).

    Requires ``weights.frozen == False``; adapter phases require the
    opposite, so the two stages cannot be mixed up silently.
    """
    if weights.frozen:
        raise ContractViolation("base weights are frozen; unfreeze to pretrain")
    if not corpus:
        raise ConfigError("base pretraining needs a non-empty corpus")
    config.validate()
    if config.steps == 0:
        warnings.warn("training with steps=0 leaves the model unchanged")
        return []
    params = {name: weights.params[name] for name in param_names(weights.config)}
    rng = np.random.Generator(np.random.PCG64(config.seed))
    state = init_adam(params)
    need = set(params)
    losses = []
    for _ in range(config.steps):
        total_loss = 0.0
        total_grads: dict[str, np.ndarray] = {}
        for _ in range(config.batch_size):
            idx = int(rng.integers(len(corpus)))
            latent, prompt = corpus[idx]
            loss, grads = _mse_sample(
                weights, (), latent, prompt, rng,
                cfg_drop_prob=config.cfg_drop_prob, train=True, need=need,
            )
            total_loss += loss
            _accumulate(total_grads, grads)
        scale = 1.0 / config.batch_size
        for g in total_grads.values():
            g *= scale
        adam_step(params, total_grads, state, config)
        losses.append(total_loss * scale)
    return losses


def write_loss_csv(path, losses: list[float]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")
