"""Toy patch-transformer video denoiser, written as explicit numpy kernels.

The network predicts a flow-matching velocity field for a video latent
``[C, F, H, W]`` conditioned on a token prompt and a scalar time in [0, 1].
Architecture: patchify (1x2x2) -> linear embed + 3-axis sinusoidal positions,
prompt tokens -> table lookup + 1-D sinusoidal positions, a sinusoidal
timestep embedding (through a two-layer MLP) added to every position, then
``num_blocks`` pre-norm transformer blocks with joint full attention over
[prompt || patches], parameter-free RMSNorm, SiLU MLPs, bias-free linears,
and a zero-initialised linear head over the patch positions.

Both a plain inference forward and a caching training forward with a
hand-written backward pass live here.  Everything is a pure function of its
inputs; dtype follows the input arrays so gradient checks can run in
float64 through the same code.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation
from .tensors import load_container, save_container

RMS_EPS = 1e-6
# t in [0, 1] is stretched by this factor before the sinusoidal features.
# 100 keeps neighbouring sampler steps correlated (cos ~ 0.9 at dt = 0.02)
# while staying discriminative across the whole range.
TIME_SCALE = 100.0

ATTN_PROJS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class DenoiserConfig:
    embed_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    patch_f: int = 1
    patch_h: int = 2
    patch_w: int = 2
    in_channels: int = 3
    vocab_size: int = 64
    max_prompt_len: int = 8
    null_token: int = 0
    mlp_ratio: int = 4

    def validate(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if min(self.embed_dim, self.num_blocks, self.num_heads, self.patch_f,
               self.patch_h, self.patch_w, self.in_channels, self.vocab_size,
               self.max_prompt_len, self.mlp_ratio) < 1:
            raise ConfigError("all DenoiserConfig dimensions must be >= 1")
        if not (0 <= self.null_token < self.vocab_size):
            raise ConfigError("null_token must be a valid vocab id")

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_f * self.patch_h * self.patch_w


@dataclass
class ModelWeights:
    """Named parameter arrays plus a freeze flag.

    ``frozen=False`` means the base is still being pretrained;
    adapter-phase training requires ``frozen=True`` and never writes to
    these arrays.
    """

    config: DenoiserConfig
    params: dict[str, np.ndarray]
    frozen: bool = False


def param_names(config: DenoiserConfig) -> list[str]:
    names = ["patch_embed.w", "token_embed.table", "time_mlp.w1", "time_mlp.w2"]
    for b in range(config.num_blocks):
        for p in ATTN_PROJS:
            names.append(f"blocks.{b}.attn.{p}.w")
        names.append(f"blocks.{b}.mlp.w1")
        names.append(f"blocks.{b}.mlp.w2")
    names.append("head.w")
    return names


def injectable_layers(config: DenoiserConfig) -> list[str]:
    """Layers that accept low-rank adapters: attention q/k/v/o of each block."""
    return [f"blocks.{b}.attn.{p}" for b in range(config.num_blocks) for p in ATTN_PROJS]


def init_model(config: DenoiserConfig, seed: int) -> ModelWeights:
    """Seeded init: linears N(0, 1/fan_in), token table N(0, 1), zero head."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    d = config.embed_dim
    hid = config.mlp_ratio * d

    def linear(out_dim: int, in_dim: int) -> np.ndarray:
        std = 1.0 / math.sqrt(in_dim)
        return (rng.standard_normal((out_dim, in_dim), dtype=np.float32) * np.float32(std))

    params: dict[str, np.ndarray] = {}
    params["patch_embed.w"] = linear(d, config.patch_dim)
    params["token_embed.table"] = rng.standard_normal((config.vocab_size, d), dtype=np.float32)
    params["time_mlp.w1"] = linear(d, d)
    params["time_mlp.w2"] = linear(d, d)
    for b in range(config.num_blocks):
        for p in ATTN_PROJS:
            params[f"blocks.{b}.attn.{p}.w"] = linear(d, d)
        params[f"blocks.{b}.mlp.w1"] = linear(hid, d)
        params[f"blocks.{b}.mlp.w2"] = linear(d, hid)
    params["head.w"] = np.zeros((config.patch_dim, d), dtype=np.float32)
    return ModelWeights(config=config, params=params, frozen=False)


def param_count(weights: ModelWeights) -> int:
    return sum(int(p.size) for p in weights.params.values())


def cast_params(params: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: v.astype(dtype) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Positional and timestep encodings (cached per shape/dtype)
# ---------------------------------------------------------------------------

_PE_CACHE: dict[tuple, np.ndarray] = {}


def _sincos(pos: np.ndarray, dim: int) -> np.ndarray:
    # [len(pos), dim] with dim even: [sin(pos*f_0..), cos(pos*f_0..)]
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = pos[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _patch_pos_encoding(fp: int, hp: int, wp: int, dim: int, dtype) -> np.ndarray:
    key = ("patch", fp, hp, wp, dim, np.dtype(dtype).str)
    if key not in _PE_CACHE:
        d_axis = 2 * (dim // 6)
        grids = np.meshgrid(
            np.arange(fp, dtype=np.float64),
            np.arange(hp, dtype=np.float64),
            np.arange(wp, dtype=np.float64),
            indexing="ij",
        )
        parts = [_sincos(g.reshape(-1), d_axis) for g in grids]
        pad = np.zeros((fp * hp * wp, dim - 3 * d_axis), dtype=np.float64)
        _PE_CACHE[key] = np.concatenate(parts + [pad], axis=1).astype(dtype)
    return _PE_CACHE[key]


def _prompt_pos_encoding(length: int, dim: int, dtype) -> np.ndarray:
    key = ("prompt", length, dim, np.dtype(dtype).str)
    if key not in _PE_CACHE:
        pos = np.arange(length, dtype=np.float64)
        _PE_CACHE[key] = _sincos(pos, dim).astype(dtype)
    return _PE_CACHE[key]


def _time_features(t: float, dim: int, dtype) -> np.ndarray:
    pos = np.array([t * TIME_SCALE], dtype=np.float64)
    return _sincos(pos, dim)[0].astype(dtype)


# ---------------------------------------------------------------------------
# Shared shape plumbing
# ---------------------------------------------------------------------------


def _check_inputs(config: DenoiserConfig, x: np.ndarray, t: float, prompt) -> list[int]:
    config.validate()
    if x.ndim != 4:
        raise ConfigError(f"latent must be [C, F, H, W], got shape {getattr(x, 'shape', None)}")
    c, f, h, w = x.shape
    if c != config.in_channels:
        raise ConfigError(f"latent has {c} channels, model expects {config.in_channels}")
    if f % config.patch_f or h % config.patch_h or w % config.patch_w:
        raise ConfigError(
            f"latent dims {x.shape} not divisible by patch size "
            f"({config.patch_f},{config.patch_h},{config.patch_w})"
        )
    if not (0.0 <= float(t) <= 1.0):
        raise ConfigError(f"timestep must lie in [0, 1], got {t}")
    ids = list(prompt)
    if len(ids) > config.max_prompt_len:
        raise ConfigError(f"prompt length {len(ids)} exceeds max {config.max_prompt_len}")
    for tok in ids:
        if not (0 <= int(tok) < config.vocab_size):
            raise ConfigError(f"prompt token {tok} outside vocab [0, {config.vocab_size})")
    return [int(tok) for tok in ids]


def patchify(x: np.ndarray, config: DenoiserConfig) -> np.ndarray:
    c, f, h, w = x.shape
    pf, ph, pw = config.patch_f, config.patch_h, config.patch_w
    fp, hp, wp = f // pf, h // ph, w // pw
    # token order (f, h, w) row-major; vector order (c, df, dh, dw)
    tok = x.reshape(c, fp, pf, hp, ph, wp, pw).transpose(1, 3, 5, 0, 2, 4, 6)
    return np.ascontiguousarray(tok.reshape(fp * hp * wp, config.patch_dim))


def unpatchify(tokens: np.ndarray, shape: tuple, config: DenoiserConfig) -> np.ndarray:
    c, f, h, w = shape
    pf, ph, pw = config.patch_f, config.patch_h, config.patch_w
    fp, hp, wp = f // pf, h // ph, w // pw
    x = tokens.reshape(fp, hp, wp, c, pf, ph, pw).transpose(3, 0, 4, 1, 5, 2, 6)
    return np.ascontiguousarray(x.reshape(c, f, h, w))


def _rmsnorm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / rms, rms


def _rmsnorm_bwd(dy: np.ndarray, x: np.ndarray, rms: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    s = np.sum(dy * x, axis=-1, keepdims=True)
    return dy / rms - x * (s / (n * rms * rms * rms))


def _silu(z: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig


def _silu_bwd(dz: np.ndarray, z: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-z))
    return dz * sig * (1.0 + z * (1.0 - sig))


# ---------------------------------------------------------------------------
# Inference forward (plain weights; adapters are merged beforehand)
# ---------------------------------------------------------------------------


def forward_velocity(weights: ModelWeights, x: np.ndarray, t: float, prompt) -> np.ndarray:
    """Predict the velocity field for latent ``x`` at time ``t``.

    Adapters must already be merged into ``weights`` (see
    ``lora.apply_adapters``); this keeps the sampling hot path free of
    per-call adapter arithmetic and makes merged/unmerged comparisons exact.
    """
    cfg = weights.config
    ids = _check_inputs(cfg, x, t, prompt)
    p = weights.params
    d = cfg.embed_dim
    dt = x.dtype

    patches = patchify(x, cfg)
    emb_x = patches @ p["patch_embed.w"].T
    emb_x += _patch_pos_encoding(
        x.shape[1] // cfg.patch_f, x.shape[2] // cfg.patch_h, x.shape[3] // cfg.patch_w, d, dt
    )
    emb_p = p["token_embed.table"][ids] + _prompt_pos_encoding(len(ids), d, dt)[: len(ids)]

    tf = _time_features(float(t), d, dt)
    temb = _silu(tf @ p["time_mlp.w1"].T) @ p["time_mlp.w2"].T

    seq = np.concatenate([emb_p, emb_x], axis=0) + temb[None, :]
    nh = cfg.num_heads
    dh = d // nh
    inv = 1.0 / math.sqrt(dh)
    for b in range(cfg.num_blocks):
        n1, _ = _rmsnorm(seq)
        q = (n1 @ p[f"blocks.{b}.attn.q.w"].T).reshape(-1, nh, dh).transpose(1, 0, 2)
        k = (n1 @ p[f"blocks.{b}.attn.k.w"].T).reshape(-1, nh, dh).transpose(1, 0, 2)
        v = (n1 @ p[f"blocks.{b}.attn.v.w"].T).reshape(-1, nh, dh).transpose(1, 0, 2)
        scores = np.matmul(q, k.transpose(0, 2, 1)) * inv
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        att = np.matmul(probs, v).transpose(1, 0, 2).reshape(-1, d)
        seq = seq + att @ p[f"blocks.{b}.attn.o.w"].T
        n2, _ = _rmsnorm(seq)
        seq = seq + _silu(n2 @ p[f"blocks.{b}.mlp.w1"].T) @ p[f"blocks.{b}.mlp.w2"].T
    nf, _ = _rmsnorm(seq)
    out = nf[len(ids):] @ p["head.w"].T
    return unpatchify(out, x.shape, cfg)


# ---------------------------------------------------------------------------
# Training forward/backward with low-rank adapter stacks
#
# Adapter stack entries are duck-typed: each needs .layers (dict mapping an
# injectable layer name to a (down [r, in], up [out, r]) pair), .scale,
# .trainable and .dropout_rate.  Dropout acts on the inner activation
# x @ down.T of trainable adapters only, and only when train=True.
# ---------------------------------------------------------------------------


def _linear_fwd(x, w_base, layer, adapters, train, rng):
    y = x @ w_base.T
    slots = []
    for idx, ad in enumerate(adapters):
        pair = ad.layers.get(layer)
        if pair is None:
            slots.append(None)
            continue
        down, up = pair
        inner = x @ down.T
        mask = None
        if train and ad.trainable and ad.dropout_rate > 0.0:
            keep = 1.0 - ad.dropout_rate
            mask = (rng.random(inner.shape) < keep).astype(inner.dtype) / keep
            inner = inner * mask
        y = y + ad.scale * (inner @ up.T)
        slots.append((idx, down, up, ad.scale, mask, inner))
    return y, {"x": x, "w": w_base, "layer": layer, "slots": slots}


def _linear_bwd(dy, cache, grads, need):
    x, w, layer = cache["x"], cache["w"], cache["layer"]
    dx = dy @ w
    base_key = layer + ".w"
    if base_key in need:
        grads[base_key] = grads.get(base_key, 0) + dy.T @ x
    for slot in cache["slots"]:
        if slot is None:
            continue
        idx, down, up, scale, mask, inner = slot
        up_key = f"adapter{idx}.{layer}.up"
        down_key = f"adapter{idx}.{layer}.down"
        d_inner = (dy @ up) * scale
        if up_key in need:
            grads[up_key] = grads.get(up_key, 0) + scale * (dy.T @ inner)
        if mask is not None:
            d_inner = d_inner * mask
        if down_key in need:
            grads[down_key] = grads.get(down_key, 0) + d_inner.T @ x
        dx += d_inner @ down
    return dx


def forward_train(
    weights: ModelWeights,
    adapters,
    x: np.ndarray,
    t: float,
    prompt,
    *,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> tuple[np.ndarray, dict]:
    """Velocity prediction that also returns a cache for ``backward``.

    ``adapters`` act in the factorised form (never merged) so dropout and
    per-factor gradients are exact.  With ``train=True`` and a trainable
    adapter carrying dropout, ``rng`` must be given.
    """
    cfg = weights.config
    ids = _check_inputs(cfg, x, t, prompt)
    if train and rng is None and any(
        ad.trainable and ad.dropout_rate > 0.0 for ad in adapters
    ):
        raise ContractViolation("training with dropout needs an rng")
    p = weights.params
    d = cfg.embed_dim
    dt = x.dtype
    nh = cfg.num_heads
    dh = d // nh
    inv = 1.0 / math.sqrt(dh)

    patches = patchify(x, cfg)
    emb_x = patches @ p["patch_embed.w"].T
    emb_x += _patch_pos_encoding(
        x.shape[1] // cfg.patch_f, x.shape[2] // cfg.patch_h, x.shape[3] // cfg.patch_w, d, dt
    )
    emb_p = p["token_embed.table"][ids] + _prompt_pos_encoding(len(ids), d, dt)[: len(ids)]

    tf = _time_features(float(t), d, dt)
    th = tf @ p["time_mlp.w1"].T
    ta = _silu(th)
    temb = ta @ p["time_mlp.w2"].T

    seq = np.concatenate([emb_p, emb_x], axis=0) + temb[None, :]
    cache: dict = {
        "cfg": cfg,
        "ids": ids,
        "shape": x.shape,
        "patches": patches,
        "tf": tf,
        "th": th,
        "ta": ta,
        "blocks": [],
    }
    for b in range(cfg.num_blocks):
        bc: dict = {"h_in": seq}
        n1, rms1 = _rmsnorm(seq)
        bc["n1"], bc["rms1"] = n1, rms1
        qf, bc["q_cache"] = _linear_fwd(n1, p[f"blocks.{b}.attn.q.w"], f"blocks.{b}.attn.q", adapters, train, rng)
        kf, bc["k_cache"] = _linear_fwd(n1, p[f"blocks.{b}.attn.k.w"], f"blocks.{b}.attn.k", adapters, train, rng)
        vf, bc["v_cache"] = _linear_fwd(n1, p[f"blocks.{b}.attn.v.w"], f"blocks.{b}.attn.v", adapters, train, rng)
        q = qf.reshape(-1, nh, dh).transpose(1, 0, 2)
        k = kf.reshape(-1, nh, dh).transpose(1, 0, 2)
        v = vf.reshape(-1, nh, dh).transpose(1, 0, 2)
        scores = np.matmul(q, k.transpose(0, 2, 1)) * inv
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        att = np.matmul(probs, v).transpose(1, 0, 2).reshape(-1, d)
        bc["q"], bc["k"], bc["v"], bc["probs"], bc["att"] = q, k, v, probs, att
        of, bc["o_cache"] = _linear_fwd(att, p[f"blocks.{b}.attn.o.w"], f"blocks.{b}.attn.o", adapters, train, rng)
        seq2 = seq + of
        bc["h_mid"] = seq2
        n2, rms2 = _rmsnorm(seq2)
        bc["n2"], bc["rms2"] = n2, rms2
        m1 = n2 @ p[f"blocks.{b}.mlp.w1"].T
        a = _silu(m1)
        bc["m1"], bc["a"] = m1, a
        seq = seq2 + a @ p[f"blocks.{b}.mlp.w2"].T
        cache["blocks"].append(bc)
    nf, rmsf = _rmsnorm(seq)
    cache["h_final"], cache["nf"], cache["rmsf"] = seq, nf, rmsf
    out = nf[len(ids):] @ p["head.w"].T
    cache["params"] = p
    return unpatchify(out, x.shape, cfg), cache


def backward(cache: dict, dv: np.ndarray, need: set[str]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with upstream ``dv = dL/dvelocity``.

    ``need`` selects which gradients to compute.  Base parameters use their
    weight names; adapter factors use ``adapter{i}.{layer}.down`` / ``.up``
    with ``i`` the position in the stack passed to ``forward_train``.
    """
    cfg: DenoiserConfig = cache["cfg"]
    p = cache["params"]
    ids = cache["ids"]
    L = len(ids)
    d = cfg.embed_dim
    nh = cfg.num_heads
    dh = d // nh
    inv = 1.0 / math.sqrt(dh)
    grads: dict[str, np.ndarray] = {}

    dout = patchify(dv, cfg)  # exact adjoint of unpatchify
    if "head.w" in need:
        grads["head.w"] = dout.T @ cache["nf"][L:]
    dnf = np.zeros_like(cache["nf"])
    dnf[L:] = dout @ p["head.w"]
    dseq = _rmsnorm_bwd(dnf, cache["h_final"], cache["rmsf"])

    for b in range(cfg.num_blocks - 1, -1, -1):
        bc = cache["blocks"][b]
        # MLP branch: seq3 = h_mid + silu(n2 @ W1.T) @ W2.T
        da = dseq @ p[f"blocks.{b}.mlp.w2"]
        if f"blocks.{b}.mlp.w2" in need:
            grads[f"blocks.{b}.mlp.w2"] = dseq.T @ bc["a"]
        dm1 = _silu_bwd(da, bc["m1"])
        if f"blocks.{b}.mlp.w1" in need:
            grads[f"blocks.{b}.mlp.w1"] = dm1.T @ bc["n2"]
        dn2 = dm1 @ p[f"blocks.{b}.mlp.w1"]
        dseq = dseq + _rmsnorm_bwd(dn2, bc["h_mid"], bc["rms2"])
        # attention branch: h_mid = h_in + o(att)
        datt = _linear_bwd(dseq, bc["o_cache"], grads, need)
        dav = datt.reshape(-1, nh, dh).transpose(1, 0, 2)
        probs = bc["probs"]
        dprobs = np.matmul(dav, bc["v"].transpose(0, 2, 1))
        dvh = np.matmul(probs.transpose(0, 2, 1), dav)
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dq = np.matmul(dscores, bc["k"]) * inv
        dk = np.matmul(dscores.transpose(0, 2, 1), bc["q"]) * inv
        dqf = dq.transpose(1, 0, 2).reshape(-1, d)
        dkf = dk.transpose(1, 0, 2).reshape(-1, d)
        dvf = dvh.transpose(1, 0, 2).reshape(-1, d)
        dn1 = _linear_bwd(dqf, bc["q_cache"], grads, need)
        dn1 += _linear_bwd(dkf, bc["k_cache"], grads, need)
        dn1 += _linear_bwd(dvf, bc["v_cache"], grads, need)
        dseq = dseq + _rmsnorm_bwd(dn1, bc["h_in"], bc["rms1"])

    # embeddings
    demb_p = dseq[:L]
    demb_x = dseq[L:]
    dtemb = dseq.sum(axis=0)
    if "token_embed.table" in need:
        dtable = np.zeros_like(p["token_embed.table"])
        np.add.at(dtable, ids, demb_p)
        grads["token_embed.table"] = dtable
    if "patch_embed.w" in need:
        grads["patch_embed.w"] = demb_x.T @ cache["patches"]
    if "time_mlp.w2" in need:
        grads["time_mlp.w2"] = np.outer(dtemb, cache["ta"])
    dta = dtemb @ p["time_mlp.w2"]
    dth = _silu_bwd(dta, cache["th"])
    if "time_mlp.w1" in need:
        grads["time_mlp.w1"] = np.outer(dth, cache["tf"])
    return grads


# ---------------------------------------------------------------------------
# Checkpoint I/O: CMT1 container plus a JSON sidecar for config and flags
# ---------------------------------------------------------------------------


def save_model(path, weights: ModelWeights) -> None:
    save_container(path, weights.params)
    sidecar = {"config": asdict(weights.config), "frozen": weights.frozen, "kind": "denoiser"}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_model(path) -> ModelWeights:
    side_path = Path(str(path) + ".json")
    if not side_path.exists():
        raise ConfigError(f"{path}: missing model sidecar {side_path.name}")
    try:
        sidecar = json.loads(side_path.read_text())
        config = DenoiserConfig(**sidecar["config"])
        frozen = bool(sidecar["frozen"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{side_path}: bad model sidecar ({exc})") from exc
    params = load_container(path)
    expected = param_names(config)
    if list(params) != expected:
        raise ConfigError(
            f"{path}: parameter names do not match config "
            f"(got {len(params)}, expected {len(expected)})"
        )
    return ModelWeights(config=config, params=params, frozen=frozen)
