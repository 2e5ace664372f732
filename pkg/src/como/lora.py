"""Low-rank adapters over the denoiser's attention projections.

An Adapter holds per-layer factor pairs (down [r, in], up [out, r]); its
effective weight delta is (alpha / r) * up @ down.  Up factors start at
zero, so a freshly created adapter is an exact identity.  A DenseDelta is a
merged, rank-free delta produced by averaging adapters; samplers treat both
the same way.

Static adapters (appearance) and dynamic adapters (motion) differ only by
their ``kind`` tag and the ranks conventionally used for them; the math is
shared.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation
from .model import DenoiserConfig, ModelWeights, injectable_layers
from .tensors import load_container, save_container

ADAPTER_KINDS = ("static", "dynamic")


@dataclass
class Adapter:
    layers: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (down, up)
    rank: int
    alpha: float
    kind: str
    trainable: bool = True
    dropout_rate: float = 0.2

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) pairs in canonical order: per layer, down then up."""
        out = []
        for layer, (down, up) in self.layers.items():
            out.append((f"{layer}.down", down))
            out.append((f"{layer}.up", up))
        return out


@dataclass
class DenseDelta:
    layers: dict[str, np.ndarray]
    kind: str = "merged"


def new_adapter(
    config: DenoiserConfig,
    rank: int,
    seed: int,
    kind: str,
    alpha: float | None = None,
    layer_names: list[str] | None = None,
    dropout_rate: float = 0.2,
) -> Adapter:
    """Create a fresh adapter: seeded small down factors, zero up factors.

    ``alpha`` defaults to ``rank`` so the effective scale is 1.  Layer names
    default to every injectable layer of the config.
    """
    config.validate()
    if rank < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {rank}")
    if kind not in ADAPTER_KINDS:
        raise ConfigError(f"adapter kind must be one of {ADAPTER_KINDS}, got {kind!r}")
    if not (0.0 <= dropout_rate < 1.0):
        raise ConfigError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    allowed = injectable_layers(config)
    if layer_names is None:
        layer_names = list(allowed)
    else:
        for name in layer_names:
            if name not in allowed:
                raise ConfigError(f"layer {name!r} is not adapter-injectable")
        if len(set(layer_names)) != len(layer_names):
            raise ConfigError("duplicate layer names in adapter")
    if alpha is None:
        alpha = float(rank)

    d = config.embed_dim
    rng = np.random.Generator(np.random.PCG64(seed))
    std = np.float32(1.0 / np.sqrt(d))
    layers = {}
    for name in layer_names:
        down = rng.standard_normal((rank, d), dtype=np.float32) * std
        up = np.zeros((d, rank), dtype=np.float32)
        layers[name] = (down, up)
    return Adapter(layers=layers, rank=rank, alpha=float(alpha), kind=kind,
                   trainable=True, dropout_rate=dropout_rate)


def layer_delta(adapter, layer: str) -> np.ndarray:
    """Effective dense weight delta contributed by one adapter at one layer."""
    if isinstance(adapter, DenseDelta):
        return adapter.layers[layer]
    down, up = adapter.layers[layer]
    return np.float32(adapter.scale) * (up @ down)


def apply_adapters(weights: ModelWeights, stack) -> ModelWeights:
    """Merge adapter deltas into a copy of the weights (bases untouched).

    All-zero deltas (fresh adapters) are skipped, so a stack of untouched
    adapters returns the base arrays themselves, bit for bit.
    """
    params = dict(weights.params)
    for ad in stack:
        for layer in ad.layers:
            key = layer + ".w"
            if key not in params:
                raise ConfigError(f"adapter targets unknown layer {layer!r}")
            delta = layer_delta(ad, layer)
            if delta.shape != params[key].shape:
                raise ConfigError(
                    f"adapter delta for {layer!r} has shape {delta.shape}, "
                    f"weight is {params[key].shape}"
                )
            if not np.any(delta):
                continue
            params[key] = params[key] + delta
    return ModelWeights(config=weights.config, params=params, frozen=weights.frozen)


def average_adapters(adapters) -> DenseDelta:
    """Uniform average of adapter deltas in dense-delta space.

    All inputs must cover the same layer set.  Averaging N references to the
    same adapter reproduces its delta exactly.
    """
    adapters = list(adapters)
    if not adapters:
        raise ContractViolation("cannot average zero adapters")
    names = list(adapters[0].layers)
    name_set = set(names)
    for ad in adapters[1:]:
        if set(ad.layers) != name_set:
            raise ContractViolation(
                f"adapter layer sets differ: {sorted(name_set)} vs {sorted(ad.layers)}"
            )
    n = np.float32(len(adapters))
    merged = {}
    for layer in names:
        acc = layer_delta(adapters[0], layer).copy()
        for ad in adapters[1:]:
            acc += layer_delta(ad, layer)
        merged[layer] = acc / n
    return DenseDelta(layers=merged, kind="merged")


def linear_merge_baseline(adapters) -> DenseDelta:
    """Naive multi-adapter baseline: one uniform dense merge, no regions."""
    return average_adapters(adapters)


# ---------------------------------------------------------------------------
# I/O: CMT1 container + JSON sidecar
# ---------------------------------------------------------------------------


def save_adapter(path, adapter) -> None:
    if isinstance(adapter, DenseDelta):
        entries = [(f"{layer}.delta", arr) for layer, arr in adapter.layers.items()]
        sidecar = {"schema": "dense_delta", "kind": adapter.kind,
                   "layers": list(adapter.layers)}
    else:
        entries = adapter.param_items()
        sidecar = {
            "schema": "adapter",
            "kind": adapter.kind,
            "rank": adapter.rank,
            "alpha": adapter.alpha,
            "dropout_rate": adapter.dropout_rate,
            "layers": list(adapter.layers),
        }
    save_container(path, entries)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_adapter(path):
    """Load an Adapter or DenseDelta; loaded objects come back frozen."""
    side_path = Path(str(path) + ".json")
    if not side_path.exists():
        raise ConfigError(f"{path}: missing adapter sidecar {side_path.name}")
    try:
        sidecar = json.loads(side_path.read_text())
        schema = sidecar["schema"]
        layer_names = list(sidecar["layers"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{side_path}: bad adapter sidecar ({exc})") from exc
    tensors = load_container(path)

    if schema == "dense_delta":
        try:
            layers = {name: tensors[f"{name}.delta"] for name in layer_names}
        except KeyError as exc:
            raise ConfigError(f"{path}: missing tensor {exc.args[0]!r}") from exc
        return DenseDelta(layers=layers, kind=str(sidecar.get("kind", "merged")))
    if schema != "adapter":
        raise ConfigError(f"{side_path}: unknown adapter schema {schema!r}")
    try:
        rank = int(sidecar["rank"])
        alpha = float(sidecar["alpha"])
        dropout = float(sidecar.get("dropout_rate", 0.0))
        kind = str(sidecar["kind"])
        layers = {}
        for name in layer_names:
            layers[name] = (tensors[f"{name}.down"], tensors[f"{name}.up"])
    except KeyError as exc:
        raise ConfigError(f"{path}: missing tensor or field {exc.args[0]!r}") from exc
    for name, (down, up) in layers.items():
        if down.shape[0] != rank or up.shape[1] != rank:
            raise ConfigError(f"{path}: tensor shapes for {name!r} disagree with rank {rank}")
    return Adapter(layers=layers, rank=rank, alpha=alpha, kind=kind,
                   trainable=False, dropout_rate=dropout)
