"""Command-line operator surface for the whole pipeline.

Subcommands: gen-data, train, sample, compose, eval, inspect.  Every run
writes exactly one ``run_manifest.json`` into its output directory; all
other artifacts are a pure function of configs and seeds, so reruns with
equal config digests reproduce equal output bytes (the manifest itself
carries wall-clock timings and is the one file excluded from byte
comparisons).

Exit codes: 0 success, 2 config/schema error, 3 contract violation (for
example dynamic phase before static), 4 I/O error.  The environment
variable ``COMO_SEED`` overrides every seed, for CI sweeps.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, compose, flow, lora, metrics, model, synthdata, tensors, training
from .errors import ConfigError, ContractViolation

# ---------------------------------------------------------------------------
# Config schemas
# ---------------------------------------------------------------------------

_SCENE_ENTRY_SCHEMA = {
    "type": "object",
    "required": ["name", "spec"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "pattern": r"^[A-Za-z0-9_.-]+$"},
        "prompt": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "spec": {"type": "object"},
    },
}

SCENE_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["scenes"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "scenes": {"type": "array", "minItems": 1, "items": _SCENE_ENTRY_SCHEMA},
    },
}

_MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        name: {"type": "integer", "minimum": 0}
        for name in (
            "embed_dim", "num_blocks", "num_heads", "patch_f", "patch_h",
            "patch_w", "in_channels", "vocab_size", "max_prompt_len",
            "null_token", "mlp_ratio",
        )
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "steps": {"type": "integer", "minimum": 0},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "cfg_drop_prob": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": {"type": "integer"},
        "rank": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "model": _MODEL_SCHEMA,
    },
}

PLAN_SCHEMA = {
    "type": "object",
    "required": ["height", "width", "prompts"],
    "additionalProperties": False,
    "properties": {
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "regions": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["h0", "w0", "height", "width"],
                "additionalProperties": False,
                "properties": {k: {"type": "integer", "minimum": 0}
                               for k in ("h0", "w0", "height", "width")},
            },
        },
        "n_regions": {"type": "integer", "minimum": 1},
        "min_overlap": {"type": "integer", "minimum": 0},
        "prompts": {"type": "array", "minItems": 1,
                    "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "scales": {"type": "array", "items": {"type": "number", "minimum": 0}},
    },
}

COMPOSE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "frames": {"type": "integer", "minimum": 1},
        "channels": {"type": "integer", "minimum": 1},
        "global_prompt": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "num_steps": {"type": "integer", "minimum": 1},
        "lam": {"type": "number", "minimum": 0, "maximum": 1},
        "global_blend_steps": {"type": "integer", "minimum": 0},
        "guidance_scale": {"type": "number", "minimum": 0},
        "cfg_mode": {"enum": list(flow.CFG_MODES)},
        "sigma_frac": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
    },
}


def _load_json(path, schema, what: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        where = exc.json_path if exc.json_path != "$" else what
        raise ConfigError(f"{path}: {where}: {exc.message}") from exc
    return data


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _seed_override(seed: int) -> int:
    env = os.environ.get("COMO_SEED")
    if env is None:
        return seed
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"COMO_SEED must be an integer, got {env!r}") from exc


def _config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _emit_report(payload: dict, out: str | None) -> None:
    if out:
        _write_json(out, payload)
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))


def _run_manifest(out_dir, command: str, config: dict, seed, inputs, outputs,
                  started: float, warnings_list=()) -> None:
    manifest = {
        "command": command,
        "config_digest": _config_digest(config),
        "seed": seed,
        "inputs": sorted(str(p) for p in inputs),
        "outputs": sorted(str(p) for p in outputs),
        "timings": {"wall_s": time.perf_counter() - started},
        "version": __version__,
        "warnings": list(warnings_list),
    }
    _write_json(Path(out_dir) / "run_manifest.json", manifest)


def _print_config(config: dict) -> int:
    print(json.dumps(config, indent=2, sort_keys=True))
    return 0


def _parse_prompt(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(tok) for tok in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"prompt must be comma-separated integers, got {text!r}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_video(path, name: str = "video") -> np.ndarray:
    data = tensors.load_container(path)
    if name not in data:
        raise ConfigError(f"{path}: container has no {name!r} entry (found {list(data)})")
    return data[name]


def _dataset_entry(data_dir: Path, manifest: dict, name: str) -> dict:
    for entry in manifest["scenes"]:
        if entry["name"] == name:
            return entry
    raise ConfigError(f"scene {name!r} not found in {data_dir / 'dataset_manifest.json'}")


def _load_dataset_manifest(data_dir) -> dict:
    path = Path(data_dir) / "dataset_manifest.json"
    if not path.exists():
        raise ConfigError(f"{data_dir}: missing dataset_manifest.json (run gen-data first)")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    manifest = _load_json(args.manifest, SCENE_MANIFEST_SCHEMA, "scene manifest")
    seed = _seed_override(int(manifest.get("seed", 0)))
    entries = manifest["scenes"]
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ConfigError("scene names must be unique")
    specs = []
    for entry in entries:
        spec = synthdata.scene_from_dict({**entry["spec"], "name": entry["name"]})
        if spec.seed == 0:
            spec.seed = seed
        specs.append(spec)
    config = {"manifest": manifest, "seed": seed}
    if args.print_config:
        return _print_config(config)

    out = _out_dir(args)

    def render(spec):
        rendered = synthdata.render_video(spec)
        latent = synthdata.encode_stub(rendered.video)
        return rendered, latent

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(render, specs))
    else:
        results = [render(spec) for spec in specs]

    dataset = {"seed": seed, "scenes": []}
    outputs = []
    all_warnings = []
    for entry, spec, (rendered, latent) in zip(entries, specs, results):
        file_name = f"{entry['name']}.cmt"
        path = out / file_name
        tensors.save_container(path, [
            ("video", rendered.video),
            ("latent", latent),
            ("tracks", rendered.centroids.astype(np.float32)),
        ])
        outputs.append(path)
        all_warnings.extend(rendered.warnings)
        dataset["scenes"].append({
            "name": entry["name"],
            "file": file_name,
            "prompt": list(entry.get("prompt", [])),
            "spec": synthdata.scene_to_dict(rendered.spec),
            "warnings": rendered.warnings,
        })
    _write_json(out / "dataset_manifest.json", dataset)
    outputs.append(out / "dataset_manifest.json")
    _run_manifest(out, "gen-data", config, seed, [args.manifest], outputs,
                  started, all_warnings)
    print(f"gen-data: wrote {len(specs)} scenes to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_config(raw: dict, args) -> tuple[training.TrainConfig, dict]:
    cfg_fields = {k: v for k, v in raw.items() if k in (
        "steps", "learning_rate", "weight_decay", "beta1", "beta2", "eps",
        "batch_size", "cfg_drop_prob", "seed")}
    tc = training.TrainConfig(**cfg_fields)
    if args.steps is not None:
        tc.steps = args.steps
    if args.seed is not None:
        tc.seed = args.seed
    tc.seed = _seed_override(tc.seed)
    tc.validate()
    extras = {
        "rank": int(raw.get("rank", 4 if args.phase == "static" else 8)),
        "alpha": raw.get("alpha"),
        "dropout_rate": float(raw.get("dropout_rate", 0.2)),
        "model": dict(raw.get("model", {})),
    }
    return tc, extras


def _corpus_from_entries(data_dir: Path, entries: list[dict]) -> list[tuple[np.ndarray, list[int]]]:
    corpus = []
    for entry in entries:
        latent = _load_video(data_dir / entry["file"], "latent")
        corpus.append((synthdata.to_model_space(latent), list(entry["prompt"])))
    return corpus


def cmd_train(args) -> int:
    started = time.perf_counter()
    raw = _load_json(args.config, TRAIN_SCHEMA, "train config") if args.config else {}
    tc, extras = _train_config(raw, args)
    config = {"phase": args.phase, "train": asdict(tc), **{k: v for k, v in extras.items() if k != "model"},
              "model": extras["model"]}
    if args.print_config:
        return _print_config(config)

    out = _out_dir(args)
    data_dir = Path(args.data) if args.data else None
    inputs = [p for p in (args.config, args.data, args.model, args.static_adapter) if p]
    outputs = []

    if args.phase == "base":
        if data_dir is None:
            raise ConfigError("base phase requires --data")
        manifest = _load_dataset_manifest(data_dir)
        entries = [e for e in manifest["scenes"] if e["prompt"]]
        if not entries:
            raise ConfigError("base phase needs scenes with non-empty prompts")
        corpus = _corpus_from_entries(data_dir, entries)
        weights = model.init_model(model.DenoiserConfig(**extras["model"]), seed=tc.seed)
        weights.frozen = False
        losses = training.train_base(weights, corpus, tc)
        weights.frozen = True
        model.save_model(out / "model.cmt", weights)
        outputs += [out / "model.cmt", out / "model.cmt.json"]
    else:
        if args.model is None:
            raise ConfigError(f"{args.phase} phase requires --model")
        weights = model.load_model(args.model)
        if args.phase == "dynamic" and args.static_adapter is None:
            raise ContractViolation(
                "dynamic phase requires --static-adapter; train the static phase first")
        if data_dir is None:
            raise ConfigError(f"{args.phase} phase requires --data")
        manifest = _load_dataset_manifest(data_dir)
        scene_names = args.scene or []
        if not scene_names:
            raise ConfigError(f"{args.phase} phase requires --scene NAME")
        entries = [_dataset_entry(data_dir, manifest, n) for n in scene_names]
        prompt = _parse_prompt(args.prompt) if args.prompt is not None else list(entries[0]["prompt"])
        kind = "static" if args.phase == "static" else "dynamic"
        adapter = lora.new_adapter(
            weights.config, rank=extras["rank"], seed=tc.seed, kind=kind,
            alpha=extras["alpha"], dropout_rate=extras["dropout_rate"])

        if args.phase == "static":
            video = _load_video(data_dir / entries[0]["file"])
            frames = [synthdata.to_model_space(fl) for fl in synthdata.frame_latents(video)]
            losses = training.train_static(weights, adapter, frames, prompt, tc)
        elif args.phase == "dynamic":
            static = lora.load_adapter(args.static_adapter)
            latent = synthdata.to_model_space(_load_video(data_dir / entries[0]["file"], "latent"))
            losses = training.train_dynamic(weights, static, adapter, latent, prompt, tc)
        else:  # joint
            corpus = _corpus_from_entries(data_dir, entries)
            losses = training.train_joint_baseline(weights, adapter, corpus, tc)
        adapter.trainable = False
        adapter_path = out / f"{args.phase}.cmt"
        lora.save_adapter(adapter_path, adapter)
        outputs += [adapter_path, Path(str(adapter_path) + ".json")]

    csv_path = out / f"{args.phase}_losses.csv"
    training.write_loss_csv(csv_path, losses)
    outputs.append(csv_path)
    _run_manifest(out, f"train:{args.phase}", config, tc.seed, inputs, outputs, started)
    final = float(np.mean(losses[-10:])) if losses else float("nan")
    print(f"train {args.phase}: {len(losses)} steps, final loss {final:.6f}, artifacts in {out}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def _parse_shape(text: str) -> tuple[int, int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"shape must be comma-separated integers, got {text!r}") from exc
    if len(dims) != 4 or min(dims) < 1:
        raise ConfigError(f"latent shape must be 4 positive dims, got {dims}")
    return dims


def _write_sample_outputs(out: Path, latent: np.ndarray) -> list[Path]:
    codec_latent = synthdata.from_model_space(latent)
    video = synthdata.decode_stub(codec_latent)
    tensors.save_container(out / "latent.cmt", [("latent", latent)])
    tensors.save_container(out / "video.cmt", [("video", video), ("latent", codec_latent)])
    frames = tensors.export_ppm_frames(video, out / "frames")
    return [out / "latent.cmt", out / "video.cmt", *frames]


def cmd_sample(args) -> int:
    started = time.perf_counter()
    seed = _seed_override(args.seed)
    prompt = _parse_prompt(args.prompt)
    shape = _parse_shape(args.shape)
    # The digest covers only computation-determining content; file locations
    # live in the manifest's inputs list so moved trees digest identically.
    config = {
        "prompt": prompt, "shape": list(shape), "seed": seed, "num_steps": args.steps,
        "guidance_scale": args.guidance, "cfg_mode": args.cfg_mode,
        "n_adapters": len(args.adapters),
    }
    if args.print_config:
        return _print_config({**config, "model": args.model, "adapters": list(args.adapters)})
    weights = model.load_model(args.model)
    stack = [lora.load_adapter(p) for p in args.adapters]
    latent = flow.sample_single(
        weights, stack, prompt, shape, seed=seed,
        schedule=flow.ScheduleConfig(args.steps),
        guidance=flow.GuidanceConfig(args.guidance, args.cfg_mode),
    )
    out = _out_dir(args)
    outputs = _write_sample_outputs(out, latent)
    _run_manifest(out, "sample", config, seed, [args.model, *args.adapters], outputs, started)
    print(f"sample: wrote latent {latent.shape} and {latent.shape[1]} frames to {out}")
    return 0


# ---------------------------------------------------------------------------
# compose
# ---------------------------------------------------------------------------

def _build_plan(raw: dict) -> compose.RegionPlan:
    height, width = raw["height"], raw["width"]
    if "regions" in raw:
        regions = [compose.Region(r["h0"], r["w0"], r["height"], r["width"])
                   for r in raw["regions"]]
    else:
        regions = compose.partition_regions(
            height, width, int(raw.get("n_regions", len(raw["prompts"]))),
            int(raw.get("min_overlap", 1)))
    prompts = [list(p) for p in raw["prompts"]]
    scales = [float(s) for s in raw.get("scales", [6.0] * len(regions))]
    plan = compose.RegionPlan(regions=regions, prompts=prompts, scales=scales,
                              overlap=compose.realized_overlap(regions))
    plan.validate()
    for region in regions:
        if region.h0 + region.height > height or region.w0 + region.width > width:
            raise ConfigError(f"region {region} exceeds canvas {height}x{width}")
    return plan


def cmd_compose(args) -> int:
    started = time.perf_counter()
    plan_raw = _load_json(args.plan, PLAN_SCHEMA, "region plan")
    comp_raw = _load_json(args.compose, COMPOSE_SCHEMA, "compose config") if args.compose else {}
    plan = _build_plan(plan_raw)
    frames = int(comp_raw.get("frames", 8))
    channels = int(comp_raw.get("channels", 3))
    cc = compose.ComposeConfig(
        latent_shape=(channels, frames, plan_raw["height"], plan_raw["width"]),
        global_prompt=list(comp_raw.get("global_prompt", [])),
        num_steps=int(comp_raw.get("num_steps", 50)),
        lam=float(comp_raw.get("lam", 0.5)),
        global_blend_steps=int(comp_raw.get("global_blend_steps", 10)),
        guidance_scale=float(comp_raw.get("guidance_scale", 6.0)),
        cfg_mode=str(comp_raw.get("cfg_mode", "affine")),
        sigma_frac=float(comp_raw.get("sigma_frac", 0.25)),
        seed=_seed_override(int(comp_raw.get("seed", 0))),
    )
    if args.lam is not None:
        cc.lam = args.lam
    if args.seed is not None:
        cc.seed = _seed_override(args.seed)
    config = {"plan": plan_raw, "compose": asdict(cc), "mode": args.mode,
              "n_adapters": len(args.adapters)}
    config["compose"]["latent_shape"] = list(cc.latent_shape)
    if args.print_config:
        return _print_config({**config, "model": args.model, "adapters": list(args.adapters)})

    weights = model.load_model(args.model)
    stack = [lora.load_adapter(p) for p in args.adapters]
    trace: list[dict] = []
    if args.mode == "dam":
        if len(stack) != len(plan.regions):
            raise ContractViolation(
                f"dam mode needs one adapter per region: {len(stack)} adapters, "
                f"{len(plan.regions)} regions")
        latent = compose.compose_sample(weights, stack, plan, cc, trace=trace)
    elif args.mode == "linear-merge":
        if not stack:
            raise ConfigError("linear-merge mode needs at least one adapter")
        merged = lora.linear_merge_baseline(stack)
        latent = flow.sample_single(
            weights, [merged], cc.global_prompt, cc.latent_shape, seed=cc.seed,
            schedule=flow.ScheduleConfig(cc.num_steps),
            guidance=flow.GuidanceConfig(cc.guidance_scale, cc.cfg_mode))
    else:  # joint
        if len(stack) != 1:
            raise ConfigError("joint mode takes exactly one adapter")
        latent = flow.sample_single(
            weights, stack, cc.global_prompt, cc.latent_shape, seed=cc.seed,
            schedule=flow.ScheduleConfig(cc.num_steps),
            guidance=flow.GuidanceConfig(cc.guidance_scale, cc.cfg_mode))

    out = _out_dir(args)
    outputs = _write_sample_outputs(out, latent)
    _write_json(out / "trace.json", {"mode": args.mode, "steps": trace})
    outputs.append(out / "trace.json")
    _run_manifest(out, f"compose:{args.mode}", config, cc.seed,
                  [args.model, args.plan, *(p for p in (args.compose,) if p), *args.adapters],
                  outputs, started)
    print(f"compose ({args.mode}): wrote latent {latent.shape} to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _aggregate_reports(directory: Path, kind: str) -> dict:
    key = {"cc": "cc_score", "fidelity": "fidelity", "tc": "tc"}[kind]
    values, files = [], []
    for path in sorted(directory.glob("*.json")):
        data = json.loads(path.read_text())
        if key in data:
            values.append(float(data[key]))
            files.append(path.name)
    if not values:
        raise ConfigError(f"{directory}: no reports with a {key!r} field")
    arr = np.asarray(values, dtype=np.float64)
    return {
        "kind": kind, "n": len(values), "files": files,
        "mean": float(arr.mean()),
        "stddev": float(arr.std(ddof=1)) if len(values) > 1 else 0.0,
    }


def cmd_eval(args) -> int:
    config = {"kind": args.kind, "aggregate": bool(args.aggregate),
              "n_refs": len(args.refs), "plan": None}
    if args.print_config:
        return _print_config({**config, "video": args.video, "refs": list(args.refs),
                              "plan_path": args.plan, "aggregate_dir": args.aggregate})
    if args.aggregate:
        report = _aggregate_reports(Path(args.aggregate), args.kind)
        report["config_digest"] = _config_digest(config)
        _emit_report(report, args.out)
        return 0
    if args.video is None:
        raise ConfigError("eval requires --video (or --aggregate DIR)")
    video = _load_video(args.video)
    if args.kind == "cc":
        if not args.refs or args.plan is None:
            raise ConfigError("eval --kind cc requires --refs and --plan")
        plan_raw = _load_json(args.plan, PLAN_SCHEMA, "region plan")
        config["plan"] = plan_raw
        plan = _build_plan(plan_raw)
        refs = [_load_video(p) for p in args.refs]
        cc_report = metrics.evaluate_composition(video, plan.regions, refs)
        report = cc_report.to_dict()
    elif args.kind == "fidelity":
        if not args.refs:
            raise ConfigError("eval --kind fidelity requires --refs")
        refs = [_load_video(p) for p in args.refs]
        report = {"kind": "fidelity", "fidelity": metrics.motion_fidelity(video, refs)}
    else:  # tc
        report = {"kind": "tc", "tc": metrics.temporal_consistency_stub(video)}
    report["config_digest"] = _config_digest(config)
    _emit_report(report, args.out)
    return 0


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    for path in args.paths:
        header = tensors.container_header(path)
        print(json.dumps({"file": str(path), "header": header}, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="como",
        description="Compositional motion customization on a toy flow-matching denoiser.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_print_config(p):
        p.add_argument("--print-config", action="store_true",
                       help="print the merged effective config as JSON and exit")

    p = sub.add_parser("gen-data", help="render synthetic scenes to containers")
    p.add_argument("--manifest", required=True, help="scene manifest JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=1,
                   help="parallel render workers (results are order-stable)")
    add_print_config(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain the base or tune adapters")
    p.add_argument("--phase", required=True, choices=("base", "static", "dynamic", "joint"))
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--data", help="gen-data output directory")
    p.add_argument("--scene", action="append",
                   help="dataset scene name (repeat for the joint phase)")
    p.add_argument("--model", help="pretrained model for adapter phases")
    p.add_argument("--static-adapter", help="frozen static adapter (dynamic phase)")
    p.add_argument("--prompt", help="comma-separated token ids; default: scene prompt")
    p.add_argument("--steps", type=int, help="override config steps")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out-dir", required=True)
    add_print_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample one clip from a model plus adapters")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters", nargs="*", default=[])
    p.add_argument("--prompt", default="")
    p.add_argument("--shape", default="3,8,16,16", help="latent C,F,H,W")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=6.0)
    p.add_argument("--cfg-mode", default="affine", choices=list(flow.CFG_MODES))
    p.add_argument("--out-dir", required=True)
    add_print_config(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("compose", help="compositional sampling with regional adapters")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True, help="region plan JSON")
    p.add_argument("--compose", help="compose config JSON")
    p.add_argument("--adapters", nargs="*", default=[])
    p.add_argument("--mode", default="dam", choices=("dam", "linear-merge", "joint"))
    p.add_argument("--lam", type=float, help="override global blend weight")
    p.add_argument("--seed", type=int, help="override compose seed")
    p.add_argument("--out-dir", required=True)
    add_print_config(p)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("eval", help="score videos: crop-and-compare, fidelity, consistency")
    p.add_argument("--kind", required=True, choices=("cc", "fidelity", "tc"))
    p.add_argument("--video", help="generated video container")
    p.add_argument("--refs", nargs="*", default=[], help="reference video containers")
    p.add_argument("--plan", help="region plan JSON (cc)")
    p.add_argument("--aggregate", help="directory of report JSONs to aggregate")
    p.add_argument("--out", help="write the report here instead of stdout")
    add_print_config(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print container headers")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
