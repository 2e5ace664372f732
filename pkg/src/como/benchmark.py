"""Desk-scale end-to-end benchmark: pretrain, customize, compose, compare.

Everything is built from synthetic scenes with analytic ground truth.  The
pipeline pretrains a small denoiser on single-subject sweeps (plus static
frames and wide two-subject scenes so the composition canvas and prompt
grammar are in distribution), customizes two reference motions bound to
reserved tokens via the two-phase static/dynamic procedure, and then runs
three composition arms over a set of seeds:

  dam           regional adapters fused step by step (divide and merge)
  linear-merge  one globally averaged adapter, plain sampling
  joint         one adapter tuned on both references at once, plain sampling

The comparison prompts swap the two reference appearances, so an arm only
scores well if its motion tokens act independently of the subject looks.
Scores are crop-and-compare values against the reference clips; aggregation
reports per-arm means and the standard error of each pairwise difference.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .compose import ComposeConfig, RegionPlan, compose_sample, partition_regions, realized_overlap
from .errors import ConfigError
from .flow import GuidanceConfig, ScheduleConfig, sample_single
from .lora import Adapter, linear_merge_baseline, new_adapter
from .metrics import CCReport, evaluate_composition, extract_tracklet, motion_similarity
from .model import DenoiserConfig, ModelWeights, init_model
from .synthdata import (
    COLOR_TOKENS,
    CUSTOM_MOTION_TOKENS,
    PALETTE,
    SHAPE_TOKENS,
    AppearanceSpec,
    MotionProgram,
    SceneSpec,
    Subject,
    decode_stub,
    encode_stub,
    frame_latents,
    from_model_space,
    render_video,
    to_model_space,
)
from .training import TrainConfig, train_base, train_dynamic, train_joint_baseline, train_static

# The pretraining vocabulary uses the generic motion-token slots for two
# sweep variants; the two customized motions live in the reserved range.
RIGHT_SWEEP_TOKEN = 10
DOWN_SWEEP_TOKEN = 11
CUSTOM_TOKEN_A = CUSTOM_MOTION_TOKENS[0]
CUSTOM_TOKEN_B = CUSTOM_MOTION_TOKENS[1]

PRETRAIN_SHAPES = ("disc", "square", "triangle")
PRETRAIN_COLORS = ("red", "blue")


@dataclass
class BenchmarkConfig:
    frames: int = 8
    scene_px: int = 64          # square single-subject scenes
    wide_px: int = 112          # width of two-subject scenes == composition canvas
    subject_size: float = 12.0
    ref_size: float = 8.0       # small enough that the median background stays clean

    pretrain_steps: int = 6000
    pretrain_lr: float = 2e-3
    static_steps: int = 300
    static_lr: float = 1e-3
    static_rank: int = 4
    dynamic_steps: int = 2000
    dynamic_lr: float = 2e-3
    dynamic_rank: int = 8
    # The joint arm gets the summed budget of the two dynamic adapters, so
    # losing on quality cannot be blamed on fewer updates.
    joint_steps: int = 4000
    joint_lr: float = 2e-3
    joint_rank: int = 8

    batch_size: int = 2
    cfg_drop_prob: float = 0.1
    weight_decay: float = 1e-4

    sample_steps: int = 50
    guidance_scale: float = 2.0
    lam: float = 0.4
    global_blend_steps: int = 10
    sigma_frac: float = 0.25

    n_comparison_seeds: int = 10
    n_decoupling_seeds: int = 5
    seed: int = 7
    model: DenoiserConfig = field(default_factory=DenoiserConfig)

    def validate(self) -> None:
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.scene_px % 4 or self.wide_px % 4:
            raise ConfigError("scene sizes must be multiples of the codec factor 4")
        if self.n_comparison_seeds < 2:
            raise ConfigError("comparison needs at least 2 seeds")
        self.model.validate()

    @property
    def latent_h(self) -> int:
        return self.scene_px // 4

    @property
    def canvas_shape(self) -> tuple[int, int, int, int]:
        return (3, self.frames, self.scene_px // 4, self.wide_px // 4)


def _sweep(shape: str, color: str, size: float, start, vel, frames: int,
           height: int, width: int) -> SceneSpec:
    return SceneSpec(
        subjects=[Subject(
            AppearanceSpec(shape, PALETTE[color], size),
            MotionProgram("sweep", {"start_h": float(start[0]), "start_w": float(start[1]),
                                    "vel_h": float(vel[0]), "vel_w": float(vel[1])}),
        )],
        frames=frames, height=height, width=width,
    )


def pretrain_scenes(cfg: BenchmarkConfig) -> list[tuple[SceneSpec, list[int]]]:
    """Scene/prompt pairs for base pretraining.

    Three families: moving single subjects (motion grammar), static single
    frames (appearance grammar for the static phase), and wide two-subject
    scenes (canvas positions and the six-token composition prompt format).
    """
    px = cfg.scene_px
    f = cfg.frames
    size = cfg.subject_size
    out: list[tuple[SceneSpec, list[int]]] = []
    motions = {
        RIGHT_SWEEP_TOKEN: ((px / 2.0, 18.0), (0.0, 3.0)),
        DOWN_SWEEP_TOKEN: ((18.0, px / 2.0), (3.0, 0.0)),
    }
    for shape in PRETRAIN_SHAPES:
        for color in PRETRAIN_COLORS:
            ps = [SHAPE_TOKENS[shape], COLOR_TOKENS[color]]
            for tok, (start, vel) in motions.items():
                out.append((_sweep(shape, color, size, start, vel, f, px, px), ps + [tok]))
            centre = (px / 2.0, px / 2.0)
            out.append((_sweep(shape, color, size, centre, (0.0, 0.0), 1, px, px), list(ps)))

    pairs = [
        (("disc", "red"), ("square", "blue")),
        (("square", "blue"), ("triangle", "red")),
        (("triangle", "red"), ("disc", "blue")),
    ]
    wide_motions = [
        (RIGHT_SWEEP_TOKEN, DOWN_SWEEP_TOKEN),
        (DOWN_SWEEP_TOKEN, RIGHT_SWEEP_TOKEN),
    ]
    starts = {  # (left, right) anchor per motion kind, clear of frame edges
        RIGHT_SWEEP_TOKEN: ((32.0, 24.0), (32.0, 80.0)),
        DOWN_SWEEP_TOKEN: ((20.0, 30.0), (20.0, 86.0)),
    }
    vels = {RIGHT_SWEEP_TOKEN: (0.0, 2.0), DOWN_SWEEP_TOKEN: (2.0, 0.0)}
    for (left, right), (m_left, m_right) in ((p, m) for p in pairs for m in wide_motions):
        subjects = []
        prompt = []
        for (shape, color), tok, side in ((left, m_left, 0), (right, m_right, 1)):
            start = starts[tok][side]
            subjects.append(Subject(
                AppearanceSpec(shape, PALETTE[color], size),
                MotionProgram("sweep", {"start_h": start[0], "start_w": start[1],
                                        "vel_h": vels[tok][0], "vel_w": vels[tok][1]}),
            ))
            prompt += [SHAPE_TOKENS[shape], COLOR_TOKENS[color], tok]
        out.append((SceneSpec(subjects=subjects, frames=f, height=px, width=cfg.wide_px), prompt))
    return out


@dataclass
class Reference:
    name: str
    scene: SceneSpec
    video: np.ndarray
    latent: np.ndarray            # model space
    track: np.ndarray
    appearance_prompt: list[int]
    motion_prompt: list[int]
    motion_token: int


def build_references(cfg: BenchmarkConfig) -> tuple[Reference, Reference]:
    """Two customization targets with anti-correlated diagonal motions.

    Up-right versus down-left displacement signatures have cosine -1, so a
    merged adapter that averages them has nearly no net motion to offer and
    the crop-and-compare score separates the arms sharply.
    """
    px = cfg.scene_px
    specs = [
        ("ref_a", "disc", "red", (40.0, 20.0), (-2.2, 2.2), CUSTOM_TOKEN_A),
        ("ref_b", "square", "blue", (24.0, 44.0), (2.2, -2.2), CUSTOM_TOKEN_B),
    ]
    refs = []
    for name, shape, color, start, vel, token in specs:
        scene = _sweep(shape, color, cfg.ref_size, start, vel, cfg.frames, px, px)
        rendered = render_video(scene)
        ps = [SHAPE_TOKENS[shape], COLOR_TOKENS[color]]
        refs.append(Reference(
            name=name,
            scene=scene,
            video=rendered.video,
            latent=to_model_space(encode_stub(rendered.video)),
            track=extract_tracklet(rendered.video),
            appearance_prompt=ps,
            motion_prompt=ps + [token],
            motion_token=token,
        ))
    return refs[0], refs[1]


def pretrain(cfg: BenchmarkConfig) -> tuple[ModelWeights, list[float]]:
    cfg.validate()
    corpus = []
    for scene, prompt in pretrain_scenes(cfg):
        rendered = render_video(scene)
        corpus.append((to_model_space(encode_stub(rendered.video)), prompt))
    weights = init_model(cfg.model, seed=cfg.seed)
    weights.frozen = False
    tc = TrainConfig(
        steps=cfg.pretrain_steps, learning_rate=cfg.pretrain_lr,
        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        cfg_drop_prob=cfg.cfg_drop_prob, seed=cfg.seed + 1,
    )
    losses = train_base(weights, corpus, tc)
    weights.frozen = True
    return weights, losses


@dataclass
class Customization:
    static_a: Adapter
    dynamic_a: Adapter
    static_b: Adapter
    dynamic_b: Adapter
    joint: Adapter
    losses: dict[str, list[float]]


def customize(weights: ModelWeights, ref_a: Reference, ref_b: Reference,
              cfg: BenchmarkConfig) -> Customization:
    """Two-phase adapters for both references plus the joint baseline."""
    losses: dict[str, list[float]] = {}
    adapters = {}
    for idx, ref in enumerate((ref_a, ref_b)):
        base_seed = cfg.seed + 100 * (idx + 1)
        static = new_adapter(cfg.model, rank=cfg.static_rank, seed=base_seed, kind="static")
        frames = [to_model_space(fl) for fl in frame_latents(ref.video)]
        losses[f"static_{ref.name}"] = train_static(
            weights, static, frames, ref.appearance_prompt,
            TrainConfig(steps=cfg.static_steps, learning_rate=cfg.static_lr,
                        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                        cfg_drop_prob=cfg.cfg_drop_prob, seed=base_seed + 1),
        )
        static.trainable = False
        dynamic = new_adapter(cfg.model, rank=cfg.dynamic_rank, seed=base_seed + 2, kind="dynamic")
        losses[f"dynamic_{ref.name}"] = train_dynamic(
            weights, static, dynamic, ref.latent, ref.motion_prompt,
            TrainConfig(steps=cfg.dynamic_steps, learning_rate=cfg.dynamic_lr,
                        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                        cfg_drop_prob=cfg.cfg_drop_prob, seed=base_seed + 3),
        )
        dynamic.trainable = False
        adapters[ref.name] = (static, dynamic)

    joint = new_adapter(cfg.model, rank=cfg.joint_rank, seed=cfg.seed + 999, kind="dynamic")
    losses["joint"] = train_joint_baseline(
        weights, joint,
        [(ref_a.latent, ref_a.motion_prompt), (ref_b.latent, ref_b.motion_prompt)],
        TrainConfig(steps=cfg.joint_steps, learning_rate=cfg.joint_lr,
                    weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                    cfg_drop_prob=cfg.cfg_drop_prob, seed=cfg.seed + 1000),
    )
    joint.trainable = False
    return Customization(
        static_a=adapters["ref_a"][0], dynamic_a=adapters["ref_a"][1],
        static_b=adapters["ref_b"][0], dynamic_b=adapters["ref_b"][1],
        joint=joint, losses=losses,
    )


def composition_setup(cfg: BenchmarkConfig, ref_a: Reference, ref_b: Reference):
    """Region plan and prompts with the two appearances swapped.

    Region 1 asks for reference A's motion on reference B's subject and vice
    versa, so only motion-pure adapters compose correctly.
    """
    _, _, h, w = cfg.canvas_shape
    regions = partition_regions(h, w, 2)
    prompt_1 = ref_b.appearance_prompt + [ref_a.motion_token]
    prompt_2 = ref_a.appearance_prompt + [ref_b.motion_token]
    plan = RegionPlan(
        regions=regions,
        prompts=[prompt_1, prompt_2],
        scales=[cfg.guidance_scale, cfg.guidance_scale],
        overlap=realized_overlap(regions),
    )
    global_prompt = prompt_1 + prompt_2
    return plan, global_prompt


COMPARISON_MODES = ("dam", "linear-merge", "joint")


def compose_arm(weights: ModelWeights, custom: Customization, plan: RegionPlan,
                global_prompt: list[int], cfg: BenchmarkConfig, mode: str,
                seed: int) -> np.ndarray:
    """One composition sample for one arm; returns the pixel video."""
    if mode == "dam":
        cc = ComposeConfig(
            latent_shape=cfg.canvas_shape, global_prompt=global_prompt,
            num_steps=cfg.sample_steps, lam=cfg.lam,
            global_blend_steps=cfg.global_blend_steps,
            guidance_scale=cfg.guidance_scale, sigma_frac=cfg.sigma_frac, seed=seed,
        )
        latent = compose_sample(weights, [custom.dynamic_a, custom.dynamic_b], plan, cc)
    elif mode == "linear-merge":
        merged = linear_merge_baseline([custom.dynamic_a, custom.dynamic_b])
        latent = sample_single(
            weights, [merged], global_prompt, cfg.canvas_shape, seed=seed,
            schedule=ScheduleConfig(cfg.sample_steps),
            guidance=GuidanceConfig(cfg.guidance_scale),
        )
    elif mode == "joint":
        latent = sample_single(
            weights, [custom.joint], global_prompt, cfg.canvas_shape, seed=seed,
            schedule=ScheduleConfig(cfg.sample_steps),
            guidance=GuidanceConfig(cfg.guidance_scale),
        )
    else:
        raise ConfigError(f"unknown comparison mode {mode!r}")
    return decode_stub(from_model_space(latent))


def _mean_se(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return float(arr.mean()), se


def run_comparison(weights: ModelWeights, custom: Customization, ref_a: Reference,
                   ref_b: Reference, cfg: BenchmarkConfig) -> dict:
    """All arms over the comparison seeds; paired by noise seed.

    The margin for arm X is mean(dam) - mean(X) in units of the pooled
    standard error sqrt(se_dam^2 + se_X^2); values above 1 mean the dam
    advantage exceeds one pooled standard error.
    """
    plan, global_prompt = composition_setup(cfg, ref_a, ref_b)
    seeds = [cfg.seed + 10_000 + i for i in range(cfg.n_comparison_seeds)]
    refs = [ref_a.video, ref_b.video]
    scores: dict[str, list[float]] = {m: [] for m in COMPARISON_MODES}
    per_region: dict[str, list[list[float]]] = {m: [] for m in COMPARISON_MODES}
    reports: list[CCReport] = []
    for seed in seeds:
        for mode in COMPARISON_MODES:
            video = compose_arm(weights, custom, plan, global_prompt, cfg, mode, seed)
            report = evaluate_composition(video, plan.regions, refs)
            scores[mode].append(report.cc)
            per_region[mode].append([report.s_cc[i][i] for i in range(2)])
            if mode == "dam":
                reports.append(report)

    result: dict = {
        "seeds": seeds,
        "regions": [[r.h0, r.w0, r.height, r.width] for r in plan.regions],
        "prompts": plan.prompts,
        "global_prompt": global_prompt,
        "scores": scores,
        "per_region_diag": per_region,
        "arms": {},
        "margins": {},
    }
    for mode in COMPARISON_MODES:
        mean, se = _mean_se(scores[mode])
        result["arms"][mode] = {"mean": mean, "se": se, "n": len(scores[mode])}
    dam = result["arms"]["dam"]
    for mode in ("linear-merge", "joint"):
        other = result["arms"][mode]
        pooled = float(np.hypot(dam["se"], other["se"]))
        diff = dam["mean"] - other["mean"]
        result["margins"][mode] = {
            "difference": diff,
            "pooled_se": pooled,
            "margin_in_se": diff / pooled if pooled > 0 else float("inf"),
        }
    result["example_dam_report"] = reports[0].to_dict() if reports else None
    return result


def run_decoupling(weights: ModelWeights, custom: Customization, ref_a: Reference,
                   ref_b: Reference, cfg: BenchmarkConfig) -> dict:
    """Swap check: each dynamic adapter moves the *other* subject its way.

    Sampling with dynamic adapter A, prompted with B's appearance plus A's
    motion token, should track reference A's motion better than B's.
    """
    out = {}
    cases = [
        ("a_on_b", [custom.dynamic_a], ref_b.appearance_prompt + [ref_a.motion_token],
         ref_a.track, ref_b.track),
        ("b_on_a", [custom.dynamic_b], ref_a.appearance_prompt + [ref_b.motion_token],
         ref_b.track, ref_a.track),
    ]
    shape = (3, cfg.frames, cfg.latent_h, cfg.latent_h)
    for name, stack, prompt, own_track, other_track in cases:
        own, other = [], []
        for i in range(cfg.n_decoupling_seeds):
            latent = sample_single(
                weights, stack, prompt, shape, seed=cfg.seed + 20_000 + i,
                schedule=ScheduleConfig(cfg.sample_steps),
                guidance=GuidanceConfig(cfg.guidance_scale),
            )
            track = extract_tracklet(decode_stub(from_model_space(latent)))
            own.append(motion_similarity(track, own_track))
            other.append(motion_similarity(track, other_track))
        out[name] = {
            "sim_own_motion": _mean_se(own)[0],
            "sim_other_motion": _mean_se(other)[0],
            "per_seed_own": own,
            "per_seed_other": other,
        }
    return out


def run_benchmark(cfg: BenchmarkConfig | None = None, log=None) -> dict:
    """Full pipeline; returns a JSON-ready report including phase timings."""
    cfg = cfg or BenchmarkConfig()
    cfg.validate()
    say = log or (lambda msg: None)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    ref_a, ref_b = build_references(cfg)
    say(f"references ready; motion signature sim "
        f"{motion_similarity(ref_a.track, ref_b.track):.4f}")

    weights, pre_losses = pretrain(cfg)
    timings["pretrain_s"] = time.perf_counter() - t0
    say(f"pretrain: {cfg.pretrain_steps} steps, final loss "
        f"{float(np.mean(pre_losses[-50:])):.4f} ({timings['pretrain_s']:.0f}s)")

    t1 = time.perf_counter()
    custom = customize(weights, ref_a, ref_b, cfg)
    timings["customize_s"] = time.perf_counter() - t1
    say(f"adapters: dyn_a loss {float(np.mean(custom.losses['dynamic_ref_a'][-10:])):.4f}, "
        f"dyn_b loss {float(np.mean(custom.losses['dynamic_ref_b'][-10:])):.4f}, "
        f"joint loss {float(np.mean(custom.losses['joint'][-10:])):.4f} "
        f"({timings['customize_s']:.0f}s)")

    t2 = time.perf_counter()
    comparison = run_comparison(weights, custom, ref_a, ref_b, cfg)
    timings["comparison_s"] = time.perf_counter() - t2
    for mode in COMPARISON_MODES:
        arm = comparison["arms"][mode]
        say(f"arm {mode}: cc {arm['mean']:.4f} +- {arm['se']:.4f}")

    t3 = time.perf_counter()
    decoupling = run_decoupling(weights, custom, ref_a, ref_b, cfg)
    timings["decoupling_s"] = time.perf_counter() - t3
    timings["total_s"] = time.perf_counter() - t0

    return {
        "config": _config_dict(cfg),
        "pretrain_final_loss": float(np.mean(pre_losses[-50:])),
        "comparison": comparison,
        "decoupling": decoupling,
        "timings": timings,
        "_artifacts": {
            "weights": weights,
            "customization": custom,
            "references": (ref_a, ref_b),
            "pretrain_losses": pre_losses,
        },
    }


def _config_dict(cfg: BenchmarkConfig) -> dict:
    d = asdict(cfg)
    d["model"] = asdict(cfg.model)
    return d


def report_without_artifacts(report: dict) -> dict:
    """The JSON-serializable part of a run_benchmark result."""
    return {k: v for k, v in report.items() if not k.startswith("_")}
