"""Acceptance gate: twelve end-to-end checks at pinned tolerances.

Each test is one release criterion.  They cover exact-oracle sampling,
degenerate equivalences between the compositional and the plain sampler,
the Gaussian fusion algebra, adapter gradient correctness, freeze and
identity guarantees, metric sanity, the three-arm benchmark comparison,
the blended-motion diagnosis, and byte-level CLI determinism.  The
benchmark check trains a real model end to end and takes the bulk of the
suite's runtime (its budget is 30 minutes; typical runs finish well under).
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import helpers
from como import benchmark, cli, lora, metrics, synthdata, training
from como.compose import (
    ComposeConfig,
    Region,
    RegionPlan,
    compose_sample,
    gaussian_weight_map,
    merge_local,
    partition_regions,
    realized_overlap,
)
from como.errors import ConfigError
from como.flow import (
    GuidanceConfig,
    ScheduleConfig,
    integrate_flow,
    make_timesteps,
    sample_single,
)
from como.model import forward_velocity
from como.tensors import digest_arrays


@pytest.fixture(scope="module")
def live_weights():
    # A zero-initialised output head collapses every velocity to zero, which
    # would hide adapter effects; nudge it so the field reacts to the blocks.
    weights = helpers.tiny_model(seed=0)
    rng = np.random.default_rng(7)
    weights.params["head.w"] += 0.05 * rng.standard_normal(
        weights.params["head.w"].shape
    ).astype(np.float32)
    weights.frozen = True
    return weights


# ------------------------------------------------------------ criterion 1


def test_oracle_inversion_recovers_training_data():
    """Sampling with the exact velocity field returns the data for any T."""
    rng = np.random.default_rng(0)
    x_data = rng.standard_normal((3, 4, 8, 8))
    noise = rng.standard_normal((3, 4, 8, 8))

    def oracle(x, t):
        return (x - x_data) / t

    start = time.perf_counter()
    for num_steps in (1, 10, 50):
        recovered = integrate_flow(oracle, noise, make_timesteps(num_steps))
        assert float(np.abs(recovered - x_data).max()) <= 1e-5
    assert time.perf_counter() - start < 1.0


# ------------------------------------------------------------ criterion 2


def test_single_region_composition_equals_plain_sampling(live_weights):
    """One full-canvas region and no global blending degenerate exactly."""
    shape = (3, 4, 8, 12)
    prompt = [1, 4, 10]
    adapter = helpers.perturbed_adapter(live_weights.config, rank=2, seed=3, kind="dynamic")
    plan = RegionPlan(regions=[Region(0, 0, 8, 12)], prompts=[prompt], scales=[1.5])
    start = time.perf_counter()
    for seed in np.random.default_rng(1).integers(0, 2**31 - 1, size=5):
        cfg = ComposeConfig(
            latent_shape=shape, global_prompt=prompt, num_steps=4,
            lam=0.0, global_blend_steps=0, guidance_scale=1.5, seed=int(seed),
        )
        composed = compose_sample(live_weights, [adapter], plan, cfg)
        plain = sample_single(
            live_weights, [adapter], prompt, shape, seed=int(seed),
            schedule=ScheduleConfig(4), guidance=GuidanceConfig(1.5),
        )
        assert float(np.abs(composed - plain).max()) <= 1e-6
    assert time.perf_counter() - start < 30.0


# ------------------------------------------------------------ criterion 3


def test_region_weights_form_partition_of_unity():
    """Normalised fusion weights sum to one at every covered cell."""
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 100:
        height = int(rng.integers(2, 24))
        width = height + int(rng.integers(0, 40))
        n_regions = int(rng.integers(1, 6))
        try:
            regions = partition_regions(height, width, n_regions)
        except ConfigError:
            continue  # infeasible sparse layout; draw another plan
        sigma_frac = float(rng.uniform(0.1, 0.6))
        items = [
            (np.ones((1, 1, r.height, r.width), dtype=np.float64), r,
             gaussian_weight_map(r.height, r.width, sigma_frac))
            for r in regions
        ]
        merged = merge_local(items, (1, 1, height, width))
        assert float(np.abs(merged - 1.0).max()) <= 1e-6
        checked += 1


# ------------------------------------------------------------ criterion 4


def test_overlap_merge_hand_case():
    """Equal-weight overlap of fields 1.0 and 3.0 fuses to their mean."""
    # 2x2 weight maps are constant (every cell sits at the same distance from
    # the centre), so the shared middle column weighs both regions equally.
    shape = (1, 2, 2, 3)
    left, right = Region(0, 0, 2, 2), Region(0, 1, 2, 2)
    items = [
        (np.full((1, 2, 2, 2), 1.0, dtype=np.float32), left, gaussian_weight_map(2, 2)),
        (np.full((1, 2, 2, 2), 3.0, dtype=np.float32), right, gaussian_weight_map(2, 2)),
    ]
    merged = merge_local(items, shape)
    assert float(np.abs(merged[:, :, :, 1] - 2.0).max()) <= 1e-6
    assert np.all(merged[:, :, :, 0] == 1.0)
    assert np.all(merged[:, :, :, 2] == 3.0)


# ------------------------------------------------------------ criterion 5


def test_adapter_gradients_match_finite_differences():
    """Analytic adapter gradients agree with central differences."""
    weights = helpers.tiny_model(seed=6)
    weights.frozen = True
    weights.params["head.w"] += 0.05
    video = synthdata.render_video(helpers.sweep_scene(size=12.0, frames=4)).video
    latent = synthdata.to_model_space(synthdata.encode_stub(video)).astype(np.float64)
    frames = [
        synthdata.to_model_space(fl).astype(np.float64)
        for fl in synthdata.frame_latents(video)
    ]
    weights64 = helpers.to_f64_weights(weights)
    static = helpers.to_f64_adapter(
        helpers.perturbed_adapter(weights.config, rank=2, seed=12, kind="static"))
    dynamic = helpers.to_f64_adapter(
        helpers.perturbed_adapter(weights.config, rank=2, seed=13, kind="dynamic"))

    results = []
    compute_s = helpers.fixed_batch_static_loss(weights64, static, frames, [1, 4])
    _, grads = compute_s(
        need={f"adapter0.{l}.{p}" for l in static.layers for p in ("down", "up")})
    params = {f"adapter0.{l}.down": static.layers[l][0] for l in static.layers}
    params |= {f"adapter0.{l}.up": static.layers[l][1] for l in static.layers}
    results += helpers.finite_diff_check(
        lambda: compute_s()[0], params, grads, coords_per_param=2)

    static.trainable = False
    compute_d = helpers.fixed_batch_dynamic_loss(
        weights64, static, dynamic, latent, [1, 4, 40])
    _, grads = compute_d(
        need={f"adapter1.{l}.{p}" for l in dynamic.layers for p in ("down", "up")})
    params = {f"adapter1.{l}.down": dynamic.layers[l][0] for l in dynamic.layers}
    params |= {f"adapter1.{l}.up": dynamic.layers[l][1] for l in dynamic.layers}
    results += helpers.finite_diff_check(
        lambda: compute_d()[0], params, grads, coords_per_param=2)

    assert len(results) >= 20
    worst = max(results, key=lambda r: r[-1])
    assert worst[-1] < 1e-2, f"worst relative error {worst}"


# ------------------------------------------------------------ criterion 6


def test_dynamic_training_leaves_base_and_static_untouched():
    """The dynamic phase must not write to the base model or static adapter."""
    weights = helpers.tiny_model(seed=2)
    weights.frozen = True
    weights.params["head.w"] += 0.05
    video = synthdata.render_video(helpers.sweep_scene(frames=4)).video
    latent = synthdata.to_model_space(synthdata.encode_stub(video))
    frames = [synthdata.to_model_space(fl) for fl in synthdata.frame_latents(video)]

    static = lora.new_adapter(weights.config, rank=2, seed=4, kind="static")
    training.train_static(weights, static, frames, [1, 4],
                          training.TrainConfig(steps=6, learning_rate=1e-3, seed=5))
    static.trainable = False
    base_before = digest_arrays(weights.params)
    static_before = digest_arrays(dict(static.param_items()))

    dynamic = lora.new_adapter(weights.config, rank=2, seed=6, kind="dynamic")
    training.train_dynamic(weights, static, dynamic, latent, [1, 4, 40],
                           training.TrainConfig(steps=6, learning_rate=1e-3, seed=7))
    assert digest_arrays(weights.params) == base_before
    assert digest_arrays(dict(static.param_items())) == static_before


# ------------------------------------------------------------ criterion 7


def test_fresh_adapters_are_exact_identities(live_weights):
    """Zero-initialised up factors add nothing, bit for bit."""
    x = np.random.default_rng(5).standard_normal((3, 2, 8, 8)).astype(np.float32)
    fresh = [
        lora.new_adapter(live_weights.config, rank=4, seed=8, kind="static"),
        lora.new_adapter(live_weights.config, rank=3, seed=9, kind="dynamic"),
    ]
    bare = forward_velocity(live_weights, x, 0.6, [1, 4])
    stacked = forward_velocity(lora.apply_adapters(live_weights, fresh), x, 0.6, [1, 4])
    assert np.array_equal(bare, stacked)


# ------------------------------------------------------------ criterion 8


def test_adapter_averaging_and_full_global_blend_equivalence(live_weights):
    """Self-averaging is exact; an always-global composition is plain sampling."""
    config = live_weights.config
    first = helpers.perturbed_adapter(config, rank=2, seed=21, kind="dynamic")
    second = helpers.perturbed_adapter(config, rank=2, seed=22, kind="dynamic")

    self_avg = lora.average_adapters([first, first])
    for layer in first.layers:
        assert np.array_equal(self_avg.layers[layer], lora.layer_delta(first, layer))

    shape = (3, 4, 8, 12)
    steps = 4
    regions = partition_regions(8, 12, 2)
    plan = RegionPlan(regions=regions, prompts=[[1, 4, 10], [2, 6, 11]],
                      scales=[1.5, 1.5], overlap=realized_overlap(regions))
    prompt = [1, 4, 10, 2, 6, 11]
    comp = ComposeConfig(
        latent_shape=shape, global_prompt=prompt, num_steps=steps,
        lam=1.0, global_blend_steps=steps, guidance_scale=1.5, seed=33,
    )
    composed = compose_sample(live_weights, [first, second], plan, comp)
    merged = lora.average_adapters([first, second])
    plain = sample_single(
        live_weights, [merged], prompt, shape, seed=33,
        schedule=ScheduleConfig(steps), guidance=GuidanceConfig(1.5),
    )
    assert float(np.abs(composed - plain).max()) <= 1e-6


# ------------------------------------------------------------ criterion 9

# Clean-tracking corpus: every motion kind, several shapes and colours, with
# trajectories that keep the subject inside the frame and moving fast enough
# that no pixel is covered for half the frames (the median background stays
# uncontaminated).  Bounce stations are spaced wider than a footprint.
TRACKER_CORPUS = [
    ("sweep", dict(start_h=32, start_w=14, vel_h=0, vel_w=5),
     dict(shape="disc", color="red", size=8.0)),
    ("sweep", dict(start_h=14, start_w=32, vel_h=5, vel_w=0),
     dict(shape="square", color="blue", size=8.0)),
    ("sweep", dict(start_h=12, start_w=12, vel_h=4, vel_w=4),
     dict(shape="triangle", color="green", size=8.0)),
    ("sweep", dict(start_h=44, start_w=12, vel_h=-3, vel_w=5),
     dict(shape="square", color="red", size=8.0)),
    ("sweep", dict(start_h=20.3, start_w=12.7, vel_h=1.6, vel_w=4.9),
     dict(shape="disc", color="red", size=6.0)),
    ("bounce", dict(center_h=32, center_w=32, amplitude=16, period=8),
     dict(shape="disc", color="red", size=6.0)),
    ("bounce", dict(center_h=32, center_w=32, amplitude=16, period=8),
     dict(shape="square", color="blue", size=6.0)),
    ("orbit", dict(center_h=32, center_w=32, radius=12, period=8),
     dict(shape="disc", color="red", size=8.0)),
    ("orbit", dict(center_h=32, center_w=32, radius=10, period=4),
     dict(shape="square", color="blue", size=6.0)),
    ("zigzag", dict(start_h=16, start_w=10, vel_h=0, vel_w=5, amplitude=6, period=4),
     dict(shape="disc", color="red", size=8.0)),
    ("zigzag", dict(start_h=40, start_w=10, vel_h=0, vel_w=6, amplitude=5, period=8),
     dict(shape="triangle", color="green", size=7.0)),
    ("spin", dict(center_h=32, center_w=32, period=8),
     dict(shape="triangle", color="red", size=12.0)),
]


def _corpus_scene(kind, params, shape, color, size):
    return synthdata.SceneSpec(
        subjects=[synthdata.Subject(
            synthdata.AppearanceSpec(shape, synthdata.PALETTE[color], float(size)),
            synthdata.MotionProgram(kind, {k: float(v) for k, v in params.items()}),
        )],
        frames=8, height=64, width=64,
    )


def test_metric_sanity_suite():
    """Identity scores are exact and the tracker stays within half a pixel."""
    matrix = np.array([[1.0, 0.3], [0.4, 1.0]])
    assert metrics.cc_score(matrix, matrix) == 1.0

    video = synthdata.render_video(helpers.sweep_scene(frames=6)).video
    assert metrics.motion_fidelity(video, [video]) == 1.0

    line = np.stack([np.linspace(3.0, 17.0, 8), np.linspace(40.0, 12.0, 8)], axis=1)
    assert abs(metrics.motion_similarity(line, line[::-1])) <= 1e-6

    errors = {}
    for kind, params, appearance in TRACKER_CORPUS:
        rendered = synthdata.render_video(_corpus_scene(kind, params, **appearance))
        assert rendered.warnings == []
        track = metrics.extract_tracklet(rendered.video)
        errors[(kind, appearance["shape"])] = float(
            np.abs(track - rendered.centroids[0]).max())
    assert len({kind for kind, _ in errors}) == len(synthdata.MOTION_KINDS)
    worst = max(errors.items(), key=lambda kv: kv[1])
    assert worst[1] <= 0.5, f"tracker error {worst}"


# ------------------------------------------------------------ criterion 10


@pytest.fixture(scope="module")
def benchmark_report():
    report = benchmark.run_benchmark(benchmark.BenchmarkConfig())
    return benchmark.report_without_artifacts(report)


def test_regional_sampling_beats_merge_and_joint_baselines(benchmark_report):
    """Regional fusion wins the swapped-appearance comparison on both arms."""
    comparison = benchmark_report["comparison"]
    arms = comparison["arms"]
    assert arms["dam"]["n"] == 10
    for mode in ("linear-merge", "joint"):
        margin = comparison["margins"][mode]
        assert margin["difference"] > 0.0, (mode, arms)
        assert margin["margin_in_se"] > 1.0, (mode, comparison["margins"])
    assert benchmark_report["timings"]["total_s"] < 1800.0


# ------------------------------------------------------------ criterion 11


def _two_subject_scene(subjects, height, width):
    built = []
    for shape, color, size, start, vel in subjects:
        built.append(synthdata.Subject(
            synthdata.AppearanceSpec(shape, synthdata.PALETTE[color], size),
            synthdata.MotionProgram("sweep", {
                "start_h": start[0], "start_w": start[1],
                "vel_h": vel[0], "vel_w": vel[1],
            }),
        ))
    return synthdata.SceneSpec(subjects=built, frames=8, height=height, width=width)


def test_blended_motion_fools_fidelity_but_not_crop_compare():
    """Whole-clip similarity accepts blended motion; crop-and-compare rejects it.

    Both constructed videos contain a red disc and a blue square.  The clean
    one gives each subject its own reference motion; the blended one moves
    both subjects along the same diagonal compromise between the references.
    Whole-clip motion fidelity scores the blended clip at least as high,
    while the per-region comparison matrix exposes the missing motions.
    """
    refs = [
        synthdata.render_video(_two_subject_scene(
            [("disc", "red", 8.0, (16.0, 10.0), (0.0, 3.0))], 32, 32)).video,
        synthdata.render_video(_two_subject_scene(
            [("square", "blue", 8.0, (10.0, 16.0), (3.0, 0.0))], 32, 32)).video,
    ]
    clean = synthdata.render_video(_two_subject_scene([
        ("disc", "red", 14.0, (16.0, 9.0), (0.0, 3.0)),
        ("square", "blue", 6.0, (8.0, 48.0), (2.5, 0.0)),
    ], 32, 64)).video
    blended = synthdata.render_video(_two_subject_scene([
        ("disc", "red", 9.0, (5.0, 6.0), (2.8, 2.8)),
        ("square", "blue", 9.0, (5.0, 38.0), (2.8, 2.8)),
    ], 32, 64)).video

    regions = [(0, 0, 8, 8), (0, 8, 8, 8)]  # latent units; x4 in pixels
    fidelity_clean = metrics.motion_fidelity(clean, refs)
    fidelity_blended = metrics.motion_fidelity(blended, refs)
    cc_clean = metrics.evaluate_composition(clean, regions, refs).cc
    cc_blended = metrics.evaluate_composition(blended, regions, refs).cc

    assert fidelity_blended >= fidelity_clean, (fidelity_blended, fidelity_clean)
    assert cc_blended < cc_clean, (cc_blended, cc_clean)


# ------------------------------------------------------------ criterion 12

_MODEL = {"embed_dim": 16, "num_blocks": 1, "num_heads": 2,
          "vocab_size": 48, "max_prompt_len": 6}

_SCENES = {
    "seed": 3,
    "scenes": [
        {"name": "right", "prompt": [1, 4, 10], "spec": {
            "frames": 4, "height": 32, "width": 32,
            "subjects": [{"shape": "disc", "color": "red", "size": 10,
                          "motion": {"kind": "sweep", "start_h": 16, "start_w": 10,
                                     "vel_h": 0, "vel_w": 3}}]}},
        {"name": "down", "prompt": [2, 6, 11], "spec": {
            "frames": 4, "height": 32, "width": 32,
            "subjects": [{"shape": "square", "color": "blue", "size": 10,
                          "motion": {"kind": "sweep", "start_h": 10, "start_w": 16,
                                     "vel_h": 3, "vel_w": 0}}]}},
    ],
}

_TRAIN = {"steps": 8, "learning_rate": 0.002, "batch_size": 1, "seed": 5,
          "rank": 2, "model": _MODEL}

_PLAN = {"height": 8, "width": 12, "n_regions": 2,
         "prompts": [[1, 4, 10], [2, 6, 11]], "scales": [1.5, 1.5]}

_COMP = {"frames": 4, "global_prompt": [1, 4, 10, 2, 6, 11], "num_steps": 3,
         "lam": 0.5, "global_blend_steps": 1, "guidance_scale": 1.5, "seed": 9}


def _run_cli(*argv) -> int:
    return cli.main([str(a) for a in argv])


def _run_pipeline(root: Path) -> dict[str, bytes]:
    """Generate data, train all phases, compose, evaluate; return all bytes."""
    root.mkdir()
    scenes = root / "scenes.json"
    train = root / "train.json"
    plan = root / "plan.json"
    comp = root / "comp.json"
    scenes.write_text(json.dumps(_SCENES))
    train.write_text(json.dumps(_TRAIN))
    plan.write_text(json.dumps(_PLAN))
    comp.write_text(json.dumps(_COMP))

    data = root / "data"
    assert _run_cli("gen-data", "--manifest", scenes, "--out-dir", data) == 0
    base = root / "base"
    assert _run_cli("train", "--phase", "base", "--config", train,
                    "--data", data, "--out-dir", base) == 0
    model_path = base / "model.cmt"

    adapters = []
    for name in ("right", "down"):
        static_dir = root / f"static_{name}"
        assert _run_cli("train", "--phase", "static", "--config", train,
                        "--data", data, "--scene", name, "--model", model_path,
                        "--out-dir", static_dir) == 0
        dynamic_dir = root / f"dynamic_{name}"
        assert _run_cli("train", "--phase", "dynamic", "--config", train,
                        "--data", data, "--scene", name, "--model", model_path,
                        "--static-adapter", static_dir / "static.cmt",
                        "--out-dir", dynamic_dir) == 0
        adapters.append(dynamic_dir / "dynamic.cmt")

    composition = root / "composition"
    assert _run_cli("compose", "--model", model_path, "--plan", plan,
                    "--compose", comp, "--adapters", *adapters,
                    "--mode", "dam", "--out-dir", composition) == 0
    report = root / "cc_report.json"
    assert _run_cli("eval", "--kind", "cc", "--video", composition / "video.cmt",
                    "--refs", data / "right.cmt", data / "down.cmt",
                    "--plan", plan, "--out", report) == 0

    artifacts = {}
    for path in sorted(root.rglob("*")):
        # Run manifests record wall-clock timings and are the one exception
        # to byte-for-byte reproducibility.
        if path.is_file() and path.name != "run_manifest.json":
            artifacts[str(path.relative_to(root))] = path.read_bytes()
    return artifacts


def test_cli_pipeline_is_byte_deterministic(tmp_path):
    """Two identical pipeline runs leave byte-identical artifacts."""
    first = _run_pipeline(tmp_path / "one")
    second = _run_pipeline(tmp_path / "two")
    assert sorted(first) == sorted(second)
    mismatched = [name for name in first if first[name] != second[name]]
    assert mismatched == []
    assert any(name.endswith(".cmt") for name in first)
    assert "cc_report.json" in first
