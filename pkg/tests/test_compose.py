"""Region partitioning, weighted fusion, and the divide-and-merge sampler."""

import numpy as np
import pytest

from como import compose, flow, lora
from como.compose import ComposeConfig, Region, RegionPlan
from como.errors import ConfigError, ContractViolation

import helpers


def test_partition_single_region_covers_canvas():
    regions = compose.partition_regions(16, 28, 1)
    assert regions == [Region(0, 0, 16, 28)]


def test_partition_two_regions_square_with_overlap():
    regions = compose.partition_regions(16, 28, 2)
    assert regions == [Region(0, 0, 16, 16), Region(0, 12, 16, 16)]
    assert compose.realized_overlap(regions) == 4


def test_partition_offsets_round_to_nearest():
    # offsets i * (W - H) / (N - 1) = 0, 6.5, 13 -> round-half-up gives 7.
    regions = compose.partition_regions(16, 29, 3)
    assert [r.w0 for r in regions] == [0, 7, 13]
    assert all(r.height == 16 and r.width == 16 for r in regions)


def test_partition_rejects_infeasible_overlap():
    # Three 8-wide regions with overlap >= 4 reach at most 8 + 2*4 = 16 columns.
    with pytest.raises(ConfigError, match="at most 16"):
        compose.partition_regions(8, 24, 3, min_overlap=4)
    # The widest admissible canvas still partitions.
    regions = compose.partition_regions(8, 16, 3, min_overlap=4)
    assert compose.realized_overlap(regions) >= 4


def test_partition_input_validation():
    with pytest.raises(ConfigError):
        compose.partition_regions(16, 28, 0)
    with pytest.raises(ConfigError):
        compose.partition_regions(16, 8, 2)  # width < height
    with pytest.raises(ConfigError):
        compose.partition_regions(16, 28, 2, min_overlap=0)


def test_gaussian_weight_map_properties():
    wmap = compose.gaussian_weight_map(7, 9, sigma_frac=0.25)
    assert wmap.shape == (7, 9)
    assert np.all(wmap > 0)
    assert wmap.max() == pytest.approx(1.0)
    # Peak sits at the centre cell and the map is symmetric about it.
    assert wmap[3, 4] == wmap.max()
    assert np.allclose(wmap, wmap[::-1, :])
    assert np.allclose(wmap, wmap[:, ::-1])
    # Larger sigma flattens the profile.
    flat = compose.gaussian_weight_map(7, 9, sigma_frac=10.0)
    assert flat.min() > wmap.min()
    with pytest.raises(ConfigError):
        compose.gaussian_weight_map(0, 9)
    with pytest.raises(ConfigError):
        compose.gaussian_weight_map(7, 9, sigma_frac=0.0)


def test_pad_region_places_values():
    region = Region(1, 2, 2, 3)
    v = np.arange(2 * 2 * 2 * 3, dtype=np.float32).reshape(2, 2, 2, 3)
    out = compose.pad_region(v, region, (2, 2, 4, 8))
    assert out.shape == (2, 2, 4, 8)
    assert np.array_equal(out[:, :, 1:3, 2:5], v)
    out[:, :, 1:3, 2:5] = 0
    assert not out.any()
    with pytest.raises(ConfigError):
        compose.pad_region(v, Region(3, 2, 2, 3), (2, 2, 4, 8))  # exceeds canvas
    with pytest.raises(ConfigError):
        compose.pad_region(v, Region(0, 0, 3, 3), (2, 2, 4, 8))  # shape mismatch


def test_merge_local_hand_case_equal_weights():
    # Two 1x2 regions overlap on the middle column of a 1x3 canvas with
    # uniform weights: the overlap cell averages 1 and 3 to exactly 2.
    shape = (1, 1, 1, 3)
    left = np.full((1, 1, 1, 2), 1.0, dtype=np.float64)
    right = np.full((1, 1, 1, 2), 3.0, dtype=np.float64)
    ones = np.ones((1, 2), dtype=np.float64)
    merged = compose.merge_local(
        [(left, Region(0, 0, 1, 2), ones), (right, Region(0, 1, 1, 2), ones)],
        shape,
    )
    assert merged[0, 0, 0].tolist() == [1.0, 2.0, 3.0]


def test_merge_local_single_region_is_identity():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(2, 3, 4, 6))
    wmap = compose.gaussian_weight_map(4, 6)
    merged = compose.merge_local([(v, Region(0, 0, 4, 6), wmap)], v.shape)
    assert np.array_equal(merged, v)


def test_merge_local_partition_of_unity():
    # Merging copies of the same constant field reproduces the constant
    # everywhere, whatever the weight profile: the weights sum to one.
    rng = np.random.default_rng(3)
    shape = (1, 2, 8, 14)
    regions = compose.partition_regions(8, 14, 3)
    items = []
    for region in regions:
        wmap = compose.gaussian_weight_map(region.height, region.width)
        items.append((np.full((1, 2, 8, 8), 5.0), region, wmap))
    merged = compose.merge_local(items, shape)
    assert np.allclose(merged, 5.0, atol=1e-6)
    # And non-overlap columns carry their region's values exactly.
    fields = [rng.normal(size=(1, 2, 8, 8)) for _ in regions]
    items = [
        (f, r, compose.gaussian_weight_map(r.height, r.width))
        for f, r in zip(fields, regions)
    ]
    merged = compose.merge_local(items, shape)
    assert np.allclose(merged[:, :, :, :3], fields[0][:, :, :, :3])
    assert np.allclose(merged[:, :, :, 11:], fields[2][:, :, :, 5:])


def test_merge_local_errors():
    shape = (1, 1, 2, 4)
    v = np.zeros((1, 1, 2, 2))
    wmap = np.ones((2, 2))
    with pytest.raises(ContractViolation, match="at least one region"):
        compose.merge_local([], shape)
    with pytest.raises(ContractViolation, match="covered by no region"):
        compose.merge_local([(v, Region(0, 0, 2, 2), wmap)], shape)
    with pytest.raises(ConfigError, match="strictly positive"):
        full = Region(0, 0, 2, 4)
        compose.merge_local([(np.zeros((1, 1, 2, 4)), full, np.zeros((2, 4)))], shape)
    with pytest.raises(ConfigError, match="weight map shape"):
        compose.merge_local([(v, Region(0, 0, 2, 4), wmap)], shape)


def test_blend_global_endpoints_and_midpoint():
    rng = np.random.default_rng(1)
    local = rng.normal(size=(1, 2, 3, 4))
    glob = rng.normal(size=(1, 2, 3, 4))
    assert compose.blend_global(local, glob, 0.0) is not local
    assert np.array_equal(compose.blend_global(local, glob, 0.0), local)
    assert np.array_equal(compose.blend_global(local, glob, 1.0), glob)
    mid = compose.blend_global(local, glob, 0.4)
    assert np.allclose(mid, 0.4 * glob + 0.6 * local)
    with pytest.raises(ConfigError):
        compose.blend_global(local, glob[:, :, :2], 0.5)
    with pytest.raises(ConfigError):
        compose.blend_global(local, glob, 1.5)


def test_compose_config_validation():
    good = ComposeConfig(latent_shape=(3, 2, 8, 8), num_steps=4, global_blend_steps=2)
    good.validate()
    with pytest.raises(ConfigError):
        ComposeConfig(latent_shape=(3, 2, 8), num_steps=4).validate()
    with pytest.raises(ConfigError):
        ComposeConfig(latent_shape=(3, 2, 8, 8), num_steps=0).validate()
    with pytest.raises(ConfigError):
        ComposeConfig(latent_shape=(3, 2, 8, 8), lam=1.2).validate()
    with pytest.raises(ConfigError):
        ComposeConfig(latent_shape=(3, 2, 8, 8), num_steps=4, global_blend_steps=5).validate()
    with pytest.raises(ConfigError):
        ComposeConfig(latent_shape=(3, 2, 8, 8), sigma_frac=0.0).validate()


@pytest.fixture(scope="module")
def live_weights():
    # A zero-initialised output head collapses every velocity to zero, which
    # would hide adapter effects; nudge it so the field reacts to the blocks.
    weights = helpers.tiny_model(seed=0)
    rng = np.random.default_rng(7)
    weights.params["head.w"] += 0.05 * rng.standard_normal(
        weights.params["head.w"].shape
    ).astype(np.float32)
    return weights


def _plan_and_config(tiny_weights, **overrides):
    cfg = tiny_weights.config
    regions = compose.partition_regions(8, 12, 2)
    plan = RegionPlan(
        regions=regions,
        prompts=[[1, 2], [3, 4]],
        scales=[1.5, 1.5],
        overlap=compose.realized_overlap(regions),
    )
    kwargs = dict(
        latent_shape=(cfg.in_channels, 2, 8, 12),
        global_prompt=[1, 2, 3, 4],
        num_steps=3,
        lam=0.4,
        global_blend_steps=2,
        guidance_scale=1.5,
        seed=11,
    )
    kwargs.update(overrides)
    return plan, ComposeConfig(**kwargs)


def test_compose_sample_deterministic_and_adapter_sensitive(live_weights):
    plan, ccfg = _plan_and_config(live_weights)
    ad_a = helpers.perturbed_adapter(live_weights.config, rank=2, seed=5, kind="dynamic")
    ad_b = helpers.perturbed_adapter(live_weights.config, rank=2, seed=6, kind="dynamic")
    out1 = compose.compose_sample(live_weights, [ad_a, ad_b], plan, ccfg)
    out2 = compose.compose_sample(live_weights, [ad_a, ad_b], plan, ccfg)
    assert out1.shape == ccfg.latent_shape
    assert np.array_equal(out1, out2)
    swapped = compose.compose_sample(live_weights, [ad_b, ad_a], plan, ccfg)
    assert not np.allclose(out1, swapped)


def test_compose_sample_none_adapter_runs_bare_model(live_weights):
    plan, ccfg = _plan_and_config(live_weights, lam=0.0, global_blend_steps=0)
    ad = helpers.perturbed_adapter(live_weights.config, rank=2, seed=5, kind="dynamic")
    out_none = compose.compose_sample(live_weights, [None, None], plan, ccfg)
    out_ad = compose.compose_sample(live_weights, [ad, None], plan, ccfg)
    assert not np.allclose(out_none, out_ad)
    # A fresh (zero-delta) adapter behaves exactly like None.
    fresh = lora.new_adapter(live_weights.config, rank=2, seed=0, kind="dynamic",
                             dropout_rate=0.0)
    out_fresh = compose.compose_sample(live_weights, [fresh, None], plan, ccfg)
    assert np.array_equal(out_none, out_fresh)


def test_compose_single_region_lam_zero_matches_plain_sampler(live_weights):
    # One full-canvas region without global blending degenerates to the
    # single-prompt sampler: same noise, same guided field, same steps.
    cfg = live_weights.config
    shape = (cfg.in_channels, 2, 8, 8)
    prompt = [1, 2, 3]
    ad = helpers.perturbed_adapter(live_weights.config, rank=2, seed=9, kind="dynamic")
    plan = RegionPlan(regions=[Region(0, 0, 8, 8)], prompts=[prompt], scales=[2.0])
    ccfg = ComposeConfig(
        latent_shape=shape, num_steps=4, lam=0.0, global_blend_steps=0,
        guidance_scale=2.0, seed=21,
    )
    composed = compose.compose_sample(live_weights, [ad], plan, ccfg)
    plain = flow.sample_single(
        live_weights, [ad], prompt, shape, seed=21,
        schedule=flow.ScheduleConfig(num_steps=4),
        guidance=flow.GuidanceConfig(scale=2.0),
    )
    assert np.allclose(composed, plain, atol=1e-6)


def test_compose_trace_counts_global_passes(live_weights):
    plan, ccfg = _plan_and_config(live_weights, num_steps=4, global_blend_steps=2)
    ad = helpers.perturbed_adapter(live_weights.config, rank=2, seed=5, kind="dynamic")
    trace = []
    compose.compose_sample(live_weights, [ad, None], plan, ccfg, trace=trace)
    assert len(trace) == 4
    assert [e["global_passes"] for e in trace] == [2, 2, 0, 0]
    assert [e["blended"] for e in trace] == [True, True, False, False]
    assert all(len(e["region_norms"]) == 2 for e in trace)
    assert trace[0]["global_norm"] is not None and trace[3]["global_norm"] is None

    # lam = 0 never touches the global branch.
    plan2, ccfg2 = _plan_and_config(live_weights, num_steps=4, lam=0.0)
    trace2 = []
    compose.compose_sample(live_weights, [ad, None], plan2, ccfg2, trace=trace2)
    assert all(e["global_passes"] == 0 for e in trace2)


def test_compose_sample_contract_errors(live_weights):
    plan, ccfg = _plan_and_config(live_weights)
    ad = helpers.perturbed_adapter(live_weights.config, rank=2, seed=5, kind="dynamic")
    with pytest.raises(ContractViolation, match="counts must match"):
        compose.compose_sample(live_weights, [ad], plan, ccfg)
    with pytest.raises(ContractViolation, match="at least one region adapter"):
        compose.compose_sample(live_weights, [None, None], plan, ccfg)
    big = RegionPlan(
        regions=[Region(0, 0, 8, 16)], prompts=[[1]], scales=[1.0],
    )
    with pytest.raises(ConfigError, match="exceeds canvas"):
        compose.compose_sample(
            live_weights, [ad], big,
            ComposeConfig(latent_shape=(live_weights.config.in_channels, 2, 8, 12),
                          num_steps=2, lam=0.0, global_blend_steps=0),
        )


def test_compose_global_uses_average_adapter(live_weights):
    # With full blending (lam = 1) during the blended steps, duplicating one
    # adapter across regions must equal using its self-average globally.
    plan, ccfg = _plan_and_config(live_weights, lam=1.0, num_steps=2,
                                  global_blend_steps=2)
    ad = helpers.perturbed_adapter(live_weights.config, rank=2, seed=5, kind="dynamic")
    out_dup = compose.compose_sample(live_weights, [ad, ad], plan, ccfg)
    # Reference: single full-canvas region with the same adapter and the
    # global prompt; lam = 1 makes the merged local field irrelevant.
    ref_plan = RegionPlan(
        regions=[Region(0, 0, 8, 12)], prompts=[[0]], scales=[0.0],
    )
    ref = compose.compose_sample(live_weights, [ad], ref_plan, ccfg)
    assert np.allclose(out_dup, ref, atol=1e-6)
