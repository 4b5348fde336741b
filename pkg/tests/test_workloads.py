import numpy as np
import pytest

from danmpsim import msda, workload_io, workloads
from danmpsim.errors import ConfigError


def small_spec(**kw):
    base = dict(preset="custom", queries=40, levels=((32, 32), (16, 16)),
                d=16, heads=2, points_per_level=2, seed=3)
    base.update(kw)
    return workloads.WorkloadSpec(**base)


def sample_xy(pyr, w):
    off = msda.project_offsets(w)
    return msda.sample_coordinates(pyr, w, off)


def test_presets_query_counts():
    assert workloads.WorkloadSpec(preset="de-detr").num_queries == 100
    assert workloads.WorkloadSpec(preset="dn-detr").num_queries == 300
    assert workloads.WorkloadSpec(preset="dino").num_queries == 900


def test_generated_workload_satisfies_invariants():
    pyr, w = workloads.generate(small_spec())
    w.validate_against(pyr)
    assert w.num_queries == 40
    assert pyr.total_pixels == 32 * 32 + 16 * 16


def test_same_seed_is_byte_identical():
    spec = small_spec(skew=workloads.SkewSpec(kind="gaussian-hotspots"))
    a = workload_io.dump_workload(*workloads.generate(spec))
    b = workload_io.dump_workload(*workloads.generate(spec))
    assert a == b


def test_uniform_skew_tile_histogram_is_flat():
    spec = small_spec(queries=640, heads=4, points_per_level=4,
                      levels=((32, 32),), offset_sigma=5.0,
                      skew=workloads.SkewSpec(kind="uniform"))
    pyr, w = workloads.generate(spec)
    xy = sample_xy(pyr, w)[:, :, 0].reshape(-1, 2)  # 640*16 > 1e4 samples
    assert xy.shape[0] >= 10 ** 4
    tiles = 8
    hist = np.zeros((tiles, tiles))
    span = 31.0  # positions live on [0, W-1]
    tx = np.clip((xy[:, 0] / span * tiles).astype(int), 0, tiles - 1)
    ty = np.clip((xy[:, 1] / span * tiles).astype(int), 0, tiles - 1)
    np.add.at(hist, (ty, tx), 1)
    cov = hist.std() / hist.mean()
    assert cov < 0.2


def test_gaussian_hotspots_concentrate_samples():
    sigma = 3.0
    spec = small_spec(queries=80, levels=((48, 48),),
                      skew=workloads.SkewSpec(kind="gaussian-hotspots",
                                              hotspots=2, sigma=sigma,
                                              overlap=1.0),
                      offset_sigma=sigma / 3.0, seed=9)
    pyr, w = workloads.generate(spec)
    xy = sample_xy(pyr, w)[:, :, 0].reshape(-1, 2)
    # recover the hotspot centers the generator drew
    rng = np.random.default_rng(spec.seed)
    rng.standard_normal((48, 48, spec.d))  # pyramid draw
    rng.standard_normal((80, spec.d))      # queries draw
    centers = rng.uniform(0.12, 0.88, (2, 2)) * 47.0
    d2 = np.minimum(((xy - centers[0]) ** 2).sum(axis=1),
                    ((xy - centers[1]) ** 2).sum(axis=1))
    frac = (np.sqrt(d2) <= 3 * sigma).mean()
    assert frac >= 0.8


def test_zipf_top_share_monotone_in_s():
    def top_share(s, seed):
        spec = small_spec(queries=200, levels=((32, 32),),
                          skew=workloads.SkewSpec(kind="zipf", zipf_s=s),
                          seed=seed)
        pyr, w = workloads.generate(spec)
        xy = sample_xy(pyr, w)[:, :, 0].reshape(-1, 2)
        g = 8
        hist = np.zeros((g, g))
        tx = np.clip((xy[:, 0] / 32 * g).astype(int), 0, g - 1)
        ty = np.clip((xy[:, 1] / 32 * g).astype(int), 0, g - 1)
        np.add.at(hist, (ty, tx), 1)
        return hist.max() / hist.sum()

    shares_low = np.mean([top_share(0.6, s) for s in range(5)])
    shares_high = np.mean([top_share(1.6, s) for s in range(5)])
    assert shares_high > shares_low


def test_scale_identity_and_doubling():
    spec = small_spec()
    assert workloads.scale(spec, 1) is spec
    doubled = workloads.scale(workloads.WorkloadSpec(preset="de-detr"), 2)
    assert doubled.num_queries == 200
    quad = workloads.scale(small_spec(levels=((32, 32), (16, 16))), 4)
    pyr, _ = workloads.generate(quad)
    assert pyr.total_pixels == 4 * (32 * 32 + 16 * 16)


def test_scale_capacity_guard():
    spec = small_spec(levels=((1024, 1024),))
    with pytest.raises(ConfigError):
        workloads.scale(spec, 16)


def test_spec_json_roundtrip():
    spec = small_spec(skew=workloads.SkewSpec(kind="zipf", zipf_s=1.4))
    text = workloads.spec_to_json(spec)
    back = workloads.spec_from_json(text)
    assert back == spec
    with pytest.raises(ConfigError):
        workloads.spec_from_json("{}")


def test_fixture_roundtrip_through_binary_container(tmp_path):
    pyr, w = workloads.generate(small_spec())
    path = tmp_path / "fixture.dmwl"
    workload_io.save_workload(path, pyr, w)
    pyr2, w2 = workload_io.read_workload(path)
    assert np.array_equal(w.queries, w2.queries)
    assert np.array_equal(w.ref_points, w2.ref_points)
    for a, b in zip(pyr.levels, pyr2.levels):
        assert np.array_equal(a.pixels, b.pixels)


def test_fixture_text_roundtrip():
    spec = small_spec(queries=3, levels=((4, 4),), d=4, heads=2,
                      points_per_level=1)
    pyr, w = workloads.generate(spec)
    text = workload_io.workload_to_text(pyr, w)
    pyr2, w2 = workload_io.workload_from_text(text)
    assert np.array_equal(w.queries, w2.queries)
    assert np.array_equal(pyr.levels[0].pixels, pyr2.levels[0].pixels)


def test_corrupt_container_rejected():
    pyr, w = workloads.generate(small_spec(queries=3, levels=((4, 4),), d=4))
    blob = workload_io.dump_workload(pyr, w)
    with pytest.raises(ConfigError):
        workload_io.load_workload(blob[:40])
    with pytest.raises(ConfigError):
        workload_io.load_workload(b"XXXX" + blob[4:])
    with pytest.raises(ConfigError):
        workload_io.load_workload(blob + b"\x00\x00\x00\x00")
