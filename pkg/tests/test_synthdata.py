"""Scene generation, domain transforms, crop sampling, file formats."""

import numpy as np
import pytest

from mmdlora.errors import CheckpointError, ConfigError, ContractError
from mmdlora.synthdata import (
    DOMAIN_CHAINS,
    SceneParams,
    apply_domain,
    gen_scene,
    load_sample,
    read_manifest,
    sample_crops,
    save_sample,
    scene_at,
    write_manifest,
)
from mmdlora.tensor import SeededRng


@pytest.fixture
def params():
    return SceneParams()


def test_same_seed_identical_sample(params):
    a = gen_scene(SeededRng(42), params)
    b = gen_scene(SeededRng(42), params)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.depth.tobytes() == b.depth.tobytes()
    c = gen_scene(SeededRng(43), params)
    assert a.image.tobytes() != c.image.tobytes()


def test_zero_rects_gives_monotone_background():
    params = SceneParams(rect_count=(0, 0))
    s = gen_scene(SeededRng(1), params)
    col = s.depth[:, 0]
    assert np.all(np.diff(col) < 0)  # far at the top, near at the bottom
    assert np.array_equal(s.depth, np.tile(col[:, None], (1, params.width)))


def test_depth_within_range(params):
    for seed in range(5):
        s = gen_scene(SeededRng(seed), params)
        assert s.depth.min() >= params.min_depth
        assert s.depth.max() <= params.max_depth
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_domain_transforms_never_touch_depth(params):
    s = gen_scene(SeededRng(2), params)
    for domain in DOMAIN_CHAINS:
        out = apply_domain(s, domain, params)
        assert out.depth.tobytes() == s.depth.tobytes()
        assert out.domain == domain


def test_day_clear_transform_is_identity(params):
    s = gen_scene(SeededRng(3), params)
    out = apply_domain(s, "day-clear", params)
    assert np.array_equal(out.image, s.image)


def test_unknown_domain_rejected(params):
    s = gen_scene(SeededRng(4), params)
    with pytest.raises(ConfigError, match="sandstorm"):
        apply_domain(s, "sandstorm", params)


def test_apply_domain_requires_day_clear_input(params):
    s = gen_scene(SeededRng(5), params)
    night = apply_domain(s, "night", params)
    with pytest.raises(ContractError):
        apply_domain(night, "rain", params)


def test_night_mean_intensity_scales_by_gamma(params):
    # measured on pixels far from the clamp boundaries, where truncation
    # cannot bias the mean
    s = gen_scene(SeededRng(6), params)
    night = apply_domain(s, "night", params)
    safe = (s.image * params.night_gamma > 5 * params.night_noise) & (
        s.image * params.night_gamma < 1.0 - 5 * params.night_noise
    )
    assert safe.sum() > 1000
    got = night.image[safe].mean()
    want = params.night_gamma * s.image[safe].mean()
    assert got == pytest.approx(want, abs=0.01)


def test_night_transform_deterministic_per_sample(params):
    s = gen_scene(SeededRng(7), params)
    a = apply_domain(s, "night", params)
    b = apply_domain(s, "night", params)
    assert a.image.tobytes() == b.image.tobytes()


def test_rain_night_composition_differs_from_parts(params):
    s = gen_scene(SeededRng(8), params)
    rn = apply_domain(s, "rain-night", params)
    night = apply_domain(s, "night", params)
    rain = apply_domain(s, "rain", params)
    assert rn.image.tobytes() != night.image.tobytes()
    assert rn.image.tobytes() != rain.image.tobytes()
    # night dims first, so the composition is darker than rain alone
    assert rn.image.mean() < rain.image.mean()


def test_sample_crops_full_size_equals_image(params):
    s = gen_scene(SeededRng(9), params)
    cb = sample_crops(SeededRng(1), s, 1, params.height, params.width)
    assert np.array_equal(cb.crops[0], s.image)
    assert np.array_equal(cb.depth_crops[0], s.depth)
    assert cb.origins == [(0, 0)]


def test_crop_origins_within_bounds_and_reproducible(params):
    s = gen_scene(SeededRng(10), params)
    a = sample_crops(SeededRng(11), s, 20, 16, 16)
    b = sample_crops(SeededRng(11), s, 20, 16, 16)
    assert a.origins == b.origins
    for oy, ox in a.origins:
        assert 0 <= oy <= params.height - 16
        assert 0 <= ox <= params.width - 16


def test_crop_alignment_with_source(params):
    s = gen_scene(SeededRng(12), params)
    cb = sample_crops(SeededRng(13), s, 5, 16, 16)
    probe = SeededRng(14)
    for i, (oy, ox) in enumerate(cb.origins):
        for _ in range(10):
            y = int(probe.integers(0, 16))
            x = int(probe.integers(0, 16))
            assert cb.crops[i, y, x, 0] == s.image[oy + y, ox + x, 0]
            assert cb.depth_crops[i, y, x] == s.depth[oy + y, ox + x]


def test_crop_larger_than_image_rejected(params):
    s = gen_scene(SeededRng(15), params)
    with pytest.raises(ContractError):
        sample_crops(SeededRng(0), s, 1, params.height + 1, 16)


def test_scene_at_is_index_stable(params):
    a = scene_at(params, 7, "train", 3)
    b = scene_at(params, 7, "train", 3)
    c = scene_at(params, 7, "train", 4)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.image.tobytes() != c.image.tobytes()


def test_manifest_roundtrip(tmp_path):
    records = [
        {"seed": 1, "domain": "day-clear", "split": "train"},
        {"seed": 2, "domain": "night", "split": "eval"},
    ]
    path = tmp_path / "manifest.jsonl"
    write_manifest(path, records)
    assert read_manifest(path) == records


def test_sample_dump_roundtrip(tmp_path, params):
    s = gen_scene(SeededRng(16), params)
    path = tmp_path / "scene.bin"
    save_sample(path, s)
    loaded = load_sample(path)
    assert loaded.domain == s.domain
    assert loaded.seed == s.seed
    assert loaded.image.tobytes() == s.image.tobytes()
    assert loaded.depth.tobytes() == s.depth.tobytes()


def test_sample_dump_truncation_detected(tmp_path, params):
    s = gen_scene(SeededRng(17), params)
    path = tmp_path / "scene.bin"
    save_sample(path, s)
    raw = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="bytes"):
        load_sample(tmp_path / "short.bin")


def test_scene_params_validation():
    with pytest.raises(ConfigError):
        SceneParams(min_depth=5.0, max_depth=2.0).validate()
    with pytest.raises(ConfigError):
        SceneParams(rect_count=(4, 2)).validate()
