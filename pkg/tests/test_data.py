import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spar.data import (AugmentParams, CohortSpec, PatientCase, SlicePool, Volume, VolumeFormatError, affine_pair,
                       augment, cohort_hash, generate_cohort, load_cohort, load_volume, one_hot, save_cohort,
                       save_volume)


@pytest.fixture(scope="module")
def desk_cohort():
    return generate_cohort(CohortSpec(n_patients=6, slice_size=64, depth=32, seed=0))


def test_same_seed_gives_identical_bytes():
    a = generate_cohort(CohortSpec(n_patients=2, seed=7))
    b = generate_cohort(CohortSpec(n_patients=2, seed=7))
    for x, y in zip(a, b):
        assert x.image.payload() == y.image.payload() and x.mask.payload() == y.mask.payload()
    assert cohort_hash(a) == cohort_hash(b)
    assert cohort_hash(a) != cohort_hash(generate_cohort(CohortSpec(n_patients=2, seed=8)))


def test_desk_cohort_has_every_label(desk_cohort):
    assert len(desk_cohort) == 6
    for case in desk_cohort:
        assert set(np.unique(case.mask.data)) == {0, 1, 2, 3}
        assert case.image.data.shape == (32, 64, 64)
        assert case.image.data.dtype == np.float32 and case.mask.data.dtype == np.uint8
        assert 0.0 <= case.image.data.min() and case.image.data.max() <= 1.0
        counts = np.bincount(case.mask.data.ravel(), minlength=4)
        assert np.all(counts[1:] >= 0.005 * case.mask.data.size)


def test_structures_do_not_touch(desk_cohort):
    from scipy import ndimage
    for case in desk_cohort:
        m = case.mask.data
        for k in (1, 2, 3):
            grown = ndimage.binary_dilation(m == k, structure=np.ones((3, 3, 3), dtype=bool))
            assert not np.any(grown & (m > 0) & (m != k))


def test_zero_noise_intensity_spread_is_bounded_by_bias_field():
    spec = CohortSpec(n_patients=2, noise_sigma=0.0, bias_field_strength=0.08, seed=3)
    for case in generate_cohort(spec):
        for k in range(4):
            vals = case.image.data[case.mask.data == k].astype(np.float64)
            assert vals.var() <= spec.bias_field_strength ** 2
            assert vals.max() - vals.min() <= 2 * spec.bias_field_strength + 1e-6


def test_invalid_spec_is_rejected():
    for bad in (dict(slice_size=60), dict(n_patients=1), dict(depth=2), dict(noise_sigma=-1.0),
                dict(n_structures=0)):
        with pytest.raises(ValueError):
            generate_cohort(CohortSpec(**bad))


def test_impossible_placement_fails():
    with pytest.raises(RuntimeError):
        generate_cohort(CohortSpec(n_patients=2, slice_size=16, depth=4, n_structures=12, max_retries=5))


def test_one_hot_examples():
    assert one_hot(np.array([[2]]), 4)[:, 0, 0].tolist() == [0, 0, 1, 0]
    oh = one_hot(np.zeros((2, 2), dtype=np.uint8), 2)
    assert oh.shape == (2, 2, 2) and oh[0].all() and not oh[1].any()
    with pytest.raises(ValueError):
        one_hot(np.array([[4]]), 4)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, max_side=9), elements=st.integers(0, 5)))
def test_one_hot_round_trip(grid):
    oh = one_hot(grid, 6)
    assert np.all(oh.sum(0) == 1)
    assert np.array_equal(oh.argmax(0), grid)


def _slice_pair(rng, n=24):
    img = rng.random((n, n)).astype(np.float32)
    mask = np.zeros((n, n), dtype=np.uint8)
    mask[4:12, 5:15] = 1
    mask[14:20, 3:9] = 3
    return img, mask


def test_zero_augmentation_is_identity():
    img, mask = _slice_pair(np.random.default_rng(0))
    out_img, out_mask = augment(img, mask, AugmentParams(0, 0, 0), np.random.default_rng(1))
    assert np.array_equal(out_mask, mask)
    assert np.allclose(out_img, img, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.8, 1.2), st.floats(-45, 45), st.floats(-5, 5), st.floats(-5, 5))
def test_augmented_mask_keeps_only_input_labels(scale, angle, dy, dx):
    img, mask = _slice_pair(np.random.default_rng(0))
    _, out = affine_pair(img, mask, scale, angle, (dy, dx))
    assert set(np.unique(out)) <= set(np.unique(mask)) | {0}


def test_ninety_degree_rotation_matches_index_rotation():
    img, mask = _slice_pair(np.random.default_rng(2))
    out_img, out_mask = affine_pair(img, mask, 1.0, 90.0)
    # counter-clockwise as displayed
    assert np.array_equal(out_mask, np.rot90(mask, 1))
    assert np.allclose(out_img, np.rot90(img, 1), atol=1e-5)
    _, back = affine_pair(img, mask, 1.0, -90.0)
    assert np.array_equal(back, np.rot90(mask, -1))


def test_integer_shift_moves_content():
    img, mask = _slice_pair(np.random.default_rng(3))
    _, out = affine_pair(img, mask, 1.0, 0.0, (2, -3))
    expect = np.zeros_like(mask)
    expect[2:, :-3] = mask[:-2, 3:]
    assert np.array_equal(out, expect)


def test_augment_shape_mismatch():
    with pytest.raises(ValueError):
        affine_pair(np.zeros((4, 4)), np.zeros((4, 5)))


def test_volume_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.random((3, 4, 5)).astype(np.float32), (0.5, 0.7, 2.0))
    save_volume(v, tmp_path / "v")
    w = load_volume(tmp_path / "v")
    assert w.data.tobytes() == v.data.tobytes() and w.spacing_mm == v.spacing_mm and w.kind == "f32"
    header = json.loads((tmp_path / "v" / "header.json").read_text())
    assert header == {"width": 5, "height": 4, "depth": 3, "spacing_mm": [0.5, 0.7, 2.0], "dtype": "f32",
                      "classes": 0}


def test_volume_errors(tmp_path):
    v = Volume(np.zeros((2, 2, 2), dtype=np.uint8), kind="u8", classes=2)
    save_volume(v, tmp_path / "v")
    header = json.loads((tmp_path / "v" / "header.json").read_text())

    (tmp_path / "v" / "header.json").write_text(json.dumps(dict(header, depth=3)))
    with pytest.raises(VolumeFormatError, match="payload"):
        load_volume(tmp_path / "v")
    (tmp_path / "v" / "header.json").write_text(json.dumps(dict(header, dtype="f64")))
    with pytest.raises(VolumeFormatError, match="dtype"):
        load_volume(tmp_path / "v")
    (tmp_path / "v" / "header.json").write_text("{not json")
    with pytest.raises(VolumeFormatError, match="header"):
        load_volume(tmp_path / "v")
    (tmp_path / "v" / "header.json").write_text(json.dumps({"width": 2}))
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "v")


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), 1.5))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), 3), kind="u8", classes=3)
    with pytest.raises(ValueError):
        PatientCase("x", Volume(np.zeros((2, 2, 2))), Volume(np.zeros((2, 2, 3)), kind="u8"))


def test_cohort_round_trip(tmp_path):
    cases = generate_cohort(CohortSpec(n_patients=2, slice_size=16, depth=4, seed=1))
    save_cohort(cases, tmp_path)
    back = load_cohort(tmp_path)
    assert [c.case_id for c in back] == ["000", "001"]
    assert cohort_hash(back) == cohort_hash(cases)
    with pytest.raises(FileNotFoundError):
        load_cohort(tmp_path / "nothing")


def test_slice_batches_cover_pool_without_replacement():
    cases = generate_cohort(CohortSpec(n_patients=2, slice_size=16, depth=5, seed=1))
    pool = SlicePool.from_cases(cases)
    assert len(pool) == 10 and pool.index[5] == ("001", 0)
    seen = []
    for imgs, msks in pool.batches(4, np.random.default_rng(0)):
        assert imgs.shape[1:] == (16, 16) and len(imgs) == len(msks)
        seen += [im.tobytes() for im in imgs]
    assert len(seen) == 10 and len(set(seen)) == 10
    # 10 slices in batches of 3 leave a single slice, which is dropped
    sizes = [len(b[0]) for b in pool.batches(3, np.random.default_rng(0))]
    assert sizes == [3, 3, 3]
