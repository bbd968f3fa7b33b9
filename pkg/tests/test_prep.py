import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempxcnn.phantom import PhantomConfig, render_slice
from tempxcnn.prep import (SENTINEL, DatasetSplit, DegenerateImageError, ImageSlice, PrepStats, Sample,
                           apply_translation, balance_csv, build_samples, class_balance_report,
                           crop_center, difference_image, expand_image, first_week_difference,
                           format_balance, load_split, max_dims, ncc_surface, pair_slices, partition,
                           register_translation, save_split, select_reference)
from tempxcnn.tensor import SeededRng


def img(pixels, mouse="wild00", group="wild", week=0, k=0):
    return ImageSlice(np.asarray(pixels, dtype=np.float32), mouse, group, week, k)


def textured(seed, h=48, w=64):
    g = np.random.default_rng(seed)
    base = g.normal(size=(h // 4, w // 4))
    return np.kron(base, np.ones((4, 4))) + 0.3 * g.normal(size=(h, w)) + 5.0


# -- expansion ---------------------------------------------------------------------------

def test_expand_hand_oracle():
    src = np.array([[5, 6, 7], [8, 9, 10]], dtype=np.float32)
    out = expand_image(img(src), 4, 5).pixels
    want = np.full((4, 5), 5, np.float32)
    want[1:3, 1:4] = src
    np.testing.assert_array_equal(out, want)


def test_expand_same_dims_unchanged():
    src = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(expand_image(img(src), 3, 4).pixels, src)


def test_expand_target_too_small():
    with pytest.raises(ValueError, match="smaller"):
        expand_image(img(np.zeros((4, 4))), 3, 5)


def test_expand_to_dataset_scale_targets():
    out = expand_image(img(np.ones((450, 600))), 501, 763).pixels
    assert out.shape == (501, 763)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 6), st.integers(0, 6))
def test_expand_then_crop_roundtrip(h, w, dh, dw):
    src = np.random.default_rng(h * 100 + w).normal(size=(h, w)).astype(np.float32)
    out = expand_image(img(src), h + dh, w + dw).pixels
    np.testing.assert_array_equal(crop_center(out, h, w), src)
    assert out.min() == src.min()


def test_max_dims_examples():
    assert max_dims([img(np.zeros((3, 7)))]) == (3, 7)
    assert max_dims([img(np.zeros((400, 700))), img(np.zeros((500, 500)))]) == (500, 700)
    with pytest.raises(ValueError):
        max_dims([])


# -- registration --------------------------------------------------------------------------

def test_register_identical_is_zero():
    a = textured(0)
    assert register_translation(a, a) == (0, 0)


def test_register_constructed_shift():
    a = textured(1)
    assert register_translation(a, apply_translation(a, 3, -2)) == (3, -2)


def test_register_with_one_percent_noise():
    a = textured(2)
    moved = apply_translation(a, 3, -2)
    g = np.random.default_rng(3)
    hits = sum(register_translation(a, moved + 0.01 * np.ptp(a) * g.normal(size=a.shape)) == (3, -2)
               for _ in range(20))
    assert hits == 20


def test_register_phantom_slice_shift():
    s = render_slice(PhantomConfig(noise_sigma=0.0), "pth", 0, 5, 3)
    px = s.pixels.astype(np.float64)
    assert register_translation(px, apply_translation(px, -4, 6)) == (-4, 6)


@settings(max_examples=25, deadline=None)
@given(st.integers(-8, 8), st.integers(-8, 8), st.integers(0, 1000))
def test_register_shift_equivariance(dr, dc, seed):
    a = textured(seed, 40, 40)
    assert register_translation(a, apply_translation(a, dr, dc), max_shift=10) == (dr, dc)


def test_ncc_surface_matches_brute_force():
    g = np.random.default_rng(4)
    ref, mov = g.normal(size=(9, 11)), g.normal(size=(9, 11))
    m = 3
    score = ncc_surface(ref, mov, m)
    for dr in range(-m, m + 1):
        for dc in range(-m, m + 1):
            r = ref[max(0, -dr):9 - max(0, dr), max(0, -dc):11 - max(0, dc)]
            v = mov[max(0, dr):9 - max(0, -dr), max(0, dc):11 - max(0, -dc)]
            want = np.corrcoef(r.ravel(), v.ravel())[0, 1]
            assert abs(score[dr + m, dc + m] - want) < 1e-9


def test_register_tie_prefers_small_shift():
    # a periodic stripe pattern matches at every multiple of the period
    a = np.tile([0.0, 0.0, 1.0, 1.0], (12, 4))
    assert register_translation(a, a, max_shift=5) == (0, 0)


def test_register_degenerate_raises():
    with pytest.raises(DegenerateImageError):
        register_translation(np.ones((10, 10)), np.ones((10, 10)), 3)


def test_register_dim_mismatch():
    with pytest.raises(ValueError):
        register_translation(np.zeros((5, 5)), np.zeros((5, 6)), 2)


# -- translation -----------------------------------------------------------------------------

def test_translate_zero_is_identity():
    a = textured(5)
    np.testing.assert_array_equal(apply_translation(a, 0, 0), a)


def test_translate_grid_down_one():
    grid = np.arange(1.0, 10.0).reshape(3, 3)
    np.testing.assert_array_equal(apply_translation(grid, 1, 0, fill=0),
                                  [[0, 0, 0], [1, 2, 3], [4, 5, 6]])


def test_translate_default_fill_is_minimum():
    grid = np.arange(1.0, 10.0).reshape(3, 3)
    assert np.all(apply_translation(grid, 0, -1)[:, -1] == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(-4, 4), st.integers(-4, 4))
def test_translate_inverse_away_from_border(dr, dc):
    a = textured(6, 16, 20)
    back = apply_translation(apply_translation(a, dr, dc), -dr, -dc)
    inner = (slice(abs(dr), 16 - abs(dr)), slice(abs(dc), 20 - abs(dc)))
    np.testing.assert_array_equal(back[inner], a[inner])


# -- differencing -----------------------------------------------------------------------------

def test_difference_of_identical_is_zero():
    a = img(textured(7), week=1)
    d = difference_image(a, img(textured(7), week=0))
    assert d.translation == (0, 0)
    assert not d.pixels.any()


def test_difference_uniform_offset():
    base = textured(8)
    d = difference_image(img(base + 10, week=3), img(base, week=1))
    np.testing.assert_allclose(d.pixels, 10, atol=1e-4)


def test_difference_recovers_shift_and_matches_oracle():
    ref = textured(9)
    comp = apply_translation(ref, 2, 3) * 1.1
    d = difference_image(img(comp, week=4), img(ref, week=0))
    assert d.translation == (-2, -3) or d.translation == (2, 3)
    aligned = apply_translation(ref.astype(np.float32), 2, 3)
    np.testing.assert_allclose(d.pixels, comp.astype(np.float32) - aligned, rtol=1e-6)


def test_difference_antisymmetric_at_zero_shift():
    g = np.random.default_rng(10)
    a, b = textured(11), textured(11) + 0.2 * g.normal(size=(48, 64))
    dab = difference_image(img(a, week=2), img(b, week=2))
    dba = difference_image(img(b, week=2), img(a, week=2))
    assert dab.translation == dba.translation == (0, 0)
    np.testing.assert_array_equal(dab.pixels, -dba.pixels)


def test_difference_errors():
    a = img(textured(12), week=2)
    with pytest.raises(ValueError, match="mouse"):
        difference_image(a, img(textured(12), mouse="wild01", week=0))
    with pytest.raises(ValueError, match="dim"):
        difference_image(a, img(np.zeros((10, 10)), week=0))
    with pytest.raises(ValueError, match="follow"):
        difference_image(img(textured(12), week=1), img(textured(12), week=3))


def test_difference_degenerate_falls_back_to_zero_shift():
    d = difference_image(img(np.full((8, 8), 4.0), week=1), img(np.full((8, 8), 1.0), week=0))
    assert d.translation == (0, 0)
    assert np.all(d.pixels == 3.0)


@pytest.mark.parametrize("minimum", [0.0, 12.0])
def test_first_week_difference(minimum):
    px = textured(13) - textured(13).min() + minimum
    d = first_week_difference(img(px))
    assert d.is_sentinel
    assert np.all(d.pixels == np.float32(minimum))


def test_first_week_constant_image():
    assert np.all(first_week_difference(img(np.full((4, 4), 7.0))).pixels == 7.0)


# -- reference selection and pairing --------------------------------------------------------

def test_select_reference_examples():
    series = [0, 1, 3, 4]
    assert select_reference(series, 3, "relative") == 1
    assert select_reference(series, 4, "absolute") == 0
    assert select_reference(series, 0, "relative") is SENTINEL
    assert select_reference(series, 0, "abs") is SENTINEL
    with pytest.raises(ValueError):
        select_reference(series, 2, "relative")


def test_absolute_reference_constant_relative_increasing():
    series = list(range(9))
    abs_refs = [select_reference(series, t, "absolute") for t in series[1:]]
    rel_refs = [select_reference(series, t, "relative") for t in series[1:]]
    assert set(abs_refs) == {0}
    assert rel_refs == sorted(set(rel_refs)) and rel_refs == series[:-1]


def test_pairing_min_length():
    ref = [img(np.zeros((2, 2)), k=k) for k in range(1200)]
    comp = [img(np.zeros((2, 2)), week=1, k=k) for k in range(1300)]
    pairs, unused = pair_slices(ref, comp)
    assert len(pairs) == 1200 and unused == 100
    assert all(r.slice_index == c.slice_index for r, c in pairs)
    assert pair_slices(ref[:5], comp[:5])[1] == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 30), st.integers(0, 30))
def test_pairing_property(a, b):
    pairs, unused = pair_slices(list(range(a)), list(range(b)))
    assert len(pairs) == min(a, b) and unused == abs(a - b)


# -- samples and partition --------------------------------------------------------------------

def small_series():
    cfg = PhantomConfig(mice_per_group=3, slices_per_week=(3, 5), seed=4)
    from tempxcnn.phantom import iter_slices
    return cfg, list(iter_slices(cfg))


def test_build_samples_sorted_with_both_modes():
    _, slices = small_series()
    stats = PrepStats()
    samples = build_samples(slices, ("abs", "rel"), stats=stats)
    keys = [s.key for s in samples]
    assert keys == sorted(keys)
    assert all(set(s.differences) == {"absolute", "relative"} for s in samples)
    assert stats.images == len(slices)
    assert len(samples) + stats.unused == len(slices)
    h, w = max_dims(slices)
    assert all(s.image.shape == (h, w) for s in samples)


def test_build_samples_first_week_is_uniform():
    _, slices = small_series()
    for s in build_samples(slices, ("abs",)):
        if s.week == 0:
            d = s.differences["absolute"]
            assert np.all(d == s.image.min())


def test_build_samples_pairs_by_index_within_mouse():
    _, slices = small_series()
    samples = build_samples(slices, ("rel",))
    counts = {}
    for s in slices:
        counts[(s.mouse_id, s.week)] = counts.get((s.mouse_id, s.week), 0) + 1
    for s in samples:
        if s.week > 0:
            prev = max(w for (m, w) in counts if m == s.mouse_id and w < s.week)
            assert s.slice_index < counts[(s.mouse_id, prev)]


def fake_samples(mice_per_group=5, per_mouse=20):
    out = []
    for g, group in enumerate(("wild", "pth")):
        for m in range(mice_per_group):
            for k in range(per_mouse):
                out.append(Sample(np.full((2, 2), float(k), np.float32), g, f"{group}{m:02d}", group,
                                  k % 4, k))
    return out


def test_partition_holds_out_one_mouse_per_group():
    samples = fake_samples()
    split = partition(samples, SeededRng(0))
    assert set(split.held_out_mice) == {"wild", "pth"}
    test_mice = {s.mouse_id for s in split.test}
    assert test_mice == set(split.held_out_mice.values())
    other = {s.mouse_id for s in split.train + split.validation}
    assert not test_mice & other
    assert len(split.test) == 40


def test_partition_is_a_true_partition():
    samples = fake_samples()
    split = partition(samples, SeededRng(1))
    ids = [id(s) for part in split.parts().values() for s in part]
    assert len(ids) == len(set(ids)) == len(samples)


def test_partition_90_10():
    samples = fake_samples(mice_per_group=6, per_mouse=100)  # 1000 remain after hold-out
    split = partition(samples, SeededRng(2))
    assert len(split.train) == 900 and len(split.validation) == 100


def test_partition_validation_keeps_class_ratio():
    samples = fake_samples(mice_per_group=4, per_mouse=43)  # 129 per class remain
    for seed in range(5):
        split = partition(samples, SeededRng(seed))
        val = [s.group for s in split.validation]
        assert val.count("wild") == val.count("pth") == 13
        assert len(split.train) == 2 * 116


def test_partition_deterministic():
    a = partition(fake_samples(), SeededRng(3))
    b = partition(fake_samples(), SeededRng(3))
    assert [s.key for s in a.train] == [s.key for s in b.train]
    assert a.held_out_mice == b.held_out_mice


def test_partition_needs_two_mice():
    with pytest.raises(ValueError, match="need >= 2"):
        partition(fake_samples(mice_per_group=1), SeededRng(0))


def test_intensity_scale_from_training_split():
    split = partition(fake_samples(), SeededRng(0))
    assert split.intensity_scale == max(s.image.max() for s in split.train)


# -- class balance ------------------------------------------------------------------------------

def split_with(counts):
    parts = {}
    for name, (wild, pth) in counts.items():
        parts[name] = [Sample(np.zeros((1, 1)), 0, "w", "wild", 0, i) for i in range(wild)] + \
                      [Sample(np.zeros((1, 1)), 1, "p", "pth", 0, i) for i in range(pth)]
    return DatasetSplit(parts["train"], parts["validation"], parts["test"], {})


def test_balance_perfect():
    rows = class_balance_report(split_with({"train": (50, 50), "validation": (5, 5), "test": (8, 8)}))
    assert all(r.percent("wild") == 50.0 and r.percent("pth") == 50.0 for r in rows)


def test_balance_49_51():
    rows = class_balance_report(split_with({"train": (49, 51), "validation": (1, 0), "test": (0, 2)}))
    assert rows[0].percent("wild") == 49.0 and rows[0].percent("pth") == 51.0 and rows[0].total == 100
    text = format_balance(rows, "demo")
    assert "49.00" in text and "51.00" in text
    csv_text = balance_csv(rows)
    assert csv_text.splitlines()[1] == "train,49.00,51.00,49,51,100"


def test_balance_on_phantom_sums_to_100():
    _, slices = small_series()
    split = partition(build_samples(slices, ("abs",)), SeededRng(0))
    for r in class_balance_report(split):
        assert abs(r.percent("wild") + r.percent("pth") - 100) < 0.01
        assert r.counts == {g: sum(s.group == g for s in split.parts()[r.split]) for g in ("wild", "pth")}


# -- persistence --------------------------------------------------------------------------------

def test_split_roundtrip(tmp_path):
    _, slices = small_series()
    split = partition(build_samples(slices, ("abs", "rel")), SeededRng(0))
    split.timestamps = False
    save_split(split, tmp_path / "s.npz")
    back = load_split(tmp_path / "s.npz")
    assert back.held_out_mice == split.held_out_mice
    assert back.intensity_scale == split.intensity_scale
    assert back.timestamps is False
    assert back.modes == ("absolute", "relative")
    for a, b in zip(split.train, back.train):
        assert a.key == b.key and a.label == b.label
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.differences["relative"], b.differences["relative"])
