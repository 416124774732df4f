from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import truncnorm

from microcaps import posemeasure as pm
from microcaps import synthgen as sg
from microcaps.geometry import GRID_CENTER, ROTATION_ORDER, ROTATION_STATS, Ring, RotationLabel, ring_of


@pytest.fixture(scope="module")
def library():
    return sg.make_board_library(8, 0)


@pytest.fixture(scope="module")
def tiny_samples():
    return sg.generate_dataset(sg.make_board_library(2, 5), out_size=16, rng_seed=3)


def raised(board, height=0.5):
    """Flatten ``board`` and lift its largest part to ``height``; returns (board, index)."""
    flat = board.flattened()
    i = max(range(len(flat.components)), key=lambda k: flat.components[k].w * flat.components[k].h)
    comps = list(flat.components)
    comps[i] = replace(comps[i], height=height)
    return replace(flat, components=tuple(comps)), i


# -- library -------------------------------------------------------------------


def test_library_size_and_confusable_pair():
    lib = sg.make_board_library(13, 0)
    assert [b.class_id for b in lib] == list(range(13))
    groups = Counter(b.layout_id for b in lib)
    shared = [lid for lid, n in groups.items() if n > 1]
    assert shared
    for lid in shared:
        members = [b for b in lib if b.layout_id == lid]
        a, b = members[0], members[1]
        assert [(c.x, c.y, c.w, c.h) for c in a.components] == [(c.x, c.y, c.w, c.h) for c in b.components]
        assert a.components != b.components


def test_variants_repaint_only_a_few_parts(library):
    a, b = library[0], library[1]
    assert a.layout_id == b.layout_id == 0
    changed = sum(x.color != y.color for x, y in zip(a.components, b.components))
    assert changed == sg.VARIANT_REPAINTS


def test_library_is_deterministic():
    assert sg.make_board_library(5, 42) == sg.make_board_library(5, 42)
    assert sg.make_board_library(5, 42) != sg.make_board_library(5, 43)


def test_library_bounds_sweep():
    for seed in range(1000):
        for board in sg.make_board_library(3, seed):
            assert board.in_bounds()


def test_library_needs_two_classes():
    with pytest.raises(ValueError):
        sg.make_board_library(1)


# -- camera and rendering -------------------------------------------------------


def test_centre_has_no_parallax():
    for theta in (0.0, 17.0, -21.0):
        assert np.array_equal(sg.parallax_shift((GRID_CENTER, GRID_CENTER), theta, 0.5), [0.0, 0.0])


def test_parallax_grows_with_height_and_offset():
    near = np.linalg.norm(sg.parallax_shift((1, 2), 0.0, 0.5))
    far = np.linalg.norm(sg.parallax_shift((0, 2), 0.0, 0.5))
    assert far == pytest.approx(2 * near)
    assert np.linalg.norm(sg.parallax_shift((0, 2), 0.0, 0.25)) == pytest.approx(far / 2)


def test_centre_view_is_affine():
    assert sg.plane_homography((GRID_CENTER, GRID_CENTER), 8.0, 64).is_affine
    assert not sg.plane_homography((0, 0), 8.0, 64).is_affine


def test_render_range_and_lattice(library):
    img = sg.render(library[0], sg.SceneParams((0, 3), RotationLabel.LEFT_WIDE, 21.0), 64)
    assert img.shape == (64, 64, 3) and img.dtype == np.float32
    assert img.min() >= 0 and img.max() <= 1
    np.testing.assert_allclose(img * 255, np.round(img * 255), atol=1e-4)


def test_render_is_pure(library):
    scene = sg.SceneParams((4, 1), RotationLabel.RIGHT_SHALLOW, -10.0, 7, 99)
    assert np.array_equal(sg.render(library[2], scene, 32), sg.render(library[2], scene, 32))


def test_sensor_noise_is_optional(library):
    clean = sg.render(library[0], sg.SceneParams(), 32)
    noisy = sg.render(library[0], sg.SceneParams(sensor_seed=4), 32)
    diff = np.abs(noisy - clean).mean()
    assert 0.5 * sg.SENSOR_NOISE < diff < 1.5 * sg.SENSOR_NOISE


def test_board_outside_frame(library):
    big = replace(library[0], board_size=(6.0, 6.0))
    with pytest.raises(sg.FieldOfViewError):
        sg.render(big, sg.SceneParams(), 32)


def test_bad_grid_position():
    with pytest.raises(ValueError):
        sg.SceneParams((5, 2))


@pytest.mark.parametrize("cell", [(0, 0), (1, 2), (4, 3), (2, 4)])
def test_flat_board_is_a_homography_of_the_neutral_view(library, cell):
    res = sg.planarity_residual(library[3].flattened(), cell, 6.0, 128)
    assert res[2:-2, 2:-2].mean() <= 2 / 255


def test_raised_part_breaks_planarity(library):
    board, i = raised(library[0])
    res = sg.planarity_residual(board, (0, 4), 0.0, 128)
    window = sg.component_window(board, i, (0, 4), 0.0, 128)
    assert res[window].mean() > 5 / 255


def test_expected_ratio_matches_measurement(library):
    flat = library[4].flattened()
    for cell in [(0, 2), (1, 1), (3, 2), (4, 4)]:
        for theta in (0.0, -12.0):
            img = sg.render(flat, sg.SceneParams(cell, RotationLabel.NEUTRAL, theta), 128)
            expect = sg.expected_ratio(sg.plane_homography(cell, theta, 128), flat.board_size)
            assert pm.measure_perspective_ratio(img) == pytest.approx(expect, abs=0.01)


def test_expected_ratio_sign_by_row():
    h_top = sg.plane_homography((0, 2), 0.0, 64)
    h_bottom = sg.plane_homography((4, 2), 0.0, 64)
    h_mid = sg.plane_homography((2, 2), 0.0, 64)
    size = (2.5, 3.5)
    assert sg.expected_ratio(h_top, size) > 0 > sg.expected_ratio(h_bottom, size)
    assert sg.expected_ratio(h_mid, size) == pytest.approx(0.0, abs=1e-12)


# -- placement angles ----------------------------------------------------------------


def test_rotation_bands_are_ordered():
    b = sg.rotation_bands()
    n_lo, n_hi = b[RotationLabel.NEUTRAL]
    assert n_lo < 0 < n_hi
    assert n_hi <= b[RotationLabel.LEFT_SHALLOW][0] < b[RotationLabel.LEFT_SHALLOW][1] <= b[RotationLabel.LEFT_WIDE][0]
    assert -n_lo <= b[RotationLabel.RIGHT_SHALLOW][0] < b[RotationLabel.RIGHT_SHALLOW][1] <= b[RotationLabel.RIGHT_WIDE][0]


@pytest.mark.parametrize("label", list(RotationLabel))
def test_sample_theta_follows_label(label):
    rng = np.random.default_rng(11)
    draws = np.array([sg.sample_theta(label, rng) for _ in range(4000)])
    lo, hi = sg.rotation_bands()[label]
    if label is RotationLabel.NEUTRAL:
        assert draws.min() >= lo and draws.max() <= hi
    else:
        sign = np.sign(draws)
        assert np.all(sign == sign[0])
        assert np.all((np.abs(draws) >= lo) & (np.abs(draws) <= hi))
    # oracle: exact mean |theta| of the truncated normal
    if label is RotationLabel.NEUTRAL:
        mu, sd, a, b = 0.0, sg._NEUTRAL_SD, lo, hi
    else:
        _, mu, sd, _ = ROTATION_STATS[label]
        a, b = lo, hi
    dist = truncnorm((a - mu) / sd, (b - mu) / sd, loc=mu, scale=sd)
    expect = dist.expect(abs)
    spread = np.sqrt(dist.expect(lambda x: (abs(x) - expect) ** 2))
    assert np.abs(draws).mean() == pytest.approx(expect, abs=4 * spread / np.sqrt(len(draws)))


def test_left_and_right_have_opposite_signs():
    rng = np.random.default_rng(0)
    assert np.sign(sg.sample_theta(RotationLabel.LEFT_WIDE, rng)) == -np.sign(sg.sample_theta(RotationLabel.RIGHT_WIDE, rng))


# -- dataset generation ------------------------------------------------------------


def test_counts_per_cell(tiny_samples):
    assert len(tiny_samples) == 2 * 625
    per_cell = Counter((s.class_id, s.grid_position, s.rotation_label, s.split) for s in tiny_samples)
    assert len(per_cell) == 2 * 25 * 5 * 2
    assert {v for (c, p, r, split), v in per_cell.items() if split == "train"} == {4}
    assert {v for (c, p, r, split), v in per_cell.items() if split == "test"} == {1}


def test_thirteen_class_split_arithmetic():
    # closed form from the grid, not rendered
    assert 13 * 25 * 5 * sg.TRAIN_COPIES == 6500 and 13 * 25 * 5 * sg.TEST_COPIES == 1625


def test_ring_partition_of_samples(tiny_samples):
    cells = {s.grid_position for s in tiny_samples}
    rings = Counter(ring_of(*c).band for c in cells)
    assert rings == {"Neutral": 1, "Near": 8, "Far": 16}


def test_order_and_labels(tiny_samples):
    first = tiny_samples[: 5 * 5]
    assert [s.rotation_label for s in first[::5]] == ROTATION_ORDER
    assert all(s.grid_position == (0, 0) for s in first)
    assert [s.split for s in first[:5]] == ["train"] * 4 + ["test"]


def test_generation_is_deterministic(tiny_samples):
    again = sg.generate_dataset(sg.make_board_library(2, 5), out_size=16, rng_seed=3)
    a, b = sg.SampleSet.from_samples(tiny_samples), sg.SampleSet.from_samples(again)
    assert a.digest() == b.digest()
    assert np.array_equal(a.theta, b.theta)


def test_generation_seed_changes_images(tiny_samples):
    other = sg.generate_dataset(sg.make_board_library(2, 5), out_size=16, rng_seed=4)
    assert sg.SampleSet.from_samples(other).digest() != sg.SampleSet.from_samples(tiny_samples).digest()


def test_empty_library():
    with pytest.raises(ValueError):
        sg.generate_dataset([], 16)


def test_ratio_magnitude_grows_with_ring(tiny_samples):
    mags = {}
    for s in tiny_samples:
        mags.setdefault(s.ring.band, []).append(abs(s.ratio_y))
    means = {k: np.mean(v) for k, v in mags.items()}
    assert means["Far"] > means["Near"] > means["Neutral"]


# -- sample set and disk layout -----------------------------------------------------


def test_sample_set_views(tiny_samples):
    data = sg.SampleSet.from_samples(tiny_samples)
    assert data.images.shape == (1250, 16, 16, 3)
    assert data.num_classes == 2
    train = data.split_of("train")
    assert len(train) == 1000 and set(train.split) == {"train"}
    assert len(data.subset(data.class_ids == 1)) == 625


def test_write_and_load_round_trip(tmp_path, tiny_samples):
    subset = tiny_samples[::50]
    manifest = sg.write_dataset(subset, tmp_path)
    assert manifest.read_text().splitlines()[0] == ",".join(sg.MANIFEST_FIELDS)
    assert (tmp_path / "0" / "train" / "r0c0_LeftWide_0.png").is_file()
    back = sg.load_dataset(tmp_path)
    assert len(back) == len(subset)
    for a, b in zip(subset, back):
        assert np.array_equal(a.image, b.image)
        assert (a.class_id, a.split, a.grid_position, a.rotation_label, a.copy) == (
            b.class_id, b.split, b.grid_position, b.rotation_label, b.copy)
        assert b.theta == pytest.approx(a.theta, abs=1e-6)


def test_load_resizes(tmp_path, tiny_samples):
    sg.write_dataset(tiny_samples[:3], tmp_path)
    assert sg.load_dataset(tmp_path, size=8)[0].image.shape == (8, 8, 3)


def test_missing_manifest(tmp_path):
    with pytest.raises(sg.ManifestError):
        sg.load_dataset(tmp_path)
