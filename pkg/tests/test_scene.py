import numpy as np
import pytest

from anchorsplat.errors import InvalidInput
from anchorsplat.scene import (
    Hyperparams,
    Scene,
    covariance_from,
    densify,
    gaussian_params,
    sigmoid,
    voxelize_points,
)


def small_hyper(**kw):
    defaults = dict(top_resolution=4, level_scale=2, k=3, language_dim=8)
    defaults.update(kw)
    return Hyperparams(**defaults)


def brute_force_voxel_counts(points, grid):
    """Independent occupied-voxel count per level via floor arithmetic on sets."""
    counts = []
    for lvl in range(3):
        side = grid.voxel_size(lvl)
        ijk = np.floor((points - grid.bounds_min) / side).astype(int)
        ijk = np.clip(ijk, 0, grid.axis_counts(lvl) - 1)
        counts.append(len({tuple(r) for r in ijk}))
    return counts


def test_voxelize_single_point_top_level_cell():
    hyper = small_hyper(top_resolution=4)
    scene = voxelize_points([[0.6, 0.2, 0.9]], hyper, rng=0,
                            bounds=([0, 0, 0], [1, 1, 1]))
    top = np.flatnonzero(scene.levels == 0)
    assert len(top) == 1
    i = top[0]
    assert (0.625, 0.125, 0.875) == pytest.approx(tuple(scene.positions[i]))
    assert scene.voxel_sizes[i] == pytest.approx(0.25)
    key = next(iter(scene.grid.occupancy[0]))
    assert key == (2, 0, 3)


def test_voxelize_duplicate_points_collapse():
    scene = voxelize_points([[0.1, 0.1, 0.1], [0.1, 0.1, 0.1]], small_hyper(), rng=0)
    for lvl in range(3):
        assert np.sum(scene.levels == lvl) == 1
    scene.validate()


def test_voxelize_counts_match_brute_force():
    rng = np.random.default_rng(7)
    points = rng.uniform(0, 1, size=(10_000, 3))
    hyper = small_hyper(top_resolution=8, level_scale=2)
    scene = voxelize_points(points, hyper, rng=1)
    expected = brute_force_voxel_counts(points, scene.grid)
    for lvl in range(3):
        assert np.sum(scene.levels == lvl) == expected[lvl]
    scene.validate()


def test_voxelize_child_initialization():
    point = np.array([0.5, 0.5, 0.5])
    scene = voxelize_points([point], small_hyper(), rng=3)
    # children start on the input points of their voxel
    mu = scene.child_means().reshape(scene.n_anchors, scene.k, 3)
    assert np.allclose(mu, point)
    assert np.all(scene.child_opacities == 0.1)
    assert np.all(scene.child_colors == 0.5)
    # every level starts at the same world sigma: half the finest voxel
    finest = scene.grid.voxel_size(2)
    s = scene.child_scales().reshape(scene.n_anchors, scene.k, 3)
    assert np.allclose(s, finest / 2)
    fine = scene.levels == 2
    assert np.all(scene.child_rel_scales[fine] == 0)
    assert np.all((scene.features >= 0) & (scene.features <= 1))


def test_voxelize_rejects_empty_and_warns_on_degenerate():
    with pytest.raises(InvalidInput):
        voxelize_points(np.zeros((0, 3)), small_hyper())
    flat = np.array([[0.2, 0.5, 0.3], [0.9, 0.5, 0.1]])  # zero extent in y
    with pytest.warns(UserWarning):
        scene = voxelize_points(flat, small_hyper(), rng=0)
    assert scene.n_anchors > 0
    assert np.all(scene.grid.bounds_max > scene.grid.bounds_min)


def test_voxelize_is_deterministic_given_seed():
    rng = np.random.default_rng(11)
    points = rng.uniform(-2, 3, size=(500, 3))
    a = voxelize_points(points, small_hyper(), rng=5)
    b = voxelize_points(points, small_hyper(), rng=5)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.features, b.features)


def test_gaussian_params_examples():
    hyper = small_hyper(k=1)
    scene = voxelize_points([[0.5, 0.5, 0.5]], hyper, rng=0)
    anchor = scene.anchor(0)

    anchor.position = np.zeros(3)
    anchor.voxel_size = 1.0
    anchor.children[0].offset = np.array([0.5, 0.0, 0.0])
    anchor.children[0].rel_scale = np.zeros(3)
    mu, s = gaussian_params(anchor, 0)
    assert mu == pytest.approx([0.5, 0.0, 0.0])
    assert s == pytest.approx([0.5, 0.5, 0.5])

    anchor.position = np.array([2.0, 2.0, 2.0])
    anchor.voxel_size = 0.25
    anchor.children[0].offset = np.array([-1.0, 0.0, 1.0])
    mu, _ = gaussian_params(anchor, 0)
    assert mu == pytest.approx([1.75, 2.0, 2.25])

    anchor.voxel_size = 2.0
    anchor.children[0].rel_scale = np.array([4.0, -4.0, 0.0])
    _, s = gaussian_params(anchor, 0)
    expected = 2.0 * np.array([sigmoid(np.array(4.0)), sigmoid(np.array(-4.0)), 0.5])
    assert s == pytest.approx([1.96403, 0.03597, 1.0], abs=1e-5)
    assert s == pytest.approx(expected)


def test_covariance_identity_and_axis_swap():
    ident = np.array([1.0, 0.0, 0.0, 0.0])
    cov = covariance_from(ident, [1.0, 2.0, 3.0])
    assert np.allclose(cov, np.diag([1.0, 4.0, 9.0]))

    # 90 degrees about z swaps the x/y variances
    qz = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
    cov = covariance_from(qz, [1.0, 2.0, 1.0])
    assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_eigenvalues_match_scales():
    rng = np.random.default_rng(2)
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        s = rng.uniform(0.1, 2.0, size=3)
        cov = covariance_from(q, s)
        eig = np.sort(np.linalg.eigvalsh(cov))
        assert np.allclose(eig, np.sort(s ** 2), atol=1e-9)
        assert np.allclose(cov, cov.T)


def test_covariance_normalizes_with_warning():
    with pytest.warns(UserWarning):
        cov = covariance_from([2.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
    assert np.allclose(cov, np.eye(3))


def test_densify_no_trigger_is_identity():
    scene = voxelize_points([[0.3, 0.3, 0.3], [0.7, 0.7, 0.7]], small_hyper(), rng=0)
    out = densify(scene, np.zeros(scene.n_children), threshold=1.0, rng=1)
    assert out.n_anchors == scene.n_anchors
    assert np.array_equal(out.positions, scene.positions)


def test_densify_spawns_once_and_is_idempotent():
    hyper = small_hyper(k=1)
    scene = voxelize_points([[0.51, 0.51, 0.51]], hyper, rng=0,
                            bounds=([0, 0, 0], [1, 1, 1]))
    # push the single child of the finest anchor into the adjacent empty fine
    # voxel (still inside the same level-0 and level-1 cells)
    fine = int(np.flatnonzero(scene.levels == 2)[0])
    scene.child_offsets[fine, 0] = np.array([1.0, 0.0, 0.0])
    signal = np.zeros(scene.n_children)
    signal[fine * hyper.k] = 10.0

    grown = densify(scene, signal, threshold=1.0, rng=2)
    # the child mean lands in already-occupied voxels at levels 0/1,
    # so exactly one new (fine) anchor appears
    assert grown.n_anchors == scene.n_anchors + 1
    new_id = grown.n_anchors - 1
    assert grown.levels[new_id] == 2
    mu = scene.child_means()[fine * hyper.k]
    ijk = grown.grid.voxel_index(mu, 2)[0]
    assert np.allclose(grown.positions[new_id], grown.grid.voxel_center(ijk, 2))
    grown.validate()

    signal2 = np.concatenate([signal, np.zeros(hyper.k)])
    again = densify(grown, signal2, threshold=1.0, rng=3)
    assert again.n_anchors == grown.n_anchors


def brute_force_densify_cells(scene, signal, threshold):
    """Reference proposal/cancel rule applied child by child."""
    cells = set()
    mu = scene.child_means()
    for idx in range(scene.n_children):
        if signal[idx] <= threshold:
            continue
        for lvl in range(3):
            ijk = scene.grid.voxel_index(mu[idx], lvl, clip=False)[0]
            if not scene.grid.in_range(ijk, lvl)[0]:
                continue
            key = tuple(int(v) for v in ijk)
            if key not in scene.grid.occupancy[lvl]:
                cells.add((lvl, key))
    return cells


def test_densify_matches_reference_rule():
    rng = np.random.default_rng(9)
    points = rng.uniform(0, 1, size=(60, 3))
    scene = voxelize_points(points, small_hyper(), rng=4)
    scene.child_offsets = rng.uniform(-2.5, 2.5, size=scene.child_offsets.shape)
    signal = rng.uniform(0, 1, size=scene.n_children)
    threshold = 0.6

    expected = brute_force_densify_cells(scene, signal, threshold)
    out = densify(scene, signal, threshold, rng=5)
    assert out.n_anchors == scene.n_anchors + len(expected)
    got = set()
    for i in range(scene.n_anchors, out.n_anchors):
        lvl = int(out.levels[i])
        ijk = out.grid.voxel_index(out.positions[i], lvl)[0]
        got.add((lvl, tuple(int(v) for v in ijk)))
    assert got == expected
    out.validate()


def test_densify_signal_size_checked():
    scene = voxelize_points([[0.5, 0.5, 0.5]], small_hyper(), rng=0)
    with pytest.raises(InvalidInput):
        densify(scene, np.zeros(scene.n_children + 1), 0.5)


def test_scale_confinement_random_rel_scales():
    rng = np.random.default_rng(21)
    scene = voxelize_points(rng.uniform(0, 1, size=(50, 3)), small_hyper(), rng=6)
    scene.child_rel_scales = rng.normal(scale=5.0, size=scene.child_rel_scales.shape)
    s = scene.child_scales().reshape(scene.n_anchors, scene.k, 3)
    l = scene.voxel_sizes[:, None, None]
    assert np.all(s > 0)
    assert np.all(s < l)


def test_hyper_validation():
    with pytest.raises(InvalidInput):
        Hyperparams(tau=0.0)
    with pytest.raises(InvalidInput):
        Hyperparams(lambda_d=-1.0)
    with pytest.raises(InvalidInput):
        Hyperparams(grow_weight_threshold=1.0)


def test_scene_json_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    scene = voxelize_points(rng.uniform(0, 2, size=(40, 3)), small_hyper(), rng=7)
    scene.child_offsets = rng.uniform(-0.4, 0.4, size=scene.child_offsets.shape)
    scene.child_rel_scales = rng.normal(size=scene.child_rel_scales.shape)
    scene.language_features[3] = rng.normal(size=scene.hyper.language_dim)
    scene.has_language[3] = True

    path = tmp_path / "scene.json"
    scene.save(path)
    loaded = Scene.load(path)

    assert np.array_equal(loaded.positions, scene.positions)
    assert np.array_equal(loaded.features, scene.features)
    assert np.array_equal(loaded.child_offsets, scene.child_offsets)
    assert np.array_equal(loaded.child_rel_scales, scene.child_rel_scales)
    assert np.array_equal(loaded.has_language, scene.has_language)
    assert np.array_equal(loaded.language_features[3], scene.language_features[3])
    loaded.validate()
