import numpy as np
import pytest

from anchorsplat.errors import InvalidInput
from anchorsplat.render import Camera, project_gaussian, render
from anchorsplat.scene import Hyperparams, voxelize_points

from conftest import make_random_scene
from reference import naive_render


def front_camera(width=32, height=32, fx=60.0, z_shift=2.0):
    """Camera on -z looking down +z at the origin-centered scene."""
    cx, cy = (width - 1) / 2, (height - 1) / 2
    return Camera(fx, fx, cx, cy, width, height,
                  rotation=np.eye(3), translation=np.array([0.0, 0.0, z_shift]))


def single_gaussian_scene(mu_world, alpha, color, sigma_world=0.05, k=1):
    """One anchor whose single child sits at mu_world with isotropic scale."""
    hyper = Hyperparams(top_resolution=2, level_scale=2, k=k, language_dim=4)
    scene = voxelize_points([mu_world], hyper, rng=0,
                            bounds=([-1, -1, -1], [1, 1, 1]))
    scene = _keep_one_anchor(scene)
    l = scene.voxel_sizes[0]
    scene.child_offsets[0, :] = (np.asarray(mu_world) - scene.positions[0]) / l
    # rel_scale chosen so sigmoid(s_hat) * l == sigma_world
    frac = sigma_world / l
    scene.child_rel_scales[0, :] = np.log(frac / (1 - frac))
    scene.child_opacities[0, :] = alpha
    scene.child_colors[0, :] = color
    return scene


def _keep_one_anchor(scene):
    keep = int(np.flatnonzero(scene.levels == 2)[0])
    for name in ("positions", "features", "language_features", "child_offsets",
                 "child_rel_scales", "child_rotations", "child_opacities",
                 "child_colors"):
        setattr(scene, name, getattr(scene, name)[keep:keep + 1])
    scene.voxel_sizes = scene.voxel_sizes[keep:keep + 1]
    scene.levels = scene.levels[keep:keep + 1]
    scene.has_language = scene.has_language[keep:keep + 1]
    scene.grid.occupancy = [{}, {}, {}]
    ijk = scene.grid.voxel_index(scene.positions[0], 2)[0]
    scene.grid.occupancy[2][tuple(int(v) for v in ijk)] = 0
    scene.levels[0] = 2
    return scene


def test_project_on_axis_matches_analytic():
    cam = front_camera(fx=100.0, z_shift=1.0)
    out = project_gaussian(cam, [0.0, 0.0, 0.0], 0.01 ** 2 * np.eye(3))
    assert out is not None
    mean2d, cov2d, z = out
    assert mean2d == pytest.approx([cam.cx, cam.cy])
    # fx * sigma / z = 1 px, plus the 0.3 px^2 regularizer
    assert np.allclose(cov2d, np.diag([1.3, 1.3]), atol=1e-9)
    assert z == pytest.approx(1.0)


def test_project_culls_behind_camera():
    cam = front_camera(z_shift=0.0)
    assert project_gaussian(cam, [0.0, 0.0, -1.0], 1e-4 * np.eye(3)) is None


def test_project_rigid_invariance():
    rng = np.random.default_rng(3)
    shift = rng.normal(size=3)
    mu = np.array([0.1, -0.2, 0.3])
    cov = 0.02 * np.eye(3) + 0.005 * np.ones((3, 3))
    cam = front_camera(z_shift=2.0)
    moved = Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                   rotation=cam.rotation,
                   translation=cam.translation - cam.rotation @ shift)
    a = project_gaussian(cam, mu, cov)
    b = project_gaussian(moved, mu + shift, cov)
    assert np.allclose(a[0], b[0], atol=1e-9)
    assert np.allclose(a[1], b[1], atol=1e-9)
    assert a[2] == pytest.approx(b[2])


def test_single_gaussian_pixel_value():
    scene = single_gaussian_scene([0.0, 0.0, 0.0], alpha=0.5, color=(1.0, 0.0, 0.0))
    # integer principal point so the Gaussian lands exactly on pixel (16, 16)
    cam = Camera(60, 60, 16, 16, 32, 32, translation=np.array([0, 0, 2.0]))
    img = render(scene, cam, mode="color").color
    assert img[16, 16] == pytest.approx([0.5, 0.0, 0.0], abs=1e-12)


def test_two_coincident_gaussians_blend():
    scene = single_gaussian_scene([0.0, 0.0, 0.0], alpha=0.5, color=(0.0, 0.0, 0.0), k=2)
    scene.child_colors[0, 0] = (1.0, 1.0, 1.0)
    cam = Camera(60, 60, 16, 16, 32, 32, translation=np.array([0, 0, 2.0]))
    img = render(scene, cam, mode="color").color
    # front contributes 0.5 * 1, back 0.5 * 0.5 * 0
    assert img[16, 16] == pytest.approx([0.5, 0.5, 0.5], abs=1e-12)


@pytest.mark.parametrize("mode", ["color", "feature", "depth"])
def test_renderer_matches_naive_oracle(mode):
    rng = np.random.default_rng(42)
    for trial in range(3):
        scene = make_random_scene(rng, n_points=25, k=2)
        cam = front_camera()
        got = render(scene, cam, mode=mode)
        want = naive_render(scene, cam, mode=mode)
        if mode == "color":
            assert np.max(np.abs(got.color - want)) < 1e-6
        elif mode == "feature":
            assert np.max(np.abs(got.feature - want)) < 1e-6
        else:
            assert np.max(np.abs(got.depth - want)) < 1e-6


def test_instance_mode_matches_naive_oracle():
    rng = np.random.default_rng(1)
    scene = make_random_scene(rng, n_points=25, k=2)
    subset = list(range(0, scene.n_anchors, 3))
    cam = front_camera()
    got = render(scene, cam, mode="instance", subset=subset).instance
    want = naive_render(scene, cam, mode="instance", subset=subset)
    assert np.array_equal(got, want)


def test_instance_mode_empty_subset_is_zero():
    rng = np.random.default_rng(2)
    scene = make_random_scene(rng, n_points=10)
    out = render(scene, front_camera(), mode="instance", subset=[]).instance
    assert not out.any()


def test_blend_records_invariants():
    rng = np.random.default_rng(5)
    scene = make_random_scene(rng, n_points=25, k=2)
    cam = front_camera()
    rec = render(scene, cam, mode="color", want_records=True).records
    assert np.all(rec.t >= 0) and np.all(rec.t <= 1)
    assert np.all(rec.omega >= 0)
    # per pixel: ascending depth, omega = t * prod(1 - t_earlier), sum <= 1
    order = np.argsort(rec.pixel, kind="stable")
    pix = rec.pixel[order]
    for p in np.unique(pix)[:50]:
        sel = order[pix == p]
        z = rec.z[sel]
        assert np.all(np.diff(z) >= 0)
        T = 1.0
        for t_i, omega_i in zip(rec.t[sel], rec.omega[sel]):
            assert omega_i == pytest.approx(t_i * T, rel=1e-9)
            T *= 1.0 - t_i
        assert rec.omega[sel].sum() <= 1.0 + 1e-9


def test_feature_rendering_is_linear():
    rng = np.random.default_rng(8)
    scene = make_random_scene(rng, n_points=20, k=2)
    cam = front_camera()
    base = render(scene, cam, mode="feature").feature

    for a in (0.0, 2.0, rng.uniform(0.2, 3.0)):
        scaled = scene.copy()
        scaled.set_features(scene.features * a)
        out = render(scaled, cam, mode="feature").feature
        assert np.max(np.abs(out - a * base)) < 1e-6

    # random linear combination of two assignments
    f1 = rng.uniform(0, 1, size=scene.features.shape)
    f2 = rng.uniform(0, 1, size=scene.features.shape)
    w1, w2 = rng.normal(size=2)
    s1, s2, s3 = scene.copy(), scene.copy(), scene.copy()
    s1.set_features(f1)
    s2.set_features(f2)
    s3.set_features(w1 * f1 + w2 * f2)
    m1 = render(s1, cam, mode="feature").feature
    m2 = render(s2, cam, mode="feature").feature
    m3 = render(s3, cam, mode="feature").feature
    assert np.max(np.abs(m3 - (w1 * m1 + w2 * m2))) < 1e-6


def test_instance_union_covers_full_scene_on_separated_clusters():
    # two blobs far apart: subset map + complement map = full map
    rng = np.random.default_rng(9)
    hyper = Hyperparams(top_resolution=4, level_scale=2, k=2, language_dim=4)
    pts = np.concatenate([
        rng.normal([-0.5, 0, 0], 0.05, size=(40, 3)),
        rng.normal([0.5, 0, 0], 0.05, size=(40, 3)),
    ])
    scene = voxelize_points(pts, hyper, rng=1)
    cam = front_camera(width=48, height=48, fx=40.0)
    left = np.flatnonzero(scene.positions[:, 0] < 0)
    right = np.flatnonzero(scene.positions[:, 0] >= 0)
    m_left = render(scene, cam, mode="instance", subset=left).instance
    m_right = render(scene, cam, mode="instance", subset=right).instance
    m_full = render(scene, cam, mode="instance",
                    subset=np.arange(scene.n_anchors)).instance
    assert np.array_equal(m_left | m_right, m_full)


def test_render_rejects_bad_mode():
    rng = np.random.default_rng(0)
    scene = make_random_scene(rng, n_points=5)
    with pytest.raises(InvalidInput):
        render(scene, front_camera(), mode="normals")


def test_camera_validation():
    with pytest.raises(InvalidInput):
        Camera(-1, 1, 0, 0, 8, 8)
    with pytest.raises(InvalidInput):
        Camera(1, 1, 0, 0, 8, 8, rotation=np.ones((3, 3)))
