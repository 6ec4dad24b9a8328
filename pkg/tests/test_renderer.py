import numpy as np
import pytest

from trifield import autodiff as ad
from trifield import render as rd
from trifield import scenes as sc
from trifield import triplane as tp
from trifield.autodiff import Tensor
from trifield.render import Camera, Ray


def make_camera(height=5, width=5, fov=np.pi / 2):
    pos = np.array([3.0, 0.0, 0.0])
    return Camera(pos, sc.look_at_origin(pos), fov, height, width)


def test_camera_validates_orientation_and_fov():
    bad = np.eye(3)
    bad[0, 0] = 1.1
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(np.zeros(3), bad, 1.0, 4, 4)
    with pytest.raises(ValueError, match="fov"):
        Camera(np.zeros(3), np.eye(3), 4.0, 4, 4)


def test_ray_validation():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]), 0.1, 4.0)
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 2.0, 1.0)


def test_center_pixel_ray_is_camera_forward():
    cam = make_camera(5, 5)
    bundle = rd.generate_rays(cam)
    center = bundle.directions.reshape(5, 5, 3)[2, 2]
    assert np.abs(center - cam.forward).max() < 1e-12


def test_all_ray_directions_unit_norm():
    cam = make_camera(6, 9, fov=1.1)
    bundle = rd.generate_rays(cam)
    assert np.abs(np.linalg.norm(bundle.directions, axis=1) - 1.0).max() < 1e-9


def test_corner_pixel_direction_by_hand_trigonometry():
    # fov = 90 deg, square image: the half-extent is tan(45) = 1; the corner
    # pixel CENTER sits at offset 1 - 1/W of the half-extent on both axes
    w = 4
    cam = make_camera(w, w, fov=np.pi / 2)
    bundle = rd.generate_rays(cam)
    corner = bundle.directions.reshape(w, w, 3)[0, 0]
    off = 1.0 - 1.0 / w
    want = -off * cam.right + off * cam.up + cam.forward
    want = want / np.linalg.norm(want)
    assert np.abs(corner - want).max() < 1e-12


def test_degenerate_look_at_rejected():
    with pytest.raises(ValueError):
        sc.look_at_origin(np.array([0.0, 0.0, 2.0]))


def test_sample_points_single_midpoint():
    ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.0, 4.0)
    assert np.array_equal(rd.sample_points(ray, 1), [2.0])


def test_sample_points_bin_midpoints():
    ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.0, 4.0)
    assert np.array_equal(rd.sample_points(ray, 4), [0.5, 1.5, 2.5, 3.5])


def test_stratified_draws_stay_in_bins():
    rng = np.random.default_rng(0)
    n = 8
    ts = rd.sample_points_batch(1.0, 3.0, 10_000, n, stratified=True, rng=rng)
    edges = np.linspace(1.0, 3.0, n + 1)
    assert np.all(ts >= edges[:-1]) and np.all(ts < edges[1:])
    assert np.all(np.diff(ts, axis=1) > 0.0)


def test_field_eval_density_bias_tail():
    rng = np.random.default_rng(1)
    tri = tp.random_triplane(rng, 4, 2, scale=0.1)
    heads = rd.init_field_heads(rng, 6, hidden=8, depth=2, density_bias=-20.0)
    heads.s_layers[-1][0].data[:] = 0.0  # leave only the -20 bias
    sigma, _ = rd.field_eval(tri, heads, np.array([0.1, 0.2, 0.3]))
    assert float(sigma.data) < 1e-8


def test_field_eval_zero_color_head_gives_mid_gray():
    rng = np.random.default_rng(2)
    tri = tp.random_triplane(rng, 4, 2, scale=0.1)
    heads = rd.init_field_heads(rng, 6, hidden=8, depth=2)
    for w, b in heads.c_layers:
        w.data[:] = 0.0
        b.data[:] = 0.0
    _, color = rd.field_eval(tri, heads, np.array([0.1, 0.2, 0.3]))
    assert np.array_equal(color.data, [0.5, 0.5, 0.5])


def test_field_eval_grad_check_wrt_planes():
    rng = np.random.default_rng(3)
    d, c = 4, 2
    tri = tp.random_triplane(rng, d, c, scale=0.8)
    heads = rd.init_field_heads(rng, 3 * c, hidden=8, depth=2)
    pts = rng.uniform(-0.85, 0.85, size=(5, 3)) + 0.0137

    def f(x):
        t2 = tp.Triplane((ad.reshape(x, (d, d, c)), tri.planes[1], tri.planes[2]))
        sigma, _ = rd.field_eval_batch(t2, heads, pts)
        return ad.tsum(sigma)

    err = ad.grad_check(f, Tensor(tri.planes[0].data.copy(), requires_grad=True))
    assert err < 1e-5


def test_integrate_vacuum_ray():
    rgb, mask, depth = rd.integrate_ray(np.zeros(4), np.full((4, 3), 0.7), [0.5, 1.5, 2.5, 3.5], 4.0)
    assert np.array_equal(rgb.data, np.zeros(3))
    assert float(mask.data) == 0.0
    assert float(depth.data) == 4.0


def test_integrate_opaque_sample():
    rgb, mask, depth = rd.integrate_ray(np.array([50.0]), np.array([[0.2, 0.4, 0.6]]), [1.0], 2.0)
    assert 1.0 - float(mask.data) < 1e-20
    assert np.abs(rgb.data - [0.2, 0.4, 0.6]).max() < 1e-20
    assert abs(float(depth.data) - 1.0) < 1e-19


def test_integrate_rejects_bad_inputs():
    with pytest.raises(ValueError, match="ascending"):
        rd.integrate_ray(np.zeros(3), np.zeros((3, 3)), [1.0, 1.0, 2.0], 4.0)
    with pytest.raises(ValueError, match="non-negative"):
        rd.integrate_ray(np.array([-0.1, 0.0]), np.zeros((2, 3)), [1.0, 2.0], 4.0)
    with pytest.raises(ad.ShapeError):
        rd.integrate_rays(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4, 3))), np.zeros((2, 3)), 4.0)


def slab_mask(n):
    # constant sigma = 2 over the chord [1.43, 2.43] inside bounds [0.1, 3.9]
    o = np.array([[-1.93, 0.0, 0.0]])
    d = np.array([[1.0, 0.0, 0.0]])
    scene = sc.make_scene("sphere", {"radius": 0.5, "density": 2.0})
    ts = rd.sample_points_batch(0.1, 3.9, 1, n)
    pts = (o[:, None, :] + ts[..., None] * d[:, None, :]).reshape(-1, 3)
    sig = scene.sigma(pts).reshape(1, n)
    col = scene.color(pts).reshape(1, n, 3)
    _, mask, _ = rd.integrate_rays(Tensor(sig), Tensor(col), ts, 3.9)
    return float(mask.data[0])


def test_constant_slab_matches_closed_form_transmittance():
    closed = 1.0 - np.exp(-2.0 * 1.0)
    assert abs(slab_mask(256) - closed) / closed < 0.01


def test_slab_error_decreases_with_sample_count():
    closed = 1.0 - np.exp(-2.0 * 1.0)
    errs = [abs(slab_mask(n) - closed) for n in (16, 64, 256)]
    assert errs[0] > errs[1] > errs[2]


def test_weights_are_a_subprobability():
    rng = np.random.default_rng(4)
    sig = np.abs(rng.normal(scale=3.0, size=(20, 16)))
    col = rng.uniform(size=(20, 16, 3))
    ts = np.sort(rng.uniform(0.1, 3.9, size=(20, 16)), axis=1)
    _, mask, _ = rd.integrate_rays(Tensor(sig), Tensor(col), ts, 4.0)
    assert np.all(mask.data >= 0.0) and np.all(mask.data <= 1.0)


def test_doubling_density_never_decreases_mask():
    rng = np.random.default_rng(5)
    sig = np.abs(rng.normal(size=(10, 12)))
    col = rng.uniform(size=(10, 12, 3))
    ts = np.sort(rng.uniform(0.1, 3.9, size=(10, 12)), axis=1)
    _, m1, _ = rd.integrate_rays(Tensor(sig), Tensor(col), ts, 4.0)
    _, m2, _ = rd.integrate_rays(Tensor(2.0 * sig), Tensor(col), ts, 4.0)
    assert np.all(m2.data >= m1.data - 1e-15)


def test_render_view_vacuum_heads():
    rng = np.random.default_rng(6)
    tri = tp.random_triplane(rng, 4, 2, scale=0.1)
    heads = rd.init_field_heads(rng, 6, hidden=8, depth=2, density_bias=-60.0)
    heads.s_layers[-1][0].data[:] = 0.0
    cam = make_camera(4, 4, fov=1.2)
    out = rd.render_view(tri, heads, cam, 16)
    tn, tf = rd.default_bounds(cam.position)
    assert np.all(out.image == 0.0)
    assert np.all(out.mask == 0.0)
    assert np.abs(out.depth - tf).max() < 1e-12


def test_render_view_deterministic():
    rng = np.random.default_rng(7)
    tri = tp.random_triplane(rng, 6, 4, scale=0.5)
    heads = rd.init_field_heads(rng, 12, hidden=8, depth=2)
    cam = make_camera(5, 5, fov=1.2)
    a = rd.render_view(tri, heads, cam, 24)
    b = rd.render_view(tri, heads, cam, 24)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.mask, b.mask)
    assert np.array_equal(a.depth, b.depth)
    # chunking must not change pixel math
    c = rd.render_view(tri, heads, cam, 24, chunk=7)
    assert np.array_equal(a.image, c.image)


def test_fitted_sphere_render_matches_fine_oracle():
    # fit the analytic sphere from 6 orbit views, then compare a held-out
    # 32x32 render at n = 128 against the n = 2048 oracle
    from trifield import training as tr

    scene = sc.make_scene("sphere", {"radius": 0.5, "density": 8.0})
    elev = np.deg2rad(18.0)
    cams = sc.camera_orbit(6, 3.0, elev, height=32, width=32, azimuth_offset=np.deg2rad(10.0))
    views = [(cam, sc.oracle_render(scene, cam, 1024)) for cam in cams]
    cfg = tr.FitConfig(iterations=900, ray_batch=192, samples_per_ray=32,
                       grid_resolution=24, grid_channels=8, hidden=24, val_every=100, seed=1)
    result = tr.fit_scene(views, cfg)
    assert not result.diverged
    cam = sc.orbit_camera(np.deg2rad(55.0), elev, 3.0, height=32, width=32)
    gt = sc.oracle_render(scene, cam, 2048)
    pred = rd.render_view(result.triplane, result.heads, cam, 128)
    assert np.abs(pred.image - gt.image).mean() < 0.01


def test_render_grad_check_through_small_view():
    rng = np.random.default_rng(8)
    d, c = 4, 2
    tri = tp.random_triplane(rng, d, c, scale=0.8)
    heads = rd.init_field_heads(rng, 3 * c, hidden=8, depth=2)
    cam = make_camera(4, 4, fov=1.2)
    bundle = rd.generate_rays(cam)

    def f(x):
        t2 = tp.Triplane((ad.reshape(x, (d, d, c)), tri.planes[1], tri.planes[2]))
        rgb, mask, depth = rd.render_rays(t2, heads, bundle.origins, bundle.directions,
                                          bundle.t_near, bundle.t_far, 8)
        return ad.tmean(rgb)

    err = ad.grad_check(f, Tensor(tri.planes[0].data.copy(), requires_grad=True))
    assert err < 1e-4
