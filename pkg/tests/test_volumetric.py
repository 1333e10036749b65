"""Camera rays and the volumetric stage-1 renderer."""

import math

import numpy as np
import pytest

from promptmesh import tensor as T
from promptmesh.camera import (Camera, make_rays, orbit_camera, ray_aabb,
                               view_to_pixels, world_to_view)
from promptmesh.fields import FieldHeads, HeadConfig
from promptmesh.volumetric import (alpha_from_sdf, audit_batch, composite,
                                   render_stage1, shade)

from oracles import alpha_naive, composite_naive, fd_grad, logistic, max_rel_err


# -- camera --------------------------------------------------------------------


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(eye=np.ones(3), look_at=np.ones(3))
    for bad_fov in (0.0, 180.0, -10.0, 250.0):
        with pytest.raises(ValueError):
            Camera(eye=np.array([3.0, 0, 0]), look_at=np.zeros(3), fov_y=bad_fov)
    up_parallel = Camera(eye=np.array([0.0, 0, 3.0]), look_at=np.zeros(3),
                         up=np.array([0.0, 0, 1.0]))
    with pytest.raises(ValueError):
        up_parallel.basis()


def test_center_pixel_direction_and_unit_norm():
    cam = Camera(eye=np.array([2.0, -1.0, 1.5]), look_at=np.array([0.3, 0.4, -0.2]),
                 fov_y=55.0, width=5, height=5)
    origins, dirs = make_rays(cam)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-6)
    assert np.allclose(origins, cam.eye)
    center = dirs[2 * 5 + 2]
    expected = cam.look_at - cam.eye
    expected = expected / np.linalg.norm(expected)
    assert np.allclose(center, expected, atol=1e-12)


def test_corner_pixel_matches_trig_oracle():
    fov = 60.0
    cam = Camera(eye=np.array([0.0, 0.0, 4.0]), look_at=np.zeros(3),
                 up=np.array([0.0, 1.0, 0.0]), fov_y=fov, width=3, height=3)
    _, dirs = make_rays(cam)
    fwd = np.array([0.0, 0.0, -1.0])
    # corner pixel center sits at 2/3 of the half-extent in both axes
    off = (2.0 / 3.0) * math.tan(math.radians(fov) / 2.0)
    expected_cos = 1.0 / math.sqrt(1.0 + 2.0 * off * off)
    for corner in (0, 2, 6, 8):
        assert abs(float(dirs[corner] @ fwd) - expected_cos) < 1e-12


def test_ray_aabb_known_segments():
    o = np.array([[3.0, 0.0, 0.0], [3.0, 0.0, 0.0], [3.0, 2.0, 0.0], [0.0, 0.0, 0.0]])
    d = np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    near, far = ray_aabb(o, d, 1.0)
    assert near[0] == pytest.approx(2.0) and far[0] == pytest.approx(4.0)
    assert far[1] <= near[1]  # parallel to the slab, offset outside
    assert far[2] <= near[2]  # passes beside the box
    assert near[3] == pytest.approx(1e-4) and far[3] == pytest.approx(1.0)


def test_projection_round_trip_with_rays():
    cam = orbit_camera(40.0, 25.0, distance=3.0, fov_y=50.0, width=17, height=13)
    origins, dirs = make_rays(cam)
    rows, cols = np.divmod(np.arange(origins.shape[0]), cam.width)
    pts = origins + 2.7 * dirs
    pix = view_to_pixels(cam, world_to_view(cam, pts))
    assert np.allclose(pix[:, 0], rows, atol=1e-9)
    assert np.allclose(pix[:, 1], cols, atol=1e-9)


# -- alpha from sdf --------------------------------------------------------------


def test_alpha_scalar_examples():
    s = T.as_tensor(1.0)
    a = alpha_from_sdf(T.as_tensor(0.1), T.as_tensor(-0.1), s)
    expected = (logistic(0.1) - logistic(-0.1)) / logistic(0.1)
    assert expected == pytest.approx(0.09517, abs=2e-5)
    assert float(a.data) == pytest.approx(expected, abs=1e-6)
    same = alpha_from_sdf(T.as_tensor(0.3), T.as_tensor(0.3), s)
    assert float(same.data) == 0.0
    exiting = alpha_from_sdf(T.as_tensor(-1.0), T.as_tensor(1.0), s)
    assert float(exiting.data) == 0.0


def test_alpha_rejects_bad_inputs():
    f = T.as_tensor(0.1)
    for bad_s in (0.0, -1.0, float("nan"), float("inf")):
        with pytest.raises(ValueError):
            alpha_from_sdf(f, f, T.as_tensor(bad_s))
    with pytest.raises(ValueError):
        alpha_from_sdf(T.as_tensor(float("nan")), f, T.as_tensor(1.0))
    with pytest.raises(ValueError):
        alpha_from_sdf(f, T.as_tensor(float("inf")), T.as_tensor(1.0))


def test_alpha_matches_scalar_oracle_on_1000_triples():
    rng = np.random.default_rng(7)
    with T.using_dtype(np.float64):
        f1 = rng.uniform(-2.0, 2.0, 1000)
        f2 = rng.uniform(-2.0, 2.0, 1000)
        ss = rng.uniform(0.1, 100.0, 1000)
        for i in range(1000):
            got = alpha_from_sdf(T.as_tensor(f1[i]), T.as_tensor(f2[i]),
                                 T.as_tensor(ss[i]))
            want = alpha_naive(ss[i], f1[i], f2[i])
            assert abs(float(got.data) - want) < 1e-6
            assert 0.0 <= float(got.data) <= 1.0


def test_alpha_metamorphic_sdf_rescale_exact():
    rng = np.random.default_rng(11)
    f1 = T.as_tensor(rng.uniform(-1.0, 1.0, 64).astype(np.float32))
    f2 = T.as_tensor(rng.uniform(-1.0, 1.0, 64).astype(np.float32))
    s = 7.0
    base = alpha_from_sdf(f1, f2, T.as_tensor(s)).data
    for k in (2.0, 8.0, 0.25):  # powers of two keep the rescale exact in floats
        scaled = alpha_from_sdf(f1 * k, f2 * k, T.as_tensor(s / k)).data
        assert np.array_equal(base, scaled)


def test_alpha_gradients_including_clamp():
    with T.using_dtype(np.float64):
        def run(v1, v2, sv):
            a = T.parameter(np.array(v1)), T.parameter(np.array(v2)), T.parameter(np.array(sv))
            out = alpha_from_sdf(a[0], a[1], a[2])
            T.backward(out)
            return a
        p1, p2, ps = run(0.2, -0.3, 4.0)
        for p, col in ((p1, 0), (p2, 1), (ps, 2)):
            def f(x, i=col):
                vals = [0.2, -0.3, 4.0]
                vals[i] = float(x)
                return alpha_naive(vals[2], vals[0], vals[1])
            fd = fd_grad(f, np.array(float(p.data)), h=1e-6)
            assert max_rel_err(np.array(p.grad), fd) < 1e-5
        # clamped branch: gradient exactly zero
        q1, q2, qs = run(-1.0, 1.0, 4.0)
        assert float(q1.grad) == 0.0 and float(q2.grad) == 0.0 and float(qs.grad) == 0.0


# -- composite -------------------------------------------------------------------


def test_composite_single_opaque_sample():
    alphas = T.as_tensor(np.array([[1.0]]))
    colors = T.as_tensor(np.array([[[0.3, 0.6, 0.9]]]))
    rgb, op = composite(alphas, colors, np.array([1.0, 1.0, 1.0]))
    assert np.allclose(rgb.data, [[0.3, 0.6, 0.9]], atol=0)
    assert float(op.data[0]) == 1.0


def test_composite_worked_example():
    alphas = T.as_tensor(np.array([[0.5, 0.5]]))
    colors = T.as_tensor(np.array([[[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]]))
    rgb, op = composite(alphas, colors, np.zeros(3))
    # T = (1, 0.5), weights = (0.5, 0.25)
    assert np.allclose(rgb.data, 0.5, atol=0)
    assert float(op.data[0]) == pytest.approx(0.75, abs=0)


def test_composite_matches_loop_oracle():
    rng = np.random.default_rng(3)
    with T.using_dtype(np.float64):
        alphas = rng.uniform(0.0, 0.9, (5, 16))
        colors = rng.uniform(0.0, 1.0, (5, 16, 3))
        bg = rng.uniform(0.0, 1.0, 3)
        rgb, op = composite(T.as_tensor(alphas), T.as_tensor(colors), bg)
        for r in range(5):
            want_rgb, want_op = composite_naive(alphas[r], colors[r], bg)
            assert np.abs(rgb.data[r] - want_rgb).max() < 1e-6
            assert abs(float(op.data[r]) - want_op) < 1e-6


def test_composite_conservation_with_forced_opaque_tail():
    rng = np.random.default_rng(4)
    alphas = rng.uniform(0.0, 1.0, (32, 24)).astype(np.float32)
    alphas[:, -1] = 1.0
    colors = rng.uniform(0.0, 1.0, (32, 24, 3)).astype(np.float32)
    _, op = composite(T.as_tensor(alphas), T.as_tensor(colors), np.zeros(3))
    assert np.abs(op.data - 1.0).max() < 1e-5


def test_composite_gradients():
    rng = np.random.default_rng(5)
    with T.using_dtype(np.float64):
        a0 = rng.uniform(0.05, 0.8, (2, 6))
        c0 = rng.uniform(0.0, 1.0, (2, 6, 3))
        bg = np.array([0.2, 0.4, 0.6])
        pa, pc = T.parameter(a0), T.parameter(c0)
        rgb, op = composite(pa, pc, bg)
        T.backward(T.tsum(rgb) + T.tsum(op))

        def loss_a(flat):
            r, o = composite(T.as_tensor(flat.reshape(a0.shape)), T.as_tensor(c0), bg)
            return float(r.data.sum() + o.data.sum())

        def loss_c(flat):
            r, o = composite(T.as_tensor(a0), T.as_tensor(flat.reshape(c0.shape)), bg)
            return float(r.data.sum() + o.data.sum())

        assert max_rel_err(pa.grad.ravel(), fd_grad(loss_a, a0.ravel())) < 1e-5
        assert max_rel_err(pc.grad.ravel(), fd_grad(loss_c, c0.ravel())) < 1e-5


# -- shading ---------------------------------------------------------------------


def test_shade_modes_and_light_normalization():
    albedo = T.as_tensor(np.array([[0.2, 0.4, 0.8], [1.0, 1.0, 1.0]]))
    normals = T.as_tensor(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]))
    light = np.array([0.0, 0.0, 5.0])  # unnormalized on purpose
    lit = shade(albedo, normals, "diffuse", light)
    assert np.allclose(lit.data[0], np.array([0.2, 0.4, 0.8]), atol=1e-12)
    assert np.allclose(lit.data[1], 0.1, atol=1e-12)  # back-facing keeps ambient
    tex = shade(albedo, normals, "textureless", light)
    assert np.allclose(tex.data[0], 1.0, atol=1e-12)
    assert np.allclose(tex.data[1], 0.1, atol=1e-12)
    assert shade(albedo, None, "albedo", None) is albedo
    with pytest.raises(ValueError):
        shade(albedo, normals, "phong", light)
    with pytest.raises(ValueError):
        shade(albedo, None, "diffuse", None)


# -- full renders ----------------------------------------------------------------


def _sphere_setup(channels=8, plane_size=8):
    cfg = HeadConfig(triplane_channels=channels, octaves=2, hidden=16, seed=3)
    heads = FieldHeads(cfg)
    planes = T.Tensor(np.zeros((3, channels, plane_size, plane_size),
                               dtype=T.default_dtype()))
    return cfg, heads, planes


def test_render_sphere_silhouette_opacity():
    _, heads, planes = _sphere_setup()
    s = T.parameter(np.array(10.0))
    cam = orbit_camera(30.0, 20.0, distance=3.0, fov_y=50.0, width=33, height=33)
    img, op, batch = render_stage1(planes, heads, s, cam, n_samples=48,
                                   background="gray")
    center = op.data[16, 16]
    assert center > 0.5
    for r, c in ((0, 0), (0, 32), (32, 0), (32, 32)):
        assert op.data[r, c] < 0.05
        assert np.array_equal(img.data[r, c], np.array([0.5, 0.5, 0.5],
                                                       dtype=img.data.dtype))
    audit_batch(batch)
    assert np.isfinite(img.data).all()


def test_render_all_miss_returns_background_exactly():
    _, heads, planes = _sphere_setup()
    s = T.parameter(np.array(10.0))
    cam = Camera(eye=np.array([5.0, 0.0, 0.0]), look_at=np.array([10.0, 0.0, 0.0]),
                 fov_y=40.0, width=9, height=9)
    img, op, batch = render_stage1(planes, heads, s, cam, n_samples=8,
                                   background="white")
    assert np.array_equal(img.data, np.ones_like(img.data))
    assert not op.data.any()
    assert batch.t_values.shape[0] == 0


def test_render_shading_modes_differ_and_textureless_is_gray():
    _, heads, planes = _sphere_setup()
    rng = np.random.default_rng(0)
    for p in heads.parameters().values():
        p.data = p.data + rng.normal(0, 0.01, p.data.shape).astype(p.data.dtype)
    s = T.parameter(np.array(10.0))
    cam = orbit_camera(10.0, 5.0, distance=3.0, fov_y=50.0, width=17, height=17)
    light = (cam.eye / np.linalg.norm(cam.eye)) + np.array([0.2, 0.1, 0.3])
    imgs = {}
    for mode in ("albedo", "textureless", "diffuse"):
        img, _, _ = render_stage1(planes, heads, s, cam, n_samples=24,
                                  background="black", shading=mode,
                                  light_dir=light)
        imgs[mode] = img.data
        assert np.isfinite(img.data).all()
    tex = imgs["textureless"]
    assert np.allclose(tex[..., 0], tex[..., 1]) and np.allclose(tex[..., 1], tex[..., 2])
    assert not np.allclose(imgs["albedo"], imgs["diffuse"])
    assert not np.allclose(imgs["albedo"], imgs["textureless"])


def test_render_batch_invariants_and_audit_detects_corruption():
    _, heads, planes = _sphere_setup()
    s = T.parameter(np.array(10.0))
    cam = orbit_camera(75.0, -5.0, distance=3.0, fov_y=60.0, width=15, height=15)
    _, _, batch = render_stage1(planes, heads, s, cam, n_samples=20)
    audit_batch(batch)
    assert (np.diff(batch.t_values, axis=1) > 0).all()
    assert batch.transmittance[:, 0].max() == 1.0  # T_1 = 1 on every ray
    assert batch.weights.sum(axis=1).max() <= 1.0 + 1e-5
    bad = batch
    bad.transmittance = batch.transmittance[:, ::-1].copy()
    with pytest.raises(AssertionError):
        audit_batch(bad)


def test_render_gradcheck_through_pipeline():
    with T.using_dtype(np.float64):
        cfg = HeadConfig(triplane_channels=4, octaves=2, hidden=8, seed=9)
        heads = FieldHeads(cfg)
        rng = np.random.default_rng(1)
        for p in heads.parameters().values():
            p.data = p.data + rng.normal(0, 0.05, p.data.shape)
        plane_data = rng.normal(0, 0.1, (3, 4, 6, 6))
        cam = orbit_camera(20.0, 15.0, distance=3.0, fov_y=50.0, width=5, height=5)

        def run(planes_arr, s_val):
            planes = T.parameter(planes_arr)
            s = T.parameter(np.array(s_val))
            img, op, _ = render_stage1(planes, heads, s, cam, n_samples=6,
                                       background="gray")
            loss = T.tmean(img) + 0.1 * T.tmean(op)
            return loss, planes, s

        loss, planes, s = run(plane_data, 10.0)
        T.backward(loss)
        got_plane = planes.grad.copy()
        got_s = float(s.grad)

        probe = [(0, 1, 2, 3), (1, 0, 4, 4), (2, 3, 1, 5), (0, 2, 0, 0)]
        for idx in probe:
            h = 1e-4
            up = plane_data.copy(); up[idx] += h
            dn = plane_data.copy(); dn[idx] -= h
            fd = (float(run(up, 10.0)[0].data) - float(run(dn, 10.0)[0].data)) / (2 * h)
            assert max_rel_err(np.array(got_plane[idx]), np.array(fd), floor=1e-7) < 2e-3
        h = 1e-4
        fd_s = (float(run(plane_data, 10.0 + h)[0].data)
                - float(run(plane_data, 10.0 - h)[0].data)) / (2 * h)
        assert max_rel_err(np.array(got_s), np.array(fd_s), floor=1e-9) < 2e-3
