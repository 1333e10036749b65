"""Z-buffer rasterizer and differentiable fragment shading."""

import math

import numpy as np
import pytest

from promptmesh import tensor as T
from promptmesh.camera import Camera, orbit_camera
from promptmesh.fields import FieldHeads, HeadConfig
from promptmesh.raster import (FragmentBuffer, rasterize, render_stage2,
                               shade_fragments, _project)
from promptmesh.tetmesh import TetGrid, build_grid, march_tets

from oracles import fd_grad, max_rel_err, rasterize_naive


def _front_cam(width=21, height=21, fov=40.0, dist=3.0):
    return Camera(eye=np.array([0.0, 0.0, dist]), look_at=np.zeros(3),
                  up=np.array([0.0, 1.0, 0.0]), fov_y=fov,
                  width=width, height=height)


def _tensor_mesh(verts, colors, faces):
    class M:
        pass
    m = M()
    m.vertices = T.as_tensor(np.asarray(verts, dtype=T.default_dtype()))
    m.colors = T.as_tensor(np.asarray(colors, dtype=T.default_dtype()))
    m.faces = np.asarray(faces, dtype=np.int64)
    m.empty = m.faces.shape[0] == 0
    return m


def test_single_huge_triangle_covers_every_pixel():
    cam = _front_cam()
    verts = np.array([[-50.0, -50.0, 0.0], [50.0, -50.0, 0.0], [0.0, 80.0, 0.0]])
    frag = rasterize(verts, np.array([[0, 1, 2]]), cam)
    assert frag.rows.size == cam.width * cam.height
    assert (frag.face == 0).all()
    assert np.allclose(frag.weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(frag.depth, 3.0, atol=1e-9)  # plane z=0, camera at z=3


def test_depth_order_and_tie_break():
    cam = _front_cam()
    tri = np.array([[-50.0, -50.0, 0.0], [50.0, -50.0, 0.0], [0.0, 80.0, 0.0]])
    # face 0 at z=1 (depth 2), face 1 at z=2 (depth 1): nearer face 1 wins
    verts = np.concatenate([tri + [0, 0, 1.0], tri + [0, 0, 2.0]])
    frag = rasterize(verts, np.array([[0, 1, 2], [3, 4, 5]]), cam)
    assert (frag.face == 1).all()
    # exact depth tie: the lower face id wins
    verts2 = np.concatenate([tri, tri])
    frag2 = rasterize(verts2, np.array([[0, 1, 2], [3, 4, 5]]), cam)
    assert (frag2.face == 0).all()


def test_backface_culling():
    cam = _front_cam()
    verts = np.array([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 1.0, 0.0]])
    front = rasterize(verts, np.array([[0, 1, 2]]), cam)
    back = rasterize(verts, np.array([[0, 2, 1]]), cam)
    assert front.rows.size > 0
    assert back.rows.size == 0


def test_matches_bruteforce_oracle_on_random_meshes():
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        n_tri = (40, 120, 200)[seed]
        verts = rng.uniform(-0.8, 0.8, (50, 3))
        faces = rng.integers(0, 50, (n_tri, 3))
        ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) \
            & (faces[:, 0] != faces[:, 2])
        faces = faces[ok]
        cam = orbit_camera(35.0, 20.0, distance=3.0, fov_y=50.0,
                           width=32, height=32)
        frag = rasterize(verts, faces, cam)
        right, up, fwd = cam.basis()
        want = rasterize_naive(verts, faces, cam.eye, right, up, fwd,
                               cam.tan_half_fov, cam.width, cam.height)
        got = {(int(r), int(c)): (int(f), w, d)
               for r, c, f, w, d in zip(frag.rows, frag.cols, frag.face,
                                        frag.weights, frag.depth)}
        assert set(got) == set(want)
        for key, (fi, w, d) in want.items():
            gf, gw, gd = got[key]
            assert gf == fi, f"face mismatch at {key} (seed {seed})"
            assert np.abs(gw - w).max() < 1e-5
            assert abs(gd - d) < 1e-9


def _sphere_mesh(r=16):
    grid = build_grid(r)
    sdf = np.linalg.norm(grid.vertices, axis=1) - 0.5
    grid.sdf = T.as_tensor(sdf.astype(T.default_dtype()))
    return march_tets(grid), grid


def test_fragment_invariants_on_sphere_mesh():
    mesh, _ = _sphere_mesh()
    cam = orbit_camera(25.0, 30.0, distance=3.0, fov_y=50.0, width=33, height=33)
    frag = rasterize(mesh.vertices.data, mesh.faces, cam)
    assert frag.rows.size > 0
    assert np.abs(frag.weights.sum(axis=1) - 1.0).max() < 1e-5
    assert frag.weights.min() >= -1e-6
    # perspective weights reconstruct the pixel center
    v = mesh.vertices.data.astype(np.float64)
    tri = mesh.faces[frag.face]
    recon = (frag.weights[:, :, None] * v[tri]).sum(axis=1)
    rows, cols, z = _project(cam, recon)
    assert np.abs(rows - frag.rows).max() <= 0.5 + 1e-6
    assert np.abs(cols - frag.cols).max() <= 0.5 + 1e-6
    assert max_rel_err(z, frag.depth) < 1e-9


def test_shade_uniform_color_with_light_along_normal():
    cam = _front_cam(width=15, height=15)
    c = np.array([0.3, 0.7, 0.2])
    mesh = _tensor_mesh(
        [[-5.0, -5.0, 0.0], [5.0, -5.0, 0.0], [0.0, 8.0, 0.0]],
        [c, c, c], [[0, 1, 2]])
    frag = rasterize(mesh.vertices.data, mesh.faces, cam)
    img = shade_fragments(mesh, frag, cam, shading="diffuse",
                          light_dir=np.array([0.0, 0.0, 1.0]),
                          background="black")
    covered = img.data.reshape(-1, 3)[frag.rows * cam.width + frag.cols]
    assert np.abs(covered - c).max() < 1e-6


def test_shade_centroid_pixel_averages_vertex_colors():
    cam = _front_cam(width=15, height=15, fov=60.0)
    # symmetric triangle at constant depth, centroid on the optical axis
    verts = [[0.0, 1.0, 0.0], [-0.9, -0.5, 0.0], [0.9, -0.5, 0.0]]
    colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    mesh = _tensor_mesh(verts, colors, [[0, 1, 2]])
    frag = rasterize(mesh.vertices.data, mesh.faces, cam)
    img = shade_fragments(mesh, frag, cam, background="black")
    center = img.data[7, 7]
    assert np.abs(center - 1.0 / 3.0).max() < 1e-6


def test_color_gradient_equals_barycentric_weights():
    with T.using_dtype(np.float64):
        cam = _front_cam(width=9, height=9)
        verts = [[-2.0, -2.0, 0.0], [2.0, -2.0, 0.0], [0.0, 3.0, 0.0]]
        colors = np.full((3, 3), 0.5)
        mesh = _tensor_mesh(verts, colors, [[0, 1, 2]])
        mesh.colors = T.parameter(colors)
        frag = rasterize(mesh.vertices.data, mesh.faces, cam)
        img = shade_fragments(mesh, frag, cam, background="black")
        g_img = np.zeros(img.shape)
        rng = np.random.default_rng(0)
        g_img[frag.rows, frag.cols] = rng.uniform(0.3, 1.0,
                                                  (frag.rows.size, 3))
        T.backward(T.tsum(img * T.as_tensor(g_img)))
        tri = mesh.faces[frag.face]
        want = np.zeros((3, 3))
        for k in range(frag.rows.size):
            for i in range(3):
                want[tri[k, i]] += frag.weights[k, i] * g_img[frag.rows[k],
                                                              frag.cols[k]]
        assert np.abs(mesh.colors.grad - want).max() < 1e-10

        def loss_fn(cflat):
            m2 = _tensor_mesh(verts, cflat.reshape(3, 3), [[0, 1, 2]])
            im = shade_fragments(m2, frag, cam, background="black")
            return float((im.data * g_img).sum())

        fd = fd_grad(loss_fn, colors.ravel())
        assert max_rel_err(mesh.colors.grad.ravel(), fd) < 1e-6


def test_position_gradients_match_fd_with_fixed_coverage():
    with T.using_dtype(np.float64):
        cam = _front_cam(width=11, height=11)
        verts = np.array([[-1.3, -1.1, 0.2], [1.2, -0.9, -0.1], [0.1, 1.4, 0.3]])
        colors = np.array([[0.9, 0.2, 0.1], [0.1, 0.8, 0.3], [0.2, 0.3, 0.9]])
        mesh = _tensor_mesh(verts, colors, [[0, 1, 2]])
        mesh.vertices = T.parameter(verts)
        frag = rasterize(verts, mesh.faces, cam)
        assert frag.rows.size > 3
        g_img = np.zeros((11, 11, 3))
        rng = np.random.default_rng(3)
        g_img[frag.rows, frag.cols] = rng.uniform(-1.0, 1.0,
                                                  (frag.rows.size, 3))
        light = np.array([0.3, 0.4, 0.9])
        img = shade_fragments(mesh, frag, cam, shading="diffuse",
                              light_dir=light, background="black")
        T.backward(T.tsum(img * T.as_tensor(g_img)))

        def loss_fn(vflat):
            m2 = _tensor_mesh(vflat.reshape(3, 3), colors, [[0, 1, 2]])
            im = shade_fragments(m2, frag, cam, shading="diffuse",
                                 light_dir=light, background="black")
            return float((im.data * g_img).sum())

        fd = fd_grad(loss_fn, verts.ravel(), h=1e-6)
        assert max_rel_err(mesh.vertices.grad.ravel(), fd, floor=1e-5) < 1e-4


def test_render_stage2_sphere_silhouette_and_determinism():
    cfg = HeadConfig(triplane_channels=6, octaves=2, hidden=16, seed=4)
    heads = FieldHeads(cfg)
    planes = T.Tensor(np.zeros((3, 6, 8, 8), dtype=T.default_dtype()))
    grid = build_grid(16, cfg.bound)
    cam = orbit_camera(30.0, 20.0, distance=3.0, fov_y=50.0, width=65, height=65)
    img1, mesh, frag = render_stage2(planes, heads, grid, cam,
                                     background="white")
    img2, _, _ = render_stage2(planes, heads, build_grid(16, cfg.bound), cam,
                               background="white")
    assert np.array_equal(img1.data, img2.data)
    assert not mesh.empty
    # silhouette: disc of angular radius asin(0.5/3) around the image center
    ang = math.asin(0.5 / 3.0)
    pix_radius = (cam.height / 2.0) * math.tan(ang) / cam.tan_half_fov
    covered = np.zeros((65, 65), dtype=bool)
    covered[frag.rows, frag.cols] = True
    rr, cc = np.meshgrid(np.arange(65), np.arange(65), indexing="ij")
    dist = np.hypot(rr - 32, cc - 32)
    assert covered[dist <= pix_radius - 1.5].all()
    assert not covered[dist >= pix_radius + 1.5].any()


def test_render_stage2_high_resolution_smoke():
    cfg = HeadConfig(triplane_channels=6, octaves=2, hidden=16, seed=4)
    heads = FieldHeads(cfg)
    planes = T.Tensor(np.zeros((3, 6, 8, 8), dtype=T.default_dtype()))
    grid = build_grid(16, cfg.bound)
    cam = orbit_camera(10.0, 15.0, distance=3.0, fov_y=35.0,
                       width=512, height=512)
    img, mesh, frag = render_stage2(planes, heads, grid, cam,
                                    track_gradients=False)
    assert img.shape == (512, 512, 3)
    assert np.isfinite(img.data).all()
    assert frag.rows.size > 10000


def test_render_stage2_empty_mesh_gives_background():
    cfg = HeadConfig(triplane_channels=6, octaves=2, hidden=16, seed=4)
    heads = FieldHeads(cfg)
    planes = T.Tensor(np.zeros((3, 6, 8, 8), dtype=T.default_dtype()))
    grid = build_grid(4, bound=0.2)  # entirely inside the initial sphere
    cam = orbit_camera(0.0, 0.0, width=7, height=7)
    with pytest.warns(RuntimeWarning, match="empty"):
        img, mesh, frag = render_stage2(planes, heads, grid, cam,
                                        background="gray")
    assert mesh.empty and frag.rows.size == 0
    assert np.array_equal(img.data, np.full((7, 7, 3), 0.5,
                                            dtype=img.data.dtype))
