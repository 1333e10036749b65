"""Finite-difference gradient checking for the whole differentiable surface.

Every tensor op is exercised on small random inputs, followed by the two
end-to-end render paths: a tiny volumetric scene and a one-triangle rasterized
scene. Everything runs in 64-bit; the pass criterion is a maximum relative
error below 1e-3 between reverse-mode and central-difference gradients.
"""

from __future__ import annotations

import numpy as np

from . import raster, volumetric
from . import tensor as T
from .camera import orbit_camera
from .fields import FieldHeads, HeadConfig
from .triplane import TriplaneConfig, TriplaneGenerator

PASS_THRESHOLD = 1e-3


def _rel_err(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    scale = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / scale


def _check_params(forward, params: list[T.Tensor], h: float = 1e-6,
                  max_coords: int = 24, rng=None) -> float:
    """Compare reverse-mode grads of scalar forward() against central
    differences over (a sample of) each parameter's coordinates."""
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    T.backward(forward())
    worst = 0.0
    for p in params:
        grad = p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        count = flat.size
        coords = (np.arange(count) if count <= max_coords
                  else rng.choice(count, size=max_coords, replace=False))
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            hi = forward().item()
            flat[c] = keep - h
            lo = forward().item()
            flat[c] = keep
            numeric = (hi - lo) / (2.0 * h)
            worst = max(worst, _rel_err(float(grad[c]), numeric))
    return worst


# ---------------------------------------------------------------------------
# op-level checks
# ---------------------------------------------------------------------------

def _op_cases(rng):
    """(name, params, forward) triples covering every differentiable op.

    Each forward is a frozen random-weighted sum of the op output so that
    every output coordinate influences the scalar and repeated calls are
    bit-identical (a requirement for finite differencing).
    """
    def t(shape, lo=-1.0, hi=1.0):
        return T.parameter(rng.uniform(lo, hi, size=shape))

    cases = []

    def add_case(name, params, build):
        w = rng.standard_normal(build().shape)

        def fwd(build=build, w=w):
            return (build() * T.Tensor(w)).sum()

        cases.append((name, params, fwd))

    a, b = t((3, 4)), t((3, 4))
    add_case("add", [a, b], lambda: a + b)
    add_case("sub", [a, b], lambda: a - b)
    add_case("mul", [a, b], lambda: a * b)
    d = t((3, 4), 0.5, 1.5)
    add_case("div", [a, d], lambda: a / d)
    s = t(())
    add_case("scalar-broadcast", [a, s], lambda: a * s + s)
    suf = t((4,))
    add_case("suffix-broadcast", [a, suf], lambda: a + suf)
    m1, m2 = t((3, 4)), t((3, 4))
    add_case("maximum", [m1, m2], lambda: T.maximum(m1, m2))
    add_case("minimum", [m1, m2], lambda: T.minimum(m1, m2))
    n = t((3, 4))
    add_case("neg", [n], lambda: -n)
    pw = t((3, 4), 0.5, 1.5)
    add_case("powc", [pw], lambda: pw ** 2.5)
    e = t((3, 4))
    add_case("exp", [e], lambda: T.exp(e))
    lg = t((3, 4), 0.5, 2.0)
    add_case("log", [lg], lambda: T.log(lg))
    sq = t((3, 4), 0.5, 2.0)
    add_case("sqrt", [sq], lambda: T.sqrt(sq))
    sn = t((3, 4))
    add_case("sin", [sn], lambda: T.sin(sn))
    add_case("cos", [sn], lambda: T.cos(sn))
    th = t((3, 4))
    add_case("tanh", [th], lambda: T.tanh(th))
    ab = t((3, 4), 0.2, 1.0)  # stay off the kink at zero
    add_case("abs", [ab], lambda: T.absolute(ab))
    sg = t((3, 4))
    add_case("sigmoid", [sg], lambda: T.sigmoid(sg))
    rl = t((3, 4), 0.2, 1.0)  # positive side only: kink at zero
    add_case("relu", [rl], lambda: T.relu(rl))
    gl = t((3, 4))
    add_case("gelu", [gl], lambda: T.gelu(gl))
    sm = t((5, 6))
    add_case("sum", [sm], lambda: sm.sum(axis=1))
    add_case("mean", [sm], lambda: sm.mean(axis=0))
    mm1, mm2 = t((3, 5)), t((5, 2))
    add_case("matmul", [mm1, mm2], lambda: mm1 @ mm2)
    rs = t((2, 6))
    add_case("reshape", [rs], lambda: rs.reshape(3, 4))
    tr = t((2, 3, 4))
    add_case("transpose", [tr], lambda: tr.transpose(2, 0, 1))
    c1, c2 = t((2, 3)), t((2, 3))
    add_case("concat", [c1, c2], lambda: T.concat([c1, c2], axis=1))
    add_case("stack", [c1, c2], lambda: T.stack([c1, c2], axis=0))
    gi = t((4, 5))
    add_case("getitem", [gi], lambda: gi[1:3, ::2])
    gr = t((6, 3))
    gr_idx = np.array([0, 2, 2, 5])
    add_case("gather_rows", [gr], lambda: T.gather_rows(gr, gr_idx))
    sc = t((3, 2))
    sc_idx = np.array([1, 3, 4])
    sc_base = rng.standard_normal((6, 2))
    add_case("scatter_rows", [sc],
             lambda: T.scatter_rows(sc_base, sc_idx, sc))
    bc = t((3, 1))
    add_case("bcast_to", [bc], lambda: T.bcast_to(bc, (3, 4)))
    wa, wb = t((3, 4)), t((3, 4))
    w_mask = rng.uniform(size=(3, 4)) > 0.5
    add_case("where", [wa, wb], lambda: T.where(w_mask, wa, wb))
    sf = t((4, 5))
    add_case("softmax", [sf], lambda: T.softmax(sf, axis=-1))
    cp = t((3, 5), 0.2, 0.9)
    add_case("exclusive_cumprod", [cp],
             lambda: T.exclusive_cumprod(cp, axis=-1))
    cv_x, cv_w = t((2, 3, 5, 5)), t((4, 3, 3, 3))
    add_case("conv2d", [cv_x, cv_w], lambda: T.conv2d(cv_x, cv_w, padding=1))
    dw_x, dw_w = t((1, 4, 5, 5)), t((4, 1, 3, 3))
    add_case("conv2d-grouped", [dw_x, dw_w],
             lambda: T.conv2d(dw_x, dw_w, padding=1, groups=4))
    pl = t((2, 6, 6))
    uv = T.parameter(rng.uniform(-0.8, 0.8, size=(7, 2)))
    add_case("interp_bilinear", [pl, uv], lambda: T.interp_bilinear(pl, uv))
    return cases


def _check_stop_grad(rng) -> float:
    """stop_grad blocks its branch, so finite differences of the same
    expression would disagree by design. Check against the closed form
    instead: d/dx sum(w * x * sg(x)) == w * x exactly."""
    x = T.parameter(rng.uniform(0.5, 1.5, size=(3, 4)))
    w = rng.standard_normal((3, 4))
    x.zero_grad()
    T.backward((T.Tensor(w) * x * T.stop_grad(x)).sum())
    expected = w * x.data
    worst = 0.0
    for g, e in zip(x.grad.ravel(), expected.ravel()):
        worst = max(worst, _rel_err(float(g), float(e)))
    return worst


# ---------------------------------------------------------------------------
# pipeline checks
# ---------------------------------------------------------------------------

class _FixedEmbedding:
    def __init__(self, rows: np.ndarray):
        self._rows = rows

    @property
    def mean(self) -> np.ndarray:
        return self._rows.mean(axis=0)

    @property
    def token_rows(self) -> np.ndarray:
        return self._rows


def _stage1_case(rng):
    """Tiny full volumetric path: embedding through generator, heads,
    sampling, compositing, and diffuse shading."""
    gen = TriplaneGenerator(TriplaneConfig(
        channels=4, plane_size=8, blocks=1, heads=2, text_channels=8, seed=0))
    heads = FieldHeads(HeadConfig(
        triplane_channels=4, octaves=2, hidden=8, grid_res=8, seed=1))
    s = T.parameter(np.array(3.0), name="s")
    cam = orbit_camera(25.0, 20.0, distance=3.0, fov_y=50.0, width=8, height=8)
    emb = _FixedEmbedding(rng.standard_normal((3, 8)))
    weights = rng.standard_normal((8, 8, 3))

    def forward():
        planes = gen.generate(emb)
        image, _, _ = volumetric.render_stage1(
            planes, heads, s, cam, n_samples=8, background="gray",
            shading="diffuse", light_dir=np.array([0.3, -0.5, 0.8]))
        return (image * T.Tensor(weights)).sum()

    params = (list(gen.parameters().values())
              + list(heads.parameters().values()) + [s])
    return params, forward


class _BareMesh:
    def __init__(self, vertices, colors, faces):
        self.vertices, self.colors, self.faces = vertices, colors, faces


def _stage2_case(rng):
    """One-triangle rasterized path: vertex positions and colors through
    barycentric interpolation and diffuse shading at fixed coverage."""
    # Camera at azimuth 0 sits on +x looking back, so spread the triangle
    # across the y-z plane to face it.
    verts = T.parameter(np.array([[0.05, -0.6, -0.5],
                                  [-0.02, 0.7, -0.4],
                                  [0.03, 0.0, 0.8]]))
    colors = T.parameter(rng.uniform(0.2, 0.8, size=(3, 3)))
    faces = np.array([[0, 1, 2]], dtype=np.int64)
    cam = orbit_camera(0.0, 0.0, distance=3.0, fov_y=45.0, width=8, height=8)
    weights = rng.standard_normal((8, 8, 3))
    frag = raster.rasterize(verts.data, faces, cam)  # coverage is frozen
    if frag.rows.size == 0:
        faces = faces[:, ::-1].copy()  # wound away from the eye: flip it
        frag = raster.rasterize(verts.data, faces, cam)
    if frag.rows.size == 0:
        raise RuntimeError("gradcheck triangle rasterized to no pixels")

    def forward():
        mesh = _BareMesh(verts, colors, faces)
        image = raster.shade_fragments(mesh, frag, cam, shading="diffuse",
                                       light_dir=np.array([0.2, 0.1, 0.95]),
                                       background="black")
        return (image * T.Tensor(weights)).sum()

    return [verts, colors], forward


def run_gradcheck(verbose: bool = False, seed: int = 0) -> dict[str, float]:
    """Run every check in float64; returns {section: max rel err} plus an
    "overall" entry that is their maximum."""
    results: dict[str, float] = {}
    with T.using_dtype(np.float64):
        rng = np.random.default_rng(seed)
        for name, params, fwd in _op_cases(rng):
            results[f"op.{name}"] = _check_params(fwd, params, rng=rng)
            if verbose:
                print(f"  op.{name:22s} {results[f'op.{name}']:.3e}")
        results["op.stop_grad"] = _check_stop_grad(rng)
        if verbose:
            print(f"  op.stop_grad           {results['op.stop_grad']:.3e}")
        params, fwd = _stage1_case(rng)
        results["pipeline.stage1"] = _check_params(
            fwd, params, h=1e-5, max_coords=4, rng=rng)
        if verbose:
            print(f"  pipeline.stage1        {results['pipeline.stage1']:.3e}")
        params, fwd = _stage2_case(rng)
        results["pipeline.stage2"] = _check_params(fwd, params, h=1e-6,
                                                   rng=rng)
        if verbose:
            print(f"  pipeline.stage2        {results['pipeline.stage2']:.3e}")
    results["overall"] = max(results.values())
    return results
