import numpy as np
import pytest

from mpf.agents import (
    ConjugateProxAgent,
    DataProxAgent,
    DenoiserAgent,
    DenoiserConfig,
    ProxConfig,
    ProxSolverError,
    conjugate_gradient,
    conjugate_prox_data,
    denoise_slicewise,
    default_sigma,
    multi_slice_agents,
    prox_data,
    tv_prox,
)
from mpf.pose import CUBIC, RigidPose, apply_pose, inverse_pose
from mpf.projector import ScanGeometry, Sinogram, forward_project
from mpf.volume import Volume, nrmse


def dense_matrix(vol, g):
    cols = []
    for j in range(vol.data.size):
        e = np.zeros(vol.data.size)
        e[j] = 1.0
        cols.append(forward_project(vol.like(e), g).data.ravel())
    return np.array(cols).T


def dense_prox(A, lam, y, v, sigma):
    H = A.T @ (lam[:, None] * A) + np.eye(A.shape[1]) / sigma**2
    return np.linalg.solve(H, A.T @ (lam * y) + v / sigma**2)


def tiny_problem(rng, dims=(2, 2, 1), views=2):
    vol = Volume.zeros(dims)
    g = ScanGeometry(
        "parallel3d", tuple(rng.uniform(0, np.pi, views)), dims[2] + 1, 3, float(rng.uniform(0.6, 1.2))
    )
    return vol, g, dense_matrix(vol, g)


def test_scalar_closed_form():
    vol = Volume.zeros((1, 1, 1))
    g = ScanGeometry("parallel3d", (0.0,), 1, 1)
    cfg = ProxConfig(Sinogram(g, [2.0], [1.0]), sigma=1.0, cg_tol=1e-12)
    assert prox_data(vol, cfg).data.item() == pytest.approx(1.0, rel=1e-12)


def test_zero_weights_return_input():
    rng = np.random.default_rng(0)
    vol, g, _ = tiny_problem(rng, (3, 3, 2), 3)
    v = vol.like(rng.standard_normal(vol.shape))
    s = Sinogram(g, rng.standard_normal(g.shape), 0.0)
    assert prox_data(v, ProxConfig(s, 0.5)) == v


def test_cg_matches_dense_solve():
    rng = np.random.default_rng(1)
    vol, g, A = tiny_problem(rng)
    y = rng.standard_normal(A.shape[0])
    lam = rng.uniform(0.5, 2, A.shape[0])
    v = rng.standard_normal(4)
    cfg = ProxConfig(Sinogram(g, y, lam), 0.8, cg_tol=1e-13)
    x = prox_data(vol.like(v), cfg).data.ravel()
    expected = dense_prox(A, lam, y, v, 0.8)
    assert np.linalg.norm(x - expected) <= 1e-8 * np.linalg.norm(expected)


def test_prox_optimality_residual():
    rng = np.random.default_rng(2)
    vol = Volume.zeros((6, 6, 4))
    g = ScanGeometry.circular("parallel3d", 5, 5, 9)
    s = Sinogram(g, rng.random(g.shape), rng.uniform(0.5, 1.5, g.shape))
    v = vol.like(rng.random(vol.shape))
    cfg = ProxConfig(s, default_sigma(vol, s), cg_tol=1e-6, cg_max_iters=200)
    x = prox_data(v, cfg)
    from mpf.projector import apply_normal_operator, back_project

    rhs = back_project(Sinogram(g, s.weights * s.data, 1.0), vol).data + v.data / cfg.sigma**2
    res = apply_normal_operator(x, s.weights, g, cfg.sigma).data - rhs
    assert np.linalg.norm(res) / np.linalg.norm(rhs) < cfg.cg_tol


def test_prox_firmly_nonexpansive_dense():
    rng = np.random.default_rng(3)
    vol, g, A = tiny_problem(rng, (2, 2, 2), 3)
    y = rng.standard_normal(A.shape[0])
    lam = rng.uniform(0.1, 3, A.shape[0])
    cfg = ProxConfig(Sinogram(g, y, lam), 1.3, cg_tol=1e-13)
    for _ in range(20):
        v1, v2 = rng.standard_normal(8), rng.standard_normal(8)
        f1 = prox_data(vol.like(v1), cfg).data.ravel()
        f2 = prox_data(vol.like(v2), cfg).data.ravel()
        d1, d2 = dense_prox(A, lam, y, v1, 1.3), dense_prox(A, lam, y, v2, 1.3)
        assert np.allclose(f1, d1, atol=1e-9) and np.allclose(f2, d2, atol=1e-9)
        # firm nonexpansiveness: ||F1 - F2||^2 <= <F1 - F2, v1 - v2>
        assert np.linalg.norm(f1 - f2) ** 2 <= np.dot(f1 - f2, v1 - v2) + 1e-12
        assert np.linalg.norm(f1 - f2) <= np.linalg.norm(v1 - v2)


def test_cg_divergence_detected():
    # a nonsymmetric operator breaks CG; its residual grows from the first step
    rng = np.random.default_rng(0)
    H = rng.standard_normal((12, 12))
    b = rng.standard_normal(12)
    with pytest.raises(ProxSolverError) as err:
        conjugate_gradient(lambda x: H @ x, b, np.zeros(12), 1e-14, 200)
    trace = err.value.trace
    assert len(trace) == 6
    assert all(trace[i + 1] > trace[i] for i in range(5))


def test_conjugate_prox_identity_pose_is_bitwise():
    rng = np.random.default_rng(4)
    vol = Volume.zeros((5, 5, 3))
    g = ScanGeometry.circular("parallel3d", 4, 4, 7)
    s = Sinogram(g, rng.random(g.shape), 1.0)
    cfg = ProxConfig(s, 0.7)
    v = vol.like(rng.random(vol.shape))
    a = conjugate_prox_data(v, cfg, RigidPose.identity(CUBIC))
    b = prox_data(v, cfg)
    assert a.data.tobytes() == b.data.tobytes()


def test_conjugate_prox_zero_weights_is_round_trip():
    rng = np.random.default_rng(5)
    vol = Volume.zeros((8, 8, 8))
    g = ScanGeometry.circular("parallel3d", 3, 8, 8)
    cfg = ProxConfig(Sinogram(g, rng.random(g.shape), 0.0), 1.0)
    v = vol.like(rng.random(vol.shape))
    p = RigidPose.from_euler(45, 30, interp=CUBIC)
    out = conjugate_prox_data(v, cfg, p)
    expected = apply_pose(apply_pose(v, p), inverse_pose(p))
    assert np.allclose(out.data, expected.data, rtol=0, atol=1e-12)
    assert not np.allclose(out.data, v.data, atol=1e-6)


def smooth_object(n=16):
    c = 0.5 * (n - 1)
    z, y, x = np.meshgrid(*[np.arange(n) - c] * 3, indexing="ij")
    d = np.exp(-((x / 4.0) ** 2 + (y / 3.0) ** 2 + (z / 3.5) ** 2)) + 0.5 * np.exp(-(((x - 2) / 2.0) ** 2 + (y / 2.0) ** 2 + ((z + 1) / 2.0) ** 2))
    return Volume.zeros((n, n, n)).like(0.02 * d)


def test_conjugate_prox_moves_noisy_input_towards_truth():
    rng = np.random.default_rng(6)
    truth = smooth_object()
    p = RigidPose.from_euler(45, 30, interp=CUBIC)
    g = ScanGeometry.circular("parallel3d", 24, 18, 24)
    s = forward_project(apply_pose(truth, p), g)
    cfg = ProxConfig(s, default_sigma(truth, s), cg_max_iters=100)
    noisy = truth.like(truth.data + 0.004 * rng.standard_normal(truth.shape))
    out = conjugate_prox_data(noisy, cfg, p)
    assert nrmse(out, truth).nrmse < nrmse(noisy, truth).nrmse


def test_agent_objects():
    rng = np.random.default_rng(7)
    vol = Volume.zeros((4, 4, 4))
    g = ScanGeometry.circular("parallel3d", 3, 4, 6)
    cfg = ProxConfig(Sinogram(g, rng.random(g.shape), 1.0), 1.0)
    v = vol.like(rng.random(vol.shape))
    assert DataProxAgent(cfg)(v) == prox_data(v, cfg)
    pose = RigidPose.from_euler(10, 0)
    assert ConjugateProxAgent(cfg, pose)(v) == conjugate_prox_data(v, cfg, pose)
    kinds = [a.kind for a in multi_slice_agents("tv2d", 0.1)]
    assert kinds == ["denoiser_xy", "denoiser_xz", "denoiser_yz"]
    assert DenoiserAgent(DenoiserConfig("tv3d", 0.1, "xyz")).kind == "denoiser_xyz"


def test_config_validation():
    s = Sinogram(ScanGeometry("parallel3d", (0.0,), 1, 1), [0.0], 1.0)
    for kw in [dict(sigma=0.0), dict(sigma=1.0, cg_tol=1.0), dict(sigma=1.0, cg_max_iters=0)]:
        with pytest.raises(ValueError):
            ProxConfig(s, **kw)
    with pytest.raises(ValueError):
        DenoiserConfig("tv2d", -1.0)
    with pytest.raises(ValueError):
        DenoiserConfig("bm3d", 1.0)
    with pytest.raises(ValueError):
        DenoiserConfig("tv3d", 1.0, "xy")


# ---------------------------------------------------------------------------
# denoisers


@pytest.mark.parametrize("plane", ["xy", "xz", "yz"])
def test_identity_and_zero_strength(plane):
    rng = np.random.default_rng(8)
    v = Volume.zeros((5, 6, 7)).like(rng.random((7, 6, 5)))
    assert denoise_slicewise(v, DenoiserConfig("identity", 3.0, plane)) == v
    for method in ("tv2d", "gaussian2d"):
        out = denoise_slicewise(v, DenoiserConfig(method, 0.0, plane))
        assert np.max(np.abs(out.data - v.data)) < 1e-10


@pytest.mark.parametrize("method,strength", [("tv2d", 0.3), ("tv2d", 5.0), ("gaussian2d", 1.0), ("gaussian2d", 0.6)])
@pytest.mark.parametrize("plane", ["xy", "xz", "yz"])
def test_constant_volume_preserved(method, strength, plane):
    n = 14
    v = Volume.zeros((n, n, n)).like(np.full((n, n, n), 0.7))
    out = denoise_slicewise(v, DenoiserConfig(method, strength, plane)).data
    if method == "gaussian2d":
        # zero boundary: only pixels farther than the kernel radius keep the constant
        r = int(np.ceil(3.0 * strength))
        sl = [slice(None)] * 3
        for a in {"xy": (1, 2), "xz": (0, 2), "yz": (0, 1)}[plane]:
            sl[a] = slice(r, n - r)
        out = out[tuple(sl)]
    assert np.max(np.abs(out - 0.7)) < 1e-8


def test_slices_are_independent():
    rng = np.random.default_rng(9)
    v = Volume.zeros((8, 8, 8)).like(rng.random((8, 8, 8)))
    out = denoise_slicewise(v, DenoiserConfig("tv2d", 0.2, "xz")).data
    # the xz family is indexed by y (array axis 1)
    single = tv_prox(v.data[:, 3, :], 0.2, (0, 1), 50)
    assert np.allclose(out[:, 3, :], single, atol=1e-14)


def test_gaussian_kernel_shape():
    n = 15
    d = np.zeros((n, n, n))
    d[7, 7, 7] = 1.0
    out = denoise_slicewise(Volume.zeros((n, n, n)).like(d), DenoiserConfig("gaussian2d", 1.2, "xy")).data
    assert np.all(out[6] == 0) and np.all(out[8] == 0)
    yy, xx = np.meshgrid(np.arange(n) - 7, np.arange(n) - 7, indexing="ij")
    k = np.exp(-(xx**2 + yy**2) / (2 * 1.2**2)) * (np.abs(xx) <= 4) * (np.abs(yy) <= 4)
    assert np.allclose(out[7], k / k.sum(), atol=1e-3 * k.max() / k.sum())
    assert out[7].sum() == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(4))
def test_tv_objective_monotone(seed):
    rng = np.random.default_rng(seed)
    b = rng.random((3, 12, 12))
    hist = []
    tv_prox(b, float(rng.uniform(0.05, 0.5)), (1, 2), 60, hist)
    hist = np.array(hist)
    assert hist.shape == (61, 3)
    assert np.all(np.diff(hist, axis=0) <= 0)
    assert np.all(hist[-1] < hist[0])


@pytest.mark.parametrize("axes", [(0, 1), (0, 1, 2)])
def test_tv_prox_matches_convex_solver(axes):
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(10)
    shape = (7, 6) if len(axes) == 2 else (5, 4, 6)
    b = rng.random(shape)
    lam = 0.15
    n = int(np.prod(shape))
    u = cp.Variable(n)
    # forward differences, zero at the far edge of each axis
    rows = []
    for a in axes:
        D = np.zeros((n, n))
        idx = np.arange(n).reshape(shape)
        sl = [slice(None)] * len(shape)
        sl[a] = slice(0, -1)
        nb = [slice(None)] * len(shape)
        nb[a] = slice(1, None)
        i0, i1 = idx[tuple(sl)].ravel(), idx[tuple(nb)].ravel()
        D[i0, i0] = -1
        D[i0, i1] = 1
        rows.append(D)
    G = cp.vstack([D @ u for D in rows])
    obj = 0.5 * cp.sum_squares(u - b.ravel()) + lam * cp.sum(cp.norm(G, 2, axis=0))
    cp.Problem(cp.Minimize(obj)).solve(solver=cp.CLARABEL)
    ref = u.value.reshape(shape)
    got = tv_prox(b, lam, tuple(range(len(shape))), 2000)
    assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-4
