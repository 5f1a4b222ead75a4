"""Agents for consensus equilibrium: data-fit proximal maps and denoisers.

Every agent is a callable ``Volume -> Volume`` on a fixed grid.  Data agents
solve a regularized weighted least-squares problem with conjugate gradient;
the conjugate variant wraps that solve between a pose transform and its
inverse so that the sinogram can stay in the posed frame.  Prior agents
denoise a volume slice by slice along one of the three slice families, or as
a whole with 3D total variation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .pose import RigidPose, apply_pose, inverse_pose
from .projector import Sinogram, normal_diagonal, system_matrix
from .volume import Volume

log = logging.getLogger(__name__)

PLANES = ("xy", "xz", "yz")
# array axes are (z, y, x); each plane lists the two in-plane axes
_PLANE_AXES = {"xy": (1, 2), "xz": (0, 2), "yz": (0, 1), "xyz": (0, 1, 2)}
DENOISERS = ("tv2d", "gaussian2d", "identity", "tv3d")


class ProxSolverError(RuntimeError):
    """Conjugate gradient stopped making progress.

    ``trace`` holds the relative residual of every iteration run.
    """

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = list(trace)


@dataclass(frozen=True)
class ProxConfig:
    """Data term and solver settings of one proximal-map agent."""

    sinogram: Sinogram
    sigma: float
    cg_tol: float = 1e-6
    cg_max_iters: int = 50

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.cg_tol < 1:
            raise ValueError(f"cg_tol must lie in (0, 1), got {self.cg_tol}")
        if self.cg_max_iters < 1:
            raise ValueError("cg_max_iters must be at least 1")

    @property
    def geometry(self):
        return self.sinogram.geometry


@dataclass(frozen=True)
class DenoiserConfig:
    """``strength`` is the TV weight for tv2d/tv3d and the Gaussian std (voxels) for gaussian2d."""

    method: str = "tv2d"
    strength: float = 0.0
    plane: str = "xy"
    n_iter: int = 50

    def __post_init__(self):
        if self.method not in DENOISERS:
            raise ValueError(f"method must be one of {DENOISERS}, got {self.method!r}")
        if self.plane not in _PLANE_AXES:
            raise ValueError(f"plane must be one of {tuple(_PLANE_AXES)}, got {self.plane!r}")
        if (self.method == "tv3d") != (self.plane == "xyz"):
            raise ValueError("tv3d denoises the whole volume and requires plane='xyz'")
        if self.strength < 0:
            raise ValueError("strength must be nonnegative")


# ---------------------------------------------------------------------------
# data agents


def conjugate_gradient(apply_H, b, x0, tol, max_iters, diverge_window=5):
    """Solve ``H x = b`` for symmetric positive definite ``H``.

    Stops when ``||b - H x|| / ||b|| < tol`` or after ``max_iters``
    iterations.  Raises :class:`ProxSolverError` if the residual grows on
    ``diverge_window`` consecutive iterations.

    Returns
    -------
    x : ndarray
    trace : list of float
        Relative residual after each iteration (entry 0 is the start point).
    """
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b), [0.0]
    x = x0.copy()
    r = b - apply_H(x)
    p = r.copy()
    rr = r @ r
    trace = [np.sqrt(rr) / bnorm]
    growth = 0
    for _ in range(max_iters):
        if trace[-1] < tol:
            break
        Hp = apply_H(p)
        alpha = rr / (p @ Hp)
        x += alpha * p
        r -= alpha * Hp
        rr_new = r @ r
        trace.append(np.sqrt(rr_new) / bnorm)
        growth = growth + 1 if trace[-1] > trace[-2] else 0
        if growth >= diverge_window:
            raise ProxSolverError(f"CG residual grew for {growth} consecutive iterations", trace)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, trace


def prox_data(v: Volume, cfg: ProxConfig) -> Volume:
    """Proximal map of the weighted data-fit term at ``v``.

    Minimizes ``0.5 ||y - A x||_W^2 + ||x - v||^2 / (2 sigma^2)`` by CG on
    the normal equations, starting from ``v``.
    """
    s = cfg.sinogram
    A, At = system_matrix(v, s.geometry)
    w = s.weights.ravel()
    inv_s2 = 1.0 / cfg.sigma**2

    def apply_H(x):
        return At @ (w * (A @ x)) + inv_s2 * x

    vv = v.data.ravel()
    b = At @ (w * s.data.ravel()) + inv_s2 * vv
    x, trace = conjugate_gradient(apply_H, b, vv.copy(), cfg.cg_tol, cfg.cg_max_iters)
    log.debug("prox_data: %d CG iterations, residual %.3g", len(trace) - 1, trace[-1])
    return v.like(x)


def conjugate_prox_data(v: Volume, cfg: ProxConfig, pose: RigidPose) -> Volume:
    """``T^-1(prox(T v))``: the data prox evaluated in the posed frame."""
    if pose.is_identity:
        return prox_data(v, cfg)
    posed = apply_pose(v, pose)
    return apply_pose(prox_data(posed, cfg), inverse_pose(pose))


def default_sigma(grid: Volume, sinogram: Sinogram) -> float:
    """Prox strength whose ``1/sigma^2`` equals the mean diagonal of ``A^T W A``."""
    diag = normal_diagonal(grid, sinogram.weights, sinogram.geometry)
    return float(1.0 / np.sqrt(diag.mean()))


# ---------------------------------------------------------------------------
# total variation


def _neg_grad(x, axes):
    """Adjoint of :func:`_div_like`: ``x_i - x_{i+1}`` along each axis, 0 at the end."""
    out = np.zeros((len(axes),) + x.shape)
    for k, a in enumerate(axes):
        sl = [slice(None)] * x.ndim
        sl[a] = slice(0, -1)
        hi = [slice(None)] * x.ndim
        hi[a] = slice(1, None)
        out[k][tuple(sl)] = x[tuple(sl)] - x[tuple(hi)]
    return out


def _div_like(p, axes):
    """``sum_a p_a,i - p_a,i-1`` with ``p_a,-1 = 0``."""
    out = p.sum(axis=0)
    for k, a in enumerate(axes):
        sl = [slice(None)] * (p.ndim - 1)
        sl[a] = slice(1, None)
        lo = [slice(None)] * (p.ndim - 1)
        lo[a] = slice(0, -1)
        out[tuple(sl)] -= p[k][tuple(lo)]
    return out


def _tv_map(x, axes):
    """Pointwise isotropic gradient magnitude."""
    return np.sqrt(np.sum(_neg_grad(x, axes) ** 2, axis=0))


def _objective(u, b, lam, axes, reduce_axes):
    return 0.5 * np.sum((u - b) ** 2, axis=reduce_axes) + lam * np.sum(_tv_map(u, axes), axis=reduce_axes)


def tv_prox(b, strength, axes, n_iter=50, history=None):
    """Total-variation proximal map of array ``b`` by monotone FGP.

    Minimizes ``0.5 ||u - b||^2 + strength * TV(u)`` independently for every
    slice spanned by ``axes`` (isotropic TV, Neumann boundary).  Works on the
    dual problem with Nesterov momentum; a dual step is only accepted when
    it does not raise the primal objective of its slice, which makes the
    primal objective nonincreasing.

    If ``history`` is a list, the per-slice primal objective after each
    iteration is appended to it.
    """
    if strength == 0:
        return b.copy()
    axes = tuple(axes)
    reduce_axes = tuple(a for a in range(b.ndim) if a in axes)
    lam = float(strength)
    step = 1.0 / (4 * len(axes) * lam)
    p = np.zeros((len(axes),) + b.shape)
    r = p.copy()
    u_best = b.copy()
    f_best = _objective(u_best, b, lam, axes, reduce_axes)
    if history is not None:
        history.append(f_best.copy())
    t = 1.0
    for _ in range(n_iter):
        z = r + step * _neg_grad(b - lam * _div_like(r, axes), axes)
        z /= np.maximum(1.0, np.sqrt(np.sum(z**2, axis=0)))
        u_z = b - lam * _div_like(z, axes)
        f_z = _objective(u_z, b, lam, axes, reduce_axes)
        accept = np.expand_dims(f_z <= f_best, reduce_axes)
        p_old = p
        p = np.where(accept[None], z, p_old)
        u_best = np.where(accept, u_z, u_best)
        f_best = np.minimum(f_z, f_best)
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        r = p + (t / t_next) * (z - p) + ((t - 1) / t_next) * (p - p_old)
        t = t_next
        if history is not None:
            history.append(f_best.copy())
    return u_best


def denoise_slicewise(v: Volume, cfg: DenoiserConfig) -> Volume:
    """Denoise every 2D slice of ``v`` in ``cfg.plane`` independently."""
    if cfg.method == "identity" or cfg.strength == 0:
        return v
    axes = _PLANE_AXES[cfg.plane]
    if cfg.method in ("tv2d", "tv3d"):
        out = tv_prox(v.data, cfg.strength, axes, cfg.n_iter)
    else:
        sig = [0.0, 0.0, 0.0]
        for a in axes:
            sig[a] = cfg.strength
        out = ndimage.gaussian_filter(v.data, sig, mode="constant", cval=0.0, truncate=3.0)
    return v.like(out)


# ---------------------------------------------------------------------------
# agent objects


class DataProxAgent:
    kind = "data_prox"

    def __init__(self, cfg: ProxConfig):
        self.cfg = cfg

    def __call__(self, v: Volume) -> Volume:
        return prox_data(v, self.cfg)


class ConjugateProxAgent:
    kind = "conjugate_data_prox"

    def __init__(self, cfg: ProxConfig, pose: RigidPose):
        self.cfg = cfg
        self.pose = pose

    def __call__(self, v: Volume) -> Volume:
        return conjugate_prox_data(v, self.cfg, self.pose)


class DenoiserAgent:
    def __init__(self, cfg: DenoiserConfig):
        self.cfg = cfg
        self.kind = f"denoiser_{cfg.plane}"

    def __call__(self, v: Volume) -> Volume:
        return denoise_slicewise(v, self.cfg)


def multi_slice_agents(method="tv2d", strength=0.0, n_iter=50):
    """Three denoisers acting on xy, xz and yz slices, in that order."""
    return [DenoiserAgent(DenoiserConfig(method, strength, plane, n_iter)) for plane in PLANES]
