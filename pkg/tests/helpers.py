"""Shared oracles for the solver tests."""

import numpy as np

from mpf.agents import ConjugateProxAgent, DataProxAgent, ProxConfig
from mpf.mace import make_weights
from mpf.pose import RigidPose
from mpf.projector import ScanGeometry, Sinogram, forward_project
from mpf.volume import Volume


def dense_matrix(vol, g):
    cols = []
    for j in range(vol.data.size):
        e = np.zeros(vol.data.size)
        e[j] = 1.0
        cols.append(forward_project(vol.like(e), g).data.ravel())
    return np.array(cols).T


class QuadraticProx:
    """Proximal map of ``0.5 x^T Q x`` with strength ``sigma``, solved densely."""

    kind = "quadratic"

    def __init__(self, Q, sigma):
        n = Q.shape[0]
        self.M = np.linalg.inv(Q + np.eye(n) / sigma**2) / sigma**2

    def __call__(self, v):
        return v.like(self.M @ v.data.ravel())


def quadratic_consensus_problem(seed, beta, K=2, dims=(2, 2, 1)):
    """Agents whose consensus equilibrium is ``argmin sum_k f_k + sum_j h_j``.

    Agent ``k`` is the proximal map of its cost with ``sigma_k^2 = 1/mu_k``;
    at equilibrium ``sum_k mu_k sigma_k^2 grad_k = 0``, i.e. the plain sum of
    gradients vanishes.  Returns ``(x0, agents, weights, x_map)``.
    """
    rng = np.random.default_rng(seed)
    vol = Volume.zeros(dims)
    n = vol.data.size
    mu = make_weights(K, beta)
    agents = []
    H = np.zeros((n, n))
    rhs = np.zeros(n)
    for k in range(K):
        g = ScanGeometry("parallel3d", tuple(rng.uniform(0, np.pi, 2)), dims[2], 3, 1.0)
        A = dense_matrix(vol, g)
        y = rng.uniform(0.5, 2.0, A.shape[0])
        lam = rng.uniform(0.5, 2.0, A.shape[0])
        cfg = ProxConfig(Sinogram(g, y, lam), sigma=1 / np.sqrt(mu[k]), cg_tol=1e-14, cg_max_iters=100)
        agents.append(DataProxAgent(cfg) if k % 2 == 0 else ConjugateProxAgent(cfg, RigidPose.identity()))
        H += A.T @ (lam[:, None] * A)
        rhs += A.T @ (lam * y)
    for j in range(3):
        B = rng.standard_normal((n, n))
        Q = 0.3 * B.T @ B + 0.05 * np.eye(n)
        agents.append(QuadraticProx(Q, 1 / np.sqrt(mu[K + j])))
        H += Q
    x_map = np.linalg.solve(H, rhs)
    return vol, agents, mu, x_map


def tiny_config(**overrides):
    """A seconds-scale two-pose experiment on a 12^3 grid."""
    cfg = {
        "phantom": {
            "dims": [12, 12, 12],
            "smoothing_mm": 0.7,
            "features": [
                {"type": "ellipsoid", "center": [0, 0, 0], "semi_axes": [4.5, 3.5, 4.0], "value": 0.02},
                {"type": "ellipsoid", "center": [1.5, -1, 1], "semi_axes": [1.5, 1.5, 1.5], "value": 0.015},
            ],
        },
        "poses": [{"name": "a"}, {"name": "b", "rot_z_deg": 45.0, "rot_x_deg": 30.0}],
        "geometry": {"num_views": 8, "det_rows": 16, "det_channels": 16},
        "noise": {"snr_db": 40.0, "seed": 7},
        "solver": {"max_iters": 6, "denoiser": {"strength": 5e-4, "n_iter": 10},
                   "mbir_prior": {"strength": 5e-4, "n_iter": 10}},
    }
    for key, val in overrides.items():
        if val is None:
            cfg.pop(key, None)
        else:
            cfg[key] = val
    return cfg
