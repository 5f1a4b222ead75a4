"""Consensus-equilibrium solver.

The state is a stack of volumes ``w = [w_0, ..., w_{n-1}]``, one per agent.
``F`` applies agent ``k`` to ``w_k``; ``G`` replaces every component with the
weighted average ``sum_k mu_k w_k``.  A solution satisfies ``F(w) = G(w)``,
and is found as the fixed point of ``(2G - I)(2F - I)`` by Mann iteration.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .volume import ShapeError, Volume

log = logging.getLogger(__name__)


class AgentError(RuntimeError):
    """An agent raised while being evaluated; ``index`` says which one."""

    def __init__(self, index, cause, report=None):
        super().__init__(f"agent {index} failed: {cause}")
        self.index = index
        self.cause = cause
        self.report = report


@dataclass(frozen=True)
class SolverConfig:
    rho: float = 0.5
    beta: float = 1.0
    max_iters: int = 50
    conv_tol: float = 1e-4
    record_history: bool = False
    # 3 = multi-slice prior (xy, xz, yz); 1 = a single prior agent
    n_prior: int = 3
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.n_prior < 0:
            raise ValueError("n_prior must be nonnegative")


@dataclass
class ConvergenceReport:
    residuals: list = field(default_factory=list)
    disagreements: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    status: str = "max_iters"
    history: list = field(default_factory=list)
    # ||G(F(w)) - F(w)|| / ||F(w)|| over the stacked state, per iteration
    equilibrium: list = field(default_factory=list)

    @property
    def iterations(self):
        return len(self.residuals)

    def to_text(self) -> str:
        lines = [f"# status: {self.status}, iterations: {self.iterations}",
                 f"{'iter':>5} {'residual':>12} {'disagreement':>13} {'seconds':>9}"]
        for i, (r, d, s) in enumerate(zip(self.residuals, self.disagreements, self.seconds), 1):
            lines.append(f"{i:5d} {r:12.4e} {d:13.4e} {s:9.3f}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class StackedState:
    """One volume per agent plus the averaging weights."""

    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        w = np.asarray(self.weights, dtype=np.float64)
        if len(comps) != w.size:
            raise ShapeError(f"{len(comps)} components but {w.size} weights")
        if any(c.dims != comps[0].dims for c in comps):
            raise ShapeError("all components must share one grid")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be nonnegative and sum to 1, got {w}")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @classmethod
    def replicate(cls, x: Volume, weights):
        return cls((x,) * len(weights), weights)

    def stack(self) -> np.ndarray:
        return np.stack([c.data for c in self.components])


def make_weights(K: int, beta: float, n_prior: int = 3) -> np.ndarray:
    """Averaging weights for ``K`` data agents followed by ``n_prior`` prior agents.

    Data agents share ``1 / (1 + beta)`` equally and the prior agents share
    ``beta / (1 + beta)`` equally.
    """
    if K < 1:
        raise ValueError("need at least one data agent")
    if not beta > 0:
        raise ValueError("beta must be positive")
    data = np.full(K, 1.0 / (K * (1.0 + beta)))
    prior = np.full(n_prior, beta / (n_prior * (1.0 + beta)))
    return np.concatenate([data, prior])


def _average(stack, weights):
    return np.tensordot(weights, stack, axes=1)


def apply_G(state: StackedState) -> StackedState:
    avg = state.components[0].like(_average(state.stack(), state.weights))
    return StackedState.replicate(avg, state.weights)


def _evaluate(agents, volumes, workers):
    def run(k):
        try:
            return agents[k](volumes[k])
        except Exception as exc:
            raise AgentError(k, exc) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(len(agents))))
    return [run(k) for k in range(len(agents))]


def apply_F(state: StackedState, agents, workers: int = 1) -> StackedState:
    """Component ``k`` becomes ``agents[k](w_k)``.

    With ``workers > 1`` the agents run on a thread pool; results are
    collected by index so they do not depend on scheduling.
    """
    if len(agents) != len(state.components):
        raise ShapeError(f"{len(agents)} agents for {len(state.components)} components")
    return StackedState(tuple(_evaluate(agents, state.components, workers)), state.weights)


def mann_solve(x0: Volume, agents, cfg: SolverConfig, weights=None):
    """Find the consensus equilibrium of ``agents`` starting from ``x0``.

    Parameters
    ----------
    x0 : Volume
        Initial reconstruction; every state component starts here.
    agents : sequence of callables
        Data agents first, then ``cfg.n_prior`` prior agents.
    cfg : SolverConfig
    weights : array_like, optional
        Averaging weights; defaults to :func:`make_weights` with
        ``K = len(agents) - cfg.n_prior``.

    Returns
    -------
    x : Volume
        Weighted average of the last agent outputs.
    report : ConvergenceReport
    """
    if weights is None:
        weights = make_weights(len(agents) - cfg.n_prior, cfg.beta, cfg.n_prior)
    weights = np.asarray(weights, dtype=np.float64)
    if len(agents) != weights.size:
        raise ShapeError(f"{len(agents)} agents for {weights.size} weights")
    report = ConvergenceReport()
    w = np.stack([x0.data] * len(agents))
    x = w
    for it in range(cfg.max_iters):
        tic = time.perf_counter()
        try:
            outs = _evaluate(agents, [x0.like(c) for c in w], cfg.workers)
        except AgentError as exc:
            exc.report = report
            report.status = "failed"
            raise
        x = np.stack([o.data for o in outs])
        z = _average(2 * x - w, weights)
        w_new = w + 2 * cfg.rho * (z[None] - x)

        xbar = _average(x, weights)
        wnorm = np.linalg.norm(w)
        step = np.linalg.norm(w_new - w)
        denom = wnorm if wnorm > 0 else np.linalg.norm(w_new)
        resid = step / denom if denom > 0 else 0.0
        xnorm = np.linalg.norm(xbar)
        dev = np.sum((x - xbar[None]) ** 2, axis=tuple(range(1, x.ndim)))
        spread = np.sqrt(dev.max())
        xs = np.linalg.norm(x)
        report.equilibrium.append(float(np.sqrt(dev.sum()) / xs) if xs > 0 else 0.0)
        report.residuals.append(float(resid))
        report.disagreements.append(float(spread / xnorm) if xnorm > 0 else float(spread))
        report.seconds.append(time.perf_counter() - tic)
        if cfg.record_history:
            report.history.append(x0.like(xbar))
        log.info("mann iter %d: residual %.3e disagreement %.3e", it + 1, resid, report.disagreements[-1])
        w = w_new
        if resid < cfg.conv_tol:
            report.status = "converged"
            break
    return x0.like(_average(x, weights)), report
