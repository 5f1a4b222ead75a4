"""Experiment stages: phantom, scan simulation, reconstruction, evaluation, rendering.

Each stage reads and writes files in the output directory, so the CLI
subcommands and :func:`run_experiment` go through the same code and produce
the same bytes.  Layout::

    phantom.mpfv
    sinograms/<pose>.mpfs
    <method>/recon.mpfv, <method>/convergence.txt
    renders/<label>_<plane>_<index>.png
    results.txt
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .agents import ConjugateProxAgent, DenoiserAgent, ProxConfig, ProxSolverError, default_sigma, multi_slice_agents
from .config import ExperimentConfig
from .mace import AgentError, SolverConfig, mann_solve
from .phantom import generate_phantom
from .pose import RigidPose, apply_pose
from .projector import ScanGeometry, Sinogram, forward_project, read_sinogram, write_sinogram
from .volume import Volume, nrmse, read_volume, write_volume

log = logging.getLogger(__name__)

_EPS = 1e-12

CAPTION = (
    "NRMSE against the phantom. MBIR rows use MACE with one 3D total-variation "
    "prior agent (not a qGGMRF optimizer); PnP and MPF rows use three slice-wise "
    "2D denoiser agents."
)


def simulate_pose_scan(phantom: Volume, pose: RigidPose, g: ScanGeometry, alpha: float, seed=None) -> Sinogram:
    """Noisy projections of ``phantom`` moved by ``pose``.

    Adds i.i.d. Gaussian noise of variance ``alpha`` drawn from
    ``numpy.random.default_rng(seed)`` and sets every weight to
    ``1 / max(alpha, eps)``.  With ``alpha == 0`` the data is the projector
    output itself.
    """
    if not alpha >= 0:
        raise ValueError("alpha must be non-negative")
    clean = forward_project(apply_pose(phantom, pose), g).data
    if alpha > 0:
        rng = np.random.default_rng(seed)
        data = clean + rng.normal(0.0, np.sqrt(alpha), clean.shape)
    else:
        data = clean
    return Sinogram(g, data, 1.0 / max(alpha, _EPS))


def noise_variance(cfg: ExperimentConfig, phantom: Volume) -> float:
    n = cfg.noise
    if n.snr_db is not None:
        y0 = forward_project(phantom, cfg.geometry).data
        return float(np.mean(y0 * y0) * 10 ** (-n.snr_db / 10))
    return float(n.alpha or 0.0)


# ----------------------------------------------------------------- stages

def stage_phantom(cfg: ExperimentConfig, out: Path) -> Volume:
    v = generate_phantom(cfg.phantom)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "phantom.mpfv", v)
    return v


def stage_simulate(cfg: ExperimentConfig, phantom: Volume, out: Path) -> list:
    """One sinogram per pose; pose ``k`` draws noise from ``default_rng([seed, k])``."""
    alpha = noise_variance(cfg, phantom)
    log.info("noise variance %.4g", alpha)
    (out / "sinograms").mkdir(parents=True, exist_ok=True)
    sinos = []
    for k, p in enumerate(cfg.poses):
        seed = None if cfg.noise.seed is None else [cfg.noise.seed, k]
        s = simulate_pose_scan(phantom, p.to_pose(cfg.simulation_interp), cfg.geometry, alpha, seed)
        write_sinogram(out / "sinograms" / f"{p.name}.mpfs", s)
        sinos.append(s)
    return sinos


def load_sinograms(cfg: ExperimentConfig, out: Path) -> list:
    return [read_sinogram(out / "sinograms" / f"{p.name}.mpfs") for p in cfg.poses]


@dataclass(frozen=True)
class Method:
    label: str  # directory name
    name: str  # table label
    pose: str
    poses: tuple  # indices of the data agents


def methods(cfg: ExperimentConfig) -> list:
    """Single-pose MBIR and PnP per pose, then the joint multi-pose run."""
    out = []
    for k, p in enumerate(cfg.poses):
        out.append(Method(f"mbir_{p.name}", "MBIR", p.name, (k,)))
        out.append(Method(f"pnp_{p.name}", "PnP", p.name, (k,)))
    out.append(Method("mpf", "MPF", "all", tuple(range(len(cfg.poses)))))
    return out


def build_agents(cfg: ExperimentConfig, method: Method, sinos, grid: Volume):
    """Data agents for the method's poses followed by its prior agents."""
    s = cfg.solver
    agents = []
    for k in method.poses:
        sigma = s.sigma if s.sigma is not None else default_sigma(grid, sinos[k])
        prox = ProxConfig(sinos[k], sigma, s.cg_tol, s.cg_max_iters)
        agents.append(ConjugateProxAgent(prox, cfg.poses[k].to_pose()))
    if method.name == "MBIR":
        agents.append(DenoiserAgent(s.mbir_prior))
        n_prior = 1
    else:
        d = s.denoiser
        agents += multi_slice_agents(d.method, d.strength, d.n_iter)
        n_prior = 3
    scfg = SolverConfig(s.rho, s.beta, s.max_iters, s.conv_tol, n_prior=n_prior, workers=s.workers)
    return agents, scfg


@dataclass
class RunResult:
    method: Method
    volume: Volume | None = None
    report: object = None
    error: str | None = None


def reconstruct(cfg: ExperimentConfig, method: Method, sinos, grid: Volume, out: Path) -> RunResult:
    """Run one method from a zero start; failures are captured, not raised."""
    agents, scfg = build_agents(cfg, method, sinos, grid)
    d = out / method.label
    d.mkdir(parents=True, exist_ok=True)
    try:
        x, report = mann_solve(grid.like(np.zeros(grid.shape)), agents, scfg)
    except AgentError as exc:
        cause = exc.cause
        msg = f"agent {exc.index} failed: {cause}"
        if isinstance(cause, ProxSolverError):
            msg += f" (CG residual trace {', '.join(f'{r:.3g}' for r in cause.trace)})"
        (d / "convergence.txt").write_text((exc.report.to_text() if exc.report else "") + f"# error: {msg}\n")
        (d / "recon.mpfv").unlink(missing_ok=True)
        log.error("%s: %s", method.label, msg)
        return RunResult(method, report=exc.report, error=msg)
    write_volume(d / "recon.mpfv", x)
    (d / "convergence.txt").write_text(report.to_text())
    log.info("%s: %s after %d iterations", method.label, report.status, report.iterations)
    return RunResult(method, x.as_stored(), report)


def stage_reconstruct(cfg: ExperimentConfig, sinos, grid: Volume, out: Path, only=None) -> list:
    todo = [m for m in methods(cfg) if only is None or m.label in only]
    return [reconstruct(cfg, m, sinos, grid, out) for m in todo]


@dataclass
class ResultsTable:
    """Rows of (method, pose, nrmse or None, note)."""

    rows: list = field(default_factory=list)
    caption: str = CAPTION

    def add(self, method, pose, value=None, note=""):
        self.rows.append((method, pose, value, note))

    def value(self, method, pose):
        for m, p, v, _ in self.rows:
            if (m, p) == (method, pose):
                return v
        raise KeyError((method, pose))

    @property
    def failed(self):
        return [r for r in self.rows if r[2] is None]

    def to_text(self):
        lines = [f"# {self.caption}", f"{'method':<8}{'pose':<12}nrmse"]
        for m, p, v, note in self.rows:
            lines.append(f"{m:<8}{p:<12}" + (f"{v:.6f}" if v is not None else f"FAILED ({note})"))
        return "\n".join(lines) + "\n"


def stage_evaluate(cfg: ExperimentConfig, phantom: Volume, out: Path) -> ResultsTable:
    """Score every stored reconstruction against the phantom and write ``results.txt``."""
    table = ResultsTable()
    ref = phantom.as_stored()
    for m in methods(cfg):
        d = out / m.label
        path = d / "recon.mpfv"
        if path.exists():
            table.add(m.name, m.pose, nrmse(read_volume(path), ref).nrmse)
        else:
            note = "no reconstruction"
            log_path = d / "convergence.txt"
            if log_path.exists():
                errs = [ln[9:] for ln in log_path.read_text().splitlines() if ln.startswith("# error: ")]
                note = errs[-1] if errs else note
            table.add(m.name, m.pose, None, note)
    (out / "results.txt").write_text(table.to_text())
    return table


def render_slice(v: Volume, plane: str, index: int, window, out_dir, label: str) -> Path:
    """Write one slice as an 8-bit grayscale PNG, windowed to ``window`` and clamped.

    ``xy`` slices are taken at z index ``index``, ``xz`` at y and ``yz`` at x.
    Rows run from high to low y (xy) or z (xz, yz) so the image is upright.
    """
    axis = {"xy": 0, "xz": 1, "yz": 2}[plane]
    n = v.shape[axis]
    if not 0 <= index < n:
        raise IndexError(f"{plane} slice index {index} out of range [0, {n})")
    img = np.take(v.data, index, axis=axis)[::-1]
    lo, hi = window
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    u8 = np.rint(scaled * 255).astype(np.uint8)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{label}_{plane}_{index:03d}.png"
    Image.fromarray(u8, mode="L").save(path)
    return path


def stage_render(cfg: ExperimentConfig, out: Path) -> list:
    """Central slices of the phantom and every stored reconstruction."""
    targets = [("phantom", out / "phantom.mpfv")] + [(m.label, out / m.label / "recon.mpfv") for m in methods(cfg)]
    paths = []
    for label, path in targets:
        if not path.exists():
            continue
        v = read_volume(path)
        for plane in cfg.render.planes:
            axis = {"xy": 0, "xz": 1, "yz": 2}[plane]
            paths.append(render_slice(v, plane, v.shape[axis] // 2, cfg.render.window, out / "renders", label))
    return paths


def run_experiment(cfg: ExperimentConfig, out=None) -> ResultsTable:
    """All stages in order; returns the results table (also written to disk)."""
    out = Path(out if out is not None else cfg.output_dir)
    phantom = stage_phantom(cfg, out)
    sinos = stage_simulate(cfg, phantom, out)
    stage_reconstruct(cfg, sinos, phantom, out)
    table = stage_evaluate(cfg, phantom, out)
    stage_render(cfg, out)
    return table
