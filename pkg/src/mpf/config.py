"""Experiment configuration: YAML loading and validation.

Every validation failure raises :class:`ConfigError` naming the offending
field by its dotted path and, when the value came from a file, its line.
The schema is documented in ``configs/README.md``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .agents import DENOISERS, DenoiserConfig
from .phantom import Ellipsoid, PhantomSpec, PhantomSpecError, Plate, _check_overlaps, default_features
from .pose import CUBIC, QUINTIC, _SPLINE_ORDER, RigidPose
from .projector import _MODES, ScanGeometry


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path, ``line`` 1-based or None."""

    def __init__(self, field_path, message, line=None):
        self.field = field_path
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field_path}: {message}")


@dataclass(frozen=True)
class PoseSpec:
    name: str
    rot_z_deg: float = 0.0
    rot_x_deg: float = 0.0
    translation_mm: tuple = (0.0, 0.0, 0.0)
    interp: str = CUBIC

    def to_pose(self, interp=None) -> RigidPose:
        return RigidPose.from_euler(self.rot_z_deg, self.rot_x_deg, self.translation_mm, interp or self.interp)


@dataclass(frozen=True)
class NoiseSpec:
    """Either an explicit variance ``alpha`` or a target ``snr_db``.

    With ``snr_db`` the variance is ``mean(y0^2) * 10^(-snr_db/10)`` where
    ``y0`` is the noiseless sinogram of the first (identity) pose; all poses
    then share that variance.
    """

    alpha: float | None = None
    snr_db: float | None = None
    seed: int | None = None

    @property
    def noiseless(self):
        return self.snr_db is None and not self.alpha


@dataclass(frozen=True)
class SolverSpec:
    rho: float = 0.5
    beta: float = 1.0
    max_iters: int = 60
    conv_tol: float = 1e-4
    sigma: float | None = None  # None: chosen from the system matrix
    cg_tol: float = 1e-6
    cg_max_iters: int = 50
    workers: int = 1
    denoiser: DenoiserConfig = DenoiserConfig("tv2d", 5e-4, "xy", 50)
    mbir_prior: DenoiserConfig = DenoiserConfig("tv3d", 5e-4, "xyz", 50)


@dataclass(frozen=True)
class RenderSpec:
    window: tuple = (0.0, 0.04)
    planes: tuple = ("xy", "xz", "yz")


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec
    poses: tuple
    geometry: ScanGeometry
    noise: NoiseSpec = NoiseSpec()
    solver: SolverSpec = SolverSpec()
    simulation_interp: str = QUINTIC
    render: RenderSpec = RenderSpec()
    output_dir: str = "mpf_out"

    def __post_init__(self):
        if not self.poses:
            raise ConfigError("poses", "at least one pose is required")
        if not self.poses[0].to_pose().is_identity:
            raise ConfigError("poses[0]", "the first pose must be the identity")
        if not self.noise.noiseless and self.noise.seed is None:
            raise ConfigError("noise.seed", "a seed is required when noise is enabled")
        names = [p.name for p in self.poses]
        if len(set(names)) != len(names):
            raise ConfigError("poses", f"pose names must be unique, got {names}")

    def with_seed(self, seed):
        return replace(self, noise=replace(self.noise, seed=seed))


# ---------------------------------------------------------------- parsing

class _Reader:
    """Typed access into a parsed YAML mapping with line-aware errors."""

    def __init__(self, data, lines, path=""):
        self.data = data
        self.lines = lines
        self.path = path

    def _sub(self, key):
        return f"{self.path}.{key}" if self.path else str(key)

    def line(self, key=None):
        return self.lines.get(self._sub(key) if key is not None else self.path)

    def fail(self, key, message):
        p = self._sub(key) if key is not None else self.path
        # a missing key has no line of its own; point at its section
        raise ConfigError(p, message, self.lines.get(p, self.lines.get(self.path)))

    def has(self, key):
        return key in self.data

    def get(self, key, kind, default=None, required=False):
        if key not in self.data:
            if required:
                self.fail(None, f"missing required field '{key}'")
            return default
        val = self.data[key]
        try:
            return _coerce(val, kind)
        except (TypeError, ValueError) as exc:
            self.fail(key, str(exc))

    def child(self, key, required=False):
        if self.data.get(key, 0) is None:  # empty section
            return _Reader({}, self.lines, self._sub(key))
        if key not in self.data:
            if required:
                self.fail(None, f"missing required section '{key}'")
            return _Reader({}, self.lines, self._sub(key))
        val = self.data[key]
        if not isinstance(val, dict):
            self.fail(key, "expected a mapping")
        return _Reader(val, self.lines, self._sub(key))

    def items(self, key):
        val = self.data.get(key, [])
        if not isinstance(val, list):
            self.fail(key, "expected a list")
        out = []
        for i, item in enumerate(val):
            sub = f"{self._sub(key)}[{i}]"
            if not isinstance(item, dict):
                raise ConfigError(sub, "expected a mapping", self.lines.get(sub))
            out.append(_Reader(item, self.lines, sub))
        return out

    def check_keys(self, allowed):
        for k in self.data:
            if k not in allowed:
                self.fail(k, f"unknown field (allowed: {', '.join(sorted(allowed))})")


def _coerce(val, kind):
    if kind == "float":
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise TypeError(f"expected a number, got {val!r}")
        if not np.isfinite(val):
            raise ValueError(f"expected a finite number, got {val!r}")
        return float(val)
    if kind == "int":
        if isinstance(val, bool) or not isinstance(val, int):
            raise TypeError(f"expected an integer, got {val!r}")
        return val
    if kind == "str":
        if not isinstance(val, str):
            raise TypeError(f"expected a string, got {val!r}")
        return val
    if kind.startswith("vec"):
        n = int(kind[3:])
        if not isinstance(val, list) or len(val) != n:
            raise TypeError(f"expected a list of {n} numbers, got {val!r}")
        return tuple(_coerce(v, "float") for v in val)
    raise AssertionError(kind)


def _line_index(node, path="", out=None):
    """Map dotted paths to 1-based source lines by walking a composed YAML node."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            sub = f"{path}.{k.value}" if path else str(k.value)
            out[sub] = k.start_mark.line + 1
            _line_index(v, sub, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, f"{path}[{i}]", out)
    return out


def _parse_features(r: _Reader):
    if not r.has("features") or r.data["features"] == "default":
        return default_features()
    feats = []
    for item in r.items("features"):
        kind = item.get("type", "str", required=True)
        if kind == "ellipsoid":
            item.check_keys({"type", "center", "semi_axes", "value", "angle_deg"})
            semi = item.get("semi_axes", "vec3", required=True)
            if min(semi) <= 0:
                item.fail("semi_axes", "semi-axes must be positive")
            feats.append(Ellipsoid(
                item.get("center", "vec3", required=True), semi,
                item.get("value", "float", required=True), item.get("angle_deg", "float", 0.0),
            ))
        elif kind == "plate":
            item.check_keys({"type", "center", "size", "thickness", "normal", "value", "holes"})
            normal = item.get("normal", "str", required=True)
            if normal not in ("x", "y", "z"):
                item.fail("normal", "must be one of x, y, z")
            holes = item.data.get("holes", [])
            try:
                holes = tuple(tuple(_coerce(v, "vec2") for v in tri) for tri in holes)
                if any(len(tri) != 3 for tri in holes):
                    raise ValueError("each hole needs three vertices")
            except (TypeError, ValueError) as exc:
                item.fail("holes", f"expected a list of triangles of (u, v) points: {exc}")
            feats.append(Plate(
                item.get("center", "vec3", required=True), item.get("size", "vec2", required=True),
                item.get("thickness", "float", required=True), normal,
                item.get("value", "float", required=True), holes,
            ))
        else:
            item.fail("type", f"unknown feature type {kind!r} (ellipsoid or plate)")
    return tuple(feats)


def _parse_denoiser(r: _Reader, default: DenoiserConfig):
    r.check_keys({"method", "strength", "n_iter"})
    method = r.get("method", "str", default.method)
    if method not in DENOISERS:
        r.fail("method", f"unknown denoiser {method!r} (one of {', '.join(DENOISERS)})")
    strength = r.get("strength", "float", default.strength)
    if strength < 0:
        r.fail("strength", "must be non-negative")
    n_iter = r.get("n_iter", "int", default.n_iter)
    if n_iter < 1:
        r.fail("n_iter", "must be at least 1")
    plane = "xyz" if method == "tv3d" else "xy"
    return DenoiserConfig(method, strength, plane, n_iter)


def _positive(r, key, kind, default, strict=True):
    v = r.get(key, kind, default)
    if v < 0 or (strict and v == 0):
        r.fail(key, "must be positive" if strict else "must be non-negative")
    return v


def config_from_dict(data, lines=None) -> ExperimentConfig:
    """Validate a parsed mapping; ``lines`` maps dotted paths to source lines."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a mapping at the top level")
    root = _Reader(data, lines or {})
    root.check_keys({"phantom", "poses", "geometry", "noise", "solver", "simulation", "render", "output"})

    ph = root.child("phantom")
    ph.check_keys({"dims", "voxel_size", "smoothing_mm", "features"})
    dims = ph.data.get("dims", [32, 32, 32])
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        ph.fail("dims", f"expected three positive integers, got {dims!r}")
    phantom = PhantomSpec(
        tuple(dims), _positive(ph, "voxel_size", "float", 1.0),
        _parse_features(ph), _positive(ph, "smoothing_mm", "float", 0.0, strict=False),
    )
    try:
        _check_overlaps(phantom.features)
    except PhantomSpecError as exc:
        ph.fail("features", str(exc))

    poses = []
    for i, p in enumerate(root.items("poses")):
        p.check_keys({"name", "rot_z_deg", "rot_x_deg", "translation_mm", "interp"})
        interp = p.get("interp", "str", CUBIC)
        if interp not in _SPLINE_ORDER:
            p.fail("interp", f"unknown interpolation {interp!r} (one of {', '.join(_SPLINE_ORDER)})")
        poses.append(PoseSpec(
            p.get("name", "str", f"pose{i + 1}"), p.get("rot_z_deg", "float", 0.0),
            p.get("rot_x_deg", "float", 0.0), p.get("translation_mm", "vec3", (0.0, 0.0, 0.0)), interp,
        ))
    if not poses:
        poses = [PoseSpec("pose1")]
    if not poses[0].to_pose().is_identity:
        raise ConfigError("poses[0]", "the first pose must be the identity", root.lines.get("poses[0]"))

    gr = root.child("geometry")
    gr.check_keys({"mode", "num_views", "span_deg", "det_rows", "det_channels", "det_pixel_size",
                   "source_to_iso", "source_to_det"})
    mode = gr.get("mode", "str", "parallel3d")
    if mode not in _MODES:
        gr.fail("mode", f"unknown geometry {mode!r} (one of {', '.join(_MODES)})")
    try:
        geometry = ScanGeometry.circular(
            mode, _positive(gr, "num_views", "int", 35), _positive(gr, "det_rows", "int", 48),
            _positive(gr, "det_channels", "int", 48), gr.get("span_deg", "float", 360.0),
            det_pixel_size=_positive(gr, "det_pixel_size", "float", 1.0),
            source_to_iso=gr.get("source_to_iso", "float", 0.0), source_to_det=gr.get("source_to_det", "float", 0.0),
        )
    except ValueError as exc:
        gr.fail(None, str(exc))

    nr = root.child("noise")
    nr.check_keys({"alpha", "snr_db", "seed"})
    if nr.has("alpha") and nr.has("snr_db"):
        nr.fail("alpha", "give either alpha or snr_db, not both")
    seed = nr.get("seed", "int")
    if seed is not None and seed < 0:
        nr.fail("seed", "must be a non-negative integer")
    noise = NoiseSpec(
        _positive(nr, "alpha", "float", 0.0, strict=False) if nr.has("alpha") else None,
        nr.get("snr_db", "float"), seed,
    )
    if not noise.noiseless and noise.seed is None:
        nr.fail("seed", "a seed is required when noise is enabled")

    sr = root.child("solver")
    sr.check_keys({"rho", "beta", "max_iters", "conv_tol", "sigma", "cg_tol", "cg_max_iters", "workers",
                   "denoiser", "mbir_prior"})
    d = SolverSpec()
    rho = sr.get("rho", "float", d.rho)
    if not 0 < rho < 1:
        sr.fail("rho", "must lie in (0, 1)")
    sigma = sr.data.get("sigma", "auto")
    if sigma != "auto":
        sigma = _positive(sr, "sigma", "float", None)
    else:
        sigma = None
    solver = SolverSpec(
        rho, _positive(sr, "beta", "float", d.beta), _positive(sr, "max_iters", "int", d.max_iters),
        _positive(sr, "conv_tol", "float", d.conv_tol, strict=False), sigma,
        _positive(sr, "cg_tol", "float", d.cg_tol), _positive(sr, "cg_max_iters", "int", d.cg_max_iters),
        _positive(sr, "workers", "int", d.workers),
        _parse_denoiser(sr.child("denoiser"), d.denoiser), _parse_denoiser(sr.child("mbir_prior"), d.mbir_prior),
    )

    sim = root.child("simulation")
    sim.check_keys({"interp"})
    sim_interp = sim.get("interp", "str", QUINTIC)
    if sim_interp not in _SPLINE_ORDER:
        sim.fail("interp", f"unknown interpolation {sim_interp!r}")

    rr = root.child("render")
    rr.check_keys({"window", "planes"})
    window = rr.get("window", "vec2", (0.0, 0.04))
    if not window[1] > window[0]:
        rr.fail("window", "upper bound must exceed lower bound")
    planes = tuple(rr.data.get("planes", ["xy", "xz", "yz"]))
    if any(p not in ("xy", "xz", "yz") for p in planes):
        rr.fail("planes", f"planes must be among xy, xz, yz, got {list(planes)!r}")

    out = root.child("output")
    out.check_keys({"dir"})
    return ExperimentConfig(
        phantom, tuple(poses), geometry, noise, solver, sim_interp, RenderSpec(window, planes),
        out.get("dir", "str", "mpf_out"),
    )


def load_config(path) -> ExperimentConfig:
    """Read and validate a YAML experiment config."""
    text = Path(path).read_text()
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<syntax>", str(getattr(exc, "problem", exc)), mark.line + 1 if mark else None) from exc
    if node is None:
        raise ConfigError("<root>", "config file is empty")
    return config_from_dict(data, _line_index(node))
