"""End-to-end experiments: simulate on a fine mesh, add noise, reconstruct on
a coarse mesh with IRGN or the pilot adaptive Metropolis sampler, score the
result against the transferred truth and write the artifacts.

Experiments are described by a YAML file whose first key is the format
header ``dotrecon_config: 1``; see ``configs/desk.yaml`` for every key.
Everything downstream of the config (meshes, noise, chains) is seeded, so a
config and a seed determine the CSV outputs bit for bit.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from matplotlib.path import Path as MplPath

from . import mcmc
from .forward import DEFAULT_K, MeasurementSet, forward_map, trig_sources, wavenumber
from .irgn import IrgnConfig, run_irgn
from .mesh import Mesh, boundary_interpolation, edge_adjacency, generate_disk_mesh, load_mesh, locate_points, transfer_field
from .model import DotModel
from .phantom import ParameterBounds, ParameterField, Phantom, phantom_from_dict, rasterize
from .regularizers import make_dot_regularizer, regularizer_from_dict

__all__ = [
    "CONFIG_VERSION",
    "OUTPUT_ENV",
    "HarnessError",
    "ExperimentConfig",
    "ReconstructionReport",
    "Simulation",
    "add_noise",
    "likelihood_sigma",
    "relative_error",
    "residual_error",
    "elevated_mask",
    "localization",
    "simulate",
    "reconstruct",
    "run_experiment",
    "rasterize_field",
    "export_field",
    "read_field_csv",
    "sweep",
]

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
OUTPUT_ENV = "DOTRECON_OUTPUT"

DEFAULTS = {
    "dotrecon_config": CONFIG_VERSION,
    "name": "desk",
    "seed": 0,
    "output": "runs/desk",
    "mesh": {
        "fine": {"radius": 10.0, "triangles": 2097, "seed": 1},
        "coarse": {"radius": 10.0, "triangles": 541, "seed": 2},
    },
    "phantom": {
        "inclusions": [{"shape": "circle", "center": [4.0, 0.0], "radius": 4.0}],
        "pin_rule": "edge",
    },
    "bounds": {"D_min": 0.01, "D_max": 2.0, "mu_max": 1.0},
    "sources": {"kind": "trig", "count": 16},
    "frequency_hz": 100e6,
    "noise_level": 0.01,
    "engine": "mcmc",
    "regularizer": {"kind": "tv"},
    "irgn": {"alpha0": 1.0, "decay": 1.5, "rho": 1.5, "s_min": 1e-3,
             "max_iterations": 20, "use_discrepancy": True},
    "mcmc": {
        "profile": "full",
        "alpha": 100.0,
        "a_o": 0.234,
        "eps": 0.05,
        "c0_fraction": 0.002,
        "thin": 10,
        "noise_floor": 1e-3,
        "warm_start": {"iterations": 3, "alpha0": 400.0, "decay": 1.5},
    },
    "sweep": {"grid": {}},
}

PROFILES = {"full": mcmc.FULL_SCHEDULE, "fast": mcmc.FAST_SCHEDULE, "debug": mcmc.DEBUG_SCHEDULE}


class HarnessError(RuntimeError):
    """Failure of one pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


@dataclass
class ExperimentConfig:
    """Normalized experiment description (defaults merged in)."""

    data: dict

    @classmethod
    def from_dict(cls, d: Optional[dict] = None) -> "ExperimentConfig":
        d = dict(d or {})
        version = d.get("dotrecon_config", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise HarnessError("config", f"unsupported config version {version!r}")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        d = yaml.safe_load(text) or {}
        if "dotrecon_config" not in d:
            raise HarnessError("config", f"{path}: missing 'dotrecon_config' header")
        return cls.from_dict(d)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.data, sort_keys=False))

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"mcmc.alpha": 10})``."""
        d = copy.deepcopy(self.data)
        for key, val in updates.items():
            _set_path(d, key, val)
        return ExperimentConfig.from_dict(d)

    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        d = self.data
        if float(d["noise_level"]) < 0:
            raise HarnessError("config", "noise_level must be >= 0")
        if d["engine"] not in ("irgn", "mcmc"):
            raise HarnessError("config", f"unknown engine {d['engine']!r}")
        prof = d["mcmc"]["profile"]
        if not isinstance(prof, (list, dict)) and prof not in PROFILES:
            raise HarnessError("config", f"unknown chain profile {prof!r}")
        if d["mesh"]["fine"] == d["mesh"]["coarse"]:
            raise HarnessError("config", "fine and coarse meshes must differ")

    def __getitem__(self, key):
        return self.data[key]

    @property
    def schedule(self) -> mcmc.Schedule:
        p = self.data["mcmc"]["profile"]
        if isinstance(p, dict):
            return mcmc.Schedule(int(p["m"]), int(p["M"]), int(p["B"]), int(p["N"]))
        if isinstance(p, list):
            return mcmc.Schedule(*[int(v) for v in p])
        return PROFILES[p]

    @property
    def k(self) -> float:
        if "k" in self.data:
            return float(self.data["k"])
        return wavenumber(float(self.data["frequency_hz"]))

    def output_dir(self) -> Path:
        out = Path(self.data["output"])
        root = os.environ.get(OUTPUT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


@dataclass
class ReconstructionReport:
    field: ParameterField
    residual: float
    errors: dict
    localization: dict
    runtime: float
    engine: str
    engine_meta: dict
    xi: float
    config: dict

    def metrics(self) -> dict:
        return {
            "engine": self.engine,
            "xi": self.xi,
            "residual": self.residual,
            **self.errors,
            "localization": self.localization,
            "runtime_s": self.runtime,
            "engine_meta": self.engine_meta,
        }


# -- noise and metrics ----------------------------------------------------------

def add_noise(g: MeasurementSet, level: float, seed=0):
    """Relative Gaussian noise on every real component.

    Returns ``(noisy, xi)`` where ``xi = ||g - noisy||``. The noisy set
    carries ``sigma_i = level |g_i|`` floored at ``level * mean|g|``.
    """
    if level < 0:
        raise ValueError("noise level must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v = g.vector
    z = rng.standard_normal(v.size)
    noisy = v + level * np.abs(v) * z
    sigma = level * np.maximum(np.abs(v), np.mean(np.abs(v)))
    xi = float(np.linalg.norm(noisy - v))
    return g.with_vector(noisy, sigma=sigma, noise={"level": level, "model": "relative-per-component"}), xi


def likelihood_sigma(clean_or_noisy, level: float, floor: float = 1e-3) -> np.ndarray:
    """Standard deviations for the likelihood, with ``level`` floored at
    ``floor`` so that noiseless data still give a proper density."""
    v = np.abs(np.asarray(clean_or_noisy, dtype=float))
    return max(level, floor) * np.maximum(v, v.mean())


def _values(x, param):
    return getattr(x, param) if isinstance(x, ParameterField) else np.asarray(x, dtype=float)


def relative_error(truth, recon, p: int = 1, param: str = "mu", areas=None) -> float:
    """Area-weighted ``||truth - recon||_p / ||truth||_p``.

    ``truth`` and ``recon`` are parameter fields (then ``param`` picks ``D``
    or ``mu`` and the mesh supplies the areas) or per-triangle arrays.
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    t = _values(truth, param)
    r = _values(recon, param)
    if areas is None:
        areas = truth.mesh.areas if isinstance(truth, ParameterField) else np.ones_like(t)
    if t.shape != r.shape:
        raise ValueError("truth and reconstruction live on different meshes")
    denom = np.sum(areas * np.abs(t) ** p) ** (1.0 / p)
    if denom == 0:
        raise ValueError("truth has zero norm")
    return float(np.sum(areas * np.abs(t - r) ** p) ** (1.0 / p) / denom)


def residual_error(recon: ParameterField, data, k: float, sources) -> float:
    """``||F(q_recon) - g||`` on the reconstruction mesh."""
    d = data.vector if isinstance(data, MeasurementSet) else np.asarray(data, dtype=float)
    return float(np.linalg.norm(forward_map(recon.mesh, recon, k, sources).vector - d))


def elevated_mask(field: ParameterField, mu_background: float) -> np.ndarray:
    """Free triangles whose absorption excess is above half its maximum."""
    excess = np.where(field.pinned, 0.0, field.mu - mu_background)
    top = excess.max()
    if top <= 0:
        return np.zeros(len(excess), dtype=bool)
    return excess > 0.5 * top


def localization(recon: ParameterField, truth: ParameterField, mu_background: float) -> dict:
    """Share of elevated-absorption triangles that lie in the true inclusion."""
    elev = elevated_mask(recon, mu_background)
    inside = truth.mu > mu_background
    n = int(elev.sum())
    hit = int((elev & inside).sum())
    return {"elevated": n, "inside": hit, "fraction": hit / n if n else 0.0,
            "inclusion_triangles": int(inside.sum())}


# -- pipeline -------------------------------------------------------------------

def _mesh(spec) -> Mesh:
    if "path" in spec:
        return load_mesh(spec["path"])
    return generate_disk_mesh(float(spec["radius"]), int(spec["triangles"]), int(spec.get("seed", 0)),
                              **{k: spec[k] for k in ("jitter", "grading") if k in spec})


def _sources(mesh: Mesh, spec):
    if spec.get("kind", "trig") != "trig":
        raise HarnessError("config", f"unknown source kind {spec.get('kind')!r}")
    return trig_sources(mesh, int(spec.get("count", 16)))


@dataclass
class Simulation:
    fine: Mesh
    coarse: Mesh
    truth_fine: ParameterField
    truth: ParameterField  # transferred to the coarse mesh
    clean: MeasurementSet  # at the coarse boundary nodes
    noisy: MeasurementSet
    xi: float
    k: float
    sources: object  # coarse-mesh source bank
    background: tuple


def simulate(cfg: ExperimentConfig) -> Simulation:
    """Fine-mesh forward solve, trace transfer and noise."""
    d = cfg.data
    try:
        fine, coarse = _mesh(d["mesh"]["fine"]), _mesh(d["mesh"]["coarse"])
    except Exception as exc:
        raise HarnessError("mesh", str(exc)) from exc
    if fine.n_triangles == coarse.n_triangles and np.array_equal(fine.triangles, coarse.triangles):
        raise HarnessError("mesh", "fine and coarse meshes are identical")
    bounds = ParameterBounds(**d["bounds"])
    try:
        ph = phantom_from_dict(d["phantom"], bounds)
    except Exception as exc:
        raise HarnessError("phantom", str(exc)) from exc
    pin = d["phantom"].get("pin_rule", "edge")
    truth_fine = rasterize(ph, fine, pin_rule=pin)
    background = (ph.D_background, ph.mu_background)
    # truth on the coarse mesh comes from the fine field, never from the phantom
    coarse_ref = rasterize(Phantom(ph.D_background, ph.mu_background, (), bounds), coarse, pin_rule=pin)
    truth = coarse_ref.with_values(transfer_field(fine, truth_fine.D, coarse),
                                   transfer_field(fine, truth_fine.mu, coarse))
    k = cfg.k
    try:
        g_fine = forward_map(fine, truth_fine, k, _sources(fine, d["sources"]))
    except Exception as exc:
        raise HarnessError("simulate", str(exc)) from exc
    P = boundary_interpolation(fine, coarse)
    clean = MeasurementSet((P @ g_fine.traces.T).T.copy(), k, g_fine.source_description)
    noisy, xi = add_noise(clean, float(d["noise_level"]), np.random.default_rng([int(d["seed"]), 1]))
    return Simulation(fine, coarse, truth_fine, truth, clean, noisy, xi, k,
                      _sources(coarse, d["sources"]), background)


def _model(sim: Simulation, cfg: ExperimentConfig) -> DotModel:
    ref = sim.truth.with_values(sim.background[0], sim.background[1])
    return DotModel(ref, sim.k, sim.sources, ParameterBounds(**cfg["bounds"]))


def _irgn(model: DotModel, data, xi, icfg: dict, weights=None, callback=None):
    w = np.ones_like(data) if weights is None else 1.0 / np.asarray(weights)
    cfg = IrgnConfig(**{k: icfg[k] for k in icfg if k in IrgnConfig.__dataclass_fields__})
    ones = np.ones(model.size)
    return run_irgn(lambda x: model.forward_scaled(x) * w,
                    lambda x: model.jacobian_scaled(x) * w[:, None],
                    data * w, xi, cfg, ones, model.laplacian(), q_ref=ones,
                    project=model.project_scaled,
                    gradient=lambda x, r: model.gradient_scaled(x, r * w),
                    callback=callback)


def reconstruct(sim: Simulation, cfg: ExperimentConfig, progress=None):
    """Run the configured engine; returns ``(field, meta, chain)``."""
    model = _model(sim, cfg)
    data = sim.noisy.vector
    d = cfg.data
    if d["engine"] == "irgn":
        res = _irgn(model, data, sim.xi, d["irgn"])
        meta = {"iterations": res.iterations, "reason": res.reason,
                "discrepancy_reached": res.discrepancy_reached,
                "residual_norms": [float(v) for v in res.residual_norms],
                "alphas": [float(a) for a in res.alphas], "steps": [float(s) for s in res.steps]}
        return model.field(model.to_physical(res.q)), meta, None

    mc = d["mcmc"]
    sigma = likelihood_sigma(sim.clean.vector, float(d["noise_level"]), float(mc["noise_floor"]))
    warm = mc["warm_start"]
    q0 = model.background()
    if int(warm["iterations"]) > 0:
        wcfg = {"alpha0": warm["alpha0"], "decay": warm["decay"],
                "max_iterations": int(warm["iterations"]), "use_discrepancy": False}
        q0 = model.to_physical(_irgn(model, data, sim.xi, wcfg, weights=sigma).q)
    reg = make_dot_regularizer(regularizer_from_dict(d["regularizer"]), edge_adjacency(model.mesh))

    def prior(q):
        f = model.field(q)
        return reg(f.D, f.mu)

    spec = mcmc.PosteriorSpec(model.forward, data, sigma, prior, float(mc["alpha"]), model.lower, model.upper)
    C0 = (float(mc["c0_fraction"]) * model.scale) ** 2
    chain = mcmc.run_pilot_metropolis(lambda q: mcmc.log_posterior(q, spec), q0, C0, cfg.schedule,
                                      float(mc["a_o"]), float(mc["eps"]),
                                      seed=int(np.random.default_rng([int(d["seed"]), 2]).integers(2**32)),
                                      thin=int(mc["thin"]), progress=progress)
    q = model.project(mcmc.posterior_mean(chain))
    s = cfg.schedule
    meta = {"schedule": {"m": s.m, "M": s.M, "B": s.B, "N": s.N},
            "acceptance_post_pilot": float(chain.accepted[s.pilot:].mean()),
            "proposal_scale_final": float(np.sqrt(chain.epoch_covariances[-1][0] / C0[0])),
            "warm_start_iterations": int(warm["iterations"])}
    return model.field(q), meta, chain


def _write_manifest(out: Path, cfg: ExperimentConfig, files) -> None:
    entries = {}
    for f in sorted(files):
        p = out / f
        entries[f] = hashlib.sha256(p.read_bytes()).hexdigest()
    (out / "manifest.json").write_text(json.dumps(
        {"config_hash": cfg.hash(), "config_version": CONFIG_VERSION, "files": entries}, indent=1))


def run_experiment(cfg: ExperimentConfig, write: bool = True, progress=None) -> ReconstructionReport:
    """Simulate, reconstruct, score and (optionally) write artifacts."""
    t0 = time.perf_counter()
    sim = simulate(cfg)
    try:
        recon, meta, chain = reconstruct(sim, cfg, progress)
    except HarnessError:
        raise
    except Exception as exc:
        raise HarnessError("reconstruct", str(exc)) from exc
    runtime = time.perf_counter() - t0
    errors = {f"{par}_L{p}": relative_error(sim.truth, recon, p, par) for par in ("mu", "D") for p in (1, 2)}
    report = ReconstructionReport(
        recon, residual_error(recon, sim.noisy, sim.k, sim.sources), errors,
        localization(recon, sim.truth, sim.background[1]), runtime, cfg["engine"], meta, sim.xi,
        copy.deepcopy(cfg.data))
    if write:
        try:
            _write_artifacts(cfg, sim, report, chain)
        except OSError as exc:
            raise HarnessError("export", str(exc)) from exc
    return report


def _write_artifacts(cfg, sim, report, chain) -> None:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    files = ["config.yaml"]
    sim.clean.to_csv(out / "measurements_clean.csv", sim.coarse.boundary_nodes)
    sim.noisy.to_csv(out / "measurements.csv", sim.coarse.boundary_nodes)
    files += ["measurements_clean.csv", "measurements_clean.json", "measurements.csv", "measurements.json"]
    for name, f in (("truth", sim.truth), ("recon", report.field)):
        files += [Path(p).name for p in export_field(f, out / name, vmin_max=_color_range(sim.truth))]
    if report.engine == "irgn":
        m = report.engine_meta
        with (out / "irgn_history.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual_norm", "alpha", "step"])
            for i, r in enumerate(m["residual_norms"]):
                a, s = (m["alphas"][i - 1], m["steps"][i - 1]) if i else ("", "")
                w.writerow([i, repr(r), repr(a) if i else a, repr(s) if i else s])
        files.append("irgn_history.csv")
    if chain is not None:
        chain.to_csv(out / "chain.csv")
        files += ["chain.csv", "chain.json"]
        if chain.N - chain.B >= 1000:
            rep = mcmc.diagnostics(chain)
            rep.to_csv(out / "diagnostics.csv")
            (out / "diagnostics.txt").write_text(rep.summary() + "\n")
            files += ["diagnostics.csv", "diagnostics.txt"]
    (out / "metrics.json").write_text(json.dumps(report.metrics(), indent=1, default=float))
    files.append("metrics.json")
    _write_manifest(out, cfg, files)


# -- field export ---------------------------------------------------------------

def _color_range(field: ParameterField):
    return {"D": (float(field.D.min()), float(field.D.max())),
            "mu": (float(field.mu.min()), float(field.mu.max()))}


def rasterize_field(field: ParameterField, resolution: int = 200):
    """Sample a field on a square pixel grid over the mesh bounding box.

    Returns ``(images, extent)`` where ``images`` maps ``"D"`` and ``"mu"``
    to ``(resolution, resolution)`` arrays (row 0 at the top, NaN outside
    the mesh) and ``extent = (xmin, xmax, ymin, ymax)``.
    """
    mesh = field.mesh
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    h = (hi - lo) / resolution
    xs = lo[0] + h[0] * (np.arange(resolution) + 0.5)
    ys = hi[1] - h[1] * (np.arange(resolution) + 0.5)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    # cheap polygon pre-filter so only pixels in the domain are located
    cand = np.zeros(len(pts), dtype=bool)
    for loop in mesh.boundary_loops:
        cand ^= MplPath(mesh.nodes[loop]).contains_points(pts)
    tri = np.zeros(len(pts), dtype=np.int64)
    inside = np.zeros(len(pts), dtype=bool)
    if cand.any():
        tri[cand], inside[cand] = locate_points(mesh, pts[cand])
    images = {}
    for name in ("D", "mu"):
        v = np.full(len(pts), np.nan)
        v[inside] = getattr(field, name)[tri[inside]]
        images[name] = v.reshape(resolution, resolution)
    return images, (lo[0], hi[0], lo[1], hi[1])


def export_field(field: ParameterField, path, resolution: int = 200, vmin_max: Optional[dict] = None):
    """Write ``<path>.csv`` (``triangle,D,mu``) and ``<path>_D.png``,
    ``<path>_mu.png``. Returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    csv_path = path.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["triangle", "D", "mu"])
        for i, (D, mu) in enumerate(zip(field.D, field.mu)):
            w.writerow([i, repr(float(D)), repr(float(mu))])
    images, extent = rasterize_field(field, resolution)
    vmin_max = vmin_max or _color_range(field)
    written = [csv_path]
    for name, img in images.items():
        lo, hi = vmin_max[name]
        if hi <= lo:
            lo, hi = lo - 0.5 * abs(lo or 1.0), hi + 0.5 * abs(hi or 1.0)
        fig, ax = plt.subplots(figsize=(4.2, 3.6), dpi=100)
        im = ax.imshow(img, extent=extent, origin="upper", cmap="viridis", vmin=lo, vmax=hi)
        fig.colorbar(im, ax=ax, label="mu (1/mm)" if name == "mu" else "D (mm)")
        ax.set_aspect("equal")
        ax.set_xlabel("x (mm)")
        ax.set_ylabel("y (mm)")
        png = path.parent / f"{path.name}_{name}.png"
        fig.savefig(png, metadata={"Software": None})
        plt.close(fig)
        written.append(png)
    return written


def read_field_csv(path, reference: ParameterField) -> ParameterField:
    """Field on ``reference``'s mesh (and pinning) from a ``triangle,D,mu`` CSV."""
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        if next(r) != ["triangle", "D", "mu"]:
            raise ValueError(f"{path}: unexpected header")
        rows = [(int(i), float(D), float(mu)) for i, D, mu in r]
    if len(rows) != reference.mesh.n_triangles:
        raise ValueError(f"{path}: {len(rows)} rows for {reference.mesh.n_triangles} triangles")
    rows.sort()
    D = np.array([r[1] for r in rows])
    mu = np.array([r[2] for r in rows])
    return reference.with_values(D, mu)


# -- sweep ----------------------------------------------------------------------

def sweep(cfg: ExperimentConfig, grid: Optional[dict] = None, write: bool = False):
    """Run the experiment for every point of ``grid`` (dotted key -> values).

    Returns ``(results, best)`` where ``results`` is a list of
    ``(overrides, report)`` and ``best`` the entry with the smallest mean of
    the ``mu`` and ``D`` relative L2 errors against the known truth.
    """
    grid = grid if grid is not None else cfg["sweep"].get("grid", {})
    if not grid:
        raise HarnessError("config", "empty sweep grid")
    keys = list(grid)
    combos = [dict()]
    for k in keys:
        combos = [dict(c, **{k: v}) for c in combos for v in grid[k]]
    results = []
    for i, over in enumerate(combos):
        sub = cfg.replace(**over, output=str(Path(cfg["output"]) / f"sweep_{i:03d}"))
        results.append((over, run_experiment(sub, write=write)))
    best = min(results, key=lambda r: 0.5 * (r[1].errors["mu_L2"] + r[1].errors["D_L2"]))
    return results, best
