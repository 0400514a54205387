"""Command-line entry point: ``dotrecon <command> ...``.

Relative output directories are placed under ``$DOTRECON_OUTPUT`` when that
variable is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness, mcmc
from .mesh import generate_disk_mesh, load_mesh, save_mesh
from .phantom import ParameterField

log = logging.getLogger("dotrecon")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig.from_dict()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "noise_level", None) is not None:
        over["noise_level"] = args.noise_level
    if getattr(args, "fast", False):
        over["mcmc.profile"] = "fast"
    if getattr(args, "profile", None):
        over["mcmc.profile"] = args.profile
    if getattr(args, "output", None):
        over["output"] = args.output
    if getattr(args, "engine", None):
        over["engine"] = args.engine
    return cfg.replace(**over) if over else cfg


def _experiment_flags(p, engine_flags=True):
    p.add_argument("-c", "--config", help="experiment YAML (defaults to the built-in desk setup)")
    p.add_argument("-o", "--output", help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--noise-level", type=float, help="relative noise level, e.g. 0.01")
    if engine_flags:
        p.add_argument("--fast", action="store_true", help="short chain profile (m=25, M=100, B=10000, N=25000)")
        p.add_argument("--profile", choices=sorted(harness.PROFILES), help="chain profile")


def cmd_mesh_gen(args):
    mesh = generate_disk_mesh(args.radius, args.triangles, args.seed, grading=args.grading)
    save_mesh(mesh, args.out)
    print(f"{args.out}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles, "
          f"{len(mesh.boundary_nodes)} boundary nodes")


def cmd_simulate(args):
    cfg = _config(args)
    sim = harness.simulate(cfg)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    save_mesh(sim.fine, out / "fine.mesh")
    save_mesh(sim.coarse, out / "coarse.mesh")
    sim.clean.to_csv(out / "measurements_clean.csv", sim.coarse.boundary_nodes)
    sim.noisy.to_csv(out / "measurements.csv", sim.coarse.boundary_nodes)
    files = ["config.yaml", "fine.mesh", "coarse.mesh", "measurements_clean.csv", "measurements_clean.json",
             "measurements.csv", "measurements.json"]
    files += [p.name for p in harness.export_field(sim.truth, out / "truth")]
    harness._write_manifest(out, cfg, files)
    print(f"simulated {len(sim.noisy)} values on {sim.fine.n_triangles} triangles; "
          f"xi = {sim.xi:.6g}; written to {out}")


def cmd_reconstruct(args):
    cfg = _config(args)

    def progress(i, x, lp, a_bar):
        if i % (50 * cfg.schedule.m) == 0:
            log.info("iteration %d  log-posterior %.4g  epoch acceptance %.2f", i, lp, a_bar)

    rep = harness.run_experiment(cfg, progress=progress)
    m = rep.metrics()
    print(json.dumps({k: m[k] for k in ("engine", "xi", "residual", "mu_L1", "mu_L2", "D_L1", "D_L2",
                                        "localization", "runtime_s")}, indent=1, default=float))
    print(f"artifacts in {cfg.output_dir()}")


def cmd_metrics(args):
    mesh = load_mesh(args.mesh)
    ref = ParameterField(mesh, 1.0, 1.0)
    truth = harness.read_field_csv(args.truth, ref)
    recon = harness.read_field_csv(args.recon, ref)
    out = {f"{par}_L{p}": harness.relative_error(truth, recon, p, par) for par in ("mu", "D") for p in (1, 2)}
    print(json.dumps(out, indent=1))


def cmd_diagnostics(args):
    chain = mcmc.Chain.from_csv(args.chain)
    rep = mcmc.diagnostics(chain, window=args.window)
    print(rep.summary())
    if args.csv:
        rep.to_csv(args.csv)


def cmd_sweep(args):
    cfg = _config(args)
    results, best = harness.sweep(cfg, write=args.write)
    for over, rep in results:
        print(json.dumps(over), f"mu_L2={rep.errors['mu_L2']:.4f} D_L2={rep.errors['D_L2']:.4f}")
    print("best:", json.dumps(best[0]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dotrecon", description="Diffuse optical tomography reconstruction")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    mesh = sub.add_parser("mesh", help="mesh utilities").add_subparsers(dest="mesh_command", required=True)
    gen = mesh.add_parser("gen", help="generate a disk mesh")
    gen.add_argument("--radius", type=float, default=10.0)
    gen.add_argument("--triangles", type=int, default=541)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--grading", type=float, default=1.4)
    gen.add_argument("-o", "--out", required=True)
    gen.set_defaults(func=cmd_mesh_gen)

    sim = sub.add_parser("simulate", help="simulate noisy measurements on the fine mesh")
    _experiment_flags(sim, engine_flags=False)
    sim.set_defaults(func=cmd_simulate)

    rec = sub.add_parser("reconstruct", help="run a full experiment with one engine")
    eng = rec.add_subparsers(dest="engine", required=True)
    for name, text in (("irgn", "iteratively regularized Gauss-Newton"), ("mcmc", "pilot adaptive Metropolis")):
        e = eng.add_parser(name, help=text)
        _experiment_flags(e)
        e.set_defaults(func=cmd_reconstruct)

    met = sub.add_parser("metrics", help="relative errors between two field CSVs")
    met.add_argument("--mesh", required=True)
    met.add_argument("--truth", required=True)
    met.add_argument("--recon", required=True)
    met.set_defaults(func=cmd_metrics)

    dia = sub.add_parser("diagnostics", help="convergence diagnostics of a stored chain")
    dia.add_argument("--chain", required=True, help="chain CSV (with its .json sidecar)")
    dia.add_argument("--window", type=int, help="acceptance trace window (default m)")
    dia.add_argument("--csv", help="write per-coordinate diagnostics here")
    dia.set_defaults(func=cmd_diagnostics)

    sw = sub.add_parser("sweep", help="grid search over the config's sweep.grid")
    _experiment_flags(sw)
    sw.add_argument("--write", action="store_true", help="write artifacts for every grid point")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (harness.HarnessError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
