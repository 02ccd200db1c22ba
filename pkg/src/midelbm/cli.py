"""Command line entry point: ``midelbm {fit,sim,descriptors,mesh}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import engine, geometry as geo, imaging, io as mio, metrics

log = logging.getLogger("midelbm")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="midelbm", description=__doc__)
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="numba worker threads")
    p.add_argument("--out-dir", default=".", help="directory for output files")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a Metaball to a point cloud (XYZ or PLY)")
    f.add_argument("cloud")
    d = imaging.GaConfig()
    g = imaging.GsConfig()
    f.add_argument("--generations", type=int, default=d.generations)
    f.add_argument("--population", type=int, default=d.population)
    f.add_argument("--genes", type=int, default=d.genes)
    f.add_argument("--mutation", type=float, default=d.mutation_coeff)
    f.add_argument("--crossover", type=float, default=d.crossover_coeff)
    f.add_argument("--epochs", type=int, default=g.epochs)
    f.add_argument("--learning-rate", type=float, default=g.learning_rate)
    f.add_argument("--region", type=float, nargs=6, metavar=("XLO", "YLO", "ZLO", "XHI", "YHI", "ZHI"))

    s = sub.add_parser("sim", help="run a coupled simulation from a JSON config")
    s.add_argument("config", nargs="?", help="config path (default: $MIDELBM_CONFIG)")
    s.add_argument("--steps", type=int, help="override the configured step count")

    ds = sub.add_parser("descriptors", help="print sphericity, dn/ds and CSF")
    ds.add_argument("metaball")
    ds.add_argument("--resolution", type=int, default=128)

    m = sub.add_parser("mesh", help="export the surface as ASCII STL")
    m.add_argument("metaball")
    m.add_argument("--resolution", type=int, default=64)
    m.add_argument("-o", "--output", help="STL path (default <out-dir>/<name>.stl)")
    return p


def cmd_fit(args, out: Path) -> int:
    pts = mio.read_points(args.cloud)
    ga = imaging.GaConfig(args.generations, args.population, args.genes, args.mutation,
                          args.crossover, args.seed)
    gs = imaging.GsConfig(args.epochs, args.learning_rate)
    region = None if args.region is None else (args.region[:3], args.region[3:])
    t0 = time.perf_counter()
    res = imaging.fit(pts, ga, gs, region)
    elapsed = time.perf_counter() - t0
    stem = Path(args.cloud).stem
    mb_path = out / f"{stem}.metaball"
    mio.write_metaball(mb_path, res.metaball)
    absr = np.abs(res.residuals)
    report = {
        "points": int(res.hull.m),
        "control_points": int(res.metaball.n),
        "loss": float(res.loss),
        "mean_abs_residual": float(absr.mean()),
        "residual_quartiles": [float(v) for v in np.quantile(absr, [0, 0.25, 0.5, 0.75, 1.0])],
        "anomalies_cleared": int(res.cleared),
        "ga_best_fitness": float(res.ga.best_fitness),
        "centroid_offset": res.hull.centroid_offset.tolist(),
        "seed": args.seed,
    }
    (out / f"{stem}_report.json").write_text(json.dumps(report, indent=2) + "\n")
    mio.RunManifest("fit", mio.config_hash({"cloud": mio.file_digest(args.cloud), **vars(ga), **vars(gs)}),
                    args.seed, wall_clock=elapsed, timing={"fit": elapsed},
                    outputs=[mb_path.name, f"{stem}_report.json"]).write(out / f"{stem}_manifest.json")
    print(f"loss {res.loss:.6g}  mean |f-1| {absr.mean():.3e}  control points {res.metaball.n}")
    return 0


def cmd_sim(args, out: Path) -> int:
    path = args.config or os.environ.get("MIDELBM_CONFIG")
    if not path:
        raise SystemExit("sim: no config given and MIDELBM_CONFIG is unset")
    cfg, doc = mio.load_config(path)
    sim = engine.Simulation(cfg)
    manifest = mio.RunManifest("sim", mio.config_hash(doc), cfg.seed)
    t0 = time.perf_counter()
    status = 0
    try:
        sim.run(args.steps, out)
    except engine.StepError as exc:
        manifest.status = "failed"
        manifest.failure_step = exc.step
        manifest.error = str(exc)
        mio.write_series_csv(out / "particles.csv", sim.records)
        log.error("%s", exc)
        status = 1
    manifest.wall_clock = time.perf_counter() - t0
    manifest.timing = dict(sim.timing)
    manifest.outputs = sorted(p.name for p in out.iterdir() if p.suffix in (".vtk", ".csv"))
    manifest.write(out / "manifest.json")
    return status


def cmd_descriptors(args, out: Path) -> int:
    mb = mio.read_metaball(args.metaball)
    print(metrics.shape_descriptors(mb, args.resolution).row())
    return 0


def cmd_mesh(args, out: Path) -> int:
    mb = mio.read_metaball(args.metaball)
    verts, faces = metrics.surface_mesh(mb, args.resolution)
    target = Path(args.output) if args.output else out / (Path(args.metaball).stem + ".stl")
    mio.write_stl(target, verts, faces)
    print(f"{len(faces)} triangles -> {target}")
    return 0


COMMANDS = {"fit": cmd_fit, "sim": cmd_sim, "descriptors": cmd_descriptors, "mesh": cmd_mesh}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        import numba
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](args, out)
    except (OSError, ValueError, geo.EmptyLevelSetError, imaging.DegenerateHullError,
            imaging.DivergenceError) as exc:
        print(f"midelbm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
