"""Command-line pipeline: dataset generation, carving, refinement, sweeps and metrics.

Every subcommand writes plot-ready CSV next to its other outputs; ``--plots``
additionally renders PNG figures when matplotlib is installed.

Exit codes: 0 success, 2 configuration or input error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .carve import EmptyCarve, carve
from .dataset import Dataset, DatasetError, load_dataset, write_dataset
from .forward import EmptyMask, RenderConfig
from .geom import SonarGeometry
from .mesh import MeshError, TriangleMesh, bumpy_sphere, load_obj, save_obj
from .metrics import EmptyRegion, nve
from .refine import NoRelevantViews, RefineConfig, RefineResult, analyze_view, run
from .register import NoConvergence, SearchConfig
from .scene import SceneConfig, carve_views, synthesize, to_views

logger = logging.getLogger("sonar3d")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3
PIPELINE_ERRORS = (EmptyCarve, EmptyMask, EmptyRegion, MeshError, NoConvergence, NoRelevantViews)
SWEEP_LEVELS = (0.05, 0.1, 0.15, 0.2)


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class CarveConfig:
    seg_threshold: float = 0.2
    dilate_beams: int = 2
    resolution: int = 96
    target_triangles: int = 2000
    smooth_sigma: float = 1.0


@dataclass
class RunConfig:
    """Everything a run depends on; reproducible from this plus the seed it carries."""

    geometry: SonarGeometry = field(default_factory=SonarGeometry)
    scene: SceneConfig = field(default_factory=SceneConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    carve: CarveConfig = field(default_factory=CarveConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def validate(self) -> "RunConfig":
        r, c, s = self.refine, self.carve, self.refine.search
        positive = {
            "refine.lambda_gate": r.lambda_gate, "refine.d1": r.d1, "refine.d2": r.d2,
            "refine.step": r.step, "refine.support_threshold": r.support_threshold,
            "search.r_cap": s.r_cap, "carve.resolution": c.resolution,
            "carve.target_triangles": c.target_triangles,
        }
        bad = [k for k, v in positive.items() if not v > 0]
        if bad:
            raise ConfigError(f"must be positive: {', '.join(bad)}")
        for name, thr in (("refine.seg_threshold", r.seg_threshold),
                          ("carve.seg_threshold", c.seg_threshold)):
            if not 0 < thr < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if r.d2 <= r.d1:
            raise ConfigError("refine.d2 must exceed refine.d1")
        if r.max_iter < 0 or c.dilate_beams < 0 or r.smooth < 0:
            raise ConfigError("max_iter, dilate_beams and smooth must be non-negative")
        if any(int(v) % 2 == 0 or int(v) < 1 for v in (*s.block, *s.window)):
            raise ConfigError("correlation block and window sizes must be odd")
        if s.r0 < 0 or s.r_slope < 0 or s.r_cap < s.r0:
            raise ConfigError("r-schedule needs 0 <= r0 <= r_cap and a non-negative slope")
        return self

    def to_dict(self) -> dict:
        refine = dataclasses.asdict(self.refine)
        refine.pop("render", None)
        g = self.geometry
        return {
            "geometry": {"n_beams": g.n_beams, "n_bins": g.n_bins, "r_min": g.r_min,
                         "r_max": g.r_max, "w_theta_deg": math.degrees(g.w_theta),
                         "w_phi_deg": math.degrees(g.w_phi)},
            "scene": self.scene.to_dict(),
            "refine": refine,
            "carve": dataclasses.asdict(self.carve),
            "render": dataclasses.asdict(self.render),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"geometry", "scene", "refine", "carve", "render"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            gd = dict(d.get("geometry", {}))
            for key in ("w_theta", "w_phi"):
                if f"{key}_deg" in gd:
                    gd[key] = math.radians(float(gd.pop(f"{key}_deg")))
            geometry = SonarGeometry(**gd)
            sd = dict(d.get("scene", {}))
            if "target" in sd:
                sd["target"] = tuple(sd["target"])
            scene = SceneConfig(**sd)
            rd = dict(d.get("refine", {}))
            search = SearchConfig(**{k: tuple(v) if isinstance(v, list) else v
                                     for k, v in rd.pop("search", {}).items()})
            render = RenderConfig(**d.get("render", {}))
            refine = RefineConfig(search=search, render=render, **rd)
            carve_cfg = CarveConfig(**d.get("carve", {}))
        except TypeError as exc:
            raise ConfigError(f"bad config key: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(geometry, scene, refine, carve_cfg, render).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


# --------------------------------------------------------------------- pipeline


def default_truth() -> TriangleMesh:
    """Sphere of radius 0.1 m with one bump, about 5000 triangles."""
    return bumpy_sphere(0.1, 4)


def gen_dataset(out, cfg: RunConfig, truth: TriangleMesh | None = None) -> Path:
    """Render and write a synthetic dataset; deterministic for a fixed config."""
    truth = truth if truth is not None else default_truth()
    truth.validate()
    synth = synthesize(truth, cfg.scene, cfg.geometry, cfg.render, cfg.refine.seg_threshold,
                       cfg.refine.support_threshold)
    return write_dataset(out, synth, cfg.geometry, scene=cfg.scene.to_dict(), seed=cfg.scene.seed,
                         truth=truth, extra={"config": cfg.to_dict()})


def carve_dataset(ds: Dataset, cfg: RunConfig):
    """Initial mesh by space carving the dataset's segmented images."""
    c = cfg.carve
    views = carve_views(ds.images, ds.poses, ds.geometry, c.seg_threshold, None, c.dilate_beams)
    return carve(views, ds.geometry, resolution=c.resolution, target_triangles=c.target_triangles,
                 smooth_sigma=c.smooth_sigma)


def iteration_rows(result: RefineResult, label: str) -> list:
    rows = []
    for rep in result.reports:
        row = {"run": label, **rep.row(), "best": int(rep.k == result.best_iteration)}
        rows.append(row)
    return rows


def write_csv(path, rows: list, fields: list | None = None) -> Path:
    path = Path(path)
    if fields is None:
        fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def _emit(rows: list, fields: list | None = None, stream=None) -> None:
    stream = stream or sys.stdout
    if not rows:
        return
    w = csv.DictWriter(stream, fieldnames=fields or list(rows[0]), extrasaction="ignore",
                       lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def _try_plot(fn, *args) -> Path | None:
    from .plotting import PlottingUnavailable

    try:
        return fn(*args)
    except PlottingUnavailable as exc:
        logger.warning("%s; skipping figures", exc)
        return None


def reconstruct(ds: Dataset, cfg: RunConfig, out, truth: TriangleMesh | None = None,
                init: TriangleMesh | None = None, ablation: bool = False,
                dump_iters: bool = False, plots: bool = False) -> dict:
    """Carve, refine and report one dataset.

    With ``ablation`` a second refinement without ghost masking starts from the
    same initial mesh and is reported next to the first.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if init is None:
        init, grid = carve_dataset(ds, cfg)
        grid.save(out / "occupancy.bin")
    save_obj(init, out / "initial.obj")
    views = to_views(ds.views)
    runs = {"masked": cfg.refine}
    if ablation:
        runs["unmasked"] = dataclasses.replace(cfg.refine, ghost_masking=False)
    summary = {"dataset": str(ds.root), "config": cfg.to_dict(), "runs": {}}
    all_rows = []
    for label, rcfg in runs.items():
        res = run(init, views, ds.geometry, rcfg, truth=truth)
        suffix = "" if label == "masked" else f"_{label}"
        save_obj(res.mesh, out / f"refined{suffix}.obj")
        if dump_iters:
            for k, m in enumerate(res.meshes):
                save_obj(m, out / f"iter{suffix}_{k:03d}.obj")
        rows = iteration_rows(res, label)
        all_rows += rows
        best = res.reports[res.best_iteration]
        info = {"best_iteration": res.best_iteration, "E_I": best.e_i, "NAIE": best.naie,
                "NACE": best.nace, "iterations": len(res.reports) - 1,
                "per_view_IE": best.ie, "per_view_CE": best.ce, "flags": best.flags}
        if truth is not None:
            info["NVE_initial"] = res.reports[0].nve
            info["NVE_refined"] = best.nve
            info["NVE_last"] = res.reports[-1].nve
        summary["runs"][label] = info
    write_csv(out / "iterations.csv", all_rows)
    summary["seconds"] = time.perf_counter() - t0
    (out / "report.json").write_text(json.dumps(summary, indent=2, default=_jsonable))
    if plots:
        from .plotting import plot_iterations

        grouped = {}
        for r in all_rows:
            grouped.setdefault(r["run"], []).append(r)
        _try_plot(plot_iterations, grouped, out / "iterations.png")
    summary["rows"] = all_rows
    return summary


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return str(x)


def _sweep_one(args):
    cfg, truth, sigma, seed, iters = args
    scene = dataclasses.replace(cfg.scene, sigma=sigma, seed=seed, noise_seed=cfg.scene.seed)
    synth = synthesize(truth, scene, cfg.geometry, cfg.render, cfg.refine.seg_threshold,
                       cfg.refine.support_threshold)
    c = cfg.carve
    views = carve_views([s.image for s in synth], [s.pose for s in synth], cfg.geometry,
                        c.seg_threshold, None, c.dilate_beams)
    init, _ = carve(views, cfg.geometry, resolution=c.resolution,
                    target_triangles=c.target_triangles, smooth_sigma=c.smooth_sigma)
    rcfg = dataclasses.replace(cfg.refine, max_iter=iters)
    res = run(init, to_views(synth, assume_flat=True), cfg.geometry, rcfg)
    return {"sigma": sigma, "seed": seed, "nve_initial": nve(init, truth),
            "nve": nve(res.meshes[-1], truth), "nve_best_ei": nve(res.mesh, truth),
            "iterations": len(res.meshes) - 1}


def sweep_interface(cfg: RunConfig, out, truth: TriangleMesh | None = None,
                    levels=SWEEP_LEVELS, n_seeds: int = 20, iters: int = 5, workers: int = 1,
                    plots: bool = False):
    """NVE after ``iters`` updates per interface-fluctuation level, flat baseline first.

    Seeds vary only the interface draw; the intensity-noise draw is fixed by
    ``cfg.scene.seed``. Reconstruction always assumes a flat interface.

    Returns:
        ``(aggregate_rows, run_rows)``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    truth = truth if truth is not None else default_truth()
    levels = [0.0] + [float(s) for s in levels if float(s) != 0.0]
    jobs = [(cfg, truth, s, k, iters) for s in levels for k in range(n_seeds)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            run_rows = list(ex.map(_sweep_one, jobs))
    else:
        run_rows = []
        for job in jobs:
            run_rows.append(_sweep_one(job))
            logger.info("sigma %.3f seed %d: NVE %.4f", job[2], job[3], run_rows[-1]["nve"])
    agg = []
    for s in levels:
        v = np.array([r["nve"] for r in run_rows if r["sigma"] == s])
        agg.append({"sigma": s, "nve_mean": float(v.mean()), "nve_std": float(v.std()),
                    "n": int(len(v))})
    base = agg[0]["nve_mean"]
    for row in agg:
        row["delta_vs_flat"] = row["nve_mean"] - base
    write_csv(out / "sweep_runs.csv", run_rows)
    write_csv(out / "sweep.csv", agg)
    if plots:
        from .plotting import plot_sweep

        _try_plot(plot_sweep, agg, out / "sweep.png")
    return agg, run_rows


def mesh_metrics(a: TriangleMesh, b: TriangleMesh | None = None, ds: Dataset | None = None,
                 cfg: RunConfig | None = None, resolution: int = 128):
    """Volume figures for ``a`` (and NVE against ``b``), plus per-view image errors."""
    cfg = cfg or RunConfig()
    summary = {"volume": a.volume(), "triangles": a.n_triangles}
    if b is not None:
        summary["reference_volume"] = b.volume()
        summary["NVE"] = nve(a, b, resolution)
    per_view = []
    if ds is not None:
        for k, v in enumerate(to_views(ds.views)):
            an = analyze_view(a, v, ds.geometry, cfg.refine, 0)
            per_view.append({"view": k, "IE": an.ie, "CE": an.lam, "relevant": int(an.relevant)})
    return summary, per_view


# -------------------------------------------------------------------- argparse


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration; flags override it.")
    g = p.add_argument_group("scene")
    g.add_argument("--m-p", type=int, dest="m_p", help="Sonar positions around the target.")
    g.add_argument("--m-r", type=int, dest="m_r", help="Roll angles per position.")
    g.add_argument("--distance", type=float, help="Sonar-target distance [m].")
    g.add_argument("--sonar-z", type=float, dest="sonar_z", help="Sonar height [m].")
    g.add_argument("--surface-z", type=float, dest="surface_z", help="Interface height [m].")
    g.add_argument("--pitch", type=float, dest="pitch_deg", help="Sonar pitch [deg].")
    g.add_argument("--noise", type=float, help="Additive intensity noise std (unit-peak images).")
    g.add_argument("--sigma", type=float, help="Interface height fluctuation std [m].")
    g.add_argument("--seed", type=int, help="Random seed.")
    g.add_argument("--no-multipath", action="store_true", help="Render without the interface.")
    r = p.add_argument_group("refinement")
    r.add_argument("--max-iter", type=int, dest="max_iter")
    r.add_argument("--lambda-gate", type=float, dest="lambda_gate", help="Contour gate [m].")
    r.add_argument("--seg-threshold", type=float, dest="seg_threshold")
    r.add_argument("--d1", type=float, help="Blend distance with full contour weight [m].")
    r.add_argument("--d2", type=float, help="Blend distance with 1%% contour weight [m].")
    r.add_argument("--step", type=float, help="Fraction of the solved motion applied per update.")
    r.add_argument("--smooth", type=float, help="Motion-smoothness weight of the vertex solve.")
    r.add_argument("--block", type=int, nargs=2, metavar=("BEAMS", "BINS"))
    r.add_argument("--window", type=int, nargs=2, metavar=("BEAMS", "BINS"))
    r.add_argument("--r-cap", type=float, dest="r_cap")
    c = p.add_argument_group("carving")
    c.add_argument("--carve-threshold", type=float, dest="carve_threshold")
    c.add_argument("--dilate-beams", type=int, dest="dilate_beams")
    c.add_argument("--resolution", type=int, help="Voxels per axis.")
    c.add_argument("--triangles", type=int, help="Target triangle count of the carved mesh.")


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    d = cfg.to_dict()
    a = vars(args)
    for key in ("m_p", "m_r", "distance", "sonar_z", "surface_z", "pitch_deg", "noise", "sigma",
                "seed"):
        if a.get(key) is not None:
            d["scene"][key] = a[key]
    if a.get("no_multipath"):
        d["scene"]["multipath"] = False
    for key in ("max_iter", "lambda_gate", "seg_threshold", "d1", "d2", "step", "smooth"):
        if a.get(key) is not None:
            d["refine"][key] = a[key]
    for key, dst in (("block", "block"), ("window", "window"), ("r_cap", "r_cap")):
        if a.get(key) is not None:
            d["refine"]["search"][dst] = a[key]
    for key, dst in (("carve_threshold", "seg_threshold"), ("dilate_beams", "dilate_beams"),
                     ("resolution", "resolution"), ("triangles", "target_triangles")):
        if a.get(key) is not None:
            d["carve"][dst] = a[key]
    return RunConfig.from_dict(d)


def _load_mesh(path) -> TriangleMesh:
    try:
        return load_obj(path)
    except OSError as exc:
        raise ConfigError(f"cannot read mesh {path}: {exc}") from exc


def cmd_gen(args) -> int:
    cfg = build_config(args)
    truth = _load_mesh(args.truth) if args.truth else None
    out = gen_dataset(args.out, cfg, truth)
    if args.plots:
        from .plotting import plot_view

        ds = load_dataset(out, verify=False)
        for v in ds.views:
            if _try_plot(plot_view, v.image, out / f"{v.name}.png", v.labels, v.name) is None:
                break
    print(f"wrote {cfg.scene.m_p * cfg.scene.m_r} views to {out}")
    return EXIT_OK


def cmd_carve(args) -> int:
    cfg = build_config(args)
    ds = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh, grid = carve_dataset(ds, cfg)
    save_obj(mesh, out / "initial.obj")
    grid.save(out / "occupancy.bin")
    row = {"vertices": mesh.n_vertices, "triangles": mesh.n_triangles, "volume": mesh.volume()}
    truth = _load_mesh(args.truth) if args.truth else None
    if truth is not None:
        row["NVE"] = nve(mesh, truth)
    write_csv(out / "carve.csv", [row])
    _emit([row])
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = build_config(args)
    ds = load_dataset(args.dataset)
    truth = _load_mesh(args.truth) if args.truth else None
    init = _load_mesh(args.init) if args.init else None
    summary = reconstruct(ds, cfg, args.out, truth=truth, init=init, ablation=args.no_ghost_mask,
                          dump_iters=args.dump_iters, plots=args.plots)
    _emit(summary["rows"], ["run", "iteration", "E_I", "NAIE", "NACE", "relevant_views", "NVE",
                            "best"])
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    truth = _load_mesh(args.truth) if args.truth else None
    agg, _ = sweep_interface(cfg, args.out, truth, args.levels, args.seeds, args.iters,
                             args.workers, args.plots)
    _emit(agg)
    return EXIT_OK


def cmd_metrics(args) -> int:
    cfg = build_config(args)
    a = _load_mesh(args.mesh)
    b = _load_mesh(args.reference) if args.reference else None
    ds = load_dataset(args.dataset) if args.dataset else None
    summary, per_view = mesh_metrics(a, b, ds, cfg, args.nve_resolution)
    _emit([summary])
    if per_view:
        print()
        _emit(per_view)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sonar3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="Render a synthetic dataset.")
    s.add_argument("out", type=Path)
    s.add_argument("--truth", type=Path, help="Closed OBJ mesh; default bumpy sphere.")
    s.add_argument("--plots", action="store_true", help="Also write a PNG per view.")
    _add_config_args(s)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("carve", help="Space-carve an initial mesh.")
    s.add_argument("dataset", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--truth", type=Path)
    _add_config_args(s)
    s.set_defaults(func=cmd_carve)

    s = sub.add_parser("reconstruct", help="Carve, refine and report.")
    s.add_argument("dataset", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--truth", type=Path, help="Ground-truth OBJ; adds an NVE column.")
    s.add_argument("--init", type=Path, help="Start from this OBJ instead of carving.")
    s.add_argument("--no-ghost-mask", action="store_true",
                   help="Also refine without ghost masking and report both runs.")
    s.add_argument("--dump-iters", action="store_true", help="Write the mesh of every iteration.")
    s.add_argument("--plots", action="store_true", help="Render iterations.png.")
    _add_config_args(s)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("sweep-interface", help="NVE against interface fluctuation.")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--truth", type=Path)
    s.add_argument("--levels", type=float, nargs="+", default=list(SWEEP_LEVELS))
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--iters", type=int, default=5)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--plots", action="store_true")
    _add_config_args(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("metrics", help="Volume, NVE and per-view image errors of a mesh.")
    s.add_argument("mesh", type=Path)
    s.add_argument("--reference", type=Path, help="Mesh to compute NVE against.")
    s.add_argument("--dataset", type=Path, help="Dataset for per-view IE and CE.")
    s.add_argument("--nve-resolution", type=int, default=128)
    _add_config_args(s)
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except PIPELINE_ERRORS as exc:
        logger.error("pipeline failed: %s: %s", type(exc).__name__, exc)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
