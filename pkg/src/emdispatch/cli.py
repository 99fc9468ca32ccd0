"""Command-line pipeline: characterize, dispatch, evaluate, compare,
export-mps and report stages over a shared YAML config.

Every stage writes a ``manifest.json`` (config hash, seed, library
versions) into its output directory.  Wall-clock figures go to a separate
``timing.json`` so that reruns with the same config and seed produce
byte-identical result artifacts.
"""

import argparse
import hashlib
import json
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__, dispatch, evaluator, lpc, milp
from . import scenario as scn_mod
from .emcore import CellParams, OperatingLimits

CATEGORIES = ("ev", "bss", "es")
VARIANT_NAMES = {"m1": "m1", "m1*": "m1s", "m2": "m2", "m2*": "m2s",
                 "m1s": "m1s", "m2s": "m2s"}


def _load_config(path):
    if path is None:
        import copy
        return copy.deepcopy(scn_mod.DEFAULT_CONFIG)
    return scn_mod.load_config(path)


def _config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True, default=_jsonable)
        f.write("\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_manifest(out_dir, stage, cfg, seed) -> None:
    manifest = {
        "stage": stage,
        "config_sha256": _config_hash(cfg),
        "seed": seed,
        "threads": _thread_cap(),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "emdispatch": __version__,
        },
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _thread_cap() -> int:
    raw = os.environ.get("EVDL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _write_timing(out_dir, entries: dict) -> None:
    _write_json(os.path.join(out_dir, "timing.json"), entries)


def _cell_params(cfg, category):
    params = CellParams.by_type(cfg[category]["cell_type"])
    cycles = cfg[category].get("age_cycles", 0)
    return params.aged(cycles) if cycles else params


def _limits(cfg, category):
    return OperatingLimits.for_scheme(_cell_params(cfg, category),
                                      cfg[category]["scheme"])


def build_bundles(cfg, bundle_dir=None):
    """Load cached bundles from a characterize run, or fit them inline."""
    bundles = {}
    for cat in CATEGORIES:
        path = bundle_dir and os.path.join(bundle_dir, f"bundle_{cat}.json")
        if path and os.path.exists(path):
            bundles[cat] = lpc.LpcBundle.load(path)
        else:
            bundles[cat] = lpc.characterize(
                _cell_params(cfg, cat), cfg["theta_amb_c"], _limits(cfg, cat),
                dt_decision_s=cfg["delta_t_min"] * 60.0)
    return bundles


def _scenario(cfg):
    cells = {t: CellParams.by_type(t)
             for t in {cfg[c]["cell_type"] for c in CATEGORIES}}
    return scn_mod.build_scenario(cfg, cells), cells


# --------------------------------------------------------------------------
# stages

def cmd_characterize(args, cfg) -> int:
    t0 = time.time()
    lines = []
    for cat in CATEGORIES:
        bundle = lpc.characterize(
            _cell_params(cfg, cat), cfg["theta_amb_c"], _limits(cfg, cat),
            dt_decision_s=cfg["delta_t_min"] * 60.0)
        bundle.save(os.path.join(args.out, f"bundle_{cat}.json"))
        lines.append(f"[{cat}] " + lpc.fit_report(bundle))
    report = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "fit_report.txt"), "w") as f:
        f.write(report)
    print(report, end="")
    _write_timing(args.out, {"characterize_s": time.time() - t0})
    return 0


def cmd_dispatch(args, cfg) -> int:
    t0 = time.time()
    scenario, _ = _scenario(cfg)
    bundles = build_bundles(cfg, args.bundles)
    sol = dispatch.solve_dispatch(scenario, bundles, args.variant,
                                  gap=args.gap / 100.0,
                                  time_limit_s=args.time_limit)
    out = {"variant": sol.variant, "status": sol.status,
           "objective": sol.objective, "gap": sol.gap,
           "cost_breakdown": sol.cost_breakdown, "values": sol.values}
    _write_json(os.path.join(args.out, "solution.json"), out)
    if sol.status not in ("infeasible", "timeout"):
        sol.export_csv(os.path.join(args.out, "solution.csv"))
    _write_timing(args.out, {"dispatch_s": time.time() - t0,
                             "solve_s": sol.wall_time_s})
    print(f"{sol.variant}: {sol.status}  objective={sol.objective:.4f}  "
          f"gap={sol.gap:.4f}")
    return 0 if sol.status in ("optimal", "feasible") else 1


def cmd_evaluate(args, cfg) -> int:
    t0 = time.time()
    scenario, cells = _scenario(cfg)
    limits = {cat: _limits(cfg, cat) for cat in CATEGORIES}
    sol_path = args.solution or os.path.join(args.out, "solution.json")
    with open(sol_path) as f:
        payload = json.load(f)
    if payload["status"] in ("infeasible", "timeout"):
        print(f"cannot replay a {payload['status']} solution", file=sys.stderr)
        return 1

    class _Sol:
        values = payload["values"]

    report = evaluator.replay(_Sol(), scenario, cells, limits)
    summary = report.summary()
    summary["assets"] = {
        name: {"feasible": a.feasible, "eta_min": a.eta_min,
               "eta_ok_fraction": a.eta_ok_fraction,
               "violations": a.violations,
               "lithium_loss_mah": a.lithium_loss_mah,
               "heat_kj": a.heat_kj}
        for name, a in sorted(report.assets.items())}
    _write_json(os.path.join(args.out, "replay.json"), summary)
    _write_timing(args.out, {"evaluate_s": time.time() - t0})
    exhausted = sum(a.violations.get("concentration", 0)
                    for a in report.assets.values())
    print(f"replay: eta_min={summary['eta_min']:.4f}  "
          f"feasible={summary['feasible']}  concentration_hits={exhausted}")
    return 0 if exhausted == 0 else 1


def cmd_compare(args, cfg) -> int:
    return (_compare_timing if args.timing else _compare_models)(args, cfg)


def _compare_timing(args, cfg) -> int:
    scenario, _ = _scenario(cfg)
    bundles = build_bundles(cfg, args.bundles)
    rows, timing = [], {}
    for variant in dispatch.VARIANTS:
        sol = dispatch.solve_dispatch(scenario, bundles, variant,
                                      gap=args.gap / 100.0,
                                      time_limit_s=args.time_limit)
        rows.append({"variant": variant, "status": sol.status,
                     "objective": sol.objective, "gap": sol.gap})
        timing[variant] = sol.wall_time_s
    _write_json(os.path.join(args.out, "compare_variants.json"), rows)
    with open(os.path.join(args.out, "timing_variants.csv"), "w") as f:
        f.write("variant,wall_s\n")
        for variant in dispatch.VARIANTS:
            f.write(f"{variant},{timing[variant]:.3f}\n")
    _write_timing(args.out, timing)
    for r in rows:
        print(f"{r['variant']:4s} {r['status']:10s} "
              f"obj={r['objective']:.4f} wall={timing[r['variant']]:.2f}s")
    return 0


def _compare_models(args, cfg) -> int:
    t0 = time.time()
    scenario, cells = _scenario(cfg)
    limits = {cat: _limits(cfg, cat) for cat in CATEGORIES}
    kinds = [args.model.lower()] if args.model else ["em", "ecm", "ssm"]
    em_bundles = build_bundles(cfg, args.bundles) if "em" in kinds else None
    rows = []
    for kind in kinds:
        sol, _ = evaluator.dispatch_with_model(
            scenario, kind, cells, limits, gap=args.gap / 100.0,
            time_limit_s=args.time_limit, em_bundles=em_bundles)
        row = {"model": kind, "status": sol.status}
        if sol.status not in ("infeasible", "timeout"):
            report = evaluator.replay(sol, scenario, cells, limits)
            row.update(report.summary())
        rows.append(row)
    _write_json(os.path.join(args.out, "compare_models.json"), rows)
    _write_timing(args.out, {"compare_models_s": time.time() - t0})
    for r in rows:
        eta = r.get("eta_min")
        print(f"{r['model']:4s} {r['status']:10s} "
              + (f"eta_min={eta:.4f} loss={r['lithium_loss_mah']:.2f}mAh"
                 if eta is not None else ""))
    return 0


def cmd_export_mps(args, cfg) -> int:
    t0 = time.time()
    scenario, _ = _scenario(cfg)
    bundles = build_bundles(cfg, args.bundles)
    model, _ = dispatch.build_model(scenario, bundles, args.variant)
    path = os.path.join(args.out, f"dispatch_{args.variant}.mps")
    milp.export_mps(model, path)
    _write_timing(args.out, {"export_mps_s": time.time() - t0})
    print(f"wrote {path} ({len(model.variables)} columns, "
          f"{len(model.constraints)} rows)")
    return 0


def cmd_report(args, cfg) -> int:
    lines = [f"run report: {args.out}"]
    for name in ("manifest.json", "solution.json", "replay.json",
                 "compare_variants.json", "compare_models.json"):
        path = os.path.join(args.out, name)
        if not os.path.exists(path):
            continue
        with open(path) as f:
            data = json.load(f)
        if name == "solution.json":
            lines.append(f"  dispatch {data['variant']}: {data['status']}, "
                         f"objective {data['objective']:.4f}")
            for k, v in sorted(data.get("cost_breakdown", {}).items()):
                if isinstance(v, float):
                    lines.append(f"    {k} = {v:.4f}")
        elif name == "replay.json":
            lines.append(f"  replay: eta_min {data['eta_min']:.4f}, "
                         f"feasible {data['feasible']}, "
                         f"lithium loss {data['lithium_loss_mah']:.2f} mAh")
        elif name == "manifest.json":
            lines.append(f"  stage {data['stage']}, seed {data['seed']}, "
                         f"config {data['config_sha256'][:12]}")
        else:
            lines.append(f"  {name}: {len(data)} rows")
    report = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "report.txt"), "w") as f:
        f.write(report)
    print(report, end="")
    return 0


# --------------------------------------------------------------------------
# argument plumbing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emdispatch",
        description="battery-aware local-energy-system dispatch pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--config", default=None, help="YAML config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config RNG seed")
        p.add_argument("--out", default=".", help="output directory")
        p.set_defaults(fn=fn)
        return p

    def solver_flags(p, variant=True):
        if variant:
            p.add_argument("--variant", default="m2",
                           type=lambda s: s.lower(),
                           choices=sorted(set(VARIANT_NAMES)),
                           help="dispatch formulation")
        p.add_argument("--gap", type=float, default=5.0,
                       help="MIP gap in percent")
        p.add_argument("--time-limit", type=float, default=600.0,
                       help="solver time limit in seconds")
        p.add_argument("--bundles", default=None,
                       help="directory with characterize output to reuse")

    stage("characterize", cmd_characterize,
          help="fit surrogate planes for every asset category")
    solver_flags(stage("dispatch", cmd_dispatch, help="solve a dispatch model"))
    p = stage("evaluate", cmd_evaluate,
              help="replay a solved plan through the cell simulator")
    p.add_argument("--solution", default=None,
                   help="solution.json path (default: <out>/solution.json)")
    p = stage("compare", cmd_compare,
              help="variant timing table or battery-model comparison")
    solver_flags(p, variant=False)
    p.add_argument("--timing", action="store_true",
                   help="compare formulation variants instead of models")
    p.add_argument("--model", default=None, choices=["em", "ecm", "ssm"],
                   help="restrict the model comparison to one abstraction")
    solver_flags(stage("export-mps", cmd_export_mps,
                       help="write the model in MPS format"))
    stage("report", cmd_report, help="summarize artifacts in an output dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "variant", None):
        args.variant = VARIANT_NAMES[args.variant]
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    scn_mod.validate_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, args.command, cfg, cfg["seed"])
    return args.fn(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
