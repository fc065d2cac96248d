"""Command-line entry point.

    fedex-sim plan CONFIG            CARP only: assignment, tours, cost trace
    fedex-sim simulate CONFIG -a A   simulate a saved assignment
    fedex-sim run CONFIG             plan, simulate, verify, evaluate bounds
    fedex-sim verify RUN_DIR         re-check the traces of a finished run
    fedex-sim compare-routes CONFIG  CARP + simulation for several route costs

CONFIG is a YAML file, the name of a bundled config (``paper_default``,
``tiny``) or a ``manifest.json`` from an earlier run. Artifacts go under
``$FEDEX_SIM_ARTIFACTS`` (default ``./artifacts``) unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .assignment import InfeasibleError
from .config import ConfigError, ScenarioConfig, parse_config, resolve_config
from .fedsim import Mode

ARTIFACT_ENV = "FEDEX_SIM_ARTIFACTS"

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3

log = logging.getLogger("fedex_sim")


def load_any(ref: str) -> ScenarioConfig:
    p = Path(ref)
    if p.suffix == ".json" and p.exists():
        m = json.loads(p.read_text())
        cfg = parse_config(m["config_text"], str(p))
        return cfg.with_seed(m["seeds"]["master"])
    return resolve_config(ref)


def _out_dir(args, cfg: ScenarioConfig, verb: str) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(ARTIFACT_ENV, "artifacts"))
    return root / f"{cfg.name}-seed{cfg.seed}" / verb


def _config(args) -> ScenarioConfig:
    cfg = load_any(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_plan(args) -> int:
    cfg = _config(args)
    ctx = pipeline.route_context(cfg)
    cost = pipeline.cost_for(args.mode, args.cost or cfg.carp.cost)
    carp = pipeline.plan(cfg, cost, ctx)
    oracle = pipeline.oracle_flag(cfg, carp, ctx)
    out = _out_dir(args, cfg, "plan")
    files = pipeline.write_plan_artifacts(out, carp, oracle)
    pipeline.write_json(out / "manifest.json", pipeline.manifest(cfg, out, files, {"verb": "plan", "mode": args.mode}))
    print(f"{cost.value}: cost={carp.cost:g} deltas={carp.deltas()} counts={carp.counts()}")
    for rep in carp.energy:
        print(f"  energy {rep.e_total:.1f} J of {rep.budget:g} J")
    if oracle is not None:
        print(f"  exhaustive optimum {oracle['exhaustive_cost']:g}: {'match' if oracle['matches'] else 'MISMATCH'}")
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    topology = pipeline.build_topology_from(cfg)
    ctx = pipeline.route_context(cfg, topology)
    carp = pipeline.carp_from_dict(json.loads(Path(args.assignment).read_text()), ctx)
    task = pipeline.build_task(cfg, topology)
    out = _out_dir(args, cfg, "simulate")
    outcome = pipeline.run_mode(cfg, Mode(args.mode), topology, task, carp=carp, workers=args.workers)
    files = pipeline.write_mode_artifacts(out, outcome)
    pipeline.write_json(out / "manifest.json", pipeline.manifest(cfg, out, files, {"verb": "simulate", "mode": args.mode}))
    _print_outcome(outcome)
    print(f"artifacts: {out}")
    return EXIT_OK if outcome.passed else EXIT_FAILED


def _print_outcome(outcome) -> None:
    print(f"[{outcome.mode.value}] cost={outcome.carp.cost:g} deltas={outcome.carp.deltas()}")
    for rep in outcome.reports:
        print("  " + rep.to_text().replace("\n", "\n  "))
    if outcome.bounds is not None:
        b = outcome.bounds
        print(f"  bound: lhs={b.lhs:.6g} rhs={b.rhs:.6g} margin={b.margin:.6g}")


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "run")
    summary = pipeline.run_scenario(cfg, out, workers=args.workers)
    ok = True
    for mode, s in summary["modes"].items():
        ok &= s["verification_passed"]
        print(f"[{mode}] {s['cost_kind']}={s['cost']:g} deltas={s['deltas']} "
              f"verification={'PASS' if s['verification_passed'] else 'FAIL'} bound_holds={s['bound_holds']}")
    print(f"artifacts: {out}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_verify(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = load_any(str(run_dir / "manifest.json"))
    topology = pipeline.build_topology_from(cfg)
    task = pipeline.build_task(cfg, topology)
    ctx = pipeline.route_context(cfg, topology)
    ok = True
    for mode_dir in sorted(p for p in run_dir.iterdir() if p.is_dir() and (p / "assignment.json").exists()):
        carp = pipeline.carp_from_dict(json.loads((mode_dir / "assignment.json").read_text()), ctx)
        for npz in sorted(mode_dir.glob("trace_rep*.npz")):
            trace = pipeline.load_trace_npz(npz)
            scenario = pipeline.scenario_from(carp, task, cfg, trace.mode, trace.seed)
            rep = pipeline.verify_trace(trace, scenario, aligned=not args.skip_aligned)
            ok &= rep.passed
            print(f"{npz.relative_to(run_dir)}: " + rep.to_text())
    return EXIT_OK if ok else EXIT_FAILED


def cmd_compare(args) -> int:
    cfg = _config(args)
    costs = [c.strip() for c in args.costs.split(",") if c.strip()]
    rows = pipeline.compare_routes(cfg, costs, args.mode, workers=args.workers)
    out = _out_dir(args, cfg, f"compare-{args.mode}")
    out.mkdir(parents=True, exist_ok=True)
    pipeline._write_csv(out / "compare.csv", pipeline.COMPARE_HEADER, ([r[h] for h in pipeline.COMPARE_HEADER] for r in rows))
    print(pipeline.format_table(rows))
    print(f"artifacts: {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedex-sim", description="Federated learning over mobile transporters.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, mode=True):
        sp.add_argument("config", help="YAML file, bundled config name, or manifest.json")
        sp.add_argument("--seed", type=int, help="override the config's master seed")
        sp.add_argument("--out", help="artifact directory")
        if mode:
            sp.add_argument("--mode", choices=[m.value for m in Mode], default="async")

    sp = sub.add_parser("plan", help="run CARP only")
    common(sp)
    sp.add_argument("--cost", choices=["auto", "min_max", "sws", "shortest_total"])
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="simulate a saved assignment")
    common(sp)
    sp.add_argument("-a", "--assignment", required=True, help="assignment.json from 'plan'")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="plan, simulate, verify and evaluate bounds")
    common(sp, mode=False)
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("verify", help="re-check the traces of a finished run")
    sp.add_argument("run_dir")
    sp.add_argument("--skip-aligned", action="store_true", help="skip the aligned-view re-simulation")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("compare-routes", help="compare route costs side by side")
    common(sp)
    sp.add_argument("--costs", default="min_max,sws,shortest_total")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        for d in e.diagnostics:
            print(f"  transporter {d['transporter']}: e_total={d['e_total']:.1f} J budget={d['budget']:g} J "
                  f"(trans {d['e_trans']:.1f}, slf {d['e_slf']:.1f}, hover {d['e_hover']:.1f}) "
                  f"clients={d['clients']}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
