"""Scenario orchestration: config -> topology -> CARP -> simulation -> checks.

Everything here is deterministic given the config; seeds for each stage are
derived from the config's master seed and written to the manifest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .assignment import (
    Assignment,
    CarpResult,
    CostKind,
    GibbsConfig,
    RouteContext,
    TransporterProfile,
    exhaustive_optimum,
    finalize,
    run_carp,
)
from .config import ScenarioConfig
from .energy import PropulsionParams, RadioParams, calibrate_noise_psd
from .fedsim import Mode, SimScenario, SimTrace, TransporterPlan, plan_from_tour, run
from .learning import LogisticTask, PartitionSpec, QuadraticTask, make_dataset, partition_data
from .routing import TourCache
from .topology import Topology, generate_block_layout, load_topology
from .verify import (
    TaskConstants,
    bound_learning_rate,
    check_sync_gap,
    check_virtual_gap,
    evaluate_bounds,
    verify_trace,
)

# ---------------------------------------------------------------- building blocks


def build_topology_from(cfg: ScenarioConfig) -> Topology:
    t = cfg.topology
    if t.file:
        return load_topology(t.file)
    return generate_block_layout(t.area_w, t.area_h, t.blocks, t.clients_per_block, seed=t.seed)


def build_radio(cfg: ScenarioConfig) -> RadioParams:
    r = cfg.radio
    n0 = r.noise_psd if r.noise_psd is not None else calibrate_noise_psd(r.power, r.bandwidth, r.beta0, r.altitude, r.rate)
    return RadioParams(r.power, r.bandwidth, n0, r.beta0, r.altitude, r.model_size)


def build_profiles(cfg: ScenarioConfig) -> list[TransporterProfile]:
    return [
        TransporterProfile(PropulsionParams.calibrated(t.speed, t.slf_power, t.parasitic_share, t.hover_power), t.budget)
        for t in cfg.transporters
    ]


def route_context(cfg: ScenarioConfig, topology: Topology | None = None, cache: TourCache | None = None) -> RouteContext:
    topology = topology if topology is not None else build_topology_from(cfg)
    if cache is None:
        cache = TourCache(topology, cfg.carp.tsp, cfg.carp.restarts, seed=cfg.topology.seed)
    return RouteContext(topology, build_radio(cfg), build_profiles(cfg), cfg.slot, cache)


def cost_for(mode: Mode | str, cost: str) -> CostKind:
    if cost == "auto":
        return CostKind.MIN_MAX if Mode(mode) is Mode.SYNC else CostKind.SWS
    return CostKind(cost)


def plan(cfg: ScenarioConfig, cost: CostKind | str, ctx: RouteContext | None = None) -> CarpResult:
    ctx = ctx if ctx is not None else route_context(cfg)
    gibbs = GibbsConfig(cfg.carp.iterations, cfg.carp.q0, cfg.carp.q_final, seed=cfg.seed)
    return run_carp(ctx, cost, gibbs)


def build_task(cfg: ScenarioConfig, topology: Topology):
    t = cfg.task
    n = topology.n_clients
    data = make_dataset(t.samples, t.dim, t.classes, seed=t.seed)
    spec = PartitionSpec(t.partition, t.alpha, t.p_main, seed=t.seed)
    shards = partition_data(data, spec, n, topology)
    if t.kind == "quadratic":
        return QuadraticTask.from_shards(data, shards, sigma=t.sigma, clip=t.clip, sv_range=(t.sv_low, t.sv_high), seed=t.seed)
    return LogisticTask.from_shards(data, shards, reg=t.reg, batch=t.batch, clip=t.clip)


def task_constants(cfg: ScenarioConfig, task) -> TaskConstants:
    return TaskConstants(task.L, cfg.task.clip, task.sigma, task.f_star)


def learning_rate(cfg: ScenarioConfig, task) -> float:
    if cfg.sim.eta is not None:
        return cfg.sim.eta
    return bound_learning_rate(task.n_clients, cfg.sim.horizon, task.L)


def replication_seeds(cfg: ScenarioConfig) -> list[int]:
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.replications)
    return [int(c.generate_state(1)[0]) for c in children]


def scenario_from(carp: CarpResult, task, cfg: ScenarioConfig, mode: Mode | str, seed: int = 0) -> SimScenario:
    plans, tours, energy = [], [], []
    for tour, rep in zip(carp.tours, carp.energy):
        if tour is None:
            continue  # an empty transporter never leaves the server
        plans.append(plan_from_tour(tour))
        tours.append(tour)
        energy.append(rep)
    return SimScenario(plans, task, learning_rate(cfg, task), cfg.sim.horizon, seed, Mode(mode), tours, energy)


def simulate_replications(base: SimScenario, seeds: Sequence[int], workers: int | None = None) -> list[SimTrace]:
    """One trace per seed; replications run concurrently, results in seed order."""
    jobs = [SimScenario(base.plans, base.task, base.eta, base.horizon, s, base.mode, base.tours, base.energy) for s in seeds]
    if workers == 1 or len(jobs) == 1:
        return [run(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, jobs))


# ---------------------------------------------------------------- exports


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def write_trace_csv(path: Path, trace: SimTrace) -> None:
    K = trace.phases.shape[1]
    header = ["slot", "loss", "grad_sq", "gap_sq", *(f"phase_{k}" for k in range(K))]
    rows = (
        [t, trace.loss[t], trace.grad_sq[t], trace.gap_sq[t], *(int(p) for p in trace.phases[t])]
        for t in range(trace.horizon)
    )
    _write_csv(path, header, rows)


def save_trace_npz(path: Path, trace: SimTrace) -> None:
    meta = np.array([(s, k, c, lo, hi) for s, k, c, lo, hi, _ in trace.deliveries], dtype=np.int64).reshape(-1, 5)
    clus = np.array([d[5] for d in trace.deliveries]).reshape(len(trace.deliveries), trace.x.shape[1])
    np.savez_compressed(
        path, mode=trace.mode.value, x=trace.x, phi=trace.phi, loss=trace.loss, grad_sq=trace.grad_sq,
        gap_sq=trace.gap_sq, phases=trace.phases, grads=trace.grads, grad_slot=trace.grad_slot,
        delivery_meta=meta, delivery_clu=clus, updates=np.array(trace.updates, dtype=np.int64),
        round_lengths=np.array(trace.round_lengths), counts=np.array(trace.counts), eta=trace.eta,
        seed=trace.seed, clip_events=trace.clip_events,
    )


def load_trace_npz(path: Path) -> SimTrace:
    z = np.load(path)
    meta, clus = z["delivery_meta"], z["delivery_clu"]
    deliveries = [(*map(int, m), clus[j]) for j, m in enumerate(meta)]
    return SimTrace(
        Mode(str(z["mode"])), z["x"], z["phi"], z["loss"], z["grad_sq"], z["gap_sq"], z["phases"], z["grads"],
        z["grad_slot"], deliveries, z["updates"].tolist(), z["round_lengths"].tolist(), z["counts"].tolist(),
        float(z["eta"]), int(z["seed"]), int(z["clip_events"]),
    )


def energy_rows(trace: SimTrace, carp: CarpResult):
    """One ledger row per transporter round; the battery is swapped on every return."""
    live = [k for k, t in enumerate(carp.tours) if t is not None]
    for j, k in enumerate(live):
        rep = carp.energy[k]
        period = trace.round_lengths[j]
        for r, t0 in enumerate(range(0, trace.horizon, period)):
            done = t0 + period < trace.horizon
            yield [k, r, t0, t0 + period, int(done), rep.e_trans, rep.e_slf, rep.e_hover, rep.e_prop,
                   rep.e_total, rep.budget, int(rep.feasible)]


ENERGY_HEADER = ["transporter", "round", "depart_slot", "return_slot", "completed", "e_trans", "e_slf",
                 "e_hover", "e_prop", "e_total", "budget", "feasible"]


def assignment_dict(carp: CarpResult) -> dict:
    return {
        "cost_kind": carp.cost_kind.value,
        "cost": carp.cost,
        "labels": list(carp.assignment.labels),
        "n_transporters": carp.assignment.n_transporters,
        "counts": carp.counts(),
        "deltas": carp.deltas(),
        "tours": [t.as_dict() if t is not None else None for t in carp.tours],
        "energy": [e.as_dict() for e in carp.energy],
    }


def carp_from_dict(d: dict, ctx: RouteContext) -> CarpResult:
    """Rebuild a CarpResult from ``assignment_dict`` output, re-pricing the stored tours."""
    from .routing import assemble_tour

    a = Assignment(tuple(d["labels"]), d["n_transporters"])
    res = finalize(a, CostKind(d["cost_kind"]), ctx)
    tours = []
    for k, t in enumerate(d["tours"]):
        if t is None:
            tours.append(None)
        else:
            tours.append(assemble_tour(ctx.topology, ctx.radio, ctx.profiles[k].prop, t["order"], ctx.slot_duration))
    res.tours = tours
    return res


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_json(path: Path, obj) -> None:
    # inf budgets are written as the string "inf" to stay valid JSON
    path.write_text(json.dumps(_finite(obj), indent=2, default=_json_default) + "\n")


def _finite(o):
    if isinstance(o, float) and not math.isfinite(o):
        return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    return o


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- end to end


@dataclass
class ModeOutcome:
    mode: Mode
    carp: CarpResult
    scenario: SimScenario
    traces: list[SimTrace]
    reports: list
    gaps: list
    bounds: object

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)


def run_mode(cfg: ScenarioConfig, mode: Mode, topology: Topology, task, carp: CarpResult | None = None,
             cache: TourCache | None = None, workers: int | None = None) -> ModeOutcome:
    ctx = route_context(cfg, topology, cache)
    if carp is None:
        carp = plan(cfg, cost_for(mode, cfg.carp.cost), ctx)
    base = scenario_from(carp, task, cfg, mode)
    seeds = replication_seeds(cfg)
    traces = simulate_replications(base, seeds, workers)
    reports = [verify_trace(tr, base, aligned=cfg.sim.aligned_check) for tr in traces]
    G = cfg.task.clip
    gaps = []
    for tr in traces:
        checks = [check_virtual_gap(tr, G)]
        if mode is Mode.SYNC:
            checks.insert(0, check_sync_gap(tr, G))
        gaps.append(checks)
    consts = task_constants(cfg, task)
    bounds = evaluate_bounds(traces, consts) if cfg.task.kind == "quadratic" else None
    return ModeOutcome(mode, carp, base, traces, reports, gaps, bounds)


def oracle_flag(cfg: ScenarioConfig, carp: CarpResult, ctx: RouteContext) -> dict | None:
    """Exhaustive comparison for instances small enough to enumerate."""
    n, K = ctx.topology.n_clients, ctx.n_transporters
    if K**n > 5000:
        return None
    best, best_cost = exhaustive_optimum(ctx, carp.cost_kind)
    return {"exhaustive_cost": best_cost, "carp_cost": carp.cost, "matches": carp.cost == best_cost}


def write_plan_artifacts(out: Path, carp: CarpResult, oracle: dict | None = None) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    d = assignment_dict(carp)
    if oracle is not None:
        d["oracle"] = oracle
    write_json(out / "assignment.json", d)
    _write_csv(out / "carp_trace.csv", ["iteration", "cost", "best_cost"], carp.trace)
    tour_rows = []
    for k, t in enumerate(carp.tours):
        if t is None:
            continue
        for j, (c, st) in enumerate(zip(t.order, t.stop_times)):
            tour_rows.append([k, j, c, st])
    _write_csv(out / "tours.csv", ["transporter", "stop", "client", "exchange_done_s"], tour_rows)
    return [out / "assignment.json", out / "carp_trace.csv", out / "tours.csv"]


def write_mode_artifacts(out: Path, outcome: ModeOutcome) -> list[Path]:
    files = write_plan_artifacts(out, outcome.carp)
    rows = []
    for r, tr in enumerate(outcome.traces):
        p = out / f"trace_rep{r}.csv"
        write_trace_csv(p, tr)
        save_trace_npz(out / f"trace_rep{r}.npz", tr)
        files += [p, out / f"trace_rep{r}.npz"]
        for row in energy_rows(tr, outcome.carp):
            rows.append([r, *row])
    _write_csv(out / "energy_ledger.csv", ["replication", *ENERGY_HEADER], rows)
    files.append(out / "energy_ledger.csv")
    verification = {
        "mode": outcome.mode.value,
        "passed": outcome.passed,
        "replications": [
            {**rep.as_dict(), "gap_checks": [c.as_dict() for c in lem]}
            for rep, lem in zip(outcome.reports, outcome.gaps)
        ],
    }
    write_json(out / "verification.json", verification)
    (out / "verification.txt").write_text("\n".join(rep.to_text() for rep in outcome.reports) + "\n")
    files += [out / "verification.json", out / "verification.txt"]
    if outcome.bounds is not None:
        write_json(out / "bounds.json", outcome.bounds.as_dict())
        files.append(out / "bounds.json")
    return files


def manifest(cfg: ScenarioConfig, root: Path, files: Sequence[Path], extra: dict | None = None) -> dict:
    return {
        "package": "fedex-sim",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config_name": cfg.name,
        "config_text": cfg.source_text,
        "resolved": cfg.to_dict(),
        "seeds": {
            "master": cfg.seed,
            "topology": cfg.topology.seed,
            "task": cfg.task.seed,
            "carp": cfg.seed,
            "replications": replication_seeds(cfg),
        },
        "files": {str(p.relative_to(root)): sha256(p) for p in sorted(files) if p.suffix != ".npz"},
        **(extra or {}),
    }


def run_scenario(cfg: ScenarioConfig, out: Path, workers: int | None = None) -> dict:
    """End-to-end run; returns a summary and writes every artifact under ``out``."""
    from .topology import save_topology

    out.mkdir(parents=True, exist_ok=True)
    topology = build_topology_from(cfg)
    save_topology(topology, out / "topology.csv")
    files = [out / "topology.csv"]
    task = build_task(cfg, topology)
    cache = TourCache(topology, cfg.carp.tsp, cfg.carp.restarts, seed=cfg.topology.seed)
    summary = {"name": cfg.name, "modes": {}}
    for m in cfg.sim.modes:
        mode = Mode(m)
        outcome = run_mode(cfg, mode, topology, task, cache=cache, workers=workers)
        files += write_mode_artifacts(out / mode.value, outcome)
        summary["modes"][mode.value] = {
            "cost_kind": outcome.carp.cost_kind.value,
            "cost": outcome.carp.cost,
            "deltas": outcome.carp.deltas(),
            "verification_passed": outcome.passed,
            "bound_holds": None if outcome.bounds is None else outcome.bounds.holds,
        }
    write_json(out / "manifest.json", manifest(cfg, out, files, {"summary": summary}))
    return summary


# ---------------------------------------------------------------- route comparison


def slots_to_target(trace: SimTrace, f_star: float, frac: float = 0.05) -> int:
    """First slot whose loss gap is within ``frac`` of the initial gap; -1 if never."""
    gap0 = trace.loss[0] - f_star
    hit = np.flatnonzero(trace.loss - f_star <= frac * gap0)
    return int(hit[0]) if hit.size else -1


def compare_routes(cfg: ScenarioConfig, costs: Sequence[str], mode: Mode | str, workers: int | None = None) -> list[dict]:
    mode = Mode(mode)
    topology = build_topology_from(cfg)
    task = build_task(cfg, topology)
    cache = TourCache(topology, cfg.carp.tsp, cfg.carp.restarts, seed=cfg.topology.seed)
    ctx = route_context(cfg, topology, cache)
    seeds = replication_seeds(cfg)
    rows = []
    for c in costs:
        carp = plan(cfg, CostKind(c), ctx)
        counts, deltas = carp.counts(), carp.deltas()
        traces = simulate_replications(scenario_from(carp, task, cfg, mode), seeds, workers)
        hits = [slots_to_target(tr, task.f_star) for tr in traces]
        rows.append({
            "cost": c,
            "objective": carp.cost,
            "max_delta": max(deltas),
            "sws": sum(r * d * d for r, d in zip(counts, deltas)),
            "total_delta": sum(deltas),
            "slots_to_target": float(np.mean(hits)) if all(h >= 0 for h in hits) else -1.0,
            "final_loss": float(np.mean([tr.loss[-1] for tr in traces])),
            "max_energy": max(e.e_total for e in carp.energy),
        })
    return rows


COMPARE_HEADER = ["cost", "objective", "max_delta", "sws", "total_delta", "slots_to_target", "final_loss", "max_energy"]


def format_table(rows: list[dict], header: Sequence[str] = COMPARE_HEADER) -> str:
    cells = [[_cell(r[h]) for h in header] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
