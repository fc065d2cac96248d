"""Client assignment and route planning (CARP).

The outer loop is Gibbs sampling over client-to-transporter labels; the inner
loop routes each transporter's client set with a TSP solver. A client may only
move to transporters whose tour with that client stays within the energy
budget.

The sampling weight of transporter k for client i is exp(-C(k, a_-i) / q):
the temperature divides the cost, not the assignment. Transporters are
0-based here; clients keep their device ids 1..N.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .energy import EnergyReport, PropulsionParams, RadioParams, tour_energy_report, transmission_time
from .routing import Tour, TourCache, assemble_tour
from .topology import Topology


class CostKind(str, enum.Enum):
    MIN_MAX = "min_max"
    SWS = "sws"
    SHORTEST_TOTAL = "shortest_total"


class InfeasibleError(RuntimeError):
    """No energy-feasible assignment could be constructed."""

    def __init__(self, message: str, diagnostics: list[dict]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TransporterProfile:
    prop: PropulsionParams
    budget: float = math.inf  # J per tour


@dataclass(frozen=True)
class Assignment:
    labels: tuple[int, ...]  # labels[i - 1] = transporter of client i
    n_transporters: int

    def __post_init__(self):
        if any(not 0 <= k < self.n_transporters for k in self.labels):
            raise ValueError(f"labels must lie in 0..{self.n_transporters - 1}")

    @property
    def n_clients(self) -> int:
        return len(self.labels)

    def subsets(self) -> list[frozenset[int]]:
        groups: list[set[int]] = [set() for _ in range(self.n_transporters)]
        for i, k in enumerate(self.labels, start=1):
            groups[k].add(i)
        return [frozenset(g) for g in groups]

    def counts(self) -> list[int]:
        return [len(s) for s in self.subsets()]

    def with_label(self, client: int, k: int) -> "Assignment":
        labels = list(self.labels)
        labels[client - 1] = k
        return Assignment(tuple(labels), self.n_transporters)


def cost_from_deltas(kind: CostKind | str, deltas: Sequence[float], counts: Sequence[int]) -> float:
    """Route cost from per-transporter RTTs; empty transporters contribute 0."""
    kind = CostKind(kind)
    live = [(dk, rk) for dk, rk in zip(deltas, counts) if rk > 0]
    if kind is CostKind.MIN_MAX:
        return float(max((dk for dk, _ in live), default=0))
    if kind is CostKind.SWS:
        return float(sum(rk * dk * dk for dk, rk in live))
    return float(sum(dk for dk, _ in live))


class RouteContext:
    """Everything CARP needs to price a client set for a transporter."""

    def __init__(
        self,
        topology: Topology,
        radio: RadioParams,
        profiles: Sequence[TransporterProfile],
        slot_duration: float,
        cache: TourCache | None = None,
    ):
        if not profiles:
            raise ValueError("need at least one transporter")
        self.topology = topology
        self.radio = radio
        self.profiles = list(profiles)
        self.slot_duration = slot_duration
        self.cache = cache if cache is not None else TourCache(topology)
        self.t_trans = transmission_time(radio)
        self._priced: dict[tuple[int, frozenset], tuple[int, float, bool]] = {}

    @property
    def n_transporters(self) -> int:
        return len(self.profiles)

    def price(self, k: int, clients: frozenset[int]) -> tuple[int, float, bool]:
        """(RTT slots, total energy J, within budget) for transporter k."""
        key = (k, clients)
        hit = self._priced.get(key)
        if hit is not None:
            return hit
        if not clients:
            value = (0, 0.0, True)
        else:
            _, length = self.cache.route(clients)
            prop = self.profiles[k].prop
            rtt = len(clients) * self.t_trans + length / prop.V
            slots = max(1, math.ceil(rtt / self.slot_duration))
            rep = tour_energy_report(self.radio, prop, length, len(clients), self.profiles[k].budget)
            value = (slots, rep.e_total, rep.feasible)
        self._priced[key] = value
        return value

    def delta_seconds(self, k: int, clients: frozenset[int]) -> float:
        if not clients:
            return 0.0
        _, length = self.cache.route(clients)
        return len(clients) * self.t_trans + length / self.profiles[k].prop.V

    def tour(self, k: int, clients: frozenset[int]) -> Tour:
        order, _ = self.cache.route(clients)
        return assemble_tour(self.topology, self.radio, self.profiles[k].prop, order, self.slot_duration)

    def energy_report(self, k: int, clients: frozenset[int]) -> EnergyReport:
        _, length = self.cache.route(clients) if clients else ((), 0.0)
        prof = self.profiles[k]
        return tour_energy_report(self.radio, prof.prop, length, len(clients), prof.budget)


def evaluate_cost(assignment: Assignment, cost: CostKind | str, ctx: RouteContext) -> float:
    subsets = assignment.subsets()
    deltas = [ctx.price(k, s)[0] for k, s in enumerate(subsets)]
    return cost_from_deltas(cost, deltas, [len(s) for s in subsets])


def is_feasible(assignment: Assignment, ctx: RouteContext) -> bool:
    return all(ctx.price(k, s)[2] for k, s in enumerate(assignment.subsets()))


def feasible_transporters(client: int, assignment: Assignment, ctx: RouteContext) -> list[int]:
    out = []
    for k, s in enumerate(assignment.subsets()):
        if ctx.price(k, s | {client})[2]:
            out.append(k)
    return out


def gibbs_distribution(costs: Sequence[float], q: float) -> np.ndarray:
    """Softmax of -cost/q, shifted by the minimum cost for stability."""
    if q <= 0:
        raise ValueError("temperature must be positive")
    c = np.asarray(costs, dtype=float)
    w = np.exp(-(c - c.min()) / q)
    return w / w.sum()


def candidate_costs(
    client: int, assignment: Assignment, cost: CostKind | str, ctx: RouteContext, candidates: Sequence[int]
) -> list[float]:
    """C(k, a_-i) for every candidate transporter k."""
    base = [s - {client} for s in assignment.subsets()]
    base_deltas = [ctx.price(k, s)[0] for k, s in enumerate(base)]
    base_counts = [len(s) for s in base]
    out = []
    for k in candidates:
        deltas = list(base_deltas)
        counts = list(base_counts)
        deltas[k] = ctx.price(k, base[k] | {client})[0]
        counts[k] += 1
        out.append(cost_from_deltas(cost, deltas, counts))
    return out


def gibbs_step(
    client: int,
    assignment: Assignment,
    cost: CostKind | str,
    q: float,
    rng: np.random.Generator,
    ctx: RouteContext,
) -> Assignment:
    feasible = feasible_transporters(client, assignment, ctx)
    if not feasible:
        # the current transporter was feasible when the client joined it
        return assignment
    probs = gibbs_distribution(candidate_costs(client, assignment, cost, ctx, feasible), q)
    k = feasible[int(rng.choice(len(feasible), p=probs))]
    return assignment.with_label(client, k)


@dataclass
class GibbsConfig:
    iterations: int = 1200
    q0: float = 1.0
    q_final: float = 1e-2
    seed: int = 0
    schedule: Callable[[int], float] | None = None  # overrides q0/q_final
    order: Sequence[int] | None = None  # client visiting order; default 1..N

    def temperature(self, l: int) -> float:
        if self.schedule is not None:
            return self.schedule(l)
        decay = (self.q0 / self.q_final - 1.0) / max(1, self.iterations)
        return self.q0 / (1.0 + l * decay)


@dataclass
class CarpResult:
    assignment: Assignment
    cost: float
    cost_kind: CostKind
    tours: list[Tour | None]
    energy: list[EnergyReport]
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    initial: Assignment | None = None

    def deltas(self) -> list[int]:
        return [t.rtt_slots if t is not None else 0 for t in self.tours]

    def counts(self) -> list[int]:
        return self.assignment.counts()


def _energy_diagnostics(ctx: RouteContext, assignment_sets: Sequence[frozenset]) -> list[dict]:
    out = []
    for k, s in enumerate(assignment_sets):
        rep = ctx.energy_report(k, frozenset(s))
        out.append({"transporter": k, "clients": sorted(s), **rep.as_dict()})
    return out


def greedy_initial(ctx: RouteContext, rng: np.random.Generator) -> Assignment:
    """Each client, in random order, joins the feasible transporter whose tour grows least."""
    n = ctx.topology.n_clients
    K = ctx.n_transporters
    sets: list[frozenset[int]] = [frozenset() for _ in range(K)]
    for client in (int(c) + 1 for c in rng.permutation(n)):
        best, best_growth = None, math.inf
        for k in range(K):
            if not ctx.price(k, sets[k] | {client})[2]:
                continue
            growth = ctx.delta_seconds(k, sets[k] | {client}) - ctx.delta_seconds(k, sets[k])
            if growth < best_growth:
                best, best_growth = k, growth
        if best is None:
            diag = _energy_diagnostics(ctx, [s | {client} for s in sets])
            raise InfeasibleError(
                f"client {client} fits no transporter's energy budget during initial assignment", diag
            )
        sets[best] = sets[best] | {client}
    labels = [0] * n
    for k, s in enumerate(sets):
        for c in s:
            labels[c - 1] = k
    return Assignment(tuple(labels), K)


def sweep_initial(ctx: RouteContext, n_rotations: int = 72) -> Assignment:
    """Split clients into K equal-count angular sectors around the server.

    Every rotation of the sector boundaries is tried and the one with the
    lowest worst-case budget use is kept.
    """
    topo = ctx.topology
    K, n = ctx.n_transporters, topo.n_clients
    rel = topo.positions[1:] - topo.positions[0]
    angle = np.arctan2(rel[:, 1], rel[:, 0])
    best, best_load = None, math.inf
    for rot in np.linspace(-math.pi, math.pi, n_rotations, endpoint=False):
        order = np.argsort((angle - rot) % (2 * math.pi), kind="stable")
        labels = [0] * n
        for r, c in enumerate(order):
            labels[c] = r * K // n
        cand = Assignment(tuple(labels), K)
        load = max(
            ctx.price(k, s)[1] / ctx.profiles[k].budget if s else 0.0
            for k, s in enumerate(cand.subsets())
        )
        if load < best_load:
            best, best_load = cand, load
    return best


def _load_profile(a: Assignment, ctx: RouteContext) -> list[float]:
    """Budget shares of every transporter, largest first."""
    loads = []
    for k, s in enumerate(a.subsets()):
        budget = ctx.profiles[k].budget
        loads.append(ctx.price(k, s)[1] / budget if s else 0.0)
    return sorted(loads, reverse=True)


def balance_energy(ctx: RouteContext, start: Assignment, rng: np.random.Generator, sweeps: int = 30) -> Assignment:
    """Local search on single moves and pairwise swaps that lowers the worst budget share.

    Loads are compared lexicographically (largest first), so the search keeps
    going after the worst transporter stops improving.
    """
    a, cur = start, _load_profile(start, ctx)
    n, K = a.n_clients, a.n_transporters
    for _ in range(sweeps):
        improved = False
        for c in (int(i) + 1 for i in rng.permutation(n)):
            for k in range(K):
                if a.labels[c - 1] == k:
                    continue
                b = a.with_label(c, k)
                load = _load_profile(b, ctx)
                if load < cur:
                    a, cur, improved = b, load, True
        for _ in range(10 * n):
            i, j = (int(v) for v in rng.integers(1, n + 1, 2))
            ki, kj = a.labels[i - 1], a.labels[j - 1]
            if ki == kj:
                continue
            b = a.with_label(i, kj).with_label(j, ki)
            load = _load_profile(b, ctx)
            if load < cur:
                a, cur, improved = b, load, True
        if cur[0] <= 1.0 or not improved:
            break
    return a


def initial_assignment(ctx: RouteContext, rng: np.random.Generator, attempts: int = 8) -> Assignment:
    """Greedy insertion from a few random orders, then an angular sweep repaired by load balancing."""
    last = None
    for _ in range(attempts):
        try:
            return greedy_initial(ctx, rng)
        except InfeasibleError as err:
            last = err
    sweep = sweep_initial(ctx)
    if is_feasible(sweep, ctx):
        return sweep
    balanced = balance_energy(ctx, sweep, rng)
    if is_feasible(balanced, ctx):
        return balanced
    raise InfeasibleError(
        "no energy-feasible initial assignment (greedy, sector sweep and load balancing all failed)",
        _energy_diagnostics(ctx, balanced.subsets()),
    ) from last


def finalize(assignment: Assignment, cost_kind: CostKind, ctx: RouteContext, **extra) -> CarpResult:
    subsets = assignment.subsets()
    tours = [ctx.tour(k, s) if s else None for k, s in enumerate(subsets)]
    energy = [ctx.energy_report(k, s) for k, s in enumerate(subsets)]
    return CarpResult(assignment, evaluate_cost(assignment, cost_kind, ctx), cost_kind, tours, energy, **extra)


def run_carp(ctx: RouteContext, cost: CostKind | str, cfg: GibbsConfig) -> CarpResult:
    cost = CostKind(cost)
    rng = np.random.default_rng(cfg.seed)
    current = initial_assignment(ctx, rng)
    initial = current
    order = list(cfg.order) if cfg.order is not None else list(ctx.topology.clients)
    best, best_cost = current, evaluate_cost(current, cost, ctx)
    trace = []
    if ctx.n_transporters > 1:
        for l in range(cfg.iterations):
            client = order[l % len(order)]
            current = gibbs_step(client, current, cost, cfg.temperature(l), rng, ctx)
            c = evaluate_cost(current, cost, ctx)
            if c < best_cost and is_feasible(current, ctx):
                best, best_cost = current, c
            trace.append((l, c, best_cost))
    if not is_feasible(best, ctx):
        raise InfeasibleError("CARP ended on an infeasible assignment", _energy_diagnostics(ctx, best.subsets()))
    return finalize(best, cost, ctx, trace=trace, initial=initial)


EXHAUSTIVE_MAX = 200_000


def exhaustive_optimum(ctx: RouteContext, cost: CostKind | str) -> tuple[Assignment | None, float]:
    """Best feasible assignment by enumerating all K^N labelings.

    Returns (None, inf) when nothing is feasible. Only for small instances.
    """
    cost = CostKind(cost)
    n, K = ctx.topology.n_clients, ctx.n_transporters
    if K**n > EXHAUSTIVE_MAX:
        raise ValueError(f"{K}^{n} assignments is too many to enumerate")
    best, best_cost = None, math.inf
    for labels in itertools.product(range(K), repeat=n):
        a = Assignment(labels, K)
        if not is_feasible(a, ctx):
            continue
        c = evaluate_cost(a, cost, ctx)
        if c < best_cost:
            best, best_cost = a, c
    return best, best_cost
