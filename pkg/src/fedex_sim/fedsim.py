"""Slot-level simulation of transporter-mediated federated learning.

Timing conventions
------------------
``x[t]`` is the server model at the end of slot t. Inside a slot, events
happen in this order:

1. transporter visits: the client's cumulative local update (CLU) is added
   to the transporter's aggregate, then the client replaces its local model
   with the global model the transporter carries and zeroes its CLU;
2. every seeded client takes one local SGD step;
3. returning transporters hand their aggregates to the server, which applies
   x <- x - (1/N) * sum(u_k), and leave again carrying the new model.

A transporter round departing at the end of slot t0 with period D visits its
stops at t0 + a_j (1 <= a_1 <= a_2 <= ... <= D) and returns at t0 + D. Several
short hops can complete inside one slot; such stops are served in tour order. In sync
mode every transporter uses D = max_k D_k; in async mode each uses its own.

Gradient bookkeeping follows the aligned view: the j-th local step a client
takes after downloading the model of a round that departed at t0 is labelled
t0 + j, whatever slot it actually ran in. With these labels every client of a
transporter shares the same delivered prefix phi_i(t), and

    x[t] = x[0] - (1/N) * sum_i sum_{s <= phi_i(t)} eta * g_i^s.

Clients hold no model until their first visit and stay idle until then.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .routing import Tour


class Mode(str, enum.Enum):
    SYNC = "sync"
    ASYNC = "async"


class Phase(enum.IntEnum):
    AT_SERVER = 0
    TRAVELLING = 1
    HOVERING = 2


@dataclass(frozen=True)
class TransporterPlan:
    clients: tuple[int, ...]  # visiting order
    offsets: tuple[int, ...]  # visit slot after departure, non-decreasing
    delta: int  # own round length in slots

    def __post_init__(self):
        if len(self.clients) != len(self.offsets):
            raise ValueError("one offset per client")
        prev = 1
        for a in self.offsets:
            if a < prev:
                raise ValueError(f"visit offsets must be non-decreasing and >= 1: {self.offsets}")
            prev = a
        if self.offsets and self.offsets[-1] > self.delta:
            raise ValueError(f"last visit at offset {self.offsets[-1]} exceeds round length {self.delta}")


def schedule_tour_stops(tour: Tour, start_slot: int = 0) -> list[int]:
    """Absolute visit slots for one round of ``tour`` departing at ``start_slot``.

    Stop j is served in the slot where its exchange completes, i.e. after the
    travel to it plus j transmissions. Every stop time is at most the tour's
    RTT, so all stops land within the round.
    """
    slot = tour.slot_duration
    out, prev = [], 1
    for t in tour.stop_times:
        # the tolerance keeps exact multiples of the slot from rounding up
        a = max(math.ceil(t / slot - 1e-9), prev)
        out.append(a)
        prev = a
    return [start_slot + a for a in out]


def plan_from_tour(tour: Tour) -> TransporterPlan:
    return TransporterPlan(tour.order, tuple(schedule_tour_stops(tour, 0)), tour.rtt_slots)


@dataclass
class ClientState:
    x: np.ndarray  # local model
    m: np.ndarray  # CLU
    seeded: bool = False  # False until the first visit delivers a model
    base_round: int = -1  # departure slot of the global model in use
    steps: int = 0  # local steps since that download

    @classmethod
    def empty(cls, dim: int) -> "ClientState":
        return cls(np.zeros(dim), np.zeros(dim))


@dataclass
class TransporterState:
    carried: np.ndarray
    u: np.ndarray
    round_start: int = 0
    next_stop: int = 0
    pending: list = field(default_factory=list)  # (client, first_label, last_label, clu)


def client_visit(client: ClientState, transporter: TransporterState, client_id: int) -> None:
    """Upload first, then download: the CLU leaves before the new model lands."""
    if client.seeded:
        clu = client.m.copy()
        transporter.u += clu
        if client.steps:
            transporter.pending.append(
                (client_id, client.base_round, client.base_round + client.steps - 1, clu)
            )
    client.x[:] = transporter.carried
    client.m[:] = 0.0
    client.seeded = True
    client.base_round = transporter.round_start
    client.steps = 0


def local_step(client: ClientState, task, client_id: int, eta: float, rng: np.random.Generator) -> np.ndarray:
    """One SGD step on the client's local model; returns eta * g."""
    g = task.stochastic_gradient(client_id, client.x, rng)
    eg = eta * g
    client.x -= eg
    client.m += eg
    client.steps += 1
    return eg


@dataclass
class SimScenario:
    plans: list[TransporterPlan]
    task: object
    eta: float
    horizon: int  # number of recorded slots T
    seed: int = 0
    mode: Mode = Mode.SYNC
    tours: list[Tour | None] | None = None
    energy: list | None = None  # per-transporter EnergyReport, one tour each

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if not self.plans:
            raise ValueError("scenario has no transporters")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        seen = [c for p in self.plans for c in p.clients]
        n = self.task.n_clients
        if sorted(seen) != list(range(1, n + 1)):
            raise ValueError("transporter plans must partition clients 1..N")

    @property
    def n_clients(self) -> int:
        return self.task.n_clients

    def round_lengths(self) -> list[int]:
        if self.mode is Mode.SYNC:
            d = max(p.delta for p in self.plans)
            return [d] * len(self.plans)
        return [p.delta for p in self.plans]

    def with_mode(self, mode: Mode | str) -> "SimScenario":
        return SimScenario(self.plans, self.task, self.eta, self.horizon, self.seed, Mode(mode), self.tours, self.energy)


@dataclass
class SimTrace:
    mode: Mode
    x: np.ndarray  # (T, d) global model at end of each slot
    phi: np.ndarray  # (T, N) delivered aligned-label prefix per client
    loss: np.ndarray  # (T,)
    grad_sq: np.ndarray  # (T,)
    gap_sq: np.ndarray  # (T,) max_i ||x[t] - x_i[t]||^2 over seeded clients
    phases: np.ndarray  # (T, K)
    grads: np.ndarray  # (N, n_labels, d) eta * g by aligned label
    grad_slot: np.ndarray  # (N, n_labels) real slot each labelled step ran in, -1 if not yet
    deliveries: list  # (slot, transporter, client, first_label, last_label, clu)
    updates: list  # slots with a global update
    round_lengths: list[int]
    counts: list[int]
    eta: float
    seed: int
    clip_events: int
    energy_rows: list = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.x.shape[0]

    @property
    def n_clients(self) -> int:
        return self.phi.shape[1]

    def virtual_sequence(self) -> tuple[np.ndarray, int]:
        """v[t] = x[0] - (1/N) sum_i sum_{s<=t-1} eta g_i^s, for t < usable.

        Labels past the end of the run may not have been computed yet, so v is
        only defined up to the first t whose labels t-1 are not all present.
        """
        T, N = self.horizon, self.n_clients
        ready = np.all(self.grad_slot >= 0, axis=0)
        usable = T
        for s in range(min(T, ready.shape[0])):
            if not ready[s]:
                usable = min(T, s + 1)
                break
        cum = np.cumsum(self.grads[:, :max(usable - 1, 0), :].sum(axis=0), axis=0)
        v = np.empty((usable, self.x.shape[1]))
        v[0] = self.x[0]
        if usable > 1:
            v[1:] = self.x[0] - cum / N
        return v, usable


def _aggregate(vectors: Sequence[np.ndarray]) -> np.ndarray:
    total = vectors[0].copy()
    for v in vectors[1:]:
        total += v
    return total


def _run(scenario: SimScenario) -> SimTrace:
    task = scenario.task
    plans = scenario.plans
    N, d, T, K = task.n_clients, task.dim, scenario.horizon, len(plans)
    eta = scenario.eta
    periods = scenario.round_lengths()
    rng = np.random.default_rng(scenario.seed)

    x = np.array(task.x0, dtype=float)
    X = np.zeros((N, d))
    M = np.zeros((N, d))
    clients = [ClientState(X[i], M[i]) for i in range(N)]
    movers = [TransporterState(x.copy(), np.zeros(d)) for _ in plans]

    n_labels = T + 2 * max(periods) + 2
    grads = np.zeros((N, n_labels, d))
    grad_slot = np.full((N, n_labels), -1, dtype=np.int64)
    xs = np.empty((T, d))
    phi = np.full((T, N), -1, dtype=np.int64)
    loss = np.empty(T)
    grad_sq = np.empty(T)
    gap_sq = np.full(T, np.nan)
    phases = np.zeros((T, K), dtype=np.int8)
    deliveries, updates = [], []
    cur_phi = np.full(N, -1, dtype=np.int64)
    clip_events = 0

    def record(t):
        xs[t] = x
        phi[t] = cur_phi
        f, g = task.loss_and_grad(x)
        loss[t] = f
        grad_sq[t] = float(g @ g)
        seeded = [i for i in range(N) if clients[i].seeded]
        if seeded:
            diff = X[seeded] - x
            gap_sq[t] = float(np.max(np.einsum("ij,ij->i", diff, diff)))

    task.draw(rng)  # slot 0 draw, unused: keeps draw t aligned with slot t
    record(0)
    for t in range(1, T):
        # (1) visits
        for k, (plan, mv) in enumerate(zip(plans, movers)):
            phases[t, k] = Phase.TRAVELLING
            off = t - mv.round_start
            while mv.next_stop < len(plan.clients) and off == plan.offsets[mv.next_stop]:
                cid = plan.clients[mv.next_stop]
                client_visit(clients[cid - 1], mv, cid)
                mv.next_stop += 1
                phases[t, k] = Phase.HOVERING
            if off > plan.delta:
                phases[t, k] = Phase.AT_SERVER  # sync: back early, waiting

        # (2) local steps
        draw = task.draw(rng)
        G, clipped = task.gradients(X, draw)
        active = [i for i in range(N) if clients[i].seeded]
        clip_events += clipped
        EG = eta * G
        for i in active:
            st = clients[i]
            label = st.base_round + st.steps
            eg = EG[i]
            X[i] -= eg
            M[i] += eg
            grads[i, label] = eg
            grad_slot[i, label] = t
            st.steps += 1

        # (3) returns
        returning = [k for k, mv in enumerate(movers) if t - mv.round_start == periods[k]]
        if returning:
            total = _aggregate([movers[k].u for k in returning])
            x = x - total / N
            updates.append(t)
            for k in returning:
                mv = movers[k]
                for cid, lo, hi, clu in mv.pending:
                    if lo != cur_phi[cid - 1] + 1:
                        raise AssertionError(f"client {cid}: delivered labels {lo}..{hi} after {cur_phi[cid - 1]}")
                    cur_phi[cid - 1] = hi
                    deliveries.append((t, k, cid, lo, hi, clu))
                mv.pending = []
                mv.u = np.zeros(d)
                mv.carried = x.copy()
                mv.round_start = t
                mv.next_stop = 0
                phases[t, k] = Phase.AT_SERVER
        record(t)

    energy_rows = []
    if scenario.energy is not None:
        for k, rep in enumerate(scenario.energy):
            starts = range(0, T, periods[k])
            for r, t0 in enumerate(starts):
                energy_rows.append((k, r, t0, t0 + periods[k], rep))

    return SimTrace(
        scenario.mode, xs, phi, loss, grad_sq, gap_sq, phases, grads, grad_slot,
        deliveries, updates, periods, [len(p.clients) for p in plans], eta, scenario.seed,
        clip_events, energy_rows,
    )


def run_fedex_sync(scenario: SimScenario) -> SimTrace:
    return _run(scenario.with_mode(Mode.SYNC))


def run_fedex_async(scenario: SimScenario) -> SimTrace:
    return _run(scenario.with_mode(Mode.ASYNC))


def run(scenario: SimScenario) -> SimTrace:
    return _run(scenario)


def run_aligned_view(scenario: SimScenario) -> np.ndarray:
    """Global model sequence when every client of a round trains from its departure.

    Each client of transporter k downloads the carried model the moment the
    transporter departs at t0, trains for one full round, hands its CLU over
    at the next departure and has it applied one round later, at t0 + 2 D_k.
    The stochastic draws are the ones the real schedule would have used, so
    the local trajectories are the same and only their timing moves.
    """
    task = scenario.task
    plans = scenario.plans
    N, d, T = task.n_clients, task.dim, scenario.horizon
    eta = scenario.eta
    periods = scenario.round_lengths()
    rng = np.random.default_rng(scenario.seed)

    offset = np.zeros(N, dtype=np.int64)
    owner = np.zeros(N, dtype=np.int64)
    for k, plan in enumerate(plans):
        for cid, a in zip(plan.clients, plan.offsets):
            offset[cid - 1] = a
            owner[cid - 1] = k

    tape: list[np.ndarray] = []

    def draw_at(slot):
        while len(tape) <= slot:
            tape.append(task.draw(rng))
        return tape[slot]

    x = np.array(task.x0, dtype=float)
    X = np.zeros((N, d))
    M = np.zeros((N, d))
    seeded = np.zeros(N, dtype=bool)
    steps = np.zeros(N, dtype=np.int64)
    start = [0] * len(plans)
    pending: list[list[np.ndarray]] = [[] for _ in plans]
    xs = np.empty((T, d))

    for t in range(T):
        returning = [k for k in range(len(plans)) if t > 0 and t - start[k] == periods[k]]
        if returning:
            us = []
            for k in returning:
                u = np.zeros(d)
                for clu in pending[k]:
                    u += clu
                us.append(u)
            x = x - _aggregate(us) / N
        xs[t] = x
        for k, plan in enumerate(plans):
            if t == 0 or k in returning:
                # CLUs of the round just finished ride along, then every client downloads
                pending[k] = [M[c - 1].copy() for c in plan.clients if seeded[c - 1] and steps[c - 1]]
                for c in plan.clients:
                    X[c - 1] = x
                    M[c - 1] = 0.0
                    seeded[c - 1] = True
                    steps[c - 1] = 0
                start[k] = t
        # step labelled t, fed with the draw the real schedule used for it
        real_slot = [start[owner[i]] + offset[i] + steps[i] for i in range(N)]
        draw = np.stack([draw_at(int(s))[i] for i, s in enumerate(real_slot)])
        G, _ = task.gradients(X, draw)
        EG = eta * G
        for i in range(N):
            X[i] -= EG[i]
            M[i] += EG[i]
            steps[i] += 1
    return xs
