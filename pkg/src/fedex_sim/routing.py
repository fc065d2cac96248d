"""Transporter tours over {server} + assigned clients.

A tour leaves the server (device 0), visits each assigned client once and
returns. Its round-trip time is the hover transmission time for every client
plus the straight-and-level flight time, rounded up to whole slots.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .energy import PropulsionParams, RadioParams, transmission_time
from .topology import Topology

EXACT_MAX_CLIENTS = 12
_IMPROVE_EPS = 1e-9


@dataclass(frozen=True)
class Tour:
    order: tuple[int, ...]
    length: float  # m
    t_slf: float  # s
    t_trans: float  # s, per client
    rtt_seconds: float
    rtt_slots: int
    slot_duration: float
    stop_times: tuple[float, ...]  # s after departure when each exchange completes

    @property
    def n_clients(self) -> int:
        return len(self.order)

    def as_dict(self) -> dict:
        return {
            "order": list(self.order),
            "length_m": self.length,
            "t_slf_s": self.t_slf,
            "rtt_seconds": self.rtt_seconds,
            "rtt_slots": self.rtt_slots,
        }


def tour_length(topology: Topology, order: Sequence[int]) -> float:
    if len(set(order)) != len(order):
        raise ValueError(f"duplicate client in tour {list(order)}")
    if not order:
        return 0.0
    d = topology.dist_rows()
    total = d[0][order[0]]
    for a, b in zip(order, order[1:]):
        total += d[a][b]
    return total + d[order[-1]][0]


def _two_opt_pass(d, path: list[int], rng: np.random.Generator) -> list[int]:
    """First-improvement 2-OPT on a closed path with the depot at both ends."""
    n = len(path) - 2  # number of clients
    pairs = [(i, j) for i in range(n) for j in range(i + 2, n + 1)]
    improved = True
    while improved:
        improved = False
        for idx in rng.permutation(len(pairs)):
            i, j = pairs[idx]
            a, b = path[i], path[i + 1]
            c, e = path[j], path[j + 1]
            delta = d[a][c] + d[b][e] - d[a][b] - d[c][e]
            if delta < -_IMPROVE_EPS:
                path[i + 1:j + 1] = path[j:i:-1]
                improved = True
    return path


def is_two_opt_stable(topology: Topology, order: Sequence[int]) -> bool:
    d = topology.dist_rows()
    path = [0, *order, 0]
    n = len(order)
    for i in range(n):
        for j in range(i + 2, n + 1):
            a, b, c, e = path[i], path[i + 1], path[j], path[j + 1]
            if d[a][c] + d[b][e] - d[a][b] - d[c][e] < -_IMPROVE_EPS:
                return False
    return True


def solve_tsp_2opt(
    topology: Topology,
    clients: Iterable[int],
    restarts: int = 10,
    seed: int | np.random.Generator = 0,
) -> tuple[int, ...]:
    nodes = sorted(set(clients))
    if not nodes:
        raise ValueError("cannot route an empty client set")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if len(nodes) <= 2:
        return tuple(nodes)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = topology.dist_rows()
    best, best_len = None, math.inf
    for _ in range(restarts):
        start = [nodes[k] for k in rng.permutation(len(nodes))]
        path = _two_opt_pass(d, [0, *start, 0], rng)
        order = tuple(path[1:-1])
        length = tour_length(topology, order)
        if length < best_len - _IMPROVE_EPS:
            best, best_len = order, length
    return best


def solve_tsp_exact(topology: Topology, clients: Iterable[int]) -> tuple[int, ...]:
    """Held-Karp dynamic program over subsets of clients."""
    nodes = sorted(set(clients))
    n = len(nodes)
    if n == 0:
        raise ValueError("cannot route an empty client set")
    if n > EXACT_MAX_CLIENTS:
        raise ValueError(f"exact TSP limited to {EXACT_MAX_CLIENTS} clients, got {n}")
    if n <= 2:
        return tuple(nodes)
    d = topology.dist_rows()
    full = (1 << n) - 1
    # cost[mask][j]: shortest path from depot through mask ending at nodes[j]
    cost = [[math.inf] * n for _ in range(1 << n)]
    parent = [[-1] * n for _ in range(1 << n)]
    for j in range(n):
        cost[1 << j][j] = d[0][nodes[j]]
    for mask in range(1, full + 1):
        row = cost[mask]
        for j in range(n):
            cj = row[j]
            if cj == math.inf:
                continue
            dj = d[nodes[j]]
            for k in range(n):
                if mask & (1 << k):
                    continue
                nm = mask | (1 << k)
                c = cj + dj[nodes[k]]
                if c < cost[nm][k]:
                    cost[nm][k] = c
                    parent[nm][k] = j
    last = min(range(n), key=lambda j: cost[full][j] + d[nodes[j]][0])
    order, mask = [], full
    while last != -1:
        order.append(nodes[last])
        prev = parent[mask][last]
        mask ^= 1 << last
        last = prev
    order.reverse()
    return tuple(order)


def solve_tsp_bruteforce(topology: Topology, clients: Iterable[int]) -> tuple[int, ...]:
    """Exhaustive permutations; only for tiny instances and cross-checks."""
    nodes = sorted(set(clients))
    if len(nodes) > 9:
        raise ValueError("brute force limited to 9 clients")
    best = min(itertools.permutations(nodes), key=lambda p: tour_length(topology, p))
    return tuple(best)


def subset_seed(base_seed: int, clients: Iterable[int]) -> np.random.Generator:
    """RNG keyed by the client set, so 2-OPT results do not depend on call order."""
    return np.random.default_rng(np.random.SeedSequence([base_seed, *sorted(clients)]))


def assemble_tour(
    topology: Topology,
    radio: RadioParams,
    prop: PropulsionParams,
    order: Sequence[int],
    slot_duration: float,
) -> Tour:
    if not order:
        raise ValueError("a tour needs at least one client")
    if slot_duration <= 0:
        raise ValueError("slot_duration must be positive")
    d = topology.dist_rows()
    t_trans = transmission_time(radio)
    length = tour_length(topology, order)
    t_slf = length / prop.V
    rtt = len(order) * t_trans + t_slf
    stop_times = []
    travelled, prev = 0.0, 0
    for j, c in enumerate(order, start=1):
        travelled += d[prev][c]
        stop_times.append(travelled / prop.V + j * t_trans)
        prev = c
    slots = max(1, math.ceil(rtt / slot_duration))
    return Tour(tuple(order), length, t_slf, t_trans, rtt, slots, slot_duration, tuple(stop_times))


def build_tour(
    topology: Topology,
    radio: RadioParams,
    prop: PropulsionParams,
    clients: Iterable[int],
    slot_duration: float,
    method: str = "2opt",
    restarts: int = 10,
    seed: int = 0,
) -> Tour:
    clients = sorted(set(clients))
    if not clients:
        raise ValueError("a transporter with no clients has no tour")
    if method == "exact":
        order = solve_tsp_exact(topology, clients)
    elif method == "2opt":
        order = solve_tsp_2opt(topology, clients, restarts, subset_seed(seed, clients))
    else:
        raise ValueError(f"unknown TSP method {method!r}")
    return assemble_tour(topology, radio, prop, order, slot_duration)


class TourCache:
    """Client set -> (order, length) memo shared across CARP runs.

    Orders do not depend on transporter speed, so one entry serves every
    transporter. Concurrent writers for the same key store identical values.
    """

    def __init__(self, topology: Topology, method: str = "2opt", restarts: int = 10, seed: int = 0):
        self.topology = topology
        self.method = method
        self.restarts = restarts
        self.seed = seed
        self._store: dict[frozenset, tuple[tuple[int, ...], float]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def route(self, clients: Iterable[int]) -> tuple[tuple[int, ...], float]:
        key = frozenset(clients)
        with self._lock:
            hit = self._store.get(key)
            if hit is not None:
                self.hits += 1
                return hit
            self.misses += 1
        if not key:
            value = ((), 0.0)
        elif self.method == "exact":
            order = solve_tsp_exact(self.topology, key)
            value = (order, tour_length(self.topology, order))
        else:
            order = solve_tsp_2opt(self.topology, key, self.restarts, subset_seed(self.seed, key))
            value = (order, tour_length(self.topology, order))
        with self._lock:
            self._store[key] = value
        return value

    def __len__(self) -> int:
        return len(self._store)
