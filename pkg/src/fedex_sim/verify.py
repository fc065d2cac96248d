"""Trace verification and convergence-bound evaluation.

``verify_trace`` re-derives the global sequence from the logged per-step
gradients and checks it against what the simulator produced:

(a) reconstruction: x[t] == x[0] - (1/N) sum_i sum_{s <= phi_i(t)} eta g_i^s
(b) delay: (t-1) - phi_i(t) <= 2 D_k for every client of transporter k
(c) alignment: phi is shared by all clients (sync) or per transporter (async)
(d) aligned view: re-simulating with aligned local training gives the same x

``evaluate_bounds`` compares the measured average squared gradient norm with
the right-hand sides of the sync and async convergence theorems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .fedsim import Mode, SimScenario, SimTrace, run_aligned_view

EPS = np.finfo(float).eps


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, **self.detail}


@dataclass
class VerificationReport:
    mode: Mode
    seed: int
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "passed": self.passed,
            "checks": [c.as_dict() for c in self.checks],
        }

    def to_text(self) -> str:
        lines = [f"mode={self.mode.value} seed={self.seed} overall={'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            extras = ", ".join(f"{k}={v}" for k, v in c.detail.items() if not isinstance(v, (list, dict)))
            lines.append(f"  [{'PASS' if c.passed else 'FAIL'}] {c.name}: {extras}")
        return "\n".join(lines)


def _owners(scenario: SimScenario) -> np.ndarray:
    owner = np.zeros(scenario.n_clients, dtype=np.int64)
    for k, plan in enumerate(scenario.plans):
        for c in plan.clients:
            owner[c - 1] = k
    return owner


def reconstruct(trace: SimTrace) -> tuple[np.ndarray, np.ndarray]:
    """Global sequence rebuilt from logged gradients and phi; also the term counts."""
    T, N = trace.horizon, trace.n_clients
    d = trace.x.shape[1]
    # prefix sums with a zero row in front so phi = -1 selects nothing
    cum = np.zeros((N, trace.grads.shape[1] + 1, d))
    np.cumsum(trace.grads, axis=1, out=cum[:, 1:, :])
    idx = trace.phi + 1  # (T, N)
    picked = cum[np.arange(N)[None, :], idx, :]  # (T, N, d)
    recon = trace.x[0] - picked.sum(axis=1) / N
    return recon, idx.sum(axis=1)


def check_reconstruction(trace: SimTrace, tol_factor: float = 10.0) -> CheckResult:
    T, N = trace.horizon, trace.n_clients
    d = trace.x.shape[1]
    problems = []

    # every delivered label must have been computed
    for i in range(N):
        top = int(trace.phi[-1, i])
        missing = np.flatnonzero(trace.grad_slot[i, :top + 1] < 0)
        if missing.size:
            s = int(missing[0])
            problems.append({"client": i + 1, "label": s, "reason": "delivered label was never computed"})

    # each delivered CLU must equal the sum of the steps it claims to cover
    for slot, k, cid, lo, hi, clu in trace.deliveries:
        part = trace.grads[cid - 1, lo:hi + 1]
        expect = part.sum(axis=0)
        scale = max(1.0, float(np.abs(part).sum(axis=0).max()))
        err = float(np.max(np.abs(clu - expect))) if d else 0.0
        if err > tol_factor * EPS * d * max(hi - lo + 1, 1) * scale:
            bad = [int(lo + j) for j in range(hi - lo + 1) if trace.grad_slot[cid - 1, lo + j] < 0]
            problems.append({
                "client": cid, "transporter": k, "delivered_at": int(slot), "labels": [int(lo), int(hi)],
                "ran_in_slots": [int(trace.grad_slot[cid - 1, lo]), int(trace.grad_slot[cid - 1, hi])],
                "suspect_labels": bad, "max_abs_error": err, "reason": "CLU differs from its logged steps",
            })

    recon, terms = reconstruct(trace)
    scale = max(1.0, float(np.abs(trace.x).max()), float(np.abs(trace.grads).max(initial=0.0)))
    tol = tol_factor * EPS * d * np.maximum(terms, 1) * scale
    err = np.max(np.abs(recon - trace.x), axis=1)
    bad_t = np.flatnonzero(err > tol)
    detail = {"max_abs_error": float(err.max()), "max_tolerance": float(tol.max()), "slots_failed": int(bad_t.size)}
    if bad_t.size:
        t = int(bad_t[0])
        detail["first_failed_slot"] = t
        if not problems:
            # pin down who changed phi at that slot
            changed = np.flatnonzero(trace.phi[t] != trace.phi[t - 1]) + 1 if t else np.arange(N) + 1
            problems.append({"slot": t, "clients_updated": changed.tolist(), "reason": "global model mismatch"})
    if problems:
        detail["problems"] = problems[:20]
        first = problems[0]
        if "client" in first:
            detail["first_bad_client"] = first["client"]
            detail["first_bad_slot"] = first.get("delivered_at", int(trace.grad_slot[first["client"] - 1, first["label"]])
                                                 if "label" in first else -1)
    return CheckResult("reconstruction", not problems and not bad_t.size, detail)


def delays(trace: SimTrace) -> np.ndarray:
    """(t-1) - phi_i(t) per slot and client."""
    t = np.arange(trace.horizon)[:, None]
    return (t - 1) - trace.phi


def check_delay(trace: SimTrace, scenario: SimScenario) -> CheckResult:
    owner = _owners(scenario)
    D = np.asarray(trace.round_lengths)
    lag = delays(trace)
    per = []
    ok, attained = True, False
    for k in range(len(scenario.plans)):
        cols = np.flatnonzero(owner == k)
        if not cols.size:
            continue
        bound = 2 * int(D[k])
        sub = lag[bound + 1:, cols]  # after warm-up
        worst = int(sub.max()) if sub.size else -1
        at = int(np.argmax(sub.max(axis=1))) + bound + 1 if sub.size else -1
        ok &= worst <= bound
        attained |= worst == bound
        per.append({"transporter": k, "bound": bound, "max_delay": worst, "worst_slot": at})
    detail = {
        "max_delay": max(p["max_delay"] for p in per),
        "bound_attained": attained,
        "per_transporter": per,
    }
    return CheckResult("delay_bound", ok, detail)


def check_alignment(trace: SimTrace, scenario: SimScenario) -> CheckResult:
    phi = trace.phi
    mono = bool(np.all(np.diff(phi, axis=0) >= 0))
    below = bool(np.all(phi <= (np.arange(trace.horizon)[:, None] - 1)))
    if trace.mode is Mode.SYNC:
        groups = [np.arange(trace.n_clients)]
    else:
        owner = _owners(scenario)
        groups = [np.flatnonzero(owner == k) for k in range(len(scenario.plans))]
    split = []
    for g in groups:
        if g.size > 1:
            rows = np.flatnonzero(np.any(phi[:, g] != phi[:, g[:1]], axis=1))
            if rows.size:
                split.append({"clients": (g + 1).tolist(), "first_slot": int(rows[0])})
    detail = {"monotone": mono, "phi_below_t": below, "groups": len(groups), "misaligned": split}
    return CheckResult("phi_alignment", mono and below and not split, detail)


def check_aligned_view(trace: SimTrace, scenario: SimScenario) -> CheckResult:
    # the re-simulation must replay the trace's own random stream
    xs = run_aligned_view(replace(scenario, mode=trace.mode, seed=trace.seed))
    same = np.array_equal(xs, trace.x)
    diff = np.flatnonzero(np.any(xs != trace.x, axis=1))
    detail = {"identical": bool(same), "max_abs_diff": float(np.max(np.abs(xs - trace.x)))}
    if diff.size:
        detail["first_diff_slot"] = int(diff[0])
    return CheckResult("aligned_view", bool(same), detail)


def verify_trace(trace: SimTrace, scenario: SimScenario, aligned: bool = True) -> VerificationReport:
    checks = [check_reconstruction(trace), check_delay(trace, scenario), check_alignment(trace, scenario)]
    if aligned:
        checks.append(check_aligned_view(trace, scenario))
    return VerificationReport(trace.mode, trace.seed, checks)


# ---------------------------------------------------------------- gap lemmas


def sync_gap_bound(eta: float, G: float, delta: int) -> float:
    return 4.0 * eta**2 * G**2 * delta**2


def check_sync_gap(trace: SimTrace, G: float) -> CheckResult:
    """max_i ||x^t - x_i^t||^2 <= 4 eta^2 G^2 D^2 for t > D (sync)."""
    D = max(trace.round_lengths)
    bound = sync_gap_bound(trace.eta, G, D)
    gaps = trace.gap_sq[D + 1:]
    viol = np.flatnonzero(gaps > bound)
    detail = {"bound": bound, "max_gap": float(np.nanmax(gaps)) if gaps.size else 0.0, "violations": int(viol.size)}
    if viol.size:
        detail["first_violation_slot"] = int(viol[0]) + D + 1
    return CheckResult("sync_gap", not viol.size, detail)


def virtual_gap_bound(eta: float, G: float, counts: Sequence[int], deltas: Sequence[int]) -> float:
    N = sum(counts)
    return 4.0 * eta**2 * G**2 / N * sum(r * d * d for r, d in zip(counts, deltas))


def virtual_gap(trace: SimTrace) -> np.ndarray:
    v, usable = trace.virtual_sequence()
    diff = v - trace.x[:usable]
    return np.einsum("ij,ij->i", diff, diff)


def check_virtual_gap(trace: SimTrace, G: float) -> CheckResult:
    """Realised ||v^t - x^t||^2 against the expectation bound, slot by slot."""
    bound = virtual_gap_bound(trace.eta, G, trace.counts, trace.round_lengths)
    gap = virtual_gap(trace)
    viol = np.flatnonzero(gap > bound)
    detail = {"bound": bound, "max_gap": float(gap.max()), "slots": int(gap.size), "violations": int(viol.size)}
    return CheckResult("virtual_gap", not viol.size, detail)


# ---------------------------------------------------------------- convergence bounds


@dataclass(frozen=True)
class TaskConstants:
    L: float
    G: float
    sigma: float
    f_star: float


def sync_bound_rhs(eta, T, N, delta, f0, f_star, g0_sq, L, G, sigma, simplified=False) -> float:
    if simplified:
        return 2.0 / (eta * T) * (f0 - f_star) + 10 * eta**2 * G**2 * L**2 * delta**2 + L * eta * sigma**2 / N
    w = (T - delta) / T
    return (
        2.0 / (eta * T) * (f0 - f_star)
        + delta / T * g0_sq
        + w * 10 * eta**2 * G**2 * L**2 * delta**2
        + w * L * eta * sigma**2 / N
    )


def async_bound_rhs(eta, T, N, counts, deltas, f0, f_star, L, G, sigma) -> float:
    sws = sum(r * d * d for r, d in zip(counts, deltas))
    return 4.0 / (eta * T) * (f0 - f_star) + 44 * eta**2 * G**2 * L**2 / N * sws + 2 * L * eta * sigma**2 / N


def bound_learning_rate(N: int, T: int, L: float) -> float:
    return min(math.sqrt(N) / (L * math.sqrt(T)), 1.0 / L)


@dataclass
class BoundReport:
    mode: Mode
    T: int
    eta: float
    replications: int
    lhs: float
    rhs: float
    rhs_full: float | None
    lhs_per_rep: list[float]
    terms: dict

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs

    def as_dict(self) -> dict:
        return {
            "mode": self.mode.value, "T": self.T, "eta": self.eta, "replications": self.replications,
            "lhs": self.lhs, "rhs": self.rhs, "rhs_full": self.rhs_full, "margin": self.margin,
            "holds": self.holds, "lhs_per_replication": self.lhs_per_rep, "terms": self.terms,
        }


def evaluate_bounds(traces: Sequence[SimTrace], constants: TaskConstants, T: int | None = None) -> BoundReport:
    """Measured (1/T) sum ||grad f(x^t)||^2, averaged over traces, against the bound RHS.

    Sync traces are compared with the simplified sync bound (the full form is
    reported alongside); async traces with the async bound. ``T`` truncates
    every trace to its first T slots.
    """
    if not traces:
        raise ValueError("need at least one trace")
    first = traces[0]
    T = first.horizon if T is None else int(T)
    if any(tr.horizon < T for tr in traces):
        raise ValueError("every trace must cover T slots")
    eta, N = first.eta, first.n_clients
    L, G, sigma, f_star = constants.L, constants.G, constants.sigma, constants.f_star
    per = [float(np.mean(tr.grad_sq[:T])) for tr in traces]
    lhs = float(np.mean(per))
    f0 = float(first.loss[0])
    g0 = float(first.grad_sq[0])
    if first.mode is Mode.SYNC:
        delta = max(first.round_lengths)
        rhs = sync_bound_rhs(eta, T, N, delta, f0, f_star, g0, L, G, sigma, simplified=True)
        full = sync_bound_rhs(eta, T, N, delta, f0, f_star, g0, L, G, sigma)
        terms = {
            "optimality_gap": 2.0 / (eta * T) * (f0 - f_star),
            "delay": 10 * eta**2 * G**2 * L**2 * delta**2,
            "noise": L * eta * sigma**2 / N,
            "delta": delta,
        }
    else:
        rhs = async_bound_rhs(eta, T, N, first.counts, first.round_lengths, f0, f_star, L, G, sigma)
        full = None
        sws = sum(r * d * d for r, d in zip(first.counts, first.round_lengths))
        terms = {
            "optimality_gap": 4.0 / (eta * T) * (f0 - f_star),
            "delay": 44 * eta**2 * G**2 * L**2 / N * sws,
            "noise": 2 * L * eta * sigma**2 / N,
            "sws": sws,
        }
    return BoundReport(first.mode, T, eta, len(traces), lhs, rhs, full, per, terms)
