import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedex_sim.fedsim import Mode, SimScenario, TransporterPlan, run
from fedex_sim.learning import QuadraticTask
from fedex_sim.verify import (
    TaskConstants,
    bound_learning_rate,
    check_alignment,
    check_delay,
    check_sync_gap,
    check_virtual_gap,
    check_reconstruction,
    delays,
    evaluate_bounds,
    sync_gap_bound,
    virtual_gap_bound,
    sync_bound_rhs,
    async_bound_rhs,
    verify_trace,
)


def make_task(n, dim=3, sigma=0.5, clip=2.0, seed=0):
    rng = np.random.default_rng(seed)
    A = np.eye(dim) + 0.2 * rng.normal(size=(dim, dim))
    return QuadraticTask(A, rng.normal(size=(n, dim)), sigma=sigma, clip=clip)


def scenario(mode="sync", T=200, seed=0):
    plans = [TransporterPlan((1, 3), (1, 2), 3), TransporterPlan((2, 4, 5), (1, 1, 5), 5)]
    return SimScenario(plans, make_task(5, seed=seed), 0.05, T, seed=seed, mode=Mode(mode))


@st.composite
def random_scenarios(draw):
    n = draw(st.integers(1, 6))
    k = draw(st.integers(1, min(3, n)))
    owner = draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    owner[:k] = range(k)  # no empty transporter
    plans = []
    for j in range(k):
        members = [i + 1 for i in range(n) if owner[i] == j]
        members = draw(st.permutations(members))
        delta = draw(st.integers(1, 6))
        offs = sorted(draw(st.lists(st.integers(1, delta), min_size=len(members), max_size=len(members))))
        plans.append(TransporterPlan(tuple(members), tuple(offs), delta))
    mode = draw(st.sampled_from(list(Mode)))
    seed = draw(st.integers(0, 10_000))
    return SimScenario(plans, make_task(n, seed=seed), 0.05, draw(st.integers(5, 80)), seed=seed, mode=mode)


@given(random_scenarios())
@settings(max_examples=60, deadline=None)
def test_every_checker_passes_on_random_runs(sc):
    tr = run(sc)
    rep = verify_trace(tr, sc)
    assert rep.passed, rep.to_text()
    G = sc.task.clip
    assert check_virtual_gap(tr, G).passed
    if sc.mode is Mode.SYNC:
        assert check_sync_gap(tr, G).passed


@pytest.mark.parametrize("mode", ["sync", "async"])
def test_reference_runs_verify(mode):
    sc = scenario(mode)
    rep = verify_trace(run(sc), sc)
    assert rep.passed
    assert rep["reconstruction"].detail["max_abs_error"] < 1e-12
    names = [c["name"] for c in rep.as_dict()["checks"]]
    assert names == ["reconstruction", "delay_bound", "phi_alignment", "aligned_view"]


def test_corrupted_gradient_is_pinpointed():
    sc = scenario("async")
    tr = run(sc)
    slot, k, cid, lo, hi, _ = tr.deliveries[5]
    bad = copy.deepcopy(tr)
    bad.grads[cid - 1, lo + (hi - lo) // 2] += 1e-6
    res = check_reconstruction(bad)
    assert not res.passed
    assert res.detail["first_bad_client"] == cid
    assert res.detail["first_bad_slot"] == slot
    assert res.detail["problems"][0]["labels"] == [lo, hi]


def test_corrupted_model_is_pinpointed():
    sc = scenario("sync")
    tr = run(sc)
    bad = copy.deepcopy(tr)
    bad.x[57:] += 1e-6
    res = check_reconstruction(bad)
    assert not res.passed and res.detail["first_failed_slot"] == 57


def test_missing_label_is_flagged():
    sc = scenario("sync")
    bad = copy.deepcopy(run(sc))
    bad.grad_slot[3, 4] = -1
    res = check_reconstruction(bad)
    assert not res.passed
    assert res.detail["first_bad_client"] == 4
    assert res.detail["problems"][0]["label"] == 4


def test_delay_bound_and_negative_control():
    sc = scenario("async")
    tr = run(sc)
    res = check_delay(tr, sc)
    assert res.passed
    for p in res.detail["per_transporter"]:
        assert p["max_delay"] <= p["bound"]
    lag = delays(tr)
    assert lag[-1].min() >= 0
    bad = copy.deepcopy(tr)
    bad.phi[150:, 0] = bad.phi[150, 0] - 20
    assert not check_delay(bad, sc).passed


def test_alignment_negative_control():
    sc = scenario("sync")
    tr = run(sc)
    assert check_alignment(tr, sc).passed
    bad = copy.deepcopy(tr)
    bad.phi[100:, 2] -= 1
    res = check_alignment(bad, sc)
    assert not res.passed and res.detail["misaligned"][0]["first_slot"] == 100


def test_aligned_view_negative_control():
    sc = scenario("async")
    bad = copy.deepcopy(run(sc))
    bad.x[40, 0] = np.nextafter(bad.x[40, 0], np.inf)
    rep = verify_trace(bad, sc)
    assert not rep["aligned_view"].passed
    assert rep["aligned_view"].detail["first_diff_slot"] == 40


def test_gap_bound_values():
    assert sync_gap_bound(0.1, 5.0, 9) == pytest.approx(4 * 0.01 * 25 * 81)
    assert virtual_gap_bound(0.1, 5.0, [1, 1], [1, 2]) == pytest.approx(4 * 0.01 * 25 / 2 * 5)
    # equal round lengths: the async bound matches the sync one
    assert virtual_gap_bound(0.1, 5.0, [3, 7], [4, 4]) == pytest.approx(sync_gap_bound(0.1, 5.0, 4))


def test_gap_checks_flag_violations():
    sc = scenario("sync")
    tr = run(sc)
    assert check_sync_gap(tr, sc.task.clip).passed
    assert not check_sync_gap(tr, 1e-6).passed
    assert not check_virtual_gap(tr, 1e-6).passed


def rhs1(sigma=1.0, T=1000, G=2.0, delta=4):
    return sync_bound_rhs(0.01, T, 10, delta, 3.0, 1.0, 0.5, 2.0, G, sigma, simplified=True)


def rhs2(sigma=1.0, T=1000, G=2.0, deltas=(4, 6)):
    return async_bound_rhs(0.01, T, 10, (4, 6), deltas, 3.0, 1.0, 2.0, G, sigma)


@pytest.mark.parametrize("rhs", [rhs1, rhs2])
def test_bound_noise_term_is_quadratic_in_sigma(rhs):
    base = rhs(sigma=0.0)
    assert rhs(sigma=2.0) - base == pytest.approx(4 * (rhs(sigma=1.0) - base))


@pytest.mark.parametrize("rhs", [rhs1, rhs2])
def test_bound_optimisation_term_scales_with_one_over_T(rhs):
    assert rhs(sigma=0.0, G=0.0, T=4000) == pytest.approx(rhs(sigma=0.0, G=0.0, T=1000) / 4)


def test_bound_delay_terms():
    d1 = rhs1(delta=6) - rhs1(delta=3)
    assert d1 == pytest.approx(10 * 0.01**2 * 4 * 4 * (36 - 9))
    d2 = rhs2(deltas=(4, 8)) - rhs2(deltas=(4, 6))
    assert d2 == pytest.approx(44 * 0.01**2 * 4 * 4 / 10 * 6 * (64 - 36))


def test_full_sync_bound_reduces_to_simplified_at_large_T():
    args = (0.01, 10**9, 10, 4, 3.0, 1.0, 0.5, 2.0, 2.0, 1.0)
    assert sync_bound_rhs(*args) == pytest.approx(sync_bound_rhs(*args, simplified=True), rel=1e-6)


def test_bound_learning_rate():
    assert bound_learning_rate(40, 2000, 1.0) == pytest.approx(math.sqrt(40 / 2000))
    assert bound_learning_rate(40, 10, 2.0) == 0.5


@pytest.mark.parametrize("mode", ["sync", "async"])
def test_bounds_hold_on_reference_runs(mode):
    sc = scenario(mode, T=400)
    task = sc.task
    traces = [run(SimScenario(sc.plans, task, sc.eta, sc.horizon, seed=s, mode=sc.mode)) for s in range(3)]
    rep = evaluate_bounds(traces, TaskConstants(task.L, task.clip, task.sigma, task.f_star))
    assert rep.holds and rep.replications == 3
    assert rep.lhs == pytest.approx(np.mean([np.mean(t.grad_sq) for t in traces]))
    half = evaluate_bounds(traces, TaskConstants(task.L, task.clip, task.sigma, task.f_star), T=200)
    assert half.T == 200
    with pytest.raises(ValueError):
        evaluate_bounds(traces, TaskConstants(task.L, task.clip, task.sigma, task.f_star), T=401)
