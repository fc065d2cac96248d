import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedex_sim.learning import (
    Dataset,
    LogisticTask,
    PartitionSpec,
    QuadraticTask,
    clip_rows,
    label_histograms,
    make_dataset,
    partition_data,
)
from fedex_sim.topology import generate_block_layout


def quad_task(n_clients=8, dim=5, sigma=0.0, clip=math.inf, seed=0):
    ds = make_dataset(40 * n_clients, dim, 4, seed=seed)
    shards = partition_data(ds, PartitionSpec("iid", seed=seed), n_clients)
    return QuadraticTask.from_shards(ds, shards, sigma=sigma, clip=clip, seed=seed)


def logistic_task(seed=0):
    ds = make_dataset(240, 4, 4, seed=seed)
    shards = partition_data(ds, PartitionSpec("iid", seed=seed), 6)
    return LogisticTask.from_shards(ds, shards, reg=0.05, batch=8)


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_zero_noise_at_client_optimum():
    task = quad_task()
    x_i = np.linalg.solve(task.A, task.targets[2])
    g = task.stochastic_gradient(3, x_i, np.random.default_rng(0))
    assert np.linalg.norm(g) < 1e-12


def test_unbiased_monte_carlo():
    sigma = 2.0
    task = quad_task(sigma=sigma)
    x = np.random.default_rng(1).normal(size=task.dim)
    rng = np.random.default_rng(2)
    n = 100_000
    draws = np.stack([task.stochastic_gradient(1, x, rng) for _ in range(n)])
    assert np.all(np.abs(draws.mean(axis=0) - task.local_grad(1, x)) <= 3 * sigma / math.sqrt(n))


def test_noise_variance_within_sigma():
    sigma = 1.5
    task = quad_task(sigma=sigma)
    x = np.zeros(task.dim)
    rng = np.random.default_rng(3)
    noise = np.stack([task.stochastic_gradient(2, x, rng) - task.local_grad(2, x) for _ in range(10_000)])
    assert np.mean(np.sum(noise**2, axis=1)) <= sigma**2 * 1.05


@given(st.integers(0, 1000), st.floats(0.1, 3.0))
@settings(max_examples=50, deadline=None)
def test_clipped_norm_bounded(seed, clip):
    task = quad_task(sigma=5.0, clip=clip)
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=10, size=task.dim)
    g = task.stochastic_gradient(1, x, rng)
    assert np.linalg.norm(g) <= clip * (1 + 1e-12)
    G, _ = task.gradients(np.tile(x, (task.n_clients, 1)), task.draw(rng))
    assert np.all(np.linalg.norm(G, axis=1) <= clip * (1 + 1e-12))


def test_clip_rows_counts():
    g = np.array([[3.0, 4.0], [0.3, 0.4]])
    out, n = clip_rows(g, 1.0)
    assert n == 1
    assert np.allclose(out[0], [0.6, 0.8]) and np.array_equal(out[1], g[1])


def test_equal_targets_give_zero_optimum():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(4, 4)) + 4 * np.eye(4)
    b = rng.normal(size=4)
    task = QuadraticTask(A, np.tile(b, (5, 1)))
    assert task.f_star == pytest.approx(0.0, abs=1e-20)
    assert np.allclose(task.x_star, np.linalg.solve(A, b))


@pytest.mark.parametrize("make", [quad_task, logistic_task])
def test_gradient_matches_finite_differences(make):
    task = make()
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.normal(size=task.dim)
        fd = central_diff(task.loss, x)
        g = task.grad(x)
        assert np.linalg.norm(fd - g) <= 1e-6 * max(1.0, np.linalg.norm(g))


@pytest.mark.parametrize("make", [quad_task, logistic_task])
def test_f_star_is_minimal(make):
    task = make()
    rng = np.random.default_rng(6)
    xs = task.x_star + rng.normal(scale=3.0, size=(1000, task.dim))
    assert all(task.loss(x) >= task.f_star - 1e-12 for x in xs)
    assert np.linalg.norm(task.grad(task.x_star)) < 1e-6


def test_quadratic_smoothness_exact():
    task = quad_task()
    ev = np.linalg.eigvalsh(task.A.T @ task.A)
    assert task.L == ev[-1]
    assert 0.25 - 1e-12 <= ev[0] and ev[-1] <= 1.0 + 1e-12
    rng = np.random.default_rng(7)
    for _ in range(200):
        x, y = rng.normal(size=(2, task.dim))
        for i in (1, 4):
            lhs = np.linalg.norm(task.local_grad(i, x) - task.local_grad(i, y))
            assert lhs <= task.L * np.linalg.norm(x - y) * (1 + 1e-12)


def test_logistic_smoothness_bound():
    task = logistic_task()
    rng = np.random.default_rng(8)
    for _ in range(200):
        x, y = rng.normal(size=(2, task.dim))
        for i in range(1, task.n_clients + 1):
            lhs = np.linalg.norm(task.local_grad(i, x) - task.local_grad(i, y))
            assert lhs <= task.L * np.linalg.norm(x - y) * (1 + 1e-12)


def test_iid_even_split():
    ds = make_dataset(400, 3, 10, seed=0)
    shards = partition_data(ds, PartitionSpec("iid", seed=1), 40)
    assert [len(s) for s in shards] == [10] * 40


def _tv(p, q):
    return 0.5 * np.abs(p / p.sum() - q / q.sum()).sum()


def test_dirichlet_large_alpha_is_near_iid():
    ds = make_dataset(20_000, 2, 10, seed=1)
    overall = np.bincount(ds.labels, minlength=10).astype(float)
    for seed in range(3):
        shards = partition_data(ds, PartitionSpec("dirichlet", alpha=100.0, seed=seed), 10)
        hist = label_histograms(ds, shards)
        assert max(_tv(h.astype(float), overall) for h in hist) < 0.1


def test_dirichlet_small_alpha_is_skewed():
    ds = make_dataset(20_000, 2, 10, seed=1)
    overall = np.bincount(ds.labels, minlength=10).astype(float)
    hist = label_histograms(ds, partition_data(ds, PartitionSpec("dirichlet", alpha=0.1, seed=0), 10))
    assert np.mean([_tv(h.astype(float), overall) for h in hist if h.sum()]) > 0.3


def test_location_main_label_share():
    topo = generate_block_layout(2000, 2000, 10, 2, seed=0)
    ds = make_dataset(20_000, 2, 10, seed=2)
    shards = partition_data(ds, PartitionSpec("location", p_main=0.7, seed=3), 20, topo)
    for b in topo.blocks:
        idx = np.concatenate([shards[m - 1] for m in b.members])
        assert len(idx) >= 200
        share = np.mean(ds.labels[idx] == b.index % 10)
        assert abs(share - 0.7) <= 0.05
        h1, h2 = (np.bincount(ds.labels[shards[m - 1]], minlength=10).astype(float) for m in b.members)
        assert _tv(h1, h2) < 0.1


def test_location_needs_blocks():
    ds = make_dataset(100, 2, 4, seed=0)
    with pytest.raises(ValueError):
        partition_data(ds, PartitionSpec("location"), 4)


def test_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec("dirichlet", alpha=0.0)
    with pytest.raises(ValueError):
        PartitionSpec("location", p_main=1.5)


@given(st.sampled_from(["iid", "dirichlet", "location"]), st.integers(0, 500), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_partition_complete(scheme, seed, per_block):
    topo = generate_block_layout(2000, 2000, 10, per_block, seed=seed)
    n = topo.n_clients
    ds = make_dataset(50 * n, 2, 10, seed=seed)
    shards = partition_data(ds, PartitionSpec(scheme, alpha=0.3, seed=seed), n, topo)
    assert len(shards) == n
    allidx = np.concatenate(shards)
    assert len(allidx) == len(ds)
    assert len(np.unique(allidx)) == len(ds)


def test_dataset_labels_balanced():
    ds = make_dataset(100, 3, 10, seed=0)
    assert isinstance(ds, Dataset) and len(ds) == 100
    assert np.all(np.bincount(ds.labels) == 10)
