"""Learning tasks with known smoothness constants, and data partitioning.

Two tasks are provided:

* ``QuadraticTask``: f_i(x) = 0.5 * ||A x - b_i||^2 with a shared invertible A.
  L = lambda_max(A^T A), the minimiser and f* are closed form, and the
  stochastic gradient adds isotropic Gaussian noise with E||xi||^2 = sigma^2.
* ``LogisticTask``: L2-regularised binary logistic regression on each
  client's shard, mini-batch gradients.

Both clip stochastic gradients to norm ``clip`` so that ||g|| <= G holds for
every draw. Simulators draw the per-slot randomness for all clients at once
via ``draw`` and evaluate it with ``gradients``; ``stochastic_gradient`` is the
single-client form of the same computation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .topology import Topology


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,), ints in 0..n_classes-1
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)


def make_dataset(n_samples: int, dim: int, n_classes: int = 10, seed: int = 0, spread: float = 1.0) -> Dataset:
    """Gaussian class clusters, balanced labels, shuffled."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 2.0, size=(n_classes, dim))
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    features = means[labels] + spread * rng.standard_normal((n_samples, dim))
    return Dataset(features, labels.astype(np.int64), n_classes)


class Scheme(str, enum.Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"
    LOCATION = "location"


@dataclass(frozen=True)
class PartitionSpec:
    scheme: Scheme = Scheme.IID
    alpha: float = 0.3  # dirichlet concentration
    p_main: float = 0.7  # location: share of the block's main label
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.scheme is Scheme.DIRICHLET and not self.alpha > 0:
            raise ValueError("dirichlet alpha must be > 0")
        if self.scheme is Scheme.LOCATION and not 0 <= self.p_main <= 1:
            raise ValueError("p_main must be in [0, 1]")


def _split_even(idx: np.ndarray, n_parts: int) -> list[np.ndarray]:
    return [np.sort(part) for part in np.array_split(idx, n_parts)]


def partition_data(
    dataset: Dataset, spec: PartitionSpec, n_clients: int, topology: Topology | None = None
) -> list[np.ndarray]:
    """Sample indices for each client; element 0 belongs to client 1."""
    rng = np.random.default_rng(spec.seed)
    n = len(dataset)
    if spec.scheme is Scheme.IID:
        return _split_even(rng.permutation(n), n_clients)

    if spec.scheme is Scheme.DIRICHLET:
        # each class is split across clients by a Dir(alpha) draw
        shards: list[list[int]] = [[] for _ in range(n_clients)]
        for c in range(dataset.n_classes):
            members = rng.permutation(np.flatnonzero(dataset.labels == c))
            props = rng.dirichlet(np.full(n_clients, spec.alpha))
            cuts = (np.cumsum(props)[:-1] * len(members)).astype(int)
            for i, part in enumerate(np.split(members, cuts)):
                shards[i].extend(part.tolist())
        return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]

    if topology is None or not topology.blocks:
        raise ValueError("location partitioning needs a topology with block metadata")
    return _partition_by_location(dataset, spec, n_clients, topology, rng)


def _partition_by_location(dataset, spec, n_clients, topology, rng) -> list[np.ndarray]:
    C = dataset.n_classes
    pools = [list(rng.permutation(np.flatnonzero(dataset.labels == c))) for c in range(C)]
    block_of = {}
    for b in topology.blocks:
        for m in b.members:
            block_of[m] = b.index
    sizes = [len(p) for p in np.array_split(np.arange(len(dataset)), n_clients)]
    wanted = []
    for client in range(1, n_clients + 1):
        main = block_of[client] % C
        probs = np.full(C, (1.0 - spec.p_main) / (C - 1)) if C > 1 else np.ones(1)
        probs[main] = spec.p_main if C > 1 else 1.0
        wanted.append(rng.choice(C, size=sizes[client - 1], p=probs))
    # serve requests in a random interleaved order so that pool exhaustion
    # hits every client alike instead of the last ones in index order
    owner = np.concatenate([np.full(len(w), i) for i, w in enumerate(wanted)])
    label = np.concatenate(wanted)
    taken: list[list[int]] = [[] for _ in range(n_clients)]
    for j in rng.permutation(len(owner)):
        c = int(label[j])
        if not pools[c]:
            # pool exhausted: fall back to the fullest remaining label
            c = max(range(C), key=lambda k: len(pools[k]))
        taken[owner[j]].append(pools[c].pop())
    return [np.sort(np.asarray(t, dtype=np.int64)) for t in taken]


def label_histograms(dataset: Dataset, shards: list[np.ndarray]) -> np.ndarray:
    return np.stack([np.bincount(dataset.labels[s], minlength=dataset.n_classes) for s in shards])


def clip_rows(g: np.ndarray, radius: float) -> tuple[np.ndarray, int]:
    """Scale each row to norm <= radius; returns (clipped, number clipped)."""
    if not math.isfinite(radius):
        return g, 0
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    over = norms > radius
    scale = np.where(over, radius / np.where(over, norms, 1.0), 1.0)
    return g * scale, int(over.sum())


class QuadraticTask:
    kind = "quadratic"

    def __init__(self, A: np.ndarray, targets: np.ndarray, sigma: float = 0.0, clip: float = math.inf):
        self.A = np.asarray(A, dtype=float)
        self.targets = np.asarray(targets, dtype=float)  # (N, m)
        if self.A.shape[0] != self.targets.shape[1]:
            raise ValueError("A rows must match target dimension")
        self.sigma = float(sigma)
        self.clip = float(clip)
        self.n_clients, self.dim = self.targets.shape[0], self.A.shape[1]
        self.AtA = self.A.T @ self.A
        self.L = float(np.linalg.eigvalsh(self.AtA)[-1])
        self.b_mean = self.targets.mean(axis=0)
        self.x_star = np.linalg.lstsq(self.A, self.b_mean, rcond=None)[0]
        self.f_star = self.loss(self.x_star)
        self.x0 = np.zeros(self.dim)

    @classmethod
    def from_shards(
        cls,
        dataset: Dataset,
        shards: list[np.ndarray],
        sigma: float = 0.0,
        clip: float = math.inf,
        sv_range: tuple[float, float] = (0.5, 1.0),
        seed: int = 0,
    ) -> "QuadraticTask":
        """b_i is the mean feature vector of client i's shard; A has singular values in sv_range."""
        rng = np.random.default_rng(seed)
        d = dataset.features.shape[1]
        q1, _ = np.linalg.qr(rng.standard_normal((d, d)))
        q2, _ = np.linalg.qr(rng.standard_normal((d, d)))
        A = q1 @ np.diag(np.linspace(sv_range[1], sv_range[0], d)) @ q2.T
        targets = np.stack([dataset.features[s].mean(axis=0) if len(s) else np.zeros(d) for s in shards])
        return cls(A, targets, sigma, clip)

    def local_loss(self, i: int, x: np.ndarray) -> float:
        r = self.A @ x - self.targets[i - 1]
        return 0.5 * float(r @ r)

    def local_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.A.T @ (self.A @ x - self.targets[i - 1])

    def loss(self, x: np.ndarray) -> float:
        r = self.A @ x - self.targets  # (N, m)
        return 0.5 * float(np.einsum("ij,ij->", r, r)) / self.n_clients

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.A.T @ (self.A @ x - self.b_mean)

    def loss_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self.loss(x), self.grad(x)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((self.n_clients, self.dim)) * (self.sigma / math.sqrt(self.dim))

    def gradients(self, X: np.ndarray, draw: np.ndarray) -> tuple[np.ndarray, int]:
        """Clipped stochastic gradients for all clients; row i-1 is client i."""
        g = (X @ self.A.T - self.targets) @ self.A + draw
        return clip_rows(g, self.clip)

    def stochastic_gradient(self, i: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal(self.dim) * (self.sigma / math.sqrt(self.dim))
        g, _ = clip_rows((self.local_grad(i, x) + noise)[None, :], self.clip)
        return g[0]


class LogisticTask:
    kind = "logistic"

    def __init__(
        self,
        shards_x: list[np.ndarray],
        shards_y: list[np.ndarray],
        reg: float = 1e-2,
        batch: int = 8,
        clip: float = math.inf,
    ):
        self.xs = [np.asarray(x, dtype=float) for x in shards_x]
        self.ys = [np.asarray(y, dtype=float) for y in shards_y]  # labels in {-1, +1}
        if any(len(y) == 0 for y in self.ys):
            raise ValueError("every client needs at least one sample for the logistic task")
        self.reg = float(reg)
        self.batch = int(batch)
        self.clip = float(clip)
        self.n_clients = len(self.xs)
        self.dim = self.xs[0].shape[1]
        self.sizes = np.array([len(y) for y in self.ys])
        self.L = max(0.25 * float(np.linalg.eigvalsh(x.T @ x / len(x))[-1]) for x in self.xs) + self.reg
        self.x0 = np.zeros(self.dim)
        res = optimize.minimize(self.loss, self.x0, jac=self.grad, method="L-BFGS-B", options={"gtol": 1e-12})
        self.x_star = res.x
        self.f_star = float(res.fun)
        self.sigma = float("nan")  # mini-batch noise has no closed form here

    @classmethod
    def from_shards(cls, dataset: Dataset, shards: list[np.ndarray], **kw) -> "LogisticTask":
        ys = [np.where(dataset.labels[s] % 2 == 0, 1.0, -1.0) for s in shards]
        return cls([dataset.features[s] for s in shards], ys, **kw)

    def _client_grad(self, i0: int, x: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        X, y = self.xs[i0], self.ys[i0]
        if rows is not None:
            X, y = X[rows], y[rows]
        margin = y * (X @ x)
        w = -y * 0.5 * (1.0 - np.tanh(0.5 * margin))  # -y * sigmoid(-margin)
        return X.T @ w / len(y) + self.reg * x

    def local_loss(self, i: int, x: np.ndarray) -> float:
        X, y = self.xs[i - 1], self.ys[i - 1]
        return float(np.mean(np.logaddexp(0.0, -y * (X @ x)))) + 0.5 * self.reg * float(x @ x)

    def local_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        return self._client_grad(i - 1, x)

    def loss(self, x: np.ndarray) -> float:
        return float(np.mean([self.local_loss(i, x) for i in range(1, self.n_clients + 1)]))

    def grad(self, x: np.ndarray) -> np.ndarray:
        return np.mean([self._client_grad(i, x) for i in range(self.n_clients)], axis=0)

    def loss_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self.loss(x), self.grad(x)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        u = rng.random((self.n_clients, self.batch))
        return np.floor(u * self.sizes[:, None]).astype(np.int64)

    def gradients(self, X: np.ndarray, draw: np.ndarray) -> tuple[np.ndarray, int]:
        g = np.stack([self._client_grad(i, X[i], draw[i]) for i in range(self.n_clients)])
        return clip_rows(g, self.clip)

    def stochastic_gradient(self, i: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        rows = rng.integers(0, self.sizes[i - 1], size=self.batch)
        g, _ = clip_rows(self._client_grad(i - 1, x, rows)[None, :], self.clip)
        return g[0]
