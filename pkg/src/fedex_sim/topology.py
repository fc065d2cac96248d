"""Device geometry: server/client positions, distance matrix, block layouts.

Device 0 is always the server; devices 1..N are clients. Coordinates are
ground-plane meters. Flight altitude is a transporter property and does not
enter the distance matrix.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Block:
    """Axis-aligned rectangle [x0, x1] x [y0, y1] with its member clients."""

    index: int
    x0: float
    y0: float
    x1: float
    y1: float
    members: tuple[int, ...] = ()

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def strictly_contains(self, x: float, y: float) -> bool:
        return self.x0 < x < self.x1 and self.y0 < y < self.y1


@dataclass(frozen=True)
class Topology:
    positions: np.ndarray  # (N+1, 2), row 0 is the server
    distance: np.ndarray  # (N+1, N+1)
    blocks: tuple[Block, ...] = ()
    area: tuple[float, float] | None = None
    _dist_rows: tuple = field(default=(), repr=False, compare=False)

    @property
    def n_clients(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def clients(self) -> range:
        return range(1, self.n_clients + 1)

    def block_of(self, client: int) -> int | None:
        for block in self.blocks:
            if client in block.members:
                return block.index
        return None

    def dist_rows(self) -> tuple:
        """Distance matrix as nested tuples, for tight pure-Python loops."""
        return self._dist_rows


def _euclidean_matrix(pos: np.ndarray) -> np.ndarray:
    dx = pos[:, None, 0] - pos[None, :, 0]
    dy = pos[:, None, 1] - pos[None, :, 1]
    # hypot(a, b) == hypot(-a, -b), so the result is exactly symmetric
    return np.hypot(dx, dy)


def build_topology(
    positions: Sequence[Sequence[float]] | np.ndarray,
    blocks: Sequence[Block] = (),
    area: tuple[float, float] | None = None,
) -> Topology:
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ValueError(f"positions must be an (n, 2) array, got shape {pos.shape}")
    if pos.shape[0] < 2:
        raise ValueError("need at least a server and one client")
    if not np.all(np.isfinite(pos)):
        bad = int(np.argwhere(~np.isfinite(pos))[0, 0])
        raise ValueError(f"non-finite coordinate for device {bad}")
    pos = pos.copy()
    pos.setflags(write=False)
    dist = _euclidean_matrix(pos)
    dist.setflags(write=False)
    rows = tuple(tuple(float(v) for v in row) for row in dist)
    return Topology(pos, dist, tuple(blocks), area, rows)


def _grid_shape(n_blocks: int) -> tuple[int, int]:
    """Factor n_blocks into (cols, rows), rows <= cols, as square as possible."""
    rows = int(math.isqrt(n_blocks))
    while n_blocks % rows:
        rows -= 1
    return n_blocks // rows, rows


def generate_block_layout(
    area_w: float,
    area_h: float,
    n_blocks: int,
    clients_per_block: int,
    seed: int,
    grid: tuple[int, int] | None = None,
    server: tuple[float, float] | None = None,
) -> Topology:
    """Tile the area into equal blocks and scatter clients uniformly in each.

    The default grid for (2000, 2000, 10) is 5 columns by 2 rows, i.e.
    400 m x 1000 m blocks. ``grid=(cols, rows)`` forces a particular tiling.
    The server sits at the area center unless ``server`` is given.
    """
    if not (area_w > 0 and area_h > 0 and math.isfinite(area_w) and math.isfinite(area_h)):
        raise ValueError(f"area must be positive and finite, got {area_w} x {area_h}")
    if n_blocks < 1 or clients_per_block < 1:
        raise ValueError("n_blocks and clients_per_block must be >= 1")
    cols, rows = grid if grid is not None else _grid_shape(n_blocks)
    if cols < 1 or rows < 1 or cols * rows != n_blocks:
        raise ValueError(f"grid {cols}x{rows} does not tile {n_blocks} blocks")

    rng = np.random.default_rng(seed)
    bw, bh = area_w / cols, area_h / rows
    sx, sy = server if server is not None else (area_w / 2.0, area_h / 2.0)
    positions = [(float(sx), float(sy))]
    blocks = []
    next_id = 1
    for r in range(rows):
        for c in range(cols):
            x0, y0 = c * bw, r * bh
            x1, y1 = x0 + bw, y0 + bh
            members = []
            for _ in range(clients_per_block):
                # open interval: resample the measure-zero boundary draws
                while True:
                    u, v = rng.random(2)
                    x, y = x0 + u * bw, y0 + v * bh
                    if x0 < x < x1 and y0 < y < y1:
                        break
                positions.append((float(x), float(y)))
                members.append(next_id)
                next_id += 1
            blocks.append(Block(len(blocks), x0, y0, x1, y1, tuple(members)))
    return build_topology(positions, blocks, (float(area_w), float(area_h)))


def save_topology(topology: Topology, path: str | Path) -> None:
    block_of = {}
    for block in topology.blocks:
        for m in block.members:
            block_of[m] = block.index
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device_id", "x", "y", "block_id"])
        for i, (x, y) in enumerate(topology.positions):
            bid = block_of.get(i)
            w.writerow([i, repr(float(x)), repr(float(y)), "" if bid is None else bid])
        if topology.blocks:
            # block rectangles follow the device table after a blank line
            w.writerow([])
            w.writerow(["block_id", "x0", "y0", "x1", "y1"])
            for b in topology.blocks:
                w.writerow([b.index, repr(b.x0), repr(b.y0), repr(b.x1), repr(b.y1)])


def load_topology(path: str | Path) -> Topology:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["device_id", "x", "y", "block_id"]:
        raise ValueError(f"{path}: unexpected topology header {rows[:1]}")
    positions, members = [], {}
    i = 1
    while i < len(rows) and rows[i]:
        dev, x, y, bid = rows[i]
        if int(dev) != len(positions):
            raise ValueError(f"{path}:{i + 1}: device ids must be 0..N in order")
        positions.append((float(x), float(y)))
        if bid != "":
            members.setdefault(int(bid), []).append(int(dev))
        i += 1
    blocks = []
    if i + 1 < len(rows) and rows[i + 1] == ["block_id", "x0", "y0", "x1", "y1"]:
        for row in rows[i + 2:]:
            if not row:
                continue
            b = int(row[0])
            x0, y0, x1, y1 = map(float, row[1:])
            blocks.append(Block(b, x0, y0, x1, y1, tuple(members.get(b, ()))))
    area = None
    if blocks:
        area = (max(b.x1 for b in blocks), max(b.y1 for b in blocks))
    return build_topology(positions, blocks, area)
