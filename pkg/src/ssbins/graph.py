"""Topologies the process runs on.

Complete graphs and rings are implicit (neighbors computed by formula) so that
million-node runs need no adjacency storage. Random-regular and custom graphs
are stored in CSR form: the neighbors of ``v`` are
``targets[offsets[v]:offsets[v + 1]]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from ssbins.streams import RandomStream

COMPLETE, RING, ADJACENCY = 0, 1, 2

# success odds per attempt are about exp(-(d*d - 1) / 4), so large d is impractical
MAX_PAIRING_ATTEMPTS = 100_000

_EMPTY = np.zeros(0, dtype=np.int64)


class TopologyError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    kind: str
    degree: int | None = None
    offsets: np.ndarray = field(default=_EMPTY, repr=False)
    targets: np.ndarray = field(default=_EMPTY, repr=False)
    connected: bool = True

    @property
    def code(self) -> int:
        return {"complete": COMPLETE, "ring": RING}.get(self.kind, ADJACENCY)

    @property
    def label(self) -> str:
        if self.kind == "random_regular":
            return f"regular:{self.degree}"
        return self.kind

    def deg(self, v: int) -> int:
        if self.kind == "complete":
            return self.n - 1
        if self.kind == "ring":
            return 2
        return int(self.offsets[v + 1] - self.offsets[v])

    def neighbors(self, v: int) -> np.ndarray:
        if not 0 <= v < self.n:
            raise IndexError(f"node {v} out of range for n={self.n}")
        if self.kind == "complete":
            return np.delete(np.arange(self.n), v)
        if self.kind == "ring":
            return np.array(sorted({(v - 1) % self.n, (v + 1) % self.n}))
        return self.targets[self.offsets[v]:self.offsets[v + 1]].copy()

    def edges(self) -> list[tuple[int, int]]:
        """Sorted list of undirected edges ``(u, v)`` with ``u < v``."""
        out = []
        for u in range(self.n):
            out.extend((u, int(w)) for w in self.neighbors(u) if u < w)
        return out

    @property
    def num_edges(self) -> int:
        if self.kind == "complete":
            return self.n * (self.n - 1) // 2
        if self.kind == "ring":
            return self.n
        return len(self.targets) // 2


def make_complete(n: int) -> Graph:
    if n < 2:
        raise TopologyError(f"complete graph needs n >= 2, got {n}")
    return Graph(n=n, kind="complete", degree=n - 1)


def make_ring(n: int) -> Graph:
    if n < 3:
        raise TopologyError(f"ring needs n >= 3, got {n}")
    return Graph(n=n, kind="ring", degree=2)


def _from_edges(n: int, edges: np.ndarray, kind: str, degree: int | None = None) -> Graph:
    u, v = edges[:, 0], edges[:, 1]
    src = np.concatenate([u, v])
    dst = np.concatenate([v, u])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    counts = np.bincount(src, minlength=n)
    if (counts == 0).any():
        isolated = int(np.flatnonzero(counts == 0)[0])
        raise TopologyError(f"node {isolated} has no neighbors")
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    adj = csr_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=False)
    return Graph(
        n=n,
        kind=kind,
        degree=degree,
        offsets=offsets,
        targets=dst.astype(np.int64),
        connected=n_comp == 1,
    )


def make_random_regular(n: int, d: int, seed: int) -> Graph:
    """Simple ``d``-regular graph from the pairing model, restarting on any defect."""
    if d < 1 or d >= n:
        raise TopologyError(f"random regular graph needs 1 <= d < n, got n={n}, d={d}")
    if (n * d) % 2:
        raise TopologyError(f"n*d must be even, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    stubs = np.repeat(np.arange(n, dtype=np.int64), d)
    for _ in range(MAX_PAIRING_ATTEMPTS):
        pairs = rng.permutation(stubs).reshape(-1, 2)
        if (pairs[:, 0] == pairs[:, 1]).any():
            continue
        pairs.sort(axis=1)
        codes = np.sort(pairs[:, 0] * n + pairs[:, 1])
        if (codes[1:] == codes[:-1]).any():
            continue
        return _from_edges(n, pairs, "random_regular", degree=d)
    raise GenerationError(
        f"no simple {d}-regular graph on {n} nodes after {MAX_PAIRING_ATTEMPTS} attempts"
    )


def load_edge_list(path: str | Path, n: int | None = None) -> Graph:
    """Read a whitespace-separated ``u v`` edge list (0-indexed, ``#`` comments).

    ``n`` defaults to one more than the largest node index mentioned.
    """
    seen: dict[tuple[int, int], int] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise TopologyError(f"{path}:{lineno}: expected 'u v', got {raw.strip()!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise TopologyError(f"{path}:{lineno}: non-integer node index") from None
            if u < 0 or v < 0:
                raise TopologyError(f"{path}:{lineno}: negative node index")
            if u == v:
                raise TopologyError(f"{path}:{lineno}: self-loop on node {u}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise TopologyError(
                    f"{path}:{lineno}: duplicate edge {key} (first on line {seen[key]})"
                )
            seen[key] = lineno
    if not seen:
        raise TopologyError(f"{path}: no edges")
    edges = np.array(list(seen), dtype=np.int64)
    top = int(edges.max()) + 1
    if n is None:
        n = top
    elif n < top:
        raise TopologyError(f"{path}: node index {top - 1} out of range for n={n}")
    if n < 2:
        raise TopologyError("graph needs at least 2 nodes")
    return _from_edges(n, edges, "custom")


@njit(cache=True)
def pick_neighbor(code, n, offsets, targets, v, u):
    """Map one uniform double ``u`` to a uniform neighbor of ``v``."""
    if code == COMPLETE:
        j = min(int(u * (n - 1)), n - 2)
        return j + 1 if j >= v else j
    if code == RING:
        return (v + 1) % n if u >= 0.5 else (v - 1) % n
    lo = offsets[v]
    deg = offsets[v + 1] - lo
    return targets[lo + min(int(u * deg), deg - 1)]


def sample_neighbor(g: Graph, v: int, r: RandomStream) -> int:
    """Uniform neighbor of ``v``; consumes exactly one draw from ``r``."""
    if not 0 <= v < g.n:
        raise IndexError(f"node {v} out of range for n={g.n}")
    return int(pick_neighbor(g.code, g.n, g.offsets, g.targets, v, r.draw()))
