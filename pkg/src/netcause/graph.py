"""Undirected graphs stored as edge lists, GCN coefficients and 3-way partitioning."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SPLITS = ("train", "valid", "test")


class GraphError(ValueError):
    pass


class IndexOutOfRange(GraphError):
    pass


class SelfLoop(GraphError):
    pass


class IsolatedEndpoint(GraphError):
    pass


class IsolatedUnit(GraphError):
    pass


class TooFewUnits(GraphError):
    pass


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph; ``edges`` holds unique pairs with ``i < j``."""

    n_units: int
    edges: np.ndarray
    degree: np.ndarray
    _adj: sp.csr_matrix = field(repr=False, compare=False)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def neighbors(self, i: int) -> np.ndarray:
        row = self._adj
        return row.indices[row.indptr[i]:row.indptr[i + 1]]

    def adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency in CSR form (a copy)."""
        return self._adj.copy()

    def neighbor_mean(self, values: np.ndarray) -> np.ndarray:
        """Row-wise mean of ``values`` over each unit's neighbors."""
        if np.any(self.degree == 0):
            raise IsolatedUnit(f"{int(np.sum(self.degree == 0))} units have no neighbors")
        values = np.asarray(values, dtype=np.float64)
        summed = self._adj @ values
        if values.ndim == 1:
            return summed / self.degree
        return summed / self.degree[:, None]

    def induced_subgraph(self, units) -> "Graph":
        """Graph on ``units`` (relabelled 0..len-1 in the given order); cut edges dropped."""
        units = np.asarray(units, dtype=np.int64)
        remap = np.full(self.n_units, -1, dtype=np.int64)
        remap[units] = np.arange(units.size)
        e = remap[self.edges]
        keep = (e[:, 0] >= 0) & (e[:, 1] >= 0)
        return build_graph(units.size, e[keep])


def build_graph(n_units: int, edges) -> Graph:
    n_units = int(n_units)
    if n_units < 0:
        raise GraphError("n_units must be non-negative")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size:
        if e.min() < 0 or e.max() >= n_units:
            raise IndexOutOfRange(f"edge endpoint outside [0, {n_units})")
        if np.any(e[:, 0] == e[:, 1]):
            bad = e[e[:, 0] == e[:, 1]][0]
            raise SelfLoop(f"self-loop on unit {int(bad[0])}")
    e = np.sort(e, axis=1)
    e = np.unique(e, axis=0) if e.size else np.zeros((0, 2), dtype=np.int64)
    degree = np.bincount(e.ravel(), minlength=n_units).astype(np.int64)
    data = np.ones(2 * e.shape[0])
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.csr_matrix((data, (rows, cols)), shape=(n_units, n_units))
    adj.sort_indices()
    e.setflags(write=False)
    degree.setflags(write=False)
    return Graph(n_units, e, degree, adj)


def gcn_coefficients(g: Graph) -> np.ndarray:
    """Per-edge weight 1/sqrt(d_i d_j), aligned with ``g.edges``."""
    if g.n_edges == 0:
        return np.zeros(0)
    d = g.degree[g.edges]
    assert np.all(d > 0), "edge endpoint with zero degree"
    if np.any(d == 0):
        raise IsolatedEndpoint("edge endpoint with zero degree")
    return 1.0 / np.sqrt(d[:, 0].astype(np.float64) * d[:, 1])


def gcn_matrix(g: Graph, isolated: str = "error") -> sp.csr_matrix:
    """Sparse symmetric matrix with entries c_ij on edges (no self-loops).

    With ``isolated="zero"`` degree-0 units get an empty row instead of raising.
    """
    if isolated not in ("error", "zero"):
        raise ValueError("isolated must be 'error' or 'zero'")
    if isolated == "error" and np.any(g.degree == 0):
        raise IsolatedUnit(f"{int(np.sum(g.degree == 0))} units have no neighbors")
    c = gcn_coefficients(g)
    rows = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
    cols = np.concatenate([g.edges[:, 1], g.edges[:, 0]])
    m = sp.csr_matrix((np.concatenate([c, c]), (rows, cols)), shape=(g.n_units, g.n_units))
    m.sort_indices()
    return m


# ---------------------------------------------------------------------------
# edge-list files


def read_edge_list(path, n_units: int | None = None) -> Graph:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected 'i j', got {line!r}")
            pairs.append((int(parts[0]), int(parts[1])))
    if n_units is None:
        n_units = 1 + max((max(p) for p in pairs), default=-1)
    return build_graph(n_units, pairs)


def write_edge_list(g: Graph, path) -> None:
    lines = [f"# n_units {g.n_units}"]
    lines += [f"{i} {j}" for i, j in g.edges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class Partition:
    assignment: np.ndarray  # values in {0, 1, 2} indexing SPLITS
    cut_edges: int

    def units(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.assignment == SPLITS.index(split))

    def sizes(self) -> tuple[int, int, int]:
        return tuple(int(np.sum(self.assignment == p)) for p in range(3))


def target_sizes(n: int, fractions) -> np.ndarray:
    f = np.asarray(fractions, dtype=np.float64)
    raw = n * f
    sizes = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - sizes), kind="stable")
    for p in order[: n - sizes.sum()]:
        sizes[p] += 1
    for p in range(3):
        if sizes[p] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[p] += 1
    return sizes


def size_bounds(target: int, tol: float = 0.2) -> tuple[int, int]:
    lo = max(1, math.ceil((1 - tol) * target - 1e-9))
    hi = max(lo, math.floor((1 + tol) * target + 1e-9))
    return lo, hi


def cut_size(g: Graph, assignment: np.ndarray) -> int:
    if g.n_edges == 0:
        return 0
    a = assignment[g.edges]
    return int(np.sum(a[:, 0] != a[:, 1]))


def _bfs_dist(g: Graph, root: int) -> np.ndarray:
    dist = np.full(g.n_units, g.n_units + 1, dtype=np.int64)
    dist[root] = 0
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in g.neighbors(u):
            if dist[v] > dist[u] + 1:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _spread_roots(g: Graph, rng: np.random.Generator) -> list[int]:
    tiebreak = rng.permutation(g.n_units)
    r0 = int(rng.integers(g.n_units))
    d0 = _bfs_dist(g, r0)
    d0[r0] = -1
    r1 = int(tiebreak[np.argmax(d0[tiebreak])])
    d1 = _bfs_dist(g, r1)
    score = np.minimum(np.where(d0 < 0, 0, d0), d1)
    score[[r0, r1]] = -1
    r2 = int(tiebreak[np.argmax(score[tiebreak])])
    return [r0, r1, r2]


def _grow_regions(g: Graph, targets: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = g.n_units
    adj = g._adj
    label = np.full(n, -1, dtype=np.int64)
    conn = np.zeros((3, n))
    priority = rng.random(n) * 1e-3  # tiny random tie-break
    counts = np.zeros(3, dtype=np.int64)

    def assign(v, p):
        label[v] = p
        counts[p] += 1
        nb = g.neighbors(v)
        conn[p, nb] += 1

    # largest target grows from the first root
    order = np.argsort(-targets, kind="stable")
    for p, root in zip(order, _spread_roots(g, rng)):
        assign(root, p)
    del adj
    for _ in range(n - 3):
        open_parts = np.flatnonzero(counts < targets)
        deficit = (targets[open_parts] - counts[open_parts]) / targets[open_parts]
        p = int(open_parts[np.argmax(deficit)])
        score = np.where(label < 0, conn[p] - 0.5 * (conn.sum(axis=0) - conn[p]) + priority, -np.inf)
        touching = (label < 0) & (conn[p] > 0)
        if touching.any():
            score = np.where(touching, score, -np.inf)
        else:
            score = np.where(label < 0, priority, -np.inf)
        assign(int(np.argmax(score)), p)
    return label


def _refine(g: Graph, label: np.ndarray, bounds, max_rounds: int = 10000, top_k: int = 24) -> np.ndarray:
    n = g.n_units
    adj = g._adj
    label = label.copy()
    ext = np.asarray(adj @ np.eye(3)[label])  # neighbors per part, n x 3
    counts = np.bincount(label, minlength=3)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    rows = np.arange(n)

    def move(v, q):
        p = label[v]
        nb = g.neighbors(v)
        ext[nb, p] -= 1
        ext[nb, q] += 1
        label[v] = q
        counts[p] -= 1
        counts[q] += 1

    for _ in range(max_rounds):
        own = ext[rows, label]
        gain = ext - own[:, None]
        gain[rows, label] = -np.inf
        # single moves that respect balance
        movable = (counts[label] - 1 >= lo[label])[:, None] & (counts + 1 <= hi)[None, :]
        g1 = np.where(movable, gain, -np.inf)
        best = np.unravel_index(np.argmax(g1), g1.shape)
        if g1[best] > 0:
            move(int(best[0]), int(best[1]))
            continue
        # pairwise swaps between two parts keep sizes fixed
        best_swap, best_gain = None, 0.0
        for p in range(3):
            for q in range(p + 1, 3):
                up = np.flatnonzero(label == p)
                uq = np.flatnonzero(label == q)
                if up.size == 0 or uq.size == 0:
                    continue
                cp = up[np.argsort(-gain[up, q], kind="stable")[:top_k]]
                cq = uq[np.argsort(-gain[uq, p], kind="stable")[:top_k]]
                link = np.asarray(adj[cp][:, cq].todense())
                total = gain[cp, q][:, None] + gain[cq, p][None, :] - 2 * link
                i, j = np.unravel_index(np.argmax(total), total.shape)
                if total[i, j] > best_gain + 1e-12:
                    best_gain, best_swap = total[i, j], (int(cp[i]), q, int(cq[j]), p)
        if best_swap is None:
            break
        u, qu, v, pv = best_swap
        move(u, qu)
        move(v, pv)
    return label


def partition_three_way(g: Graph, fractions=(0.6, 0.2, 0.2), seed: int = 0,
                        restarts: int = 4, tol: float = 0.2) -> Partition:
    """Split units into train/valid/test with BFS region growing plus refinement.

    Each restart grows three regions from spread-out roots and then applies
    balance-preserving single moves and pairwise swaps that reduce the cut.
    The restart with the smallest cut wins.
    """
    if g.n_units < 3:
        raise TooFewUnits(f"need at least 3 units, got {g.n_units}")
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f <= 0) or abs(f.sum() - 1) > 1e-9:
        raise ValueError(f"fractions must be 3 positive numbers summing to 1, got {fractions}")
    targets = target_sizes(g.n_units, f)
    bounds = [size_bounds(int(t), tol) for t in targets]
    best = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(child)
        label = _refine(g, _grow_regions(g, targets, rng), bounds)
        cut = cut_size(g, label)
        if best is None or cut < best[1]:
            best = (label, cut)
    label, cut = best
    label.setflags(write=False)
    return Partition(label, cut)
