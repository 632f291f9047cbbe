"""Directed sensor graph: binary adjacency, hop distances, k-hop reachability masks.

The adjacency connects consecutively existing sensors and always carries
self-loops. Hop distances are breadth-first shortest path counts on the
directed adjacency (self-loops contribute nothing to path length), and
the k-hop masks mark node pairs within k hops. The nested family of
masks for k = 1..L is what the dynamic graph block prunes against.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "RoadNetwork",
    "HopDistances",
    "StructureInfoGroup",
    "build_asp",
    "hop_distances",
    "structure_info",
    "structure_group",
    "load_edges",
]


@dataclass
class RoadNetwork:
    """Directed road network over ``num_nodes`` sensors."""

    num_nodes: int
    edges: list
    a_sp: np.ndarray  # (N, N) binary with unit diagonal

    def __post_init__(self):
        assert self.a_sp.shape == (self.num_nodes, self.num_nodes)


@dataclass
class HopDistances:
    """All-pairs shortest hop counts; unreachable pairs hold +inf."""

    d: np.ndarray  # (N, N) float64, non-negative integers or inf


@dataclass
class StructureInfoGroup:
    """Nested reachability masks S^1 <= S^2 <= ... <= S^L."""

    L: int
    masks: list = field(default_factory=list)  # L arrays of (N, N) float64 in {0, 1}

    def stacked(self):
        return np.stack(self.masks, axis=0)


def build_asp(edges, num_nodes):
    """Binary adjacency from a directed edge list, with self-loops added.

    Duplicate edges are deduplicated silently; ids outside [0, N) raise.
    """
    n = int(num_nodes)
    if n <= 0:
        raise DataError(f"build_asp: num_nodes must be positive, got {num_nodes}")
    a = np.zeros((n, n), dtype=np.float64)
    seen = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n):
            raise DataError(f"build_asp: edge ({i}, {j}) outside node range [0, {n})")
        a[i, j] = 1.0
        seen.add((i, j))
    np.fill_diagonal(a, 1.0)
    return RoadNetwork(num_nodes=n, edges=sorted(seen), a_sp=a)


def hop_distances(net, symmetrize=False):
    """Per-source BFS hop counts over the directed adjacency.

    Self-loops are skipped when expanding, so d[i][i] is always 0. With
    ``symmetrize`` every edge is traversable in both directions.
    """
    n = net.num_nodes
    adj = net.a_sp.copy()
    if symmetrize:
        adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 0.0)
    neighbors = [np.flatnonzero(adj[i]) for i in range(n)]

    d = np.full((n, n), np.inf)
    for src in range(n):
        d[src, src] = 0.0
        frontier = [src]
        depth = 0
        while frontier:
            depth += 1
            nxt = []
            for u in frontier:
                for v in neighbors[u]:
                    if d[src, v] == np.inf:
                        d[src, v] = depth
                        nxt.append(v)
            frontier = nxt
    return HopDistances(d=d)


def structure_info(dist, k):
    """Binary mask of node pairs whose hop distance is at most k (k >= 1)."""
    if k < 1:
        raise DataError(f"structure_info: k must be >= 1, got {k}")
    return (dist.d <= k).astype(np.float64)


def structure_group(dist, L):
    """The nested mask family for k = 1..L."""
    if L < 1:
        raise DataError(f"structure_group: L must be >= 1, got {L}")
    return StructureInfoGroup(L=int(L), masks=[structure_info(dist, k) for k in range(1, L + 1)])


def load_edges(path):
    """Read a directed edge list CSV with header ``from,to``.

    Extra columns (distances, costs) are ignored. Returns 0-based id pairs.
    """
    edges = []
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DataError(f"load_edges: cannot open {path}: {e}") from None
    with fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or not row[0].strip():
                continue
            first = row[0].strip().lower()
            if lineno == 1 and first in ("from", "source", "src"):
                continue
            if len(row) < 2:
                raise DataError(f"load_edges: line {lineno}: expected at least 2 columns")
            try:
                edges.append((int(float(row[0])), int(float(row[1]))))
            except ValueError:
                raise DataError(f"load_edges: line {lineno}: non-integer node id") from None
    return edges
