"""Skeleton topologies and the three-subset spatial partition."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import DTYPE

log = logging.getLogger(__name__)

DEGREE_EPS = 1e-6

# NTU RGB+D (Kinect v2), 1-based joint ids as distributed with the dataset.
_NTU25_BONES_1BASED = [
    (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
    (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14),
    (16, 15), (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8),
    (24, 25), (25, 12),
]
NTU25_CENTER = 20  # joint 21, spine at shoulder level

# OpenPose COCO-18 layout used by the Kinetics skeleton release.
OPENPOSE18_BONES = [
    (4, 3), (3, 2), (7, 6), (6, 5), (13, 12), (12, 11), (10, 9), (9, 8),
    (11, 5), (8, 2), (5, 1), (2, 1), (0, 1), (15, 0), (14, 0), (17, 15),
    (16, 14),
]
OPENPOSE18_CENTER = 1  # neck


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonGraph:
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    center: int

    def __post_init__(self):
        if self.num_joints < 1:
            raise GraphError("num_joints must be positive")
        if not 0 <= self.center < self.num_joints:
            raise GraphError(f"center joint {self.center} out of range [0, {self.num_joints})")
        for i, j in self.edges:
            if not (0 <= i < self.num_joints and 0 <= j < self.num_joints):
                raise GraphError(f"edge ({i}, {j}) out of range [0, {self.num_joints})")
            if i == j:
                raise GraphError(f"self-loop ({i}, {j}) is not a bone")

    @property
    def V(self) -> int:
        return self.num_joints

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.num_joints)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [sorted(set(n)) for n in nbrs]

    def hops(self) -> np.ndarray:
        """BFS hop distance from the center joint; -1 marks unreachable joints."""
        dist = np.full(self.num_joints, -1, dtype=np.int64)
        dist[self.center] = 0
        nbrs = self.neighbors()
        queue = deque([self.center])
        while queue:
            u = queue.popleft()
            for w in nbrs[u]:
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist

    def parents(self) -> list[int | None]:
        """Parent of each joint on the BFS tree toward the center (lowest index wins ties)."""
        dist = self.hops()
        nbrs = self.neighbors()
        out: list[int | None] = []
        for i in range(self.num_joints):
            if i == self.center or dist[i] < 0:
                out.append(None)
                continue
            out.append(min(w for w in nbrs[i] if dist[w] == dist[i] - 1))
        return out

    def to_json(self) -> dict:
        return {"V": self.num_joints, "edges": [list(e) for e in self.edges], "center": self.center}


def custom_graph(V: int, edges, center: int) -> SkeletonGraph:
    norm = []
    seen = set()
    for e in edges:
        if len(e) != 2:
            raise GraphError(f"edge {e!r} must have two endpoints")
        i, j = int(e[0]), int(e[1])
        key = (min(i, j), max(i, j))
        if key not in seen:
            seen.add(key)
            norm.append((i, j))
    g = SkeletonGraph(int(V), tuple(norm), int(center))
    if np.any(g.hops() < 0):
        log.warning("skeleton graph is not connected; unreachable joints get no neighbour subsets")
    return g


def build_skeleton(preset) -> SkeletonGraph:
    """Return a named topology (``"ntu25"``, ``"openpose18"``) or a custom one.

    ``preset`` may also be a mapping ``{"V": int, "edges": [[i, j], ...], "center": int}``.
    """
    if isinstance(preset, SkeletonGraph):
        return preset
    if isinstance(preset, dict):
        try:
            return custom_graph(preset["V"], preset["edges"], preset["center"])
        except KeyError as exc:
            raise GraphError(f"custom skeleton is missing key {exc}") from None
    if preset == "ntu25":
        return custom_graph(25, [(i - 1, j - 1) for i, j in _NTU25_BONES_1BASED], NTU25_CENTER)
    if preset == "openpose18":
        return custom_graph(18, OPENPOSE18_BONES, OPENPOSE18_CENTER)
    raise GraphError(f"unknown skeleton preset {preset!r}")


def load_skeleton(path: str | Path) -> SkeletonGraph:
    with open(path) as fh:
        return build_skeleton(json.load(fh))


def partition(graph: SkeletonGraph, hops: np.ndarray | None = None) -> list[np.ndarray]:
    """Binary root / closer / farther subset matrices, each V x V.

    ``A[1][i, j] == 1`` when bone (i, j) leads from i toward the center.
    """
    if hops is None:
        hops = graph.hops()
    V = graph.num_joints
    root = np.eye(V, dtype=DTYPE)
    closer = np.zeros((V, V), dtype=DTYPE)
    farther = np.zeros((V, V), dtype=DTYPE)
    for a, b in graph.edges:
        for i, j in ((a, b), (b, a)):
            if hops[j] < hops[i]:
                closer[i, j] = 1
            else:
                farther[i, j] = 1
    return [root, closer, farther]


def normalize(A: np.ndarray, eps: float = DEGREE_EPS) -> np.ndarray:
    """Degree normalisation ``A[i, j] / sqrt((r_i + eps)(c_j + eps))``.

    ``r`` are row sums (out-degrees) and ``c`` column sums (in-degrees); for a
    symmetric subset this is the usual ``D^-1/2 A D^-1/2``. Using the in-degree
    on the right keeps a node without outgoing links in this subset (the center
    joint in the "closer" subset) from blowing up its column through ``eps``.
    """
    A = np.asarray(A, dtype=np.float64)
    r = A.sum(axis=1)
    c = A.sum(axis=0)

    def inv_sqrt(d):
        out = np.zeros_like(d)
        nz = (d + eps) > 0
        out[nz] = 1.0 / np.sqrt(d[nz] + eps)
        return out

    return (inv_sqrt(r)[:, None] * A * inv_sqrt(c)[None, :]).astype(DTYPE)


def adjacency_set(graph: SkeletonGraph, eps: float = DEGREE_EPS) -> np.ndarray:
    """Stacked normalised partition adjacencies, shape (3, V, V)."""
    return np.stack([normalize(a, eps) for a in partition(graph)])
