"""Point-to-node kNN association and grouped reductions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeMismatchError
from .som import SomGrid, _pairwise_sq


def knn_indices(points: np.ndarray, nodes: np.ndarray, k: int) -> np.ndarray:
    """k nearest nodes per point, nearest first; equal distances keep the lower index first."""
    if not 1 <= k <= len(nodes):
        raise ValueError(f"k={k} must lie in [1, {len(nodes)}]")
    d = _pairwise_sq(points, nodes)
    # stable sort: ties stay in index order
    return np.argsort(d, axis=1, kind="stable")[:, :k]


@dataclass
class Assignment:
    knn_nodes: np.ndarray  # N x k
    normalized: np.ndarray  # (k N) x D, row r = i * k + slot
    owner_point: np.ndarray
    owner_node: np.ndarray
    node_members: list
    isolated: np.ndarray

    @property
    def k(self) -> int:
        return self.knn_nodes.shape[1]

    @property
    def n_points(self) -> int:
        return self.knn_nodes.shape[0]

    @property
    def n_nodes(self) -> int:
        return len(self.node_members)


def knn_assign(cloud, som: SomGrid, k: int) -> Assignment:
    points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if points.shape[1] != som.dim:
        raise ShapeMismatchError(f"cloud is {points.shape[1]}-D but SOM is {som.dim}-D")
    knn = knn_indices(points, som.nodes, k)
    owner_point = np.repeat(np.arange(len(points)), k)
    owner_node = knn.reshape(-1)
    normalized = points[owner_point] - som.nodes[owner_node]
    members = members_by_group(owner_node, som.size)
    isolated = np.array([len(g) == 0 for g in members])
    return Assignment(knn, normalized, owner_point, owner_node, members, isolated)


def members_by_group(owner: np.ndarray, n_groups: int) -> list:
    order = np.argsort(owner, kind="stable")
    bounds = np.searchsorted(owner[order], np.arange(n_groups + 1))
    return [order[bounds[g] : bounds[g + 1]] for g in range(n_groups)]


def node_knn(som: SomGrid, k_prime: int) -> np.ndarray:
    """k' nearest nodes of every node (itself first)."""
    return knn_indices(som.nodes, som.nodes, k_prime)


class Groups:
    """Row groups in CSR form: members of group g are index[offsets[g]:offsets[g+1]]."""

    def __init__(self, index: np.ndarray, offsets: np.ndarray):
        self.index = np.asarray(index, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.int64)

    @classmethod
    def from_lists(cls, groups: Sequence) -> "Groups":
        sizes = [len(g) for g in groups]
        index = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups]) if groups else np.zeros(0, np.int64)
        return cls(index, np.concatenate([[0], np.cumsum(sizes)]))

    @classmethod
    def from_owner(cls, owner: np.ndarray, n_groups: int) -> "Groups":
        order = np.argsort(owner, kind="stable")
        return cls(order, np.searchsorted(owner[order], np.arange(n_groups + 1)))

    @classmethod
    def uniform(cls, n_groups: int, size: int) -> "Groups":
        """Consecutive blocks of ``size`` rows."""
        return cls(np.arange(n_groups * size), np.arange(n_groups + 1) * size)

    def __len__(self):
        return len(self.offsets) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)


def _as_groups(groups) -> Groups:
    return groups if isinstance(groups, Groups) else Groups.from_lists(groups)


def group_reduce_max(rows: np.ndarray, groups, fill=None):
    """Channel-wise max per group.

    Returns ``(out, argmax)``; ``argmax[g, c]`` is the lowest row index holding
    the maximum, or -1 for an empty group, whose output row is ``fill``
    (zeros by default).
    """
    groups = _as_groups(groups)
    rows = np.asarray(rows)
    n_groups, channels = len(groups), rows.shape[1]
    out = np.zeros((n_groups, channels), dtype=rows.dtype)
    if fill is not None:
        out[:] = fill
    argmax = np.full((n_groups, channels), -1, dtype=np.int64)
    nonempty = groups.sizes > 0
    if not nonempty.any():
        return out, argmax
    vals = rows[groups.index]
    starts = groups.offsets[:-1][nonempty]
    best = np.maximum.reduceat(vals, starts, axis=0)
    seg = np.repeat(np.arange(len(starts)), groups.sizes[nonempty])
    cand = np.where(vals == best[seg], groups.index[:, None], np.iinfo(np.int64).max)
    out[nonempty] = best
    argmax[nonempty] = np.minimum.reduceat(cand, starts, axis=0)
    return out, argmax
