"""Permutation-invariant self-organizing map: potential-field init and batch training."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import EmptySourceError, ShapeMismatchError

CHUNK = 512


@dataclass
class SomGrid:
    """m x m grid of nodes; flat index j = x * m + y."""

    m: int
    nodes: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        if self.nodes.shape[0] != self.m * self.m or self.nodes.ndim != 2:
            raise ShapeMismatchError(f"expected {self.m * self.m} nodes, got array of shape {self.nodes.shape}")

    @property
    def size(self) -> int:
        return self.m * self.m

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def grid_coords(self) -> np.ndarray:
        j = np.arange(self.size)
        return np.stack([j // self.m, j % self.m], axis=1).astype(np.float64)


@dataclass
class SomTrainConfig:
    max_iter: int = 60
    eta0: float = 1.0
    eta_decay: float = 0.99
    eta_min: float = 0.01
    sigma0: float | None = None  # None -> m / 2
    sigma_decay: float = 0.9
    sigma_min: float = 0.3
    workers: int = 1

    def __post_init__(self):
        if self.max_iter < 0 or self.eta0 <= 0 or self.eta_min <= 0 or self.sigma_min <= 0:
            raise ValueError("SOM schedule values must be positive")
        if self.sigma0 is not None and self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if not (0 < self.eta_decay <= 1 and 0 < self.sigma_decay <= 1):
            raise ValueError("decay factors must lie in (0, 1]")


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences keep every entry independent of row position
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def nearest_node(points: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Index of the nearest node per point; ties go to the lowest index."""
    return np.argmin(_pairwise_sq(points, nodes), axis=1)


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Lexicographic order on coordinates (first axis most significant)."""
    return np.lexsort(points.T[::-1])


def potential_init(
    m: int,
    dim: int,
    lam: float | None = None,
    eta: float = 0.1,
    max_iter: int = 500,
    seed: int = 42,
) -> SomGrid:
    """Spread m*m nodes inside the unit ball with repulsion plus pull to the origin.

    ``lam`` defaults to ``1.28 / m**2`` in 3-D (0.02 for an 8x8 grid) and
    ``0.75 / m**2`` in 2-D: the equilibrium radius grows like sqrt(lam * M),
    so the repulsion weight is scaled to keep every grid inside the unit ball.
    """
    if m < 2:
        raise ValueError("grid size m must be >= 2")
    if lam is None:
        lam = (1.28 if dim >= 3 else 0.75) / (m * m)
    return SomGrid(m, _potential_init_cached(m, dim, lam, eta, max_iter, seed).copy())


@lru_cache(maxsize=32)
def _potential_init_cached(m, dim, lam, eta, max_iter, seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1.0, 1.0, size=(m * m, dim))
    for _ in range(max_iter):
        step = eta * potential_forces(s, lam)
        s = s + step
        if np.abs(step).max() < 1e-6:
            break
    s.setflags(write=False)
    return s


def potential_forces(s: np.ndarray, lam: float) -> np.ndarray:
    """Net force per node: -s plus pairwise repulsion lam * d / |d|^2."""
    while True:
        diff = s[:, None, :] - s[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        np.fill_diagonal(sq, np.inf)
        hit = np.argwhere(sq == 0)
        if hit.size == 0:
            break
        s = s.copy()
        for j, k in hit:
            if k > j:
                s[k, 0] += 1e-6
    return -s + lam * (diff / sq[:, :, None]).sum(axis=1)


def neighborhood_weight(x, y, p, q, sigma_x, sigma_y):
    """Bivariate Gaussian with diagonal covariance, centred at the winner (p, q)."""
    if np.any(np.asarray(sigma_x) <= 0) or np.any(np.asarray(sigma_y) <= 0):
        raise ValueError("sigmas must be positive")
    z = (np.asarray(x) - p) ** 2 / sigma_x**2 + (np.asarray(y) - q) ** 2 / sigma_y**2
    return np.exp(-0.5 * z) / (2.0 * np.pi * sigma_x * sigma_y)


def _accumulate(points, nodes, coords, sigma):
    win = nearest_node(points, nodes)
    w = neighborhood_weight(coords[None, :, 0], coords[None, :, 1], coords[win, 0:1], coords[win, 1:2], sigma, sigma)
    return w.T @ points, w.sum(axis=0)


def som_train(cloud, init: SomGrid, cfg: SomTrainConfig | None = None) -> SomGrid:
    """Batch-update SOM training.

    Points are put in lexicographic order first and accumulated in fixed
    chunks combined in chunk order, so the result is bit-identical under any
    permutation of the input and for any worker count.

    The per-iteration step is ``eta_t * D / max_j W_j`` where ``W_j`` is node
    j's accumulated neighborhood weight: the busiest node moves a fraction
    ``eta_t`` of the way to its weighted mean, which keeps the update stable
    for any point count and neighborhood width.
    """
    cfg = cfg or SomTrainConfig()
    points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if points.shape[0] == 0:
        raise EmptySourceError("cannot train a SOM on an empty cloud")
    if points.shape[1] != init.dim:
        raise ShapeMismatchError(f"cloud is {points.shape[1]}-D but SOM is {init.dim}-D")
    points = points[canonical_order(points)]
    chunks = [points[i : i + CHUNK] for i in range(0, len(points), CHUNK)]
    coords = init.grid_coords()
    nodes = init.nodes.copy()
    eta = cfg.eta0
    sigma = cfg.sigma0 if cfg.sigma0 is not None else init.m / 2.0
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 and len(chunks) > 1 else None
    try:
        for _ in range(cfg.max_iter):
            if pool is None:
                parts = [_accumulate(c, nodes, coords, sigma) for c in chunks]
            else:
                parts = list(pool.map(lambda c: _accumulate(c, nodes, coords, sigma), chunks))
            wp, wsum = parts[0]
            for a, b in parts[1:]:
                wp = wp + a
                wsum = wsum + b
            delta = wp - wsum[:, None] * nodes
            nodes = nodes + (eta / wsum.max()) * delta
            eta = max(eta * cfg.eta_decay, cfg.eta_min)
            sigma = max(sigma * cfg.sigma_decay, cfg.sigma_min)
    finally:
        if pool is not None:
            pool.shutdown()
    return SomGrid(init.m, nodes)


def quantization_error(cloud, som: SomGrid) -> float:
    """Mean distance from each point to its nearest node."""
    points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    return float(np.sqrt(_pairwise_sq(points, som.nodes).min(axis=1)).mean())


def build_som(cloud, m: int, cfg: SomTrainConfig | None = None, seed: int = 42) -> SomGrid:
    """Fixed potential-field init for (m, D) followed by batch training."""
    points = np.asarray(getattr(cloud, "points", cloud))
    return som_train(points, potential_init(m, points.shape[1], seed=seed), cfg)
