"""Point clouds: normalization, augmentation and dataset construction."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateCloudError,
    EmptySourceError,
    FormatError,
    ShapeMismatchError,
    UnknownShapeError,
    ZeroAreaError,
)
from .som import SomGrid

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus")


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    class_id: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1 or self.points.shape[1] not in (2, 3):
            raise ShapeMismatchError(f"points must be N x 2 or N x 3 with N >= 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ShapeMismatchError("normals must match the shape of points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ShapeMismatchError("labels must have one entry per point")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, idx) -> "PointCloud":
        """Return the cloud restricted to the given point indices."""
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.labels is None else self.labels[idx],
            self.class_id,
        )


@dataclass
class AugmentParams:
    point_noise_sigma: float = 0.01
    som_noise_sigma: float = 0.04
    scale_low: float = 0.8
    scale_high: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if self.point_noise_sigma < 0 or self.som_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0 < self.scale_low <= self.scale_high:
            raise ValueError("need 0 < scale_low <= scale_high")


@dataclass
class Dataset:
    clouds: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.clouds)

    def __getitem__(self, i):
        return self.clouds[i]

    def class_ids(self) -> np.ndarray:
        return np.array([c.class_id for c in self.clouds], dtype=np.int64)


def normalize_unit_cube(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and divide by the largest absolute coordinate."""
    centered = cloud.points - cloud.points.mean(axis=0)
    extent = np.abs(centered).max()
    if extent == 0.0:
        raise DegenerateCloudError("all points are identical")
    points = centered / extent
    # second centering pass removes the rounding residue of the first
    points = points - points.mean(axis=0)
    points /= np.abs(points).max()
    return replace(cloud, points=points)


def augment(cloud: PointCloud, som: SomGrid, params: AugmentParams) -> tuple[PointCloud, SomGrid]:
    """Jitter points, normals and SOM nodes, then apply one shared random scale."""
    rng = np.random.default_rng(params.seed)
    scale = rng.uniform(params.scale_low, params.scale_high)
    points = cloud.points + rng.normal(0.0, params.point_noise_sigma, cloud.points.shape)
    normals = cloud.normals
    if normals is not None:
        normals = normals + rng.normal(0.0, params.point_noise_sigma, normals.shape)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(norm > 0, norm, 1.0)
    nodes = som.nodes + rng.normal(0.0, params.som_noise_sigma, som.nodes.shape)
    return (
        replace(cloud, points=points * scale, normals=normals),
        replace(som, nodes=nodes * scale),
    )


def pixel_to_xy(row, col):
    """Map pixel indices of a 28x28 image into [-1, 1]^2 with image-up as +y."""
    return np.stack([2.0 * np.asarray(col) / 27.0 - 1.0, 1.0 - 2.0 * np.asarray(row) / 27.0], axis=-1)


def mnist_to_points(image, target_n: int, sigma: float, seed: int) -> PointCloud:
    image = np.asarray(image)
    if image.shape != (28, 28):
        raise ShapeMismatchError(f"expected a 28x28 image, got {image.shape}")
    if target_n < 1:
        raise ValueError("target_n must be >= 1")
    rows, cols = np.nonzero(image)
    if len(rows) == 0:
        raise EmptySourceError("image has no non-zero pixels")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(rows), size=target_n, replace=len(rows) < target_n)
    points = pixel_to_xy(rows[pick], cols[pick])
    if sigma > 0:
        points = points + rng.normal(0.0, sigma, points.shape)
    return PointCloud(points)


def load_mnist(path: Optional[str] = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (images uint8 N x 28 x 28, labels).

    With ``path`` set, reads an IDX image file (optionally gzipped) and the
    matching ``*labels*`` file next to it. Without it, uses the 5000-digit
    MNIST subset bundled with mlxtend.
    """
    if path is None:
        from mlxtend.data import mnist_data

        X, y = mnist_data()
        return X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.int64)
    images = _read_idx(Path(path))
    label_path = Path(str(path).replace("images-idx3", "labels-idx1"))
    labels = _read_idx(label_path)
    return images, labels.astype(np.int64)


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:2] != b"\x00\x00" or raw[2] != 0x08:
        raise FormatError(f"{path}: not an unsigned-byte IDX file")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{path}: payload size does not match header")
    return data.reshape(dims)


def mnist_dataset(images, labels, target_n: int = 512, sigma: float = 0.01, seed: int = 0) -> Dataset:
    clouds = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        cloud = mnist_to_points(img, target_n, sigma, seed * 1_000_003 + i)
        cloud.class_id = int(lab)
        clouds.append(cloud)
    return Dataset(clouds, [str(d) for d in range(10)])


# --- synthetic shapes -------------------------------------------------------


def _sample_sphere(n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    labels = (v[:, 2] < 0).astype(np.int64)
    return v.copy(), v, labels


def _sample_cube(n, rng):
    half = rng.uniform(0.6, 1.0, size=3)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]).repeat(2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    axis, sign = face // 2, np.where(face % 2 == 1, 1.0, -1.0)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    pts[np.arange(n), axis] = sign * half[axis]
    normals = np.zeros((n, 3))
    normals[np.arange(n), axis] = sign
    return pts, normals, face.astype(np.int64)


def _sample_cylinder(n, rng):
    radius = rng.uniform(0.4, 0.7)
    height = 2.0
    side, cap = 2 * np.pi * radius * height, np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    phi = rng.uniform(0, 2 * np.pi, n)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    s = part == 0
    pts[s] = np.stack([radius * np.cos(phi[s]), radius * np.sin(phi[s]), rng.uniform(-1, 1, s.sum())], axis=1)
    normals[s] = np.stack([np.cos(phi[s]), np.sin(phi[s]), np.zeros(s.sum())], axis=1)
    for label, z in ((1, 1.0), (2, -1.0)):
        c = part == label
        rr = radius * np.sqrt(rng.uniform(0, 1, c.sum()))
        pts[c] = np.stack([rr * np.cos(phi[c]), rr * np.sin(phi[c]), np.full(c.sum(), z * height / 2)], axis=1)
        normals[c, 2] = z
    return pts, normals, part.astype(np.int64)


def _sample_torus(n, rng):
    big_r = 0.7
    small_r = rng.uniform(0.2, 0.35)
    theta = np.empty(0)
    # area element is proportional to (R + r cos theta): rejection sample theta
    while theta.size < n:
        cand = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0, big_r + small_r, 2 * n) < big_r + small_r * np.cos(cand)
        theta = np.concatenate([theta, cand[keep]])
    theta = theta[:n]
    phi = rng.uniform(0, 2 * np.pi, n)
    ring = big_r + small_r * np.cos(theta)
    pts = np.stack([ring * np.cos(phi), ring * np.sin(phi), small_r * np.sin(theta)], axis=1)
    normals = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)], axis=1)
    labels = (np.cos(theta) < 0).astype(np.int64)
    return pts, normals, labels


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
}


def sample_shape(kind: str, n: int, rng) -> PointCloud:
    if kind not in _SAMPLERS:
        raise UnknownShapeError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
    pts, normals, labels = _SAMPLERS[kind](n, rng)
    return PointCloud(pts, normals, labels)


def synth_shapes(
    class_set: Sequence[str],
    n_per_class: int,
    points_per_cloud: int,
    with_parts: bool = False,
    seed: int = 0,
) -> Dataset:
    """Surface-sampled analytic shapes, normalized to the unit cube."""
    for kind in class_set:
        if kind not in _SAMPLERS:
            raise UnknownShapeError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
    if points_per_cloud < 64:
        raise ValueError("points_per_cloud must be >= 64")
    rng = np.random.default_rng(seed)
    clouds = []
    for i in range(n_per_class):
        for class_id, kind in enumerate(class_set):
            cloud = normalize_unit_cube(sample_shape(kind, points_per_cloud, rng))
            cloud.class_id = class_id
            if not with_parts:
                cloud.labels = None
            clouds.append(cloud)
    return Dataset(clouds, list(class_set))


# --- meshes -------------------------------------------------------------------


def sample_mesh(vertices, faces, n: int, seed: int) -> PointCloud:
    """Area-weighted uniform sampling of a triangle mesh; normals are face normals."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    cross = np.cross(b - a, c - a)
    double_area = np.linalg.norm(cross, axis=1)
    total = double_area.sum()
    if not total > 0:
        raise ZeroAreaError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(faces), size=n, p=double_area / total)
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    pts = a[face] + u[:, None] * (b - a)[face] + v[:, None] * (c - a)[face]
    unit = np.zeros_like(cross)
    ok = double_area > 0
    unit[ok] = cross[ok] / double_area[ok, None]
    return PointCloud(pts, unit[face])


def read_off(path) -> tuple[np.ndarray, np.ndarray]:
    """Minimal OFF reader: vertices and triangulated (fan) faces."""
    tokens = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or not tokens[0].startswith("OFF"):
        raise FormatError(f"{path}: missing OFF header")
    head = tokens[0][3:]
    pos = 1
    if head:  # "OFF8 4 0" style header with counts glued on
        tokens.insert(1, head)
    try:
        nv, nf = int(tokens[pos]), int(tokens[pos + 1])
        pos += 3
        verts = np.array(tokens[pos : pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
        pos += 3 * nv
        faces = []
        for _ in range(nf):
            k = int(tokens[pos])
            idx = [int(t) for t in tokens[pos + 1 : pos + 1 + k]]
            pos += 1 + k
            faces.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, k - 1))
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: truncated or malformed OFF body") from exc
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)
