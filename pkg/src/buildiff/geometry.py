"""Point cloud containers, unit-cube normalization, footprint projection,
farthest point sampling and a small k-d tree."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3) float64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        self.points = pts

    @property
    def count(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Transform:
    """Record of a normalize_unit_cube call; invert() maps back exactly."""
    center: np.ndarray
    scale: float

    def invert(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(cloud.points / self.scale + self.center,
                          meta=dict(cloud.meta))


def normalize_unit_cube(cloud: PointCloud) -> tuple[PointCloud, Transform]:
    """Center at the bounding-box center and scale uniformly so the largest
    axis range spans [-1, 1]. Aspect ratio is preserved."""
    if cloud.count < 1:
        raise ValueError("empty cloud")
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise ValueError("degenerate cloud: all points identical")
    center = (lo + hi) / 2.0
    scale = 2.0 / extent
    meta = dict(cloud.meta)
    meta["normalized"] = True
    return PointCloud((cloud.points - center) * scale, meta=meta), Transform(center, scale)


def project_footprint(cloud: PointCloud) -> PointCloud:
    """Drop every point to the ground plane z=0; x and y kept bitwise."""
    pts = cloud.points.copy()
    pts[:, 2] = 0.0
    return PointCloud(pts, meta=dict(cloud.meta))


def farthest_point_sample(cloud: PointCloud, k: int, seed: int) -> PointCloud:
    """Greedy max-min subset of k points; the first pick is seeded-random."""
    n = cloud.count
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for cloud of {n} points")
    rng = np.random.default_rng(seed)
    pts = cloud.points
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    dist = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        d = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(dist, d, out=dist)
    meta = dict(cloud.meta)
    meta["fps_seed"] = seed
    return PointCloud(pts[chosen], meta=meta)


class KdTree:
    """Static 3D k-d tree; nearest() matches a linear scan, ties resolved
    to the lowest original index."""

    def __init__(self, cloud: PointCloud):
        if cloud.count < 1:
            raise ValueError("empty cloud")
        self.points = cloud.points
        n = cloud.count
        # flattened median-split tree over index arrays
        self._left = np.full(2 * n, -1, dtype=np.int64)
        self._right = np.full(2 * n, -1, dtype=np.int64)
        self._index = np.full(2 * n, -1, dtype=np.int64)
        self._axis = np.zeros(2 * n, dtype=np.int64)
        self._n_nodes = 0
        self._root = self._build(np.arange(n), 0)

    def _build(self, idx: np.ndarray, depth: int) -> int:
        axis = depth % 3
        node = self._n_nodes
        self._n_nodes += 1
        # stable sort keeps tie handling deterministic
        order = np.lexsort((idx, self.points[idx, axis]))
        idx = idx[order]
        mid = len(idx) // 2
        self._index[node] = idx[mid]
        self._axis[node] = axis
        if mid > 0:
            self._left[node] = self._build(idx[:mid], depth + 1)
        if mid + 1 < len(idx):
            self._right[node] = self._build(idx[mid + 1:], depth + 1)
        return node

    def nearest(self, query) -> tuple[int, float]:
        q = np.asarray(query, dtype=np.float64)
        best = [-1, np.inf]

        def visit(node: int):
            if node < 0:
                return
            i = self._index[node]
            d = float(np.sum((self.points[i] - q) ** 2))
            if d < best[1] or (d == best[1] and i < best[0]):
                best[0] = int(i)
                best[1] = d
            axis = self._axis[node]
            delta = q[axis] - self.points[i, axis]
            near, far = (self._left[node], self._right[node]) if delta < 0 \
                else (self._right[node], self._left[node])
            visit(near)
            if delta * delta <= best[1]:
                visit(far)

        visit(self._root)
        return best[0], best[1]


def nearest(tree: KdTree, query) -> tuple[int, float]:
    return tree.nearest(query)


def nearest_squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each row of a, squared distance to its nearest row of b.
    Chunked pairwise computation; used by metrics and the footprint loss.
    Distances are recomputed exactly at the argmin to avoid the cancellation
    error of the expanded form."""
    idx = nearest_indices(a, b)
    return np.sum((a - b[idx]) ** 2, axis=1)


def nearest_indices(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index into b of the nearest neighbour of each row of a (first on ties)."""
    out = np.empty(len(a), dtype=np.int64)
    step = max(1, int(4e6) // max(1, len(b)))
    for s in range(0, len(a), step):
        block = a[s:s + step]
        d2 = np.sum(block * block, axis=1)[:, None] \
            + np.sum(b * b, axis=1)[None, :] - 2.0 * block @ b.T
        out[s:s + step] = d2.argmin(axis=1)
    return out


# ---------------------------------------------------------------- file io

BPC_MAGIC = b"BPC1"


def save_bpc(path, cloud: PointCloud) -> None:
    """Compact binary: magic 'BPC1', u32 count, f32 xyz triples (LE)."""
    with open(path, "wb") as fh:
        fh.write(BPC_MAGIC)
        fh.write(struct.pack("<I", cloud.count))
        fh.write(cloud.points.astype("<f4").tobytes())


def load_bpc(path) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.read(4) != BPC_MAGIC:
            raise IOError(f"{path}: not a BPC1 file")
        (n,) = struct.unpack("<I", fh.read(4))
        pts = np.frombuffer(fh.read(12 * n), dtype="<f4").reshape(n, 3)
        return PointCloud(pts.astype(np.float64))


def save_ply(path, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {cloud.count}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for x, y, z in cloud.points:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def load_ply(path) -> PointCloud:
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise IOError(f"{path}: not a PLY file")
        n = None
        while True:
            line = fh.readline()
            if not line:
                raise IOError(f"{path}: truncated PLY header")
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line == "end_header":
                break
        if n is None:
            raise IOError(f"{path}: no vertex element")
        pts = np.loadtxt(fh, dtype=np.float64, max_rows=n)
        return PointCloud(pts.reshape(n, 3))


def save_xyz(path, cloud: PointCloud) -> None:
    np.savetxt(path, cloud.points, fmt="%.9g")


def load_xyz(path) -> PointCloud:
    return PointCloud(np.loadtxt(path, dtype=np.float64).reshape(-1, 3))
