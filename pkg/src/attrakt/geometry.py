"""Point clouds, exact nearest-neighbour queries and Hausdorff distances.

The ambient Hilbert space is truncated to R^N with the Euclidean norm; every
set the pipeline handles (attractor samples, their images in R^m, sublevel
samples, attractor estimates) is a finite :class:`PointCloud`.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, FormatError

__all__ = [
    "PointCloud",
    "semidistance",
    "hausdorff_distance",
    "difference_cloud",
    "nearest",
    "sq_dists",
    "sq_norms",
    "LeafPartition",
    "save_cloud_csv",
    "load_cloud_csv",
    "save_cloud_bin",
    "load_cloud_bin",
]

BIN_MAGIC = b"ATCLOUD1"
_BIN_HEADER = struct.Struct("<8sII")


class PointCloud:
    """Immutable ordered set of points in R^d with an exact kd-tree index.

    Parameters
    ----------
    points : array_like, shape (n, d)
        Coordinates. A 1-D input is read as n points on the line.
    """

    __slots__ = ("_points", "_tree")

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64, copy=True)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2:
            raise DomainError(f"points must be a 2-D array, got shape {pts.shape}")
        if pts.shape[0] == 0:
            raise DomainError("empty point cloud")
        if not np.all(np.isfinite(pts)):
            raise DomainError("point coordinates must be finite")
        pts.flags.writeable = False
        self._points = pts
        self._tree = cKDTree(pts)

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def tree(self) -> cKDTree:
        return self._tree

    @property
    def dim(self) -> int:
        return self._points.shape[1]

    def __len__(self) -> int:
        return self._points.shape[0]

    def __getitem__(self, i):
        return self._points[i]

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)}, dim={self.dim})"

    def diameter(self) -> float:
        """Exact diameter (max pairwise distance); O(n^2) in blocks."""
        pts = self._points
        best = 0.0
        for start in range(0, len(pts), 512):
            block = pts[start:start + 512]
            d2 = _pairwise_sq(block, pts)
            best = max(best, float(d2.max()))
        return float(np.sqrt(best))

    def resolution(self) -> float:
        """Largest nearest-neighbour spacing (0 for a single point)."""
        if len(self) < 2:
            return 0.0
        d, _ = self._tree.query(self._points, k=2)
        return float(d[:, 1].max())


def _as_cloud(x) -> PointCloud:
    return x if isinstance(x, PointCloud) else PointCloud(x)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sq_norms(diff: np.ndarray) -> np.ndarray:
    """Squared Euclidean norms along the last axis.

    Accumulates coordinate by coordinate, so the rounding of each entry is
    independent of the array's shape. This is the one formula used wherever
    bitwise agreement between two code paths matters (softmin bounds,
    pruned versus full extension evaluation).
    """
    out = diff[..., 0] * diff[..., 0]
    for j in range(1, diff.shape[-1]):
        out = out + diff[..., j] * diff[..., j]
    return out


def sq_dists(points: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Squared distances from ``x`` (or each row of a batch) to every row of ``points``."""
    points = np.asarray(points, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        # same per-coordinate accumulation as sq_norms, without the 3-d temporary
        pt = np.ascontiguousarray(points.T)
        diff = pt[0][None, :] - x[:, 0, None]
        out = diff * diff
        for j in range(1, pt.shape[0]):
            diff = pt[j][None, :] - x[:, j, None]
            out += diff * diff
        return out
    return sq_norms(points - x)


class LeafPartition:
    """Balanced partition of a cloud into leaves of at most ``size`` points,
    by recursive median splits along the widest coordinate.

    ``slots`` is (n_leaves, size) of point indices, short leaves padded with
    a repeat of their first member and flagged False in ``valid``. ``radius``
    is inflated by a relative 1e-12 so that, in floating point,
    |x - p| >= |x - center| - radius for every member p.
    """

    def __init__(self, points: np.ndarray, size: int = 8):
        points = np.asarray(points, dtype=np.float64)
        groups = []
        stack = [np.arange(len(points))]
        while stack:
            idx = stack.pop()
            if len(idx) <= size:
                groups.append(idx)
                continue
            pts = points[idx]
            ax = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
            order = idx[np.argsort(pts[:, ax], kind="stable")]
            h = len(order) // 2
            stack.append(order[h:])
            stack.append(order[:h])
        self.size = size
        self.slots = np.empty((len(groups), size), dtype=np.intp)
        self.valid = np.zeros((len(groups), size), dtype=bool)
        self.center = np.empty((len(groups), points.shape[1]))
        self.radius = np.empty(len(groups))
        for i, g in enumerate(groups):
            self.slots[i, : len(g)] = g
            self.slots[i, len(g):] = g[0]
            self.valid[i, : len(g)] = True
            c = points[g].mean(axis=0)
            self.center[i] = c
            self.radius[i] = np.sqrt(sq_norms(points[g] - c).max()) * (1 + 1e-12) + 1e-300
        self.leaf_of = np.empty(len(points), dtype=np.intp)
        for i, g in enumerate(groups):
            self.leaf_of[g] = i

    def __len__(self) -> int:
        return len(self.slots)

    def gaps(self, X: np.ndarray) -> np.ndarray:
        """Lower bounds (k, n_leaves) on the distance from each row of X to any leaf member."""
        d = np.sqrt(sq_norms(self.center[None, :, :] - X[:, None, :]))
        return np.maximum(d * (1 - 1e-12) - self.radius[None, :], 0.0)

    def gather(self, need: np.ndarray, first: np.ndarray):
        """Point indices and validity for a per-row selection of leaves.

        need: (k, n_leaves) mask; first: (k,) a leaf every row must include.
        Rows are padded to a common width with invalid copies of ``first``.
        """
        need = need.copy()
        need[np.arange(len(first)), first] = True
        counts = need.sum(axis=1)
        width = int(counts.max())
        order = np.argsort(~need, axis=1, kind="stable")[:, :width]
        pad = np.arange(width)[None, :] >= counts[:, None]
        leaves = np.where(pad, first[:, None], order)
        idx = self.slots[leaves].reshape(len(first), -1)
        valid = (self.valid[leaves] & ~pad[:, :, None]).reshape(len(first), -1)
        return idx, valid


def _check_pair(X: PointCloud, Y: PointCloud) -> None:
    if X.dim != Y.dim:
        raise DomainError(f"dimension mismatch: {X.dim} vs {Y.dim}")


def semidistance(X, Y) -> float:
    """Hausdorff semidistance sup_{x in X} inf_{y in Y} |x - y|."""
    X, Y = _as_cloud(X), _as_cloud(Y)
    _check_pair(X, Y)
    d, _ = Y.tree.query(X.points, k=1)
    return float(np.max(d))


def hausdorff_distance(X, Y) -> float:
    X, Y = _as_cloud(X), _as_cloud(Y)
    return max(semidistance(X, Y), semidistance(Y, X))


def difference_cloud(A, max_pairs: int, seed: int = 0) -> PointCloud:
    """Sample of the difference set A - A.

    When all n^2 ordered pairs fit in ``max_pairs`` the set is enumerated;
    otherwise unordered pairs are drawn and both u - v and v - u are kept, so
    the output is closed under negation. The zero vector is always present and
    exact duplicates are removed.
    """
    if max_pairs <= 0:
        raise DomainError("max_pairs must be positive")
    A = _as_cloud(A)
    pts = A.points
    n = len(pts)
    if n * n <= max_pairs:
        diffs = (pts[:, None, :] - pts[None, :, :]).reshape(-1, A.dim)
    else:
        rng = np.random.default_rng(seed)
        n_pairs = (max_pairs - 1) // 2
        i = rng.integers(0, n, size=n_pairs)
        j = rng.integers(0, n - 1, size=n_pairs)
        j = j + (j >= i)  # j != i
        d = pts[i] - pts[j]
        diffs = np.concatenate([np.zeros((1, A.dim)), d, -d])
    diffs = np.unique(diffs, axis=0)
    return PointCloud(diffs)


def nearest(cloud, query, k: int = 1) -> list[tuple[int, float]]:
    """Exact k nearest neighbours, sorted by distance then by index.

    The kd-tree supplies the k-th distance; every point within that radius is
    then rescanned so ties at the boundary resolve to the lowest index.
    """
    cloud = _as_cloud(cloud)
    if k <= 0:
        raise DomainError("k must be positive")
    if k > len(cloud):
        raise DomainError(f"k={k} exceeds cloud size {len(cloud)}")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != cloud.dim:
        raise DomainError(f"query has dimension {q.shape[0]}, cloud has {cloud.dim}")
    dk, _ = cloud.tree.query(q, k=[k])
    radius = float(dk[0])
    cand = cloud.tree.query_ball_point(q, r=radius * (1 + 1e-12) + 1e-300)
    cand = np.array(sorted(cand), dtype=np.intp)
    dist = np.sqrt(sq_dists(cloud.points[cand], q))
    order = np.lexsort((cand, dist))[:k]
    return [(int(cand[o]), float(dist[o])) for o in order]


# -- persistence -----------------------------------------------------------

def _header_line(dim: int, count: int) -> str:
    return f"dim={dim},count={count}"


def save_cloud_csv(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    with open(path, "w") as fh:
        fh.write(_header_line(pts.shape[1], pts.shape[0]) + "\n")
        for row in pts:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _existing(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: no such file")
    return path


def load_cloud_csv(path) -> np.ndarray:
    text = _existing(path).read_text().splitlines()
    if not text:
        raise FormatError(f"{path}: empty file")
    try:
        fields = dict(item.split("=") for item in text[0].strip().split(","))
        dim, count = int(fields["dim"]), int(fields["count"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: bad header {text[0]!r}") from exc
    rows = [ln for ln in text[1:] if ln.strip()]
    if len(rows) != count:
        raise FormatError(f"{path}: header says {count} rows, found {len(rows)}")
    out = np.empty((count, dim))
    for i, ln in enumerate(rows):
        vals = ln.split(",")
        if len(vals) != dim:
            raise FormatError(f"{path}: row {i} has {len(vals)} values, expected {dim}")
        try:
            out[i] = [float(v) for v in vals]
        except ValueError as exc:
            raise FormatError(f"{path}: row {i} is not numeric") from exc
    return out


def save_cloud_bin(path, points) -> None:
    pts = np.ascontiguousarray(points, dtype="<f8")
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    with open(path, "wb") as fh:
        fh.write(_BIN_HEADER.pack(BIN_MAGIC, pts.shape[1], pts.shape[0]))
        fh.write(pts.tobytes())


def load_cloud_bin(path) -> np.ndarray:
    raw = _existing(path).read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, dim, count = _BIN_HEADER.unpack_from(raw)
    if magic != BIN_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _BIN_HEADER.size + 8 * dim * count
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=_BIN_HEADER.size)
    return data.reshape(count, dim).astype(np.float64)
