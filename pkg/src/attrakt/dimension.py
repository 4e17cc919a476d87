"""Covering-number estimates: doubling constant, Assouad exponent, box counting.

Coverings are greedy (farthest-point-first) rather than minimal, so counts are
upper bounds on the true covering numbers within the usual constant factor.
Only the exponent matters downstream, and it is insensitive to that factor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import PointCloud

__all__ = [
    "CoveringStats",
    "greedy_cover_count",
    "greedy_net",
    "doubling_constant",
    "assouad_estimate",
    "box_counting",
    "gamma_threshold",
    "check_gates",
    "choose_gamma",
]

MAX_CENTERS = 64


@dataclass
class CoveringStats:
    scales: list  # (r, rho) pairs actually used, or box sizes
    counts: list  # max covering count per scale
    s_est: float
    M_est: float
    residual: float
    excluded: list = field(default_factory=list)  # scales flagged below resolution

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_csv(self) -> str:
        lines = ["r,rho,count"]
        for (r, rho), c in zip(self.scales, self.counts):
            lines.append(f"{r!r},{rho!r},{c}")
        return "\n".join(lines) + "\n"


def greedy_cover_count(points: np.ndarray, rho: float, start: int = 0) -> int:
    """Number of radius-``rho`` balls, centred on points, found by greedy
    farthest-first covering starting at ``points[start]``."""
    if len(points) == 0:
        return 0
    radii = _insertion_radii(points, start, rho)
    return 1 + int(np.count_nonzero(radii > rho))


def _insertion_radii(points: np.ndarray, start: int, rho_min: float) -> np.ndarray:
    """Farthest-first traversal from ``points[start]``.

    Returns the distance of each newly picked point to the previously picked
    ones; the sequence is non-increasing, so the greedy count for any
    rho >= rho_min is 1 + #(radii > rho). Traversal stops once the farthest
    remaining point is within ``rho_min``.
    """
    d = np.sqrt(np.sum((points - points[start]) ** 2, axis=1))
    out = []
    while True:
        j = int(np.argmax(d))
        if d[j] <= rho_min:
            return np.array(out)
        out.append(d[j])
        d = np.minimum(d, np.sqrt(np.sum((points - points[j]) ** 2, axis=1)))


def _reduce(cloud: PointCloud) -> PointCloud:
    """Re-express the cloud in an orthonormal basis of its affine span.

    Distances are preserved up to rounding; covering work then runs in the
    intrinsic dimension of the sample rather than the ambient one.
    """
    pts = cloud.points
    if len(pts) < 2:
        return cloud
    centred = pts - pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(centred, full_matrices=False)
    rank = int(np.count_nonzero(sv > 1e-12 * max(sv[0], 1e-300)))
    if rank >= pts.shape[1]:
        return cloud
    return PointCloud(centred @ vt[:max(rank, 1)].T)


def _centers(n: int, seed: int) -> np.ndarray:
    if n <= MAX_CENTERS:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=MAX_CENTERS, replace=False))


def _local_radii(cloud: PointCloud, c: int, r: float, rho_min: float) -> np.ndarray:
    pts = cloud.points
    idx = np.array(sorted(cloud.tree.query_ball_point(pts[c], r)), dtype=np.intp)
    start = int(np.flatnonzero(idx == c)[0])
    return _insertion_radii(pts[idx], start, rho_min)


def _local_count(cloud: PointCloud, c: int, r: float, rho: float) -> int:
    return 1 + int(np.count_nonzero(_local_radii(cloud, c, r, rho) > rho))


def doubling_constant(cloud, radii, seed: int = 0) -> float:
    """max over sampled centres x and radii r of the greedy count of
    radius-r/2 balls needed for cloud ∩ B(x, r).

    Radii whose half is below the cloud resolution are skipped.
    """
    cloud = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    radii = [float(r) for r in radii]
    if any(r <= 0 for r in radii):
        raise DomainError("radii must be positive")
    if len(cloud) == 1:
        return 1.0
    cloud = _reduce(cloud)
    res = _net_resolution(cloud)
    usable = [r for r in radii if r / 2 >= res]
    if not usable:
        raise DomainError("every radius is below the cloud resolution")
    K = 1
    centers = _centers(len(cloud), seed)
    for r in usable:
        for c in centers:
            K = max(K, _local_count(cloud, int(c), r, r / 2))
    return float(K)


def _net_resolution(cloud: PointCloud) -> float:
    # 90th percentile of nearest-neighbour spacing; the maximum is an outlier
    # statistic for random samples and would discard most usable scales
    d, _ = cloud.tree.query(cloud.points, k=2)
    return float(np.percentile(d[:, 1], 90))


def greedy_net(points: np.ndarray, rho_min: float) -> tuple[np.ndarray, np.ndarray]:
    """Global farthest-first traversal down to ``rho_min``.

    Returns (indices, insertion radii), the first radius being +inf. For any
    rho >= rho_min the prefix with radius > rho is a rho-net: its points are
    pairwise more than rho apart and every point lies within rho of one.
    """
    d = np.sqrt(np.sum((points - points[0]) ** 2, axis=1))
    picks, radii = [0], [np.inf]
    while True:
        j = int(np.argmax(d))
        if d[j] <= rho_min:
            break
        picks.append(j)
        radii.append(float(d[j]))
        d = np.minimum(d, np.sqrt(np.sum((points - points[j]) ** 2, axis=1)))
    return np.array(picks, dtype=np.intp), np.array(radii)


def assouad_estimate(cloud, r_list=None, rho_list=None, seed: int = 0) -> CoveringStats:
    """Fit log N(x, r, rho) <= log M + s log(r / rho) by least squares.

    N(r, rho) is the largest number, over sampled centres x, of points of a
    greedy rho-net of the whole cloud lying in B(x, r). Nets at all scales are
    prefixes of one traversal, so N is monotone in rho by construction, and
    counting net points instead of covering each ball separately avoids the
    perimeter inflation of small local coverings. The fit shares the slope s
    across radii but gives each r its own intercept; M_est is the largest.
    Pairs with rho below the cloud resolution are excluded.
    """
    cloud = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    if len(cloud) == 1:
        return CoveringStats(scales=[], counts=[], s_est=0.0, M_est=1.0, residual=0.0)
    cloud = _reduce(cloud)
    diam = cloud.diameter()
    res = _net_resolution(cloud)
    if r_list is None:
        r_list = [diam / 2, diam / 4]
    if rho_list is None:
        top = min(r_list) / 2
        lo = max(2 * res, top / 32)
        rho_list = list(np.geomspace(top, lo, 8)) if lo < top else [top]
    r_list = sorted({float(r) for r in r_list}, reverse=True)
    rho_list = sorted({float(p) for p in rho_list}, reverse=True)
    if max(rho_list) >= min(r_list):
        raise DomainError("every rho must be smaller than every paired r")

    pairs, excluded = [], []
    for r in r_list:
        for rho in rho_list:
            (pairs if rho >= res else excluded).append((r, rho))
    if len(pairs) < 3:
        raise DomainError(f"only {len(pairs)} usable (r, rho) pairs; need at least 3")

    pts = cloud.points
    picks, radii = greedy_net(pts, min(rho for _, rho in pairs))
    net_pts = pts[picks]
    centers = _centers(len(cloud), seed)
    # distances from each centre to every net point, computed once
    dist = np.sqrt(np.sum((net_pts[None, :, :] - pts[centers][:, None, :]) ** 2, axis=2))
    counts = []
    for r, rho in pairs:
        in_net = radii > rho
        counts.append(int(np.max(np.count_nonzero((dist <= r) & in_net[None, :], axis=1))))

    rs = sorted({r for r, _ in pairs}, reverse=True)
    X = np.array([[1.0 if r == rr else 0.0 for rr in rs] + [np.log(r / rho)] for r, rho in pairs])
    y = np.log(counts)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.sqrt(np.mean((X @ coef - y) ** 2)))
    return CoveringStats(
        scales=pairs,
        counts=counts,
        s_est=float(coef[-1]),
        M_est=float(np.exp(np.max(coef[:-1]))),
        residual=resid,
        excluded=excluded,
    )


def box_counting(cloud, scales=None) -> float:
    """Log-log slope of occupied-box counts.

    Scales are restricted to [4 x resolution, diameter / 4]; fewer than two
    admissible scales is an error.
    """
    cloud = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    if len(cloud) == 1:
        return 0.0
    pts = cloud.points
    res = cloud.resolution()
    diam = cloud.diameter()
    lo, hi = 4 * res, diam / 4
    if scales is None:
        scales = np.geomspace(hi, lo, 8) if lo < hi else []
    scales = [float(e) for e in scales if lo * (1 - 1e-12) <= e <= hi * (1 + 1e-12)]
    if len(scales) < 2:
        raise DomainError("degenerate slope window: fewer than two admissible box sizes")
    origin = pts.min(axis=0)
    counts = []
    for eps in scales:
        boxes = np.floor((pts - origin) / eps).astype(np.int64)
        counts.append(len(np.unique(boxes, axis=0)))
    slope, _ = np.polyfit(np.log(1.0 / np.array(scales)), np.log(counts), 1)
    return float(slope)


def gamma_threshold(s: float, m: float) -> float:
    """(2 + m) / (2 (m - s)); infinite when m <= s."""
    if m <= s:
        return float("inf")
    return (2 + m) / (2 * (m - s))


def check_gates(s_est: float, m: int, gamma: float) -> dict:
    """Pass/fail record for every dimension and exponent condition."""
    if m < 1:
        raise DomainError("m must be at least 1")
    if s_est < 0:
        raise DomainError("s_est must be non-negative")
    thr = gamma_threshold(s_est, m)
    m_needed = max(s_est + 1, 6)
    gates = {
        "m_gt_max_s_plus_1_and_6": {"pass": bool(m > m_needed), "need_m_above": m_needed},
        "m_gt_s": {"pass": bool(m > s_est)},
        "gamma_above_threshold": {
            "pass": bool(gamma > thr),
            "threshold": thr if np.isfinite(thr) else None,
            "satisfiable": bool(np.isfinite(thr)),
        },
        "gamma_at_most_one": {"pass": bool(gamma <= 1)},
    }
    return {
        "s_est": s_est,
        "m": m,
        "gamma": gamma,
        "gates": gates,
        "all_pass": all(g["pass"] for g in gates.values()),
    }


def choose_gamma(s_est: float, m: int) -> float:
    """Midpoint between the exponent threshold and 1, capped at 1."""
    return min((gamma_threshold(s_est, m) + 1) / 2, 1.0)
