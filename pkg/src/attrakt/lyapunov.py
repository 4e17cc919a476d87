"""Softmin Lyapunov surrogate, smooth cutoffs and the combined vector field.

    phi(x) = -(1/beta) log( (1/n) sum_i exp(-beta |x - p_i|^2) )

satisfies min_i d_i^2 <= phi <= min_i d_i^2 + ln(n)/beta, so the sublevel set
P = {phi <= delta} sits inside the sqrt(delta)-neighbourhood of the cloud.
The combined field is theta g - (1 - theta_tilde) grad phi with
theta = chi(phi/delta) and theta_tilde = chi(phi/delta_collar).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import BetaLadderError, DomainError
from .extension import ExtendedField, _from_terms, mcshane_from_dists, modulus_eval
from .geometry import LeafPartition, PointCloud, sq_dists, sq_norms

log = logging.getLogger(__name__)

__all__ = [
    "LyapunovField",
    "CombinedField",
    "LadderResult",
    "smooth_step",
    "make_lyapunov",
    "phi",
    "grad_phi",
    "cutoff_theta",
    "combined_field",
    "sample_ball",
    "sample_shell",
    "beta_ladder",
    "sup_grad_on_cloud",
]


def _dist2(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Squared distances, shape (k, n). Same arithmetic as the extension
    evaluator, so both can share one matrix."""
    return sq_dists(C, X)


def _as_batch(x):
    X = np.asarray(x, dtype=np.float64)
    return X.ndim == 1, np.atleast_2d(X)


def smooth_step(s):
    """C-infinity step: 1 for s <= 1/3, 0 for s >= 2/3, strictly decreasing between."""
    s = np.asarray(s, dtype=np.float64)
    u = np.clip(3.0 * s - 1.0, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
        b = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
    out = a / (a + b)
    out = np.where(s <= 1 / 3, 1.0, np.where(s >= 2 / 3, 0.0, out))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LyapunovField:
    cloud: PointCloud
    beta: float
    delta: float
    eps: Optional[float] = None
    delta_collar: Optional[float] = None

    def __post_init__(self):
        if self.delta_collar is None:
            object.__setattr__(self, "delta_collar", self.delta / 10)
        if self.beta <= 0 or self.delta <= 0 or self.delta_collar <= 0:
            raise DomainError("beta, delta and delta_collar must be positive")
        need = 3 * math.log(self.n) / self.delta
        if self.beta < need:
            raise DomainError(f"beta={self.beta} below 3 ln(n)/delta = {need}")
        if self.eps is not None and self.delta > self.eps**2:
            raise DomainError("delta must not exceed eps^2")

    @property
    def n(self) -> int:
        return len(self.cloud)

    @property
    def smoothing_offset(self) -> float:
        return math.log(self.n) / self.beta

    def _terms(self, d2):
        dmin = d2.min(axis=1)
        e = np.exp(-self.beta * (d2 - dmin[:, None]))
        S = e.sum(axis=1)
        return dmin, e, S

    def phi_from_d2(self, d2):
        dmin, _, S = self._terms(d2)
        # written as dmin + (ln n - ln S)/beta with 1 <= S <= n, so the
        # sandwich bounds hold in floating point, not only in exact arithmetic
        return dmin + (math.log(self.n) - np.log(S)) / self.beta

    def weights_from_d2(self, d2):
        _, e, S = self._terms(d2)
        return e / S[:, None]

    def phi(self, x):
        single, X = _as_batch(x)
        out = self.phi_from_d2(_dist2(X, self.cloud.points))
        return float(out[0]) if single else out

    def weights(self, x):
        single, X = _as_batch(x)
        w = self.weights_from_d2(_dist2(X, self.cloud.points))
        return w[0] if single else w

    def grad_phi(self, x):
        single, X = _as_batch(x)
        w = self.weights_from_d2(_dist2(X, self.cloud.points))
        g = 2.0 * (X - w @ self.cloud.points)
        return g[0] if single else g

    def theta(self, x):
        return smooth_step(np.asarray(self.phi(x)) / self.delta)

    def theta_collar(self, x):
        return smooth_step(np.asarray(self.phi(x)) / self.delta_collar)

    def summary(self) -> dict:
        return {
            "beta": self.beta,
            "delta": self.delta,
            "delta_collar": self.delta_collar,
            "eps": self.eps,
            "n": self.n,
        }

    def save(self, path, extra: Optional[dict] = None) -> None:
        out = self.summary()
        out.update(extra or {})
        Path(path).write_text(json.dumps(out, indent=2, sort_keys=True))


def make_lyapunov(
    cloud: PointCloud,
    eps: float,
    *,
    delta: Optional[float] = None,
    beta: Optional[float] = None,
    thin: Optional[float] = None,
) -> LyapunovField:
    """Defaults: delta = eps^2/2, beta = max(3 ln(n)/delta, 10/thin^2)."""
    if eps <= 0:
        raise DomainError("eps must be positive")
    delta = eps**2 / 2 if delta is None else delta
    if beta is None:
        beta = 3 * math.log(len(cloud)) / delta
        if thin:
            beta = max(beta, 10 / thin**2)
        if beta == 0:
            beta = 1.0 / delta
    return LyapunovField(cloud=cloud, beta=float(beta), delta=float(delta), eps=eps)


def phi(lf: LyapunovField, x):
    return lf.phi(x)


def grad_phi(lf: LyapunovField, x):
    return lf.grad_phi(x)


def cutoff_theta(lf: LyapunovField, x):
    return lf.theta(x)


class CombinedField:
    """x -> theta(x) g(x) - (1 - theta_tilde(x)) grad phi(x), batched.

    ``gradient_only`` forces theta = 0 (pure descent on phi).

    With ``leaf_size`` set, the cloud is split into small leaves and each
    row only visits leaves that can matter. A leaf is skipped for the
    extension when no member can beat the current envelope (bound
    vmin_leaf + M omega(gap)), so extension values equal the full scan
    bitwise; it is skipped for the softmin when its terms sum to below
    1e-17 relative to the retained sum.
    """

    def __init__(
        self,
        lf: LyapunovField,
        ext: ExtendedField,
        gradient_only: bool = False,
        leaf_size: Optional[int] = 8,
        leaf_min: int = 1024,
    ):
        a, b = lf.cloud.points, ext.base.points
        if a.shape != b.shape or not np.array_equal(a, b):
            raise DomainError("Lyapunov field and extension are built on different clouds")
        self.lf = lf
        self.ext = ext
        self.gradient_only = gradient_only
        self._leaves = None
        # below ~1000 points the pruning bookkeeping costs more than a full scan
        if leaf_size is not None and lf.n > max(leaf_min, 2 * leaf_size):
            lv = LeafPartition(a, leaf_size)
            V = ext.base.g1_values
            self._leaves = lv
            self._leaf_vmin = V[lv.slots].min(axis=1)
            self._leaf_vmax = V[lv.slots].max(axis=1)
        # softmin terms below exp(-cut * beta) each are negligible in total
        self._cut = (math.log(lf.n) + 40.0) / lf.beta

    @property
    def dim(self) -> int:
        return self.lf.cloud.dim

    def _full(self, X):
        lf = self.lf
        C = lf.cloud.points
        d2 = _dist2(X, C)
        dmin, e, S = lf._terms(d2)
        ph = dmin + (math.log(lf.n) - np.log(S)) / lf.beta
        th = np.zeros(len(X)) if self.gradient_only else smooth_step(ph / lf.delta)
        tt = smooth_step(ph / lf.delta_collar)
        out = np.zeros_like(X)
        rows = th > 0
        if np.any(rows):
            out[rows] = th[rows, None] * mcshane_from_dists(self.ext, np.sqrt(d2[rows]))
        rows = tt < 1
        if np.any(rows):
            grad = 2.0 * (X[rows] - (e[rows] / S[rows, None]) @ C)
            out[rows] -= (1.0 - tt[rows, None]) * grad
        return ph, th, tt, out

    def _gathered_d2(self, X, idx, valid):
        d2 = sq_norms(self.lf.cloud.points[idx] - X[:, None, :])
        return np.where(valid, d2, np.inf)

    def parts(self, X):
        """(phi, theta, theta_tilde, field) for a batch of points."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self._leaves is None:
            return self._full(X)
        lf, ext, lv = self.lf, self.ext, self._leaves
        C = lf.cloud.points
        gap = lv.gaps(X)
        near = np.argmin(gap, axis=1)
        d2_near = self._gathered_d2(X, lv.slots[near], lv.valid[near])
        need = gap * gap - d2_near.min(axis=1)[:, None] < self._cut
        idx, valid = lv.gather(need, near)
        d2 = self._gathered_d2(X, idx, valid)
        ph = lf.phi_from_d2(d2)
        th = np.zeros(len(X)) if self.gradient_only else smooth_step(ph / lf.delta)
        tt = smooth_step(ph / lf.delta_collar)
        out = np.zeros_like(X)

        rows = np.flatnonzero(th > 0)
        if rows.size:
            V, M, mod = ext.base.g1_values, ext.M, ext.modulus
            # envelopes over the points already gathered bound what any
            # further leaf has to beat
            w = modulus_eval(mod, np.sqrt(d2[rows]))
            Vt = np.swapaxes(V[idx[rows]], 1, 2)
            spread = M[None, :, None] * w[:, None, :]
            up = np.min(Vt + spread, axis=-1)
            reach = M[None, None, :] * modulus_eval(mod, gap[rows])[:, :, None]
            more = np.any(self._leaf_vmin[None] + reach < up[:, None, :], axis=2)
            if ext.kind != "mcshane":
                lo = np.max(Vt - spread, axis=-1)
                more |= np.any(self._leaf_vmax[None] - reach > lo[:, None, :], axis=2)
            gidx, gvalid = lv.gather(more | need[rows], near[rows])
            gd = np.sqrt(self._gathered_d2(X[rows], gidx, gvalid))
            g = _from_terms(ext, np.swapaxes(V[gidx], 1, 2), modulus_eval(mod, gd))
            out[rows] = th[rows, None] * g

        rows = tt < 1
        if np.any(rows):
            wts = lf.weights_from_d2(d2[rows])
            cen = np.einsum("kq,kqm->km", wts, C[idx[rows]])
            out[rows] -= (1.0 - tt[rows, None]) * (2.0 * (X[rows] - cen))
        return ph, th, tt, out

    def __call__(self, x):
        single, X = _as_batch(x)
        out = self.parts(X)[3]
        return out[0] if single else out

    def phi(self, x):
        single, X = _as_batch(x)
        out = self.parts(X)[0]
        return float(out[0]) if single else out


def combined_field(lf: LyapunovField, ext: ExtendedField, x):
    return CombinedField(lf, ext)(x)


def sample_ball(center, radius: float, n: int, rng) -> np.ndarray:
    """Uniform samples in a Euclidean ball."""
    center = np.asarray(center, dtype=np.float64)
    m = center.size
    v = rng.standard_normal((n, m))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / m)
    return center + r[:, None] * v


def sample_shell(lf: LyapunovField, center, radius: float, n: int, rng, max_rounds: int = 50):
    """Points of B(center, radius) outside P, by rejection.

    Half are uniform in the ball; half are cloud points pushed out along a
    random direction to distance in [sqrt(delta), 3 sqrt(delta)], which
    samples the neighbourhood of the boundary of P where |grad phi| is
    smallest for a well-resolved cloud.
    """
    center = np.asarray(center, dtype=np.float64)
    pts = lf.cloud.points
    got = []
    total = 0
    for _ in range(max_rounds):
        k = n - total
        if k <= 0:
            break
        a = sample_ball(center, radius, k - k // 2, rng)
        idx = rng.integers(0, len(pts), k // 2)
        v = rng.standard_normal((k // 2, pts.shape[1]))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        rad = math.sqrt(lf.delta) * (1 + 2 * rng.random(k // 2))
        b = pts[idx] + rad[:, None] * v
        cand = np.vstack([a, b])
        keep = (np.linalg.norm(cand - center, axis=1) <= radius) & (lf.phi(cand) > lf.delta)
        got.append(cand[keep])
        total += int(keep.sum())
    if total < n:
        raise DomainError("rejection sampling of B minus P failed; is B much larger than P?")
    return np.vstack(got)[:n]


def sup_grad_on_cloud(lf: LyapunovField) -> float:
    return float(np.max(np.linalg.norm(lf.grad_phi(lf.cloud.points), axis=1)))


class LadderResult(NamedTuple):
    lf: LyapunovField
    steps: int
    g_min_found: float
    argmin: np.ndarray


def beta_ladder(
    lf: LyapunovField,
    center,
    radius: float,
    g_min: float,
    *,
    n_samples: int = 4096,
    seed: int = 0,
    max_steps: int = 8,
) -> LadderResult:
    """Double beta until no sampled point of B minus P has |grad phi| < g_min.

    Raises BetaLadderError after ``max_steps`` doublings, recording the
    offending point.
    """
    cur = lf
    for step in range(max_steps + 1):
        rng = np.random.default_rng([seed, step])
        S = sample_shell(cur, center, radius, n_samples, rng)
        gn = np.linalg.norm(cur.grad_phi(S), axis=1)
        k = int(np.argmin(gn))
        if gn[k] >= g_min:
            return LadderResult(cur, step, float(gn[k]), S[k])
        log.info("beta=%g: |grad phi|=%g < %g at a sampled point; doubling", cur.beta, gn[k], g_min)
        if step < max_steps:
            cur = replace(cur, beta=2 * cur.beta)
    raise BetaLadderError(
        f"|grad phi| = {gn[k]:.3e} < {g_min} at {S[k].tolist()} after {max_steps} doublings"
    )
