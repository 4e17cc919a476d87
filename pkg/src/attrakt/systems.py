"""Upstream dissipative systems lifted into the ambient space R^N.

Every system is written in its intrinsic coordinates x in R^d and lifted with
a random N x d matrix Q with orthonormal columns. The ambient field is

    G(u) = Q V(Q^T u) - (u - Q Q^T u)

so the orthogonal complement of range(Q) decays at unit rate and the global
attractor lies in range(Q); on that subspace G coincides with Q V(Q^T u).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .errors import DomainError
from .geometry import PointCloud
from .ode import integrate_batch

log = logging.getLogger(__name__)

__all__ = [
    "KINDS",
    "SystemSpec",
    "AttractorSample",
    "intrinsic_field",
    "vector_field_G",
    "evolve",
    "evolve_batch",
    "absorbing_ball",
    "lorenz_ball_radius",
    "lorenz_lyapunov",
    "sample_attractor",
    "farthest_point_thin",
    "estimate_lipschitz_G",
]

KINDS = ("PointSink", "PlanarCycle", "Lorenz63", "GalerkinKS")

_DEFAULT_PARAMS = {
    "PointSink": {"dim": 2.0},
    "PlanarCycle": {},
    "Lorenz63": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
    "GalerkinKS": {"length": 22.0, "modes": 8.0, "ball_radius": 0.5},
}

# time spent recording candidate points after burn-in, per trajectory
_RECORD_SPAN = {"PointSink": 1.0, "PlanarCycle": 2 * math.pi, "Lorenz63": 20.0, "GalerkinKS": 50.0}


@dataclass
class SystemSpec:
    kind: str
    params: dict = field(default_factory=dict)
    ambient_dim: int = 32
    lift_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown system kind {self.kind!r}; expected one of {KINDS}")
        merged = dict(_DEFAULT_PARAMS[self.kind])
        merged.update({k: float(v) for k, v in self.params.items()})
        self.params = merged
        if self.intrinsic_dim > self.ambient_dim:
            raise DomainError(
                f"intrinsic dimension {self.intrinsic_dim} exceeds ambient dimension {self.ambient_dim}"
            )
        self._lift = None

    @property
    def intrinsic_dim(self) -> int:
        if self.kind == "PointSink":
            return int(self.params["dim"])
        if self.kind == "PlanarCycle":
            return 2
        if self.kind == "Lorenz63":
            return 3
        return 2 * int(self.params["modes"])

    @property
    def lift(self) -> np.ndarray:
        """N x d matrix with orthonormal columns (QR of a seeded Gaussian)."""
        if self._lift is None:
            rng = np.random.default_rng(self.lift_seed)
            g = rng.standard_normal((self.ambient_dim, self.intrinsic_dim))
            q, r = np.linalg.qr(g)
            q = q * np.sign(np.diag(r))  # unique QR factor
            err = np.abs(q.T @ q - np.eye(self.intrinsic_dim)).max()
            if err > 1e-12:
                raise DomainError(f"lift is not orthonormal to 1e-12 (error {err:.3g})")
            self._lift = q
        return self._lift

    def to_intrinsic(self, u) -> np.ndarray:
        return np.asarray(u, dtype=np.float64) @ self.lift

    def to_ambient(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.lift.T

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": dict(sorted(self.params.items())),
            "ambient_dim": self.ambient_dim,
            "lift_seed": self.lift_seed,
        }


# -- intrinsic fields ---------------------------------------------------------

def _ks_field(X: np.ndarray, length: float, modes: int) -> np.ndarray:
    """Fourier-Galerkin truncation of u_t = -u_xx - u_xxxx - u u_x.

    State layout: (a_1..a_K, b_1..b_K) with u = sum a_k cos(kqx) + b_k sin(kqx),
    q = 2 pi / length. The quadratic term is evaluated on a 4K-point grid,
    which is alias-free for products of two K-mode fields.
    """
    K = modes
    q = 2 * np.pi / length
    k = np.arange(1, K + 1)
    a, b = X[:, :K], X[:, K:]
    lin = (q * k) ** 2 - (q * k) ** 4
    ng = 4 * K
    uh = np.zeros((X.shape[0], ng // 2 + 1), dtype=complex)
    uh[:, 1:K + 1] = 0.5 * (a - 1j * b) * ng
    u = np.fft.irfft(uh, n=ng, axis=1)
    wh = np.fft.rfft(u * u, axis=1)[:, 1:K + 1] / ng
    nl = -0.5j * (q * k) * wh  # coefficient of exp(ikqx) in -(u^2)_x / 2
    da = lin * a + 2 * nl.real
    db = lin * b - 2 * nl.imag
    return np.concatenate([da, db], axis=1)


def intrinsic_field(spec: SystemSpec, X) -> np.ndarray:
    """The field V in intrinsic coordinates; accepts shape (d,) or (k, d)."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != spec.intrinsic_dim:
        raise DomainError(f"expected intrinsic dimension {spec.intrinsic_dim}, got {X.shape[1]}")
    p = spec.params
    if spec.kind == "PointSink":
        out = -X
    elif spec.kind == "PlanarCycle":
        x, y = X[:, 0], X[:, 1]
        r2 = x * x + y * y
        out = np.stack([x - y - x * r2, x + y - y * r2], axis=1)
    elif spec.kind == "Lorenz63":
        x, y, z = X[:, 0], X[:, 1], X[:, 2]
        out = np.stack(
            [p["sigma"] * (y - x), x * (p["rho"] - z) - y, x * y - p["beta"] * z], axis=1
        )
    else:
        out = _ks_field(X, p["length"], int(p["modes"]))
    return out[0] if single else out


def vector_field_G(spec: SystemSpec, u) -> np.ndarray:
    """Ambient field G(u); accepts shape (N,) or (k, N)."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != spec.ambient_dim:
        raise DomainError(f"expected ambient dimension {spec.ambient_dim}, got {u.shape[-1]}")
    Q = spec.lift
    x = u @ Q
    proj = x @ Q.T
    return intrinsic_field(spec, x) @ Q.T - (u - proj)


def evolve_batch(spec: SystemSpec, U0, t: float, tol: float = 1e-9) -> np.ndarray:
    if t < 0:
        raise DomainError("evolution time must be non-negative")
    U0 = np.atleast_2d(np.asarray(U0, dtype=np.float64))
    if t == 0:
        return U0.copy()
    trajs = integrate_batch(lambda U: vector_field_G(spec, U), U0, t, tol, keep_from=t)
    bad = [i for i, tr in enumerate(trajs) if tr.failed]
    if bad:
        from .errors import IntegratorError

        raise IntegratorError(
            f"step-size underflow while evolving {spec.kind} (rows {bad[:5]}, "
            f"stopped at t={trajs[bad[0]].final_time:.6g})"
        )
    return np.array([tr.final_state for tr in trajs])


def evolve(spec: SystemSpec, u0, t: float, tol: float = 1e-9) -> np.ndarray:
    """S(t) u0 by adaptive integration of the ambient field."""
    u0 = np.asarray(u0, dtype=np.float64)
    return evolve_batch(spec, u0[None, :], t, tol)[0]


# -- absorbing balls ------------------------------------------------------------

def lorenz_lyapunov(X, rho: float, sigma: float) -> np.ndarray:
    """V = x^2 + y^2 + (z - rho - sigma)^2 in intrinsic Lorenz coordinates."""
    X = np.atleast_2d(X)
    return X[:, 0] ** 2 + X[:, 1] ** 2 + (X[:, 2] - rho - sigma) ** 2


def lorenz_ball_radius(sigma: float, rho: float, beta: float) -> float:
    """Radius of the ball {V <= R^2} absorbing every Lorenz trajectory.

    dV/dt = -2(sigma x^2 + y^2 + beta (z - c)^2 - beta c^2), c = (rho+sigma)/2,
    is negative outside the ellipsoid E where the bracket vanishes, so R^2 is
    the maximum of V over E; found by a dense angular sweep of E followed by a
    local refinement.
    """
    c = 0.5 * (rho + sigma)
    semi = np.array([math.sqrt(beta * c * c / sigma), math.sqrt(beta * c * c), c])

    def neg_v(ang):
        th, ph = ang
        pt = np.array([
            semi[0] * math.sin(th) * math.cos(ph),
            semi[1] * math.sin(th) * math.sin(ph),
            c + semi[2] * math.cos(th),
        ])
        return -float(lorenz_lyapunov(pt, rho, sigma)[0])

    th = np.linspace(0, np.pi, 181)
    ph = np.linspace(0, 2 * np.pi, 361)
    T, P = np.meshgrid(th, ph, indexing="ij")
    pts = np.stack([
        semi[0] * np.sin(T) * np.cos(P),
        semi[1] * np.sin(T) * np.sin(P),
        c + semi[2] * np.cos(T),
    ], axis=-1).reshape(-1, 3)
    vals = lorenz_lyapunov(pts, rho, sigma)
    i = int(np.argmax(vals))
    start = np.array([T.reshape(-1)[i], P.reshape(-1)[i]])
    res = minimize(neg_v, start, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12})
    return math.sqrt(max(-res.fun, float(vals[i])))


def absorbing_ball(spec: SystemSpec) -> tuple[np.ndarray, float]:
    """(centre, radius) of the intrinsic ball initial conditions are drawn from."""
    d = spec.intrinsic_dim
    p = spec.params
    if spec.kind == "PointSink":
        return np.zeros(d), 2.0
    if spec.kind == "PlanarCycle":
        return np.zeros(d), 3.0
    if spec.kind == "Lorenz63":
        r = lorenz_ball_radius(p["sigma"], p["rho"], p["beta"])
        return np.array([0.0, 0.0, p["rho"] + p["sigma"]]), r
    return np.zeros(d), p["ball_radius"]


# -- sampling -----------------------------------------------------------------

@dataclass
class AttractorSample:
    cloud: PointCloud
    field_values: np.ndarray
    burn_in: float
    thinning_radius: float
    spec: Optional[SystemSpec] = None
    intrinsic: Optional[np.ndarray] = None
    short: bool = False  # thinning could not reach the requested size

    def __post_init__(self):
        fv = np.asarray(self.field_values, dtype=np.float64)
        if fv.shape != self.cloud.points.shape:
            raise DomainError("field_values must align with the cloud")
        self.field_values = fv

    def __len__(self):
        return len(self.cloud)

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points


def farthest_point_thin(pool: np.ndarray, n: int, thin: float) -> np.ndarray:
    """Greedy farthest-point-first selection starting from ``pool[0]``.

    Stops after ``n`` picks or once the farthest remaining candidate is closer
    than ``thin`` to the selection. Returns the selected indices.
    """
    pool = np.asarray(pool, dtype=np.float64)
    d = np.sqrt(np.sum((pool - pool[0]) ** 2, axis=1))
    chosen = [0]
    while len(chosen) < n:
        j = int(np.argmax(d))
        if d[j] < thin:
            break
        chosen.append(j)
        d = np.minimum(d, np.sqrt(np.sum((pool - pool[j]) ** 2, axis=1)))
    return np.array(chosen, dtype=np.intp)


def _uniform_ball(rng, center, radius):
    d = len(center)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    return center + radius * rng.random() ** (1.0 / d) * v


def sample_attractor(
    spec: SystemSpec,
    n: int,
    burn_in: float,
    thin: float,
    seed: int = 0,
    *,
    n_traj: Optional[int] = None,
    pool_factor: int = 8,
    tol: float = 1e-10,
) -> AttractorSample:
    """Sample the global attractor from long trajectories.

    Initial conditions are drawn uniformly from the system's absorbing ball,
    one independent RNG stream per trajectory. Each trajectory is integrated
    for ``burn_in`` time units and then recorded over a system-specific span;
    the pooled states are thinned farthest-point-first to at most ``n`` points
    no two of which are closer than ``thin``.
    """
    if n < 1:
        raise DomainError("n must be at least 1")
    if burn_in <= 0:
        raise DomainError("burn_in must be positive")
    if n_traj is None:
        n_traj = max(4, min(64, n // 25))
    center, radius = absorbing_ball(spec)
    streams = np.random.SeedSequence(seed).spawn(n_traj)
    X0 = np.array([_uniform_ball(np.random.default_rng(s), center, radius) for s in streams])

    def fld(X):
        return intrinsic_field(spec, X)

    settled = integrate_batch(fld, X0, burn_in, tol, keep_from=burn_in)
    if any(tr.failed for tr in settled):
        raise DomainError("a burn-in trajectory failed to integrate")
    span = _RECORD_SPAN[spec.kind]
    recorded = integrate_batch(fld, np.array([tr.final_state for tr in settled]), span, tol)
    per_traj = max(2, math.ceil(pool_factor * n / n_traj))
    t_rec = np.linspace(0.0, span, per_traj, endpoint=False)
    pool = []
    for tr in recorded:
        if tr.failed:
            raise DomainError(f"sampling trajectory failed with status {tr.status}")
        pool.append(tr.at(t_rec))
    pool = np.concatenate(pool)

    idx = farthest_point_thin(pool, n, thin)
    intrinsic = pool[idx]
    short = len(idx) < n
    if short:
        log.warning("thinning reached only %d of %d requested points", len(idx), n)
    U = spec.to_ambient(intrinsic)
    return AttractorSample(
        cloud=PointCloud(U),
        field_values=vector_field_G(spec, U),
        burn_in=burn_in,
        thinning_radius=thin,
        spec=spec,
        intrinsic=intrinsic,
        short=short,
    )


def estimate_lipschitz_G(sample: AttractorSample, *, exhaustive_limit: int = 2000, k: int = 32) -> float:
    """max ||G(u) - G(v)|| / ||u - v|| over sample pairs.

    All pairs are scanned up to ``exhaustive_limit`` points; beyond that only
    each point's ``k`` nearest neighbours. Coincident points are skipped.
    """
    U = sample.points
    Gv = sample.field_values
    n = len(U)
    if n < 2:
        raise DomainError("need at least two points to estimate a Lipschitz constant")
    best = 0.0
    if n <= exhaustive_limit:
        for i in range(n - 1):
            du = np.sqrt(np.sum((U[i + 1:] - U[i]) ** 2, axis=1))
            dg = np.sqrt(np.sum((Gv[i + 1:] - Gv[i]) ** 2, axis=1))
            ok = du > 0
            if np.any(ok):
                best = max(best, float(np.max(dg[ok] / du[ok])))
        return best
    _, nbr = sample.cloud.tree.query(U, k=min(k + 1, n))
    for col in range(1, nbr.shape[1]):
        j = nbr[:, col]
        du = np.sqrt(np.sum((U[j] - U) ** 2, axis=1))
        dg = np.sqrt(np.sum((Gv[j] - Gv) ** 2, axis=1))
        ok = du > 0
        if np.any(ok):
            best = max(best, float(np.max(dg[ok] / du[ok])))
    return best
