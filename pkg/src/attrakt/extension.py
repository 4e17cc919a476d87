"""Extension of the conjugated field g1 from L(A) to all of R^m.

The modulus of continuity is

    omega(r) = C0 r (log(C / r))^gamma,   0 < r <= r_c = C e^{-gamma},

held at its maximum C0 r_c gamma^gamma beyond the knee r_c, which keeps it
nondecreasing and concave on [0, inf). Each component is extended by the
infimal convolution g_j(x) = min_i [v_ij + M_j omega(|x - c_i|)].
The "midrange" kind averages that upper extension with the lower one,
max_i [v_ij - M_j omega(|x - c_i|)]; it keeps the interpolation property and
the modulus bound while cancelling the one-sided bias between base points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.integrate import quad

from .embedding import EmbeddedCloud
from .errors import DomainError
from .geometry import sq_dists, sq_norms
from .ode import integrate

__all__ = [
    "KINDS",
    "Modulus",
    "ExtendedField",
    "OsgoodResult",
    "make_modulus",
    "modulus_eval",
    "fit_mcshane_constant",
    "extend_field",
    "mcshane_eval",
    "mcshane_eval_scan",
    "mcshane_from_dists",
    "osgood_check",
    "separation_bound",
]

EXHAUSTIVE_PAIR_CAP = 4_000_000
KINDS = ("mcshane", "midrange")
# M is padded so the interpolation identity survives rounding of M * omega
_M_PAD = 1 + 1e-12


@dataclass(frozen=True)
class Modulus:
    C0: float
    C_L_eff: float
    gamma: float

    def __post_init__(self):
        if self.C0 <= 0 or self.C_L_eff <= 0:
            raise DomainError("C0 and C_L_eff must be positive")
        if not 0 <= self.gamma <= 1:
            raise DomainError("gamma must lie in [0, 1]")

    @property
    def r_c(self) -> float:
        return self.C_L_eff * math.exp(-self.gamma)

    @property
    def flat_value(self) -> float:
        """r (log(C/r))^gamma at the knee, i.e. r_c gamma^gamma."""
        return self.r_c * self.gamma**self.gamma

    @property
    def sup(self) -> float:
        return self.C0 * self.flat_value

    def __call__(self, r):
        return modulus_eval(self, r)

    def as_dict(self) -> dict:
        return {"C0": self.C0, "C_L_eff": self.C_L_eff, "gamma": self.gamma, "r_c": self.r_c}


def make_modulus(C_L: float, gamma: float, diameter: float, C0: float = 1.0) -> Modulus:
    """Raise C_L to e^gamma * diameter if needed so every data distance lies
    below the knee."""
    return Modulus(C0=C0, C_L_eff=max(C_L, math.exp(gamma) * diameter), gamma=gamma)


def modulus_eval(mod: Modulus, r):
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise DomainError("modulus is defined for r >= 0")
    rc = mod.r_c
    inner = np.minimum(r, rc)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = inner * np.log(mod.C_L_eff / inner) ** mod.gamma
    val = np.where(r > rc, mod.flat_value, val)
    val = np.where(r == 0, 0.0, val)
    out = mod.C0 * val
    return float(out) if out.ndim == 0 else out


def _pair_iter(C, V, block=256):
    n = len(C)
    for start in range(0, n - 1, block):
        rows = np.arange(start, min(start + block, n))
        d = np.sqrt(sq_norms(C[None, :, :] - C[rows, None, :]))
        dv = np.abs(V[rows, None, :] - V[None, :, :])
        upper = rows[:, None] < np.arange(n)[None, :]
        yield d[upper], dv[upper]


def _ratio_max(d, dv, mod, M):
    if np.any((d == 0) & np.any(dv > 0, axis=-1)):
        raise DomainError("coincident base points carry different field values")
    keep = d > 0
    if np.any(keep):
        w = modulus_eval(mod, d[keep])
        M = np.maximum(M, np.max(dv[keep] / w[:, None], axis=0))
    return M


def fit_mcshane_constant(cloud: EmbeddedCloud, mod: Modulus, *, seed: int = 0) -> np.ndarray:
    """Per-component M_j = max over distinct pairs |v_ij - v_kj| / omega(|c_i - c_k|).

    Exhaustive up to EXHAUSTIVE_PAIR_CAP pairs; above it, each point's 32
    nearest neighbours plus a random audit of 10^6 pairs.
    """
    C, V = cloud.points, np.asarray(cloud.g1_values, dtype=np.float64)
    n, m = V.shape
    M = np.zeros(m)
    if n < 2:
        return M
    if n * (n - 1) // 2 <= EXHAUSTIVE_PAIR_CAP:
        for d, dv in _pair_iter(C, V):
            M = _ratio_max(d, dv, mod, M)
    else:
        _, nbr = cloud.cloud.tree.query(C, k=min(33, n))
        for col in range(1, nbr.shape[1]):
            j = nbr[:, col]
            d = np.sqrt(sq_norms(C[j] - C))
            M = _ratio_max(d, np.abs(V[j] - V), mod, M)
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, 1_000_000)
        j = rng.integers(0, n, 1_000_000)
        d = np.sqrt(sq_norms(C[j] - C[i]))
        M = _ratio_max(d, np.abs(V[j] - V[i]), mod, M)
    return M * _M_PAD


@dataclass
class ExtendedField:
    base: EmbeddedCloud
    modulus: Modulus
    M: np.ndarray
    bound: float
    theory_C0: Optional[float] = None
    kind: str = "mcshane"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown extension kind {self.kind!r}; expected one of {KINDS}")
        V = self.base.g1_values
        self._vmin = V.min(axis=0)
        self._vmax = V.max(axis=0)

    @property
    def dim(self) -> int:
        return self.base.cloud.dim

    @property
    def M_vector(self) -> float:
        """Constant for the Euclidean norm of the vector field: sqrt(m) max_j M_j."""
        return math.sqrt(self.dim) * float(np.max(self.M)) if len(self.M) else 0.0

    def __call__(self, X) -> np.ndarray:
        return mcshane_eval_scan(self, X)

    def summary(self) -> dict:
        out = self.modulus.as_dict()
        out.update({"M": [float(v) for v in self.M], "bound": self.bound, "kind": self.kind})
        if self.theory_C0 is not None:
            out["C0_theory"] = self.theory_C0
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True))


def extend_field(
    cloud: EmbeddedCloud,
    mod: Modulus,
    theory_C0: Optional[float] = None,
    kind: str = "mcshane",
) -> ExtendedField:
    M = fit_mcshane_constant(cloud, mod)
    V = cloud.g1_values
    bound = float(np.max(np.max(np.abs(V), axis=0) + M * mod.sup)) if len(V) else 0.0
    return ExtendedField(base=cloud, modulus=mod, M=M, bound=bound, theory_C0=theory_C0, kind=kind)


def mcshane_eval_scan(field: ExtendedField, X) -> np.ndarray:
    """Linear-scan evaluation; accepts one point (m,) or a batch (k, m)."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    out = mcshane_from_dists(field, np.sqrt(sq_dists(field.base.points, X)))
    return out[0] if single else out


def mcshane_from_dists(field: ExtendedField, d: np.ndarray) -> np.ndarray:
    """Extension values from a precomputed (k, n) matrix of base-point distances."""
    return _from_terms(field, field.base.g1_values.T[None, :, :], modulus_eval(field.modulus, d))


def _from_terms(field, Vt, w):
    # Vt: base values laid out (k or 1, m, c); w: (k, c) modulus of the distances.
    # Reductions run along the last, contiguous axis.
    k, m = w.shape[0], Vt.shape[1]
    upper = np.empty((k, m))
    lower = None if field.kind == "mcshane" else np.empty((k, m))
    for j in range(m):
        spread = field.M[j] * w
        Vj = Vt[:, j, :]
        upper[:, j] = np.min(Vj + spread, axis=-1)
        if lower is not None:
            lower[:, j] = np.max(Vj - spread, axis=-1)
    if lower is None:
        return upper
    return 0.5 * (upper + lower)


def mcshane_eval(field: ExtendedField, x, k0: int = 8) -> np.ndarray:
    """Exact extension at one point with kd-tree pruning.

    Candidates are visited in order of distance. With d_k the distance of
    the farthest visited one, no unvisited point can lower the upper
    envelope below vmin_j + M_j omega(d_k), nor raise the lower envelope
    above vmax_j - M_j omega(d_k); once the current values clear both
    bounds the result equals the full scan.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    C = field.base.points
    V = field.base.g1_values
    n = len(C)
    tree = field.base.cloud.tree
    k = min(k0, n)
    while True:
        dist, idx = tree.query(x, k=k)
        idx = np.atleast_1d(idx)
        d = np.sqrt(sq_dists(C[idx], x))
        w = modulus_eval(field.modulus, d)
        spread = field.M[None, :] * w[:, None]
        upper = np.min(V[idx] + spread, axis=0)
        lower = np.max(V[idx] - spread, axis=0)
        if k == n:
            break
        reach = field.M * modulus_eval(field.modulus, float(np.atleast_1d(dist)[-1]) * (1 - 1e-12))
        done = np.all(upper <= field._vmin + reach)
        if field.kind != "mcshane":
            done = done and np.all(lower >= field._vmax - reach)
        if done:
            break
        k = min(2 * k, n)
    return upper if field.kind == "mcshane" else 0.5 * (upper + lower)


class OsgoodResult(NamedTuple):
    integral: float
    integral_half_eps: float
    increasing: bool
    divergent: bool


def _osgood_integral(mod: Modulus, eps: float, upper: float) -> float:
    # substitute r = e^s: dr / omega(r) = ds / (C0 (log C - s)^gamma)
    logC = math.log(mod.C_L_eff)

    def integrand(s):
        return 1.0 / (mod.C0 * (logC - s) ** mod.gamma)

    val, _ = quad(integrand, math.log(eps), math.log(upper), epsabs=0.0, epsrel=1e-13, limit=200)
    return val


def osgood_check(mod: Modulus, eps: float) -> OsgoodResult:
    """Quadrature of the integral of dr / omega(r) over [eps, min(1, r_c)].

    The verdict is analytic (divergent at 0+ iff gamma <= 1); the growth of
    the integral when eps is halved is reported alongside as corroboration.
    """
    upper = min(1.0, mod.r_c)
    if not 0 < eps < upper:
        raise DomainError(f"eps must lie in (0, {upper})")
    a = _osgood_integral(mod, eps, upper)
    b = _osgood_integral(mod, eps / 2, upper)
    return OsgoodResult(a, b, b > a, mod.gamma <= 1)


def separation_bound(mod: Modulus, M: float, r0: float, t, tol: float = 1e-12):
    """Solve dr/dt = M omega(r), r(0) = r0, returned at time(s) ``t``.

    Integrated in log r for accuracy at tiny r0. Non-finite values become inf.
    """
    if r0 <= 0:
        raise DomainError("r0 must be positive")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    scalar = np.ndim(t) == 0
    if M == 0 or np.all(t_arr == 0):
        out = np.full(t_arr.shape, float(r0))
        return float(out[0]) if scalar else out

    def rhs(y):
        with np.errstate(over="ignore", invalid="ignore"):
            r = np.exp(y)
            return M * modulus_eval(mod, r) / r

    traj = integrate(rhs, [math.log(r0)], float(t_arr.max()), tol)
    # a blown-up solve stops early; everything past its last time is infinite
    reached = t_arr <= traj.final_time
    logs = np.full(t_arr.shape, np.inf)
    if np.any(reached):
        logs[reached] = traj.at(t_arr[reached])[:, 0]
    with np.errstate(over="ignore"):
        out = np.exp(logs)
    out = np.where(np.isfinite(out), out, np.inf)
    return float(out[0]) if scalar else out
