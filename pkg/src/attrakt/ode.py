"""Adaptive Dormand-Prince 5(4) integration for ensembles of trajectories.

Each trajectory in a batch carries its own time, step size and accept/reject
history; only the vector-field evaluation is shared, so a field written for
arrays of shape (k, m) is evaluated once per stage for the whole ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError

__all__ = ["Trajectory", "integrate", "integrate_batch"]

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = _B - np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    phi_values: Optional[np.ndarray] = None
    accepted_steps: int = 0
    rejected_steps: int = 0
    status: str = "ok"  # ok | stopped | underflow | stagnation
    final_state: np.ndarray = dc_field(default=None)
    final_time: float = 0.0

    @property
    def failed(self) -> bool:
        return self.status in ("underflow", "stagnation")

    def at(self, t) -> np.ndarray:
        """Cubic Hermite dense output between stored accepted steps."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        ts = self.times
        if np.any(t < ts[0] - 1e-12) or np.any(t > ts[-1] + 1e-12):
            raise DomainError("dense output requested outside the stored time span")
        i = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2)
        if len(ts) == 1:
            return np.repeat(self.states[:1], len(t), axis=0)
        h = (ts[i + 1] - ts[i])[:, None]
        s = (t - ts[i])[:, None] / h
        y0, y1 = self.states[i], self.states[i + 1]
        f0, f1 = self.derivs[i], self.derivs[i + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


Field = Callable[[np.ndarray], np.ndarray]


def _initial_step(field, y, f, tol, t_end):
    # Hairer-Norsett-Wanner heuristic, vectorised over the batch
    sc = tol * (1.0 + np.abs(y))
    d0 = np.sqrt(np.mean((y / sc) ** 2, axis=1))
    d1 = np.sqrt(np.mean((f / sc) ** 2, axis=1))
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    h0 = np.minimum(h0, t_end)
    y1 = y + h0[:, None] * f
    f1 = field(y1)
    d2 = np.sqrt(np.mean(((f1 - f) / sc) ** 2, axis=1)) / h0
    dm = np.maximum(d1, d2)
    h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(dm, 1e-300)) ** 0.2)
    return np.minimum(np.minimum(100 * h0, h1), t_end)


def integrate_batch(
    field: Field,
    x0,
    t_end: float,
    tol: float = 1e-8,
    *,
    h_max: float | None = None,
    step_cap: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    phi: Callable[[np.ndarray], np.ndarray] | None = None,
    stop: Callable[[np.ndarray], np.ndarray] | None = None,
    stall: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    keep_from: float = 0.0,
    monitor: Callable | None = None,
    max_steps: int = 10_000_000,
) -> list[Trajectory]:
    """Integrate dx/dt = field(x) from every row of ``x0`` up to ``t_end``.

    The local error of every accepted step satisfies
    ``|err_i| <= tol * (1 + max(|y_i|, |y_new_i|))`` componentwise.

    step_cap(Y, F) -> per-row upper bound on the step size.
    stop(Y) -> mask; a trajectory whose accepted state satisfies it ends with
    status "stopped".
    stall(Y, F) -> mask; three consecutive accepted stalled states end the
    trajectory with status "stagnation".
    keep_from : states before this time are not stored (the first state and
    the final state always are).
    monitor(ids, t0, y0, phi0, t1, y1, phi1) is called after every batch of
    accepted steps, ``phi*`` being None when ``phi`` is not given.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    if t_end < 0:
        raise DomainError("t_end must be non-negative")
    Y = np.array(x0, dtype=np.float64, copy=True)
    if Y.ndim == 1:
        Y = Y[None, :]
    k, m = Y.shape
    F = field(Y)
    P = phi(Y) if phi is not None else None

    times = [[0.0] for _ in range(k)]
    states = [[Y[i].copy()] for i in range(k)]
    derivs = [[F[i].copy()] for i in range(k)]
    phis = [[float(P[i])] for i in range(k)] if P is not None else None
    accepted = np.zeros(k, dtype=np.int64)
    rejected = np.zeros(k, dtype=np.int64)
    status = ["ok"] * k
    stall_count = np.zeros(k, dtype=np.int64)
    T = np.zeros(k)

    if t_end == 0.0:
        return _assemble(times, states, derivs, phis, accepted, rejected, status, Y, T)

    H = _initial_step(field, Y, F, tol, t_end)
    hmax = t_end if h_max is None else min(h_max, t_end)
    active = np.ones(k, dtype=bool)
    if stop is not None:
        stopped0 = np.asarray(stop(Y), dtype=bool)
        for i in np.flatnonzero(stopped0):
            status[i] = "stopped"
        active &= ~stopped0
    h_floor = 1e-14 * t_end

    for _ in range(max_steps):
        ids = np.flatnonzero(active)
        if ids.size == 0:
            break
        y, f, t = Y[ids], F[ids], T[ids]
        h = np.minimum(H[ids], hmax)
        if step_cap is not None:
            h = np.minimum(h, step_cap(y, f))
        h = np.minimum(h, t_end - t)
        under = h < h_floor
        if np.any(under):
            # the final sliver before t_end is never an underflow
            at_end = (t_end - t) <= h_floor
            bad = under & ~at_end
            for i in ids[bad]:
                status[i] = "underflow"
                active[i] = False
            for i in ids[under & at_end]:
                active[i] = False
            keep = ~under
            ids, y, f, t, h = ids[keep], y[keep], f[keep], t[keep], h[keep]
            if ids.size == 0:
                continue

        hc = h[:, None]
        K = [f]
        for s in range(1, 7):
            ys = y + hc * sum(a * K[j] for j, a in enumerate(_A[s]) if a != 0.0)
            K.append(field(ys))
        y_new = y + hc * sum(b * K[j] for j, b in enumerate(_B) if b != 0.0)
        f_new = K[6]
        err = hc * sum(e * K[j] for j, e in enumerate(_E) if e != 0.0)
        sc = tol * (1.0 + np.maximum(np.abs(y), np.abs(y_new)))
        en = np.max(np.abs(err) / sc, axis=1)
        finite = np.all(np.isfinite(y_new), axis=1) & np.isfinite(en)
        en = np.where(finite, en, np.inf)
        ok = en <= 1.0

        with np.errstate(divide="ignore"):
            fac = np.where(en == 0, _MAX_FACTOR, _SAFETY * en ** -0.2)
        fac = np.clip(fac, _MIN_FACTOR, _MAX_FACTOR)
        fac = np.where(ok, fac, np.minimum(fac, 1.0))
        H[ids] = h * fac
        rejected[ids[~ok]] += 1

        acc = ids[ok]
        if acc.size == 0:
            continue
        t_old, y_old, f_old = T[acc].copy(), Y[acc].copy(), F[acc].copy()
        p_old = None
        if P is not None:
            p_old = P[acc].copy()
        T[acc] = t[ok] + h[ok]
        Y[acc] = y_new[ok]
        F[acc] = f_new[ok]
        accepted[acc] += 1
        yn = Y[acc]
        if phi is not None:
            P[acc] = phi(yn)
        if monitor is not None:
            monitor(acc, t_old, y_old, p_old, T[acc], yn, None if P is None else P[acc])

        done = T[acc] >= t_end
        stop_mask = np.zeros(acc.size, dtype=bool)
        if stop is not None:
            stop_mask = np.asarray(stop(yn), dtype=bool)
        stall_mask = np.zeros(acc.size, dtype=bool)
        if stall is not None:
            now = np.asarray(stall(yn, F[acc]), dtype=bool)
            stall_count[acc] = np.where(now, stall_count[acc] + 1, 0)
            stall_mask = stall_count[acc] >= 3

        for j, i in enumerate(acc):
            last = done[j] or stop_mask[j] or stall_mask[j]
            if T[i] >= keep_from or last:
                if t_old[j] < keep_from and times[i][-1] < t_old[j]:
                    # the step straddling keep_from needs its left end for dense output
                    times[i].append(float(t_old[j]))
                    states[i].append(y_old[j])
                    derivs[i].append(f_old[j])
                    if phis is not None:
                        phis[i].append(float(p_old[j]))
                times[i].append(float(T[i]))
                states[i].append(Y[i].copy())
                derivs[i].append(F[i].copy())
                if phis is not None:
                    phis[i].append(float(P[i]))
            if last:
                active[i] = False
                if stall_mask[j]:
                    status[i] = "stagnation"
                elif stop_mask[j]:
                    status[i] = "stopped"
    else:
        for i in np.flatnonzero(active):
            status[i] = "underflow"

    return _assemble(times, states, derivs, phis, accepted, rejected, status, Y, T)


def _assemble(times, states, derivs, phis, accepted, rejected, status, Y, T):
    out = []
    for i in range(len(times)):
        out.append(
            Trajectory(
                times=np.array(times[i]),
                states=np.array(states[i]),
                derivs=np.array(derivs[i]),
                phi_values=None if phis is None else np.array(phis[i]),
                accepted_steps=int(accepted[i]),
                rejected_steps=int(rejected[i]),
                status=status[i],
                final_state=Y[i].copy(),
                final_time=float(T[i]),
            )
        )
    return out


def integrate(field: Field, x0, t_end: float, tol: float = 1e-8, **kwargs) -> Trajectory:
    """Single-trajectory front end to :func:`integrate_batch`.

    ``field`` may act on a single point of shape (m,); it is wrapped so the
    batch machinery sees shape (1, m).
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)

    def batched(Y):
        return np.asarray(field(Y[0]), dtype=np.float64).reshape(1, -1)

    wrapped = {}
    for name in ("phi", "stop"):
        fn = kwargs.pop(name, None)
        if fn is not None:
            wrapped[name] = (lambda g: (lambda Y: np.atleast_1d(g(Y[0]))))(fn)
    for name in ("step_cap", "stall"):
        fn = kwargs.pop(name, None)
        if fn is not None:
            wrapped[name] = (lambda g: (lambda Y, F: np.atleast_1d(g(Y[0], F[0]))))(fn)
    return integrate_batch(batched, x0[None, :], t_end, tol, **wrapped, **kwargs)[0]
