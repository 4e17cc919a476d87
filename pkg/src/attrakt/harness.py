"""Verification of the combined flow: capture, invariance, limit set,
reproduction of the embedded dynamics and the separation envelope."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BetaLadderError, DomainError, IntegratorError
from .extension import separation_bound
from .geometry import PointCloud, hausdorff_distance, save_cloud_csv, semidistance
from .lyapunov import CombinedField, sample_ball, sample_shell
from .ode import Trajectory, integrate, integrate_batch
from .systems import SystemSpec, farthest_point_thin, vector_field_G

__all__ = [
    "integrate",
    "CaptureReport",
    "InvarianceReport",
    "XEstimate",
    "ReproductionReport",
    "UniquenessReport",
    "VerificationReport",
    "ball_center",
    "step_cap",
    "sample_in_P",
    "check_capture",
    "check_positive_invariance",
    "estimate_X",
    "check_trajectory_reproduction",
    "uniqueness_surrogate",
    "write_trajectory_csv",
    "write_gnuplot_script",
]

STALL_NORM = 1e-10


def ball_center(cf: CombinedField) -> np.ndarray:
    return cf.lf.cloud.points.mean(axis=0)


def step_cap(thin: float, fraction: float = 0.1):
    """h <= fraction * thin / |field(x)| per trajectory."""

    def cap(Y, F):
        nrm = np.linalg.norm(F, axis=1)
        return np.where(nrm > 0, fraction * thin / np.maximum(nrm, 1e-300), np.inf)

    return cap


def _stall(cf: CombinedField):
    delta = cf.lf.delta

    def stall(Y, F):
        return (np.linalg.norm(F, axis=1) < STALL_NORM) & (cf.phi(Y) > delta)

    return stall


def _thin_of(cf: CombinedField, thin: Optional[float]) -> float:
    if thin is not None:
        return thin
    if len(cf.lf.cloud) > 1:
        return cf.lf.cloud.resolution()
    return math.sqrt(cf.lf.delta)


def sample_in_P(cf: CombinedField, n: int, rng, max_rounds: int = 100) -> np.ndarray:
    """Points with phi <= delta: cloud points displaced by up to sqrt(delta),
    rejection-filtered on phi."""
    pts = cf.lf.cloud.points
    m = pts.shape[1]
    got, total = [], 0
    for _ in range(max_rounds):
        k = n - total
        if k <= 0:
            break
        k2 = 2 * k
        v = rng.standard_normal((k2, m))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = math.sqrt(cf.lf.delta) * rng.random(k2) ** (1.0 / m)
        cand = pts[rng.integers(0, len(pts), k2)] + r[:, None] * v
        cand = cand[cf.lf.phi(cand) <= cf.lf.delta][:k]
        got.append(cand)
        total += len(cand)
    if total < n:
        raise DomainError("could not sample enough points of P")
    return np.vstack(got)[:n]


# -- capture -------------------------------------------------------------------

@dataclass
class CaptureReport:
    C: float
    c: float
    delta: float
    bound_T: float
    capture_times: list
    captured_fraction: float
    all_within_bound: bool
    monotone_violations: int
    max_phi_increase: float
    n_samples: int
    g_min_point: list
    statuses: list
    trajectories: Optional[list] = dc_field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.captured_fraction == 1.0 and self.all_within_bound and self.monotone_violations == 0


def _refine_crossing(traj: Trajectory, phi, delta: float, iters: int = 60) -> float:
    """First time phi drops to delta, by bisection on the dense output of the
    last stored step."""
    ph = traj.phi_values
    if ph[0] <= delta:
        return 0.0
    j = int(np.argmax(ph <= delta))
    a, b = traj.times[j - 1], traj.times[j]
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if phi(traj.at(mid))[0] <= delta:
            b = mid
        else:
            a = mid
    return b


def check_capture(
    cf: CombinedField,
    B_radius: float,
    n_traj: int = 64,
    seed: int = 0,
    *,
    tol: float = 1e-8,
    n_samples: int = 4096,
    thin: Optional[float] = None,
    starts: Optional[np.ndarray] = None,
    center=None,
    keep: int = 0,
) -> CaptureReport:
    """Estimate C = sup_B phi and c = inf over B minus P of |grad phi|^2,
    then check every trajectory from B enters P before (C - delta)/c.

    Outside P the flow is pure descent on phi; phi may rise by at most
    10 tol (relative to max(1, phi)) over any accepted step there.
    """
    lf = cf.lf
    center = ball_center(cf) if center is None else np.asarray(center, dtype=np.float64)
    reach = float(np.max(np.linalg.norm(lf.cloud.points - center, axis=1))) + math.sqrt(lf.delta)
    if reach > B_radius:
        raise DomainError(f"B_radius={B_radius} does not contain P (needs at least {reach:.4g})")
    rng = np.random.default_rng([seed, 1])
    if starts is None:
        starts = sample_ball(center, B_radius, n_traj, rng)
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))

    # sup of phi over B: interior samples, the bounding sphere and the starts
    inner = sample_ball(center, B_radius, n_samples, rng)
    sph = rng.standard_normal((n_samples, len(center)))
    sph = center + B_radius * sph / np.linalg.norm(sph, axis=1, keepdims=True)
    C = float(max(lf.phi(inner).max(), lf.phi(sph).max(), lf.phi(starts).max()))

    shell = sample_shell(lf, center, B_radius, n_samples, rng)
    g2 = np.sum(lf.grad_phi(shell) ** 2, axis=1)
    k = int(np.argmin(g2))
    c = float(g2[k])
    if not c > 0:
        raise BetaLadderError(f"critical point of phi outside P at {shell[k].tolist()}")
    bound_T = max(C - lf.delta, 0.0) / c

    viol = [0]
    worst = [0.0]

    def monitor(ids, t0, y0, p0, t1, y1, p1):
        outside = (p0 > lf.delta) & (p1 > lf.delta)
        rise = (p1 - p0) / np.maximum(1.0, np.abs(p0))
        bad = outside & (rise > 10 * tol)
        viol[0] += int(np.count_nonzero(bad))
        if np.any(outside):
            worst[0] = max(worst[0], float(np.max(rise[outside])))

    trajs = integrate_batch(
        cf,
        starts,
        bound_T * (1 + 1e-9) + 1e-12,
        tol,
        step_cap=step_cap(_thin_of(cf, thin)),
        phi=cf.phi,
        stop=lambda Y: cf.phi(Y) <= lf.delta,
        stall=_stall(cf),
        monitor=monitor,
    )
    times = []
    for tr in trajs:
        if tr.status == "stopped":
            times.append(_refine_crossing(tr, cf.phi, lf.delta))
        else:
            times.append(float("nan"))
    times_a = np.array(times)
    captured = np.isfinite(times_a)
    return CaptureReport(
        C=C,
        c=c,
        delta=lf.delta,
        bound_T=bound_T,
        capture_times=[float(t) for t in times_a],
        captured_fraction=float(captured.mean()),
        all_within_bound=bool(np.all(times_a[captured] <= bound_T)) and bool(captured.all()),
        monotone_violations=viol[0],
        max_phi_increase=worst[0],
        n_samples=n_samples,
        g_min_point=shell[k].tolist(),
        statuses=[tr.status for tr in trajs],
        trajectories=trajs[:keep] if keep else None,
    )


# -- invariance and limit set ---------------------------------------------------

@dataclass
class InvarianceReport:
    n: int
    horizon: float
    violations: int
    violating_trajectories: int
    max_phi_ratio: float
    statuses: list


@dataclass
class XEstimate:
    cloud: PointCloud
    settled: bool
    settle_distance: float
    settle_tol: float
    invariance: InvarianceReport


def _run_from_P(cf, n, horizon, seed, tol, thin, keep_from, relax=1e-3):
    lf = cf.lf
    rng = np.random.default_rng([seed, 2])
    starts = sample_in_P(cf, n, rng)
    limit = lf.delta * (1 + relax)
    bad_states = [0]
    bad_traj = np.zeros(n, dtype=bool)
    worst = [float(np.max(cf.phi(starts)) / lf.delta)]

    def monitor(ids, t0, y0, p0, t1, y1, p1):
        over = p1 > limit
        if np.any(over):
            bad_states[0] += int(np.count_nonzero(over))
            bad_traj[ids[over]] = True
        worst[0] = max(worst[0], float(np.max(p1)) / lf.delta)

    trajs = integrate_batch(
        cf,
        starts,
        horizon,
        tol,
        step_cap=step_cap(_thin_of(cf, thin)),
        phi=cf.phi,
        stall=_stall(cf),
        keep_from=keep_from,
        monitor=monitor,
    )
    failed = [i for i, tr in enumerate(trajs) if tr.status == "underflow"]
    if failed:
        raise IntegratorError(f"step-size underflow on trajectories {failed[:5]}")
    inv = InvarianceReport(
        n=n,
        horizon=horizon,
        violations=bad_states[0],
        violating_trajectories=int(bad_traj.sum()),
        max_phi_ratio=worst[0],
        statuses=[tr.status for tr in trajs],
    )
    return trajs, inv


def check_positive_invariance(
    cf: CombinedField,
    n: int,
    horizon: float,
    seed: int = 0,
    *,
    tol: float = 1e-8,
    thin: Optional[float] = None,
) -> InvarianceReport:
    """Start n trajectories in P; a violation is any accepted state with
    phi > delta (1 + 1e-3) before ``horizon``."""
    if n < 1:
        raise DomainError("n must be at least 1")
    return _run_from_P(cf, n, horizon, seed, tol, thin, keep_from=horizon)[1]


def estimate_X(
    cf: CombinedField,
    horizon: float,
    settle: float,
    n: int,
    seed: int = 0,
    *,
    tol: float = 1e-8,
    thin: Optional[float] = None,
    settle_tol: Optional[float] = None,
    samples_per_window: int = 64,
) -> XEstimate:
    """Late-time states of n trajectories started across P, thinned into a cloud.

    The states over [settle, mid] and [mid, horizon] are compared; if their
    Hausdorff distance exceeds ``settle_tol`` (default eps/2, or sqrt(delta)
    when eps is unknown) the estimate is flagged as unsettled. The
    invariance statistics of the same run are returned alongside.
    """
    if not 0 <= settle < horizon:
        raise DomainError("settle must lie in [0, horizon)")
    trajs, inv = _run_from_P(cf, n, horizon, seed, tol, thin, keep_from=settle)
    mid = 0.5 * (settle + horizon)
    ta = np.linspace(settle, mid, samples_per_window)
    tb = np.linspace(mid, horizon, samples_per_window)
    A, B = [], []
    for tr in trajs:
        if tr.final_time < horizon:
            # stagnated early; its last state is where it sits
            A.append(tr.final_state[None, :])
            B.append(tr.final_state[None, :])
            continue
        A.append(tr.at(ta))
        B.append(tr.at(tb))
    A, B = np.vstack(A), np.vstack(B)
    if settle_tol is None:
        settle_tol = cf.lf.eps / 2 if cf.lf.eps else math.sqrt(cf.lf.delta)
    dist = hausdorff_distance(A, B)
    pool = np.vstack([A, B])
    thin_r = _thin_of(cf, thin) / 2
    idx = farthest_point_thin(pool, len(pool), thin_r)
    return XEstimate(
        cloud=PointCloud(pool[idx]),
        settled=bool(dist <= settle_tol),
        settle_distance=float(dist),
        settle_tol=float(settle_tol),
        invariance=inv,
    )


# -- reproduction -----------------------------------------------------------------

@dataclass
class ReproductionReport:
    errors: list
    sup_error: float
    flagged: list
    T: float


def check_trajectory_reproduction(
    spec: SystemSpec,
    L,
    cf: CombinedField,
    U0: np.ndarray,
    T: float,
    tol: float = 1e-8,
    *,
    upstream_tol: float = 1e-12,
    thin: Optional[float] = None,
    n_grid: int = 4001,
) -> ReproductionReport:
    """sup over t <= T of |L u(t) - x(t)| for u solving the source system
    from each row of U0 and x solving the combined field from L u0.

    A start is flagged when L u(t) wanders farther than sqrt(delta) from the
    embedded cloud, i.e. outside the region where the extension was fitted.
    """
    U0 = np.atleast_2d(np.asarray(U0, dtype=np.float64))
    X0 = L(U0)
    down = integrate_batch(cf, X0, T, tol, step_cap=step_cap(_thin_of(cf, thin)), stall=_stall(cf))
    up = integrate_batch(lambda U: vector_field_G(spec, U), U0, T, upstream_tol)
    if any(tr.failed for tr in up):
        raise IntegratorError("upstream integration failed")
    if any(tr.status == "underflow" for tr in down):
        raise IntegratorError("downstream integration failed")
    ts = np.linspace(0.0, T, n_grid)
    errs, flagged = [], []
    tree = cf.lf.cloud.tree
    reach = math.sqrt(cf.lf.delta)
    for i, (u, x) in enumerate(zip(up, down)):
        LU = L(u.at(ts))
        errs.append(float(np.max(np.linalg.norm(LU - x.at(ts), axis=1))))
        if float(np.max(tree.query(LU)[0])) > reach:
            flagged.append(i)
    return ReproductionReport(errors=errs, sup_error=float(max(errs)), flagged=flagged, T=T)


# -- uniqueness surrogate -------------------------------------------------------------

@dataclass
class UniquenessReport:
    ok: bool
    n_pairs: int
    failures: int
    worst_ratio: float
    M_used: float


def uniqueness_surrogate(
    cf,
    modulus,
    M: float,
    X0: np.ndarray,
    r0: float = 1e-8,
    T: float = 10.0,
    seed: int = 0,
    *,
    tol: float = 1e-12,
    thin: Optional[float] = None,
    n_grid: int = 2001,
) -> UniquenessReport:
    """Integrate from each x0 and from x0 + r0 v (v a random unit vector);
    the separation must stay below the envelope r(t) solving
    dr/dt = M omega(r), r(0) = r0, with relative slack 1e-3."""
    if r0 <= 0:
        raise DomainError("r0 must be positive")
    X0 = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    rng = np.random.default_rng([seed, 3])
    v = rng.standard_normal(X0.shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    Y0 = X0 + r0 * v
    r_init = np.linalg.norm(Y0 - X0, axis=1)
    cap = step_cap(_thin_of(cf, thin)) if isinstance(cf, CombinedField) else None
    trajs = integrate_batch(cf, np.vstack([X0, Y0]), T, tol, step_cap=cap)
    k = len(X0)
    ts = np.linspace(0.0, T, n_grid)
    fails, worst = 0, 0.0
    for i in range(k):
        a, b = trajs[i], trajs[k + i]
        if a.failed or b.failed:
            fails += 1
            continue
        sep = np.linalg.norm(a.at(ts) - b.at(ts), axis=1)
        env = separation_bound(modulus, M, float(r_init[i]), ts)
        ratio = float(np.max(sep / env))
        worst = max(worst, ratio)
        if ratio > 1 + 1e-3:
            fails += 1
    return UniquenessReport(ok=fails == 0, n_pairs=k, failures=fails, worst_ratio=worst, M_used=M)


# -- report and output ------------------------------------------------------------------

@dataclass
class VerificationReport:
    capture_times: list
    bound_T: float
    C: float
    c: float
    invariance_violations: int
    hausdorff_X_LA: float
    cloud_in_X_neighbourhood: float
    X_in_cloud_neighbourhood: float
    settled: bool
    reproduction_error: float
    uniqueness_envelope_ok: bool
    extra: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def x_vs_cloud(X: PointCloud, cloud: PointCloud) -> tuple[float, float, float]:
    """(Hausdorff distance, sup over cloud of distance to X, sup over X of distance to cloud)."""
    a = semidistance(cloud, X)
    b = semidistance(X, cloud)
    return hausdorff_distance(X, cloud), a, b


def write_trajectory_csv(path, traj: Trajectory, phi=None) -> None:
    """Columns t, x1..xm, phi."""
    ph = traj.phi_values if traj.phi_values is not None else (phi(traj.states) if phi else None)
    m = traj.states.shape[1]
    cols = [traj.times[:, None], traj.states]
    header = ["t"] + [f"x{j + 1}" for j in range(m)]
    if ph is not None:
        cols.append(np.asarray(ph)[:, None])
        header.append("phi")
    data = np.hstack(cols)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_gnuplot_script(path, trajectory_csvs: Sequence[str], cloud_csv: str, X_csv: str) -> None:
    """Two figures: phi decay along trajectories, and X over the cloud (first two coordinates)."""
    lines = [
        "set datafile separator ','",
        "set terminal pngcairo size 900,600",
        "set output 'phi_decay.png'",
        "set logscale y",
        "set xlabel 't'",
        "set ylabel 'phi'",
    ]
    if trajectory_csvs:
        plots = []
        for p in trajectory_csvs:
            plots.append(f"'{p}' using 1:'phi' every ::1 with lines notitle")
        lines.append("plot " + ", \\\n     ".join(plots))
    lines += [
        "unset logscale y",
        "set output 'attractor_overlay.png'",
        "set xlabel 'x1'",
        "set ylabel 'x2'",
        f"plot '{cloud_csv}' using 1:2 every ::1 with points pt 7 ps 0.5 title 'embedded cloud', \\",
        f"     '{X_csv}' using 1:2 every ::1 with points pt 6 ps 0.5 title 'limit set estimate'",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def save_cloud(path, cloud: PointCloud) -> None:
    save_cloud_csv(path, cloud.points)
