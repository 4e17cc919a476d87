"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (visible with
``pytest -v``) before asserting, so a failing criterion still reports its
measured numbers.
"""
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from attrakt.config import load_config
from attrakt.dimension import assouad_estimate, check_gates
from attrakt.embedding import find_embedding, pair_violations, verify_bilipschitz
from attrakt.extension import Modulus, mcshane_eval, mcshane_eval_scan, modulus_eval, osgood_check
from attrakt.harness import check_capture
from attrakt.lyapunov import sample_ball
from attrakt.pipeline import _load_embedding, _load_extension, _load_lyapunov, reproduction_sweep, run_pipeline
from attrakt.systems import SystemSpec, sample_attractor

from test_dimension import grid_square, oracle_slope
from test_embedding import dyadic_points, projection
from test_harness import sink_field

CYCLE = "[embedding]\ngamma = 0.95\n"
SINK = "[system]\nkind = PointSink\n"
CHEAP_CYCLE = """
[sampling]
n = 60
thin = 0.05
[embedding]
gamma = 0.95
[lyapunov]
eps = 0.1
shell_samples = 1024
[harness]
n_traj = 8
horizon = 20
settle = 10
n_repro = 2
T_repro = 2
n_unique = 2
T_unique = 0.5
"""


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def cycle_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cycle")
    t0 = time.perf_counter()
    art = run_pipeline(load_config(text=CYCLE), out)
    elapsed = time.perf_counter() - t0
    ver = json.loads((out / "verification.json").read_text()) if (out / "verification.json").exists() else {}
    return art, out, elapsed, ver


@pytest.fixture(scope="module")
def cycle_objects(cycle_run):
    _, out, _, _ = cycle_run
    _, E = _load_embedding(out)
    return E, _load_extension(out, E), _load_lyapunov(out, E)


def test_criterion_1_end_to_end_cycle(cycle_run, capsys):
    art, _, elapsed, _ = cycle_run
    s = art.summary
    ok = (art.exit_code == 0 and s["hausdorff_X_LA"] <= 0.05 and s["cloud_in_X_neighbourhood"] <= 0.05
          and elapsed <= 300)
    report(capsys, 1, ok,
           f"exit={art.exit_code} hausdorff={s['hausdorff_X_LA']:.4g} cloud-in-X={s['cloud_in_X_neighbourhood']:.4g} "
           f"settled={s['settled']} runtime={elapsed:.0f}s")


def test_criterion_2_trajectory_reproduction(cycle_run, capsys, tmp_path):
    art, _, _, _ = cycle_run
    sweep = reproduction_sweep(load_config(text=CYCLE), n_starts=16, T=10.0)
    errs = [lvl["sup_error"] for lvl in sweep]
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))
    sink = run_pipeline(load_config(text=SINK), tmp_path / "sink")
    sink_err = sink.summary["reproduction_error"]
    ok = errs[-1] <= 1e-2 and decreasing and sink.exit_code == 0 and sink_err <= 1e-6
    levels = ", ".join(f"n={lvl['n']}:{lvl['sup_error']:.3g}" for lvl in sweep)
    report(capsys, 2, ok,
           f"default n=200: {art.summary['reproduction_error']:.3g}; sweep {levels}; "
           f"decreasing={decreasing}; PointSink {sink_err:.3g}")


def test_criterion_3_embedding_inequality(capsys):
    spec = SystemSpec("PlanarCycle")
    clean = 0
    for seed in range(100):
        sample = sample_attractor(spec, 200, 50.0, 0.01, seed=seed)
        L, _, _ = find_embedding(sample, 7, 0.95, seed=seed)
        clean += pair_violations(L, sample) == 0
    U = dyadic_points(np.random.default_rng(0), 60, 10, 3)
    C_proj = verify_bilipschitz(projection(5, 10), U, gamma=0.95, delta_L=0.3).C_L
    ok = clean >= 95 and C_proj == 1.0
    report(capsys, 3, ok, f"violation-free seeds {clean}/100; projection C_L={C_proj!r}")


def test_criterion_4_mcshane_suite(cycle_objects, capsys):
    E, ext, _ = cycle_objects
    base = mcshane_eval_scan(ext, E.points)
    interp = float(np.max(np.abs(base - E.g1_values)))
    rng = np.random.default_rng(4)
    lo, hi = E.points.min(axis=0) - 0.5, E.points.max(axis=0) + 0.5
    X = rng.uniform(lo, hi, size=(10_000, E.points.shape[1]))
    Y = np.where(np.arange(10_000)[:, None] < 5000, rng.uniform(lo, hi, size=X.shape),
                 X + rng.normal(scale=1e-3, size=X.shape))
    gap = np.abs(mcshane_eval_scan(ext, X) - mcshane_eval_scan(ext, Y))
    bound = ext.M * modulus_eval(ext.modulus, np.linalg.norm(X - Y, axis=1))[:, None]
    excess = float(np.max(gap - bound))
    Q = np.vstack([X[:900], rng.normal(scale=30, size=(100, X.shape[1]))])
    same = np.array_equal(np.array([mcshane_eval(ext, q) for q in Q]), mcshane_eval_scan(ext, Q))
    ok = interp == 0.0 and excess <= 1e-12 and same
    report(capsys, 4, ok, f"interpolation error {interp:.3g}; worst bound excess {excess:.3g}; pruned==scan {same}")


def test_criterion_5_osgood_suite(cycle_run, capsys):
    _, _, _, ver = cycle_run
    unit = Modulus(1.0, math.e, 1.0)
    quad_err = max(abs(osgood_check(unit, e).integral - math.log(1 + math.log(1 / e)))
                   for e in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6))
    env_ok = bool(ver.get("uniqueness_envelope_ok"))
    extra = ver.get("extra", {})
    ok = quad_err <= 1e-8 and env_ok
    report(capsys, 5, ok,
           f"closed-form error {quad_err:.3g}; envelope ok={env_ok} worst ratio "
           f"{extra.get('uniqueness_worst_ratio', float('nan')):.3g} failures {extra.get('uniqueness_failures')}")


def test_criterion_6_lyapunov_sandwich(cycle_objects, capsys):
    E, _, lf = cycle_objects
    rng = np.random.default_rng(6)
    C = E.points
    centre = C.mean(axis=0)
    X = np.vstack([sample_ball(centre, 3.0, 5000, rng), C[rng.integers(len(C), size=5000)]
                   + rng.normal(scale=3 / math.sqrt(lf.beta), size=(5000, C.shape[1]))])
    # squared distances accumulated coordinate by coordinate, left to right
    d2 = np.zeros((len(X), len(C)))
    for j in range(C.shape[1]):
        d2 += (X[:, j, None] - C[None, :, j]) ** 2
    dmin = d2.min(axis=1)
    ph = lf.phi(X)
    below = int(np.sum(ph < dmin))
    above = int(np.sum(ph > dmin + math.log(lf.n) / lf.beta))

    Z = sample_ball(centre, 1.5, 100, rng)
    # at beta = 1e5 the h^2 truncation of central differences passes 1e-6 for h = 1e-5
    h = 1e-6
    g = lf.grad_phi(Z)
    fd = np.empty_like(Z)
    for j in range(Z.shape[1]):
        e = np.zeros(Z.shape[1])
        e[j] = h
        fd[:, j] = (lf.phi(Z + e) - lf.phi(Z - e)) / (2 * h)
    rel = float(np.max(np.linalg.norm(g - fd, axis=1) / np.linalg.norm(g, axis=1)))
    ok = below == 0 and above == 0 and rel <= 1e-6
    report(capsys, 6, ok, f"sandwich violations below={below} above={above} (beta={lf.beta:.3g}); FD rel error {rel:.3g}")


def test_criterion_7_capture_and_invariance(cycle_run, capsys):
    art, _, _, ver = cycle_run
    extra = ver["extra"]
    n_cap = round(extra["captured_fraction"] * len(ver["capture_times"]))
    v = np.random.default_rng(7).normal(size=(16, 3))
    sink = check_capture(sink_field(), 1.0, starts=v / np.linalg.norm(v, axis=1, keepdims=True), tol=1e-10)
    t_sink = max(sink.capture_times)
    ok = (extra["captured_fraction"] == 1.0 and extra["capture_within_bound"] and len(ver["capture_times"]) == 64
          and abs(t_sink - 1.1513) <= 1e-3 and t_sink <= sink.bound_T <= 24.75 + 1e-9
          and ver["invariance_violations"] == 0 and extra["monotone_violations"] == 0)
    report(capsys, 7, ok,
           f"captured {n_cap}/{len(ver['capture_times'])} max time {max(ver['capture_times']):.3g} <= T={ver['bound_T']:.4g}; "
           f"PointSink {t_sink:.4f} <= {sink.bound_T:.4g}; invariance violations {ver['invariance_violations']}; "
           f"monotone violations {extra['monotone_violations']}")


GATE_TABLE = [
    # s, m, gamma -> all gates pass
    (1.0, 7, 0.95, True),
    (1.0, 6, 0.95, False),
    (5.5, 7, 0.95, False),
    (5.0, 7, 0.95, False),
    (1.0, 20, 0.95, True),
    (1.0, 20, 1.05, False),
    (1.0, 7, 0.5, False),
    (2.0, 8, 0.9, True),
    (2.0, 8, 0.83, False),
]


def test_criterion_8_dimension_gates(capsys):
    seg = np.random.default_rng(0).uniform(size=(1000, 1))
    s_seg = assouad_estimate(seg).s_est
    o_seg = oracle_slope(seg, 0.25, [0.1, 0.05, 0.025, 0.0125], centers=range(0, 1000, 100))
    sq = grid_square(101)
    s_sq = assouad_estimate(sq).s_est
    centre = [int(np.argmin(np.linalg.norm(sq - 0.5, axis=1)))]
    o_sq = oracle_slope(sq, 0.4, [0.2, 0.1, 0.05], centers=centre)
    gates = [check_gates(s, m, g)["all_pass"] == want for s, m, g, want in GATE_TABLE]
    ok = (0.8 <= s_seg <= 1.2 and abs(s_seg - o_seg) <= 0.3 and 1.8 <= s_sq <= 2.2 and abs(s_sq - o_sq) <= 0.3
          and all(gates))
    report(capsys, 8, ok,
           f"segment {s_seg:.3f} (oracle {o_seg:.3f}); square {s_sq:.3f} (oracle {o_sq:.3f}); "
           f"gate table {sum(gates)}/{len(gates)}")


def test_criterion_9_determinism_across_threads(tmp_path, capsys):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(CHEAP_CYCLE)
    out = tmp_path / "run"
    blobs, codes = [], []
    for threads in ("1", "4"):
        env = dict(os.environ, ATTRAKT_THREADS=threads)
        proc = subprocess.run([sys.executable, "-m", "attrakt.cli", "run", "--config", str(cfg), "--out", str(out)],
                              env=env, capture_output=True)
        codes.append(proc.returncode)
        blobs.append((out / "summary.json").read_bytes())
    ok = codes == [0, 0] and blobs[0] == blobs[1]
    report(capsys, 9, ok, f"exit codes {codes}; summary.json byte-identical={blobs[0] == blobs[1]} ({len(blobs[0])} bytes)")
