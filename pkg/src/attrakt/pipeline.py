"""Staged execution: sample -> dimension -> embed -> extend -> lyapunov -> verify.

Each stage reads only the artifacts persisted by earlier stages in the run
directory, so a run can be restarted from any stage. The summary JSON is
written with sorted keys and contains no timings or absolute paths, so
identical configurations and seeds give byte-identical summaries.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig, dump_config
from .dimension import assouad_estimate, check_gates, choose_gamma
from .embedding import EmbeddedCloud, LinearEmbedding, augment, find_embedding, pair_violations, project_sample
from .errors import AttraktError, DomainError, FormatError, GateError, SettlingError
from .extension import ExtendedField, Modulus, extend_field, make_modulus, osgood_check
from .geometry import (
    PointCloud,
    difference_cloud,
    load_cloud_bin,
    load_cloud_csv,
    save_cloud_bin,
    save_cloud_csv,
)
from .harness import (
    VerificationReport,
    check_capture,
    check_trajectory_reproduction,
    estimate_X,
    uniqueness_surrogate,
    write_gnuplot_script,
    write_trajectory_csv,
    x_vs_cloud,
)
from .lyapunov import CombinedField, LyapunovField, beta_ladder, make_lyapunov, sup_grad_on_cloud
from .systems import AttractorSample, SystemSpec, estimate_lipschitz_G, sample_attractor

log = logging.getLogger(__name__)

__all__ = [
    "STAGES",
    "RunArtifacts",
    "save_sample",
    "load_sample",
    "run_pipeline",
    "build_field",
    "reproduction_sweep",
    "DEFAULT_SWEEP",
]

STAGES = ("sample", "dimension", "embed", "extend", "lyapunov", "verify")
SUMMARY = "summary.json"


# -- sample persistence ----------------------------------------------------------

def _companions(path: Path):
    path = Path(path)
    if path.suffix not in (".bin", ".csv"):
        raise DomainError("sample files must end in .bin or .csv")
    stem = path.with_suffix("")
    return path, stem.with_name(stem.name + "_field" + path.suffix), stem.with_suffix(".json")


def save_sample(path, sample: AttractorSample) -> None:
    """Coordinates and field values in the format given by the suffix
    (.bin exact, .csv to 17 significant digits) plus a JSON sidecar."""
    pts_path, fld_path, meta_path = _companions(path)
    saver = save_cloud_bin if pts_path.suffix == ".bin" else save_cloud_csv
    saver(pts_path, sample.points)
    saver(fld_path, sample.field_values)
    meta = {
        "burn_in": sample.burn_in,
        "thinning_radius": sample.thinning_radius,
        "short": sample.short,
        "count": len(sample),
        "spec": sample.spec.as_dict() if sample.spec is not None else None,
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_sample(path) -> AttractorSample:
    pts_path, fld_path, meta_path = _companions(path)
    loader = load_cloud_bin if pts_path.suffix == ".bin" else load_cloud_csv
    pts = loader(pts_path)
    fld = loader(fld_path)
    if not meta_path.exists():
        raise FormatError(f"missing sample sidecar {meta_path.name}")
    meta = json.loads(meta_path.read_text())
    if len(pts) != meta["count"] or fld.shape != pts.shape:
        raise FormatError("sample files disagree on point count or dimension")
    spec = None
    if meta.get("spec"):
        s = meta["spec"]
        spec = SystemSpec(s["kind"], s["params"], s["ambient_dim"], s["lift_seed"])
    return AttractorSample(
        cloud=PointCloud(pts),
        field_values=fld,
        burn_in=meta["burn_in"],
        thinning_radius=meta["thinning_radius"],
        spec=spec,
        short=meta["short"],
    )


# -- pure build steps ---------------------------------------------------------------

def _dimension(sample: AttractorSample, cfg: ExperimentConfig) -> dict:
    seed = cfg.sampling["seed"]
    diff = difference_cloud(sample.cloud, cfg.dimension["max_pairs"], seed)
    stats = assouad_estimate(diff, seed=seed)
    m = cfg.embedding["m"]
    gamma = cfg.embedding["gamma"]
    if gamma is None:
        gamma = choose_gamma(stats.s_est, m)
    gates = check_gates(stats.s_est, m, gamma)
    return {
        "s_est": stats.s_est,
        "M_est": stats.M_est,
        "fit_residual": stats.residual,
        "scales": [list(p) for p in stats.scales],
        "counts": stats.counts,
        "gamma": gamma,
        "gates": gates,
    }


def _gate_message(gates: dict) -> str:
    g = gates["gates"]
    parts = []
    if not g["m_gt_max_s_plus_1_and_6"]["pass"]:
        parts.append(f"need m > max{{s+1, 6}} = {g['m_gt_max_s_plus_1_and_6']['need_m_above']:.4g}, got m={gates['m']}")
    if not g["m_gt_s"]["pass"]:
        parts.append(f"need m > s = {gates['s_est']:.4g}")
    if not g["gamma_above_threshold"]["pass"]:
        thr = g["gamma_above_threshold"]["threshold"]
        parts.append(f"need gamma > (2+m)/(2(m-s)) = {thr}, got gamma={gates['gamma']}")
    if not g["gamma_at_most_one"]["pass"]:
        parts.append(f"need gamma <= 1, got {gates['gamma']}")
    return "gate failure: " + "; ".join(parts)


def _embed(sample: AttractorSample, cfg: ExperimentConfig, gamma: float):
    e = cfg.embedding
    L, fit, attempts = find_embedding(
        sample, e["m"], gamma, cfg.sampling["seed"], retries=e["retries"], delta_L=e["delta_L"], C_max=e["C_max"]
    )
    La = augment(L)
    return La, project_sample(La, sample), {"attempts": attempts, "n_pairs": fit.n_pairs}


def _extend(sample, La: LinearEmbedding, E: EmbeddedCloud, cfg: ExperimentConfig):
    K = estimate_lipschitz_G(sample) if len(sample) > 1 else 0.0
    C0_theory = La.C_L * K * La.op_norm
    if cfg.extension["C0_policy"] == "theory" and C0_theory > 0:
        C0 = C0_theory
    else:
        C0 = 1.0
    diam = E.cloud.diameter() if len(E) > 1 else 0.0
    mod = make_modulus(La.C_L, La.gamma, diam, C0)
    ext = extend_field(E, mod, theory_C0=C0_theory, kind=cfg.extension["kind"])
    return ext, K


def _lyapunov(sample, E: EmbeddedCloud, cfg: ExperimentConfig, ladder: bool = True):
    ly = cfg.lyapunov
    lf = make_lyapunov(E.cloud, ly["eps"], delta=ly["delta"], beta=ly["beta"], thin=sample.thinning_radius)
    g_min = ly["g_min"] if ly["g_min"] is not None else math.sqrt(lf.delta)
    info = {"g_min": g_min, "ladder_steps": 0, "g_min_found": None}
    if ladder:
        center = E.points.mean(axis=0)
        res = beta_ladder(
            lf,
            center,
            cfg.harness["B_radius"],
            g_min,
            n_samples=ly["shell_samples"],
            seed=cfg.sampling["seed"],
            max_steps=ly["ladder_steps"],
        )
        lf = res.lf
        info.update(ladder_steps=res.steps, g_min_found=res.g_min_found)
    info["sup_grad_on_cloud"] = sup_grad_on_cloud(lf)
    return lf, info


def build_field(cfg: ExperimentConfig, ladder: bool = True) -> dict:
    """Run every construction step in memory; returns the intermediate objects."""
    spec = cfg.spec()
    s = cfg.sampling
    sample = sample_attractor(spec, s["n"], s["burn_in"], s["thin"], s["seed"])
    dim = _dimension(sample, cfg)
    if not dim["gates"]["all_pass"]:
        raise GateError(_gate_message(dim["gates"]))
    La, E, _ = _embed(sample, cfg, dim["gamma"])
    ext, K = _extend(sample, La, E, cfg)
    lf, _ = _lyapunov(sample, E, cfg, ladder=ladder)
    return {"spec": spec, "sample": sample, "L": La, "embedded": E, "ext": ext, "lf": lf, "K": K,
            "cf": CombinedField(lf, ext), "dimension": dim}


def _spread(n_total: int, k: int) -> np.ndarray:
    return np.linspace(0, n_total, min(k, n_total), endpoint=False).astype(int)


# levels of simultaneous refinement: (sample size, thinning radius, tolerance)
DEFAULT_SWEEP = ((400, 0.005, 1e-6), (800, 0.0025, 1e-7), (1600, 0.00125, 1e-8))


def reproduction_sweep(
    cfg: ExperimentConfig,
    levels: Sequence[tuple] = DEFAULT_SWEEP,
    n_starts: Optional[int] = None,
    T: Optional[float] = None,
) -> list[dict]:
    """Reproduction error under joint refinement of sample size and tolerance."""
    out = []
    n_starts = cfg.harness["n_repro"] if n_starts is None else n_starts
    T = cfg.harness["T_repro"] if T is None else T
    for n, thin, tol in levels:
        c = cfg.with_seed(cfg.sampling["seed"])
        c.sampling.update(n=n, thin=thin)
        built = build_field(c, ladder=False)
        sample = built["sample"]
        rep = check_trajectory_reproduction(
            built["spec"], built["L"], built["cf"], sample.points[_spread(len(sample), n_starts)], T, tol
        )
        out.append({"n": len(sample), "thin": thin, "tol": tol, "sup_error": rep.sup_error,
                    "errors": rep.errors, "flagged": rep.flagged})
        log.info("sweep level n=%d tol=%g: sup error %.4g", len(sample), tol, rep.sup_error)
    return out


# -- staged runner --------------------------------------------------------------------

@dataclass
class RunArtifacts:
    directory: Path
    files: dict = field(default_factory=dict)
    status: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    exit_code: int = 0
    failure: Optional[dict] = None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise FormatError(f"missing artifact {path.name}; run the earlier stages first")
    return json.loads(path.read_text())


def _load_embedding(out: Path):
    La = LinearEmbedding.load(out / "embedding")
    pts = load_cloud_bin(out / "embedded.bin")
    g1 = load_cloud_bin(out / "embedded_field.bin")
    E = EmbeddedCloud(cloud=PointCloud(pts), g1_values=g1, source_indices=np.arange(len(pts)))
    return La, E


def _load_extension(out: Path, E: EmbeddedCloud) -> ExtendedField:
    d = _read_json(out / "extension.json")
    mod = Modulus(C0=d["C0"], C_L_eff=d["C_L_eff"], gamma=d["gamma"])
    return ExtendedField(base=E, modulus=mod, M=np.array(d["M"], dtype=np.float64), bound=d["bound"],
                         theory_C0=d.get("C0_theory"), kind=d["kind"])


def _load_lyapunov(out: Path, E: EmbeddedCloud) -> LyapunovField:
    d = _read_json(out / "lyapunov.json")
    return LyapunovField(cloud=E.cloud, beta=d["beta"], delta=d["delta"], eps=d["eps"],
                         delta_collar=d["delta_collar"])


def _stage_sample(cfg, out):
    s = cfg.sampling
    sample = sample_attractor(cfg.spec(), s["n"], s["burn_in"], s["thin"], s["seed"])
    save_sample(out / "sample.bin", sample)
    return ["sample.bin", "sample_field.bin", "sample.json"]


def _stage_dimension(cfg, out):
    sample = load_sample(out / "sample.bin")
    dim = _dimension(sample, cfg)
    _write_json(out / "dimension.json", dim)
    if not dim["gates"]["all_pass"]:
        raise GateError(_gate_message(dim["gates"]))
    return ["dimension.json"]


def _stage_embed(cfg, out):
    sample = load_sample(out / "sample.bin")
    dim = _read_json(out / "dimension.json")
    La, E, info = _embed(sample, cfg, dim["gamma"])
    info["violations"] = pair_violations(La, sample)
    La.save(out / "embedding")
    save_cloud_bin(out / "embedded.bin", E.points)
    save_cloud_bin(out / "embedded_field.bin", E.g1_values)
    _write_json(out / "embed.json", info)
    return ["embedding.csv", "embedding.json", "embedded.bin", "embedded_field.bin", "embed.json"]


def _stage_extend(cfg, out):
    sample = load_sample(out / "sample.bin")
    La, E = _load_embedding(out)
    ext, K = _extend(sample, La, E, cfg)
    mod = ext.modulus
    eps_q = min(1e-6, 0.5 * min(1.0, mod.r_c))
    osg = osgood_check(mod, eps_q)
    info = ext.summary()
    info.update(
        K=K,
        osgood={"eps": eps_q, "integral": osg.integral, "integral_half_eps": osg.integral_half_eps,
                "increasing": osg.increasing, "divergent": osg.divergent},
    )
    _write_json(out / "extension.json", info)
    return ["extension.json"]


def _stage_lyapunov(cfg, out):
    sample = load_sample(out / "sample.bin")
    _, E = _load_embedding(out)
    lf, info = _lyapunov(sample, E, cfg)
    lf.save(out / "lyapunov.json", info)
    return ["lyapunov.json"]


def _stage_verify(cfg, out):
    h = cfg.harness
    seed = cfg.sampling["seed"]
    spec = cfg.spec()
    sample = load_sample(out / "sample.bin")
    La, E = _load_embedding(out)
    ext = _load_extension(out, E)
    lf = _load_lyapunov(out, E)
    cf = CombinedField(lf, ext)

    # a one-point cloud has no resolution; its step cap uses the sampling radius instead
    thin = sample.thinning_radius if len(sample) == 1 else None
    cap = check_capture(cf, h["B_radius"], h["n_traj"], seed, tol=h["tol"], thin=thin, keep=4)
    X = estimate_X(cf, h["horizon"], h["settle"], h["n_traj"], seed, tol=h["tol"], thin=thin,
                   settle_tol=h["settle_tol"])
    hd, cloud_to_X, X_to_cloud = x_vs_cloud(X.cloud, E.cloud)
    idx = _spread(len(sample), h["n_repro"])
    rep = check_trajectory_reproduction(spec, La, cf, sample.points[idx], h["T_repro"], h["tol"], thin=thin)
    uidx = _spread(len(E), h["n_unique"])
    M_env = float(np.max(ext.M)) if ext.M.size else 0.0
    uni = uniqueness_surrogate(cf, ext.modulus, M_env, E.points[uidx], h["r0"], h["T_unique"], seed,
                               tol=h["unique_tol"], thin=thin)

    report = VerificationReport(
        capture_times=cap.capture_times,
        bound_T=cap.bound_T,
        C=cap.C,
        c=cap.c,
        invariance_violations=X.invariance.violations,
        hausdorff_X_LA=hd,
        cloud_in_X_neighbourhood=cloud_to_X,
        X_in_cloud_neighbourhood=X_to_cloud,
        settled=X.settled,
        reproduction_error=rep.sup_error,
        uniqueness_envelope_ok=uni.ok,
        extra={
            "captured_fraction": cap.captured_fraction,
            "capture_within_bound": cap.all_within_bound,
            "monotone_violations": cap.monotone_violations,
            "max_phi_increase": cap.max_phi_increase,
            "shell_samples": cap.n_samples,
            "invariance_trajectories": X.invariance.violating_trajectories,
            "max_phi_ratio_in_P": X.invariance.max_phi_ratio,
            "settle_distance": X.settle_distance,
            "settle_tol": X.settle_tol,
            "X_points": len(X.cloud),
            "reproduction_errors": rep.errors,
            "reproduction_flagged": rep.flagged,
            "uniqueness_worst_ratio": uni.worst_ratio,
            "uniqueness_failures": uni.failures,
            "uniqueness_M": uni.M_used,
        },
    )
    report.save(out / "verification.json")
    save_cloud_csv(out / "X_est.csv", X.cloud.points)
    save_cloud_csv(out / "cloud.csv", E.points)
    traj_files = []
    for i, tr in enumerate(cap.trajectories or []):
        name = f"capture_{i}.csv"
        write_trajectory_csv(out / name, tr)
        traj_files.append(name)
    write_gnuplot_script(out / "plots.gp", traj_files, "cloud.csv", "X_est.csv")
    if not X.settled:
        raise SettlingError(
            f"limit-set estimate unsettled: windows differ by {X.settle_distance:.3g} > {X.settle_tol:.3g}; "
            "extend the horizon"
        )
    return ["verification.json", "X_est.csv", "cloud.csv", "plots.gp"] + traj_files


_RUNNERS = {
    "sample": _stage_sample,
    "dimension": _stage_dimension,
    "embed": _stage_embed,
    "extend": _stage_extend,
    "lyapunov": _stage_lyapunov,
    "verify": _stage_verify,
}


def _summary(cfg: ExperimentConfig, out: Path, status: dict, failure) -> dict:
    def opt(name):
        p = out / name
        return json.loads(p.read_text()) if p.exists() else {}

    dim, emb, ext, ly, ver = (opt(n) for n in
                              ("dimension.json", "embedding.json", "extension.json", "lyapunov.json",
                               "verification.json"))
    M = ext.get("M")
    resolved = cfg.as_dict()
    resolved["embedding"] = dict(resolved["embedding"], gamma=dim.get("gamma", resolved["embedding"]["gamma"]),
                                 delta_L=emb.get("delta_L", resolved["embedding"]["delta_L"]))
    resolved["lyapunov"] = dict(resolved["lyapunov"], delta=ly.get("delta", resolved["lyapunov"]["delta"]),
                                beta=ly.get("beta", resolved["lyapunov"]["beta"]),
                                g_min=ly.get("g_min", resolved["lyapunov"]["g_min"]))
    resolved["harness"] = dict(resolved["harness"],
                               settle_tol=ver.get("extra", {}).get("settle_tol", resolved["harness"]["settle_tol"]))
    return {
        "config": resolved,
        "stages": status,
        "failure": failure,
        "s_est": dim.get("s_est"),
        "m": cfg.embedding["m"],
        "m_augmented": emb.get("m"),
        "C_L": emb.get("C_L"),
        "gamma": emb.get("gamma", dim.get("gamma")),
        "delta_L": emb.get("delta_L"),
        "op_norm": emb.get("op_norm"),
        "K": ext.get("K"),
        "M": M,
        "M_max": max(M) if M else None,
        "C0": ext.get("C0"),
        "C0_theory": ext.get("C0_theory"),
        "C_L_eff": ext.get("C_L_eff"),
        "extension_kind": ext.get("kind"),
        "osgood": ext.get("osgood"),
        "beta": ly.get("beta"),
        "delta": ly.get("delta"),
        "delta_collar": ly.get("delta_collar"),
        "eps": ly.get("eps", cfg.lyapunov["eps"]),
        "sup_grad_on_cloud": ly.get("sup_grad_on_cloud"),
        "g_min_found": ly.get("g_min_found"),
        "C": ver.get("C"),
        "c": ver.get("c"),
        "T": ver.get("bound_T"),
        "capture_times_max": max(ver["capture_times"]) if ver.get("capture_times") else None,
        "captured_fraction": ver.get("extra", {}).get("captured_fraction"),
        "invariance_violations": ver.get("invariance_violations"),
        "hausdorff_X_LA": ver.get("hausdorff_X_LA"),
        "cloud_in_X_neighbourhood": ver.get("cloud_in_X_neighbourhood"),
        "X_in_cloud_neighbourhood": ver.get("X_in_cloud_neighbourhood"),
        "settled": ver.get("settled"),
        "reproduction_error": ver.get("reproduction_error"),
        "uniqueness_envelope_ok": ver.get("uniqueness_envelope_ok"),
    }


def run_pipeline(
    cfg: ExperimentConfig,
    out=None,
    stage_from: Optional[str] = None,
    stage_to: Optional[str] = None,
) -> RunArtifacts:
    """Run stages in order, persisting every artifact under ``out``.

    A failing stage halts the run; the summary records the stage, the cause
    and the exit code (10 gate, 11 injectivity, 12 beta ladder, 13 settling,
    14 integrator).
    """
    out = Path(out if out is not None else cfg.output["directory"])
    out.mkdir(parents=True, exist_ok=True)
    first = STAGES.index(stage_from) if stage_from else 0
    last = STAGES.index(stage_to) if stage_to else len(STAGES) - 1
    (out / "config.ini").write_text(dump_config(cfg))
    art = RunArtifacts(directory=out)
    prev = out / "stages.json"
    art.status = json.loads(prev.read_text()) if (first > 0 and prev.exists()) else {}
    for name in STAGES[first:last + 1]:
        try:
            art.files[name] = _RUNNERS[name](cfg, out)
            art.status[name] = "ok"
        except AttraktError as exc:
            art.status[name] = "failed"
            art.exit_code = exc.exit_code
            art.failure = {"stage": name, "cause": type(exc).__name__, "message": str(exc),
                           "exit_code": exc.exit_code}
            log.error("stage %s failed: %s", name, exc)
            break
    if art.failure:
        # anything after the failed stage is stale or missing
        for name in STAGES[STAGES.index(art.failure["stage"]) + 1:]:
            art.status[name] = "not run"
    for name in STAGES:
        art.status.setdefault(name, "not run")
    _write_json(out / "stages.json", art.status)
    art.summary = _summary(cfg, out, art.status, art.failure)
    _write_json(out / SUMMARY, art.summary)
    return art
