"""Random linear maps R^N -> R^m and their log-corrected bi-Lipschitz constants.

A map L is accepted on a sample when, for every pair u != v at distance at
most delta_L < 1,

    |u - v| / (C_L (-log|u - v|)^gamma)  <=  |Lu - Lv|  <=  C_L |u - v|.

Draws that fail (non-injective, or C_L above the ceiling) are resampled.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import DomainError, InjectivityError
from .geometry import PointCloud, load_cloud_csv, save_cloud_csv
from .systems import AttractorSample

log = logging.getLogger(__name__)

__all__ = [
    "LinearEmbedding",
    "EmbeddedCloud",
    "BilipschitzFit",
    "draw_embedding",
    "verify_bilipschitz",
    "find_embedding",
    "augment",
    "project_sample",
    "pair_violations",
    "default_delta_L",
]

C_MAX = 1e3


@dataclass
class LinearEmbedding:
    matrix: np.ndarray
    op_norm: float
    seed: object = None
    C_L: Optional[float] = None
    gamma: Optional[float] = None
    delta_L: Optional[float] = None
    augmented: bool = False

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def N(self) -> int:
        return self.matrix.shape[1]

    @property
    def verified(self) -> bool:
        return self.C_L is not None

    def __call__(self, u) -> np.ndarray:
        return np.asarray(u, dtype=np.float64) @ self.matrix.T

    def sidecar(self) -> dict:
        seed = list(self.seed) if isinstance(self.seed, (tuple, list)) else self.seed
        return {
            "m": self.m,
            "N": self.N,
            "C_L": self.C_L,
            "gamma": self.gamma,
            "delta_L": self.delta_L,
            "op_norm": self.op_norm,
            "augmented": self.augmented,
            "seed": seed,
        }

    def save(self, stem) -> None:
        stem = Path(stem)
        save_cloud_csv(stem.with_suffix(".csv"), self.matrix)
        stem.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, stem) -> "LinearEmbedding":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        mat = load_cloud_csv(stem.with_suffix(".csv"))
        seed = meta["seed"]
        return cls(
            matrix=mat,
            op_norm=meta["op_norm"],
            seed=tuple(seed) if isinstance(seed, list) else seed,
            C_L=meta["C_L"],
            gamma=meta["gamma"],
            delta_L=meta["delta_L"],
            augmented=meta["augmented"],
        )


@dataclass
class EmbeddedCloud:
    cloud: PointCloud
    g1_values: np.ndarray
    source_indices: np.ndarray

    def __len__(self):
        return len(self.cloud)

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points


class BilipschitzFit(NamedTuple):
    C_L: float
    delta_L: float
    violation_fraction: float
    n_pairs: int


def draw_embedding(N: int, m: int, seed) -> LinearEmbedding:
    """m x N matrix with i.i.d. N(0, 1/m) entries."""
    if m >= N:
        raise DomainError(f"embedding dimension m={m} must be below ambient N={N}")
    if m < 1:
        raise DomainError("m must be positive")
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((m, N)) / np.sqrt(m)
    # the stored norm must dominate the true one; pad by a relative ulp margin
    op = float(np.linalg.norm(mat, 2)) * (1 + 1e-12)
    return LinearEmbedding(matrix=mat, op_norm=op, seed=seed)


def default_delta_L(points: np.ndarray) -> float:
    """min(1/2, half the sample diameter); always < 1 so -log d > 0."""
    cloud = PointCloud(points)
    return min(0.5, 0.5 * cloud.diameter()) if len(cloud) > 1 else 0.5


def _pair_blocks(U: np.ndarray, delta: float, block: int = 256):
    """Yield (i, j, d, diff) for pairs i < j with 0 < d <= delta."""
    n = len(U)
    for start in range(0, n, block):
        rows = np.arange(start, min(start + block, n))
        diff = U[rows, None, :] - U[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        ii, jj = np.nonzero((d > 0) & (d <= delta) & (rows[:, None] < np.arange(n)[None, :]))
        if ii.size:
            yield rows[ii], jj, d[ii, jj], diff[ii, jj]


def _ratios(matrix, diff, d, gamma):
    lin = np.sqrt(np.sum((diff @ matrix.T) ** 2, axis=1))
    with np.errstate(divide="ignore"):
        upper = lin / d
        lower = d / ((-np.log(d)) ** gamma * lin)
    return lin, upper, lower


def verify_bilipschitz(
    L: LinearEmbedding,
    sample,
    gamma: float,
    delta_L: Optional[float] = None,
    C_max: float = C_MAX,
) -> BilipschitzFit:
    """Fit the smallest C_L for which both inequalities hold on every pair.

    On success (C_L <= C_max) the constants are stored on ``L``. Otherwise
    ``violation_fraction`` is the fraction of pairs violating at ``C_max`` and
    ``L`` is left unverified.
    """
    U = sample.points if isinstance(sample, (AttractorSample, PointCloud)) else np.asarray(sample)
    if U.shape[1] != L.N:
        raise DomainError(f"sample dimension {U.shape[1]} does not match map input {L.N}")
    if delta_L is None:
        delta_L = default_delta_L(U)
    if not 0 < delta_L < 1:
        raise DomainError("delta_L must lie in (0, 1)")
    C_fit, n_pairs = 0.0, 0
    worst = []
    for i, j, d, diff in _pair_blocks(U, delta_L):
        lin, upper, lower = _ratios(L.matrix, diff, d, gamma)
        if np.any(lin == 0):
            k = int(np.flatnonzero(lin == 0)[0])
            raise InjectivityError(f"L identifies sample points {i[k]} and {j[k]}")
        C_fit = max(C_fit, float(upper.max()), float(lower.max()))
        n_pairs += len(d)
        worst.append(np.maximum(upper, lower))
    if n_pairs == 0:
        C_fit = 1.0
    if C_fit <= C_max:
        L.C_L, L.gamma, L.delta_L = C_fit, gamma, delta_L
        return BilipschitzFit(C_fit, delta_L, 0.0, n_pairs)
    bad = sum(int(np.count_nonzero(w > C_max)) for w in worst)
    return BilipschitzFit(C_max, delta_L, bad / n_pairs, n_pairs)


def pair_violations(L: LinearEmbedding, sample) -> int:
    """Re-check both inequalities using only the constants stored on ``L``."""
    if not L.verified:
        raise DomainError("embedding has no fitted constants")
    U = sample.points if isinstance(sample, (AttractorSample, PointCloud)) else np.asarray(sample)
    bad = 0
    for _, _, d, diff in _pair_blocks(U, L.delta_L):
        _, upper, lower = _ratios(L.matrix[: L.m - int(L.augmented)], diff, d, L.gamma)
        bad += int(np.count_nonzero((upper > L.C_L) | (lower > L.C_L)))
    return bad


def find_embedding(
    sample,
    m: int,
    gamma: float,
    seed: int = 0,
    *,
    retries: int = 20,
    delta_L: Optional[float] = None,
    C_max: float = C_MAX,
) -> tuple[LinearEmbedding, BilipschitzFit, int]:
    """Draw maps until one verifies; returns (L, fit, attempts used).

    Raises InjectivityError after ``retries`` failures, reporting the best
    violation fraction seen.
    """
    U = sample.points if isinstance(sample, (AttractorSample, PointCloud)) else np.asarray(sample)
    best = None
    for k in range(retries):
        L = draw_embedding(U.shape[1], m, (seed, k))
        try:
            fit = verify_bilipschitz(L, U, gamma, delta_L, C_max)
        except InjectivityError as exc:
            log.info("draw %d rejected: %s", k, exc)
            continue
        if L.verified:
            return L, fit, k + 1
        if best is None or fit.violation_fraction < best:
            best = fit.violation_fraction
    raise InjectivityError(
        f"no admissible embedding after {retries} draws (best violation fraction {best})"
    )


def augment(L: LinearEmbedding) -> LinearEmbedding:
    """L'u = (Lu, 0): append a zero row; distances and constants unchanged."""
    if L.augmented:
        raise DomainError("embedding is already augmented")
    mat = np.vstack([L.matrix, np.zeros((1, L.N))])
    return replace(L, matrix=mat, augmented=True)


def project_sample(L: LinearEmbedding, sample: AttractorSample) -> EmbeddedCloud:
    """Images L u_i with conjugated field values g1(L u_i) = L G(u_i)."""
    if not L.verified:
        raise DomainError("refusing to project with an unverified embedding")
    pts = sample.points @ L.matrix.T
    g1 = sample.field_values @ L.matrix.T
    return EmbeddedCloud(
        cloud=PointCloud(pts), g1_values=g1, source_indices=np.arange(len(pts))
    )
