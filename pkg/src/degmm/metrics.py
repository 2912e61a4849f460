"""Identifiability metrics: linear-regression R2 and permutation-matched MCC.

R2 measures recovery up to a global affine map (ground-truth latents as
explanatory, learned representation as response, one regression per response
dimension).  MCC measures recovery up to permutation and scaling: the mean of
best-permutation-matched absolute Pearson correlations.  Zero-variance
columns contribute correlation 0 and are flagged rather than raising, since
exactly-masked coordinates are legitimate inputs here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from degmm.numerics import hungarian_max, ols_fit


def _as_2d(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D (samples x dims)")
    return a


def zero_variance_columns(a) -> np.ndarray:
    return np.asarray(a).std(axis=0) == 0.0


def r2_per_dimension(z, zhat):
    """R2 of each response dimension of ``zhat`` regressed on ``z`` with intercept.

    Returns ``(scores, degenerate)`` where degenerate marks constant response
    dimensions, which score 0 by definition.
    """
    z, zhat = _as_2d(z, "z"), _as_2d(zhat, "zhat")
    if z.shape[0] != zhat.shape[0]:
        raise ValueError("sample counts differ")
    scores = np.zeros(zhat.shape[1])
    degenerate = np.zeros(zhat.shape[1], dtype=bool)
    for j in range(zhat.shape[1]):
        fit = ols_fit(z, zhat[:, j])
        scores[j] = fit.r2
        degenerate[j] = fit.degenerate
    return scores, degenerate


def r2_score(z, zhat) -> float:
    """Mean R2 across response dimensions."""
    scores, _ = r2_per_dimension(z, zhat)
    return float(scores.mean())


def pearson_matrix(z, zhat) -> np.ndarray:
    """Entry (i, j) is the Pearson correlation of ``z[:, i]`` with ``zhat[:, j]``.

    Zero-variance columns yield zero entries; use
    :func:`zero_variance_columns` for the flags.
    """
    z, zhat = _as_2d(z, "z"), _as_2d(zhat, "zhat")
    if z.shape[0] != zhat.shape[0]:
        raise ValueError("sample counts differ")
    zc = z - z.mean(axis=0)
    hc = zhat - zhat.mean(axis=0)
    zs = zc.std(axis=0)
    hs = hc.std(axis=0)
    denom = np.outer(zs, hs)
    raw = (zc.T @ hc) / z.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0.0, raw / np.where(denom > 0.0, denom, 1.0), 0.0)
    return corr


def matched_mean_abs(corr):
    """Best-permutation mean of absolute entries of a square matrix."""
    corr = np.atleast_2d(np.asarray(corr, dtype=np.float64))
    if corr.shape[0] != corr.shape[1]:
        raise ValueError("matching requires a square matrix")
    perm = hungarian_max(np.abs(corr))
    value = float(np.abs(corr[np.arange(corr.shape[0]), perm]).mean())
    return value, perm


def mcc(z, zhat):
    """Mean matched absolute correlation and the maximizing permutation.

    The permutation ``pi`` maximizes ``sum_i |corr[i, pi[i]]|`` over all
    permutations (solved by linear assignment).
    """
    return matched_mean_abs(pearson_matrix(z, zhat))


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation summary for one trained model on one sample."""

    r2_mean: float
    r2_per_dim: np.ndarray
    pearson: np.ndarray
    mcc_value: float
    permutation: np.ndarray
    degenerate_true: np.ndarray
    degenerate_learned: np.ndarray

    def __post_init__(self):
        if not -1e-12 <= self.mcc_value <= 1.0 + 1e-12:
            raise ValueError("mcc out of range")
        if np.max(np.abs(self.pearson)) > 1.0 + 1e-12:
            raise ValueError("pearson entries out of range")


def evaluate_representation(z, zhat) -> MetricsReport:
    """Full metric bundle for true latents ``z`` and learned ``zhat``."""
    scores, degenerate = r2_per_dimension(z, zhat)
    corr = pearson_matrix(z, zhat)
    value, perm = mcc(z, zhat)
    return MetricsReport(
        r2_mean=float(scores.mean()),
        r2_per_dim=scores,
        pearson=corr,
        mcc_value=value,
        permutation=perm,
        degenerate_true=zero_variance_columns(z),
        degenerate_learned=zero_variance_columns(zhat),
    )


def write_correlation_csv(path, matrix) -> None:
    """Correlation grid as CSV, full float64 precision."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", encoding="utf-8") as fh:
        for row in matrix:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


REPORT_COLUMNS = ("n", "k", "m", "rho", "delta", "theta", "seed",
                  "r2_stage1", "mcc_stage1", "mcc_stage2")


def report_csv_row(config: dict, seed: int, r2_stage1: float,
                   mcc_stage1: float, mcc_stage2: float) -> str:
    cells = [str(config["n"]), str(config["k"]), str(config["m"]), str(config["rho"]),
             format(float(config["delta"]), ".17g"), format(float(config["theta"]), ".17g"),
             str(seed), format(r2_stage1, ".17g"), format(mcc_stage1, ".17g"),
             format(mcc_stage2, ".17g")]
    return ",".join(cells)
