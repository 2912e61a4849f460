"""Dense linear algebra, seeded randomness, and assignment primitives.

All matrix arguments are 2-D float64 ``numpy`` arrays.  Every public
operation validates that its result is finite, so callers never see NaN/Inf
propagate silently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

DEFAULT_RANK_TOL = 1e-8


class SvdError(RuntimeError):
    """Raised when the SVD iteration fails to converge."""


def _require_finite(m, name="matrix"):
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Finalizer of the splitmix64 generator; used to mix stream ids so that
    # independently derived child streams never collide in practice.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """A named, splittable random stream.

    Identical ``(seed, stream_id)`` pairs produce identical draw sequences
    across process runs.  A stream is single-owner: parallel consumers must
    each use their own child obtained via :meth:`child`, never a shared
    generator object.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=self.seed & _MASK64,
                                    spawn_key=(self.stream_id & _MASK64,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "RngStream":
        """Derive an independent child stream; deterministic in ``index``."""
        mixed = _splitmix64((self.stream_id & _MASK64) ^ _splitmix64(index & _MASK64))
        return RngStream(self.seed, mixed)


# ---------------------------------------------------------------------------
# Factorizations
# ---------------------------------------------------------------------------

def svd(m):
    """Full thin SVD ``m = u @ diag(s) @ v.T`` with s non-increasing.

    Returns ``(u, s, v)`` where ``v`` holds right singular vectors as
    columns (not transposed).
    """
    m = _require_finite(m)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdError(f"SVD did not converge for {m.shape[0]}x{m.shape[1]} matrix") from exc
    return u, s, vt.T


def numeric_rank(m, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``tol * s_max``; zero matrix has rank 0."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    _, s, _ = svd(np.atleast_2d(m))
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def pseudo_inverse(m, tol: float = DEFAULT_RANK_TOL):
    """Moore-Penrose inverse, treating singular values below ``tol*s_max`` as zero."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    u, s, v = svd(m)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((m.shape[1], m.shape[0]))
    inv_s = np.where(s > tol * s[0], np.divide(1.0, s, out=np.zeros_like(s), where=s > 0), 0.0)
    return (v * inv_s) @ u.T


# ---------------------------------------------------------------------------
# Assignment and regression
# ---------------------------------------------------------------------------

def hungarian_max(score):
    """Permutation ``pi`` maximizing ``sum_i score[i, pi[i]]``.

    Input must be a square matrix with finite entries.
    """
    score = _require_finite(score, "score")
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise ValueError(f"score matrix must be square, got shape {score.shape}")
    rows, cols = linear_sum_assignment(score, maximize=True)
    perm = np.empty(score.shape[0], dtype=np.intp)
    perm[rows] = cols
    return perm


@dataclass(frozen=True)
class OlsFit:
    """Least-squares fit of ``y ~ x`` with intercept.

    ``degenerate`` flags a constant response (zero total sum of squares),
    for which ``r2`` is defined to be 0.
    """

    coef: np.ndarray
    intercept: float
    r2: float
    degenerate: bool = False


def ols_fit(x, y) -> OlsFit:
    """Ordinary least squares of response ``y`` on explanatory columns ``x``.

    The design matrix is augmented with an intercept column internally, and
    the normal system is solved through the pseudo-inverse so collinear
    explanatory columns do not raise.
    """
    x = _require_finite(x, "x")
    y = _require_finite(np.asarray(y, dtype=np.float64).reshape(-1), "y")
    n_samples, n_feat = x.shape
    if y.shape[0] != n_samples:
        raise ValueError("x and y disagree on sample count")
    if n_samples <= n_feat + 1:
        raise ValueError("need more samples than features plus intercept")
    design = np.column_stack([x, np.ones(n_samples)])
    beta = pseudo_inverse(design.T @ design) @ (design.T @ y)
    resid = y - design @ beta
    ss_res = float(resid @ resid)
    centered = y - y.mean()
    ss_tot = float(centered @ centered)
    if ss_tot == 0.0:
        return OlsFit(coef=beta[:-1], intercept=float(beta[-1]), r2=0.0, degenerate=True)
    r2 = 1.0 - ss_res / ss_tot
    return OlsFit(coef=beta[:-1], intercept=float(beta[-1]), r2=min(r2, 1.0))
