"""Mixtures of potentially degenerate Gaussians and their algebra.

Components are stored through low-rank factors ``A`` with covariance
``Sigma = A @ A.T``, never as full covariance matrices, so degenerate ranks
are exact by construction.  The module provides sampling, Mahalanobis
distances through the pseudo-inverse, affine pushforwards, equality up to
component permutation, rank-preserving random projections, executable
checkers for the support-structure assumptions, and the assembly of a global
affine map from per-component affine maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from degmm.numerics import RngStream, hungarian_max, numeric_rank, pseudo_inverse

REDUCED_FORM_TOL = 1e-9


class ConsistencyError(ValueError):
    """Per-component affine maps disagree where they must coincide."""


@dataclass(frozen=True)
class GaussComponent:
    """One mixture component: mean and a full-column-rank covariance factor.

    ``basis_index`` records an axis-aligned support: when present, every row
    of ``factor`` outside the index set must be identically zero.
    """

    mean: np.ndarray
    factor: np.ndarray
    basis_index: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        factor = np.atleast_2d(np.asarray(self.factor, dtype=np.float64))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "factor", factor)
        if factor.shape[0] != mean.shape[0]:
            raise ValueError("factor row count must equal mean dimension")
        if factor.shape[1] > 0 and numeric_rank(factor) != factor.shape[1]:
            raise ValueError("factor must have full column rank")
        if self.basis_index is not None:
            idx = tuple(sorted(int(i) for i in self.basis_index))
            object.__setattr__(self, "basis_index", idx)
            if any(i < 0 or i >= mean.shape[0] for i in idx):
                raise ValueError("basis_index out of range")
            outside = np.setdiff1d(np.arange(mean.shape[0]), idx)
            if factor.shape[1] > 0 and np.any(factor[outside, :] != 0.0):
                raise ValueError("factor rows outside basis_index must be zero")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    def covariance(self) -> np.ndarray:
        return self.factor @ self.factor.T

    def support_projector(self, tol: float = 1e-10) -> np.ndarray:
        """Orthogonal projector onto the span of the support directions."""
        if self.rank == 0:
            return np.zeros((self.dim, self.dim))
        return self.factor @ pseudo_inverse(self.factor, tol)


@dataclass(frozen=True)
class PdGmm:
    """Mixture in reduced form: positive weights, pairwise distinct components."""

    weights: np.ndarray
    components: tuple[GaussComponent, ...]
    translation: np.ndarray = None  # common support point; zeros when absent

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        comps = tuple(self.components)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "components", comps)
        if len(comps) == 0:
            raise ValueError("mixture needs at least one component")
        n = comps[0].dim
        if any(c.dim != n for c in comps):
            raise ValueError("components disagree on dimension")
        if weights.shape[0] != len(comps):
            raise ValueError("one weight per component required")
        if np.any(weights <= 0.0):
            raise ValueError("weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        translation = self.translation
        if translation is None:
            translation = np.zeros(n)
        translation = np.asarray(translation, dtype=np.float64).reshape(-1)
        if translation.shape[0] != n:
            raise ValueError("translation has wrong dimension")
        object.__setattr__(self, "translation", translation)
        covs = [c.covariance() for c in comps]
        for i in range(len(comps)):
            for j in range(i + 1, len(comps)):
                if (np.linalg.norm(comps[i].mean - comps[j].mean) <= REDUCED_FORM_TOL
                        and np.linalg.norm(covs[i] - covs[j]) <= REDUCED_FORM_TOL):
                    raise ValueError(f"components {i} and {j} coincide; mixture not reduced")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)


# ---------------------------------------------------------------------------
# Sampling and distances
# ---------------------------------------------------------------------------

def sample(p: PdGmm, count: int, rng: RngStream):
    """Draw ``count`` rows; returns ``(z, labels)`` with component labels.

    Row i is ``mean_j + factor_j @ eps`` for standard normal ``eps``.
    """
    gen = rng.generator()
    z = np.zeros((count, p.dim))
    labels = gen.choice(p.n_components, size=count, p=p.weights)
    for j, comp in enumerate(p.components):
        idx = np.nonzero(labels == j)[0]
        if idx.size == 0:
            continue
        eps = gen.standard_normal((idx.size, comp.rank))
        z[idx] = comp.mean + eps @ comp.factor.T
    return z, labels


def mahalanobis(z, comp: GaussComponent, tol: float = 1e-8) -> float:
    """Distance through the pseudo-inverse covariance; off-support parts vanish."""
    diff = np.asarray(z, dtype=np.float64).reshape(-1) - comp.mean
    q = float(diff @ pseudo_inverse(comp.covariance(), tol) @ diff)
    return float(np.sqrt(max(q, 0.0)))


def affine_pushforward(p: PdGmm, h, b) -> PdGmm:
    """Image mixture under ``z -> h @ z + b``; weights unchanged.

    ``h`` must preserve every component rank (always true for invertible
    ``h``); otherwise the full-column-rank invariant fails and this raises.
    """
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if h.shape[1] != p.dim:
        raise ValueError(f"h has {h.shape[1]} columns, mixture dimension is {p.dim}")
    if b.shape[0] != h.shape[0]:
        raise ValueError("b dimension must match h row count")
    comps = []
    for comp in p.components:
        factor = h @ comp.factor
        basis_index = comp.basis_index
        if basis_index is not None:
            outside = np.setdiff1d(np.arange(h.shape[0]), basis_index)
            if outside.size and factor.shape[1] and np.any(factor[outside, :] != 0.0):
                basis_index = None  # support no longer axis-aligned
        comps.append(GaussComponent(h @ comp.mean + b, factor, basis_index))
    return PdGmm(p.weights.copy(), tuple(comps), h @ p.translation + b)


def equal_up_to_permutation(p: PdGmm, q: PdGmm, tol: float = 1e-8):
    """Permutation matching components of ``p`` to ``q``, or None.

    ``pi[j]`` gives the component of ``q`` matching component ``j`` of ``p``
    with weight, mean, and covariance all within ``tol``.
    """
    if p.n_components != q.n_components:
        return None
    n = p.n_components
    covs_p = [c.covariance() for c in p.components]
    covs_q = [c.covariance() for c in q.components]
    feasible = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ok = (abs(p.weights[i] - q.weights[j]) <= tol
                  and np.linalg.norm(p.components[i].mean - q.components[j].mean) <= tol
                  and np.linalg.norm(covs_p[i] - covs_q[j]) <= tol)
            feasible[i, j] = 1.0 if ok else 0.0
    perm = hungarian_max(feasible)
    if feasible[np.arange(n), perm].sum() == n:
        return perm
    return None


def rank_preserving_projection(sigma, m: int, rng: RngStream, max_tries: int = 32):
    """Random ``n x m`` matrix ``a`` with ``rank(a.T @ sigma @ a) == rank(sigma)``.

    Standard-normal draws succeed with probability one; repeated failure
    indicates a numerical pathology in ``sigma`` and raises.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    n = sigma.shape[0]
    k = numeric_rank(sigma) if np.any(sigma != 0.0) else 0
    if not k <= m <= n:
        raise ValueError(f"need rank(sigma)={k} <= m={m} <= n={n}")
    gen = rng.generator()
    for _ in range(max_tries):
        a = gen.standard_normal((n, m))
        if k == 0 or numeric_rank(a.T @ sigma @ a) == k:
            return a
    raise RuntimeError(f"no rank-preserving projection found in {max_tries} tries")


# ---------------------------------------------------------------------------
# Support geometry
# ---------------------------------------------------------------------------

def _flat_projectors(offsets, spans, tol=1e-10):
    """Orthogonal projectors onto the complement of each span."""
    projs = []
    for off, span in zip(offsets, spans):
        n = off.shape[0]
        span = np.atleast_2d(span)
        if span.shape[1] == 0:
            projs.append(np.eye(n))
        else:
            projs.append(np.eye(n) - span @ pseudo_inverse(span, tol))
    return projs


def intersect_flats(offsets, spans, tol: float = 1e-8):
    """Common point and direction basis of affine flats ``offset + col(span)``.

    Solves the stacked least-squares system of complement constraints and
    returns ``(point, basis)`` where ``basis`` columns span the intersection
    directions, or None when the flats do not meet (residual above ``tol``).
    """
    offsets = [np.asarray(o, dtype=np.float64).reshape(-1) for o in offsets]
    spans = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in spans]
    n = offsets[0].shape[0]
    projs = _flat_projectors(offsets, spans)
    s_mat = sum(projs)
    rhs = sum(pj @ off for pj, off in zip(projs, offsets))
    point = pseudo_inverse(s_mat) @ rhs
    residual = max(np.linalg.norm(pj @ (point - off)) for pj, off in zip(projs, offsets))
    if residual > tol:
        return None
    u, s, _ = np.linalg.svd(s_mat)
    if s.size == 0 or s[0] == 0.0:
        return point, np.eye(n)
    null_mask = s <= 1e-10 * s[0]
    return point, u[:, null_mask]


@dataclass(frozen=True)
class GenericityCheck:
    rank: int
    indices: tuple[int, ...]
    passed: bool


@dataclass(frozen=True)
class GenericityReport:
    checks: tuple[GenericityCheck, ...]
    truncated: bool = False

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]


def check_genericity(p: PdGmm, n_probe: int = 64, tol: float = 1e-6,
                     rng: RngStream = RngStream(0), max_class_size_exhaustive: int = 12):
    """Sampled sufficient check that same-rank overlapping components are
    distinguishable by Mahalanobis distance somewhere on their common flat.

    For every subset of same-rank components whose supports intersect, probe
    points of the intersection are tested for pairwise distances differing by
    more than ``tol``.  Rank classes larger than
    ``max_class_size_exhaustive`` are checked on pairs only (reported via
    ``truncated``); full subset enumeration is exponential.
    """
    gen = rng.generator()
    by_rank: dict[int, list[int]] = {}
    for j, comp in enumerate(p.components):
        by_rank.setdefault(comp.rank, []).append(j)
    checks = []
    truncated = False
    for rank, members in sorted(by_rank.items()):
        if len(members) < 2:
            continue
        if len(members) > max_class_size_exhaustive:
            truncated = True
            subsets = [(members[i], members[j])
                       for i in range(len(members)) for j in range(i + 1, len(members))]
        else:
            subsets = []
            for mask in range(1, 1 << len(members)):
                subset = tuple(members[i] for i in range(len(members)) if mask >> i & 1)
                if len(subset) >= 2:
                    subsets.append(subset)
        for subset in subsets:
            comps = [p.components[j] for j in subset]
            meet = intersect_flats([c.mean for c in comps], [c.factor for c in comps])
            if meet is None:
                continue
            point, basis = meet
            probes = [point]
            if basis.shape[1] > 0:
                coeffs = gen.standard_normal((n_probe, basis.shape[1]))
                probes.extend(point + coeffs @ basis.T)
            passed = False
            for z in probes:
                dists = [mahalanobis(z, c) for c in comps]
                gaps = [abs(dists[a] - dists[b])
                        for a in range(len(dists)) for b in range(a + 1, len(dists))]
                if all(g > tol for g in gaps):
                    passed = True
                    break
            checks.append(GenericityCheck(rank, subset, passed))
    return GenericityReport(tuple(checks), truncated)


@dataclass(frozen=True)
class VariabilityResult:
    passed: bool
    offending: Optional[int] = None


def check_sufficient_variability(index_sets: Sequence[Sequence[int]], n: int) -> VariabilityResult:
    """For every coordinate i, components masking i must jointly cover the rest."""
    sets = [frozenset(int(i) for i in ks) for ks in index_sets]
    if any(i < 0 or i >= n for ks in sets for i in ks):
        raise ValueError("index sets must be subsets of range(n)")
    for i in range(n):
        union = set()
        for ks in sets:
            if i not in ks:
                union |= ks
        if union != set(range(n)) - {i}:
            return VariabilityResult(False, i)
    return VariabilityResult(True)


@dataclass(frozen=True)
class CommonBasis:
    origin: np.ndarray
    basis: np.ndarray  # columns form a basis of R^n
    index_sets: tuple[tuple[int, ...], ...]


def check_common_basis(supports, tol: float = 1e-8) -> Optional[CommonBasis]:
    """Shared origin, basis, and per-support index sets, or None.

    ``supports`` is a sequence of ``(offset, span)`` pairs describing affine
    flats.  A common point must exist, and the union of span directions must
    greedily assemble into a basis such that every flat is spanned by a
    subset of it; three pairwise-dependent directions, or disjoint flats,
    yield None.
    """
    offsets = [np.asarray(o, dtype=np.float64).reshape(-1) for o, _ in supports]
    spans = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for _, s in supports]
    n = offsets[0].shape[0]
    meet = intersect_flats(offsets, spans, tol)
    if meet is None:
        return None
    origin, _ = meet
    basis_cols: list[np.ndarray] = []
    for span in spans:
        for col in span.T:
            if np.linalg.norm(col) <= tol:
                continue
            candidate = col / np.linalg.norm(col)
            stacked = np.column_stack(basis_cols + [candidate]) if basis_cols else candidate[:, None]
            if numeric_rank(stacked) == stacked.shape[1]:
                basis_cols.append(candidate)
    if len(basis_cols) > n:
        return None
    projs = [span @ pseudo_inverse(span) if span.shape[1] else np.zeros((n, n)) for span in spans]
    index_sets = []
    for span, proj in zip(spans, projs):
        inside = [k for k, v in enumerate(basis_cols) if np.linalg.norm(v - proj @ v) <= tol]
        want = numeric_rank(span) if span.shape[1] else 0
        if len(inside) != want:
            return None
        index_sets.append(tuple(inside))
    if len(basis_cols) < n:
        if basis_cols:
            current = np.column_stack(basis_cols)
            complement = np.eye(n) - current @ pseudo_inverse(current)
        else:
            complement = np.eye(n)
        u, _, _ = np.linalg.svd(complement)
        extra = u[:, : n - len(basis_cols)]
        basis_cols.extend(extra.T)
    basis = np.column_stack(basis_cols)
    if numeric_rank(basis) != n:
        return None
    return CommonBasis(origin, basis, tuple(index_sets))


def assemble_global_affine(per_component, origin, basis, index_sets,
                           agree_tol: float = 1e-9):
    """Unique global affine map extending consistent per-component maps.

    ``per_component`` holds ``(h_j, b_j)`` pairs defining ``z -> h_j z + b_j``
    on support j.  The global linear part is recovered column-by-column from
    map values at ``origin + basis_k`` and the global offset from the value
    at ``origin``.  Raises :class:`ConsistencyError` when two maps disagree
    at the origin or on a shared basis direction, and when some basis
    direction is covered by no component.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(-1)
    basis = np.atleast_2d(np.asarray(basis, dtype=np.float64))
    n = origin.shape[0]
    maps = [(np.atleast_2d(np.asarray(h, dtype=np.float64)),
             np.asarray(b, dtype=np.float64).reshape(-1)) for h, b in per_component]
    values_at_origin = [h @ origin + b for h, b in maps]
    for j in range(1, len(maps)):
        if np.max(np.abs(values_at_origin[j] - values_at_origin[0])) > agree_tol:
            raise ConsistencyError(
                f"maps 0 and {j} disagree at the common point by "
                f"{np.max(np.abs(values_at_origin[j] - values_at_origin[0])):.3e}")
    f_origin = values_at_origin[0]
    d = f_origin.shape[0]
    diff_cols = np.zeros((d, n))
    for k in range(n):
        covering = [j for j, ks in enumerate(index_sets) if k in ks]
        if not covering:
            raise ConsistencyError(f"basis direction {k} is covered by no component")
        zk = origin + basis[:, k]
        vals = [maps[j][0] @ zk + maps[j][1] for j in covering]
        for a in range(1, len(vals)):
            if np.max(np.abs(vals[a] - vals[0])) > agree_tol:
                raise ConsistencyError(
                    f"maps {covering[0]} and {covering[a]} disagree on basis direction {k}")
        diff_cols[:, k] = vals[0] - f_origin
    a_mat = np.linalg.solve(basis.T, diff_cols.T).T
    b_vec = f_origin - a_mat @ origin
    return a_mat, b_vec


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_vec(v) -> str:
    return "[" + ", ".join(_fmt(x) for x in v) + "]"


def _fmt_mat(m) -> str:
    return "[" + ", ".join(_fmt_vec(row) for row in m) + "]"


def to_json(p: PdGmm) -> str:
    """Canonical JSON with 17-significant-digit reals; bit-exact round trip."""
    parts = []
    for comp in p.components:
        ks = "null" if comp.basis_index is None else str(list(comp.basis_index))
        parts.append('{"mean": %s, "factor": %s, "basis_index": %s}'
                     % (_fmt_vec(comp.mean), _fmt_mat(comp.factor), ks))
    return ('{"n": %d, "J": %d, "weights": %s, "components": [%s], "translation": %s}'
            % (p.dim, p.n_components, _fmt_vec(p.weights), ", ".join(parts),
               _fmt_vec(p.translation)))


def from_json(text: str) -> PdGmm:
    doc = json.loads(text)
    comps = []
    for c in doc["components"]:
        factor = np.asarray(c["factor"], dtype=np.float64)
        if factor.size == 0:
            factor = factor.reshape(doc["n"], 0)
        ks = None if c["basis_index"] is None else tuple(c["basis_index"])
        comps.append(GaussComponent(np.asarray(c["mean"]), factor, ks))
    return PdGmm(np.asarray(doc["weights"]), tuple(comps),
                 np.asarray(doc["translation"]))
