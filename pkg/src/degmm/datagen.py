"""Synthetic benchmark: SCM latents, component masking, and invertible mixing.

The generator follows a fixed recipe: sample a random DAG with ``n*k`` edges,
simulate a linear Gaussian structural causal model over it, mask each sample
down to a per-component support (replacing inactive coordinates with a
translation vector), optionally rotate, and push the result through an
invertible piecewise-affine multi-layer map.  Everything is driven by named
:class:`~degmm.numerics.RngStream` children, so identical seeds reproduce
byte-identical datasets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from degmm.numerics import RngStream
from degmm.pdgmm import GaussComponent, PdGmm

WEIGHT_LOW = 0.2
WEIGHT_HIGH = 1.0
SLOPE_LOW = 0.5
SLOPE_HIGH = 1.5
MAX_CONDITION = 1e6

RHO_MODES = ("1var", "50%", "75%")


# ---------------------------------------------------------------------------
# Structural causal model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScmSpec:
    """Linear Gaussian SCM with strictly lower-triangular weighted adjacency."""

    weights: np.ndarray
    noise_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "weights", w)
        n = w.shape[0]
        if w.shape != (n, n):
            raise ValueError("adjacency must be square")
        if np.any(np.triu(w) != 0.0):
            raise ValueError("adjacency must be strictly lower triangular")
        nz = w[w != 0.0]
        if nz.size and not np.all((np.abs(nz) >= WEIGHT_LOW) & (np.abs(nz) <= WEIGHT_HIGH)):
            raise ValueError(f"edge weights must lie in +-[{WEIGHT_LOW}, {WEIGHT_HIGH}]")
        scale = self.noise_scale
        if scale is None:
            scale = np.ones(n)
        scale = np.asarray(scale, dtype=np.float64).reshape(-1)
        if scale.shape[0] != n or np.any(scale <= 0.0):
            raise ValueError("noise_scale must be positive per node")
        object.__setattr__(self, "noise_scale", scale)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(self.weights))


def sample_er_dag(n: int, k: float, rng: RngStream) -> ScmSpec:
    """Random DAG with exactly ``round(n*k)`` lower-triangular edges.

    Edges are drawn uniformly without replacement; weights uniformly from
    the two-interval law ``+-[0.2, 1]``.
    """
    n_edges = int(round(n * k))
    max_edges = n * (n - 1) // 2
    if not 0 <= n_edges <= max_edges:
        raise ValueError(f"requested {n_edges} edges but at most {max_edges} fit in a DAG on {n} nodes")
    gen = rng.generator()
    pairs = [(i, j) for i in range(n) for j in range(i)]
    chosen = gen.choice(len(pairs), size=n_edges, replace=False) if n_edges else []
    w = np.zeros((n, n))
    for idx in chosen:
        i, j = pairs[int(idx)]
        magnitude = gen.uniform(WEIGHT_LOW, WEIGHT_HIGH)
        sign = 1.0 if gen.uniform() < 0.5 else -1.0
        w[i, j] = sign * magnitude
    return ScmSpec(w)


def simulate_scm(spec: ScmSpec, count: int, rng: RngStream) -> np.ndarray:
    """Draw ``count`` joint samples via forward substitution of ``(I - W) z = eps``."""
    gen = rng.generator()
    eps = gen.standard_normal((count, spec.n)) * spec.noise_scale
    if count == 0:
        return eps
    i_minus_w = np.eye(spec.n) - spec.weights
    return solve_triangular(i_minus_w, eps.T, lower=True, unit_diagonal=True).T


def scm_covariance(spec: ScmSpec) -> np.ndarray:
    """Analytic covariance ``(I-W)^-1 D^2 (I-W)^-T``."""
    i_minus_w = np.eye(spec.n) - spec.weights
    l = solve_triangular(i_minus_w, np.diag(spec.noise_scale), lower=True, unit_diagonal=True)
    return l @ l.T


def scm_moments(spec: ScmSpec):
    """Analytic per-coordinate mean (zero) and standard deviation."""
    cov = scm_covariance(spec)
    return np.zeros(spec.n), np.sqrt(np.diag(cov))


# ---------------------------------------------------------------------------
# Component masking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    """Per-component active index sets plus translation and rotation controls."""

    index_sets: tuple[tuple[int, ...], ...]
    translation: np.ndarray
    theta_degrees: float
    rotation: np.ndarray

    def __post_init__(self):
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        rotation = np.atleast_2d(np.asarray(self.rotation, dtype=np.float64))
        sets = tuple(tuple(sorted(int(i) for i in ks)) for ks in self.index_sets)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "index_sets", sets)
        n = translation.shape[0]
        if rotation.shape != (n, n):
            raise ValueError("rotation must be n x n")
        if np.max(np.abs(rotation @ rotation.T - np.eye(n))) > 1e-12:
            raise ValueError("rotation must be orthogonal")
        if len(set(sets)) != len(sets):
            raise ValueError("index sets must be pairwise distinct")
        sizes = {len(ks) for ks in sets}
        if len(sizes) > 1:
            raise ValueError("index sets must share one size")
        if any(i < 0 or i >= n for ks in sets for i in ks):
            raise ValueError("index set entry out of range")

    @property
    def n(self) -> int:
        return self.translation.shape[0]

    @property
    def n_components(self) -> int:
        return len(self.index_sets)


def active_size(n: int, rho_mode: str) -> int:
    """Number of active coordinates per component for a sparsity mode."""
    if rho_mode == "1var":
        return 1
    if rho_mode == "50%":
        fraction = 0.5
    elif rho_mode == "75%":
        fraction = 0.75
    else:
        raise ValueError(f"rho mode must be one of {RHO_MODES}, got {rho_mode!r}")
    return max(1, int(math.floor(fraction * n + 0.5)))


def max_components(n: int, rho_mode: str) -> int:
    return math.comb(n, active_size(n, rho_mode))


def rotation_matrix(n: int, theta_degrees: float) -> np.ndarray:
    """Product of plane rotations by ``theta`` on coordinate pairs (0,1), (2,3), ..."""
    theta = math.radians(theta_degrees)
    rot = np.eye(n)
    c, s = math.cos(theta), math.sin(theta)
    for a in range(0, n - 1, 2):
        givens = np.eye(n)
        givens[a, a] = c
        givens[a + 1, a + 1] = c
        givens[a, a + 1] = -s
        givens[a + 1, a] = s
        rot = givens @ rot
    return rot


def build_mask_spec(n: int, n_comp: int, rho_mode: str, delta: float,
                    theta_degrees: float, moments, rng: RngStream) -> MaskSpec:
    """Sample ``n_comp`` distinct equal-size index sets and build the controls.

    The translation vector is ``mu + delta * sigma`` from the supplied SCM
    moments; raises when the requested component count exceeds the number of
    distinct index sets.
    """
    size = active_size(n, rho_mode)
    available = math.comb(n, size)
    if n_comp > available:
        raise ValueError(f"{n_comp} distinct {size}-subsets of {n} requested, only {available} exist")
    if n_comp < 1:
        raise ValueError("need at least one component")
    gen = rng.generator()
    seen: set[tuple[int, ...]] = set()
    sets = []
    while len(sets) < n_comp:
        candidate = tuple(sorted(gen.choice(n, size=size, replace=False).tolist()))
        if candidate not in seen:
            seen.add(candidate)
            sets.append(candidate)
    mu, sigma = moments
    translation = np.asarray(mu, dtype=np.float64) + delta * np.asarray(sigma, dtype=np.float64)
    return MaskSpec(tuple(sets), translation, theta_degrees, rotation_matrix(n, theta_degrees))


def induced_mixture(scm: ScmSpec, mask: MaskSpec) -> PdGmm:
    """Ground-truth mixture of the masked-then-rotated SCM latents.

    Component j keeps the SCM covariance sub-block on its active set, places
    translation entries on the inactive coordinates, and rotates; weights are
    uniform.
    """
    cov = scm_covariance(scm)
    n = scm.n
    rot = mask.rotation
    axis_aligned = mask.theta_degrees == 0.0
    comps = []
    for ks in mask.index_sets:
        idx = np.asarray(ks, dtype=np.intp)
        mean = mask.translation.copy()
        mean[idx] = 0.0  # SCM mean is zero on active coordinates
        factor = np.zeros((n, len(ks)))
        factor[idx, :] = np.linalg.cholesky(cov[np.ix_(idx, idx)])
        comps.append(GaussComponent(rot @ mean, rot @ factor,
                                    ks if axis_aligned else None))
    weights = np.full(len(comps), 1.0 / len(comps))
    return PdGmm(weights, tuple(comps), rot @ mask.translation)


def latent_dataset(scm: ScmSpec, mask: MaskSpec, count: int, rng: RngStream):
    """Masked, rotated latent samples with labels and the induced mixture.

    Components are drawn uniformly; coordinates outside a sample's active set
    are set to the translation entry before rotation.
    """
    gen = rng.generator()
    n, n_comp = scm.n, mask.n_components
    labels = gen.integers(0, n_comp, size=count)
    eps = gen.standard_normal((count, n)) * scm.noise_scale
    if count:
        z = solve_triangular(np.eye(n) - scm.weights, eps.T, lower=True, unit_diagonal=True).T
    else:
        z = eps
    active = np.zeros((n_comp, n), dtype=bool)
    for j, ks in enumerate(mask.index_sets):
        active[j, list(ks)] = True
    z = np.where(active[labels], z, mask.translation)
    z = z @ mask.rotation.T
    return z, labels, induced_mixture(scm, mask)


# ---------------------------------------------------------------------------
# Invertible piecewise-affine mixing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixingNetwork:
    """Square-layer MLP: affine layers with leaky activations, final layer affine.

    With ``m`` layers there are ``m - 1`` activation slopes; every weight
    matrix is invertible so the exact inverse exists.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    slopes: tuple[float, ...]

    def __post_init__(self):
        ws = tuple(np.atleast_2d(np.asarray(w, dtype=np.float64)) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases)
        slopes = tuple(float(s) for s in self.slopes)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "slopes", slopes)
        if len(ws) != len(bs) or len(slopes) != max(len(ws) - 1, 0):
            raise ValueError("need one bias per layer and one slope per hidden transition")
        d = ws[0].shape[0]
        for w, b in zip(ws, bs):
            if w.shape != (d, d) or b.shape != (d,):
                raise ValueError("all layers must be square and same width")
            if np.linalg.cond(w) > MAX_CONDITION:
                raise ValueError("weight matrix condition number exceeds cap")
        if any(s <= 0.0 for s in slopes):
            raise ValueError("activation slopes must be positive")

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def build_mixing(n: int, d: int, m: int, rng: RngStream) -> MixingNetwork:
    """Sample an invertible ``m``-layer mixing map on dimension ``d == n``.

    Each weight matrix is a random rotation (QR of an i.i.d. normal draw)
    times a diagonal scaling in [0.8, 1.25], keeping per-layer condition
    numbers below 1.6.  Raw Gaussian layers compound the composition's
    condition number past any useful round-trip accuracy at 20 layers;
    this construction keeps the exact inverse accurate to ~1e-13.  Slopes
    are uniform in (0.5, 1.5); matrices breaching the condition cap are
    resampled (at most 100 tries each) as a guard.
    """
    if d != n:
        raise ValueError("observation dimension must equal latent dimension for an exact inverse")
    if m < 1:
        raise ValueError("need at least one layer")
    gen = rng.generator()
    weights, biases = [], []
    for _ in range(m):
        for _attempt in range(100):
            q, r = np.linalg.qr(gen.standard_normal((d, d)))
            q = q * np.sign(np.diag(r))  # make the factorization draw-continuous
            w = q * gen.uniform(0.8, 1.25, size=d)
            if np.linalg.cond(w) <= MAX_CONDITION:
                break
        else:
            raise RuntimeError("could not sample a well-conditioned layer in 100 tries")
        weights.append(w)
        biases.append(gen.standard_normal(d) * 0.1)
    slopes = tuple(gen.uniform(SLOPE_LOW, SLOPE_HIGH) for _ in range(m - 1))
    return MixingNetwork(tuple(weights), tuple(biases), slopes)


def _leaky(x, slope):
    return np.where(x >= 0.0, x, slope * x)


def _leaky_inverse(y, slope):
    return np.where(y >= 0.0, y, y / slope)


def mix_forward(net: MixingNetwork, z: np.ndarray) -> np.ndarray:
    """Apply the mixing map row-wise."""
    x = np.asarray(z, dtype=np.float64)
    if x.shape[-1] != net.dim:
        raise ValueError("input width does not match network width")
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        x = x @ w.T + b
        if i < net.n_layers - 1:
            x = _leaky(x, net.slopes[i])
    return x


def mix_inverse(net: MixingNetwork, x: np.ndarray) -> np.ndarray:
    """Exact inverse: reversed layers with solves and inverse activations."""
    z = np.asarray(x, dtype=np.float64)
    if z.shape[-1] != net.dim:
        raise ValueError("input width does not match network width")
    for i in reversed(range(net.n_layers)):
        if i < net.n_layers - 1:
            z = _leaky_inverse(z, net.slopes[i])
        z = np.linalg.solve(net.weights[i], (z - net.biases[i]).T).T
    return z


# ---------------------------------------------------------------------------
# Dataset files: JSON header line, then float64/int32 little-endian blobs
# ---------------------------------------------------------------------------

def write_dataset(path, z, x, labels, header: dict) -> None:
    """Binary dataset: header JSON line, Z rows, X rows, then int32 labels."""
    z = np.ascontiguousarray(z, dtype="<f8")
    x = np.ascontiguousarray(x, dtype="<f8")
    labels = np.ascontiguousarray(labels, dtype="<i4")
    head = dict(header)
    head.update(n=z.shape[1], d=x.shape[1], count=z.shape[0])
    with open(path, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(z.tobytes())
        fh.write(x.tobytes())
        fh.write(labels.tobytes())


def read_dataset(path):
    """Inverse of :func:`write_dataset`; returns ``(header, z, x, labels)``."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        count, n, d = header["count"], header["n"], header["d"]
        z = np.frombuffer(fh.read(8 * count * n), dtype="<f8").reshape(count, n)
        x = np.frombuffer(fh.read(8 * count * d), dtype="<f8").reshape(count, d)
        labels = np.frombuffer(fh.read(4 * count), dtype="<i4")
    return header, z.copy(), x.copy(), labels.copy()
