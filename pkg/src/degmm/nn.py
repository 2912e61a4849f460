"""From-scratch differentiable MLP stack with constrained-optimization pieces.

Layers are affine -> batch norm -> leaky activation, final layer plain
affine.  Parameters live in an ordered dict of float64 arrays; reverse-mode
gradients are exact, including the batch-statistic terms of batch norm.
Optimizers: bias-corrected Adam and an extrapolating variant that re-evaluates
gradients at an Adam-lookahead point before updating from the original
parameters.  The Lagrangian piece is plain projected dual ascent on a single
inequality multiplier.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from degmm.numerics import RngStream

BN_EPS = 1e-8
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Mlp:
    """Multi-layer perceptron: ``widths[0] -> ... -> widths[-1]``.

    Hidden layers apply affine, then (optionally) batch normalization, then a
    leaky activation with the given slope; the output layer is affine only.
    Batch-norm running statistics are state, not parameters, and are updated
    only by train-mode forward passes.
    """

    def __init__(self, widths, slope: float = 0.2, batch_norm: bool = True,
                 bn_momentum: float = BN_MOMENTUM, bn_eps: float = BN_EPS):
        if len(widths) < 1:
            raise ValueError("need at least an input width")
        if bn_eps <= 0.0:
            raise ValueError("batch-norm epsilon must be positive")
        self.widths = [int(w) for w in widths]
        self.slope = float(slope)
        self.batch_norm = bool(batch_norm)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)
        self.params: dict[str, np.ndarray] = {}
        self.bn_mean: dict[int, np.ndarray] = {}
        self.bn_var: dict[int, np.ndarray] = {}

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_names(self):
        """Parameter keys in declaration order (used by checkpoints)."""
        names = []
        for i in range(self.n_layers):
            names.extend([f"w{i}", f"b{i}"])
            if self.batch_norm and i < self.n_layers - 1:
                names.extend([f"g{i}", f"beta{i}"])
        return names

    def state_names(self):
        names = []
        if self.batch_norm:
            for i in range(self.n_layers - 1):
                names.extend([f"rm{i}", f"rv{i}"])
        return names

    def state_arrays(self):
        out = {}
        for i in range(self.n_layers - 1):
            if self.batch_norm:
                out[f"rm{i}"] = self.bn_mean[i]
                out[f"rv{i}"] = self.bn_var[i]
        return out

    def copy(self) -> "Mlp":
        clone = Mlp(self.widths, self.slope, self.batch_norm, self.bn_momentum, self.bn_eps)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.bn_mean = {k: v.copy() for k, v in self.bn_mean.items()}
        clone.bn_var = {k: v.copy() for k, v in self.bn_var.items()}
        return clone


def init_mlp(widths, rng: RngStream, slope: float = 0.2, batch_norm: bool = True) -> Mlp:
    """He-style initialization: weights N(0, 2/fan_in), zero biases, unit gammas."""
    mlp = Mlp(widths, slope=slope, batch_norm=batch_norm)
    gen = rng.generator()
    for i in range(mlp.n_layers):
        fan_in, fan_out = mlp.widths[i], mlp.widths[i + 1]
        mlp.params[f"w{i}"] = gen.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        mlp.params[f"b{i}"] = np.zeros(fan_out)
        if batch_norm and i < mlp.n_layers - 1:
            mlp.params[f"g{i}"] = np.ones(fan_out)
            mlp.params[f"beta{i}"] = np.zeros(fan_out)
            mlp.bn_mean[i] = np.zeros(fan_out)
            mlp.bn_var[i] = np.ones(fan_out)
    return mlp


def forward(mlp: Mlp, batch: np.ndarray, train: bool):
    """Run the network; returns ``(output, cache)``.

    Train mode normalizes with batch statistics and updates running stats;
    eval mode uses running stats and touches nothing.  The cache holds the
    intermediates :func:`backward` needs and is only valid for train mode.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.widths[0]:
        raise ValueError(f"batch must be 2-D with width {mlp.widths[0]}")
    if train and mlp.batch_norm and x.shape[0] < 2 and mlp.n_layers > 1:
        raise ValueError("batch size 1 is undefined under train-mode batch norm")
    layers = []
    for i in range(mlp.n_layers):
        last = i == mlp.n_layers - 1
        w, b = mlp.params[f"w{i}"], mlp.params[f"b{i}"]
        z = x @ w.T + b
        entry = {"x": x, "i": i}
        if not last:
            if mlp.batch_norm:
                if train:
                    mean = z.mean(axis=0)
                    var = z.var(axis=0)
                    istd = 1.0 / np.sqrt(var + mlp.bn_eps)
                    zhat = (z - mean) * istd
                    batch_n = z.shape[0]
                    unbiased = var * batch_n / max(batch_n - 1, 1)
                    mlp.bn_mean[i] = (1 - mlp.bn_momentum) * mlp.bn_mean[i] + mlp.bn_momentum * mean
                    mlp.bn_var[i] = (1 - mlp.bn_momentum) * mlp.bn_var[i] + mlp.bn_momentum * unbiased
                else:
                    istd = 1.0 / np.sqrt(mlp.bn_var[i] + mlp.bn_eps)
                    zhat = (z - mlp.bn_mean[i]) * istd
                g = mlp.params[f"g{i}"]
                a_in = g * zhat + mlp.params[f"beta{i}"]
                entry.update(zhat=zhat, istd=istd)
            else:
                a_in = z
            x = np.where(a_in >= 0.0, a_in, mlp.slope * a_in)
            entry["act_in"] = a_in
        else:
            x = z
        layers.append(entry)
    cache = {"layers": layers, "train": train, "batch_size": batch.shape[0]}
    return x, cache


def backward(mlp: Mlp, cache: dict, grad_out: np.ndarray):
    """Exact reverse-mode gradients; returns ``(grads, grad_in)``."""
    if not cache["train"]:
        raise ValueError("backward requires a train-mode cache")
    grads = {}
    dy = np.asarray(grad_out, dtype=np.float64)
    if dy.shape[0] != cache["batch_size"]:
        raise ValueError("grad_out batch size does not match cache")
    for entry in reversed(cache["layers"]):
        i = entry["i"]
        last = i == mlp.n_layers - 1
        if not last:
            a_in = entry["act_in"]
            dy = dy * np.where(a_in >= 0.0, 1.0, mlp.slope)
            if mlp.batch_norm:
                zhat, istd = entry["zhat"], entry["istd"]
                grads[f"g{i}"] = (dy * zhat).sum(axis=0)
                grads[f"beta{i}"] = dy.sum(axis=0)
                dzhat = dy * mlp.params[f"g{i}"]
                m = dzhat.shape[0]
                dy = (istd / m) * (m * dzhat - dzhat.sum(axis=0)
                                   - zhat * (dzhat * zhat).sum(axis=0))
        w = mlp.params[f"w{i}"]
        x = entry["x"]
        grads[f"w{i}"] = dy.T @ x
        grads[f"b{i}"] = dy.sum(axis=0)
        dy = dy @ w
    return grads, dy


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict, lr: float) -> AdamState:
    state = AdamState(lr=lr)
    for name, value in params.items():
        state.m[name] = np.zeros_like(value)
        state.v[name] = np.zeros_like(value)
    return state


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * (g * g)
        params[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def extra_adam_step(state: AdamState, params: dict, grad_fn) -> None:
    """Extrapolating Adam: lookahead half-step, then update with fresh gradients.

    The lookahead uses the shared moment accumulators but does not advance
    them or the step counter; the committed update starts from the original
    parameters and uses gradients evaluated at the lookahead point.
    """
    g1 = grad_fn(params)
    t_ahead = state.t + 1
    c1 = 1.0 - state.beta1 ** t_ahead
    c2 = 1.0 - state.beta2 ** t_ahead
    lookahead = {}
    for name, value in params.items():
        g = g1[name]
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * (g * g)
        lookahead[name] = value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    g2 = grad_fn(lookahead)
    adam_step(state, params, g2)


@dataclass
class LagrangianState:
    """Single inequality multiplier with projected dual ascent."""

    multiplier: float = 0.0
    lr: float = 5e-5
    level: float = 0.01

    def __post_init__(self):
        if self.multiplier < 0.0:
            raise ValueError("multiplier must be non-negative")


def lagrangian_step(lag: LagrangianState, constraint_value: float) -> float:
    """Ascend the dual: ``max(0, multiplier + lr * (value - level))``."""
    if not np.isfinite(constraint_value):
        raise ValueError("constraint value must be finite")
    lag.multiplier = max(0.0, lag.multiplier + lag.lr * (constraint_value - lag.level))
    return lag.multiplier


def l1_penalty(batch_repr: np.ndarray) -> float:
    """Mean over rows of the coordinate-wise absolute sum."""
    batch_repr = np.asarray(batch_repr, dtype=np.float64)
    if not np.all(np.isfinite(batch_repr)):
        raise ValueError("representation contains non-finite entries")
    return float(np.abs(batch_repr).sum(axis=1).mean())


def l1_penalty_grad(batch_repr: np.ndarray) -> np.ndarray:
    """Subgradient of :func:`l1_penalty`; zero at zero."""
    return np.sign(batch_repr) / batch_repr.shape[0]


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest line + length-prefixed little-endian blobs
# ---------------------------------------------------------------------------

def params_checksum(mlp: Mlp) -> str:
    h = hashlib.sha256()
    for name in mlp.param_names():
        h.update(np.ascontiguousarray(mlp.params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path, manifest: dict, mlps: dict[str, Mlp], extras: dict = None) -> None:
    """Persist named networks: manifest JSON line, then each tensor blob.

    Tensors are written in manifest declaration order, each as a little-endian
    uint64 element count followed by raw float64 data.  ``extras`` holds
    additional named arrays (for example input standardization statistics).
    """
    tensors = []
    nets = {}
    for net_name, mlp in mlps.items():
        nets[net_name] = {
            "widths": mlp.widths, "slope": mlp.slope, "batch_norm": mlp.batch_norm,
            "bn_momentum": mlp.bn_momentum, "bn_eps": mlp.bn_eps,
        }
        for pname in mlp.param_names():
            tensors.append((f"{net_name}/{pname}", mlp.params[pname]))
        for sname, arr in mlp.state_arrays().items():
            tensors.append((f"{net_name}/{sname}", arr))
    for name, arr in (extras or {}).items():
        tensors.append((f"extra/{name}", np.asarray(arr, dtype=np.float64)))
    doc = dict(manifest)
    doc["networks"] = nets
    doc["tensors"] = [{"name": name, "shape": list(arr.shape)} for name, arr in tensors]
    with open(path, "wb") as fh:
        fh.write(json.dumps(doc, sort_keys=True).encode("utf-8") + b"\n")
        for _, arr in tensors:
            flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(manifest, mlps, extras)``."""
    with open(path, "rb") as fh:
        doc = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for spec in doc["tensors"]:
            (count,) = struct.unpack("<Q", fh.read(8))
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            arrays[spec["name"]] = data.reshape(spec["shape"]).copy()
    mlps = {}
    for net_name, cfg in doc["networks"].items():
        mlp = Mlp(cfg["widths"], cfg["slope"], cfg["batch_norm"],
                  cfg["bn_momentum"], cfg["bn_eps"])
        for pname in mlp.param_names():
            mlp.params[pname] = arrays[f"{net_name}/{pname}"]
        for i in range(mlp.n_layers - 1):
            if mlp.batch_norm:
                mlp.bn_mean[i] = arrays[f"{net_name}/rm{i}"]
                mlp.bn_var[i] = arrays[f"{net_name}/rv{i}"]
        mlps[net_name] = mlp
    extras = {name.split("/", 1)[1]: arr for name, arr in arrays.items()
              if name.startswith("extra/")}
    return doc, mlps, extras
