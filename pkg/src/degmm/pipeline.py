"""Two-stage training: affine recovery, then sparsity-driven disentanglement.

Stage 1 trains an autoencoder on the observations with a Gaussian prior
penalty on the code (reconstruction plus ``beta * mean ||z||^2 / 2``).
Stage 2 freezes it, re-encodes the data, and trains an inner autoencoder
whose code is pushed toward a mean-L1 budget by a Lagrange multiplier; the
primal uses the extrapolating Adam variant, the dual plain projected ascent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from degmm.numerics import RngStream
from degmm.nn import (
    LagrangianState,
    Mlp,
    adam_step,
    backward,
    extra_adam_step,
    forward,
    init_adam,
    init_mlp,
    l1_penalty,
    lagrangian_step,
    params_checksum,
)

STAGE1_WIDTH_MULTIPLIERS = (50, 100, 100, 50)
STAGE2_WIDTH_MULTIPLIERS = (10, 50, 50, 50, 50, 10)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the step index and last finite model."""

    def __init__(self, step: int, last_finite):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_finite = last_finite


@dataclass(frozen=True)
class StageConfig:
    """Hyperparameters for one training stage.

    Defaults mirror the reference experiment settings: batch 6144, primal
    learning rate 1e-4, dual learning rate 5e-5, sparsity level 0.01,
    5000 iterations for stage 1 and 80000 for stage 2.
    """

    stage: int
    latent_dim: int
    seed: int = 0
    width_multipliers: Optional[tuple[int, ...]] = None
    primal_lr: float = 1e-4
    dual_lr: float = 5e-5
    batch_size: int = 6144
    iterations: int = 0
    sparsity_level: float = 0.01
    l2_weight: float = 1.0
    activation_slope: float = 0.2
    constraint_enabled: bool = True
    stage2_arch: str = "mlp"
    standardize_inputs: bool = True
    log_interval: int = 100
    stage1_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.stage2_arch not in ("mlp", "affine"):
            raise ValueError("stage2_arch must be 'mlp' or 'affine'")
        if self.width_multipliers is None:
            default = STAGE1_WIDTH_MULTIPLIERS if self.stage == 1 else STAGE2_WIDTH_MULTIPLIERS
            object.__setattr__(self, "width_multipliers", tuple(default))
        if self.iterations == 0:
            object.__setattr__(self, "iterations", 5000 if self.stage == 1 else 80000)


@dataclass
class TrainedModel:
    """Networks and training log; stage-2 fields are None until stage 2 runs."""

    encoder1: Mlp
    decoder1: Mlp
    input_mean: np.ndarray
    input_scale: np.ndarray
    stage1_config: StageConfig
    stage1_log: list = field(default_factory=list)
    stage1_snapshot: Optional[np.ndarray] = None
    final_stage1_loss: float = float("nan")
    encoder2: Optional[Mlp] = None
    decoder2: Optional[Mlp] = None
    stage2_config: Optional[StageConfig] = None
    stage2_log: list = field(default_factory=list)
    dual_multiplier: float = 0.0

    @property
    def has_stage2(self) -> bool:
        return self.encoder2 is not None


def _standardize_stats(x, enabled: bool):
    if not enabled:
        return np.zeros(x.shape[1]), np.ones(x.shape[1])
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0.0, scale, 1.0)
    return mean, scale


def _check_finite(loss, step, snapshot):
    if not np.isfinite(loss):
        raise TrainingDiverged(step, snapshot)


def run_stage1(x, cfg: StageConfig, rng: Optional[RngStream] = None) -> TrainedModel:
    """Train the outer autoencoder; returns the stage-1 model.

    The encoder/decoder widths are ``width_multipliers × latent_dim``; the
    loss is mean squared reconstruction plus ``l2_weight * mean||z||^2 / 2``.
    """
    if cfg.stage != 1:
        raise ValueError("config is not a stage-1 config")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("dataset contains non-finite values")
    n_samples, d = x.shape
    n = cfg.latent_dim
    rng = rng if rng is not None else RngStream(cfg.seed)
    mean, scale = _standardize_stats(x, cfg.standardize_inputs)
    xs = (x - mean) / scale

    hidden = [mult * n for mult in cfg.width_multipliers]
    encoder = init_mlp([d] + hidden + [n], rng.child(1), slope=cfg.activation_slope,
                       batch_norm=True)
    decoder = init_mlp([n] + hidden[::-1] + [d], rng.child(2), slope=cfg.activation_slope,
                       batch_norm=False)
    opt_e = init_adam(encoder.params, cfg.primal_lr)
    opt_d = init_adam(decoder.params, cfg.primal_lr)
    batch_gen = rng.child(3).generator()

    model = TrainedModel(encoder, decoder, mean, scale, cfg)
    last_finite = (encoder.copy(), decoder.copy())
    batch = max(2, min(cfg.batch_size, n_samples))
    for step in range(1, cfg.iterations + 1):
        idx = batch_gen.integers(0, n_samples, size=batch)
        xb = xs[idx]
        z, cache_e = forward(encoder, xb, train=True)
        xhat, cache_d = forward(decoder, z, train=True)
        diff = xhat - xb
        recon = float((diff ** 2).sum(axis=1).mean())
        prior = 0.5 * cfg.l2_weight * float((z ** 2).sum(axis=1).mean())
        _check_finite(recon + prior, step, last_finite)
        grad_xhat = 2.0 * diff / batch
        grads_d, dz = backward(decoder, cache_d, grad_xhat)
        dz = dz + cfg.l2_weight * z / batch
        grads_e, _ = backward(encoder, cache_e, dz)
        adam_step(opt_e, encoder.params, grads_e)
        adam_step(opt_d, decoder.params, grads_d)
        if step % cfg.log_interval == 0 or step == cfg.iterations:
            model.stage1_log.append({"step": step, "recon": recon,
                                     "l1": 0.0, "lambda_dual": 0.0})
            last_finite = (encoder.copy(), decoder.copy())

    snapshot, _ = forward(encoder, xs, train=False)
    model.stage1_snapshot = snapshot
    xhat_full, _ = forward(decoder, snapshot, train=False)
    model.final_stage1_loss = float(((xhat_full - xs) ** 2).sum(axis=1).mean())
    return model


def _combined_params(enc: Mlp, dec: Mlp) -> dict:
    out = {}
    for k, v in enc.params.items():
        out[f"enc/{k}"] = v
    for k, v in dec.params.items():
        out[f"dec/{k}"] = v
    return out


def _install_params(enc: Mlp, dec: Mlp, combined: dict) -> None:
    for k, v in combined.items():
        net, name = k.split("/", 1)
        (enc if net == "enc" else dec).params[name] = v


def run_stage2(model: TrainedModel, x, cfg: StageConfig,
               rng: Optional[RngStream] = None) -> TrainedModel:
    """Train the inner autoencoder with the mean-L1 budget on its code.

    Stage-1 parameters are frozen; their eval-mode encodings of ``x`` are the
    stage-2 training data.  Primal steps use the extrapolating Adam variant
    on reconstruction plus ``multiplier * (L1 - level)``; the dual ascends
    after every primal step when the constraint is enabled.
    """
    if cfg.stage != 2:
        raise ValueError("config is not a stage-2 config")
    if model.encoder1 is None:
        raise ValueError("stage-1 model required")
    xt = encode(model, x, stage=1)
    n_samples, n = xt.shape
    rng = rng if rng is not None else RngStream(cfg.seed)

    if cfg.stage2_arch == "affine":
        widths = [n, n]
    else:
        widths = [n] + [mult * n for mult in cfg.width_multipliers] + [n]
    encoder = init_mlp(widths, rng.child(11), slope=cfg.activation_slope, batch_norm=True)
    decoder = init_mlp(widths[::-1], rng.child(12), slope=cfg.activation_slope,
                       batch_norm=False)
    combined = _combined_params(encoder, decoder)
    opt = init_adam(combined, cfg.primal_lr)
    lag = LagrangianState(multiplier=0.0, lr=cfg.dual_lr, level=cfg.sparsity_level)
    batch_gen = rng.child(13).generator()

    model.encoder2 = encoder
    model.decoder2 = decoder
    model.stage2_config = cfg
    model.stage2_log = []
    last_finite = (encoder.copy(), decoder.copy())
    batch = max(2, min(cfg.batch_size, n_samples))
    freeze_check = params_checksum(model.encoder1)

    for step in range(1, cfg.iterations + 1):
        idx = batch_gen.integers(0, n_samples, size=batch)
        xb = xt[idx]
        stats = {}

        def grad_fn(params):
            _install_params(encoder, decoder, params)
            z, cache_e = forward(encoder, xb, train=True)
            xhat, cache_d = forward(decoder, z, train=True)
            diff = xhat - xb
            if "recon" not in stats:
                stats["recon"] = float((diff ** 2).sum(axis=1).mean())
                stats["l1"] = l1_penalty(z)
            grad_xhat = 2.0 * diff / batch
            grads_d, dz = backward(decoder, cache_d, grad_xhat)
            if cfg.constraint_enabled:
                dz = dz + lag.multiplier * np.sign(z) / batch
            grads_e, _ = backward(encoder, cache_e, dz)
            out = {}
            for k, v in grads_e.items():
                out[f"enc/{k}"] = v
            for k, v in grads_d.items():
                out[f"dec/{k}"] = v
            return out

        extra_adam_step(opt, combined, grad_fn)
        _install_params(encoder, decoder, combined)
        _check_finite(stats["recon"] + stats["l1"], step, last_finite)
        if cfg.constraint_enabled:
            lagrangian_step(lag, stats["l1"])
        if step % cfg.log_interval == 0 or step == cfg.iterations:
            model.stage2_log.append({"step": step, "recon": stats["recon"],
                                     "l1": stats["l1"], "lambda_dual": lag.multiplier})
            last_finite = (encoder.copy(), decoder.copy())

    if params_checksum(model.encoder1) != freeze_check:
        raise RuntimeError("stage-1 parameters changed during stage 2")
    model.dual_multiplier = lag.multiplier
    return model


def encode(model: TrainedModel, x, stage: int) -> np.ndarray:
    """Eval-mode representations; stage 2 composes both encoders."""
    x = np.asarray(x, dtype=np.float64)
    xs = (x - model.input_mean) / model.input_scale
    z, _ = forward(model.encoder1, xs, train=False)
    if stage == 1:
        return z
    if stage == 2:
        if not model.has_stage2:
            raise ValueError("stage-2 representations requested from a stage-1-only model")
        z2, _ = forward(model.encoder2, z, train=False)
        return z2
    raise ValueError("stage must be 1 or 2")


def reconstruct(model: TrainedModel, x, stage: int = 1) -> np.ndarray:
    """Decode back to the observation space (eval mode, original scale)."""
    if stage == 1:
        z = encode(model, x, stage=1)
        xs_hat, _ = forward(model.decoder1, z, train=False)
        return xs_hat * model.input_scale + model.input_mean
    z2 = encode(model, x, stage=2)
    z1_hat, _ = forward(model.decoder2, z2, train=False)
    return z1_hat
