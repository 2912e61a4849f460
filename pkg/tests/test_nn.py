"""MLP forward/backward, optimizers, dual ascent, and checkpoints."""

import numpy as np
import pytest

from degmm.nn import (
    AdamState,
    LagrangianState,
    Mlp,
    adam_step,
    backward,
    extra_adam_step,
    forward,
    init_adam,
    init_mlp,
    l1_penalty,
    l1_penalty_grad,
    lagrangian_step,
    load_checkpoint,
    params_checksum,
    save_checkpoint,
)
from degmm.numerics import RngStream


def composed_loss(mlp, batch, target, l2_weight=0.3, l1_weight=0.2):
    """Reconstruction + L2 prior + L1 term; exercises every layer type."""
    out, cache = forward(mlp, batch, train=True)
    diff = out - target
    loss = float((diff ** 2).sum(axis=1).mean())
    loss += 0.5 * l2_weight * float((out ** 2).sum(axis=1).mean())
    loss += l1_weight * l1_penalty(out)
    return loss, out, cache


def composed_loss_grads(mlp, batch, target, l2_weight=0.3, l1_weight=0.2):
    _, out, cache = composed_loss(mlp, batch, target, l2_weight, l1_weight)
    grad_out = 2.0 * (out - target) / batch.shape[0]
    grad_out = grad_out + l2_weight * out / batch.shape[0]
    grad_out = grad_out + l1_weight * l1_penalty_grad(out)
    grads, _ = backward(mlp, cache, grad_out)
    return grads


def finite_difference_grads(mlp, batch, target, h=1e-5, **kw):
    grads = {}
    for name, value in mlp.params.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _, _ = composed_loss(mlp, batch, target, **kw)
            flat[i] = orig - h
            down, _, _ = composed_loss(mlp, batch, target, **kw)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric):
    # A floor of 1e-6 in the denominator keeps exactly-zero gradients (for
    # example biases cancelled by batch-mean subtraction) from being judged
    # by raw finite-difference noise (~1e-11).
    worst = 0.0
    for name in analytic:
        a, b = analytic[name].reshape(-1), numeric[name].reshape(-1)
        rel = np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6)
        worst = max(worst, float(rel.max()))
    return worst


class TestForward:
    def test_zero_depth_is_identity(self):
        mlp = Mlp([3])
        x = RngStream(0).generator().standard_normal((4, 3))
        out, _ = forward(mlp, x, train=False)
        np.testing.assert_array_equal(out, x)

    def test_single_affine_layer_exact(self):
        mlp = init_mlp([3, 2], RngStream(1), batch_norm=False)
        x = RngStream(2).generator().standard_normal((5, 3))
        out, _ = forward(mlp, x, train=True)
        np.testing.assert_allclose(out, x @ mlp.params["w0"].T + mlp.params["b0"], atol=1e-14)

    def test_eval_mode_pure(self):
        mlp = init_mlp([3, 8, 2], RngStream(3))
        x = RngStream(4).generator().standard_normal((6, 3))
        out1, _ = forward(mlp, x, train=False)
        out2, _ = forward(mlp, x, train=False)
        np.testing.assert_array_equal(out1, out2)

    def test_batch_of_one_rejected_in_train_mode(self):
        mlp = init_mlp([3, 8, 2], RngStream(5))
        with pytest.raises(ValueError):
            forward(mlp, np.ones((1, 3)), train=True)

    def test_batchnorm_normalizes_per_feature(self):
        mlp = init_mlp([4, 16, 2], RngStream(6))
        x = RngStream(7).generator().standard_normal((256, 4)) * 3.0 + 1.0
        _, cache = forward(mlp, x, train=True)
        zhat = cache["layers"][0]["zhat"]
        assert np.max(np.abs(zhat.mean(axis=0))) <= 1e-8
        assert np.max(np.abs(zhat.var(axis=0) - 1.0)) <= 1e-6

    def test_width_mismatch_rejected(self):
        mlp = init_mlp([3, 4, 2], RngStream(8))
        with pytest.raises(ValueError):
            forward(mlp, np.ones((5, 4)), train=False)


class TestBackward:
    def test_matches_finite_differences_on_seeded_micro_nets(self):
        worst = 0.0
        for seed in range(50):
            gen = RngStream(100 + seed).generator()
            widths = [int(gen.integers(2, 6)) for _ in range(int(gen.integers(2, 5)))]
            use_bn = bool(gen.integers(0, 2))
            mlp = init_mlp(widths, RngStream(200 + seed),
                           slope=float(gen.uniform(0.05, 0.9)), batch_norm=use_bn)
            batch = gen.standard_normal((32, widths[0]))
            target = gen.standard_normal((32, widths[-1]))
            analytic = composed_loss_grads(mlp, batch, target)
            numeric = finite_difference_grads(mlp, batch, target)
            worst = max(worst, max_relative_error(analytic, numeric))
        assert worst <= 1e-4

    def test_three_layer_reference_case(self):
        mlp = init_mlp([8, 6, 5, 4], RngStream(9))
        gen = RngStream(10).generator()
        batch = gen.standard_normal((32, 8))
        target = gen.standard_normal((32, 4))
        analytic = composed_loss_grads(mlp, batch, target)
        numeric = finite_difference_grads(mlp, batch, target)
        assert max_relative_error(analytic, numeric) <= 1e-4

    def test_zero_upstream_gradient(self):
        mlp = init_mlp([3, 6, 2], RngStream(11))
        x = RngStream(12).generator().standard_normal((8, 3))
        _, cache = forward(mlp, x, train=True)
        grads, grad_in = backward(mlp, cache, np.zeros((8, 2)))
        assert all(np.all(g == 0.0) for g in grads.values())
        assert np.all(grad_in == 0.0)

    def test_linear_net_closed_form(self):
        mlp = init_mlp([3, 2], RngStream(13), batch_norm=False)
        gen = RngStream(14).generator()
        x = gen.standard_normal((1, 3))
        y = gen.standard_normal((1, 2))
        out, cache = forward(mlp, x, train=True)
        grads, _ = backward(mlp, cache, 2.0 * (out - y))
        expected = 2.0 * (out - y).T @ x
        np.testing.assert_allclose(grads["w0"], expected, atol=1e-12)

    def test_eval_cache_rejected(self):
        mlp = init_mlp([3, 6, 2], RngStream(15))
        x = RngStream(16).generator().standard_normal((8, 3))
        _, cache = forward(mlp, x, train=False)
        with pytest.raises(ValueError):
            backward(mlp, cache, np.zeros((8, 2)))


class TestAdam:
    def test_zero_gradient_no_move(self):
        params = {"p": np.array([1.0, 2.0])}
        state = init_adam(params, lr=0.1)
        adam_step(state, params, {"p": np.zeros(2)})
        np.testing.assert_array_equal(params["p"], [1.0, 2.0])

    def test_single_step_hand_formula(self):
        g = np.array([0.3, -0.7])
        params = {"p": np.zeros(2)}
        state = init_adam(params, lr=1e-3)
        adam_step(state, params, {"p": g})
        mhat = (1 - state.beta1) * g / (1 - state.beta1)
        vhat = (1 - state.beta2) * g * g / (1 - state.beta2)
        expected = -state.lr * mhat / (np.sqrt(vhat) + state.eps)
        np.testing.assert_allclose(params["p"], expected, atol=1e-9)

    def test_deterministic_trajectories(self):
        def run():
            gen = RngStream(17).generator()
            params = {"p": gen.standard_normal(4)}
            state = init_adam(params, lr=0.01)
            for _ in range(100):
                adam_step(state, params, {"p": params["p"] * 0.5})
            return params["p"]

        np.testing.assert_array_equal(run(), run())


class TestExtraAdam:
    def test_zero_field_fixed_point(self):
        params = {"p": np.array([3.0])}
        state = init_adam(params, lr=0.1)
        extra_adam_step(state, params, lambda p: {"p": np.zeros(1)})
        np.testing.assert_array_equal(params["p"], [3.0])

    def test_constant_field_matches_adam(self):
        g = {"p": np.array([0.4, -0.2])}
        params_a = {"p": np.zeros(2)}
        params_b = {"p": np.zeros(2)}
        state_a = init_adam(params_a, lr=1e-2)
        state_b = init_adam(params_b, lr=1e-2)
        extra_adam_step(state_a, params_a, lambda p: {k: v.copy() for k, v in g.items()})
        adam_step(state_b, params_b, g)
        np.testing.assert_allclose(params_a["p"], params_b["p"], atol=1e-15)
        assert state_a.t == state_b.t

    def test_bilinear_saddle_stability(self):
        # min_x max_y x*y with momentum off (momentum itself destabilizes
        # rotational fields and would mask the comparison): simultaneous Adam
        # spirals outward, the extrapolating variant contracts to the saddle.
        def saddle_grads(p):
            return {"x": p["y"].copy(), "y": -p["x"].copy()}

        def run(extra):
            params = {"x": np.array([1.0]), "y": np.array([1.0])}
            state = init_adam(params, lr=5e-2)
            state.beta1 = 0.0
            for _ in range(10_000):
                if extra:
                    extra_adam_step(state, params, saddle_grads)
                else:
                    adam_step(state, params, saddle_grads(params))
            return float(np.hypot(params["x"][0], params["y"][0]))

        start = float(np.hypot(1.0, 1.0))
        assert run(extra=False) > 2.0 * start
        assert run(extra=True) < start


class TestLagrangian:
    def test_satisfied_constraint_stays_zero(self):
        lag = LagrangianState(multiplier=0.0, lr=0.1, level=1.0)
        lagrangian_step(lag, 0.5)
        assert lag.multiplier == 0.0

    def test_violation_increases_exactly(self):
        lag = LagrangianState(multiplier=0.2, lr=0.1, level=1.0)
        lagrangian_step(lag, 1.5)
        assert lag.multiplier == pytest.approx(0.2 + 0.1 * 0.5, abs=1e-15)

    def test_never_negative_under_alternation(self):
        lag = LagrangianState(multiplier=0.0, lr=0.3, level=0.0)
        for i in range(100):
            lagrangian_step(lag, 1.0 if i % 2 == 0 else -1.0)
            assert lag.multiplier >= 0.0


class TestL1Penalty:
    def test_zero_batch(self):
        assert l1_penalty(np.zeros((4, 3))) == 0.0

    def test_single_row(self):
        assert l1_penalty(np.array([[1.0, -2.0, 0.0]])) == 3.0

    def test_positive_homogeneity(self):
        gen = RngStream(18).generator()
        batch = gen.standard_normal((16, 5))
        for c in (0.5, 2.0, 7.3):
            assert l1_penalty(c * batch) == pytest.approx(c * l1_penalty(batch), rel=1e-12)

    def test_subgradient_zero_at_zero(self):
        g = l1_penalty_grad(np.array([[0.0, 1.0, -1.0]]))
        np.testing.assert_array_equal(g, [[0.0, 1.0, -1.0]])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        enc = init_mlp([3, 8, 2], RngStream(19))
        dec = init_mlp([2, 8, 3], RngStream(20), batch_norm=False)
        x = RngStream(21).generator().standard_normal((16, 3))
        forward(enc, x, train=True)  # move running stats off their init values
        path = tmp_path / "model.ckpt"
        manifest = {"seed": 7, "step": 123, "config_hash": "deadbeef"}
        save_checkpoint(path, manifest, {"enc": enc, "dec": dec},
                        extras={"mean": np.arange(3.0)})
        doc, nets, extras = load_checkpoint(path)
        assert doc["seed"] == 7 and doc["step"] == 123
        assert params_checksum(nets["enc"]) == params_checksum(enc)
        assert params_checksum(nets["dec"]) == params_checksum(dec)
        np.testing.assert_array_equal(nets["enc"].bn_mean[0], enc.bn_mean[0])
        np.testing.assert_array_equal(extras["mean"], np.arange(3.0))

    def test_byte_identical_writes(self, tmp_path):
        enc = init_mlp([3, 4, 2], RngStream(22))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, {"seed": 1}, {"enc": enc})
        save_checkpoint(p2, {"seed": 1}, {"enc": enc})
        assert p1.read_bytes() == p2.read_bytes()
