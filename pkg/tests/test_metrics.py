"""R2, Pearson correlation, and MCC evaluation protocol."""

import numpy as np
import pytest

from degmm.metrics import (
    evaluate_representation,
    matched_mean_abs,
    mcc,
    pearson_matrix,
    r2_per_dimension,
    r2_score,
    report_csv_row,
    write_correlation_csv,
    zero_variance_columns,
)
from degmm.numerics import RngStream
from tests.test_numerics import brute_force_max_assignment


class TestR2:
    def test_exact_affine_map_scores_one(self):
        gen = RngStream(0).generator()
        z = gen.standard_normal((500, 4))
        a = gen.standard_normal((4, 4)) + 2.0 * np.eye(4)
        zhat = z @ a.T + gen.standard_normal(4)
        assert r2_score(z, zhat) == pytest.approx(1.0, abs=1e-8)

    def test_independent_representation_scores_near_zero(self):
        gen = RngStream(1).generator()
        z = gen.standard_normal((10_000, 5))
        zhat = gen.standard_normal((10_000, 5))
        assert r2_score(z, zhat) < 0.01

    def test_constant_dimension_flagged_as_zero(self):
        gen = RngStream(2).generator()
        z = gen.standard_normal((100, 3))
        zhat = np.column_stack([z[:, 0], np.full(100, 2.5)])
        scores, degenerate = r2_per_dimension(z, zhat)
        assert scores[0] == pytest.approx(1.0, abs=1e-8)
        assert scores[1] == 0.0
        assert list(degenerate) == [False, True]

    def test_invariant_to_affine_reparameterization_of_explanatory(self):
        gen = RngStream(3).generator()
        z = gen.standard_normal((400, 3))
        zhat = gen.standard_normal((400, 2)) + z[:, :2]
        a = gen.standard_normal((3, 3)) + 3.0 * np.eye(3)
        reparam = z @ a.T + gen.standard_normal(3)
        assert r2_score(z, zhat) == pytest.approx(r2_score(reparam, zhat), abs=1e-8)


class TestPearson:
    def test_identity(self):
        z = RngStream(4).generator().standard_normal((300, 3))
        corr = pearson_matrix(z, z)
        np.testing.assert_allclose(np.diag(corr), np.ones(3), atol=1e-12)

    def test_negation(self):
        z = RngStream(5).generator().standard_normal((300, 3))
        corr = pearson_matrix(z, -z)
        np.testing.assert_allclose(np.diag(corr), -np.ones(3), atol=1e-12)

    def test_constant_column_zeroed(self):
        gen = RngStream(6).generator()
        z = gen.standard_normal((100, 2))
        zhat = np.column_stack([np.full(100, 3.0), z[:, 1]])
        corr = pearson_matrix(z, zhat)
        assert np.all(corr[:, 0] == 0.0)
        assert list(zero_variance_columns(zhat)) == [True, False]

    def test_entries_bounded(self):
        gen = RngStream(7).generator()
        z = gen.standard_normal((50, 6))
        zhat = gen.standard_normal((50, 6))
        assert np.max(np.abs(pearson_matrix(z, zhat))) <= 1.0 + 1e-12


class TestMcc:
    def test_permutation_scaling_is_perfect(self):
        gen = RngStream(8).generator()
        z = gen.standard_normal((2_000, 5))
        perm = np.array([3, 0, 4, 1, 2])
        scales = np.array([2.0, -0.5, 1.5, -3.0, 0.25])
        zhat = z[:, perm] * scales
        value, matched = mcc(z, zhat)
        assert value == pytest.approx(1.0, abs=1e-8)
        np.testing.assert_array_equal(np.argsort(matched), np.argsort(np.arange(5)[np.argsort(perm)]))

    def test_enumerated_two_by_two(self):
        value, perm = matched_mean_abs(np.array([[0.9, 0.1], [0.2, 0.8]]))
        assert value == pytest.approx(0.85, abs=1e-12)
        np.testing.assert_array_equal(perm, [0, 1])

    def test_matches_brute_force_up_to_seven(self):
        gen = RngStream(9).generator()
        for _ in range(100):
            n = int(gen.integers(2, 8))
            corr = gen.uniform(-1, 1, size=(n, n))
            value, _ = matched_mean_abs(corr)
            best, _ = brute_force_max_assignment(np.abs(corr))
            assert value == pytest.approx(best / n, abs=1e-12)

    def test_invariance_under_permutation_diagonal_shift(self):
        gen = RngStream(10).generator()
        z = gen.standard_normal((1_000, 4))
        zhat = z @ (gen.standard_normal((4, 4)) + 2.0 * np.eye(4)).T
        base, _ = mcc(z, zhat)
        perm = np.array([2, 3, 1, 0])
        transformed = zhat[:, perm] * np.array([1.5, -2.0, 0.3, -0.7]) + np.array([1, 2, 3, 4.0])
        value, _ = mcc(z, transformed)
        assert value == pytest.approx(base, abs=1e-12)

    def test_at_least_mean_abs_diagonal(self):
        gen = RngStream(11).generator()
        for _ in range(50):
            n = int(gen.integers(2, 6))
            z = gen.standard_normal((200, n))
            zhat = gen.standard_normal((200, n)) + 0.5 * z
            corr = pearson_matrix(z, zhat)
            value, _ = mcc(z, zhat)
            assert value >= np.abs(np.diag(corr)).mean() - 1e-12


class TestReport:
    def test_evaluate_bundle(self):
        gen = RngStream(12).generator()
        z = gen.standard_normal((500, 3))
        report = evaluate_representation(z, 2.0 * z)
        assert report.mcc_value == pytest.approx(1.0, abs=1e-10)
        assert report.r2_mean == pytest.approx(1.0, abs=1e-10)
        assert not report.degenerate_true.any()

    def test_csv_row_schema(self):
        config = {"n": 5, "k": 1, "m": 10, "rho": "50%", "delta": 0.0, "theta": 0.0}
        row = report_csv_row(config, seed=3, r2_stage1=0.9, mcc_stage1=0.5, mcc_stage2=0.95)
        cells = row.split(",")
        assert len(cells) == 10
        assert cells[0] == "5" and cells[6] == "3"
        assert float(cells[7]) == pytest.approx(0.9)

    def test_correlation_csv_round_trip(self, tmp_path):
        gen = RngStream(13).generator()
        corr = gen.uniform(-1, 1, size=(4, 4))
        path = tmp_path / "corr.csv"
        write_correlation_csv(path, corr)
        back = np.loadtxt(path, delimiter=",")
        np.testing.assert_array_equal(back, corr)
