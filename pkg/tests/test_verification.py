"""The oracles themselves, plus the gradcheck registry plumbing."""

import numpy as np
import pytest

from seqcontrast.verification import (brute_dtw, brute_wasserstein,
                                      count_alignment_paths, enumerate_alignment_paths,
                                      numeric_gradient, relative_error, run_gradcheck,
                                      TARGETS)


class TestNumericGradient:
    def test_square_at_three(self):
        grad = numeric_gradient(lambda v: float(v[0] ** 2), np.array([3.0]))
        assert abs(grad[0] - 6.0) < 1e-9

    def test_constant_function(self):
        grad = numeric_gradient(lambda v: 1.5, np.zeros(4))
        assert np.all(grad == 0.0)

    def test_sum_of_squares(self):
        x = np.random.default_rng(0).standard_normal(6)
        grad = numeric_gradient(lambda v: float((v ** 2).sum()), x)
        assert np.max(np.abs(grad - 2 * x)) < 1e-8

    def test_coordinate_subset(self):
        x = np.arange(5, dtype=float)
        grad = numeric_gradient(lambda v: float((v ** 2).sum()), x, coords=[1, 3])
        assert np.allclose(grad, [2.0, 6.0], atol=1e-8)

    def test_nonfinite_evaluation_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            numeric_gradient(lambda v: float("nan"), np.zeros(1))


class TestRelativeError:
    def test_floor_prevents_blowup(self):
        err = relative_error(np.array([0.0]), np.array([1e-12]))
        assert err[0] == pytest.approx(1e-4, rel=1e-6)

    def test_symmetric(self):
        a, b = np.array([2.0]), np.array([1.0])
        assert relative_error(a, b) == relative_error(b, a)


class TestPathEnumeration:
    def test_delannoy_counts(self):
        assert count_alignment_paths(1, 1) == 1
        assert count_alignment_paths(2, 2) == 3
        assert count_alignment_paths(3, 3) == 13

    def test_two_by_two_has_three_paths(self):
        paths = enumerate_alignment_paths(2, 2)
        assert len(paths) == 3
        assert all(p[0] == (0, 0) and p[-1] == (1, 1) for p in paths)

    def test_instance_too_large(self):
        with pytest.raises(ValueError, match="too large"):
            enumerate_alignment_paths(40, 40)


class TestBruteDTW:
    def test_single_cell_is_half_cost(self):
        x = np.array([[1.0, 3.0]])
        y = np.array([[2.0, 5.0]])
        expected = ((1 - 2) ** 2 + (3 - 5) ** 2) / 2 / 2
        assert brute_dtw(x, y) == expected
        assert brute_dtw(x, y, gamma=0.5) == expected

    def test_gamma_validation(self):
        with pytest.raises(ValueError, match="gamma"):
            brute_dtw(np.zeros((2, 1)), np.zeros((2, 1)), gamma=0.0)

    def test_identity_is_zero_for_hard(self):
        x = np.random.default_rng(1).standard_normal((3, 2))
        assert brute_dtw(x, x) == 0.0


class TestBruteWasserstein:
    def test_identity_is_zero(self):
        x = np.random.default_rng(2).standard_normal((3, 2))
        assert brute_wasserstein(x, x, pos_weight=0.0) == 0.0
        assert brute_wasserstein(x, x, pos_weight=2.0) == 0.0

    def test_antidiagonal_cost_matrix(self):
        # x == y with frame values 0 and sqrt(5): C = [[0, 5], [5, 0]],
        # identity permutation transports for free
        s = 5.0 ** 0.5
        x = np.array([[0.0], [s]])
        assert brute_wasserstein(x, x, pos_weight=0.0) == 0.0

    def test_unequal_lengths_rejected(self):
        with pytest.raises(ValueError, match="equal lengths"):
            brute_wasserstein(np.zeros((2, 1)), np.zeros((3, 1)))

    def test_too_large_rejected(self):
        with pytest.raises(ValueError, match="too large"):
            brute_wasserstein(np.zeros((5, 1)), np.zeros((5, 1)))


class TestGradcheckRegistry:
    def test_unknown_target_rejected(self):
        with pytest.raises(ValueError, match="unknown gradcheck targets"):
            run_gradcheck(["nope"])

    def test_fast_targets_pass(self):
        reports = run_gradcheck(["eucl", "zscore", "scav_loss", "cav_loss", "encoder"])
        assert all(r.passed for r in reports)
        for rep in reports:
            assert rep.coords > 0
            assert "PASS" in rep.line()

    def test_threshold_override(self):
        report = run_gradcheck(["eucl"], threshold=1e-12)[0]
        assert report.threshold == 1e-12
        assert not report.passed  # float noise exceeds an impossible bar

    def test_registry_covers_all_pipelines(self):
        names = set(TARGETS)
        assert {"eucl", "soft_dtw", "wasserstein", "zscore", "scav_loss", "cav_loss",
                "multitask_loss", "encoder"} <= names
        assert {f"pipeline_scav_{m}" for m in ("eucl", "sdtw", "wass")} <= names
        assert {f"pipeline_multi_{m}" for m in ("eucl", "sdtw", "wass")} <= names
        assert "pipeline_cav" in names
