"""Contrastive objectives: limits, invariances, oracle values, gradients."""

import math

import numpy as np
import pytest

from seqcontrast.losses import (Temperature, cav_loss, multitask_loss, scav_loss,
                                zscore)
from seqcontrast.verification import numeric_gradient, relative_error


class TestZScore:
    def test_row_example(self):
        out, _ = zscore(np.array([[1.0, 3.0], [2.0, 4.0]]), "rows")
        assert np.allclose(out, [[-1.0, 1.0], [-1.0, 1.0]], atol=1e-7)

    def test_col_example(self):
        out, _ = zscore(np.array([[1.0, 3.0], [2.0, 4.0]]), "cols")
        assert np.allclose(out, [[-1.0, -1.0], [1.0, 1.0]], atol=1e-7)

    def test_constant_row_maps_to_zeros(self):
        out, vjp = zscore(np.array([[2.0, 2.0, 2.0], [0.0, 1.0, 2.0]]), "rows")
        assert np.all(out[0] == 0.0)
        assert np.all(np.isfinite(vjp(np.ones((2, 3)))))

    def test_statistics_after_normalization(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 6))
        out, _ = zscore(x, "rows")
        assert np.all(np.abs(out.mean(axis=1)) < 1e-9)
        # the +eps guard leaves std at sigma/(sigma+1e-8), not exactly 1
        assert np.all(np.abs(out.std(axis=1) - 1.0) < 1e-7)

    def test_ranking_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.standard_normal((5, 7)) * rng.uniform(0.5, 20)
            out, _ = zscore(x, "rows")
            assert np.array_equal(np.argsort(out, axis=1), np.argsort(x, axis=1))

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 4))
        w = rng.standard_normal((4, 4))
        for axis in ("rows", "cols"):
            _, vjp = zscore(x, axis)
            analytic = vjp(w)

            def f(vec, axis=axis):
                out, _ = zscore(vec.reshape(4, 4), axis)
                return float((w * out).sum())

            numeric = numeric_gradient(f, x.ravel())
            assert relative_error(analytic.ravel(), numeric).max() < 1e-6

    def test_axis_and_size_validation(self):
        with pytest.raises(ValueError):
            zscore(np.zeros((1, 4)), "rows")
        with pytest.raises(ValueError):
            zscore(np.zeros((3, 3)), "diagonal")


def _zscore_rows_oracle(d, eps=1e-8):
    out = []
    for row in d:
        mu = sum(row) / len(row)
        sd = math.sqrt(sum((v - mu) ** 2 for v in row) / len(row))
        out.append([(v - mu) / (sd + eps) for v in row])
    return out


def _scav_oracle(d, lam, normalize=True):
    """Straight-line restatement of the sequence loss, python floats only."""
    b = len(d)
    dv = _zscore_rows_oracle(d) if normalize else d
    cols = [list(col) for col in zip(*d)]
    da_t = _zscore_rows_oracle(cols) if normalize else cols
    da = [list(row) for row in zip(*da_t)]
    total = 0.0
    for i in range(b):
        row = [-dv[i][j] / lam for j in range(b)]
        m = max(row)
        total += row[i] - (m + math.log(sum(math.exp(z - m) for z in row)))
        col = [-da[j][i] / lam for j in range(b)]
        m = max(col)
        total += col[i] - (m + math.log(sum(math.exp(z - m) for z in col)))
    return -total / (2 * b)


class TestScavLoss:
    def test_infinite_temperature_limit(self):
        rng = np.random.default_rng(3)
        for b in (2, 4, 8):
            d = np.abs(rng.standard_normal((b, b)))
            res = scav_loss(d, Temperature.init(1e6))
            assert res.loss == pytest.approx(math.log(b), abs=1e-3)

    def test_saturated_correct_pairs(self):
        d = np.full((3, 3), 100.0)
        np.fill_diagonal(d, 0.0)
        res = scav_loss(d, Temperature.init(0.01), normalize=False)
        assert res.loss < 1e-6

    def test_frozen_oracle_instance(self):
        d = [[0.0, 1.0], [1.0, 0.0]]
        res = scav_loss(np.array(d), Temperature.init(1.0), normalize=True)
        assert res.loss == pytest.approx(0.12692801581108948, abs=1e-12)
        assert res.loss == pytest.approx(_scav_oracle(d, 1.0), abs=1e-12)

    def test_random_instance_matches_oracle(self):
        rng = np.random.default_rng(4)
        d = np.abs(rng.standard_normal((4, 4))) + 0.1
        for normalize in (True, False):
            res = scav_loss(d, Temperature.init(0.7), normalize=normalize)
            oracle = _scav_oracle([list(map(float, row)) for row in d], 0.7, normalize)
            assert res.loss == pytest.approx(oracle, rel=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            d = np.abs(rng.standard_normal((3, 3)))
            assert scav_loss(d, Temperature.init(0.5)).loss >= 0.0

    def test_affine_invariance_under_normalization(self):
        rng = np.random.default_rng(6)
        d = rng.uniform(0.0, 100.0, size=(6, 6))
        base = scav_loss(d, Temperature.init(0.8), normalize=True).loss
        shifted = scav_loss(2.0 * d + 7.0, Temperature.init(0.8), normalize=True).loss
        assert shifted == pytest.approx(base, abs=1e-9)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        d = rng.uniform(0.0, 5.0, size=(5, 5))
        perm = rng.permutation(5)
        base = scav_loss(d, Temperature.init(0.9)).loss
        permuted = scav_loss(d[np.ix_(perm, perm)], Temperature.init(0.9)).loss
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        d = np.abs(rng.standard_normal((4, 4))) + 0.5
        log_lam = math.log(0.7)
        for normalize in (True, False):
            res = scav_loss(d, Temperature(log_lam), normalize=normalize)
            num = numeric_gradient(
                lambda v: scav_loss(v.reshape(4, 4), Temperature(log_lam), normalize=normalize).loss,
                d.ravel())
            assert relative_error(res.grad_distances.ravel(), num).max() < 1e-6
            num_lam = numeric_gradient(
                lambda v: scav_loss(d, Temperature(float(v[0])), normalize=normalize).loss,
                np.array([log_lam]))
            assert relative_error(np.array([res.grad_log_lambda]), num_lam).max() < 1e-6

    def test_validation(self):
        with pytest.raises(ValueError):
            scav_loss(np.zeros((2, 3)), Temperature.init(1.0))
        with pytest.raises(ValueError):
            scav_loss(np.full((2, 2), np.nan), Temperature.init(1.0))


class TestCavLoss:
    def test_infinite_temperature_limit(self):
        rng = np.random.default_rng(9)
        for b in (2, 4, 8):
            videos = [rng.standard_normal((3, 4)) for _ in range(b)]
            audios = [rng.standard_normal((4, 4)) for _ in range(b)]
            res = cav_loss(videos, audios, Temperature.init(1e6))
            assert res.loss == pytest.approx(math.log(b), abs=1e-3)

    def test_orthogonal_identical_embeddings_saturate(self):
        # pooled embeddings are the rows of an identity: s_ii=1, s_ij=0;
        # at tau=0.07 the positive softmax weight exceeds 0.999 for B <= 8
        for b in (2, 4, 8):
            seqs = [np.eye(b)[i:i + 1] for i in range(b)]
            res = cav_loss(seqs, seqs, Temperature.init(0.07))
            assert res.loss < 1e-3

    def test_frozen_oracle_instance(self):
        rng = np.random.default_rng(42)
        videos = [rng.standard_normal((3, 4)), rng.standard_normal((5, 4))]
        audios = [rng.standard_normal((4, 4)), rng.standard_normal((2, 4))]
        res = cav_loss(videos, audios, Temperature.init(0.5))
        assert res.loss == pytest.approx(0.8219738784919212, abs=1e-12)

    def test_zero_norm_embedding_rejected(self):
        videos = [np.zeros((3, 2)), np.ones((3, 2))]
        audios = [np.ones((2, 2)), np.ones((2, 2))]
        with pytest.raises(ValueError, match="zero-norm"):
            cav_loss(videos, audios, Temperature.init(0.5))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(10)
        videos = [rng.standard_normal((3, 4)) for _ in range(4)]
        audios = [rng.standard_normal((4, 4)) for _ in range(4)]
        base = cav_loss(videos, audios, Temperature.init(0.3)).loss
        perm = [2, 0, 3, 1]
        permuted = cav_loss([videos[i] for i in perm], [audios[i] for i in perm],
                            Temperature.init(0.3)).loss
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        videos = [rng.standard_normal((3, 3)) for _ in range(3)]
        audios = [rng.standard_normal((2, 3)) for _ in range(3)]
        log_tau = math.log(0.4)
        res = cav_loss(videos, audios, Temperature(log_tau))
        flat = np.concatenate([v.ravel() for v in videos] + [a.ravel() for a in audios])

        def unpack(vec):
            vs = [vec[i * 9:(i + 1) * 9].reshape(3, 3) for i in range(3)]
            auds = [vec[27 + i * 6:27 + (i + 1) * 6].reshape(2, 3) for i in range(3)]
            return vs, auds

        def f(vec):
            vs, auds = unpack(vec)
            return cav_loss(vs, auds, Temperature(log_tau)).loss

        numeric = numeric_gradient(f, flat)
        analytic = np.concatenate([g.ravel() for g in res.grad_videos + res.grad_audios])
        assert relative_error(analytic, numeric).max() < 1e-6
        num_tau = numeric_gradient(
            lambda v: cav_loss(videos, audios, Temperature(float(v[0]))).loss,
            np.array([log_tau]))
        assert relative_error(np.array([res.grad_log_tau]), num_tau).max() < 1e-6


class TestMultitaskLoss:
    @pytest.fixture()
    def parts(self):
        rng = np.random.default_rng(12)
        d = np.abs(rng.standard_normal((3, 3))) + 0.2
        videos = [rng.standard_normal((3, 4)) for _ in range(3)]
        audios = [rng.standard_normal((4, 4)) for _ in range(3)]
        scav = scav_loss(d, Temperature.init(0.8))
        cav = cav_loss(videos, audios, Temperature.init(0.2))
        return scav, cav

    def test_weight_one_is_scav(self, parts):
        scav, cav = parts
        combined = multitask_loss(scav, cav, 1.0)
        assert combined.loss == scav.loss
        assert np.array_equal(combined.grad_distances, scav.grad_distances)
        assert combined.grad_log_lambda == scav.grad_log_lambda
        assert combined.grad_log_tau == 0.0

    def test_weight_zero_is_cav(self, parts):
        scav, cav = parts
        combined = multitask_loss(scav, cav, 0.0)
        assert combined.loss == cav.loss
        assert combined.grad_log_tau == cav.grad_log_tau
        for got, want in zip(combined.grad_videos, cav.grad_videos):
            assert np.array_equal(got, want)

    def test_midpoint_is_arithmetic_mean(self, parts):
        scav, cav = parts
        combined = multitask_loss(scav, cav, 0.5)
        assert combined.loss == pytest.approx((scav.loss + cav.loss) / 2, rel=1e-15)

    def test_weight_validation(self, parts):
        scav, cav = parts
        with pytest.raises(ValueError):
            multitask_loss(scav, cav, 1.5)


class TestTemperature:
    def test_positive_by_construction(self):
        assert Temperature.init(0.07).value == pytest.approx(0.07, rel=1e-12)
        assert Temperature(-50.0).value > 0.0

    def test_init_validation(self):
        with pytest.raises(ValueError):
            Temperature.init(0.0)
