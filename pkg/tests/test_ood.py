import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jttm.ood import (
    RIDGE, CovarianceError, OodPartition, chi2_upper_quantile, export_scores, fit_class_gaussians, is_outlier,
    mahalanobis, mahalanobis_batch, partition_ood, prune_error_set,
)

from oracles import covariance_double_loop, mahalanobis_dense


def random_spd(rng, h):
    a = rng.normal(size=(h, h))
    return a @ a.T + 0.5 * np.eye(h)


def planted_dataset(seed=0, n_per_class=300, h=3, sigma=1.0):
    """Two classes with bounded inliers and five points per class pushed to 10 sigma."""
    rng = np.random.default_rng(seed)
    feats, labels, planted = [], [], []
    means = [np.zeros(h), np.full(h, 50.0)]
    for y in (0, 1):
        pts = rng.normal(size=(n_per_class, h))
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        pts = np.where(norms > 2.5, pts * 2.5 / norms, pts)
        for k in range(5):
            direction = rng.normal(size=h)
            pts[k] = 10.0 * direction / np.linalg.norm(direction)
            planted.append(y * n_per_class + k)
        feats.append(means[y] + sigma * pts)
        labels += [y] * n_per_class
    return np.vstack(feats), np.array(labels), set(planted)


class TestFit:
    def test_two_points(self):
        (g,) = fit_class_gaussians(np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([0, 0]))
        assert np.allclose(g.mean, [1.0, 0.0])
        assert np.array_equal(g.covariance, [[1.0, 0.0], [0.0, 0.0]])
        reg = g.covariance + RIDGE * 0.5 * np.eye(2)
        assert np.allclose(g.factor @ g.factor.T, reg, atol=1e-14)
        assert g.regularized and g.count == 2

    def test_duplicated_points_take_error_path(self):
        with pytest.raises(CovarianceError, match="class 0"):
            fit_class_gaussians(np.ones((5, 3)), np.zeros(5, dtype=int))

    def test_too_few_examples(self):
        with pytest.raises(CovarianceError):
            fit_class_gaussians(np.array([[1.0, 2.0], [0.0, 1.0], [3.0, 3.0]]), np.array([0, 0, 1]))

    def test_brute_force_mle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 4)) @ rng.normal(size=(4, 4)) + 3.0
        (g,) = fit_class_gaussians(x, np.zeros(50, dtype=int))
        mean, cov = covariance_double_loop(x.tolist())
        assert np.max(np.abs(g.mean - mean)) < 1e-10
        assert np.max(np.abs(g.covariance - cov)) < 1e-10
        assert np.array_equal(g.covariance, g.covariance.T)
        assert not g.regularized

    def test_per_class(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(60, 3))
        y = np.repeat([0, 1, 2], 20)
        gs = fit_class_gaussians(x, y, num_classes=3)
        assert [g.label for g in gs] == [0, 1, 2]
        for g in gs:
            _, cov = covariance_double_loop(x[y == g.label].tolist())
            assert np.max(np.abs(g.covariance - cov)) < 1e-12

    def test_factor_reconstructs_regularized(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(40, 6))
        (g,) = fit_class_gaussians(x, np.zeros(40, dtype=int))
        reg = g.covariance + RIDGE * np.trace(g.covariance) / 6 * np.eye(6)
        assert np.max(np.abs(g.factor @ g.factor.T - reg)) < 1e-8
        assert np.allclose(np.triu(g.factor, 1), 0)


class TestMahalanobis:
    def _gaussian(self, mean, cov):
        # fit on a sample whose MLE covariance is exactly `cov`: mean +- columns of sqrt(h * cov)
        h = len(mean)
        root = np.linalg.cholesky(cov) * np.sqrt(h)
        pts = np.vstack([mean + root.T, mean - root.T])
        (g,) = fit_class_gaussians(pts, np.zeros(len(pts), dtype=int))
        return g

    def test_at_mean_is_zero(self):
        g = self._gaussian(np.array([1.0, -2.0, 0.5]), random_spd(np.random.default_rng(0), 3))
        assert mahalanobis(g.mean, g) == 0.0

    def test_identity_unit_vector(self):
        g = self._gaussian(np.zeros(3), np.eye(3))
        assert np.allclose(g.covariance, np.eye(3), atol=1e-14)
        # ridge of 1e-6 shrinks the distance by sqrt(1 + 1e-6)
        assert abs(mahalanobis(np.array([0.0, 1.0, 0.0]), g) - 1.0) < 1e-6

    def test_dense_inverse_3d(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(30, 3))
        (g,) = fit_class_gaussians(x, np.zeros(30, dtype=int))
        reg = g.covariance + RIDGE * np.trace(g.covariance) / 3 * np.eye(3)
        q = rng.normal(size=3) * 2
        assert abs(mahalanobis(q, g) - mahalanobis_dense(q, g.mean, reg)) < 1e-8

    def test_whitening_equivalence_random_spd(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for case in range(100):
            h = int(rng.integers(1, 17))
            cov = random_spd(rng, h)
            mean = rng.normal(size=h)
            g = self._gaussian(mean, cov)
            reg = g.covariance + RIDGE * np.trace(g.covariance) / h * np.eye(h)
            q = mean + rng.normal(size=h) * 2
            worst = max(worst, abs(mahalanobis(q, g) - mahalanobis_dense(q, mean, reg)))
        assert worst < 1e-8

    def test_dimension_mismatch(self):
        g = self._gaussian(np.zeros(3), np.eye(3))
        with pytest.raises(ValueError):
            mahalanobis(np.zeros(4), g)

    @staticmethod
    def _distances_before_after(seed, spread):
        rng = np.random.default_rng(seed)
        h = 4
        x = rng.normal(size=(80, h))
        y = np.repeat([0, 1], 40)
        q, _ = np.linalg.qr(rng.normal(size=(h, h)))
        a = rng.uniform(0.1, 10.0) * q @ np.diag(rng.uniform(1 - spread, 1 + spread, size=h))
        shift = rng.normal(size=h)
        d0 = np.concatenate([mahalanobis_batch(x[y == k], g) for k, g in enumerate(fit_class_gaussians(x, y))])
        xt = x @ a.T + shift
        d1 = np.concatenate([mahalanobis_batch(xt[y == k], g) for k, g in enumerate(fit_class_gaussians(xt, y))])
        return np.max(np.abs(d0 - d1))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_affine_invariance(self, seed):
        # the trace-scaled ridge is exactly invariant only under similarities,
        # so the map is kept well conditioned (condition number <= 1.22)
        assert self._distances_before_after(seed, 0.1) < 1e-6

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_similarity_invariance_is_exact(self, seed):
        assert self._distances_before_after(seed, 0.0) < 1e-12


class TestPartition:
    def test_points_at_means(self):
        x = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [-1.0, -1.0], [5.0, 5.0], [5.0, 5.0]])
        y = np.array([0, 0, 0, 0, 1, 1])
        gs = fit_class_gaussians(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0],
                                           [6.0, 5.0], [4.0, 5.0], [5.0, 6.0], [5.0, 4.0]]),
                                 np.array([0, 0, 0, 0, 1, 1, 1, 1]))
        part = partition_ood([0, 1, 4, 5], x[[0, 1, 4, 5]], y[[0, 1, 4, 5]], gs, df=2, alpha=0.999999)
        assert part.s_out == set()
        assert all(part.scores[i][2] == 1.0 for i in (0, 1, 4, 5))

    def test_alpha_near_one_marks_almost_everything(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(200, 3))
        y = np.repeat([0, 1], 100)
        gs = fit_class_gaussians(x, y)
        part = partition_ood(range(200), x, y, gs, df=3, alpha=0.999999)
        assert len(part.s_out) >= 199

    def test_planted_outliers(self):
        x, y, planted = planted_dataset()
        h = x.shape[1]
        gs = fit_class_gaussians(x, y)
        part = partition_ood(range(len(y)), x, y, gs, df=h, alpha=0.001)
        assert part.s_out == planted
        # nothing sits in the bisection guard band
        t_star = chi2_upper_quantile(h, 0.001)
        assert min(abs(s[1] - t_star) for s in part.scores.values()) > 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_threshold_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_t(3, size=(400, 4))
        y = rng.integers(0, 2, size=400)
        gs = fit_class_gaussians(x, y)
        for alpha in (0.1, 0.01, 0.001):
            part = partition_ood(range(400), x, y, gs, df=4, alpha=alpha)
            t_star = chi2_upper_quantile(4, alpha)
            assert min(abs(s[1] - t_star) for s in part.scores.values()) > 1e-9
            by_threshold = {i for i, s in part.scores.items() if s[1] > t_star}
            assert by_threshold == part.s_out

    def test_laws_and_monotone_alpha(self):
        rng = np.random.default_rng(6)
        x = rng.standard_t(4, size=(300, 3))
        y = rng.integers(0, 3, size=300)
        gs = fit_class_gaussians(x, y)
        prev = None
        for alpha in (0.5, 0.1, 0.01, 0.001, 1e-5):
            part = partition_ood(range(300), x, y, gs, df=3, alpha=alpha)
            assert part.s_in | part.s_out == set(range(300))
            assert not part.s_in & part.s_out
            if prev is not None:
                assert part.s_out <= prev
            prev = part.s_out

    def test_both_orientations(self):
        # the reading that flags small p-values isolates the planted points;
        # the printed inequality flags the complement
        x, y, planted = planted_dataset(seed=1)
        gs = fit_class_gaussians(x, y)
        upper = partition_ood(range(len(y)), x, y, gs, df=3, alpha=0.001, orientation="upper_tail")
        printed = partition_ood(range(len(y)), x, y, gs, df=3, alpha=0.001, orientation="as_printed")
        assert upper.s_out == planted
        assert printed.s_out == set(range(len(y))) - planted
        assert is_outlier(1e-4, 1e-3) and not is_outlier(0.5, 1e-3)
        assert is_outlier(0.5, 1e-3, "as_printed")
        with pytest.raises(ValueError):
            is_outlier(0.5, 1e-3, "sideways")

    def test_distance_statistic(self):
        x, y, _ = planted_dataset(seed=2)
        gs = fit_class_gaussians(x, y)
        sq = partition_ood(range(len(y)), x, y, gs, df=3, alpha=0.001)
        plain = partition_ood(range(len(y)), x, y, gs, df=3, alpha=0.001, statistic="distance")
        # M < M^2 beyond distance 1, so comparing M flags fewer points
        assert plain.s_out <= sq.s_out
        with pytest.raises(ValueError):
            partition_ood(range(len(y)), x, y, gs, df=3, alpha=0.001, statistic="cubed")

    def test_missing_class(self):
        x = np.random.default_rng(7).normal(size=(10, 2))
        gs = fit_class_gaussians(x, np.zeros(10, dtype=int))
        with pytest.raises(KeyError):
            partition_ood(range(10), x, np.array([0] * 9 + [1]), gs, df=2, alpha=0.01)

    def test_export(self, tmp_path):
        x, y, planted = planted_dataset(seed=3, n_per_class=20)
        part = partition_ood(range(len(y)), x, y, fit_class_gaussians(x, y), df=3, alpha=0.001)
        path = tmp_path / "scores.jsonl"
        export_scores(part, path)
        recs = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["id"] for r in recs] == list(range(len(y)))
        assert {r["id"] for r in recs if r["out"]} == part.s_out
        for r in recs:
            assert abs(r["squared_distance"] - r["distance"] ** 2) < 1e-9 * max(1, r["squared_distance"])


class TestPrune:
    def _partition(self):
        return OodPartition(s_in={0, 1, 2, 3}, s_out={4, 5, 6})

    def test_disjoint(self):
        assert prune_error_set({0, 2}, self._partition()) == {0, 2}

    def test_subset(self):
        assert prune_error_set({4, 6}, self._partition()) == set()

    @given(st.sets(st.integers(0, 6)))
    def test_counting_identity(self, errors):
        part = self._partition()
        kept = prune_error_set(errors, part)
        assert len(kept) == len(errors) - len(errors & part.s_out)

    def test_uncovered(self):
        with pytest.raises(KeyError):
            prune_error_set({0, 99}, self._partition())
