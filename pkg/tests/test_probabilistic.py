import numpy as np
import pytest

import mmsbr.diffcore as dc
from mmsbr import probabilistic as prob
from mmsbr.diffcore import ModelParams, Tensor


def gaussians(rng, shape):
    mu = rng.normal(size=shape)
    sigma = rng.uniform(0.05, 4.0, size=shape)
    return mu, sigma


def w2_scalar(mu1, s1, mu2, s2):
    return prob.w2_distance(
        dc.constant(mu1), dc.constant(s1), dc.constant(mu2), dc.constant(s2)
    ).data


def wsa_params(d, seed=0):
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for role in ("Q", "K", "V"):
        params.add(f"prob.wsa.{role}.mu", Tensor(rng.uniform(-0.3, 0.3, size=(d, d))))
        params.add(f"prob.wsa.{role}.sigma", Tensor(rng.uniform(-0.3, 0.3, size=(d, d))))
    return params


class TestPriceEmbed:
    def _tables(self, rho=6, ncat=3, d=4, fill=0.0, seed=None):
        params = ModelParams()
        if seed is None:
            mu = np.full((rho, d), fill)
            sg = np.full((rho, d), fill)
            cat = np.full((ncat, d), fill)
        else:
            rng = np.random.default_rng(seed)
            mu, sg, cat = rng.normal(size=(rho, d)), rng.normal(size=(rho, d)), rng.normal(size=(ncat, d))
        params.add("prob.mu_table", Tensor(mu))
        params.add("prob.sigma_table", Tensor(sg))
        params.add("prob.cat_table", Tensor(cat))
        return params

    def test_zero_tables(self):
        params = self._tables()
        mu, sigma = prob.price_embed([2], [1], params)
        np.testing.assert_array_equal(mu.data, 0.0)
        np.testing.assert_allclose(sigma.data, 1.0 + 1e-6, atol=1e-12)

    def test_category_changes_mean(self):
        params = self._tables(seed=1)
        mu_a, _ = prob.price_embed([3], [0], params)
        mu_b, _ = prob.price_embed([3], [2], params)
        assert np.linalg.norm(mu_a.data - mu_b.data) > 0

    def test_positivity_floor(self):
        params = self._tables()
        params["prob.sigma_table"].data[:] = -100.0
        _, sigma = prob.price_embed([0], [0], params)
        assert np.all(sigma.data > 0)
        np.testing.assert_allclose(sigma.data, 1e-6, rtol=1e-3)

    def test_index_range_checked(self):
        params = self._tables()
        with pytest.raises(IndexError):
            prob.price_embed([6], [0], params)
        with pytest.raises(IndexError):
            prob.price_embed([0], [3], params)


class TestW2Distance:
    def test_identity_is_exactly_zero(self, rng):
        mu, sigma = gaussians(rng, (5, 3))
        np.testing.assert_array_equal(w2_scalar(mu, sigma, mu, sigma), 0.0)

    def test_closed_form_1d(self):
        # N(0, 1) vs N(3, 4): sqrt(9 + (1 - 2)^2) = sqrt(10)
        d = w2_scalar(np.array([[0.0]]), np.array([[1.0]]),
                      np.array([[3.0]]), np.array([[4.0]]))
        assert d[0] == pytest.approx(np.sqrt(10.0), abs=1e-9)

    def test_metric_laws(self):
        rng = np.random.default_rng(123)
        mu1, s1 = gaussians(rng, (1000, 16))
        mu2, s2 = gaussians(rng, (1000, 16))
        mu3, s3 = gaussians(rng, (1000, 16))
        d12 = w2_scalar(mu1, s1, mu2, s2)
        d21 = w2_scalar(mu2, s2, mu1, s1)
        d13 = w2_scalar(mu1, s1, mu3, s3)
        d23 = w2_scalar(mu2, s2, mu3, s3)
        assert np.all(d12 >= 0)
        assert np.max(np.abs(d12 - d21)) <= 1e-12
        assert np.all(d13 <= d12 + d23 + 1e-9)

    def test_pairwise_matches_rowwise(self, rng):
        mu_a, s_a = gaussians(rng, (4, 6))
        mu_b, s_b = gaussians(rng, (5, 6))
        pair = prob.pairwise_w2(
            dc.constant(mu_a), dc.constant(s_a), dc.constant(mu_b), dc.constant(s_b)
        ).data
        for i in range(4):
            for j in range(5):
                single = w2_scalar(mu_a[i:i + 1], s_a[i:i + 1], mu_b[j:j + 1], s_b[j:j + 1])
                assert pair[i, j] == pytest.approx(float(single[0]), abs=1e-9)


class TestWassersteinSelfAttention:
    def test_single_position_passes_value_through(self, rng):
        d = 4
        params = wsa_params(d)
        mu, sigma = gaussians(rng, (1, 1, d))
        h_mu, h_sigma, w = prob.wasserstein_self_attention(
            dc.constant(mu), dc.constant(sigma), np.ones((1, 1), bool), params,
            return_weights=True,
        )
        assert w.data[0, 0, 0] == 1.0
        v_mu = mu[0, 0] @ params["prob.wsa.V.mu"].data
        np.testing.assert_allclose(h_mu.data[0, 0], v_mu, rtol=1e-12)
        assert np.all(h_sigma.data > 0)

    def test_identical_elements_average(self, rng):
        d, m = 4, 3
        params = wsa_params(d)
        one_mu, one_sigma = gaussians(rng, (1, 1, d))
        mu = np.tile(one_mu, (1, m, 1))
        sigma = np.tile(one_sigma, (1, m, 1))
        h_mu, h_sigma, w = prob.wasserstein_self_attention(
            dc.constant(mu), dc.constant(sigma), np.ones((1, m), bool), params,
            return_weights=True,
        )
        np.testing.assert_allclose(w.data, 1.0 / m, atol=1e-15)
        v_mu = one_mu[0, 0] @ params["prob.wsa.V.mu"].data
        v_sigma = prob.pos(dc.matmul(dc.constant(one_sigma[0]), params["prob.wsa.V.sigma"])).data[0]
        np.testing.assert_allclose(h_mu.data[0, 0], v_mu, rtol=1e-12)
        np.testing.assert_allclose(h_sigma.data[0, 0], (1.0 / m) * v_sigma, rtol=1e-12)

    def test_near_key_outweighs_far_key(self):
        # d=1, identity maps: position 0's query sits on key 0, key 1 is far
        d = 1
        params = ModelParams()
        for role in ("Q", "K"):
            params.add(f"prob.wsa.{role}.mu", Tensor(np.eye(d)))
            params.add(f"prob.wsa.{role}.sigma", Tensor(np.zeros((d, d))))
        params.add("prob.wsa.V.mu", Tensor(np.eye(d)))
        params.add("prob.wsa.V.sigma", Tensor(np.zeros((d, d))))
        mu = np.array([[[0.0], [50.0]]])
        sigma = np.ones((1, 2, 1))
        _, _, w = prob.wasserstein_self_attention(
            dc.constant(mu), dc.constant(sigma), np.ones((1, 2), bool), params,
            return_weights=True,
        )
        assert w.data[0, 0, 0] > w.data[0, 0, 1]
        assert w.data[0, 1, 1] > w.data[0, 1, 0]
        # hand oracle: with equal Q/K maps, scores are -|mu_i - mu_j|
        expect = np.exp(0.0) / (np.exp(0.0) + np.exp(-50.0))
        assert w.data[0, 0, 0] == pytest.approx(expect, rel=1e-12)

    def test_weight_rows_sum_to_one_over_valid(self, rng):
        d = 5
        params = wsa_params(d)
        mu, sigma = gaussians(rng, (6, 7, d))
        mask = rng.uniform(size=(6, 7)) > 0.3
        mask[:, 0] = True
        _, h_sigma, w = prob.wasserstein_self_attention(
            dc.constant(mu), dc.constant(sigma), mask, params, return_weights=True
        )
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
        assert np.all(w.data[:, :, :][~np.broadcast_to(mask[:, None, :], w.shape)] == 0)
        assert np.all(h_sigma.data > 0)

    def test_translation_invariance_with_tied_maps(self, rng):
        d = 4
        params = wsa_params(d)
        for side in ("mu", "sigma"):
            params[f"prob.wsa.K.{side}"].data[:] = params[f"prob.wsa.Q.{side}"].data
        mu, sigma = gaussians(rng, (2, 5, d))
        mask = np.ones((2, 5), bool)
        _, _, w1 = prob.wasserstein_self_attention(
            dc.constant(mu), dc.constant(sigma), mask, params, return_weights=True)
        _, _, w2 = prob.wasserstein_self_attention(
            dc.constant(mu + 7.5), dc.constant(sigma), mask, params, return_weights=True)
        np.testing.assert_allclose(w1.data, w2.data, atol=1e-12)

    def test_literal_weighting(self, rng):
        d = 3
        params = wsa_params(d)
        mu, sigma = gaussians(rng, (1, 4, d))
        mask = np.ones((1, 4), bool)
        h_mu, _, w = prob.wasserstein_self_attention(
            dc.constant(mu), dc.constant(sigma), mask, params,
            literal=True, return_weights=True,
        )
        assert np.all(w.data >= 0)
        non_diag = w.data[0][~np.eye(4, dtype=bool)]
        assert not np.allclose(non_diag.sum(-1), 1.0)


class TestUserPriceRange:
    def test_single_position(self, rng):
        d = 4
        params = wsa_params(d)
        mu, sigma = gaussians(rng, (1, 1, d))
        h_mu, h_sigma = prob.wasserstein_self_attention(
            dc.constant(mu), dc.constant(sigma), np.ones((1, 1), bool), params)
        last_mu, last_sigma = prob.user_price_range(h_mu, h_sigma, [1])
        np.testing.assert_array_equal(last_mu.data[0], h_mu.data[0, 0])
        np.testing.assert_array_equal(last_sigma.data[0], h_sigma.data[0, 0])

    def test_padded_batch_matches_single_runs(self, rng):
        d = 4
        params = wsa_params(d)
        lengths = [3, 1, 2]
        m = max(lengths)
        mu = np.zeros((3, m, d))
        sigma = np.ones((3, m, d))
        singles = []
        for b, ln in enumerate(lengths):
            mu_b, sigma_b = gaussians(rng, (1, ln, d))
            mu[b, :ln] = mu_b[0]
            sigma[b, :ln] = sigma_b[0]
            h_mu, h_sigma = prob.wasserstein_self_attention(
                dc.constant(mu_b), dc.constant(sigma_b), np.ones((1, ln), bool), params)
            singles.append(prob.user_price_range(h_mu, h_sigma, [ln]))
        mask = np.arange(m)[None, :] < np.array(lengths)[:, None]
        h_mu, h_sigma = prob.wasserstein_self_attention(
            dc.constant(mu), dc.constant(sigma), mask, params)
        last_mu, last_sigma = prob.user_price_range(h_mu, h_sigma, lengths)
        for b in range(3):
            np.testing.assert_allclose(last_mu.data[b], singles[b][0].data[0], atol=1e-6)
            np.testing.assert_allclose(last_sigma.data[b], singles[b][1].data[0], atol=1e-6)

    def test_empty_rejected(self, rng):
        d = 2
        h = dc.constant(np.zeros((1, 1, d)))
        with pytest.raises(ValueError):
            prob.user_price_range(h, h, [0])


class TestCovariancePositivity:
    def test_random_forward_passes(self, rng):
        d = 6
        params = wsa_params(d, seed=3)
        tables = ModelParams()
        tables.add("prob.mu_table", Tensor(rng.normal(size=(10, d))))
        tables.add("prob.sigma_table", Tensor(rng.normal(size=(10, d)) * 3))
        tables.add("prob.cat_table", Tensor(rng.normal(size=(4, d)) * 3))
        for _ in range(50):
            levels = rng.integers(0, 10, size=(8, 5))
            cats = rng.integers(0, 4, size=(8, 5))
            mu, sigma = prob.price_embed(levels, cats, tables)
            assert np.all(sigma.data > 0)
            mask = rng.uniform(size=(8, 5)) > 0.3
            mask[:, 0] = True
            h_mu, h_sigma = prob.wasserstein_self_attention(mu, sigma, mask, params)
            assert np.all(h_sigma.data > 0)
