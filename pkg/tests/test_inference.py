"""Posterior machinery checks against direct Bayes computations."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from msvae.inference import (
    discrete_posterior,
    encode,
    encode_batch,
    joint_energies,
    marginal_state_posterior,
    posterior_expectation,
    predict_states,
    sample_latents,
    source_presence,
    table_from_energies,
    tables_from_energies,
)
from msvae.model import energies_all_states, energy

from conftest import build_system

RNG = np.random.default_rng(41)


class TestEncoding:
    def test_encode_matches_batch_forward(self, tiny_system):
        encoders, _params = tiny_system
        x = RNG.normal(size=encoders.d)
        means, variances = encode(x, encoders)
        pairs = encode_batch(x[None, :], encoders)
        for idx, (mean, var) in enumerate(pairs):
            assert_allclose(means[idx], mean.data[0], rtol=1e-12)
            assert_allclose(variances[idx], var.data[0], rtol=1e-12)

    def test_variances_are_positive(self, tiny_system):
        encoders, _params = tiny_system
        _means, variances = encode(RNG.normal(size=encoders.d), encoders)
        assert (variances > 0).all()


class TestSampleLatents:
    def test_exact_reparameterization(self):
        mean = RNG.normal(size=(3, 2))
        var = RNG.uniform(0.5, 2.0, size=(3, 2))
        eps = RNG.normal(size=(3, 4, 2))
        z, eps_out = sample_latents(mean, var, 4, eps)
        want = mean[:, None, :] + np.sqrt(var)[:, None, :] * eps
        assert_allclose(z.data, want, rtol=1e-12)
        assert eps_out is eps

    def test_generator_draw_moments(self):
        mean = np.array([[1.0, -2.0]])
        var = np.array([[4.0, 0.25]])
        z, _ = sample_latents(mean, var, 20000, np.random.default_rng(0))
        assert_allclose(z.data.mean(axis=1)[0], [1.0, -2.0], atol=0.05)
        assert_allclose(z.data.var(axis=1)[0], [4.0, 0.25], rtol=0.05)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            sample_latents(np.zeros((2, 3)), np.ones((2, 3)), 4, np.zeros((2, 2, 3)))


class TestPosteriorTables:
    def test_matches_direct_bayes(self, tiny_system):
        _encoders, params = tiny_system
        x = RNG.normal(size=params.d)
        z = RNG.normal(size=(params.k, params.latent_dim))
        table = discrete_posterior(x, z, params)
        energies = energies_all_states(x, z, params)
        direct = np.exp(-energies)
        direct /= direct.sum()
        assert_allclose(table.q, direct, rtol=1e-10)
        assert_allclose(table.q.sum(), 1.0, rtol=1e-12)

    def test_shift_invariance(self):
        energies = np.array([3.0, 1.0, 4.0, 1.5])
        shifted = table_from_energies(energies + 123.456)
        base = table_from_energies(energies)
        assert_allclose(shifted.q, base.q, rtol=1e-12)

    def test_huge_energy_spread_stays_finite(self):
        energies = np.array([1e4, 0.0, 2e4, 5.0])
        table = table_from_energies(energies)
        assert np.isfinite(table.q).all()
        assert_allclose(table.q.sum(), 1.0, rtol=1e-12)
        assert table.q[1] > 0.99
        assert table.pivot == 0.0

    def test_lower_energy_gets_more_mass(self):
        energies = np.array([2.0, 0.5, 3.0, 1.0])
        table = table_from_energies(energies)
        order = np.argsort(energies)
        assert (np.diff(table.q[order]) <= 0).all()

    def test_batched_tables_match_single(self):
        energies = RNG.normal(size=(4, 3, 8))
        batch = tables_from_energies(energies)
        for i in range(4):
            for j in range(3):
                single = table_from_energies(energies[i, j])
                assert_allclose(batch[i, j], single.q, rtol=1e-12)

    def test_expectation_matches_dot(self):
        energies = RNG.normal(size=(8,))
        table = table_from_energies(energies)
        values = RNG.normal(size=(8,))
        assert_allclose(
            posterior_expectation(values, table), values @ table.q, rtol=1e-12
        )
        with pytest.raises(ValueError):
            posterior_expectation(values[:4], table)


class TestJointEnergies:
    def test_matches_single_point_energy(self, tiny_system):
        _encoders, params = tiny_system
        x = RNG.normal(size=(2, params.d))
        z = RNG.normal(size=(2, 3, params.k, params.latent_dim))
        batched = joint_energies(x, z, params)
        states = params.states()
        assert batched.shape == (2, 3, states.shape[0])
        for n in (0, 1):
            for m in (0, 2):
                for s in range(states.shape[0]):
                    want = energy(x[n], states[s], z[n, m], params)
                    assert_allclose(batched[n, m, s], want, rtol=1e-10)

    def test_z_prior_cancels_in_posterior(self, tiny_system):
        # The latent prior is constant across states, so posteriors from
        # full joint energies equal those from likelihood-plus-prior alone.
        _encoders, params = tiny_system
        x = RNG.normal(size=(1, params.d))
        z = RNG.normal(size=(1, 1, params.k, params.latent_dim))
        full = tables_from_energies(joint_energies(x, z, params))[0, 0]
        via_single = discrete_posterior(x[0], z[0, 0], params).q
        assert_allclose(full, via_single, rtol=1e-10)


class TestPrediction:
    def test_chunk_size_does_not_change_results(self, tiny_system):
        encoders, params = tiny_system
        X = RNG.normal(size=(23, params.d))
        a = predict_states(X, encoders, params, 4, np.random.default_rng(3), chunk=5)
        b = predict_states(X, encoders, params, 4, np.random.default_rng(3), chunk=100)
        assert np.array_equal(a, b)

    def test_rows_normalize(self, tiny_system):
        encoders, params = tiny_system
        X = RNG.normal(size=(9, params.d))
        q = predict_states(X, encoders, params, 3, np.random.default_rng(0))
        assert_allclose(q.sum(axis=1), np.ones(9), rtol=1e-10)
        assert (q >= 0).all()

    def test_single_draw_equals_manual_table(self, tiny_system):
        encoders, params = tiny_system
        x = RNG.normal(size=params.d)
        rng = np.random.default_rng(8)
        eps = np.random.default_rng(8).standard_normal((1, 1, params.k, params.latent_dim))
        q = predict_states(x[None, :], encoders, params, 1, rng)
        means, variances = encode(x, encoders)
        z = means + np.sqrt(variances) * eps[0, 0]
        assert_allclose(q[0], discrete_posterior(x, z, params).q, rtol=1e-10)

    def test_marginal_helper_matches_batch(self, tiny_system):
        encoders, params = tiny_system
        x = RNG.normal(size=params.d)
        a = marginal_state_posterior(x, encoders, params, 5, np.random.default_rng(2))
        b = predict_states(x[None, :], encoders, params, 5, np.random.default_rng(2))[0]
        assert_allclose(a, b, rtol=1e-15)


class TestSourcePresence:
    def test_hand_table(self):
        q = np.array([0.1, 0.2, 0.3, 0.4])
        assert_allclose(source_presence(q, 0), 0.6, rtol=1e-12)
        assert_allclose(source_presence(q, 1), 0.7, rtol=1e-12)

    def test_batch_tables(self):
        q = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
        assert_allclose(source_presence(q, 0), [0.0, 1.0])
        assert_allclose(source_presence(q, 1), [0.0, 1.0])

    def test_bad_table_length(self):
        with pytest.raises(ValueError):
            source_presence(np.ones(6) / 6, 0)

    def test_bad_source_index(self):
        with pytest.raises(ValueError):
            source_presence(np.ones(4) / 4, 2)
