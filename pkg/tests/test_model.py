"""Oracles for the generative model: priors, densities, energies, sampling."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from msvae.model import (
    B_MIN,
    CapacityError,
    GenerativeParams,
    PI_MAX,
    PI_MIN,
    bernoulli_log_prior,
    combine_sources,
    energies_all_states,
    energy,
    enumerate_states,
    gaussian_log_prior,
    laplace_log_density,
    sample_dataset,
    state_bits,
    state_index,
)
from msvae.nn import MlpNet

RNG = np.random.default_rng(23)


def make_params(k=2, d=5, z=2, b=0.4, pi=None, seed=3):
    rng = np.random.default_rng(seed)
    decoders = [MlpNet.build(z, [4], d, rng=rng).eval() for _ in range(k)]
    pi = np.linspace(0.25, 0.65, k) if pi is None else np.asarray(pi)
    return GenerativeParams(pi=pi, decoders=decoders, b=b, latent_dim=z)


class TestStates:
    def test_enumeration_is_little_endian(self):
        states = enumerate_states(3)
        assert states.shape == (8, 3)
        assert_allclose(states[0], [0, 0, 0])
        assert_allclose(states[1], [1, 0, 0])
        assert_allclose(states[2], [0, 1, 0])
        assert_allclose(states[5], [1, 0, 1])

    def test_index_bits_roundtrip(self):
        for k in (1, 3, 6):
            for idx in range(1 << k):
                assert state_index(state_bits(idx, k)) == idx

    def test_enumeration_matches_index(self):
        states = enumerate_states(4)
        for idx in range(16):
            assert state_index(states[idx]) == idx

    def test_cap_at_sixteen_sources(self):
        enumerate_states(16)
        with pytest.raises(CapacityError):
            enumerate_states(17)
        with pytest.raises(CapacityError):
            enumerate_states(0)

    def test_bits_out_of_range(self):
        with pytest.raises(ValueError):
            state_bits(8, 3)


class TestPriors:
    def test_bernoulli_hand_example(self):
        pi = np.array([0.3, 0.2])
        assert_allclose(
            bernoulli_log_prior([1, 0], pi), np.log(0.3 * 0.8), rtol=1e-12
        )
        assert_allclose(
            bernoulli_log_prior([1, 1], pi), np.log(0.3 * 0.2), rtol=1e-12
        )

    def test_bernoulli_normalizes(self):
        pi = np.array([0.3, 0.2, 0.7])
        states = enumerate_states(3)
        total = np.exp(bernoulli_log_prior(states, pi)).sum()
        assert_allclose(total, 1.0, rtol=1e-12)

    def test_bernoulli_leading_shape(self):
        pi = np.array([0.4, 0.6])
        stack = np.stack([enumerate_states(2)] * 3)
        out = bernoulli_log_prior(stack, pi)
        assert out.shape == (3, 4)

    def test_gaussian_matches_formula(self):
        z = RNG.normal(size=(2, 3))
        want = (-0.5 * (z**2 + np.log(2 * np.pi))).sum()
        assert_allclose(gaussian_log_prior(z), want, rtol=1e-12)

    def test_gaussian_normalizes_in_one_dim(self):
        # Trapezoidal integral of exp(log p) over a wide grid.
        grid = np.linspace(-10, 10, 20001)
        dens = np.exp([gaussian_log_prior(np.array([g])) for g in grid])
        assert_allclose(np.trapezoid(dens, grid), 1.0, rtol=1e-8)


class TestDensities:
    def test_combine_sources_manual(self):
        mus = np.arange(12, dtype=float).reshape(3, 4)
        assert_allclose(combine_sources([1, 0, 1], mus), mus[0] + mus[2])
        assert_allclose(combine_sources([0, 0, 0], mus), np.zeros(4))

    def test_combine_sources_batched(self):
        mus = RNG.normal(size=(5, 3, 4))
        bits = enumerate_states(3)[[1, 4, 7, 0, 3]]
        out = combine_sources(bits, mus)
        for i in range(5):
            assert_allclose(out[i], (bits[i][:, None] * mus[i]).sum(axis=0))

    def test_laplace_log_density_formula(self):
        x = np.array([0.5, -1.0, 2.0])
        mean = np.array([0.0, 0.0, 2.5])
        b = 0.7
        want = (-np.log(2 * b) - np.abs(x - mean) / b).sum()
        assert_allclose(laplace_log_density(x, mean, b), want, rtol=1e-12)

    def test_laplace_normalizes_in_one_dim(self):
        grid = np.linspace(-12, 12, 40001)
        dens = np.exp([laplace_log_density(np.array([g]), np.array([0.3]), 0.5) for g in grid])
        assert_allclose(np.trapezoid(dens, grid), 1.0, rtol=1e-6)


class TestEnergy:
    def test_energy_is_negative_log_joint(self):
        params = make_params()
        x = RNG.normal(size=params.d)
        z = RNG.normal(size=(params.k, params.latent_dim))
        bits = np.array([1, 0], dtype=np.uint8)
        mus = params.decode_stack(z[None])[0]
        want = -(
            bernoulli_log_prior(bits, params.pi)
            + gaussian_log_prior(z)
            + laplace_log_density(x, mus[0], params.b)
        )
        assert_allclose(energy(x, bits, z, params), want, rtol=1e-12)

    def test_all_states_match_single_energies(self):
        params = make_params(k=3)
        x = RNG.normal(size=params.d)
        z = RNG.normal(size=(3, params.latent_dim))
        all_e = energies_all_states(x, z, params)
        states = params.states()
        assert all_e.shape == (8,)
        for idx in (0, 3, 7):
            assert_allclose(all_e[idx], energy(x, states[idx], z, params), rtol=1e-12)

    def test_empty_state_energy_ignores_decoders(self):
        params = make_params(b=0.5)
        x = RNG.normal(size=params.d)
        z = np.zeros((params.k, params.latent_dim))
        bits = np.zeros(params.k, dtype=np.uint8)
        want = -(
            bernoulli_log_prior(bits, params.pi)
            + gaussian_log_prior(z)
            + laplace_log_density(x, np.zeros(params.d), 0.5)
        )
        assert_allclose(energy(x, bits, z, params), want, rtol=1e-12)


class TestGenerativeParams:
    def test_pi_clamped_into_open_interval(self):
        params = make_params(pi=np.array([0.0, 1.0]))
        assert params.pi[0] == PI_MIN
        assert params.pi[1] == PI_MAX

    def test_b_floor(self):
        params = make_params(b=0.0)
        assert params.b == B_MIN

    def test_mismatched_pi_length(self):
        rng = np.random.default_rng(0)
        decoders = [MlpNet.build(2, [3], 4, rng=rng) for _ in range(2)]
        with pytest.raises(ValueError):
            GenerativeParams(pi=np.array([0.5]), decoders=decoders, b=0.1, latent_dim=2)

    def test_mismatched_decoder_dims(self):
        rng = np.random.default_rng(0)
        decoders = [
            MlpNet.build(2, [3], 4, rng=rng),
            MlpNet.build(2, [3], 5, rng=rng),
        ]
        with pytest.raises(ValueError):
            GenerativeParams(pi=np.full(2, 0.5), decoders=decoders, b=0.1, latent_dim=2)

    def test_decode_stack_runs_each_decoder(self):
        params = make_params(k=2)
        z = RNG.normal(size=(4, 2, params.latent_dim))
        out = params.decode_stack(z)
        for src in range(2):
            want = params.decoders[src].forward(z[:, src, :]).data
            assert_allclose(out[:, src, :], want, rtol=1e-12)


class TestSampling:
    def test_truth_frequencies_match_pi(self):
        params = make_params(pi=np.array([0.3, 0.7]))
        ds = sample_dataset(params, 20000, seed=11)
        freq = ds.truth.mean(axis=0)
        sigma = np.sqrt(np.array([0.3, 0.7]) * np.array([0.7, 0.3]) / 20000)
        assert np.all(np.abs(freq - [0.3, 0.7]) < 4 * sigma)

    def test_observation_is_components_plus_noise(self):
        params = make_params()
        ds = sample_dataset(params, 50, seed=5)
        assert_allclose(ds.x, ds.components.sum(axis=1) + ds.noise, rtol=1e-12)

    def test_inactive_components_are_zero(self):
        params = make_params()
        ds = sample_dataset(params, 100, seed=6)
        off = ds.truth == 0
        assert np.abs(ds.components[off]).max() == 0.0

    def test_noise_scale_statistics(self):
        params = make_params(b=0.25)
        ds = sample_dataset(params, 4000, seed=7)
        # Mean absolute Laplace deviation equals b.
        assert_allclose(np.abs(ds.noise).mean(), 0.25, rtol=0.05)

    def test_same_seed_is_bit_identical(self):
        params = make_params()
        a = sample_dataset(params, 32, seed=9)
        b = sample_dataset(params, 32, seed=9)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.truth, b.truth)

    def test_different_seeds_differ(self):
        params = make_params()
        a = sample_dataset(params, 32, seed=9)
        b = sample_dataset(params, 32, seed=10)
        assert not np.array_equal(a.x, b.x)

    def test_restores_decoder_mode(self):
        params = make_params()
        params.train()
        sample_dataset(params, 8, seed=1)
        assert all(dec.training for dec in params.decoders)
        params.eval()
