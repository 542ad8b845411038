"""The generative model: Bernoulli presence, Gaussian latents, Laplace noise.

A datapoint is produced by switching each of K sources on independently
(presence probability pi_k), decoding a standard-normal latent z_k through
that source's decoder network, summing the active decoder outputs, and
adding elementwise Laplace noise with scale b.  Discrete states are binary
presence vectors; they are indexed little endian, state index
sum_k bits_k * 2^k, and full enumeration is capped at K = 16 sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MixtureDataset
from .rng import sample_laplace, stream

STATE_CAP = 16
PI_MIN = 1e-4
PI_MAX = 1.0 - 1e-4
B_MIN = 1e-6

LOG_2PI = float(np.log(2.0 * np.pi))

__all__ = [
    "B_MIN",
    "CapacityError",
    "GenerativeParams",
    "PI_MAX",
    "PI_MIN",
    "STATE_CAP",
    "bernoulli_log_prior",
    "combine_sources",
    "energy",
    "energies_all_states",
    "enumerate_states",
    "gaussian_log_prior",
    "laplace_log_density",
    "sample_dataset",
    "state_bits",
    "state_index",
]


class CapacityError(ValueError):
    """Raised when full state enumeration would exceed the K = 16 cap."""


def enumerate_states(k: int) -> np.ndarray:
    """All 2^k presence vectors as a (2^k, k) uint8 array, little endian."""
    if k < 1:
        raise CapacityError(f"need at least one source, got k={k}")
    if k > STATE_CAP:
        raise CapacityError(f"state enumeration is capped at k={STATE_CAP}, got k={k}")
    indices = np.arange(1 << k, dtype=np.uint32)[:, None]
    return ((indices >> np.arange(k, dtype=np.uint32)[None, :]) & 1).astype(np.uint8)


def state_index(bits) -> int:
    """Little-endian index of one presence vector."""
    bits = np.asarray(bits)
    return int(bits.astype(np.uint64) @ (np.uint64(1) << np.arange(bits.shape[-1], dtype=np.uint64)))


def state_bits(index: int, k: int) -> np.ndarray:
    """Presence vector for a little-endian state index."""
    if not 0 <= index < (1 << k):
        raise ValueError(f"state index {index} out of range for k={k}")
    return ((index >> np.arange(k, dtype=np.uint32)) & 1).astype(np.uint8)


def bernoulli_log_prior(bits, pi) -> np.ndarray:
    """log p(s) under independent Bernoulli presence, any leading shape."""
    bits = np.asarray(bits, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    return (bits * np.log(pi) + (1.0 - bits) * np.log1p(-pi)).sum(axis=-1)


def gaussian_log_prior(z) -> float:
    """log p(z) under a standard normal over every entry of z."""
    z = np.asarray(z, dtype=np.float64)
    return float(-0.5 * (LOG_2PI * z.size + np.square(z).sum()))


def combine_sources(bits, mus) -> np.ndarray:
    """Mean of the observation: the sum of the active sources' decoder outputs."""
    bits = np.asarray(bits, dtype=np.float64)
    mus = np.asarray(mus, dtype=np.float64)
    return (bits[..., None] * mus).sum(axis=-2)


def laplace_log_density(x, mean, scale: float) -> float:
    """log of the elementwise Laplace density of x around mean."""
    x = np.asarray(x, dtype=np.float64)
    diff = np.abs(x - np.asarray(mean, dtype=np.float64)).sum()
    return float(-x.size * np.log(2.0 * scale) - diff / scale)


@dataclass
class GenerativeParams:
    """Presence priors, per-source decoders, and the Laplace noise scale."""

    pi: np.ndarray
    decoders: list
    b: float
    latent_dim: int

    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        if self.pi.ndim != 1 or self.pi.shape[0] != len(self.decoders):
            raise ValueError(
                f"pi shape {self.pi.shape} does not match {len(self.decoders)} decoders"
            )
        if len(self.decoders) > STATE_CAP:
            raise CapacityError(
                f"state enumeration is capped at k={STATE_CAP}, got {len(self.decoders)} decoders"
            )
        dims = {dec.out_dim for dec in self.decoders}
        if len(dims) != 1:
            raise ValueError(f"decoders disagree on output dimension: {sorted(dims)}")
        in_dims = {dec.in_dim for dec in self.decoders}
        if in_dims != {self.latent_dim}:
            raise ValueError(
                f"decoders expect latent dims {sorted(in_dims)}, configured {self.latent_dim}"
            )
        self.set_pi(self.pi)
        self.set_b(self.b)

    @property
    def k(self) -> int:
        return len(self.decoders)

    @property
    def d(self) -> int:
        return self.decoders[0].out_dim

    def set_pi(self, pi) -> None:
        self.pi = np.clip(np.asarray(pi, dtype=np.float64), PI_MIN, PI_MAX)

    def set_b(self, b: float) -> None:
        self.b = max(float(b), B_MIN)

    def states(self) -> np.ndarray:
        return enumerate_states(self.k)

    def decode_stack(self, z: np.ndarray) -> np.ndarray:
        """Decoder means for latents z (..., K, Z), returned as (..., K, D).

        Runs in whatever mode the decoders are currently set to; callers
        doing inference should have them in eval mode.
        """
        z = np.asarray(z, dtype=np.float64)
        lead = z.shape[:-2]
        out = np.empty((*lead, self.k, self.d))
        flat = z.reshape(-1, self.k, self.latent_dim)
        flat_out = out.reshape(-1, self.k, self.d)
        for src, dec in enumerate(self.decoders):
            flat_out[:, src, :] = dec.forward(flat[:, src, :]).data
        return out

    def train(self) -> None:
        for dec in self.decoders:
            dec.train()

    def eval(self) -> None:
        for dec in self.decoders:
            dec.eval()


def energy(x, bits, z, params: GenerativeParams) -> float:
    """Negative complete-data log density -log p(x, s, z)."""
    z = np.asarray(z, dtype=np.float64)
    mus = params.decode_stack(z[None, :, :])[0]
    mean = combine_sources(bits, mus)
    log_joint = (
        bernoulli_log_prior(bits, params.pi)
        + gaussian_log_prior(z)
        + laplace_log_density(x, mean, params.b)
    )
    return float(-log_joint)


def energies_all_states(x, z, params: GenerativeParams) -> np.ndarray:
    """Energies of every discrete state for one datapoint and one latent draw."""
    states = params.states()
    return np.array([energy(x, states[s], z, params) for s in range(states.shape[0])])


def sample_dataset(params: GenerativeParams, n: int, seed: int) -> MixtureDataset:
    """Draw n datapoints from the generative model (decoders in eval mode)."""
    if n < 0:
        raise ValueError(f"dataset size must be non-negative, got {n}")
    modes = [dec.training for dec in params.decoders]
    params.eval()
    try:
        states_rng = stream(seed, "model-states")
        latent_rng = stream(seed, "model-latents")
        noise_rng = stream(seed, "model-noise")
        truth = (states_rng.random((n, params.k)) < params.pi[None, :]).astype(np.uint8)
        z = latent_rng.standard_normal((n, params.k, params.latent_dim))
        mus = params.decode_stack(z)
        components = mus * truth[:, :, None]
        noise = sample_laplace(noise_rng, params.b, (n, params.d))
        x = components.sum(axis=1) + noise
    finally:
        for dec, mode in zip(params.decoders, modes):
            dec.training = mode
    return MixtureDataset(
        x=x,
        truth=truth,
        components=components,
        noise=noise,
        meta={
            "k": params.k,
            "d": params.d,
            "pi": [float(p) for p in params.pi],
            "b": float(params.b),
            "seed": int(seed),
            "origin": "model",
        },
    )
