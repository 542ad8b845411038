"""Amortized inference: per-source Gaussian encoders and the exact discrete
posterior over presence states.

Each source has its own encoder: a shared trunk of dense blocks feeding two
linear heads, one for the posterior mean and one whose output is
exponentiated to give a strictly positive posterior variance.  Given latent
draws, the posterior over the 2^K presence states is exact and computed by
enumeration; energies are shifted by their minimum (the pivot) before
exponentiation so the softmax stays finite for arbitrarily large energy
spreads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import state_l1_residuals
from .model import (
    GenerativeParams,
    bernoulli_log_prior,
    energies_all_states,
    gaussian_log_prior,
)
from .nn import DenseLayer, MlpNet

__all__ = [
    "EncoderParams",
    "GaussianEncoder",
    "PosteriorTable",
    "discrete_posterior",
    "encode",
    "joint_energies",
    "marginal_state_posterior",
    "posterior_expectation",
    "predict_states",
    "sample_latents",
    "source_presence",
    "table_from_energies",
    "tables_from_energies",
]


class GaussianEncoder:
    """Trunk plus mean/variance heads mapping an observation to q(z_k; x)."""

    def __init__(self, trunk: MlpNet, mean_head: DenseLayer, var_head: DenseLayer):
        self.trunk = trunk
        self.mean_head = mean_head
        self.var_head = var_head
        self.training = True

    @classmethod
    def build(cls, d: int, hidden, z: int, rng: np.random.Generator) -> "GaussianEncoder":
        if len(hidden) < 1:
            raise ValueError("encoder needs at least one trunk block")
        trunk = MlpNet.build(
            d, list(hidden[:-1]), hidden[-1], rng=rng,
            final_activation="relu", hidden_batchnorm=True, final_batchnorm=True,
        )
        mean_head = DenseLayer.create(hidden[-1], z, batchnorm=False, activation="identity", rng=rng)
        var_head = DenseLayer.create(hidden[-1], z, batchnorm=False, activation="exp", rng=rng)
        return cls(trunk, mean_head, var_head)

    @property
    def d(self) -> int:
        return self.trunk.in_dim

    @property
    def z(self) -> int:
        return self.mean_head.out_dim

    def forward(self, x) -> tuple:
        """Posterior mean and variance tensors for a batch of observations."""
        self.trunk.training = self.training
        h = self.trunk.forward(x)
        mean = self.mean_head.forward(h, self.training)
        var = self.var_head.forward(h, self.training)
        return mean, var

    def train(self) -> "GaussianEncoder":
        self.training = True
        return self

    def eval(self) -> "GaussianEncoder":
        self.training = False
        return self

    def named_parameters(self, prefix: str = "") -> list:
        out = self.trunk.named_parameters(f"{prefix}trunk.")
        out.extend((f"{prefix}mean.{n}", t) for n, t in self.mean_head.parameters())
        out.extend((f"{prefix}var.{n}", t) for n, t in self.var_head.parameters())
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def state_items(self, prefix: str = "") -> list:
        out = self.trunk.state_items(f"{prefix}trunk.")
        out.extend((f"{prefix}mean.{n}", a) for n, a in self.mean_head.state_items())
        out.extend((f"{prefix}var.{n}", a) for n, a in self.var_head.state_items())
        return out

    def load_state_items(self, arrays) -> None:
        arrays = list(arrays)
        n_trunk = sum(layer.n_state_items() for layer in self.trunk.layers)
        self.trunk.load_state_items(arrays[:n_trunk])
        rest = arrays[n_trunk:]
        n_mean = self.mean_head.n_state_items()
        self.mean_head.load_state_items(rest[:n_mean])
        self.var_head.load_state_items(rest[n_mean:])

    def spec(self) -> dict:
        dims = [layer.out_dim for layer in self.trunk.layers]
        return {"d": self.d, "hidden": dims, "z": self.z}

    @classmethod
    def from_spec(cls, spec: dict) -> "GaussianEncoder":
        return cls.build(spec["d"], spec["hidden"], spec["z"], np.random.default_rng(0))


class EncoderParams:
    """The K per-source encoders, addressed as one unit."""

    def __init__(self, encoders: list):
        if not encoders:
            raise ValueError("need at least one encoder")
        self.encoders = list(encoders)
        dims = {enc.d for enc in self.encoders}
        if len(dims) != 1:
            raise ValueError(f"encoders disagree on input dimension: {sorted(dims)}")

    @classmethod
    def build(cls, k: int, d: int, hidden, z: int, rng: np.random.Generator) -> "EncoderParams":
        return cls([GaussianEncoder.build(d, hidden, z, rng) for _ in range(k)])

    @property
    def k(self) -> int:
        return len(self.encoders)

    @property
    def d(self) -> int:
        return self.encoders[0].d

    @property
    def z(self) -> int:
        return self.encoders[0].z

    def __iter__(self):
        return iter(self.encoders)

    def __getitem__(self, idx: int) -> GaussianEncoder:
        return self.encoders[idx]

    def train(self) -> "EncoderParams":
        for enc in self.encoders:
            enc.train()
        return self

    def eval(self) -> "EncoderParams":
        for enc in self.encoders:
            enc.eval()
        return self

    def named_parameters(self) -> list:
        out = []
        for idx, enc in enumerate(self.encoders):
            out.extend(enc.named_parameters(f"encoder{idx}."))
        return out


def encode(x, encoders: EncoderParams) -> tuple:
    """Posterior means and variances for one observation, as (K, Z) arrays."""
    x = np.asarray(x, dtype=np.float64)
    batch = x[None, :]
    means = np.empty((encoders.k, encoders.z))
    variances = np.empty((encoders.k, encoders.z))
    for idx, enc in enumerate(encoders):
        mean, var = enc.forward(batch)
        means[idx] = mean.data[0]
        variances[idx] = var.data[0]
    return means, variances


def encode_batch(x, encoders: EncoderParams) -> list:
    """Per-source (mean, variance) tensor pairs for a batch, graph-aware."""
    xt = ad.as_tensor(x)
    return [enc.forward(xt) for enc in encoders]


def sample_latents(mean, var, m: int, eps_or_rng) -> tuple:
    """Reparameterized latent draws z = mean + sqrt(var) * eps.

    mean and var are (B, Z) tensors (arrays are wrapped); the result is a
    (B, M, Z) tensor plus the noise array that produced it, so the same
    draw can be replayed.  `eps_or_rng` is either a Generator or a
    (B, M, Z) noise array.
    """
    mean = ad.as_tensor(mean)
    var = ad.as_tensor(var)
    b, z = mean.shape
    if isinstance(eps_or_rng, np.random.Generator):
        eps = eps_or_rng.standard_normal((b, m, z))
    else:
        eps = np.asarray(eps_or_rng, dtype=np.float64)
        if eps.shape != (b, m, z):
            raise ValueError(f"noise shape {eps.shape} does not match ({b}, {m}, {z})")
    std = ad.sqrt(var)
    zt = mean.reshape(b, 1, z) + std.reshape(b, 1, z) * ad.as_tensor(eps)
    return zt, eps


@dataclass
class PosteriorTable:
    """Exact discrete posterior for one datapoint and one latent draw."""

    energies: np.ndarray
    pivot: float
    log_q: np.ndarray
    q: np.ndarray


def table_from_energies(energies) -> PosteriorTable:
    """Stabilized posterior table from per-state energies."""
    energies = np.asarray(energies, dtype=np.float64)
    log_q, pivot = _log_tables(energies[None, :])
    return PosteriorTable(
        energies=energies, pivot=float(pivot[0]), log_q=log_q[0], q=np.exp(log_q[0])
    )


def _log_tables(energies: np.ndarray) -> tuple:
    """log q and the pivot for a (..., S) energy array."""
    pivot = energies.min(axis=-1, keepdims=True)
    shifted = pivot - energies
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - log_norm, pivot[..., 0]


def tables_from_energies(energies) -> np.ndarray:
    """Posterior probabilities for a (..., S) energy array."""
    log_q, _ = _log_tables(np.asarray(energies, dtype=np.float64))
    return np.exp(log_q)


def discrete_posterior(x, z, params: GenerativeParams) -> PosteriorTable:
    """Exact posterior over presence states given one latent draw."""
    return table_from_energies(energies_all_states(x, z, params))


def posterior_expectation(values, table: PosteriorTable) -> float:
    """Expectation of per-state values under a posterior table."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != table.q.shape:
        raise ValueError(f"values shape {values.shape} does not match table {table.q.shape}")
    return float(values @ table.q)


def joint_energies(x, z, params: GenerativeParams) -> np.ndarray:
    """Energies of every state for a batch: x (N, D), z (N, M, K, Z) -> (N, M, S).

    Includes the state-independent latent prior term, so entries match the
    single-point energy op.  Decoders run in their current mode.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n, m, k, _ = z.shape
    states = params.states()
    mus = params.decode_stack(z)
    resid = state_l1_residuals(x, mus, states)
    log_lik = -params.d * np.log(2.0 * params.b) - resid / params.b
    log_prior_s = bernoulli_log_prior(states, params.pi)
    log_prior_z = -0.5 * (
        np.square(z).sum(axis=(2, 3)) + k * params.latent_dim * np.log(2.0 * np.pi)
    )
    return -(log_lik + log_prior_s[None, None, :] + log_prior_z[:, :, None])


def _posterior_sample_tables(
    x: np.ndarray, encoders: EncoderParams, params: GenerativeParams, eps: np.ndarray
) -> tuple:
    """Per-draw posterior tables q (N, M, S) for a batch, plus the draws."""
    means, variances = [], []
    for enc in encoders:
        mean, var = enc.forward(x)
        means.append(mean.data)
        variances.append(var.data)
    mean = np.stack(means, axis=1)
    var = np.stack(variances, axis=1)
    z = mean[:, None, :, :] + np.sqrt(var)[:, None, :, :] * eps
    energies = joint_energies(x, z, params)
    log_q, _ = _log_tables(energies)
    return np.exp(log_q), z


def predict_states(
    X,
    encoders: EncoderParams,
    params: GenerativeParams,
    m: int,
    rng,
    chunk: int = 128,
) -> np.ndarray:
    """Marginal state posteriors q(s; x) for a dataset, as an (N, S) array.

    Latent draws are averaged jointly: each of the M draws contributes one
    exact discrete table and the tables are averaged with equal weight.
    All noise is drawn up front, so results do not depend on the chunk
    size.  Encoders and decoders run in their current mode; inference
    callers should set eval mode first.
    """
    X = np.asarray(X, dtype=np.float64)
    eps = rng.standard_normal((X.shape[0], m, encoders.k, encoders.z))
    out = np.empty((X.shape[0], 1 << params.k))
    for start in range(0, X.shape[0], chunk):
        stop = min(start + chunk, X.shape[0])
        q, _ = _posterior_sample_tables(X[start:stop], encoders, params, eps[start:stop])
        out[start:stop] = q.mean(axis=1)
    return out


def marginal_state_posterior(
    x, encoders: EncoderParams, params: GenerativeParams, m: int, rng
) -> np.ndarray:
    """Marginal state posterior for a single observation."""
    x = np.asarray(x, dtype=np.float64)
    return predict_states(x[None, :], encoders, params, m, rng)[0]


def source_presence(q, k: int) -> np.ndarray:
    """Posterior presence probability of source k: the mass of states with bit k set.

    Accepts a single table (S,) or a batch (..., S).
    """
    q = np.asarray(q, dtype=np.float64)
    s = q.shape[-1]
    n_sources = s.bit_length() - 1
    if 1 << n_sources != s:
        raise ValueError(f"table length {s} is not a power of two")
    if not 0 <= k < n_sources:
        raise ValueError(f"source index {k} out of range for {n_sources} sources")
    bit = (np.arange(s) >> k) & 1
    return q @ bit.astype(np.float64)
