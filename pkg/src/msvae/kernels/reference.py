"""Pure-numpy implementations of the state-enumeration kernels.

These are the fallback for the compiled extension and the ground truth the
extension is tested against.  Shapes follow the training loop: a batch of
inputs x (B, D), per-source decoder means mu (B, M, K, D) for M latent
draws, and a binary state matrix states (S, K) listing which sources each
discrete state switches on.
"""

from __future__ import annotations

import numpy as np


def state_l1_residuals(x: np.ndarray, mu: np.ndarray, states: np.ndarray) -> np.ndarray:
    """L1 distance between x and every state's source combination.

    Returns r with r[b, m, s] = sum_d |x[b, d] - sum_k states[s, k] * mu[b, m, k, d]|.
    """
    st = np.asarray(states, dtype=np.float64)
    mix = np.einsum("sk,bmkd->bmsd", st, mu)
    return np.abs(x[:, None, None, :] - mix).sum(axis=-1)


def state_l1_residuals_grad(
    x: np.ndarray, mu: np.ndarray, states: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Gradient of sum(upstream * state_l1_residuals) with respect to mu.

    The subgradient of |.| at zero is taken as zero.
    """
    st = np.asarray(states, dtype=np.float64)
    mix = np.einsum("sk,bmkd->bmsd", st, mu)
    sign = np.sign(x[:, None, None, :] - mix)
    return -np.einsum("bms,sk,bmsd->bmkd", upstream, st, sign)
