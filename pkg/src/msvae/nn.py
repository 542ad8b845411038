"""Feed-forward building blocks and the Adam optimizer.

Networks are stacks of dense blocks (affine, optional batch normalization,
activation).  Batch normalization is implemented as a single fused graph
node with a hand-derived backward pass; in training mode it normalizes by
batch statistics and updates running statistics as a side effect, in eval
mode it applies the frozen running statistics.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = ("identity", "relu", "exp")

__all__ = [
    "Adam",
    "BatchNorm",
    "DegenerateBatchError",
    "DenseLayer",
    "GradientError",
    "MlpNet",
    "kaiming_uniform",
]


class DegenerateBatchError(ValueError):
    """Raised when batch statistics are requested for fewer than two rows."""


class GradientError(RuntimeError):
    """Raised when an optimizer step encounters a non-finite gradient."""


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform init with the relu-gain fan-in bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class BatchNorm:
    """Per-feature batch normalization with learnable scale and shift."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if training:
            return self._forward_train(x)
        return self._forward_eval(x)

    def _forward_train(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        if n < 2:
            raise DegenerateBatchError(
                f"batch normalization needs at least 2 rows in training mode, got {n}"
            )
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mean) * inv
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * mean
        self.running_var = (1.0 - m) * self.running_var + m * var * n / (n - 1)

        gamma, beta = self.gamma, self.beta

        def make(out):
            def run():
                g = out.grad
                if beta.requires_grad:
                    ad._accum(beta, g.sum(axis=0), owned=True)
                if gamma.requires_grad:
                    ad._accum(gamma, (g * xhat).sum(axis=0), owned=True)
                if x.requires_grad:
                    gm = g.mean(axis=0)
                    gxm = (g * xhat).mean(axis=0)
                    ad._accum(x, gamma.data * inv * (g - gm - xhat * gxm), owned=True)

            return run

        return ad._node(gamma.data * xhat + beta.data, (x, gamma, beta), make)

    def _forward_eval(self, x: Tensor) -> Tensor:
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        gamma, beta = self.gamma, self.beta
        # Eval mode is a fixed per-feature affine map; folding the four
        # broadcasts into one scale and shift halves the array passes.
        scale = gamma.data * inv
        shift = beta.data - self.running_mean * scale

        def make(out):
            def run():
                g = out.grad
                if beta.requires_grad:
                    ad._accum(beta, g.sum(axis=0), owned=True)
                if gamma.requires_grad:
                    xhat = (x.data - self.running_mean) * inv
                    ad._accum(gamma, (g * xhat).sum(axis=0), owned=True)
                if x.requires_grad:
                    ad._accum(x, g * scale, owned=True)

            return run

        return ad._node(x.data * scale + shift, (x, gamma, beta), make)

    def parameters(self) -> list:
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state_items(self) -> list:
        return [
            ("gamma", self.gamma.data),
            ("beta", self.beta.data),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]

    def load_state_items(self, arrays: Sequence[np.ndarray]) -> None:
        gamma, beta, rm, rv = arrays
        self.gamma.data = np.array(gamma, dtype=np.float64)
        self.beta.data = np.array(beta, dtype=np.float64)
        self.running_mean = np.array(rm, dtype=np.float64)
        self.running_var = np.array(rv, dtype=np.float64)


class DenseLayer:
    """Affine map with optional batch normalization and activation."""

    def __init__(self, w: Tensor, b: Tensor, batchnorm: BatchNorm | None, activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")
        self.w = w
        self.b = b
        self.batchnorm = batchnorm
        self.activation = activation

    @classmethod
    def create(
        cls,
        in_dim: int,
        out_dim: int,
        *,
        batchnorm: bool,
        activation: str,
        rng: np.random.Generator,
    ) -> "DenseLayer":
        w = Tensor(kaiming_uniform(rng, in_dim, out_dim), requires_grad=True)
        b = Tensor(np.zeros(out_dim), requires_grad=True)
        bn = BatchNorm(out_dim) if batchnorm else None
        return cls(w, b, bn, activation)

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = ad.affine(x, self.w, self.b)
        if self.batchnorm is not None:
            h = self.batchnorm.forward(h, training)
        if self.activation == "relu":
            h = ad.relu(h)
        elif self.activation == "exp":
            h = ad.exp(h)
        return h

    def parameters(self) -> list:
        out = [("w", self.w), ("b", self.b)]
        if self.batchnorm is not None:
            out.extend((f"bn.{n}", t) for n, t in self.batchnorm.parameters())
        return out

    def state_items(self) -> list:
        out = [("w", self.w.data), ("b", self.b.data)]
        if self.batchnorm is not None:
            out.extend((f"bn.{n}", a) for n, a in self.batchnorm.state_items())
        return out

    def load_state_items(self, arrays: Sequence[np.ndarray]) -> None:
        arrays = list(arrays)
        self.w.data = np.array(arrays[0], dtype=np.float64)
        self.b.data = np.array(arrays[1], dtype=np.float64)
        if self.batchnorm is not None:
            self.batchnorm.load_state_items(arrays[2:6])

    def n_state_items(self) -> int:
        return 2 + (4 if self.batchnorm is not None else 0)


class MlpNet:
    """A stack of dense blocks with a shared training/eval mode flag."""

    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)
        self.training = True

    @classmethod
    def build(
        cls,
        in_dim: int,
        hidden: Sequence[int],
        out_dim: int,
        *,
        rng: np.random.Generator,
        final_activation: str = "identity",
        hidden_batchnorm: bool = True,
        final_batchnorm: bool = False,
    ) -> "MlpNet":
        dims = [in_dim, *hidden, out_dim]
        layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            layers.append(
                DenseLayer.create(
                    dims[i],
                    dims[i + 1],
                    batchnorm=final_batchnorm if last else hidden_batchnorm,
                    activation=final_activation if last else "relu",
                    rng=rng,
                )
            )
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x) -> Tensor:
        h = ad.as_tensor(x)
        for layer in self.layers:
            h = layer.forward(h, self.training)
        return h

    def train(self) -> "MlpNet":
        self.training = True
        return self

    def eval(self) -> "MlpNet":
        self.training = False
        return self

    def named_parameters(self, prefix: str = "") -> list:
        out = []
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.parameters():
                out.append((f"{prefix}layer{i}.{name}", tensor))
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def state_items(self, prefix: str = "") -> list:
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.state_items():
                out.append((f"{prefix}layer{i}.{name}", arr))
        return out

    def load_state_items(self, arrays: Sequence[np.ndarray]) -> None:
        arrays = list(arrays)
        pos = 0
        for layer in self.layers:
            n = layer.n_state_items()
            layer.load_state_items(arrays[pos : pos + n])
            pos += n
        if pos != len(arrays):
            raise ValueError(f"state arrays mismatch: consumed {pos}, got {len(arrays)}")

    def spec(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "dims": [layer.out_dim for layer in self.layers],
            "batchnorm": [layer.batchnorm is not None for layer in self.layers],
            "activations": [layer.activation for layer in self.layers],
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "MlpNet":
        rng = np.random.default_rng(0)
        layers = []
        in_dim = spec["in_dim"]
        for out_dim, bn, act in zip(spec["dims"], spec["batchnorm"], spec["activations"]):
            layers.append(DenseLayer.create(in_dim, out_dim, batchnorm=bn, activation=act, rng=rng))
            in_dim = out_dim
        return cls(layers)


class Adam:
    """Adam with bias correction and a fixed per-epoch learning-rate decay."""

    def __init__(
        self,
        named_params: Iterable[tuple],
        lr: float,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        epoch_decay: float = 2e-4,
    ):
        self.params = list(named_params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.epoch_decay = epoch_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter {name}")
            m = self._m[i]
            v = self._v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def end_epoch(self) -> None:
        """Apply the constant multiplicative learning-rate decay."""
        self.lr *= 1.0 - self.epoch_decay
