"""Training: the stochastic variational objective and the optimization loops.

One gradient step builds a define-by-run graph over a minibatch: each
source's encoder produces a Gaussian posterior, M reparameterized latent
draws are decoded, and the exact discrete posterior over the 2^K presence
states is formed from the per-state reconstruction energies.  The
objective is the sampled free energy

    elbo = E_q[log p(x | s, z)] + E_q[log p(s) - log q(s)] - sum_k KL_k

averaged over datapoints and draws, where the discrete expectation is
exact and the Gaussian KL against the standard-normal prior is closed
form.  Encoder gradients differentiate all three components, including the
dependence of the discrete posterior on the draws.  Decoder gradients
differentiate the q-weighted L1 reconstruction with the discrete posterior
treated as fixed weights.  The presence priors pi and the noise scale b
are not gradient variables: both have closed-form updates applied once per
epoch from expectations accumulated over the pass.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MixtureDataset
from .inference import EncoderParams, GaussianEncoder, _log_tables, encode_batch, sample_latents
from .kernels import state_l1_residuals
from .model import (
    B_MIN,
    PI_MAX,
    PI_MIN,
    GenerativeParams,
    bernoulli_log_prior,
)
from .nn import Adam, GradientError, MlpNet
from .rng import stream

logger = logging.getLogger(__name__)

__all__ = [
    "DivergenceError",
    "EpochAccumulator",
    "ExpertResult",
    "PretrainConfig",
    "StepValues",
    "TrainConfig",
    "TrainReport",
    "TrainResult",
    "build_step_objective",
    "calibrate_scale",
    "decoder_gradient",
    "default_hidden",
    "elbo",
    "encoder_gradient",
    "gaussian_standard_kl",
    "pretrain_expert",
    "train",
    "update_pi_b",
]


class DivergenceError(RuntimeError):
    """Raised when the objective stops being finite during training."""


def default_hidden(d: int, z: int, blocks: int = 5) -> list:
    """Five trunk widths shrinking linearly with the input dimension."""
    floor = max(z + 2, 8)
    widths = []
    for i in range(blocks):
        w = int(round(d * (700 - 100 * i) / 784.0))
        widths.append(max(w, floor))
    return widths


def gaussian_standard_kl(mean, var):
    """KL(N(mean, diag(var)) || N(0, I)), summed over the last axis.

    Works on tensors (graph-aware) or arrays; returns a tensor whose shape
    is the input shape without its last axis.
    """
    mean = ad.as_tensor(mean)
    var = ad.as_tensor(var)
    inner = var + mean * mean - 1.0 - ad.log(var)
    return inner.sum(axis=-1) * 0.5


@dataclass
class StepValues:
    """Graph handles and detached summaries for one minibatch objective."""

    elbo: Tensor
    recon: Tensor
    disc: Tensor
    kl: Tensor
    dec_loss: Tensor
    q: np.ndarray
    log_q: np.ndarray
    resid: np.ndarray


def build_step_objective(
    x,
    encoders: EncoderParams,
    params: GenerativeParams,
    m: int,
    eps,
) -> StepValues:
    """Assemble the minibatch objective graph.

    x is a (B, D) batch, eps a (B, M, K, Z) noise array replaying the
    reparameterized draws.  Networks run in their currently set modes.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    batch, d = x.shape
    states = params.states()
    log_prior_s = bernoulli_log_prior(states, params.pi)

    z_parts = []
    kl_terms = []
    for idx, (mean, var) in enumerate(encode_batch(x, encoders)):
        z_k, _ = sample_latents(mean, var, m, eps[:, :, idx, :])
        z_parts.append(z_k)
        kl_terms.append(gaussian_standard_kl(mean, var).mean())

    mus = []
    for idx, dec in enumerate(params.decoders):
        flat = z_parts[idx].reshape(batch * m, params.latent_dim)
        mus.append(dec.forward(flat).reshape(batch, m, d))
    mu = ad.stack(mus, axis=2)

    resid = ad.state_l1(x, mu, states)
    log_lik = resid * (-1.0 / params.b) + (-d * np.log(2.0 * params.b))
    a = log_lik + log_prior_s
    log_q = a - ad.logsumexp(a, axis=-1, keepdims=True)
    q = ad.exp(log_q)

    recon = (q * log_lik).sum(axis=-1).mean()
    disc = (q * (ad.as_tensor(log_prior_s) - log_q)).sum(axis=-1).mean()
    kl = kl_terms[0]
    for term in kl_terms[1:]:
        kl = kl + term
    elbo_t = recon + disc - kl

    dec_loss = (q.detach() * resid).sum(axis=-1).mean() * (1.0 / params.b)
    return StepValues(
        elbo=elbo_t,
        recon=recon,
        disc=disc,
        kl=kl,
        dec_loss=dec_loss,
        q=q.data,
        log_q=log_q.data,
        resid=resid.data,
    )


def _check_components(sv: StepValues) -> None:
    for label, tensor in (("reconstruction", sv.recon), ("discrete-entropy", sv.disc), ("KL", sv.kl)):
        if not np.isfinite(tensor.data):
            raise DivergenceError(f"{label} term is not finite")


def elbo(x, encoders: EncoderParams, params: GenerativeParams, m: int, eps_or_rng) -> float:
    """Sampled free energy of a batch under the current networks and modes."""
    eps = _resolve_eps(x, encoders, m, eps_or_rng)
    return build_step_objective(x, encoders, params, m, eps).elbo.item()


def _resolve_eps(x, encoders: EncoderParams, m: int, eps_or_rng) -> np.ndarray:
    if isinstance(eps_or_rng, np.random.Generator):
        n = np.asarray(x).shape[0]
        return eps_or_rng.standard_normal((n, m, encoders.k, encoders.z))
    return np.asarray(eps_or_rng, dtype=np.float64)


def encoder_gradient(
    x, encoders: EncoderParams, params: GenerativeParams, m: int, eps_or_rng
) -> tuple:
    """Ascent gradients of the objective for every encoder parameter.

    Returns (gradients, components): a name -> array dict and the detached
    component values of the objective.
    """
    eps = _resolve_eps(x, encoders, m, eps_or_rng)
    named = encoders.named_parameters()
    for _, p in named:
        p.grad = None
    sv = build_step_objective(x, encoders, params, m, eps)
    _check_components(sv)
    sv.elbo.backward()
    grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in named}
    components = {"recon": sv.recon.item(), "disc": sv.disc.item(), "kl": sv.kl.item()}
    return grads, components


def decoder_gradient(
    x, encoders: EncoderParams, params: GenerativeParams, m: int, eps_or_rng
) -> dict:
    """Ascent gradients of the fixed-weight reconstruction for the decoders.

    The discrete posterior is treated as a constant weight, so this is the
    gradient of -(1/b) sum q |x - mix| with q detached.
    """
    eps = _resolve_eps(x, encoders, m, eps_or_rng)
    named = []
    for idx, dec in enumerate(params.decoders):
        named.extend(dec.named_parameters(f"decoder{idx}."))
    for _, p in named:
        p.grad = None
    sv = build_step_objective(x, encoders, params, m, eps)
    _check_components(sv)
    if not np.isfinite(sv.dec_loss.data):
        raise DivergenceError("reconstruction term is not finite")
    sv.dec_loss.backward()
    return {name: (np.zeros_like(p.data) if p.grad is None else -p.grad) for name, p in named}


class EpochAccumulator:
    """Running posterior expectations feeding the closed-form pi and b updates."""

    def __init__(self, k: int, d: int):
        self.k = k
        self.d = d
        self.sum_presence = np.zeros(k)
        self.sum_residual = 0.0
        self.count = 0

    def add(self, q: np.ndarray, resid: np.ndarray, states: np.ndarray) -> None:
        """Fold in one batch of posterior tables and residuals, both (B, M, S)."""
        self.sum_presence += np.einsum("bms,sk->k", q, states.astype(np.float64))
        self.sum_residual += float((q * resid).sum())
        self.count += q.shape[0] * q.shape[1]

    def merge(self, other: "EpochAccumulator") -> None:
        self.sum_presence += other.sum_presence
        self.sum_residual += other.sum_residual
        self.count += other.count


def update_pi_b(acc: EpochAccumulator) -> tuple:
    """Closed-form updates: presence means and the mean posterior residual.

    pi_k is the average posterior presence of source k; b is the average
    q-weighted L1 residual per observed dimension.  Both are clamped to
    their numerical floors.
    """
    if acc.count == 0:
        raise ValueError("accumulator is empty; fold in at least one batch first")
    pi = np.clip(acc.sum_presence / acc.count, PI_MIN, PI_MAX)
    b = max(acc.sum_residual / (acc.d * acc.count), B_MIN)
    return pi, b


def calibrate_scale(
    dataset: MixtureDataset,
    encoders: EncoderParams,
    params: GenerativeParams,
    m: int,
    rng,
    chunk: int = 128,
) -> float:
    """Closed-form b from posterior residuals under the current modes.

    Epoch updates fit b to residuals produced with minibatch statistics,
    but a saved model decodes with running statistics.  Running this once
    with the networks in eval mode makes the stored scale the optimum of
    the objective the stored model actually computes.
    """
    states = params.states()
    log_prior_s = bernoulli_log_prior(states, params.pi)
    acc = EpochAccumulator(params.k, params.d)
    for start in range(0, dataset.n, chunk):
        xb = dataset.x[start : start + chunk]
        eps = rng.standard_normal((len(xb), m, params.k, params.latent_dim))
        means, variances = [], []
        for mean, var in encode_batch(xb, encoders):
            means.append(mean.data)
            variances.append(var.data)
        mean = np.stack(means, axis=1)
        var = np.stack(variances, axis=1)
        z = mean[:, None, :, :] + np.sqrt(var)[:, None, :, :] * eps
        resid = state_l1_residuals(xb, params.decode_stack(z), states)
        a = resid * (-1.0 / params.b) + log_prior_s[None, None, :]
        log_q, _ = _log_tables(-a)
        acc.add(np.exp(log_q), resid, states)
    _, b = update_pi_b(acc)
    return b


# ---------------------------------------------------------------------------
# Expert pretraining (single-source VAE)


@dataclass
class PretrainConfig:
    """Hyperparameters for single-source expert pretraining."""

    z: int
    hidden: Sequence[int] | None = None
    epochs: int = 300
    batch_size: int = 32
    m: int = 1
    lr: float = 1e-4
    lr_epoch_decay: float = 2e-4
    b_init: float = 1.0
    seed: int = 0

    def resolve_hidden(self, d: int) -> list:
        return list(self.hidden) if self.hidden is not None else default_hidden(d, self.z)


@dataclass
class ExpertResult:
    """A pretrained single-source VAE: its networks, noise scale and history."""

    encoder: GaussianEncoder
    decoder: MlpNet
    b: float
    history: list
    final_l1: float


def pretrain_expert(data: np.ndarray, config: PretrainConfig) -> ExpertResult:
    """Train a single-source VAE on clean exemplars of one source.

    The decoder mirrors the encoder trunk.  The noise scale is updated in
    closed form once per epoch from the accumulated posterior residual.
    """
    data = np.asarray(data, dtype=np.float64)
    n, d = data.shape
    hidden = config.resolve_hidden(d)
    init_rng = stream(config.seed, "pretrain-init")
    encoder = GaussianEncoder.build(d, hidden, config.z, init_rng)
    # Mirror the trunk exactly: hidden reversed, then a linear output layer to d.
    decoder = MlpNet.build(
        config.z, list(reversed(hidden)), d, rng=init_rng,
        final_activation="identity", hidden_batchnorm=True, final_batchnorm=False,
    )
    b = float(config.b_init)
    opt = Adam(
        encoder.named_parameters("encoder.") + decoder.named_parameters("decoder."),
        lr=config.lr,
        epoch_decay=config.lr_epoch_decay,
    )
    shuffle_rng = stream(config.seed, "pretrain-shuffle")
    noise_rng = stream(config.seed, "pretrain-noise")
    history = []
    encoder.train()
    decoder.train()
    for epoch in range(1, config.epochs + 1):
        resid_total = 0.0
        elbo_total = 0.0
        seen = 0
        for idx in _batches(n, config.batch_size, shuffle_rng):
            xb = data[idx]
            eps = noise_rng.standard_normal((len(idx), config.m, config.z))
            mean, var = encoder.forward(xb)
            z_t, _ = sample_latents(mean, var, config.m, eps)
            mu = decoder.forward(z_t.reshape(len(idx) * config.m, config.z))
            mu = mu.reshape(len(idx), config.m, d)
            resid = ad.absolute(mu - xb[:, None, :]).sum(axis=2)
            log_lik = resid * (-1.0 / b) + (-d * np.log(2.0 * b))
            kl = gaussian_standard_kl(mean, var).mean()
            elbo_t = log_lik.mean() - kl
            if not np.isfinite(elbo_t.data):
                raise DivergenceError(f"expert objective diverged at epoch {epoch}")
            loss = -elbo_t
            opt.zero_grad()
            loss.backward()
            opt.step()
            resid_total += float(resid.data.sum())
            elbo_total += elbo_t.item() * len(idx)
            seen += len(idx)
        b = max(resid_total / (d * seen * config.m), B_MIN)
        opt.end_epoch()
        history.append({"epoch": epoch, "elbo": elbo_total / seen, "b": b})

    encoder.eval()
    decoder.eval()
    mean, _ = encoder.forward(data)
    recon = decoder.forward(mean.data)
    final_l1 = float(np.abs(recon.data - data).mean())
    return ExpertResult(encoder=encoder, decoder=decoder, b=b, history=history, final_l1=final_l1)


# ---------------------------------------------------------------------------
# Full training


@dataclass
class TrainConfig:
    """Hyperparameters for training on mixtures."""

    k: int
    d: int
    z: int
    m: int = 100
    batch_size: int = 8
    epochs: int = 100
    lr: float = 2e-4
    lr_epoch_decay: float = 2e-4
    schedule: str = "fixed"
    finetune_epoch: int = 0
    pi_init: Sequence[float] | None = None
    b_init: float = 1.0
    update_pi: bool = True
    update_b: bool = True
    encoder_hidden: Sequence[int] | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")
        if self.batch_size < 2:
            raise ValueError(f"batch size must be at least 2, got {self.batch_size}")
        if self.m < 1:
            raise ValueError(f"m must be at least 1, got {self.m}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.schedule not in ("fixed", "finetune"):
            raise ValueError(f"schedule must be fixed or finetune, got {self.schedule!r}")
        if self.schedule == "finetune" and not 0 <= self.finetune_epoch <= self.epochs:
            raise ValueError(
                f"finetune epoch {self.finetune_epoch} outside 0..{self.epochs}"
            )
        if self.pi_init is not None and len(self.pi_init) != self.k:
            raise ValueError(f"pi_init needs {self.k} entries, got {len(self.pi_init)}")
        if self.b_init <= 0:
            raise ValueError(f"b_init must be positive, got {self.b_init}")

    def resolve_hidden(self) -> list:
        if self.encoder_hidden is not None:
            return list(self.encoder_hidden)
        return default_hidden(self.d, self.z)


@dataclass
class TrainReport:
    """Per-epoch training trajectory plus wall-clock accounting."""

    epochs: list = field(default_factory=list)
    total_seconds: float = 0.0
    calibrated_b: float | None = None

    def add(self, **row) -> None:
        self.epochs.append(row)

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}

    @property
    def elbo_trace(self) -> np.ndarray:
        return np.array([row["elbo"] for row in self.epochs])

    def to_json(self) -> str:
        payload = {"epochs": self.epochs, "total_seconds": self.total_seconds}
        if self.calibrated_b is not None:
            payload["calibrated_b"] = self.calibrated_b
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        raw = json.loads(text)
        return cls(
            epochs=raw["epochs"],
            total_seconds=raw["total_seconds"],
            calibrated_b=raw.get("calibrated_b"),
        )

    def to_text(self) -> str:
        lines = ["epoch  elbo          b         pi"]
        for row in self.epochs:
            pis = ",".join(f"{p:.4f}" for p in row["pi"])
            lines.append(f"{row['epoch']:>5}  {row['elbo']:>12.5f}  {row['b']:.6f}  {pis}")
        if self.calibrated_b is not None:
            lines.append(f"calibrated b: {self.calibrated_b:.6f}")
        lines.append(f"total seconds: {self.total_seconds:.1f}")
        return "\n".join(lines)


@dataclass
class TrainResult:
    encoders: EncoderParams
    params: GenerativeParams
    report: TrainReport


def _batches(n: int, batch_size: int, rng) -> list:
    """Shuffled index batches; a trailing single row is folded into its neighbor."""
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def train(
    config: TrainConfig,
    dataset: MixtureDataset,
    decoders: Sequence[MlpNet],
    encoders: EncoderParams | None = None,
    checkpoint_path=None,
    checkpoint_meta: dict | None = None,
    checkpoint_every: int = 1,
) -> TrainResult:
    """Run the full training loop on a mixture dataset.

    Decoders (normally pretrained experts) start fixed: excluded from
    gradients, batchnorm in eval mode.  Under the finetune schedule they
    are released after `finetune_epoch` epochs and from then on receive
    Adam updates from the fixed-weight reconstruction objective.  pi and b
    are updated in closed form after every epoch unless pinned.
    """
    config.validate()
    if dataset.d != config.d:
        raise ValueError(f"dataset dimension {dataset.d} does not match config d={config.d}")
    if len(decoders) != config.k:
        raise ValueError(f"got {len(decoders)} decoders for k={config.k}")
    for idx, dec in enumerate(decoders):
        if dec.in_dim != config.z or dec.out_dim != config.d:
            raise ValueError(
                f"decoder {idx} maps {dec.in_dim} -> {dec.out_dim}, "
                f"expected {config.z} -> {config.d}"
            )

    if encoders is None:
        init_rng = stream(config.seed, "train-init")
        encoders = EncoderParams.build(
            config.k, config.d, config.resolve_hidden(), config.z, init_rng
        )
    pi0 = np.full(config.k, 0.5) if config.pi_init is None else np.asarray(config.pi_init)
    params = GenerativeParams(
        pi=pi0, decoders=list(decoders), b=config.b_init, latent_dim=config.z
    )
    states = params.states()

    encoders.train()
    for dec in params.decoders:
        dec.set_requires_grad(False)
        dec.eval()
    decoders_free = False

    enc_opt = Adam(
        encoders.named_parameters(), lr=config.lr, epoch_decay=config.lr_epoch_decay
    )
    dec_opt: Adam | None = None

    shuffle_rng = stream(config.seed, "train-shuffle")
    noise_rng = stream(config.seed, "train-noise")
    report = TrainReport()
    started = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        if (
            config.schedule == "finetune"
            and not decoders_free
            and epoch > config.finetune_epoch
        ):
            decoders_free = True
            dec_named = []
            for idx, dec in enumerate(params.decoders):
                dec.set_requires_grad(True)
                dec.train()
                dec_named.extend(dec.named_parameters(f"decoder{idx}."))
            dec_opt = Adam(dec_named, lr=config.lr, epoch_decay=config.lr_epoch_decay)
            logger.info("epoch %d: decoders released for finetuning", epoch)

        acc = EpochAccumulator(config.k, config.d)
        elbo_total = 0.0
        entropy_total = 0.0
        seen = 0
        epoch_started = time.perf_counter()
        for idx in _batches(dataset.n, config.batch_size, shuffle_rng):
            xb = dataset.x[idx]
            eps = noise_rng.standard_normal((len(idx), config.m, config.k, config.z))
            sv = build_step_objective(xb, encoders, params, config.m, eps)
            _check_components(sv)
            enc_opt.zero_grad()
            if dec_opt is not None:
                dec_opt.zero_grad()
            # One backward serves both optimizers: the discrete expectation
            # collapses so that d(elbo)/d(residual) is exactly -q/b with q
            # acting as a fixed weight, which is the decoder objective.
            sv.elbo.backward()
            _negate_grads(enc_opt)
            enc_opt.step()
            if dec_opt is not None:
                _negate_grads(dec_opt)
                dec_opt.step()
            acc.add(sv.q, sv.resid, states)
            elbo_total += sv.elbo.item() * len(idx)
            entropy_total += float(-(sv.q * sv.log_q).sum() / config.m)
            seen += len(idx)

        if config.update_pi or config.update_b:
            pi_new, b_new = update_pi_b(acc)
            if config.update_pi:
                params.set_pi(pi_new)
            if config.update_b:
                params.set_b(b_new)
        enc_opt.end_epoch()
        if dec_opt is not None:
            dec_opt.end_epoch()

        epoch_elbo = elbo_total / seen
        if not np.isfinite(epoch_elbo):
            raise DivergenceError(f"objective diverged at epoch {epoch}")
        report.add(
            epoch=epoch,
            elbo=epoch_elbo,
            pi=[float(p) for p in params.pi],
            b=float(params.b),
            state_entropy=entropy_total / seen,
            lr=enc_opt.lr,
            seconds=time.perf_counter() - epoch_started,
        )
        logger.info(
            "epoch %d/%d elbo %.4f b %.4f pi %s",
            epoch,
            config.epochs,
            epoch_elbo,
            params.b,
            np.array2string(params.pi, precision=3),
        )
        if checkpoint_path is not None and (
            epoch % max(checkpoint_every, 1) == 0 or epoch == config.epochs
        ):
            from .checkpoint import save_model

            save_model(
                checkpoint_path,
                encoders,
                params,
                meta={**(checkpoint_meta or {}), "epoch": epoch, "seed": config.seed},
            )

    encoders.eval()
    params.eval()
    if config.update_b:
        calib_rng = stream(config.seed, "train-calibrate")
        params.set_b(calibrate_scale(dataset, encoders, params, config.m, calib_rng))
        report.calibrated_b = float(params.b)
        logger.info("calibrated b %.4f", params.b)
        if checkpoint_path is not None:
            from .checkpoint import save_model

            save_model(
                checkpoint_path,
                encoders,
                params,
                meta={
                    **(checkpoint_meta or {}),
                    "epoch": config.epochs,
                    "seed": config.seed,
                },
            )
    report.total_seconds = time.perf_counter() - started
    return TrainResult(encoders=encoders, params=params, report=report)


def _negate_grads(opt: Adam) -> None:
    """Flip ascent gradients into descent form for the minimizing optimizer."""
    for _, p in opt.params:
        if p.grad is not None:
            np.negative(p.grad, out=p.grad)
