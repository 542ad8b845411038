"""Evaluation metrics and entropy diagnostics.

The central routine makes one eval-mode pass over a dataset and collects
everything downstream consumers need from the same latent draws: the
sampled free energy and its components, per-draw discrete posterior
entropies, marginal state tables, and the encoder entropy terms.  On top
of that sit case accuracy (exact presence-state match), reconstruction
quality (PSNR / SSIM of per-source reconstructions against the clean
components), and the entropy-sum diagnostic the free energy converges to:

    H_sum = mean_n sum_k H[q(z_k; x)] - H[p(z)] - D (1 + ln 2b)
            - H[p(s)] + mean_n E[H[q(s; z, x)]]

whose gap to the free energy closes as training reaches a stationary
point of (pi, b) and the encoder.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import MixtureDataset
from .inference import EncoderParams, _log_tables
from .kernels import state_l1_residuals
from .model import GenerativeParams, bernoulli_log_prior

LOG_2PI_E = float(np.log(2.0 * np.pi) + 1.0)
PSNR_CAP = 99.0

__all__ = [
    "EvalReport",
    "PSNR_CAP",
    "accuracy_from_tables",
    "aggregate_reports",
    "case_accuracy",
    "dataset_posterior_summary",
    "entropy_sum",
    "evaluate_model",
    "posterior_entropy",
    "psnr",
    "ssim",
]


def posterior_entropy(q) -> np.ndarray:
    """Shannon entropy in nats of posterior tables along the last axis."""
    q = np.asarray(q, dtype=np.float64)
    terms = np.where(q > 0.0, q * np.log(np.where(q > 0.0, q, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def accuracy_from_tables(tables: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of points whose argmax state matches the true presence bits.

    Ties resolve toward the lower state index (numpy argmax order).
    """
    tables = np.asarray(tables, dtype=np.float64)
    truth = np.asarray(truth)
    k = truth.shape[1]
    true_idx = truth.astype(np.uint64) @ (np.uint64(1) << np.arange(k, dtype=np.uint64))
    return float((tables.argmax(axis=1) == true_idx.astype(np.int64)).mean())


def psnr(ref, est, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for exact matches."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    one_d = np.exp(-0.5 * (coords / sigma) ** 2)
    kern = np.outer(one_d, one_d)
    return kern / kern.sum()


def ssim(ref, est, window: int = 7, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean structural similarity over valid Gaussian-weighted windows."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.ndim != 2 or ref.shape != est.shape:
        raise ValueError(f"ssim expects matching 2-d images, got {ref.shape} and {est.shape}")
    if window > min(ref.shape):
        raise ValueError(f"window {window} exceeds image extent {ref.shape}")
    kern = _gaussian_window(window, sigma)
    view = np.lib.stride_tricks.sliding_window_view

    def local_mean(img):
        return np.einsum("ijkl,kl->ij", view(img, (window, window)), kern)

    mu1 = local_mean(ref)
    mu2 = local_mean(est)
    var1 = np.maximum(local_mean(ref * ref) - mu1 * mu1, 0.0)
    var2 = np.maximum(local_mean(est * est) - mu2 * mu2, 0.0)
    cov = local_mean(ref * est) - mu1 * mu2
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2)
    return float((num / den).mean())


def dataset_posterior_summary(
    X,
    encoders: EncoderParams,
    params: GenerativeParams,
    m: int,
    rng,
    chunk: int = 128,
) -> dict:
    """One eval-mode pass collecting free-energy terms and posterior tables.

    Returns per-point means of the objective components together with the
    marginal state tables (N, S), all computed from the same latent draws.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    encoders.eval()
    params.eval()
    states = params.states()
    log_prior_s = bernoulli_log_prior(states, params.pi)
    eps = rng.standard_normal((n, m, encoders.k, encoders.z))

    tables = np.empty((n, states.shape[0]))
    sums = {key: 0.0 for key in ("recon", "disc", "kl", "enc_entropy", "cond_entropy")}
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        xb = X[start:stop]
        means, variances = [], []
        for enc in encoders:
            mean, var = enc.forward(xb)
            means.append(mean.data)
            variances.append(var.data)
        mean = np.stack(means, axis=1)
        var = np.stack(variances, axis=1)
        z = mean[:, None, :, :] + np.sqrt(var)[:, None, :, :] * eps[start:stop]
        mus = params.decode_stack(z)
        resid = state_l1_residuals(xb, mus, states)
        log_lik = -d * np.log(2.0 * params.b) - resid / params.b
        a = log_lik + log_prior_s[None, None, :]
        log_q, _ = _log_tables(-a)
        q = np.exp(log_q)
        tables[start:stop] = q.mean(axis=1)

        sums["recon"] += float((q * log_lik).sum(axis=-1).mean(axis=1).sum())
        sums["disc"] += float(
            (q * (log_prior_s[None, None, :] - log_q)).sum(axis=-1).mean(axis=1).sum()
        )
        sums["kl"] += float(
            (0.5 * (var + mean**2 - 1.0 - np.log(var)).sum(axis=-1)).sum()
        )
        sums["enc_entropy"] += float((0.5 * (LOG_2PI_E + np.log(var)).sum(axis=(1, 2))).sum())
        sums["cond_entropy"] += float(posterior_entropy(q).mean(axis=1).sum())

    out = {key: val / n for key, val in sums.items()}
    out["elbo"] = out["recon"] + out["disc"] - out["kl"]
    out["tables"] = tables
    out["marginal_entropy"] = float(posterior_entropy(tables).mean())
    return out


def entropy_sum(params: GenerativeParams, summary: dict) -> tuple:
    """The entropy-sum diagnostic and its individual terms."""
    pi = params.pi
    bern = float(-(pi * np.log(pi) + (1.0 - pi) * np.log1p(-pi)).sum())
    prior_gauss = 0.5 * params.k * params.latent_dim * LOG_2PI_E
    laplace = params.d * (1.0 + np.log(2.0 * params.b))
    terms = {
        "encoder_gaussian": summary["enc_entropy"],
        "prior_gaussian": -prior_gauss,
        "laplace": -laplace,
        "bernoulli_prior": -bern,
        "discrete_conditional": summary["cond_entropy"],
    }
    return float(sum(terms.values())), terms


def case_accuracy(
    dataset: MixtureDataset,
    encoders: EncoderParams,
    params: GenerativeParams,
    m: int,
    rng,
    chunk: int = 128,
) -> float:
    """Exact-state accuracy of the marginal posterior argmax against truth."""
    if dataset.truth is None:
        raise ValueError("case accuracy needs a truth-bearing dataset")
    summary = dataset_posterior_summary(dataset.x, encoders, params, m, rng, chunk)
    return accuracy_from_tables(summary["tables"], dataset.truth)


@dataclass
class EvalReport:
    """Evaluation metrics for one model/dataset pair."""

    n: int
    k: int
    d: int
    m: int
    values: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    entropy_terms: dict = field(default_factory=dict)
    psnr_model: list = field(default_factory=list)
    psnr_mixture: list = field(default_factory=list)
    ssim_model: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "n": self.n,
            "k": self.k,
            "d": self.d,
            "m": self.m,
            "values": self.values,
            "std": self.std,
            "entropy_terms": self.entropy_terms,
            "psnr_model": self.psnr_model,
            "psnr_mixture": self.psnr_mixture,
            "ssim_model": self.ssim_model,
            "meta": self.meta,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(**raw)

    def to_text(self) -> str:
        lines = [f"n = {self.n}", f"k = {self.k}", f"d = {self.d}", f"m = {self.m}"]
        for key in sorted(self.values):
            line = f"{key} = {self.values[key]:.6f}"
            if key in self.std:
                line += f" +- {self.std[key]:.6f}"
            lines.append(line)
        for key in sorted(self.entropy_terms):
            lines.append(f"entropy_term.{key} = {self.entropy_terms[key]:.6f}")
        for idx, val in enumerate(self.psnr_model):
            lines.append(f"psnr_model.{idx} = {val:.4f}")
        for idx, val in enumerate(self.psnr_mixture):
            lines.append(f"psnr_mixture.{idx} = {val:.4f}")
        for idx, val in enumerate(self.ssim_model):
            lines.append(f"ssim_model.{idx} = {val:.4f}")
        for key in sorted(self.meta):
            lines.append(f"meta.{key} = {self.meta[key]}")
        return "\n".join(lines) + "\n"


def evaluate_model(
    dataset: MixtureDataset,
    encoders: EncoderParams,
    params: GenerativeParams,
    m: int,
    rng,
    *,
    overlap_only: bool = False,
    ssim_window: int = 7,
    chunk: int = 128,
    meta: dict | None = None,
) -> EvalReport:
    """Full evaluation of a model against a truth-bearing dataset.

    Per-source reconstructions decode the posterior mean and switch each
    source by the MAP state's presence bit.  PSNR and SSIM compare them
    against the clean components on points where the source is truly
    active; with overlap_only, only points with at least two active
    sources count.  The mixture baselines score the raw observation
    against the same clean components.
    """
    if dataset.truth is None:
        raise ValueError("evaluation needs a truth-bearing dataset")
    started = time.perf_counter()
    summary = dataset_posterior_summary(dataset.x, encoders, params, m, rng, chunk)
    tables = summary["tables"]
    total, terms = entropy_sum(params, summary)

    report = EvalReport(n=dataset.n, k=params.k, d=params.d, m=m, meta=dict(meta or {}))
    report.values["accuracy"] = accuracy_from_tables(tables, dataset.truth)
    report.values["elbo"] = summary["elbo"]
    report.values["entropy_sum"] = total
    report.values["entropy_gap_ratio"] = (
        abs(summary["elbo"] - total) / abs(total) if total != 0.0 else float("inf")
    )
    report.values["marginal_entropy"] = summary["marginal_entropy"]
    report.values["conditional_entropy"] = summary["cond_entropy"]
    report.entropy_terms = terms

    if dataset.components is not None:
        states = params.states()
        map_bits = states[tables.argmax(axis=1)]
        recon = posterior_mean_reconstructions(dataset.x, encoders, params, chunk)
        recon = recon * map_bits[:, :, None]
        active = dataset.truth.astype(bool)
        if overlap_only:
            active = active & (dataset.truth.sum(axis=1, keepdims=True) >= 2)
        shape = dataset.meta.get("shape")
        for src in range(params.k):
            rows = np.flatnonzero(active[:, src])
            if rows.size == 0:
                report.psnr_model.append(float("nan"))
                report.psnr_mixture.append(float("nan"))
                report.ssim_model.append(float("nan"))
                continue
            clean = dataset.components[rows, src]
            report.psnr_model.append(
                float(np.mean([psnr(clean[i], recon[rows[i], src]) for i in range(rows.size)]))
            )
            report.psnr_mixture.append(
                float(np.mean([psnr(clean[i], dataset.x[rows[i]]) for i in range(rows.size)]))
            )
            if shape is not None and min(shape) >= ssim_window:
                vals = [
                    ssim(
                        clean[i].reshape(shape),
                        recon[rows[i], src].reshape(shape),
                        window=ssim_window,
                    )
                    for i in range(rows.size)
                ]
                report.ssim_model.append(float(np.mean(vals)))
            else:
                report.ssim_model.append(float("nan"))
        model_vals = np.array(report.psnr_model)
        mix_vals = np.array(report.psnr_mixture)
        good = np.isfinite(model_vals) & np.isfinite(mix_vals)
        if good.any():
            report.values["psnr_margin"] = float((model_vals[good] - mix_vals[good]).mean())

    report.values["runtime_seconds"] = time.perf_counter() - started
    return report


def posterior_mean_reconstructions(
    X: np.ndarray, encoders: EncoderParams, params: GenerativeParams, chunk: int
) -> np.ndarray:
    """Decode each source's posterior mean: (N, K, D), eval mode."""
    n = X.shape[0]
    out = np.empty((n, params.k, params.d))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        xb = X[start:stop]
        means = []
        for enc in encoders:
            mean, _ = enc.forward(xb)
            means.append(mean.data)
        z = np.stack(means, axis=1)[:, None, :, :]
        out[start:stop] = params.decode_stack(z)[:, 0]
    return out


def aggregate_reports(reports: list) -> EvalReport:
    """Mean and population standard deviation across repeated evaluations."""
    if not reports:
        raise ValueError("need at least one report to aggregate")
    base = reports[0]
    if len(reports) == 1:
        return base
    out = EvalReport(n=base.n, k=base.k, d=base.d, m=base.m, meta=dict(base.meta))
    keys = set(base.values)
    for rep in reports[1:]:
        keys &= set(rep.values)
    for key in sorted(keys):
        vals = np.array([rep.values[key] for rep in reports])
        out.values[key] = float(vals.mean())
        out.std[key] = float(vals.std())
    for key in base.entropy_terms:
        vals = np.array([rep.entropy_terms[key] for rep in reports])
        out.entropy_terms[key] = float(vals.mean())
    for attr in ("psnr_model", "psnr_mixture", "ssim_model"):
        stacks = [getattr(rep, attr) for rep in reports]
        if all(len(s) == len(stacks[0]) for s in stacks) and stacks[0]:
            setattr(out, attr, [float(v) for v in np.nanmean(np.array(stacks), axis=0)])
    out.meta["runs"] = len(reports)
    return out
