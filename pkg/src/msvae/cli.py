"""Command-line pipeline: generate, pretrain, train, infer, eval.

Each command reads an optional ``[section] key = value`` config file plus
per-key flag overrides, and writes its artifacts into an output directory.
The sha256-derived config hash (file content plus root seed) is embedded
into every artifact; ``eval`` refuses to mix artifacts whose hashes
disagree unless ``--force`` is given.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_expert, load_model, save_expert, save_model
from .config import COMMAND_SCHEMAS, ConfigError, config_hash, load_config, resolve
from .data import (
    DataError,
    MixtureDataset,
    compose_mixtures,
    empirical_state_frequencies,
    load_dataset,
    load_idx,
    load_pool,
    make_ridge_pool,
    save_dataset,
    save_pool,
    split_pool,
    subsample_labels,
)
from .inference import predict_states, source_presence
from .metrics import (
    EvalReport,
    aggregate_reports,
    evaluate_model,
    posterior_mean_reconstructions,
)
from .nn import GradientError
from .rng import stream
from .training import (
    DivergenceError,
    PretrainConfig,
    TrainConfig,
    pretrain_expert,
    train,
)

logger = logging.getLogger(__name__)

_COMMAND_HELP = {
    "generate": "synthesize a source pool and mixture datasets",
    "pretrain": "train one single-source expert per pool source",
    "train": "train presence encoders on mixtures over fixed experts",
    "infer": "predict per-point source states with a trained model",
    "eval": "score a model or predictions against a labeled dataset",
}

_KEY_HELP = {
    "k": "number of sources",
    "side": "grid side length of the synthetic patterns",
    "n_train": "number of training mixtures",
    "n_test": "number of held-out mixtures",
    "pi": "comma-separated presence probabilities (default 0.5 each)",
    "b": "Laplace noise scale of the generated mixtures",
    "family": "'ridges' for synthetic patterns, 'idx' for image/label files",
    "pool_size": "exemplars per source in the synthetic pool",
    "test_fraction": "fraction of pool exemplars held out for the test set",
    "images": "idx image file (family = idx)",
    "labels": "idx label file (family = idx)",
    "labels_subset": "comma-separated label values to keep (family = idx)",
    "pool": "source pool file written by generate",
    "z": "latent dimensions per source",
    "hidden": "comma-separated hidden widths (default scales with d)",
    "epochs": "training epochs",
    "batch": "minibatch size",
    "lr": "Adam learning rate",
    "lr_decay": "per-epoch multiplicative learning-rate decay",
    "fraction": "fraction of pool exemplars used per source",
    "m": "latent samples per data point",
    "b_init": "initial Laplace noise scale",
    "data": "mixture dataset file",
    "experts": "directory of expert checkpoints (or one file)",
    "schedule": "'fixed' or 'finetune@N' to release decoders after epoch N",
    "pi_init": "initial presence probabilities (default 0.5 each)",
    "checkpoint_every": "epochs between checkpoint rewrites",
    "model": "model checkpoint file",
    "chunk": "points per inference chunk",
    "reconstructions": "also write per-source reconstruction files",
    "predictions": "predictions.jsonl written by infer",
    "runs": "independent evaluation repetitions to aggregate",
    "overlap_only": "score reconstructions only where sources overlap",
    "ssim_window": "window size for the structural similarity score",
}

# Input-path config keys checked for existence before a command runs.
_INPUT_PATH_KEYS = {"images", "labels", "pool", "data", "experts", "model", "predictions"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msvae",
        description="Disentangle superimposed sources with per-source VAEs "
        "and exact enumeration over presence states.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in COMMAND_SCHEMAS.items():
        p = sub.add_parser(command, help=_COMMAND_HELP[command])
        p.add_argument("--config", default=None, metavar="FILE", help="config file with a [%s] section" % command)
        p.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
        p.add_argument("--out", default=None, metavar="DIR", help="output directory (default runs/%s)" % command)
        p.add_argument(
            "--threads",
            type=int,
            default=None,
            help="cap BLAS threads via environment variables (best effort)",
        )
        p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
        for key, (kind, _default) in schema.items():
            flag = "--" + key.replace("_", "-")
            if kind == "bool":
                p.add_argument(flag, dest=key, action="store_const", const="true",
                               default=None, help=_KEY_HELP[key])
                p.add_argument("--no-" + key.replace("_", "-"), dest=key,
                               action="store_const", const="false",
                               help=argparse.SUPPRESS)
            else:
                p.add_argument(flag, dest=key, default=None, metavar=kind.upper(),
                               help=_KEY_HELP[key])
        if command == "eval":
            p.add_argument("--force", action="store_true",
                           help="evaluate even when artifact config hashes disagree")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.threads is not None:
            _limit_threads(args.threads)
        return _dispatch(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return 2
    except ValueError as exc:
        logger.error("invalid value: %s", exc)
        return 2
    except DataError as exc:
        logger.error("data error: %s", exc)
        return 3
    except (DivergenceError, GradientError) as exc:
        logger.error("numerical failure: %s", exc)
        return 4


def _dispatch(args) -> int:
    file_sections = load_config(args.config) if args.config else {}
    chash = config_hash(file_sections, args.seed)
    schema = COMMAND_SCHEMAS[args.command]
    overrides = {
        key: getattr(args, key)
        for key in schema
        if getattr(args, key, None) is not None
    }
    cfg = resolve(args.command, file_sections, overrides)
    _check_input_paths(args.command, cfg)
    out = Path(args.out) if args.out else Path("runs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    handler = _HANDLERS[args.command]
    if args.command == "eval":
        return handler(cfg, out, args.seed, chash, args.force)
    return handler(cfg, out, args.seed, chash)


def _check_input_paths(command: str, cfg: dict) -> None:
    """Fail fast when a referenced input file or directory is missing."""
    schema = COMMAND_SCHEMAS[command]
    for key, (kind, _default) in schema.items():
        if kind != "path" or key not in _INPUT_PATH_KEYS:
            continue
        value = cfg.get(key)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"{command}.{key}: path does not exist: {value}")


def _limit_threads(n: int) -> None:
    if n < 1:
        raise ConfigError(f"thread cap must be positive, got {n}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _state_label(bits) -> str:
    return "".join(str(int(v)) for v in bits)


def cmd_generate(cfg: dict, out: Path, seed: int, chash: str) -> int:
    if cfg["family"] == "ridges":
        pool = make_ridge_pool(cfg["k"], cfg["side"], cfg["pool_size"], seed)
    elif cfg["family"] == "idx":
        if cfg["images"] is None or cfg["labels"] is None:
            raise ConfigError("family = idx needs both images= and labels=")
        subset = cfg["labels_subset"]
        pool = load_idx(cfg["images"], cfg["labels"], subset)
        if pool.k != cfg["k"]:
            logger.info("using k=%d from the pool labels", pool.k)
    else:
        raise ConfigError(f"unknown family {cfg['family']!r}; expected ridges or idx")
    k = pool.k

    pi = cfg["pi"] if cfg["pi"] is not None else [0.5] * k
    if len(pi) != k:
        raise ConfigError(f"pi needs {k} entries, got {len(pi)}")
    if not 0.0 < cfg["test_fraction"] < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {cfg['test_fraction']}")

    pool_train, pool_test = split_pool(pool, 1.0 - cfg["test_fraction"], seed)
    for part in (pool_train, pool_test):
        part.meta.update({"config_hash": chash, "root_seed": int(seed)})
    child = stream(seed, "generate-datasets").integers(0, 2**31 - 1, size=2)
    ds_train = compose_mixtures(
        pool_train, pi, cfg["b"], cfg["n_train"], int(child[0]),
        meta={"config_hash": chash, "root_seed": int(seed), "role": "train"},
    )
    ds_test = compose_mixtures(
        pool_test, pi, cfg["b"], cfg["n_test"], int(child[1]),
        meta={"config_hash": chash, "root_seed": int(seed), "role": "test"},
    )

    save_pool(pool_train, out / "pool_train.msmx")
    save_pool(pool_test, out / "pool_test.msmx")
    save_dataset(ds_train, out / "train.msmx")
    save_dataset(ds_test, out / "test.msmx")

    print(f"pool: {k} sources, {pool.d} dims, "
          f"{pool_train.counts} train / {pool_test.counts} test exemplars")
    print(f"train: {ds_train.n} mixtures   test: {ds_test.n} mixtures   "
          f"b={cfg['b']}   hash={chash}")
    if ds_train.n:
        freqs = empirical_state_frequencies(ds_train.truth)
        states = np.arange(freqs.size)
        for idx in states:
            bits = [(idx >> j) & 1 for j in range(k)]
            print(f"  state {_state_label(bits)}  freq {freqs[idx]:.4f}")
    return 0


def cmd_pretrain(cfg: dict, out: Path, seed: int, chash: str) -> int:
    pool = load_pool(cfg["pool"])
    if not 0.0 < cfg["fraction"] <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {cfg['fraction']}")
    if cfg["fraction"] < 1.0:
        pool = subsample_labels(pool, cfg["fraction"], seed)
        logger.info("subsampled pool to %s exemplars per source", pool.counts)
    for src in range(pool.k):
        src_seed = int(stream(seed, "pretrain-seed", src).integers(0, 2**31 - 1))
        config = PretrainConfig(
            z=cfg["z"],
            hidden=cfg["hidden"],
            epochs=cfg["epochs"],
            batch_size=cfg["batch"],
            m=cfg["m"],
            lr=cfg["lr"],
            lr_epoch_decay=cfg["lr_decay"],
            b_init=cfg["b_init"],
            seed=src_seed,
        )
        logger.info("pretraining expert %d/%d on %d exemplars",
                    src + 1, pool.k, pool.exemplars[src].shape[0])
        result = pretrain_expert(pool.exemplars[src], config)
        path = out / f"expert_{src}.msvae"
        save_expert(
            path,
            result.encoder,
            result.decoder,
            result.b,
            meta={
                "source": int(pool.source_labels[src]),
                "config_hash": chash,
                "root_seed": int(seed),
                "final_l1": result.final_l1,
                "fraction": cfg["fraction"],
            },
        )
        print(f"expert {src}: b={result.b:.5f}  mean |residual|={result.final_l1:.5f}  -> {path}")
    return 0


def _load_experts(path) -> list:
    path = Path(path)
    if path.is_file():
        files = [path]
    else:
        files = sorted(
            path.glob("expert_*.msvae"), key=lambda p: int(p.stem.split("_")[-1])
        )
        if not files:
            raise DataError(f"no expert_*.msvae checkpoints under {path}")
    return [load_expert(f) for f in files]


def _parse_schedule(text: str) -> tuple:
    if text == "fixed":
        return "fixed", 0
    if text.startswith("finetune@"):
        try:
            return "finetune", int(text.split("@", 1)[1])
        except ValueError:
            pass
    raise ConfigError(f"schedule must be 'fixed' or 'finetune@N', got {text!r}")


def cmd_train(cfg: dict, out: Path, seed: int, chash: str) -> int:
    dataset = load_dataset(cfg["data"])
    experts = _load_experts(cfg["experts"])
    decoders = [dec for _enc, dec, _b, _meta in experts]
    k = len(decoders)
    z = decoders[0].in_dim
    for idx, dec in enumerate(decoders):
        if dec.in_dim != z or dec.out_dim != dataset.d:
            raise DataError(
                f"expert {idx} maps {dec.in_dim} -> {dec.out_dim}, "
                f"expected {z} -> {dataset.d}"
            )
    if dataset.truth is not None and dataset.truth.shape[1] != k:
        raise DataError(
            f"dataset encodes {dataset.truth.shape[1]} sources but {k} experts were given"
        )

    schedule, finetune_epoch = _parse_schedule(cfg["schedule"])
    config = TrainConfig(
        k=k,
        d=dataset.d,
        z=z,
        m=cfg["m"],
        batch_size=cfg["batch"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        lr_epoch_decay=cfg["lr_decay"],
        schedule=schedule,
        finetune_epoch=finetune_epoch,
        pi_init=cfg["pi_init"],
        b_init=cfg["b_init"],
        encoder_hidden=cfg["hidden"],
        seed=seed,
    )
    result = train(
        config,
        dataset,
        decoders,
        checkpoint_path=out / "last.msvae",
        checkpoint_meta={"config_hash": chash},
        checkpoint_every=cfg["checkpoint_every"],
    )
    save_model(
        out / "model.msvae",
        result.encoders,
        result.params,
        meta={
            "config_hash": chash,
            "seed": int(seed),
            "schedule": cfg["schedule"],
            "epochs": cfg["epochs"],
            "m": cfg["m"],
        },
    )
    (out / "report.json").write_text(result.report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(result.report.to_text(), encoding="utf-8")
    final = result.report.final
    print(f"trained {config.epochs} epochs in {result.report.total_seconds:.1f}s  "
          f"elbo={final['elbo']:.4f}  b={result.params.b:.5f}  "
          f"pi={np.array2string(np.asarray(final['pi']), precision=3)}")
    print(f"model -> {out / 'model.msvae'}")
    return 0


def cmd_infer(cfg: dict, out: Path, seed: int, chash: str) -> int:
    encoders, params, model_meta = load_model(cfg["model"])
    dataset = load_dataset(cfg["data"])
    if dataset.d != params.d:
        raise DataError(f"dataset dimension {dataset.d} does not match model d={params.d}")

    started = time.perf_counter()
    rng = stream(seed, "infer")
    tables = predict_states(
        dataset.x, encoders, params, cfg["m"], rng, chunk=cfg["chunk"]
    )
    states = params.states()
    map_bits = states[tables.argmax(axis=1)]
    presence = np.stack(
        [source_presence(tables, src) for src in range(params.k)], axis=1
    )
    runtime = time.perf_counter() - started

    include_q = params.k <= 10
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for i in range(dataset.n):
            row = {
                "index": i,
                "state": int(tables[i].argmax()),
                "bits": [int(v) for v in map_bits[i]],
                "presence": [round(float(v), 6) for v in presence[i]],
            }
            if include_q:
                row["posterior"] = [round(float(v), 6) for v in tables[i]]
            fh.write(json.dumps(row) + "\n")
    _write_json(
        out / "run_meta.json",
        {
            "config_hash": chash,
            "model_config_hash": model_meta.get("config_hash"),
            "seed": int(seed),
            "m": cfg["m"],
            "chunk": cfg["chunk"],
            "n": dataset.n,
            "k": params.k,
            "d": params.d,
            "runtime_seconds": runtime,
        },
    )

    if cfg["reconstructions"]:
        recon = posterior_mean_reconstructions(dataset.x, encoders, params, cfg["chunk"])
        recon = recon * map_bits[:, :, None]
        for src in range(params.k):
            part = MixtureDataset(
                x=recon[:, src],
                truth=None,
                components=None,
                noise=None,
                meta={"config_hash": chash, "source": src, "kind": "reconstruction"},
            )
            save_dataset(part, out / f"recon_source_{src}.msmx")

    counts = np.bincount(tables.argmax(axis=1), minlength=tables.shape[1])
    print(f"inferred {dataset.n} points in {runtime:.1f}s  -> {out / 'predictions.jsonl'}")
    for idx in np.flatnonzero(counts):
        bits = [(idx >> j) & 1 for j in range(params.k)]
        print(f"  state {_state_label(bits)}  count {int(counts[idx])}")
    return 0


def _load_predictions(path) -> tuple:
    path = Path(path)
    bits = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                bits.append([int(v) for v in row["bits"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed prediction line") from None
    meta = {}
    meta_path = path.parent / "run_meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return np.asarray(bits, dtype=np.uint8), meta


def _check_hashes(hashes: dict, force: bool) -> None:
    if len(set(hashes.values())) > 1:
        detail = ", ".join(f"{name}={val}" for name, val in sorted(hashes.items()))
        if force:
            logger.warning("config hashes disagree (%s); continuing under --force", detail)
        else:
            raise ConfigError(
                f"config hashes disagree: {detail}; pass --force to evaluate anyway"
            )


def cmd_eval(cfg: dict, out: Path, seed: int, chash: str, force: bool) -> int:
    if cfg["model"] is None and cfg["predictions"] is None:
        raise ConfigError("eval needs model= or predictions= (or both)")
    dataset = load_dataset(cfg["data"])
    if dataset.truth is None:
        raise DataError("evaluation needs a dataset with a truth block")

    hashes = {}
    if dataset.meta.get("config_hash"):
        hashes["data"] = dataset.meta["config_hash"]
    encoders = params = model_meta = None
    if cfg["model"] is not None:
        encoders, params, model_meta = load_model(cfg["model"])
        if model_meta.get("config_hash"):
            hashes["model"] = model_meta["config_hash"]
    pred_bits = None
    if cfg["predictions"] is not None:
        pred_bits, pred_meta = _load_predictions(cfg["predictions"])
        if pred_meta.get("config_hash"):
            hashes["predictions"] = pred_meta["config_hash"]
    _check_hashes(hashes, force)

    if params is not None:
        reports = []
        for run in range(cfg["runs"]):
            rng = stream(seed, "eval", run)
            reports.append(
                evaluate_model(
                    dataset,
                    encoders,
                    params,
                    cfg["m"],
                    rng,
                    overlap_only=cfg["overlap_only"],
                    ssim_window=cfg["ssim_window"],
                    chunk=cfg["chunk"],
                    meta={"config_hash": chash, "seed": int(seed), "run": run},
                )
            )
        report = aggregate_reports(reports)
    else:
        report = EvalReport(
            n=dataset.n,
            k=dataset.truth.shape[1],
            d=dataset.d,
            m=cfg["m"],
            meta={"config_hash": chash, "seed": int(seed)},
        )

    if pred_bits is not None:
        if pred_bits.shape != dataset.truth.shape:
            raise DataError(
                f"predictions shape {pred_bits.shape} does not match truth "
                f"{dataset.truth.shape}"
            )
        report.values["predictions_accuracy"] = float(
            (pred_bits == dataset.truth).all(axis=1).mean()
        )

    (out / "eval.json").write_text(report.to_json() + "\n", encoding="utf-8")
    text = report.to_text()
    (out / "eval.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


_HANDLERS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


if __name__ == "__main__":
    sys.exit(main())
