"""Dataset construction and serialization.

Three concerns live here: parsing IDX image/label files, building synthetic
source pools (oriented ridge patterns with smoothly varying offset, width
and amplitude), and composing/serializing mixture datasets.  A mixture
dataset holds observed vectors x plus optional ground truth: the presence
bits, the clean per-source components and the additive noise, so that
x = sum_k components[:, k] + noise holds exactly by construction.

The on-disk container ("MSMX") is a fixed header (magic, N, D as little
endian u64) followed by the row-major float64 payload and a sequence of
tagged, length-prefixed blocks for truth and metadata.  All multi-byte
values are little endian; parse failures report the byte offset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import sample_laplace, stream

MSMX_MAGIC = b"MSMX0001"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_TAG_TRUTH = b"TRUTHS__"
_TAG_COMPONENTS = b"COMPNTS_"
_TAG_NOISE = b"NOISE___"
_TAG_LABELS = b"LABELS__"
_TAG_META = b"METAJSON"
_KNOWN_TAGS = (_TAG_TRUTH, _TAG_COMPONENTS, _TAG_NOISE, _TAG_LABELS, _TAG_META)

__all__ = [
    "DataError",
    "FormatError",
    "IdxParseError",
    "MixtureDataset",
    "SourcePool",
    "compose_mixtures",
    "empirical_state_frequencies",
    "load_dataset",
    "load_idx",
    "load_idx_images",
    "load_idx_labels",
    "load_matrix",
    "load_pool",
    "make_ridge_pool",
    "save_dataset",
    "save_pool",
    "split_dataset",
    "split_pool",
    "subsample_labels",
]


class DataError(Exception):
    """Base class for data ingestion and serialization failures."""


class IdxParseError(DataError):
    """IDX parse failure, carrying the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class FormatError(DataError):
    """Container parse failure, carrying the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class MixtureDataset:
    """Observed mixtures plus optional generation truth."""

    x: np.ndarray
    truth: np.ndarray | None = None
    components: np.ndarray | None = None
    noise: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError(f"dataset features must be 2-d (N, D), got shape {self.x.shape}")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.uint8)
            if self.truth.shape[0] != self.n:
                raise DataError(
                    f"truth rows ({self.truth.shape[0]}) do not match dataset rows ({self.n})"
                )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def k(self) -> int | None:
        return None if self.truth is None else self.truth.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.truth is not None


@dataclass
class SourcePool:
    """Clean exemplars grouped by source."""

    exemplars: list
    source_labels: list
    shape: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.exemplars = [np.asarray(e, dtype=np.float64) for e in self.exemplars]
        if not self.exemplars:
            raise DataError("source pool needs at least one source")
        dims = {e.shape[1] for e in self.exemplars}
        if len(dims) != 1:
            raise DataError(f"sources disagree on exemplar dimension: {sorted(dims)}")
        for idx, e in enumerate(self.exemplars):
            if e.shape[0] < 1:
                raise DataError(f"source {idx} has no exemplars")

    @property
    def k(self) -> int:
        return len(self.exemplars)

    @property
    def d(self) -> int:
        return self.exemplars[0].shape[1]

    @property
    def counts(self) -> list:
        return [e.shape[0] for e in self.exemplars]


# ---------------------------------------------------------------------------
# IDX parsing


def _read_exact(fh, count: int, offset: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise IdxParseError(
            f"truncated {what}: wanted {count} bytes, got {len(buf)}", offset + len(buf)
        )
    return buf


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into float64 images scaled to [0, 1]."""
    with open(path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, 0, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxParseError(
                f"bad image magic 0x{magic:08X}, expected 0x{IDX_IMAGES_MAGIC:08X}", 0
            )
        n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, 4, "image header"))
        payload = _read_exact(fh, n * rows * cols, 16, "image payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)
    return data.astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX label file into a uint8 vector."""
    with open(path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, 0, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxParseError(
                f"bad label magic 0x{magic:08X}, expected 0x{IDX_LABELS_MAGIC:08X}", 0
            )
        (n,) = struct.unpack(">I", _read_exact(fh, 4, 4, "label header"))
        payload = _read_exact(fh, n, 8, "label payload")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def load_idx(images_path, labels_path, labels_subset=None) -> SourcePool:
    """Build a source pool from paired IDX image and label files."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image count ({images.shape[0]}) does not match label count ({labels.shape[0]})"
        )
    flat = images.reshape(images.shape[0], -1)
    wanted = sorted(np.unique(labels)) if labels_subset is None else list(labels_subset)
    exemplars = []
    for label in wanted:
        rows = flat[labels == label]
        if rows.shape[0] == 0:
            raise DataError(f"no exemplars with label {label}")
        exemplars.append(rows)
    return SourcePool(
        exemplars=exemplars,
        source_labels=[int(v) for v in wanted],
        shape=(images.shape[1], images.shape[2]),
    )


# ---------------------------------------------------------------------------
# Synthetic pools and mixture composition


def make_ridge_pool(
    k: int,
    side: int,
    n_per_source: int,
    seed: int,
    *,
    offset_range: tuple = (-0.28, 0.28),
    width_range: tuple = (0.07, 0.14),
    amplitude_range: tuple = (0.75, 1.0),
) -> SourcePool:
    """Synthesize k families of oriented Gaussian ridge patterns.

    Family k runs at angle k * pi / K across a side x side grid; each
    exemplar varies the perpendicular offset, ridge width and amplitude.
    Offset and width ranges are fractions of the grid side.
    """
    if k < 1:
        raise DataError(f"need at least one source, got k={k}")
    centers = np.arange(side) - (side - 1) / 2.0
    u, v = np.meshgrid(centers, centers, indexing="ij")
    exemplars = []
    for src in range(k):
        rng = stream(seed, "ridge-pool", src)
        theta = np.pi * src / k
        normal_coord = -np.sin(theta) * u + np.cos(theta) * v
        offset = rng.uniform(*offset_range, size=n_per_source) * side
        width = rng.uniform(*width_range, size=n_per_source) * side
        amplitude = rng.uniform(*amplitude_range, size=n_per_source)
        dist = normal_coord[None, :, :] - offset[:, None, None]
        patterns = amplitude[:, None, None] * np.exp(
            -0.5 * (dist / width[:, None, None]) ** 2
        )
        exemplars.append(patterns.reshape(n_per_source, side * side))
    return SourcePool(
        exemplars=exemplars,
        source_labels=list(range(k)),
        shape=(side, side),
        meta={"family": "ridge", "side": side, "seed": seed},
    )


def compose_mixtures(
    pool: SourcePool, pi, b: float, n: int, seed: int, meta: dict | None = None
) -> MixtureDataset:
    """Superimpose pool exemplars under Bernoulli presence and Laplace noise.

    Each mixture activates source k with probability pi[k], picks one of its
    exemplars uniformly, sums the active exemplars and adds elementwise
    Laplace(0, b) noise.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (pool.k,):
        raise DataError(f"pi must have shape ({pool.k},), got {pi.shape}")
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise DataError("presence probabilities must lie strictly inside (0, 1)")
    if b <= 0.0:
        raise DataError(f"noise scale must be positive, got {b}")
    if n < 0:
        raise DataError(f"dataset size must be non-negative, got {n}")

    states_rng = stream(seed, "mixture-states")
    pick_rng = stream(seed, "mixture-pick")
    noise_rng = stream(seed, "mixture-noise")

    truth = (states_rng.random((n, pool.k)) < pi[None, :]).astype(np.uint8)
    components = np.zeros((n, pool.k, pool.d))
    for src in range(pool.k):
        picks = pick_rng.integers(0, pool.exemplars[src].shape[0], size=n)
        components[:, src, :] = pool.exemplars[src][picks] * truth[:, src, None]
    noise = sample_laplace(noise_rng, b, (n, pool.d))
    x = components.sum(axis=1) + noise

    info = {
        "k": pool.k,
        "d": pool.d,
        "pi": [float(p) for p in pi],
        "b": float(b),
        "seed": int(seed),
    }
    if pool.shape is not None:
        info["shape"] = list(pool.shape)
    if meta:
        info.update(meta)
    return MixtureDataset(x=x, truth=truth, components=components, noise=noise, meta=info)


def empirical_state_frequencies(truth: np.ndarray) -> np.ndarray:
    """Frequency of each discrete state, indexed little endian by bits."""
    truth = np.asarray(truth)
    n, k = truth.shape
    indices = truth.astype(np.uint64) @ (np.uint64(1) << np.arange(k, dtype=np.uint64))
    counts = np.bincount(indices.astype(np.int64), minlength=1 << k)
    return counts / max(n, 1)


def split_dataset(dataset: MixtureDataset, fraction: float, seed: int) -> tuple:
    """Deterministically partition a dataset into (first, rest)."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction must lie in (0, 1), got {fraction}")
    order = stream(seed, "dataset-split").permutation(dataset.n)
    cut = int(round(fraction * dataset.n))
    head, tail = order[:cut], order[cut:]

    def take(rows):
        return MixtureDataset(
            x=dataset.x[rows],
            truth=None if dataset.truth is None else dataset.truth[rows],
            components=None if dataset.components is None else dataset.components[rows],
            noise=None if dataset.noise is None else dataset.noise[rows],
            meta=dict(dataset.meta),
        )

    return take(head), take(tail)


def split_pool(pool: SourcePool, fraction: float, seed: int) -> tuple:
    """Deterministically partition each source's exemplars into (first, rest)."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction must lie in (0, 1), got {fraction}")
    first, rest = [], []
    for src in range(pool.k):
        order = stream(seed, "pool-split", src).permutation(pool.counts[src])
        cut = int(round(fraction * pool.counts[src]))
        if cut < 1 or cut >= pool.counts[src]:
            raise DataError(
                f"split fraction {fraction} leaves source {src} empty on one side"
            )
        first.append(pool.exemplars[src][order[:cut]])
        rest.append(pool.exemplars[src][order[cut:]])
    def make(exemplars):
        return SourcePool(
            exemplars=exemplars,
            source_labels=list(pool.source_labels),
            shape=pool.shape,
            meta=dict(pool.meta),
        )

    return make(first), make(rest)


def subsample_labels(pool: SourcePool, fraction: float, seed: int) -> SourcePool:
    """Keep a deterministic fraction of each source's exemplars (at least one)."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"subsample fraction must lie in (0, 1], got {fraction}")
    kept = []
    for src in range(pool.k):
        count = pool.counts[src]
        take = max(1, int(round(fraction * count)))
        order = stream(seed, "pool-subsample", src).permutation(count)
        kept.append(pool.exemplars[src][order[:take]])
    return SourcePool(
        exemplars=kept,
        source_labels=list(pool.source_labels),
        shape=pool.shape,
        meta=dict(pool.meta),
    )


# ---------------------------------------------------------------------------
# MSMX container


def _write_block(fh, tag: bytes, payload: bytes) -> None:
    fh.write(tag)
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _array_block(arr: np.ndarray, dtype) -> bytes:
    return np.ascontiguousarray(arr, dtype=dtype).tobytes()


def save_dataset(dataset: MixtureDataset, path) -> None:
    """Write a mixture dataset, including whatever truth blocks it carries."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MSMX_MAGIC)
        fh.write(struct.pack("<QQ", dataset.n, dataset.d))
        fh.write(_array_block(dataset.x, "<f8"))
        if dataset.truth is not None:
            k = dataset.truth.shape[1]
            _write_block(fh, _TAG_TRUTH, struct.pack("<Q", k) + _array_block(dataset.truth, np.uint8))
        if dataset.components is not None:
            k = dataset.components.shape[1]
            _write_block(
                fh, _TAG_COMPONENTS, struct.pack("<Q", k) + _array_block(dataset.components, "<f8")
            )
        if dataset.noise is not None:
            _write_block(fh, _TAG_NOISE, _array_block(dataset.noise, "<f8"))
        if dataset.meta:
            _write_block(fh, _TAG_META, json.dumps(dataset.meta, sort_keys=True).encode("utf-8"))


def _read_header(fh) -> tuple:
    head = fh.read(8)
    if head != MSMX_MAGIC:
        raise FormatError(f"bad magic {head!r}, expected {MSMX_MAGIC!r}", 0)
    dims = fh.read(16)
    if len(dims) != 16:
        raise FormatError("truncated header", 8 + len(dims))
    n, d = struct.unpack("<QQ", dims)
    return n, d


def _read_payload(fh, n: int, d: int) -> np.ndarray:
    want = n * d * 8
    buf = fh.read(want)
    if len(buf) != want:
        raise FormatError(
            f"truncated feature payload: wanted {want} bytes, got {len(buf)}", 24 + len(buf)
        )
    return np.frombuffer(buf, dtype="<f8").reshape(n, d).copy()


def _read_blocks(fh, start_offset: int) -> dict:
    blocks = {}
    offset = start_offset
    while True:
        tag = fh.read(8)
        if not tag:
            return blocks
        if len(tag) != 8 or tag not in _KNOWN_TAGS:
            raise FormatError(f"unknown or truncated block tag {tag!r}", offset)
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise FormatError(f"truncated length for block {tag!r}", offset + 8)
        (length,) = struct.unpack("<Q", raw_len)
        payload = fh.read(length)
        if len(payload) != length:
            raise FormatError(
                f"truncated payload for block {tag!r}: wanted {length}, got {len(payload)}",
                offset + 16 + len(payload),
            )
        blocks[tag] = (payload, offset)
        offset += 16 + length


def _parse_counted_array(payload: bytes, offset: int, tag: bytes, n: int, itemsize: int, dtype):
    if len(payload) < 8:
        raise FormatError(f"block {tag!r} too short for its count field", offset)
    (k,) = struct.unpack("<Q", payload[:8])
    want = n * k * itemsize
    if len(payload) != 8 + want:
        raise FormatError(
            f"block {tag!r} payload mismatch: wanted {8 + want} bytes, got {len(payload)}", offset
        )
    return int(k), np.frombuffer(payload[8:], dtype=dtype)


def load_dataset(path) -> MixtureDataset:
    """Read a mixture dataset with any truth blocks present."""
    with open(path, "rb") as fh:
        n, d = _read_header(fh)
        x = _read_payload(fh, n, d)
        blocks = _read_blocks(fh, 24 + n * d * 8)

    truth = components = noise = None
    meta: dict = {}
    if _TAG_TRUTH in blocks:
        payload, offset = blocks[_TAG_TRUTH]
        k, flat = _parse_counted_array(payload, offset, _TAG_TRUTH, n, 1, np.uint8)
        truth = flat.reshape(n, k).copy()
    if _TAG_COMPONENTS in blocks:
        payload, offset = blocks[_TAG_COMPONENTS]
        k, flat = _parse_counted_array(payload, offset, _TAG_COMPONENTS, n * d, 8, "<f8")
        components = flat.reshape(n, k, d).copy()
    if _TAG_NOISE in blocks:
        payload, offset = blocks[_TAG_NOISE]
        if len(payload) != n * d * 8:
            raise FormatError(f"noise block payload mismatch: got {len(payload)} bytes", offset)
        noise = np.frombuffer(payload, dtype="<f8").reshape(n, d).copy()
    if _TAG_META in blocks:
        payload, offset = blocks[_TAG_META]
        try:
            meta = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise FormatError(f"unreadable metadata block: {err}", offset) from None
    return MixtureDataset(x=x, truth=truth, components=components, noise=noise, meta=meta)


def load_matrix(path) -> MixtureDataset:
    """Read only the feature matrix, ignoring any truth blocks."""
    with open(path, "rb") as fh:
        n, d = _read_header(fh)
        x = _read_payload(fh, n, d)
    return MixtureDataset(x=x)


def save_pool(pool: SourcePool, path) -> None:
    """Write a source pool as a matrix of exemplars plus a source-index block."""
    path = Path(path)
    x = np.concatenate(pool.exemplars, axis=0) if pool.k else np.zeros((0, 0))
    indices = np.concatenate(
        [np.full(pool.counts[src], src, dtype=np.uint8) for src in range(pool.k)]
    )
    meta = {
        "kind": "pool",
        "source_labels": [int(v) for v in pool.source_labels],
        **({"shape": list(pool.shape)} if pool.shape is not None else {}),
        **pool.meta,
    }
    with open(path, "wb") as fh:
        fh.write(MSMX_MAGIC)
        fh.write(struct.pack("<QQ", x.shape[0], x.shape[1]))
        fh.write(_array_block(x, "<f8"))
        _write_block(fh, _TAG_LABELS, _array_block(indices, np.uint8))
        _write_block(fh, _TAG_META, json.dumps(meta, sort_keys=True).encode("utf-8"))


def load_pool(path) -> SourcePool:
    """Read a source pool written by `save_pool`."""
    with open(path, "rb") as fh:
        n, d = _read_header(fh)
        x = _read_payload(fh, n, d)
        blocks = _read_blocks(fh, 24 + n * d * 8)
    if _TAG_LABELS not in blocks or _TAG_META not in blocks:
        raise FormatError("pool file is missing its label or metadata block")
    payload, offset = blocks[_TAG_LABELS]
    if len(payload) != n:
        raise FormatError(f"label block length {len(payload)} does not match {n} rows", offset)
    indices = np.frombuffer(payload, dtype=np.uint8)
    payload, offset = blocks[_TAG_META]
    meta = json.loads(payload.decode("utf-8"))
    labels = meta.get("source_labels", [])
    exemplars = [x[indices == src] for src in range(len(labels))]
    shape = tuple(meta["shape"]) if "shape" in meta else None
    extra = {key: val for key, val in meta.items() if key not in ("kind", "source_labels", "shape")}
    return SourcePool(exemplars=exemplars, source_labels=labels, shape=shape, meta=extra)
