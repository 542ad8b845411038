"""Binary checkpoints for trained models and pretrained experts.

Layout: an 8-byte magic, a little-endian u64 metadata length, a UTF-8 JSON
metadata block, then the raw float64 little-endian tensor payload.  The
metadata lists every array's name and shape in payload order, plus enough
architecture description to rebuild the networks, so a checkpoint restores
bit-for-bit.  Parse failures report the byte offset.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import FormatError
from .inference import EncoderParams, GaussianEncoder
from .model import GenerativeParams
from .nn import MlpNet

MAGIC = b"MSVAE001"

__all__ = [
    "MAGIC",
    "load_expert",
    "load_model",
    "load_raw",
    "save_expert",
    "save_model",
    "save_raw",
]


def save_raw(path, meta: dict, arrays: list) -> None:
    """Write a checkpoint from metadata and an ordered (name, array) list."""
    manifest = [{"name": name, "shape": list(np.asarray(arr).shape)} for name, arr in arrays]
    header = dict(meta)
    header["arrays"] = manifest
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_raw(path) -> tuple:
    """Read a checkpoint into (meta, ordered name -> array dict)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if head != MAGIC:
            raise FormatError(f"bad checkpoint magic {head!r}, expected {MAGIC!r}", 0)
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise FormatError("truncated metadata length", 8 + len(raw_len))
        (meta_len,) = struct.unpack("<Q", raw_len)
        blob = fh.read(meta_len)
        if len(blob) != meta_len:
            raise FormatError(
                f"truncated metadata: wanted {meta_len} bytes, got {len(blob)}", 16 + len(blob)
            )
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise FormatError(f"unreadable checkpoint metadata: {err}", 16) from None
        if "arrays" not in meta:
            raise FormatError("checkpoint metadata lists no arrays", 16)
        arrays = {}
        offset = 16 + meta_len
        for entry in meta["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise FormatError(
                    f"truncated payload for array {entry['name']!r}: "
                    f"wanted {count * 8} bytes, got {len(buf)}",
                    offset + len(buf),
                )
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            offset += count * 8
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after declared payload", offset)
    return meta, arrays


def save_model(path, encoders: EncoderParams, params: GenerativeParams, meta: dict | None = None) -> None:
    """Write a full model checkpoint: encoders, decoders, pi and b."""
    # Core fields come after the free-form meta so a stale caller dict
    # (for example a header returned by load_model) can never override
    # what the saved objects actually contain.
    header = {
        **(meta or {}),
        "kind": "msvae",
        "k": params.k,
        "d": params.d,
        "z": params.latent_dim,
        "pi": [float(p) for p in params.pi],
        "b": float(params.b),
        "encoder_specs": [enc.spec() for enc in encoders],
        "decoder_specs": [dec.spec() for dec in params.decoders],
    }
    arrays = []
    for idx, enc in enumerate(encoders):
        arrays.extend(enc.state_items(f"encoder{idx}."))
    for idx, dec in enumerate(params.decoders):
        arrays.extend(dec.state_items(f"decoder{idx}."))
    save_raw(path, header, arrays)


def load_model(path) -> tuple:
    """Rebuild (encoders, params, meta) from a model checkpoint."""
    meta, arrays = load_raw(path)
    if meta.get("kind") != "msvae":
        raise FormatError(f"checkpoint kind {meta.get('kind')!r} is not a model checkpoint")
    values = list(arrays.values())
    names = list(arrays.keys())
    pos = 0

    def take(prefix, count):
        nonlocal pos
        part = values[pos : pos + count]
        if len(part) != count or not names[pos].startswith(prefix):
            raise FormatError(f"checkpoint arrays do not match metadata near {prefix!r}")
        pos += count
        return part

    encoders = []
    for idx, spec in enumerate(meta["encoder_specs"]):
        enc = GaussianEncoder.from_spec(spec)
        count = len(enc.state_items())
        enc.load_state_items(take(f"encoder{idx}.", count))
        enc.eval()
        encoders.append(enc)
    decoders = []
    for idx, spec in enumerate(meta["decoder_specs"]):
        dec = MlpNet.from_spec(spec)
        count = len(dec.state_items())
        dec.load_state_items(take(f"decoder{idx}.", count))
        dec.eval()
        decoders.append(dec)
    params = GenerativeParams(
        pi=np.asarray(meta["pi"]), decoders=decoders, b=float(meta["b"]), latent_dim=int(meta["z"])
    )
    return EncoderParams(encoders), params, meta


def save_expert(path, encoder: GaussianEncoder, decoder: MlpNet, b: float, meta: dict | None = None) -> None:
    """Write a pretrained single-source expert checkpoint."""
    header = {
        **(meta or {}),
        "kind": "expert",
        "d": decoder.out_dim,
        "z": decoder.in_dim,
        "b": float(b),
        "encoder_spec": encoder.spec(),
        "decoder_spec": decoder.spec(),
    }
    arrays = encoder.state_items("encoder.") + decoder.state_items("decoder.")
    save_raw(path, header, arrays)


def load_expert(path) -> tuple:
    """Rebuild (encoder, decoder, b, meta) from an expert checkpoint."""
    meta, arrays = load_raw(path)
    if meta.get("kind") != "expert":
        raise FormatError(f"checkpoint kind {meta.get('kind')!r} is not an expert checkpoint")
    values = list(arrays.values())
    encoder = GaussianEncoder.from_spec(meta["encoder_spec"])
    n_enc = len(encoder.state_items())
    encoder.load_state_items(values[:n_enc])
    encoder.eval()
    decoder = MlpNet.from_spec(meta["decoder_spec"])
    decoder.load_state_items(values[n_enc:])
    decoder.eval()
    return encoder, decoder, float(meta["b"]), meta
