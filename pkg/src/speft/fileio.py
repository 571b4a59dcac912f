"""Binary file formats: checkpoints, salience scores, masks, and adapters.

All formats share one container layout: a 4-byte magic, a little-endian u32
header length, a UTF-8 JSON header, then raw little-endian array bytes in the
order the header lists them. Index arrays are stored as u64 regardless of the
narrower in-memory width.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Mapping

import numpy as np

MAGIC = b"SPF1"

_DTYPE_TAGS = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"), "<u8": np.dtype("<u8")}


class FileFormatError(Exception):
    pass


def _dtype_tag(dtype) -> str:
    tag = np.dtype(dtype).newbyteorder("<").str
    if tag not in _DTYPE_TAGS:
        raise FileFormatError(f"unsupported dtype {dtype!r}")
    return tag


def write_container(path, header: dict, arrays: list[np.ndarray]) -> None:
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            for arr in arrays:
                fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    except OSError as exc:
        raise FileFormatError(f"cannot write {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, offset: int):
        self.buf = buf
        self.offset = offset

    def take(self, dtype_tag: str, count: int) -> np.ndarray:
        dtype = _DTYPE_TAGS[dtype_tag]
        nbytes = dtype.itemsize * count
        chunk = self.buf[self.offset : self.offset + nbytes]
        if len(chunk) != nbytes:
            raise FileFormatError("truncated container payload")
        self.offset += nbytes
        return np.frombuffer(chunk, dtype=dtype).copy()


def read_container(path) -> tuple[dict, _Reader]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise FileFormatError(f"{path}: not a recognized container (bad magic)")
    (header_len,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8 : 8 + header_len].decode("utf-8"))
    return header, _Reader(buf, 8 + header_len)


# ---------------------------------------------------------------------------
# Checkpoints: named float tensors plus the model config and build seed.
# ---------------------------------------------------------------------------

def save_checkpoint(path, arrays: Mapping[str, np.ndarray], config: dict, seed: int) -> None:
    names = list(arrays)
    header = {
        "kind": "checkpoint",
        "version": 1,
        "seed": int(seed),
        "config": config,
        "tensors": [
            {"name": n, "shape": list(arrays[n].shape), "dtype": _dtype_tag(arrays[n].dtype)}
            for n in names
        ],
    }
    write_container(path, header, [arrays[n] for n in names])


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, int]:
    header, reader = read_container(path)
    if header.get("kind") != "checkpoint":
        raise FileFormatError(f"{path}: expected a checkpoint, found {header.get('kind')!r}")
    arrays = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[spec["name"]] = reader.take(spec["dtype"], count).reshape(shape)
    return arrays, header["config"], header["seed"]


def checkpoint_fingerprint(arrays: Mapping[str, np.ndarray]) -> str:
    """Stable hash of named arrays; guards adapters against mismatched bases."""
    digest = hashlib.sha256()
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        digest.update(name.encode("utf-8"))
        digest.update(str(arr.shape).encode("ascii"))
        digest.update(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Salience scores: per-layer float arrays plus estimation metadata.
# ---------------------------------------------------------------------------

def save_scores(path, layers: Mapping[str, np.ndarray], meta: dict) -> None:
    names = list(layers)
    header = {
        "kind": "scores",
        "version": 1,
        "meta": meta,
        "tensors": [
            {"name": n, "shape": list(layers[n].shape), "dtype": _dtype_tag(layers[n].dtype)}
            for n in names
        ],
    }
    write_container(path, header, [layers[n] for n in names])


def load_scores(path) -> tuple[dict[str, np.ndarray], dict]:
    header, reader = read_container(path)
    if header.get("kind") != "scores":
        raise FileFormatError(f"{path}: expected scores, found {header.get('kind')!r}")
    layers = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        layers[spec["name"]] = reader.take(spec["dtype"], int(np.prod(shape))).reshape(shape)
    return layers, header["meta"]


# ---------------------------------------------------------------------------
# Masks: JSON header (scope, rho, metric, step, layer names and counts)
# followed by per-layer sorted u64 flat-index arrays.
# ---------------------------------------------------------------------------

def save_mask_data(
    path,
    layers: Mapping[str, np.ndarray],
    layer_sizes: Mapping[str, int],
    scope: str,
    rho: float,
    metric,
    step: int,
) -> None:
    names = list(layers)
    header = {
        "kind": "mask",
        "version": 1,
        "scope": scope,
        "rho": rho,
        "metric": metric,
        "step": int(step),
        "layers": [
            {"name": n, "size": int(layer_sizes[n]), "count": int(layers[n].size)} for n in names
        ],
    }
    write_container(path, header, [layers[n].astype("<u8") for n in names])


def load_mask_data(path) -> tuple[dict[str, np.ndarray], dict[str, int], dict]:
    header, reader = read_container(path)
    if header.get("kind") != "mask":
        raise FileFormatError(f"{path}: expected a mask, found {header.get('kind')!r}")
    layers = {}
    sizes = {}
    for spec in header["layers"]:
        layers[spec["name"]] = reader.take("<u8", spec["count"]).astype(np.int64)
        sizes[spec["name"]] = int(spec["size"])
    return layers, sizes, header


# ---------------------------------------------------------------------------
# Adapters: a mask plus the aligned trainable values and a fingerprint of the
# base checkpoint the delta was trained against.
# ---------------------------------------------------------------------------

def save_adapter(
    path,
    indices: Mapping[str, np.ndarray],
    values: Mapping[str, np.ndarray],
    layer_sizes: Mapping[str, int],
    mask_info: dict,
    base_fingerprint: str,
) -> None:
    names = list(indices)
    value_tag = _dtype_tag(next(iter(values.values())).dtype) if names else "<f8"
    header = {
        "kind": "adapter",
        "version": 1,
        "mask": mask_info,
        "base_fingerprint": base_fingerprint,
        "value_dtype": value_tag,
        "layers": [
            {"name": n, "size": int(layer_sizes[n]), "count": int(indices[n].size)} for n in names
        ],
    }
    payload = []
    for n in names:
        payload.append(indices[n].astype("<u8"))
        payload.append(values[n])
    write_container(path, header, payload)


def load_adapter(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    header, reader = read_container(path)
    if header.get("kind") != "adapter":
        raise FileFormatError(f"{path}: expected an adapter, found {header.get('kind')!r}")
    indices = {}
    values = {}
    for spec in header["layers"]:
        indices[spec["name"]] = reader.take("<u8", spec["count"]).astype(np.int64)
        values[spec["name"]] = reader.take(header["value_dtype"], spec["count"])
    return indices, values, header
