"""Versioned weight files.

Layout: ``b"TRDW"`` magic, little-endian uint32 format version, uint32 header
length, UTF-8 JSON header, then the parameter arrays as flat little-endian
float64 in layer order (W0, b0, W1, b1, ...; a tabular estimator stores its
table as one array).  A ``.json`` sidecar repeats the header plus a digest.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .estimators import NeuralTrd, QNetwork, TabularTrd

MAGIC = b"TRDW"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    pass


def _arrays(est) -> list[np.ndarray]:
    if isinstance(est, TabularTrd):
        return [est.table]
    return est.net.params


def _header(est) -> dict:
    if isinstance(est, TabularTrd):
        return {
            "kind": est.kind,
            "shape": list(est.table.shape),
            "n": est.n,
            "w": est.w,
            "gamma": est.gamma,
            "seed": None,
        }
    return {
        "kind": est.kind,
        "layer_widths": list(est.net.widths),
        "num_actions": est.num_actions,
        "n": est.n,
        "w": est.w,
        "gamma": est.gamma,
        "seed": est.seed,
    }


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_estimator(est, path: str | Path) -> Path:
    path = Path(path)
    header = _header(est)
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in _arrays(est))
    atomic_write_bytes(path, MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + body)
    meta = dict(header, format_version=FORMAT_VERSION, sha256=file_digest(path),
                parameter_count=int(sum(a.size for a in _arrays(est))))
    atomic_write_bytes(path.with_name(path.name + ".json"), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return path


def load_estimator(path: str | Path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise WeightFileError(f"{path}: cannot read weight file ({exc})") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise WeightFileError(f"{path}: not a weight file (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"{path}: corrupt header") from exc
    body = raw[12 + hlen :]
    kind = header.get("kind")
    if kind == "tabular":
        shape = tuple(header["shape"])
        shapes = [shape]
    elif kind in ("neural_trd", "neural_q"):
        widths = header["layer_widths"]
        shapes = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            shapes.extend([(fan_in, fan_out), (fan_out,)])
    else:
        raise WeightFileError(f"{path}: unknown estimator kind {kind!r}")
    expected = 8 * sum(int(np.prod(s)) for s in shapes)
    if len(body) != expected:
        raise WeightFileError(f"{path}: expected {expected} parameter bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise WeightFileError(f"{path}: non-finite parameters")
    arrays, offset = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[offset : offset + size].reshape(s).copy())
        offset += size

    if kind == "tabular":
        return TabularTrd(arrays[0], header["n"], header["w"], header["gamma"])
    widths = header["layer_widths"]
    hidden = tuple(widths[1:-1])
    if kind == "neural_trd":
        est = NeuralTrd(widths[0], header["num_actions"], header["n"], header["w"], header["gamma"],
                        hidden=hidden, seed=header["seed"] or 0)
    else:
        est = QNetwork(widths[0], header["num_actions"], header["gamma"], hidden=hidden, seed=header["seed"] or 0)
    est.net.weights = arrays[0::2]
    est.net.biases = arrays[1::2]
    return est
