"""On-disk formats: signal blobs with JSON manifests, JSON helpers, hashing."""

import hashlib
import json
from pathlib import Path

import numpy as np

from .diffnet import checkpoint_paths
from .errors import InputError, StateError

SIGNAL_FORMAT = "complex128-le-interleaved"


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(resolved):
    """Short digest of a resolved config; the output location is not part of it."""
    body = {k: v for k, v in resolved.items() if k != "output"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()[:16]


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise StateError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise StateError(f"{path}: malformed JSON ({exc})") from None


def write_signals(path, signals, meta=None):
    """Write a stack of complex signals as ``<path>.bin`` plus ``<path>.json``.

    The blob holds little-endian float64 values with real and imaginary parts
    interleaved, in C order. Returns the blob's sha256.
    """
    arr = np.ascontiguousarray(np.asarray(signals, dtype=np.complex128))
    if arr.ndim < 1:
        raise InputError("need at least a 1-D stack of signals")
    jpath, bpath = checkpoint_paths(path)
    blob = arr.astype("<c16").tobytes()
    with open(bpath, "wb") as fh:
        fh.write(blob)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {
        "format": SIGNAL_FORMAT,
        "count": int(arr.shape[0]),
        "shape": list(arr.shape[1:]),
        "file": bpath.name,
        "sha256": digest,
        "meta": meta or {},
    }
    write_json(jpath, manifest)
    return digest


def read_signals(path):
    """Inverse of :func:`write_signals`; returns ``(array, meta)``."""
    jpath, bpath = checkpoint_paths(path)
    manifest = read_json(jpath)
    if manifest.get("format") != SIGNAL_FORMAT:
        raise StateError(f"{jpath}: unsupported signal format {manifest.get('format')!r}")
    bpath = jpath.with_name(manifest["file"])
    try:
        blob = bpath.read_bytes()
    except FileNotFoundError:
        raise StateError(f"missing blob {bpath}") from None
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise StateError(f"{bpath}: checksum mismatch")
    shape = (manifest["count"], *manifest["shape"])
    expected = int(np.prod(shape)) * 16
    if len(blob) != expected:
        raise StateError(f"{bpath}: expected {expected} bytes, found {len(blob)}")
    arr = np.frombuffer(blob, dtype="<c16").astype(np.complex128).reshape(shape)
    return arr, manifest.get("meta", {})


def prepare_dir(path, force=False):
    """Create ``path``; refuse a non-empty existing directory unless ``force``."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise StateError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path
