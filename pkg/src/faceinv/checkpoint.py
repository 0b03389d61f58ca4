"""Deterministic binary container for parameters and encoded banks.

Layout: one JSON header line (sorted keys, no whitespace), then the raw
C-order float64 bytes of each section in the order the header lists them.
The header records shapes, a payload sha256, the producing package version,
and a free-form ``meta`` dict.

Zip-based formats were rejected on purpose: archive member timestamps make
byte-level reproducibility impossible, and identical (config, seed) runs
must produce identical files. Nothing here depends on wall-clock time.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from ._version import __version__

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "payload_digest"]

_FORMAT = "faceinv-ckpt"
_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for unreadable, corrupt, or incompatible checkpoint files."""


def payload_digest(arrays: dict[str, np.ndarray]) -> str:
    """sha256 over the concatenated section bytes, in dict order."""
    h = hashlib.sha256()
    for arr in arrays.values():
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` under the given ``kind`` tag.

    ``meta`` must be JSON-serializable; section order follows dict order.
    """
    if not arrays:
        raise ValueError("refusing to write a checkpoint with no sections")
    sections = []
    blobs = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        sections.append({"name": name, "shape": list(a.shape)})
        blobs.append(np.ascontiguousarray(a).tobytes())
    header = {
        "format": _FORMAT,
        "version": _VERSION,
        "kind": kind,
        "package_version": __version__,
        "meta": meta,
        "sections": sections,
        "payload_sha256": hashlib.sha256(b"".join(blobs)).hexdigest(),
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header, {section_name: array}).

    Validates the format tag, version, payload digest, and section sizes.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    if header.get("format") != _FORMAT:
        raise CheckpointError(f"{path}: not a {_FORMAT} file")
    if header.get("version", 0) > _VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} is newer than "
            f"supported version {_VERSION}")
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise CheckpointError(
            f"{path}: expected kind {expected_kind!r}, found {header.get('kind')!r}")
    payload = raw[newline + 1:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload digest mismatch, file is corrupt")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for section in header["sections"]:
        shape = tuple(section["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: truncated payload in section {section['name']!r}")
        arrays[section["name"]] = np.frombuffer(
            payload[offset:offset + nbytes], dtype=np.float64).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    return header, arrays
