"""The inversion attack itself, plus template exchange formats.

``run_attack`` consumes nothing but a leaked template (and a noise seed):
the adapter predicts semantics, the projector fuses them with the template
into a latent, and the generator decodes the reconstruction. This is the
deployment path; training never happens here.

Templates travel in two formats: a small binary container (magic, version,
dtype tag, source model id, dimension, float64 payload) and a plain text
alternative with one float per line for interoperability. The text reader
accepts an optional ``# model: <id>`` comment carrying the source model.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .adapter import TAAParams, taa_forward
from .backends import BackendRegistry
from .projector import FLPParams, flp_forward
from .semantics import SemanticEmbedding
from .types import FaceTemplate, make_noise

__all__ = ["run_attack", "save_template", "load_template"]

_MAGIC = b"FTPL"
_VERSION = 1
_DTYPE_TAG = b"<f8"


def run_attack(template: FaceTemplate, taa: TAAParams, flp: FLPParams,
               registry: BackendRegistry, noise_seed: int,
               enable_attr_embedding: bool = True) -> np.ndarray:
    """Reconstruct a face image from a leaked template alone.

    With ``enable_attr_embedding`` off the projector receives a zero
    semantic embedding (the no-semantics ablation).
    """
    if enable_attr_embedding:
        s_hat = taa_forward(taa, template)
    else:
        s_hat = SemanticEmbedding(np.zeros(taa.output_dim), taa.region_order)
    noise = make_noise(flp.noise_dim, noise_seed)
    w, _ = flp_forward(flp, noise, template, s_hat)
    return registry.generate(w)


def save_template(path, template: FaceTemplate) -> None:
    """Write a template; ``.txt`` selects the text format, anything else binary."""
    path = str(path)
    if os.path.splitext(path)[1].lower() == ".txt":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# model: {template.source_model_id}\n")
            for v in template.values:
                fh.write(repr(float(v)))
                fh.write("\n")
        return
    model = template.source_model_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", _VERSION))
        fh.write(struct.pack("<B", len(_DTYPE_TAG)))
        fh.write(_DTYPE_TAG)
        fh.write(struct.pack("<H", len(model)))
        fh.write(model)
        fh.write(struct.pack("<I", template.values.size))
        fh.write(np.ascontiguousarray(template.values, dtype="<f8").tobytes())


def load_template(path, source_model_id: str | None = None) -> FaceTemplate:
    """Read either template format.

    ``source_model_id`` overrides whatever the file carries; the text
    format falls back to "unknown" when neither is present.
    """
    path = str(path)
    if os.path.splitext(path)[1].lower() == ".txt":
        model = source_model_id
        values = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    body = line.lstrip("#").strip()
                    if body.startswith("model:") and source_model_id is None:
                        model = body[len("model:"):].strip()
                    continue
                try:
                    values.append(float(line))
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: not a float: {line!r}") from None
        if not values:
            raise ValueError(f"{path}: no template values found")
        return FaceTemplate(np.array(values), model or "unknown")

    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        if raw[:4] != _MAGIC:
            raise ValueError(f"{path}: not a template file (bad magic)")
        off = 4
        version = raw[off]; off += 1
        if version > _VERSION:
            raise ValueError(f"{path}: unsupported template version {version}")
        tag_len = raw[off]; off += 1
        tag = raw[off:off + tag_len]; off += tag_len
        if tag != _DTYPE_TAG:
            raise ValueError(f"{path}: unsupported dtype tag {tag!r}")
        (model_len,) = struct.unpack_from("<H", raw, off); off += 2
        model = raw[off:off + model_len].decode("utf-8"); off += model_len
        (dim,) = struct.unpack_from("<I", raw, off); off += 4
        payload = raw[off:]
        if len(payload) != dim * 8:
            raise ValueError(
                f"{path}: payload holds {len(payload) // 8} values, header says {dim}")
        values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    except (IndexError, struct.error):
        raise ValueError(f"{path}: truncated template file") from None
    return FaceTemplate(values, source_model_id or model)
