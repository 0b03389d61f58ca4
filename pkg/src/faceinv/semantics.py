"""Prompt-bank semantics: region-wise attribute matching and aggregation.

A prompt bank holds, per facial region, a list of short attribute texts
("round eyes", "thin lips", ...) together with their text embeddings from
the joint vision-language encoder. For an image, each region picks the
prompt whose text embedding has the highest cosine similarity to the image
embedding; the winning text embeddings, concatenated in the bank's fixed
region order, form the image's semantic embedding s of length R * d_c.

Banks are encoded once and reused; ``save_bank``/``load_bank`` persist the
embeddings so downstream stages never re-run the text encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .nn import cosine
from .types import VLEmbedding
from . import checkpoint as _ckpt

__all__ = [
    "PromptBank",
    "SemanticEmbedding",
    "build_bank",
    "match_region",
    "aggregate_semantics",
    "load_prompt_file",
    "save_prompt_file",
    "default_prompt_texts",
    "save_bank",
    "load_bank",
]


@dataclass
class PromptBank:
    """Encoded prompts per region, in a fixed region order.

    ``prompts[region]`` is a list of (text, embedding) pairs; every
    embedding is a text-modality vector of the same dimension d_c.
    """

    region_order: tuple[str, ...]
    prompts: dict[str, list[tuple[str, VLEmbedding]]]
    encoder_id: str = ""

    def __post_init__(self):
        self.region_order = tuple(self.region_order)
        if not self.region_order:
            raise ValueError("prompt bank requires at least one region")
        if set(self.region_order) != set(self.prompts):
            raise ValueError("region_order and prompts disagree on region names")
        dims = set()
        for region in self.region_order:
            entries = self.prompts[region]
            if not entries:
                raise ValueError(f"region {region!r} has no prompts")
            for text, emb in entries:
                if not text:
                    raise ValueError(f"region {region!r} contains an empty prompt")
                if emb.modality != "text":
                    raise ValueError(
                        f"prompt {text!r} carries a {emb.modality!r} embedding")
                dims.add(emb.dim)
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dims in bank: {sorted(dims)}")

    @property
    def n_regions(self) -> int:
        return len(self.region_order)

    @property
    def embed_dim(self) -> int:
        region = self.region_order[0]
        return self.prompts[region][0][1].dim

    def texts(self, region: str) -> list[str]:
        return [text for text, _ in self.prompts[region]]

    def embeddings(self, region: str) -> np.ndarray:
        """(n_prompts, d_c) matrix of the region's text embeddings."""
        return np.stack([emb.values for _, emb in self.prompts[region]])


@dataclass
class SemanticEmbedding:
    """Concatenation of one winning text embedding per region.

    ``values`` has length len(region_order) * segment dim. Predicted
    embeddings (from the template adapter) carry no winner indices; the
    dict is empty in that case.
    """

    values: np.ndarray
    region_order: tuple[str, ...]
    winner_indices: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.region_order = tuple(self.region_order)
        if not self.region_order:
            raise ValueError("semantic embedding requires a region order")
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError("semantic embedding must be a non-empty vector")
        if self.values.size % len(self.region_order) != 0:
            raise ValueError(
                f"length {self.values.size} is not a multiple of "
                f"{len(self.region_order)} regions")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("semantic embedding contains non-finite values")
        extra = set(self.winner_indices) - set(self.region_order)
        if extra:
            raise ValueError(f"winner indices for unknown regions: {sorted(extra)}")

    @property
    def segment_dim(self) -> int:
        return self.values.size // len(self.region_order)

    def segment(self, region: str) -> np.ndarray:
        """The slice of ``values`` belonging to one region."""
        idx = self.region_order.index(region)
        d = self.segment_dim
        return self.values[idx * d:(idx + 1) * d]


def build_bank(region_prompts: dict[str, list[str]], encoder) -> PromptBank:
    """Encode every prompt once with ``encoder`` and assemble a bank.

    Region order follows the insertion order of ``region_prompts``.
    """
    if not region_prompts:
        raise ValueError("no regions given")
    prompts: dict[str, list[tuple[str, VLEmbedding]]] = {}
    for region, texts in region_prompts.items():
        if not texts:
            raise ValueError(f"region {region!r} has no prompts")
        prompts[region] = [(text, encoder.encode_text(text)) for text in texts]
    return PromptBank(tuple(region_prompts), prompts,
                      encoder_id=getattr(encoder, "backend_id", ""))


def match_region(image_emb: VLEmbedding, bank: PromptBank, region: str) -> tuple[int, float]:
    """Best prompt for one region: (index, cosine similarity).

    Ties break toward the lowest index, so matching is deterministic.
    """
    if region not in bank.prompts:
        raise KeyError(f"unknown region {region!r}; bank has {list(bank.region_order)}")
    best_idx, best_sim = 0, -np.inf
    for idx, (_, emb) in enumerate(bank.prompts[region]):
        sim = cosine(image_emb.values, emb.values)
        if sim > best_sim:
            best_idx, best_sim = idx, sim
    return best_idx, float(best_sim)


def aggregate_semantics(image: np.ndarray, bank: PromptBank, encoder) -> SemanticEmbedding:
    """Semantic embedding of an image: winning text embedding per region,
    concatenated in the bank's region order."""
    image_emb = encoder.encode_image(image)
    if image_emb.dim != bank.embed_dim:
        raise ValueError(
            f"encoder dim {image_emb.dim} does not match bank dim {bank.embed_dim}")
    parts = []
    winners: dict[str, int] = {}
    for region in bank.region_order:
        idx, _ = match_region(image_emb, bank, region)
        winners[region] = idx
        parts.append(bank.prompts[region][idx][1].values)
    return SemanticEmbedding(np.concatenate(parts), bank.region_order, winners)


# ---------------------------------------------------------------------------
# prompt files and encoded-bank persistence

def load_prompt_file(path) -> dict[str, list[str]]:
    """Read a YAML prompt file: {regions: {name: [prompt, ...], ...}}."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "regions" not in doc:
        raise ValueError(f"{path}: expected a mapping with a 'regions' key")
    regions = doc["regions"]
    if not isinstance(regions, dict) or not regions:
        raise ValueError(f"{path}: 'regions' must be a non-empty mapping")
    out: dict[str, list[str]] = {}
    for name, texts in regions.items():
        if not isinstance(texts, list) or not texts:
            raise ValueError(f"{path}: region {name!r} must list at least one prompt")
        if any(not isinstance(t, str) or not t for t in texts):
            raise ValueError(f"{path}: region {name!r} contains a non-string or empty prompt")
        out[str(name)] = list(texts)
    return out


def save_prompt_file(path, region_prompts: dict[str, list[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump({"regions": region_prompts}, fh, sort_keys=False)


def default_prompt_texts() -> dict[str, list[str]]:
    """The packaged default bank: five regions, eight prompts each."""
    ref = resources.files("faceinv.data").joinpath("default_prompts.yaml")
    with resources.as_file(ref) as path:
        return load_prompt_file(path)


def save_bank(path, bank: PromptBank) -> None:
    """Persist an encoded bank (texts in the header, embeddings as arrays)."""
    header = {
        "region_order": list(bank.region_order),
        "texts": {region: bank.texts(region) for region in bank.region_order},
        "encoder_id": bank.encoder_id,
    }
    arrays = {region: bank.embeddings(region) for region in bank.region_order}
    _ckpt.save_checkpoint(path, "prompt_bank", header, arrays)


def load_bank(path) -> PromptBank:
    header, arrays = _ckpt.load_checkpoint(path, expected_kind="prompt_bank")
    meta = header["meta"]
    region_order = tuple(meta["region_order"])
    prompts: dict[str, list[tuple[str, VLEmbedding]]] = {}
    for region in region_order:
        texts = meta["texts"][region]
        mat = arrays[region]
        if mat.shape[0] != len(texts):
            raise ValueError(
                f"bank file corrupt: region {region!r} has {len(texts)} texts "
                f"but {mat.shape[0]} embeddings")
        prompts[region] = [(text, VLEmbedding(mat[i], "text"))
                           for i, text in enumerate(texts)]
    return PromptBank(region_order, prompts, encoder_id=meta.get("encoder_id", ""))
