"""Dataset manifests: JSONL records binding images to identities and splits.

One record per line: {"image_path": ..., "identity_id": ..., "split": ...}
with split in {train, test}. Paths are kept as written (relative paths are
resolved against the manifest's directory when loading images through
``DatasetManifest.loader``). Validation is strict and names the offending
line: silent manifest damage corrupts every downstream metric.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .types import check_image

__all__ = ["ManifestRecord", "DatasetManifest", "load_manifest", "save_manifest",
           "load_image", "save_image"]

SPLITS = ("train", "test")
_REQUIRED = ("image_path", "identity_id", "split")


@dataclass
class ManifestRecord:
    image_path: str
    identity_id: str
    split: str

    def __post_init__(self):
        if not self.image_path or not self.identity_id:
            raise ValueError("image_path and identity_id must be non-empty")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetManifest:
    name: str
    records: list[ManifestRecord]
    root: str = ""

    def __post_init__(self):
        if not self.name:
            raise ValueError("manifest requires a dataset name")
        if not self.records:
            raise ValueError("manifest contains no records")
        seen: set[str] = set()
        for r in self.records:
            if r.image_path in seen:
                raise ValueError(f"duplicate image_path in manifest: {r.image_path!r}")
            seen.add(r.image_path)

    def subset(self, split: str) -> list[ManifestRecord]:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return [r for r in self.records if r.split == split]

    def identities(self, split: str | None = None) -> list[str]:
        """Distinct identities in first-appearance order."""
        out: list[str] = []
        for r in self.records:
            if split is not None and r.split != split:
                continue
            if r.identity_id not in out:
                out.append(r.identity_id)
        return out

    def loader(self):
        """Image loader resolving relative paths against the manifest root."""
        root = self.root

        def _load(path: str) -> np.ndarray:
            if root and not os.path.isabs(path):
                path = os.path.join(root, path)
            return load_image(path)
        return _load


def load_manifest(path, name: str | None = None) -> DatasetManifest:
    records: list[ManifestRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if not isinstance(doc, dict):
                raise ValueError(f"{path}:{lineno}: expected an object")
            missing = [k for k in _REQUIRED if k not in doc]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {missing}")
            try:
                records.append(ManifestRecord(str(doc["image_path"]),
                                              str(doc["identity_id"]),
                                              str(doc["split"])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not records:
        raise ValueError(f"{path}: manifest is empty")
    base = os.path.splitext(os.path.basename(str(path)))[0]
    return DatasetManifest(name=name or base, records=records,
                           root=os.path.dirname(str(path)))


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(json.dumps({"image_path": r.image_path,
                                 "identity_id": r.identity_id,
                                 "split": r.split},
                                sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_image(path) -> np.ndarray:
    """Load an image file as float64 (H, W, 3) in [0, 1].

    ``.npy`` arrays are used as-is (and validated); common raster formats
    go through Pillow, which is imported lazily.
    """
    path = str(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".npy":
        return check_image(np.load(path))
    from PIL import Image  # lazy: only raster formats need it
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return check_image(arr)


def save_image(path, image: np.ndarray) -> None:
    """Write ``.npy`` losslessly or an 8-bit raster file via Pillow."""
    path = str(path)
    arr = check_image(image)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".npy":
        np.save(path, arr)
        return
    from PIL import Image
    quantized = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized).save(path)
