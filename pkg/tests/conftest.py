"""Shared fixtures: toy configs, registries, banks, synthetic datasets."""

from __future__ import annotations

import numpy as np
import pytest

from faceinv.config import toy_config
from faceinv.manifest import DatasetManifest, ManifestRecord, save_manifest
from faceinv.pipeline import build_run_backends, build_run_bank
from faceinv.types import LatentCode


@pytest.fixture()
def cfg():
    return toy_config()


@pytest.fixture()
def registry(cfg):
    return build_run_backends(cfg)


@pytest.fixture()
def bank(cfg, registry):
    return build_run_bank(cfg, registry)


def synth_dataset(tmp_path, registry, n_identities=8, per_identity=3,
                  n_train=1, seed=7, jitter=0.25):
    """Write a small synthetic dataset of generator images to disk.

    Each identity is a base latent; its images are jittered draws decoded
    by the stub generator, so same-identity images genuinely correlate.
    Returns the loaded manifest (paths relative to tmp_path).
    """
    rng = np.random.default_rng(seed)
    d = registry.generator.latent_dim
    records = []
    for ident in range(n_identities):
        base = rng.standard_normal(d)
        for j in range(per_identity):
            w = base + jitter * rng.standard_normal(d)
            img = registry.generate(LatentCode(w))
            name = f"id{ident:02d}_{j}.npy"
            np.save(tmp_path / name, img)
            split = "train" if j < n_train else "test"
            records.append(ManifestRecord(name, f"id{ident:02d}", split))
    manifest = DatasetManifest("synth", records, root=str(tmp_path))
    save_manifest(tmp_path / "manifest.jsonl", manifest)
    return manifest


@pytest.fixture()
def dataset(tmp_path, registry):
    return synth_dataset(tmp_path, registry)
