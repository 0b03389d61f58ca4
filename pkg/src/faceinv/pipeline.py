"""End-to-end orchestration: wiring configs, backends, and stages together.

The CLI is a thin shell over these functions; tests call them directly.
Every stage seed is derived from the run seed with :func:`stage_seed`, so
a (config, seed) pair determines checkpoints, logs, and reports bit for
bit.
"""

from __future__ import annotations

import dataclasses
import os
from typing import Optional, Sequence

import numpy as np

from .adapter import TAAParams, TAATrainConfig, taa_forward, train_taa
from .attack import run_attack
from .backends import BackendRegistry, build_registry
from .config import RunConfig, effective_loss_weights, stage_seed
from .manifest import DatasetManifest
from .metrics import famse, ms_ssim, pixel_mse, region_semantic_similarity
from .projector import FLPParams, init_flp_params
from .semantics import (
    PromptBank,
    aggregate_semantics,
    build_bank,
    default_prompt_texts,
    load_prompt_file,
)
from .training import CriticParams, TrainState, train_flp
from .verification import VerificationReport, run_verification, transfer_matrix
from . import reports as _reports

__all__ = [
    "build_run_backends",
    "build_run_bank",
    "make_attack_fn",
    "train_taa_stage",
    "train_flp_stage",
    "evaluate_stage",
    "transfer_stage",
]


def build_run_backends(cfg: RunConfig) -> BackendRegistry:
    """Registry from config, with width coherence checked up front."""
    registry = build_registry(cfg.backends)
    for fr_id in (cfg.fr_database, cfg.fr_loss):
        emb = registry.fr_embedders[fr_id]
        if emb.output_dim != cfg.dims.d_template:
            raise ValueError(
                f"FR embedder {fr_id!r} outputs {emb.output_dim}-d templates "
                f"but dims.d_template is {cfg.dims.d_template}")
    if registry.vl_encoder.output_dim != cfg.dims.d_semantic:
        raise ValueError(
            f"VL encoder outputs {registry.vl_encoder.output_dim}-d embeddings "
            f"but dims.d_semantic is {cfg.dims.d_semantic}")
    if registry.generator.latent_dim != cfg.dims.d_latent:
        raise ValueError(
            f"generator expects {registry.generator.latent_dim}-d latents "
            f"but dims.d_latent is {cfg.dims.d_latent}")
    return registry


def build_run_bank(cfg: RunConfig, registry: BackendRegistry) -> PromptBank:
    if cfg.prompt_bank == "default":
        texts = default_prompt_texts()
    else:
        texts = load_prompt_file(cfg.prompt_bank)
    return build_bank(texts, registry.vl_encoder)


def _split_images(manifest: DatasetManifest, split: str):
    records = manifest.subset(split)
    if not records:
        raise ValueError(f"manifest {manifest.name!r} has no {split!r} images")
    loader = manifest.loader()
    return records, [loader(r.image_path) for r in records]


def train_taa_stage(cfg: RunConfig, manifest: DatasetManifest,
                    registry: BackendRegistry, bank: PromptBank,
                    ) -> tuple[TAAParams, list[float]]:
    """Fit the adapter on the train split: surrogate templates -> semantics."""
    _, images = _split_images(manifest, "train")
    pairs = [(registry.fr_embed(cfg.fr_loss, img),
              aggregate_semantics(img, bank, registry.vl_encoder))
             for img in images]
    taa_cfg = TAATrainConfig(
        lambda_mse=cfg.taa.lambda_mse, lambda_cos=cfg.taa.lambda_cos,
        learning_rate=cfg.taa.learning_rate, epochs=cfg.taa.epochs,
        batch_size=cfg.taa.batch_size, hidden_dim=cfg.taa.hidden_dim,
        rng_seed=stage_seed(cfg.seed, "taa"))
    return train_taa(pairs, taa_cfg)


def train_flp_stage(cfg: RunConfig, manifest: DatasetManifest,
                    registry: BackendRegistry, bank: PromptBank,
                    taa: TAAParams, log_path=None,
                    ) -> tuple[FLPParams, CriticParams, list[TrainState]]:
    """Adversarial training of the projector on the train split."""
    _, images = _split_images(manifest, "train")
    flp = init_flp_params(
        d_template=cfg.dims.d_template, segment_dim=cfg.dims.d_semantic,
        n_regions=bank.n_regions, noise_dim=cfg.dims.d_noise,
        latent_dim=cfg.dims.d_latent, d_model=cfg.dims.model_width,
        n_heads=cfg.dims.n_heads, trunk_blocks=cfg.dims.trunk_blocks,
        trunk_width=cfg.dims.trunk_width, alpha=cfg.dims.alpha,
        attention_mode=cfg.ablation.attention_mode,
        rng_seed=stage_seed(cfg.seed, "flp_init"))
    wgan = dataclasses.replace(cfg.wgan,
                               rng_seed=stage_seed(cfg.seed, "flp_train"))
    return train_flp(
        images, taa, flp, None, wgan, effective_loss_weights(cfg), registry,
        bank, cfg.fr_loss,
        enable_attr_embedding=cfg.ablation.enable_attr_embedding,
        log_path=log_path)


def make_attack_fn(taa: TAAParams, flp: FLPParams, registry: BackendRegistry,
                   enable_attr_embedding: bool = True):
    """Close over the trained pipeline: (template, noise_seed) -> image."""
    def _attack(template, noise_seed: int) -> np.ndarray:
        return run_attack(template, taa, flp, registry, noise_seed,
                          enable_attr_embedding=enable_attr_embedding)
    return _attack


def evaluate_stage(cfg: RunConfig, manifest: DatasetManifest,
                   registry: BackendRegistry, bank: PromptBank,
                   taa: TAAParams, flp: FLPParams,
                   out_dir: Optional[str] = None) -> dict:
    """Full attack evaluation: verification, image quality, region scores.

    Returns a summary dict; when ``out_dir`` is given, writes report.jsonl
    plus verification.csv, quality.csv, and region_similarity.csv there.
    """
    attack_fn = make_attack_fn(taa, flp, registry,
                               cfg.ablation.enable_attr_embedding)
    targets = cfg.eval.f_targets or (cfg.fr_database,)
    loader = manifest.loader()

    reports: list[VerificationReport] = []
    for protocol in cfg.eval.protocols:
        for target in targets:
            reports.append(run_verification(
                manifest, attack_fn, registry, cfg.fr_database, target,
                cfg.eval.far_levels, protocol=protocol, f_loss=cfg.fr_loss,
                split=cfg.eval.split, impostor_cap=cfg.eval.impostor_cap,
                rng_seed=stage_seed(cfg.seed, f"verify/{protocol}/{target}"),
                image_loader=loader))

    # image quality over enrolled test images and their reconstructions
    records, images = _split_images(manifest, cfg.eval.split)
    noise_rng = np.random.default_rng(stage_seed(cfg.seed, "evaluate/quality"))
    sums = {"ms_ssim": 0.0, "pixel_mse": 0.0, "perceptual": 0.0, "famse": 0.0}
    region_sums: dict[str, float] = {}
    for img in images:
        leaked = registry.fr_embed(cfg.fr_database, img)
        recon = attack_fn(leaked, int(noise_rng.integers(0, 2**63)))
        sums["ms_ssim"] += ms_ssim(img, recon, scales=cfg.eval.ms_ssim_scales)
        sums["pixel_mse"] += pixel_mse(img, recon)
        sums["perceptual"] += registry.perceptual.distance(recon, img)
        sums["famse"] += famse(img, recon, registry.landmarks, registry.attributes)
        s_src = aggregate_semantics(img, bank, registry.vl_encoder)
        for region, value in region_semantic_similarity(
                recon, s_src, registry.vl_encoder).items():
            region_sums[region] = region_sums.get(region, 0.0) + value
    n = len(images)
    quality_means = {k: v / n for k, v in sums.items()}
    region_means = {k: v / n for k, v in region_sums.items()}

    summary = {
        "reports": reports,
        "quality": quality_means,
        "region_similarity": region_means,
        "n_images": n,
    }
    if out_dir is not None:
        quality_rec = _reports.quality_record(manifest.name, cfg.fr_database,
                                              quality_means, n)
        region_recs = _reports.region_similarity_records(manifest.name,
                                                         region_means, n)
        all_records = [rec for rep in reports
                       for rec in _reports.verification_records(rep)]
        all_records.append(quality_rec)
        all_records.extend(region_recs)
        _reports.write_records(os.path.join(out_dir, "report.jsonl"), all_records)
        _reports.verification_table(os.path.join(out_dir, "verification.csv"), reports)
        _reports.quality_table(os.path.join(out_dir, "quality.csv"), [quality_rec])
        _reports.region_similarity_table(
            os.path.join(out_dir, "region_similarity.csv"), region_recs)
    return summary


def transfer_stage(cfg: RunConfig, manifest: DatasetManifest,
                   registry: BackendRegistry, taa: TAAParams, flp: FLPParams,
                   targets: Sequence[str], far: float, protocol: str = "type1",
                   out_dir: Optional[str] = None):
    """Evaluate one trained pipeline against several target systems."""
    if not targets:
        raise ValueError("transfer needs at least one target embedder id")
    attack_fn = make_attack_fn(taa, flp, registry,
                               cfg.ablation.enable_attr_embedding)
    loader = manifest.loader()
    reports = [run_verification(
        manifest, attack_fn, registry, cfg.fr_database, target, [far],
        protocol=protocol, f_loss=cfg.fr_loss, split=cfg.eval.split,
        impostor_cap=cfg.eval.impostor_cap,
        rng_seed=stage_seed(cfg.seed, f"transfer/{protocol}/{target}"),
        image_loader=loader) for target in targets]
    tm = transfer_matrix(reports, far)
    if out_dir is not None:
        _reports.write_records(os.path.join(out_dir, "transfer.jsonl"),
                               _reports.transfer_records(tm))
        _reports.transfer_table(os.path.join(out_dir, "transfer.csv"), tm)
        with open(os.path.join(out_dir, "transfer.txt"), "w", encoding="utf-8") as fh:
            fh.write(_reports.render_transfer(tm))
    return tm
