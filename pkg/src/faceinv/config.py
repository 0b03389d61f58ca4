"""Run configuration: dataclasses, YAML round-trip, and the two profiles.

``default`` carries production-scale dimensions (512-wide spaces, 64 px
stub images) and the published training hyperparameters; ``toy`` shrinks
everything to 16-wide spaces and 32 px images so a full train/attack/
evaluate cycle finishes in seconds. Both profiles wire stub backends;
swap the ``kind`` fields (and register loaders) to use real models.

Reproducibility contract: the CLI derives every stage seed from the single
top-level ``seed`` via :func:`stage_seed`, so one (config, seed) pair pins
the whole pipeline. Per-stage ``rng_seed`` fields exist for direct library
use and are overwritten by the CLI.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from .adapter import TAATrainConfig
from .training import LossWeights, WGANConfig

__all__ = [
    "Dims",
    "AblationConfig",
    "EvalConfig",
    "RunConfig",
    "default_config",
    "toy_config",
    "load_config",
    "save_config",
    "stage_seed",
    "effective_loss_weights",
]

PROFILES = ("default", "toy")


@dataclass
class Dims:
    """Widths of the spaces the projector fuses, plus its structure."""

    d_template: int = 512
    d_semantic: int = 512     # per-region segment width
    d_noise: int = 512
    d_latent: int = 512
    d_model: int | None = None    # None -> d_semantic
    n_heads: int = 1
    trunk_blocks: int = 3
    trunk_width: int | None = None   # None -> 4 * model width
    alpha: float = 0.2

    def __post_init__(self):
        dims = (self.d_template, self.d_semantic, self.d_noise, self.d_latent)
        if any(d < 1 for d in dims):
            raise ValueError("all dimensions must be positive")
        if self.n_heads < 1 or self.trunk_blocks < 1:
            raise ValueError("n_heads and trunk_blocks must be positive")

    @property
    def model_width(self) -> int:
        return self.d_model if self.d_model is not None else self.d_semantic


@dataclass
class AblationConfig:
    """Switches for the published ablations; defaults are the full method."""

    enable_attr_embedding: bool = True
    attention_mode: str = "conditional"
    enable_l_attr: bool = True
    enable_l_perc: bool = True

    def __post_init__(self):
        from .projector import ATTENTION_MODES
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(
                f"attention_mode must be one of {ATTENTION_MODES}, "
                f"got {self.attention_mode!r}")


@dataclass
class EvalConfig:
    far_levels: tuple = (0.01, 0.001, 0.0001)
    protocols: tuple = ("type1", "type2")
    f_targets: tuple = ()          # empty -> attack the leaked system only
    impostor_cap: int = 1_000_000
    ms_ssim_scales: int = 5
    split: str = "test"

    def __post_init__(self):
        self.far_levels = tuple(self.far_levels)
        self.protocols = tuple(self.protocols)
        self.f_targets = tuple(self.f_targets)
        if not self.far_levels:
            raise ValueError("far_levels must be non-empty")
        if any(not 0 < f <= 1 for f in self.far_levels):
            raise ValueError("far levels must lie in (0, 1]")
        if self.impostor_cap < 1:
            raise ValueError("impostor_cap must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    fr_database: str = "fr_database"
    fr_loss: str = "fr_loss"
    prompt_bank: str = "default"   # "default" or a path to a YAML prompt file
    dims: Dims = field(default_factory=Dims)
    backends: dict = field(default_factory=dict)
    taa: TAATrainConfig = field(default_factory=TAATrainConfig)
    wgan: WGANConfig = field(default_factory=WGANConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.backends:
            ids = [spec.get("id") for spec in self.backends.get("fr_embedders", [])]
            for role, wanted in (("fr_database", self.fr_database),
                                 ("fr_loss", self.fr_loss)):
                if wanted not in ids:
                    raise ValueError(
                        f"{role} {wanted!r} is not among the configured FR "
                        f"embedders {ids}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        return _tuples_to_lists(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        merged = doc
        return cls(
            seed=int(merged.get("seed", 0)),
            fr_database=merged.get("fr_database", "fr_database"),
            fr_loss=merged.get("fr_loss", "fr_loss"),
            prompt_bank=merged.get("prompt_bank", "default"),
            dims=Dims(**merged.get("dims", {})),
            backends=merged.get("backends", {}),
            taa=TAATrainConfig(**merged.get("taa", {})),
            wgan=WGANConfig(**merged.get("wgan", {})),
            loss_weights=LossWeights(**merged.get("loss_weights", {})),
            ablation=AblationConfig(**merged.get("ablation", {})),
            eval=EvalConfig(**merged.get("eval", {})),
        )


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tuples_to_lists(v) for v in obj]
    return obj


def _stub_backends(dim: int, resolution: int, attr_dim: int) -> dict:
    return {
        "fr_embedders": [
            {"id": "fr_database", "kind": "stub_fr", "dim": dim,
             "resolution": resolution, "seed": 101},
            {"id": "fr_loss", "kind": "stub_fr", "dim": dim,
             "resolution": resolution, "seed": 102},
            {"id": "fr_probe", "kind": "stub_fr", "dim": dim,
             "resolution": resolution, "seed": 103},
        ],
        "vl_encoder": {"id": "vl_stub", "kind": "stub_vl", "dim": dim,
                       "resolution": resolution, "seed": 201},
        "generator": {"id": "gen_stub", "kind": "stub_generator",
                      "resolution": resolution, "latent_dim": dim, "seed": 301},
        "mapping": {"id": "map_stub", "kind": "stub_mapping",
                    "latent_dim": dim, "seed": 401, "mode": "affine"},
        "landmarks": {"id": "lm_stub", "kind": "stub_landmark"},
        "perceptual": {"id": "perc_stub", "kind": "stub_perceptual",
                       "resolution": resolution, "seed": 501, "feature_dim": 64},
        "attributes": {"id": "attr_stub", "kind": "stub_attribute",
                       "dim": attr_dim, "seed": 601, "crop_size": 32},
    }


def default_config() -> RunConfig:
    """Production-scale widths with the published training settings."""
    return RunConfig(
        dims=Dims(),
        backends=_stub_backends(dim=512, resolution=64, attr_dim=512),
        taa=TAATrainConfig(),
        wgan=WGANConfig(),
        loss_weights=LossWeights(),
        eval=EvalConfig(ms_ssim_scales=3),   # 64 px stubs support 3 dyadic scales
    )


def toy_config() -> RunConfig:
    """Desk-scale profile: everything finishes in seconds."""
    return RunConfig(
        dims=Dims(d_template=16, d_semantic=16, d_noise=16, d_latent=16),
        backends=_stub_backends(dim=16, resolution=32, attr_dim=64),
        taa=TAATrainConfig(batch_size=16),
        wgan=WGANConfig(epochs=4, batch_size=8, critic_hidden=32,
                        learning_rate=1e-2),
        loss_weights=LossWeights(),
        eval=EvalConfig(ms_ssim_scales=2),
    )


_PROFILE_BUILDERS = {"default": default_config, "toy": toy_config}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, profile: str | None = None) -> RunConfig:
    """Build a config from a profile plus optional YAML overrides.

    The file may name its base via a top-level ``profile`` key; an explicit
    ``profile`` argument wins over the file.
    """
    doc: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping")
        doc = loaded
    base_name = profile or doc.pop("profile", "default")
    if base_name not in _PROFILE_BUILDERS:
        raise ValueError(f"unknown profile {base_name!r}; choose from {PROFILES}")
    doc.pop("profile", None)
    base = _PROFILE_BUILDERS[base_name]().to_dict()
    return RunConfig.from_dict(_deep_merge(base, doc))


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def stage_seed(master_seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the run seed.

    Uses a hash of the stage name so adding stages never shifts existing
    ones.
    """
    tag = int.from_bytes(hashlib.sha256(stage.encode("utf-8")).digest()[:8], "big")
    seq = np.random.SeedSequence([master_seed & 0xFFFFFFFFFFFFFFFF, tag])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def effective_loss_weights(cfg: RunConfig) -> LossWeights:
    """Loss weights with the ablation switches applied."""
    return LossWeights(
        lambda_pix=cfg.loss_weights.lambda_pix,
        lambda_id=cfg.loss_weights.lambda_id,
        lambda_attr=cfg.loss_weights.lambda_attr if cfg.ablation.enable_l_attr else 0.0,
        lambda_perc=cfg.loss_weights.lambda_perc if cfg.ablation.enable_l_perc else 0.0,
    )
