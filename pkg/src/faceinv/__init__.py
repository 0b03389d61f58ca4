"""Face template inversion with attribute-conditioned latent projection.

A leaked face recognition template is inverted back into a face image in
three stages: a prompt bank grounds facial attributes in a joint
vision-language space, a small adapter predicts those attributes from the
template alone, and an attention-fusion projector maps (noise, template,
predicted attributes) into a frozen generator's latent space, trained with
a WGAN critic plus reconstruction losses. A biometric evaluation harness
measures attack success as TAR at calibrated FAR thresholds, including
cross-model transfer.

All pretrained models (FR embedders, the vision-language encoder, the
generator and its mapping network, landmarks, perceptual features) sit
behind pluggable backends with seeded deterministic stubs, so everything
here runs and verifies at desk scale without external weights.
"""

from ._version import __version__

from .types import (
    FaceTemplate,
    LandmarkSet,
    LatentCode,
    NoiseVector,
    VLEmbedding,
    check_image,
    make_noise,
)
from .backends import (
    BackendRegistry,
    NoFaceError,
    build_registry,
    register_backend_loader,
)
from .semantics import (
    PromptBank,
    SemanticEmbedding,
    aggregate_semantics,
    build_bank,
    match_region,
)
from .adapter import TAAParams, TAATrainConfig, semantic_loss, taa_forward, train_taa
from .projector import (
    AttentionTrace,
    FLPParams,
    conditional_attention,
    flp_forward,
    init_flp_params,
)
from .training import (
    CriticParams,
    LossWeights,
    WGANConfig,
    critic_forward,
    reconstruction_loss,
    train_flp,
    wgan_losses,
)
from .metrics import famse, ms_ssim, region_semantic_similarity
from .verification import (
    ScoreSet,
    TransferMatrix,
    VerificationReport,
    calibrate_threshold,
    run_verification,
    tar_at_far,
    transfer_matrix,
)
from .manifest import DatasetManifest, ManifestRecord, load_manifest
from .config import RunConfig, default_config, load_config, toy_config
from .attack import load_template, run_attack, save_template
from .nn import TrainingDivergedError

__all__ = [
    "__version__",
    "FaceTemplate", "LandmarkSet", "LatentCode", "NoiseVector", "VLEmbedding",
    "check_image", "make_noise",
    "BackendRegistry", "NoFaceError", "build_registry", "register_backend_loader",
    "PromptBank", "SemanticEmbedding", "aggregate_semantics", "build_bank",
    "match_region",
    "TAAParams", "TAATrainConfig", "semantic_loss", "taa_forward", "train_taa",
    "AttentionTrace", "FLPParams", "conditional_attention", "flp_forward",
    "init_flp_params",
    "CriticParams", "LossWeights", "WGANConfig", "critic_forward",
    "reconstruction_loss", "train_flp", "wgan_losses",
    "famse", "ms_ssim", "region_semantic_similarity",
    "ScoreSet", "TransferMatrix", "VerificationReport", "calibrate_threshold",
    "run_verification", "tar_at_far", "transfer_matrix",
    "DatasetManifest", "ManifestRecord", "load_manifest",
    "RunConfig", "default_config", "load_config", "toy_config",
    "load_template", "run_attack", "save_template",
    "TrainingDivergedError",
]
