"""Pluggable interfaces for every pretrained model the pipeline touches.

The pipeline needs five kinds of frozen models: face recognition embedders
(the leaked-template system, the training surrogate, and any transfer
targets), a joint vision-language encoder, an image generator with its
mapping network, a landmark detector, and a perceptual feature net. Each
sits behind a small ABC, and each ABC ships with a seeded deterministic
stub (a fixed affine map with tanh squashing) so the full pipeline runs and
verifies without downloading weights.

Real model adapters register a loader per ``kind`` via
:func:`register_backend_loader`; weight paths resolve against the
``FACEINV_WEIGHTS_DIR`` environment variable when relative.

Gradient flow: training differentiates through the frozen generator and the
surrogate embedder, so those interfaces expose vector-Jacobian products
(``generate_vjp`` / ``embed_vjp`` / ``distance_vjp``). Stubs implement them
analytically; adapters backed by an autograd framework can delegate.
"""

from __future__ import annotations

import hashlib
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .types import (
    FaceTemplate,
    LandmarkSet,
    LatentCode,
    VLEmbedding,
    check_image,
    resize_nearest,
)
from .nn import l2_normalize, l2_normalize_vjp

__all__ = [
    "NoFaceError",
    "FrEmbedder",
    "VlEncoder",
    "ImageGenerator",
    "MappingNetwork",
    "LandmarkDetector",
    "PerceptualModel",
    "AttributeEncoder",
    "StubFrEmbedder",
    "StubVlEncoder",
    "StubGenerator",
    "StubMappingNetwork",
    "StubLandmarkDetector",
    "StubPerceptualModel",
    "StubAttributeEncoder",
    "BackendRegistry",
    "build_registry",
    "register_backend_loader",
    "canonical_landmark_layout",
]


class NoFaceError(RuntimeError):
    """Raised by landmark detectors when no face is found in the image."""


# ---------------------------------------------------------------------------
# interfaces


class FrEmbedder(ABC):
    """Face recognition model: image -> unit-norm template.

    Concrete classes set ``backend_id`` (the model identity recorded in every
    template) and ``output_dim``. Backends own their preprocessing; callers
    hand over any valid image and the backend resamples as needed.
    """

    backend_id: str
    output_dim: int

    @abstractmethod
    def embed(self, image: np.ndarray) -> FaceTemplate:
        ...

    def embed_vjp(self, image: np.ndarray, grad_template: np.ndarray) -> np.ndarray:
        """VJP of ``embed`` at ``image``; image-shaped gradient.

        Only required of backends used as the training surrogate.
        """
        raise NotImplementedError(f"{self.backend_id} does not expose gradients")


class VlEncoder(ABC):
    """Joint vision-language encoder mapping images and texts to one space."""

    backend_id: str
    output_dim: int

    @abstractmethod
    def encode_image(self, image: np.ndarray) -> VLEmbedding:
        ...

    @abstractmethod
    def encode_text(self, text: str) -> VLEmbedding:
        ...


class ImageGenerator(ABC):
    """Frozen generator: intermediate latent w -> image in [0, 1]."""

    backend_id: str
    latent_dim: int
    resolution: int

    @abstractmethod
    def generate(self, w: LatentCode) -> np.ndarray:
        ...

    @abstractmethod
    def generate_vjp(self, w: LatentCode, grad_image: np.ndarray) -> np.ndarray:
        """VJP of ``generate``: image-shaped upstream -> latent-shaped grad."""
        ...


class MappingNetwork(ABC):
    """The generator's prior-noise-to-latent map, used to sample real latents."""

    backend_id: str
    input_dim: int
    output_dim: int

    @abstractmethod
    def map_latent(self, z: np.ndarray) -> LatentCode:
        ...


class LandmarkDetector(ABC):
    """68-point facial landmark detector."""

    backend_id: str

    @abstractmethod
    def detect(self, image: np.ndarray) -> LandmarkSet:
        """Detect landmarks; raises NoFaceError when no face is present."""
        ...


class PerceptualModel(ABC):
    """Perceptual feature distance between equal-shaped images."""

    backend_id: str

    @abstractmethod
    def distance(self, image_a: np.ndarray, image_b: np.ndarray) -> float:
        ...

    def distance_vjp(self, image_a: np.ndarray, image_b: np.ndarray) -> np.ndarray:
        """Gradient of ``distance`` w.r.t. the first image."""
        raise NotImplementedError(f"{self.backend_id} does not expose gradients")


class AttributeEncoder(ABC):
    """Feature extractor applied to facial region crops."""

    backend_id: str
    output_dim: int

    @abstractmethod
    def encode(self, crop: np.ndarray) -> np.ndarray:
        ...


# ---------------------------------------------------------------------------
# canonical landmark layout for the stub detector

_JAW_SPAN = (0.12, 0.88)


def _build_canonical_layout() -> np.ndarray:
    """68 landmarks in unit coordinates, one fixed synthetic face.

    The layout is designed so the three metric regions (eyes, nose, mouth)
    produce padded crop boxes that contain their own points and nobody
    else's; tests rely on that exclusivity.
    """
    pts = np.zeros((68, 2))
    # jawline 0-16: steep U so the chin arc clears the mouth crop box
    t = np.linspace(0.0, 1.0, 17)
    pts[0:17, 0] = _JAW_SPAN[0] + (_JAW_SPAN[1] - _JAW_SPAN[0]) * t
    pts[0:17, 1] = 0.42 + 0.52 * np.sqrt(np.sin(np.pi * t))
    # eyebrows 17-21 and 22-26: shallow arcs above the eyes
    u = np.linspace(0.0, 1.0, 5)
    arc = 0.27 - 0.02 * np.sin(np.pi * u)
    pts[17:22, 0] = np.linspace(0.20, 0.40, 5)
    pts[17:22, 1] = arc
    pts[22:27, 0] = np.linspace(0.60, 0.80, 5)
    pts[22:27, 1] = arc
    # nose 27-35: bridge 27-30 then base 31-35
    pts[27:31, 0] = 0.5
    pts[27:31, 1] = np.linspace(0.44, 0.55, 4)
    pts[31:36, 0] = np.linspace(0.42, 0.58, 5)
    pts[31:36, 1] = 0.61 + 0.02 * np.sin(np.pi * u)
    # eyes 36-41 and 42-47: flat hexagons
    ang6 = np.deg2rad(np.arange(6) * 60.0)
    for start, cx in ((36, 0.30), (42, 0.70)):
        pts[start:start + 6, 0] = cx + 0.055 * np.cos(ang6)
        pts[start:start + 6, 1] = 0.36 + 0.020 * np.sin(ang6)
    # mouth 48-59 outer, 60-67 inner
    ang12 = np.deg2rad(np.arange(12) * 30.0)
    pts[48:60, 0] = 0.50 + 0.160 * np.cos(ang12)
    pts[48:60, 1] = 0.74 + 0.050 * np.sin(ang12)
    ang8 = np.deg2rad(np.arange(8) * 45.0)
    pts[60:68, 0] = 0.50 + 0.100 * np.cos(ang8)
    pts[60:68, 1] = 0.74 + 0.028 * np.sin(ang8)
    return pts


_CANONICAL_LAYOUT = _build_canonical_layout()


def canonical_landmark_layout() -> np.ndarray:
    """Copy of the stub detector's unit-coordinate layout (68, 2)."""
    return _CANONICAL_LAYOUT.copy()


# ---------------------------------------------------------------------------
# stubs

def _resize_vjp(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of resize_nearest: scatter-add gradients to source pixels."""
    out_h, out_w = grad_out.shape[:2]
    rows = np.minimum((np.arange(out_h) * in_h) // out_h, in_h - 1).astype(int)
    cols = np.minimum((np.arange(out_w) * in_w) // out_w, in_w - 1).astype(int)
    grad_in = np.zeros((in_h, in_w) + grad_out.shape[2:])
    np.add.at(grad_in, (rows[:, None], cols[None, :]), grad_out)
    return grad_in


class StubFrEmbedder(FrEmbedder):
    """Seeded affine map + tanh, l2-normalized: a frozen stand-in embedder.

    Distinct seeds give models with genuinely different template spaces, so
    transfer experiments remain meaningful at desk scale.
    """

    def __init__(self, backend_id: str, output_dim: int, resolution: int, seed: int):
        self.backend_id = backend_id
        self.output_dim = int(output_dim)
        self.resolution = int(resolution)
        rng = np.random.default_rng(seed)
        n = self.resolution * self.resolution * 3
        self._w = rng.standard_normal((self.output_dim, n)) / np.sqrt(n)
        self._b = 0.1 * rng.standard_normal(self.output_dim)

    def _prepare(self, image: np.ndarray) -> np.ndarray:
        arr = check_image(image)
        if arr.shape[0] != self.resolution or arr.shape[1] != self.resolution:
            arr = resize_nearest(arr, self.resolution, self.resolution)
        return arr

    def embed(self, image: np.ndarray) -> FaceTemplate:
        arr = self._prepare(image)
        y = np.tanh(self._w @ arr.ravel() + self._b)
        return FaceTemplate(l2_normalize(y), self.backend_id)

    def embed_vjp(self, image: np.ndarray, grad_template: np.ndarray) -> np.ndarray:
        arr = check_image(image)
        h, w = arr.shape[:2]
        prepared = self._prepare(arr)
        y = np.tanh(self._w @ prepared.ravel() + self._b)
        g_pre = l2_normalize_vjp(y, np.asarray(grad_template, dtype=np.float64))
        g_flat = self._w.T @ (g_pre * (1.0 - y * y))
        g_img = g_flat.reshape(self.resolution, self.resolution, 3)
        if (h, w) != (self.resolution, self.resolution):
            g_img = _resize_vjp(g_img, h, w)
        return g_img


class StubVlEncoder(VlEncoder):
    """Deterministic stand-in for a joint image-text encoder.

    Images go through a seeded affine+tanh map; texts through a Gaussian
    draw keyed by sha256(text) and the encoder seed, so the same prompt
    always lands on the same unit vector in any process.
    """

    def __init__(self, backend_id: str, output_dim: int, resolution: int, seed: int):
        self.backend_id = backend_id
        self.output_dim = int(output_dim)
        self.resolution = int(resolution)
        self._seed = int(seed)
        rng = np.random.default_rng(seed)
        n = self.resolution * self.resolution * 3
        self._w = rng.standard_normal((self.output_dim, n)) / np.sqrt(n)
        self._b = 0.1 * rng.standard_normal(self.output_dim)

    def encode_image(self, image: np.ndarray) -> VLEmbedding:
        arr = check_image(image)
        if arr.shape[0] != self.resolution or arr.shape[1] != self.resolution:
            arr = resize_nearest(arr, self.resolution, self.resolution)
        y = np.tanh(self._w @ arr.ravel() + self._b)
        return VLEmbedding(l2_normalize(y), "image")

    def encode_text(self, text: str) -> VLEmbedding:
        if not text:
            raise ValueError("cannot encode an empty prompt")
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        words = np.frombuffer(digest, dtype=np.uint32)
        rng = np.random.default_rng([self._seed, *words.tolist()])
        y = np.tanh(rng.standard_normal(self.output_dim))
        return VLEmbedding(l2_normalize(y), "text")


class StubGenerator(ImageGenerator):
    """Seeded affine map from latent space to pixels, squashed into [0, 1]."""

    def __init__(self, backend_id: str, resolution: int, latent_dim: int, seed: int):
        self.backend_id = backend_id
        self.resolution = int(resolution)
        self.latent_dim = int(latent_dim)
        rng = np.random.default_rng(seed)
        n = self.resolution * self.resolution * 3
        self._w = rng.standard_normal((n, self.latent_dim)) / np.sqrt(self.latent_dim)
        self._b = 0.1 * rng.standard_normal(n)

    def generate(self, w: LatentCode) -> np.ndarray:
        if w.dim != self.latent_dim:
            raise ValueError(
                f"latent dim {w.dim} does not match generator dim {self.latent_dim}")
        y = np.tanh(self._w @ w.values + self._b)
        img = (y + 1.0) / 2.0
        return img.reshape(self.resolution, self.resolution, 3)

    def generate_vjp(self, w: LatentCode, grad_image: np.ndarray) -> np.ndarray:
        y = np.tanh(self._w @ w.values + self._b)
        g_pre = np.asarray(grad_image, dtype=np.float64).ravel() / 2.0
        return self._w.T @ (g_pre * (1.0 - y * y))


class StubMappingNetwork(MappingNetwork):
    """Prior-to-latent map: identity, or a fixed seeded affine transform."""

    def __init__(self, backend_id: str, latent_dim: int, seed: int, mode: str = "affine"):
        if mode not in ("affine", "identity"):
            raise ValueError(f"unknown mapping mode {mode!r}")
        self.backend_id = backend_id
        self.input_dim = int(latent_dim)
        self.output_dim = int(latent_dim)
        self.mode = mode
        rng = np.random.default_rng(seed)
        d = self.input_dim
        self._a = np.eye(d) + 0.3 * rng.standard_normal((d, d)) / np.sqrt(d)
        self._c = 0.2 * rng.standard_normal(d)

    def map_latent(self, z: np.ndarray) -> LatentCode:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.input_dim,):
            raise ValueError(f"expected prior noise of shape ({self.input_dim},)")
        if self.mode == "identity":
            return LatentCode(z.copy())
        return LatentCode(self._a @ z + self._c)


class StubLandmarkDetector(LandmarkDetector):
    """Places one canonical 68-point layout scaled to the image size.

    A perfectly uniform image carries no face signal, so it raises
    NoFaceError; callers decide whether to skip the sample or abort.
    """

    def __init__(self, backend_id: str = "landmark_stub"):
        self.backend_id = backend_id

    def detect(self, image: np.ndarray) -> LandmarkSet:
        arr = check_image(image)
        if float(arr.max()) == float(arr.min()):
            raise NoFaceError("no face found: image is uniform")
        h, w = arr.shape[:2]
        pts = _CANONICAL_LAYOUT * np.array([w, h], dtype=np.float64)
        lms = LandmarkSet(pts)
        lms.check_bounds(h, w)
        return lms


class StubPerceptualModel(PerceptualModel):
    """Mean squared difference of seeded random linear features."""

    def __init__(self, backend_id: str, resolution: int, seed: int, feature_dim: int = 64):
        self.backend_id = backend_id
        self.resolution = int(resolution)
        self.feature_dim = int(feature_dim)
        rng = np.random.default_rng(seed)
        n = self.resolution * self.resolution * 3
        self._p = rng.standard_normal((self.feature_dim, n)) / np.sqrt(n)

    def _features(self, image: np.ndarray) -> np.ndarray:
        arr = check_image(image)
        if arr.shape[0] != self.resolution or arr.shape[1] != self.resolution:
            arr = resize_nearest(arr, self.resolution, self.resolution)
        return self._p @ arr.ravel()

    def distance(self, image_a: np.ndarray, image_b: np.ndarray) -> float:
        if image_a.shape != image_b.shape:
            raise ValueError("perceptual distance requires equal image shapes")
        diff = self._features(image_a) - self._features(image_b)
        return float(np.mean(diff * diff))

    def distance_vjp(self, image_a: np.ndarray, image_b: np.ndarray) -> np.ndarray:
        if image_a.shape != image_b.shape:
            raise ValueError("perceptual distance requires equal image shapes")
        h, w = image_a.shape[:2]
        diff = self._features(image_a) - self._features(image_b)
        g_flat = (2.0 / self.feature_dim) * (self._p.T @ diff)
        g_img = g_flat.reshape(self.resolution, self.resolution, 3)
        if (h, w) != (self.resolution, self.resolution):
            g_img = _resize_vjp(g_img, h, w)
        return g_img


class StubAttributeEncoder(AttributeEncoder):
    """Seeded linear projection of a fixed-size region crop."""

    def __init__(self, backend_id: str, output_dim: int = 512, seed: int = 0,
                 crop_size: int = 32):
        self.backend_id = backend_id
        self.output_dim = int(output_dim)
        self.crop_size = int(crop_size)
        rng = np.random.default_rng(seed)
        n = self.crop_size * self.crop_size * 3
        self._p = rng.standard_normal((self.output_dim, n)) / np.sqrt(n)

    def encode(self, crop: np.ndarray) -> np.ndarray:
        arr = np.asarray(crop, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) crop, got shape {arr.shape}")
        if arr.shape[0] != self.crop_size or arr.shape[1] != self.crop_size:
            arr = resize_nearest(arr, self.crop_size, self.crop_size)
        return self._p @ arr.ravel()


# ---------------------------------------------------------------------------
# registry

Loader = Callable[[dict], object]
_BACKEND_LOADERS: dict[str, Loader] = {}


def register_backend_loader(kind: str, loader: Loader) -> None:
    """Register a constructor for a non-stub backend kind.

    The loader receives the backend's config dict (with any relative
    ``weights`` path already resolved against FACEINV_WEIGHTS_DIR) and must
    return an instance of the matching interface.
    """
    _BACKEND_LOADERS[kind] = loader


def _resolve_weights(spec: dict) -> dict:
    weights = spec.get("weights")
    if weights is None or os.path.isabs(weights):
        return spec
    root = os.environ.get("FACEINV_WEIGHTS_DIR", "")
    resolved = dict(spec)
    resolved["weights"] = os.path.join(root, weights) if root else weights
    return resolved


_STUB_KINDS = {
    "stub_fr": lambda s: StubFrEmbedder(s["id"], s["dim"], s["resolution"], s["seed"]),
    "stub_vl": lambda s: StubVlEncoder(s["id"], s["dim"], s["resolution"], s["seed"]),
    "stub_generator": lambda s: StubGenerator(
        s["id"], s["resolution"], s["latent_dim"], s["seed"]),
    "stub_mapping": lambda s: StubMappingNetwork(
        s["id"], s["latent_dim"], s["seed"], s.get("mode", "affine")),
    "stub_landmark": lambda s: StubLandmarkDetector(s["id"]),
    "stub_perceptual": lambda s: StubPerceptualModel(
        s["id"], s["resolution"], s["seed"], s.get("feature_dim", 64)),
    "stub_attribute": lambda s: StubAttributeEncoder(
        s["id"], s.get("dim", 512), s["seed"], s.get("crop_size", 32)),
}


def _construct(spec: dict) -> object:
    kind = spec.get("kind")
    if kind in _STUB_KINDS:
        return _STUB_KINDS[kind](spec)
    if kind in _BACKEND_LOADERS:
        return _BACKEND_LOADERS[kind](_resolve_weights(spec))
    raise ValueError(
        f"unknown backend kind {kind!r} for id {spec.get('id')!r}; known stubs: "
        f"{sorted(_STUB_KINDS)}; register real kinds via register_backend_loader "
        f"(weight paths resolve against FACEINV_WEIGHTS_DIR)")


@dataclass
class BackendRegistry:
    """All frozen models for one run, addressed by role.

    FR embedders are keyed by id because a run can involve several (leaked
    system, training surrogate, transfer targets). The remaining roles are
    singletons. Backends are immutable once built.
    """

    fr_embedders: dict[str, FrEmbedder]
    vl_encoder: VlEncoder
    generator: ImageGenerator
    mapping: MappingNetwork
    landmarks: LandmarkDetector
    perceptual: PerceptualModel
    attributes: AttributeEncoder

    def __post_init__(self):
        if not self.fr_embedders:
            raise ValueError("registry requires at least one FR embedder")
        for key, emb in self.fr_embedders.items():
            if key != emb.backend_id:
                raise ValueError(
                    f"FR embedder key {key!r} does not match backend id {emb.backend_id!r}")
        if self.generator.latent_dim != self.mapping.output_dim:
            raise ValueError(
                f"mapping output dim {self.mapping.output_dim} does not match "
                f"generator latent dim {self.generator.latent_dim}")

    def fr_embed(self, embedder_id: str, image: np.ndarray) -> FaceTemplate:
        try:
            emb = self.fr_embedders[embedder_id]
        except KeyError:
            raise KeyError(
                f"unknown FR embedder {embedder_id!r}; "
                f"available: {sorted(self.fr_embedders)}") from None
        return emb.embed(image)

    def vl_encode(self, inp: Union[np.ndarray, str]) -> VLEmbedding:
        if isinstance(inp, str):
            return self.vl_encoder.encode_text(inp)
        return self.vl_encoder.encode_image(inp)

    def generate(self, w: LatentCode) -> np.ndarray:
        return self.generator.generate(w)

    def sample_prior_latent(self, rng_seed: int) -> LatentCode:
        z = np.random.default_rng(rng_seed).standard_normal(self.mapping.input_dim)
        return self.mapping.map_latent(z)

    def detect_landmarks(self, image: np.ndarray) -> LandmarkSet:
        return self.landmarks.detect(image)


def build_registry(cfg: dict) -> BackendRegistry:
    """Construct a registry from the ``backends`` section of a run config."""
    fr_specs = cfg.get("fr_embedders", [])
    if not fr_specs:
        raise ValueError("config declares no FR embedders")
    embedders: dict[str, FrEmbedder] = {}
    for spec in fr_specs:
        emb = _construct(spec)
        if emb.backend_id in embedders:
            raise ValueError(f"duplicate FR embedder id {emb.backend_id!r}")
        embedders[emb.backend_id] = emb
    return BackendRegistry(
        fr_embedders=embedders,
        vl_encoder=_construct(cfg["vl_encoder"]),
        generator=_construct(cfg["generator"]),
        mapping=_construct(cfg["mapping"]),
        landmarks=_construct(cfg["landmarks"]),
        perceptual=_construct(cfg["perceptual"]),
        attributes=_construct(cfg["attributes"]),
    )
