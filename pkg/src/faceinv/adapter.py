"""Template-to-attribute adapter.

At attack time only the leaked template is available, so the attacker needs
a map from template space into the semantic space the prompt bank spans. A
two-layer MLP (FC, ReLU, FC) is trained to regress each training image's
semantic embedding from its template; the loss mixes a summed squared error
with a cosine alignment term,

    L = lambda_mse * ||s - s_hat||^2 + lambda_cos * (1 - cos(s, s_hat)),

with the squared error summed over coordinates, not averaged. Training uses
Adam at a fixed learning rate for a fixed number of epochs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import checkpoint as _ckpt
from .nn import Adam, TrainingDivergedError, bias_uniform, kaiming_uniform, relu, relu_grad
from .semantics import SemanticEmbedding
from .types import FaceTemplate

__all__ = [
    "TAAParams",
    "TAATrainConfig",
    "init_taa_params",
    "taa_forward",
    "semantic_loss",
    "train_taa",
    "save_taa",
    "load_taa",
]

ArrayLike = Union[np.ndarray, SemanticEmbedding]


@dataclass
class TAAParams:
    """Weights of the two-layer adapter plus the region order it predicts."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    region_order: tuple[str, ...]

    def __post_init__(self):
        self.region_order = tuple(self.region_order)
        h, d_t = self.w1.shape
        out = self.w2.shape[0]
        if self.b1.shape != (h,) or self.w2.shape[1] != h or self.b2.shape != (out,):
            raise ValueError("inconsistent adapter parameter shapes")
        if not self.region_order or out % len(self.region_order) != 0:
            raise ValueError(
                f"output dim {out} is not a multiple of {len(self.region_order)} regions")

    @property
    def template_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.w2.shape[0]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class TAATrainConfig:
    lambda_mse: float = 0.7
    lambda_cos: float = 0.3
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    hidden_dim: int | None = None  # None -> 2 * template dim
    rng_seed: int = 0

    def __post_init__(self):
        if self.lambda_mse < 0 or self.lambda_cos < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def init_taa_params(d_template: int, output_dim: int, region_order: Sequence[str],
                    hidden_dim: int | None = None, rng_seed: int = 0) -> TAAParams:
    hidden = hidden_dim if hidden_dim is not None else 2 * d_template
    rng = np.random.default_rng(rng_seed)
    return TAAParams(
        w1=kaiming_uniform(rng, hidden, d_template),
        b1=bias_uniform(rng, hidden, d_template),
        w2=kaiming_uniform(rng, output_dim, hidden),
        b2=bias_uniform(rng, output_dim, hidden),
        region_order=tuple(region_order),
    )


def taa_forward(params: TAAParams, template: FaceTemplate) -> SemanticEmbedding:
    """Predict a semantic embedding from a template.

    The result carries no winner indices: it lives in the bank's embedding
    space but is not a concatenation of bank entries.
    """
    if template.dim != params.template_dim:
        raise ValueError(
            f"template dim {template.dim} does not match adapter dim "
            f"{params.template_dim}")
    hidden = relu(params.w1 @ template.values + params.b1)
    return SemanticEmbedding(params.w2 @ hidden + params.b2, params.region_order)


def _values(x: ArrayLike) -> np.ndarray:
    if isinstance(x, SemanticEmbedding):
        return x.values
    return np.asarray(x, dtype=np.float64)


def semantic_loss(target: ArrayLike, predicted: ArrayLike,
                  lambda_mse: float = 0.7, lambda_cos: float = 0.3) -> float:
    """Adapter training loss for one (target, prediction) pair.

    Raises if the vectors disagree in length or are both zero. When exactly
    one vector is zero the cosine is taken as 0 (full cosine penalty, zero
    gradient); this happens transiently for zero-initialized adapters and
    must not abort training.
    """
    loss, _ = _semantic_loss_grad(_values(target), _values(predicted),
                                  lambda_mse, lambda_cos)
    return loss


def _semantic_loss_grad(s: np.ndarray, s_hat: np.ndarray,
                        lambda_mse: float, lambda_cos: float) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the prediction."""
    if s.shape != s_hat.shape:
        raise ValueError(f"length mismatch: target {s.shape} vs prediction {s_hat.shape}")
    ns = float(np.linalg.norm(s))
    np_ = float(np.linalg.norm(s_hat))
    if ns == 0.0 and np_ == 0.0:
        raise ValueError("semantic loss undefined: target and prediction are both zero")
    diff = s_hat - s
    sq = float(diff @ diff)  # summed, not averaged
    grad = lambda_mse * 2.0 * diff
    if ns == 0.0 or np_ == 0.0:
        cos = 0.0
    else:
        cos = float(s @ s_hat) / (ns * np_)
        grad = grad - lambda_cos * (s / (ns * np_) - cos * s_hat / (np_ * np_))
    return lambda_mse * sq + lambda_cos * (1.0 - cos), grad


def train_taa(pairs: Sequence[tuple[FaceTemplate, SemanticEmbedding]],
              cfg: TAATrainConfig) -> tuple[TAAParams, list[float]]:
    """Fit the adapter on (template, semantic embedding) pairs.

    Returns the trained parameters and the mean per-sample loss for each
    epoch. Aborts with TrainingDivergedError on a non-finite loss.
    """
    if not pairs:
        raise ValueError("cannot train the adapter on an empty dataset")
    d_t = pairs[0][0].dim
    out_dim = pairs[0][1].values.size
    region_order = pairs[0][1].region_order
    for t, s in pairs:
        if t.dim != d_t or s.values.size != out_dim or s.region_order != region_order:
            raise ValueError("inconsistent dimensions across adapter training pairs")
    t_all = np.stack([t.values for t, _ in pairs])
    s_all = np.stack([s.values for _, s in pairs])

    params = init_taa_params(d_t, out_dim, region_order,
                             hidden_dim=cfg.hidden_dim, rng_seed=cfg.rng_seed)
    opt = Adam(params.to_arrays(), lr=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.rng_seed).spawn(1)[0])

    n = len(pairs)
    history: list[float] = []
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tb, sb = t_all[idx], s_all[idx]
            h_pre = tb @ params.w1.T + params.b1
            h_act = relu(h_pre)
            s_hat = h_act @ params.w2.T + params.b2

            g_shat = np.empty_like(s_hat)
            batch_loss = 0.0
            for i in range(len(idx)):
                li, gi = _semantic_loss_grad(sb[i], s_hat[i],
                                             cfg.lambda_mse, cfg.lambda_cos)
                batch_loss += li
                g_shat[i] = gi
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError("adapter loss became non-finite")
            total += batch_loss
            g_shat /= len(idx)  # batch gradient is the mean of sample gradients
            g_h = (g_shat @ params.w2) * relu_grad(h_pre)
            opt.step({
                "w1": g_h.T @ tb,
                "b1": g_h.sum(axis=0),
                "w2": g_shat.T @ h_act,
                "b2": g_shat.sum(axis=0),
            })
        history.append(total / n)
    return params, history


def save_taa(path, params: TAAParams) -> None:
    meta = {"region_order": list(params.region_order)}
    _ckpt.save_checkpoint(path, "taa", meta, params.to_arrays())


def load_taa(path) -> TAAParams:
    header, arrays = _ckpt.load_checkpoint(path, expected_kind="taa")
    return TAAParams(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"],
                     tuple(header["meta"]["region_order"]))
