"""Adversarial training of the latent projector.

The projector is trained so its outputs (i) live on the generator's latent
manifold and (ii) decode to images that match the source identity. A WGAN
critic provides (i): it maximizes the score gap between latents sampled
through the generator's own mapping network and projector outputs, with
weight clipping enforcing the Lipschitz constraint, taking several steps
per projector step. The projector minimizes the negated critic score plus
a reconstruction loss

    L_rec = lambda_pix * L_pix + lambda_id * L_id
          + lambda_attr * L_attr + lambda_perc * L_perc

where L_pix is mean squared pixel error, L_id = 1 - cos(surrogate template
of the reconstruction, source template) in [0, 2], L_attr is the MSE
between the semantic embeddings of source and reconstruction, and L_perc
is the perceptual backend distance. L_attr is piecewise constant in the
reconstruction (the per-region argmax snaps to bank entries), so it
contributes value but no gradient.

Gradients reach the projector through the frozen generator and surrogate
embedder via their VJP hooks. Both optimizers are Adam with a step decay.
Training history is append-only JSONL with no timestamps, so identical
(config, seed) runs produce identical logs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as _ckpt
from .adapter import TAAParams, taa_forward
from .backends import BackendRegistry
from .nn import (
    Adam,
    TrainingDivergedError,
    bias_uniform,
    kaiming_uniform,
    leaky_relu,
    leaky_relu_grad,
)
from .projector import FLPParams, _backward as _flp_backward, _forward_cached
from .semantics import PromptBank, SemanticEmbedding, aggregate_semantics
from .types import FaceTemplate, LatentCode, make_noise

__all__ = [
    "CriticParams",
    "LossWeights",
    "WGANConfig",
    "TrainState",
    "init_critic_params",
    "critic_forward",
    "critic_param_count",
    "wgan_losses",
    "reconstruction_loss",
    "train_flp",
    "save_critic",
    "load_critic",
]


@dataclass
class CriticParams:
    """Three-layer LeakyReLU MLP scoring latent codes."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    alpha: float = 0.2

    def __post_init__(self):
        h = self.w1.shape[0]
        if self.w2.shape != (self.w2.shape[0], h) or self.w3.shape[1] != self.w2.shape[0]:
            raise ValueError("inconsistent critic parameter shapes")
        if self.w3.shape[0] != 1 or self.b3.shape != (1,):
            raise ValueError("critic must produce a scalar score")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}


def init_critic_params(latent_dim: int, hidden: int = 64, alpha: float = 0.2,
                       rng_seed=0) -> CriticParams:
    """``rng_seed`` may be an int or a SeedSequence."""
    rng = np.random.default_rng(rng_seed)
    return CriticParams(
        w1=kaiming_uniform(rng, hidden, latent_dim),
        b1=bias_uniform(rng, hidden, latent_dim),
        w2=kaiming_uniform(rng, hidden, hidden),
        b2=bias_uniform(rng, hidden, hidden),
        w3=kaiming_uniform(rng, 1, hidden),
        b3=bias_uniform(rng, 1, hidden),
        alpha=alpha,
    )


def critic_param_count(params: CriticParams) -> int:
    return sum(a.size for a in params.to_arrays().values())


def _critic_batch(params: CriticParams, x: np.ndarray):
    """Scores for a (B, d) batch, with the cache needed for backward."""
    pre1 = x @ params.w1.T + params.b1
    act1 = leaky_relu(pre1, params.alpha)
    pre2 = act1 @ params.w2.T + params.b2
    act2 = leaky_relu(pre2, params.alpha)
    scores = act2 @ params.w3.T + params.b3          # (B, 1)
    cache = (x, pre1, act1, pre2, act2)
    return scores[:, 0], cache


def _critic_batch_backward(params: CriticParams, cache, g_scores: np.ndarray):
    """Param grads plus input grads for upstream propagation."""
    x, pre1, act1, pre2, act2 = cache
    g = g_scores[:, None]                             # (B, 1)
    grads = {"w3": g.T @ act2, "b3": g.sum(axis=0)}
    g_act2 = g @ params.w3
    g_pre2 = g_act2 * leaky_relu_grad(pre2, params.alpha)
    grads["w2"] = g_pre2.T @ act1
    grads["b2"] = g_pre2.sum(axis=0)
    g_act1 = g_pre2 @ params.w2
    g_pre1 = g_act1 * leaky_relu_grad(pre1, params.alpha)
    grads["w1"] = g_pre1.T @ x
    grads["b1"] = g_pre1.sum(axis=0)
    g_x = g_pre1 @ params.w1
    return grads, g_x


def critic_forward(params: CriticParams, w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (params.input_dim,):
        raise ValueError(f"expected a latent of shape ({params.input_dim},)")
    scores, _ = _critic_batch(params, w[None, :])
    return float(scores[0])


def wgan_losses(params: CriticParams, real: np.ndarray,
                fake: np.ndarray) -> tuple[float, float]:
    """(critic loss, projector adversarial loss) for two latent batches.

    The critic ascends E[C(real)] - E[C(fake)]; we return its negation so
    both players minimize. The projector term is -E[C(fake)].
    """
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    fake = np.atleast_2d(np.asarray(fake, dtype=np.float64))
    if real.size == 0 or fake.size == 0:
        raise ValueError("wgan losses need non-empty batches")
    real_scores, _ = _critic_batch(params, real)
    fake_scores, _ = _critic_batch(params, fake)
    gap = float(real_scores.mean() - fake_scores.mean())
    return -gap, -float(fake_scores.mean())


def _clip_critic(params: CriticParams, clip_value: float) -> None:
    for arr in params.to_arrays().values():
        np.clip(arr, -clip_value, clip_value, out=arr)


@dataclass
class LossWeights:
    lambda_pix: float = 1.0
    lambda_id: float = 1.0
    lambda_attr: float = 1.0
    lambda_perc: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_pix, self.lambda_id, self.lambda_attr, self.lambda_perc)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if all(v == 0 for v in vals):
            raise ValueError("at least one reconstruction weight must be positive")


@dataclass
class WGANConfig:
    epochs: int = 9
    batch_size: int = 32
    critic_steps: int = 5
    clip_value: float = 0.01
    learning_rate: float = 1e-1
    critic_learning_rate: float | None = None    # None -> learning_rate
    lr_decay: float = 0.5
    lr_decay_every: int = 3
    critic_hidden: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.critic_steps < 1:
            raise ValueError("epochs, batch_size and critic_steps must be positive")
        if self.clip_value <= 0:
            raise ValueError("clip_value must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise ValueError("invalid learning-rate schedule")


@dataclass
class TrainState:
    """One history row: losses and schedule state after a projector step."""

    epoch: int
    step: int
    losses: dict[str, float]
    lr: float
    critic_param_maxabs: float

    def record(self) -> dict:
        row = {"epoch": self.epoch, "step": self.step, "lr": self.lr,
               "critic_param_maxabs": self.critic_param_maxabs}
        row.update(self.losses)
        return row


def reconstruction_loss(image: np.ndarray, recon: np.ndarray,
                        template: FaceTemplate, registry: BackendRegistry,
                        bank: PromptBank, weights: LossWeights,
                        fr_loss_id: str) -> tuple[float, dict[str, float]]:
    """Weighted reconstruction loss and its individual terms.

    Every term is computed regardless of its weight so histories stay
    comparable across ablations; only the weighted total changes.
    """
    total, terms, _ = _reconstruction_terms(image, recon, template, registry,
                                            bank, weights, fr_loss_id,
                                            want_grad=False)
    return total, terms


def _reconstruction_terms(image, recon, template, registry, bank, weights,
                          fr_loss_id, want_grad: bool):
    if image.shape != recon.shape:
        raise ValueError("image and reconstruction shapes differ")
    npix = image.size
    diff = recon - image
    l_pix = float(np.mean(diff * diff))

    emb = registry.fr_embed(fr_loss_id, recon)
    t_unit = template.values / np.linalg.norm(template.values)
    e = emb.values                                   # unit norm by contract
    cos_id = float(e @ t_unit) / float(np.linalg.norm(e))
    l_id = 1.0 - cos_id

    s_src = aggregate_semantics(image, bank, registry.vl_encoder)
    s_rec = aggregate_semantics(recon, bank, registry.vl_encoder)
    d = s_rec.values - s_src.values
    l_attr = float(np.mean(d * d))

    l_perc = registry.perceptual.distance(recon, image)

    terms = {"l_pix": l_pix, "l_id": l_id, "l_attr": l_attr, "l_perc": l_perc}
    total = (weights.lambda_pix * l_pix + weights.lambda_id * l_id
             + weights.lambda_attr * l_attr + weights.lambda_perc * l_perc)

    g_img = None
    if want_grad:
        g_img = weights.lambda_pix * 2.0 * diff / npix
        if weights.lambda_id > 0:
            ne = float(np.linalg.norm(e))
            g_cos = t_unit / ne - cos_id * e / (ne * ne)
            g_img += weights.lambda_id * registry.fr_embedders[fr_loss_id].embed_vjp(
                recon, -g_cos)
        if weights.lambda_perc > 0:
            g_img += weights.lambda_perc * registry.perceptual.distance_vjp(recon, image)
        # l_attr: piecewise constant in the reconstruction, zero gradient a.e.
    return total, terms, g_img


def train_flp(images: Sequence[np.ndarray], taa: TAAParams, flp: FLPParams,
              critic: Optional[CriticParams], cfg: WGANConfig,
              weights: LossWeights, registry: BackendRegistry, bank: PromptBank,
              fr_loss_id: str, enable_attr_embedding: bool = True,
              log_path=None) -> tuple[FLPParams, CriticParams, list[TrainState]]:
    """Alternating WGAN training of projector and critic.

    ``images`` is the resolved training split. Templates come from the
    surrogate embedder ``fr_loss_id``; the adapter, generator, and all
    other backends stay frozen. Pass ``critic=None`` to initialize one from
    the config. Returns the trained projector, the critic, and the per-step
    history; optionally appends each history row to ``log_path`` as JSONL.
    """
    if len(images) == 0:
        raise ValueError("cannot train the projector on an empty dataset")
    if cfg.critic_hidden < 1:
        raise ValueError("critic_hidden must be positive")

    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(4)
    shuffle_rng = np.random.default_rng(seeds[0])
    noise_rng = np.random.default_rng(seeds[1])
    real_rng = np.random.default_rng(seeds[2])
    if critic is None:
        critic = init_critic_params(flp.latent_dim, cfg.critic_hidden,
                                    rng_seed=seeds[3])

    # frozen per-image quantities, computed once
    templates = [registry.fr_embed(fr_loss_id, img) for img in images]
    if enable_attr_embedding:
        s_hats = [taa_forward(taa, t) for t in templates]
    else:
        zero = np.zeros(taa.output_dim)
        s_hats = [SemanticEmbedding(zero, taa.region_order) for _ in templates]

    flp_opt = Adam(flp.to_arrays(), lr=cfg.learning_rate)
    critic_lr = (cfg.critic_learning_rate
                 if cfg.critic_learning_rate is not None else cfg.learning_rate)
    critic_opt = Adam(critic.to_arrays(), lr=critic_lr)

    def sample_real(count: int) -> np.ndarray:
        out = np.empty((count, flp.latent_dim))
        for i in range(count):
            seed = int(real_rng.integers(0, 2**63))
            out[i] = registry.sample_prior_latent(seed).values
        return out

    def fake_batch(idx: np.ndarray) -> np.ndarray:
        out = np.empty((len(idx), flp.latent_dim))
        for row, i in enumerate(idx):
            noise = make_noise(flp.noise_dim, int(noise_rng.integers(0, 2**63)))
            out[row], _, _ = _forward_cached(flp, noise.values,
                                             templates[i].values, s_hats[i].values)
        return out

    n = len(images)
    history: list[TrainState] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            decay = cfg.lr_decay ** (epoch // cfg.lr_decay_every)
            flp_opt.lr = cfg.learning_rate * decay
            critic_opt.lr = critic_lr * decay
            order = shuffle_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                b = len(idx)

                # critic phase: several ascent steps on the score gap
                critic_loss = 0.0
                for _ in range(cfg.critic_steps):
                    real = sample_real(b)
                    fake = fake_batch(idx)
                    real_scores, real_cache = _critic_batch(critic, real)
                    fake_scores, fake_cache = _critic_batch(critic, fake)
                    critic_loss = -(float(real_scores.mean()) - float(fake_scores.mean()))
                    g_real, _ = _critic_batch_backward(
                        critic, real_cache, np.full(b, -1.0 / b))
                    g_fake, _ = _critic_batch_backward(
                        critic, fake_cache, np.full(b, 1.0 / b))
                    critic_opt.step({k: g_real[k] + g_fake[k] for k in g_real})
                    _clip_critic(critic, cfg.clip_value)

                # projector phase: adversarial term plus reconstruction
                adv_sum = 0.0
                term_sums = {"l_pix": 0.0, "l_id": 0.0, "l_attr": 0.0, "l_perc": 0.0}
                rec_sum = 0.0
                grad_acc: dict[str, np.ndarray] = {}
                for i in idx:
                    noise = make_noise(flp.noise_dim, int(noise_rng.integers(0, 2**63)))
                    w_vals, _, cache = _forward_cached(
                        flp, noise.values, templates[i].values, s_hats[i].values)
                    score, crit_cache = _critic_batch(critic, w_vals[None, :])
                    adv_sum += -float(score[0])
                    _, g_w_adv = _critic_batch_backward(
                        critic, crit_cache, np.array([-1.0]))
                    w_code = LatentCode(w_vals)
                    recon = registry.generate(w_code)
                    rec_total, terms, g_img = _reconstruction_terms(
                        images[i], recon, templates[i], registry, bank, weights,
                        fr_loss_id, want_grad=True)
                    rec_sum += rec_total
                    for k in term_sums:
                        term_sums[k] += terms[k]
                    g_w = g_w_adv[0] + registry.generator.generate_vjp(w_code, g_img)
                    sample_grads = _flp_backward(flp, cache, g_w)
                    for k, g in sample_grads.items():
                        if k in grad_acc:
                            grad_acc[k] += g
                        else:
                            grad_acc[k] = g.copy()
                flp_opt.step({k: g / b for k, g in grad_acc.items()})

                losses = {
                    "critic_loss": critic_loss,
                    "adv_loss": adv_sum / b,
                    "l_pix": term_sums["l_pix"] / b,
                    "l_id": term_sums["l_id"] / b,
                    "l_attr": term_sums["l_attr"] / b,
                    "l_perc": term_sums["l_perc"] / b,
                    "rec_loss": rec_sum / b,
                    "total_loss": adv_sum / b + rec_sum / b,
                }
                for name, value in losses.items():
                    if not math.isfinite(value):
                        raise TrainingDivergedError(
                            f"{name} became non-finite at step {step}")
                maxabs = max(float(np.max(np.abs(a)))
                             for a in critic.to_arrays().values())
                state = TrainState(epoch=epoch, step=step, losses=losses,
                                   lr=flp_opt.lr, critic_param_maxabs=maxabs)
                history.append(state)
                if log_fh is not None:
                    log_fh.write(json.dumps(state.record(), sort_keys=True,
                                            separators=(",", ":")))
                    log_fh.write("\n")
                step += 1
    finally:
        if log_fh is not None:
            log_fh.close()
    return flp, critic, history


def save_critic(path, params: CriticParams) -> None:
    _ckpt.save_checkpoint(path, "critic", {"alpha": params.alpha}, params.to_arrays())


def load_critic(path) -> CriticParams:
    header, arrays = _ckpt.load_checkpoint(path, expected_kind="critic")
    return CriticParams(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"],
                        arrays["w3"], arrays["b3"], alpha=header["meta"]["alpha"])
