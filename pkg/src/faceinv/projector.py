"""Latent projector: fuse noise, template, and predicted semantics into w.

The projector maps (noise n, template t, predicted semantic embedding
s_hat) to a point in the generator's latent space. The template is
projected to the model width; s_hat is split into one token per region and
projected likewise; multi-head attention with the projected template as the
query attends over the region tokens; the fused vector

    z_f = [ n / ||n||  ||  t'  ||  s_tilde ]

runs through an MLP trunk of affine + LeakyReLU blocks ending in an affine
map to the latent dimension.

Two ablation variants are built in: ``none`` replaces attention by the mean
of the projected tokens, and ``mha_selfquery`` keeps attention but queries
with the mean token instead of the template, severing the conditional link.

The backward pass is written out by hand (including softmax attention and
the normalize on the noise slice) and returns named gradients for Adam; the
test suite checks it against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as _ckpt
from .nn import (
    bias_uniform,
    kaiming_uniform,
    l2_normalize,
    leaky_relu,
    leaky_relu_grad,
    softmax,
)
from .semantics import SemanticEmbedding
from .types import FaceTemplate, LatentCode, NoiseVector

__all__ = [
    "ATTENTION_MODES",
    "AttentionTrace",
    "FLPParams",
    "init_flp_params",
    "conditional_attention",
    "flp_forward",
    "save_flp",
    "load_flp",
]

ATTENTION_MODES = ("conditional", "none", "mha_selfquery")


@dataclass
class AttentionTrace:
    """Per-head attention weights over region tokens, shape (heads, regions).

    Every row is a probability vector; validated on construction so a
    broken softmax cannot slip through silently.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"expected (heads, regions) weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or w.min() < 0.0:
            raise ValueError("attention weights must be finite and non-negative")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("attention rows must sum to 1")
        self.weights = w


@dataclass
class FLPParams:
    """All projector weights plus the structural choices baked into them."""

    wt: np.ndarray
    bt: np.ndarray
    ws: np.ndarray
    bs: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    trunk: list[tuple[np.ndarray, np.ndarray]]
    wf: np.ndarray
    bf: np.ndarray
    noise_dim: int
    n_regions: int
    alpha: float = 0.2
    attention_mode: str = "conditional"

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(
                f"unknown attention mode {self.attention_mode!r}; "
                f"choose from {ATTENTION_MODES}")
        m = self.wt.shape[0]
        heads, head_dim, q_in = self.wq.shape
        if heads * head_dim != m or q_in != m:
            raise ValueError("attention projections do not match the model width")
        if self.ws.shape[0] != m or self.wo.shape != (m, m):
            raise ValueError("token/output projections do not match the model width")
        if not self.trunk:
            raise ValueError("trunk must contain at least one block")
        if self.trunk[0][0].shape[1] != self.noise_dim + 2 * m:
            raise ValueError("first trunk block does not match the fused vector length")

    @property
    def d_model(self) -> int:
        return self.wt.shape[0]

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def template_dim(self) -> int:
        return self.wt.shape[1]

    @property
    def segment_dim(self) -> int:
        return self.ws.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.wf.shape[0]

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"wt": self.wt, "bt": self.bt, "ws": self.ws, "bs": self.bs,
               "wq": self.wq, "bq": self.bq, "wk": self.wk, "bk": self.bk,
               "wv": self.wv, "bv": self.bv, "wo": self.wo, "bo": self.bo,
               "wf": self.wf, "bf": self.bf}
        for i, (w, b) in enumerate(self.trunk):
            out[f"trunk{i}_w"] = w
            out[f"trunk{i}_b"] = b
        return out


def init_flp_params(d_template: int, segment_dim: int, n_regions: int,
                    noise_dim: int, latent_dim: int, d_model: int | None = None,
                    n_heads: int = 1, trunk_blocks: int = 3,
                    trunk_width: int | None = None, alpha: float = 0.2,
                    attention_mode: str = "conditional", rng_seed: int = 0) -> FLPParams:
    m = d_model if d_model is not None else segment_dim
    if m % n_heads != 0:
        raise ValueError(f"model width {m} is not divisible by {n_heads} heads")
    width = trunk_width if trunk_width is not None else 4 * m
    if trunk_blocks < 1:
        raise ValueError("trunk needs at least one block")
    head_dim = m // n_heads
    rng = np.random.default_rng(rng_seed)

    def head_stack():
        w = np.stack([kaiming_uniform(rng, head_dim, m) for _ in range(n_heads)])
        b = np.stack([bias_uniform(rng, head_dim, m) for _ in range(n_heads)])
        return w, b

    wq, bq = head_stack()
    wk, bk = head_stack()
    wv, bv = head_stack()
    trunk = []
    in_dim = noise_dim + 2 * m
    for _ in range(trunk_blocks):
        trunk.append((kaiming_uniform(rng, width, in_dim),
                      bias_uniform(rng, width, in_dim)))
        in_dim = width
    return FLPParams(
        wt=kaiming_uniform(rng, m, d_template), bt=bias_uniform(rng, m, d_template),
        ws=kaiming_uniform(rng, m, segment_dim), bs=bias_uniform(rng, m, segment_dim),
        wq=wq, bq=bq, wk=wk, bk=bk, wv=wv, bv=bv,
        wo=kaiming_uniform(rng, m, m), bo=bias_uniform(rng, m, m),
        trunk=trunk,
        wf=kaiming_uniform(rng, latent_dim, in_dim), bf=bias_uniform(rng, latent_dim, in_dim),
        noise_dim=noise_dim, n_regions=n_regions,
        alpha=alpha, attention_mode=attention_mode,
    )


def conditional_attention(params: FLPParams, query: np.ndarray,
                          tokens: np.ndarray) -> tuple[np.ndarray, AttentionTrace]:
    """Multi-head attention of one query vector over the token rows.

    ``query`` has length d_model, ``tokens`` is (R, d_model); returns the
    fused vector (d_model,) and the per-head attention weights.
    """
    out, trace, _ = _attention_cached(params, np.asarray(query, dtype=np.float64),
                                      np.asarray(tokens, dtype=np.float64))
    return out, trace


def _attention_cached(params: FLPParams, q_in: np.ndarray, tok: np.ndarray):
    m = params.d_model
    if q_in.shape != (m,):
        raise ValueError(f"query must have shape ({m},), got {q_in.shape}")
    if tok.ndim != 2 or tok.shape[1] != m:
        raise ValueError(f"tokens must have shape (R, {m}), got {tok.shape}")
    head_dim = m // params.n_heads
    scale = 1.0 / math.sqrt(head_dim)
    q = np.einsum("hdm,m->hd", params.wq, q_in) + params.bq          # (H, dh)
    k = np.einsum("hdm,rm->hrd", params.wk, tok) + params.bk[:, None, :]
    v = np.einsum("hdm,rm->hrd", params.wv, tok) + params.bv[:, None, :]
    scores = np.einsum("hrd,hd->hr", k, q) * scale                   # (H, R)
    attn = softmax(scores)
    heads = np.einsum("hr,hrd->hd", attn, v)                         # (H, dh)
    o = heads.ravel()                                                # head-major concat
    out = params.wo @ o + params.bo
    cache = {"q_in": q_in, "tok": tok, "q": q, "k": k, "v": v,
             "attn": attn, "o": o, "scale": scale}
    return out, AttentionTrace(attn.copy()), cache


def _attention_backward(params: FLPParams, cache: dict, g_out: np.ndarray):
    """Gradients of the attention block; returns (param grads, g_query, g_tokens)."""
    heads_n = params.n_heads
    head_dim = params.d_model // heads_n
    q_in, tok = cache["q_in"], cache["tok"]
    k, v, attn, scale = cache["k"], cache["v"], cache["attn"], cache["scale"]

    g_o = params.wo.T @ g_out
    g_heads = g_o.reshape(heads_n, head_dim)
    g_attn = np.einsum("hrd,hd->hr", v, g_heads)
    g_v = np.einsum("hr,hd->hrd", attn, g_heads)
    # softmax rows: a * (g - <a, g>)
    g_scores = attn * (g_attn - np.sum(attn * g_attn, axis=1, keepdims=True))
    g_q = np.einsum("hrd,hr->hd", k, g_scores) * scale
    g_k = np.einsum("hr,hd->hrd", g_scores, cache["q"]) * scale

    grads = {
        "wo": np.outer(g_out, cache["o"]),
        "bo": g_out.copy(),
        "wq": np.einsum("hd,m->hdm", g_q, q_in),
        "bq": g_q,
        "wk": np.einsum("hrd,rm->hdm", g_k, tok),
        "bk": g_k.sum(axis=1),
        "wv": np.einsum("hrd,rm->hdm", g_v, tok),
        "bv": g_v.sum(axis=1),
    }
    g_query = np.einsum("hdm,hd->m", params.wq, g_q)
    g_tokens = np.einsum("hrd,hdm->rm", g_k, params.wk)
    g_tokens += np.einsum("hrd,hdm->rm", g_v, params.wv)
    return grads, g_query, g_tokens


def _forward_cached(params: FLPParams, n_vals: np.ndarray, t_vals: np.ndarray,
                    s_vals: np.ndarray):
    m = params.d_model
    r = params.n_regions
    t_proj = params.wt @ t_vals + params.bt
    tokens = s_vals.reshape(r, params.segment_dim)
    tok = tokens @ params.ws.T + params.bs                           # (R, m)

    attn_cache = None
    if params.attention_mode == "none":
        s_tilde = tok.mean(axis=0)
        trace = AttentionTrace(np.full((params.n_heads, r), 1.0 / r))
    else:
        q_in = t_proj if params.attention_mode == "conditional" else tok.mean(axis=0)
        s_tilde, trace, attn_cache = _attention_cached(params, q_in, tok)

    z_f = np.concatenate([l2_normalize(n_vals), t_proj, s_tilde])
    acts = [z_f]
    pres = []
    x = z_f
    for w, b in params.trunk:
        pre = w @ x + b
        pres.append(pre)
        x = leaky_relu(pre, params.alpha)
        acts.append(x)
    w_out = params.wf @ x + params.bf
    cache = {"t_vals": t_vals, "tokens": tokens, "tok": tok, "t_proj": t_proj,
             "attn": attn_cache, "acts": acts, "pres": pres, "m": m}
    return w_out, trace, cache


def _backward(params: FLPParams, cache: dict, g_w: np.ndarray) -> dict[str, np.ndarray]:
    """Named parameter gradients for one sample; inputs are frozen upstream."""
    m = cache["m"]
    grads: dict[str, np.ndarray] = {}
    x_last = cache["acts"][-1]
    grads["wf"] = np.outer(g_w, x_last)
    grads["bf"] = g_w.copy()
    g_x = params.wf.T @ g_w
    for i in reversed(range(len(params.trunk))):
        w, _ = params.trunk[i]
        g_pre = g_x * leaky_relu_grad(cache["pres"][i], params.alpha)
        grads[f"trunk{i}_w"] = np.outer(g_pre, cache["acts"][i])
        grads[f"trunk{i}_b"] = g_pre
        g_x = w.T @ g_pre
    # fused vector: [normalized noise | t_proj | s_tilde]; noise is an input
    d_n = params.noise_dim
    g_tproj = g_x[d_n:d_n + m].copy()
    g_stilde = g_x[d_n + m:]

    r = params.n_regions
    head_shape = params.wq.shape
    if params.attention_mode == "none":
        g_tok = np.tile(g_stilde / r, (r, 1))
        grads.update({"wq": np.zeros(head_shape), "bq": np.zeros(head_shape[:2]),
                      "wk": np.zeros(head_shape), "bk": np.zeros(head_shape[:2]),
                      "wv": np.zeros(head_shape), "bv": np.zeros(head_shape[:2]),
                      "wo": np.zeros((m, m)), "bo": np.zeros(m)})
    else:
        attn_grads, g_query, g_tok = _attention_backward(params, cache["attn"], g_stilde)
        grads.update(attn_grads)
        if params.attention_mode == "conditional":
            g_tproj += g_query
        else:  # mean-token query: spread evenly over rows
            g_tok += g_query / r

    grads["ws"] = g_tok.T @ cache["tokens"]
    grads["bs"] = g_tok.sum(axis=0)
    grads["wt"] = np.outer(g_tproj, cache["t_vals"])
    grads["bt"] = g_tproj
    return grads


def flp_forward(params: FLPParams, noise: NoiseVector, template: FaceTemplate,
                s_hat: SemanticEmbedding) -> tuple[LatentCode, AttentionTrace]:
    """Project (noise, template, predicted semantics) into the latent space."""
    if noise.dim != params.noise_dim:
        raise ValueError(f"noise dim {noise.dim} does not match {params.noise_dim}")
    if template.dim != params.template_dim:
        raise ValueError(
            f"template dim {template.dim} does not match {params.template_dim}")
    expected = params.n_regions * params.segment_dim
    if s_hat.values.size != expected:
        raise ValueError(
            f"semantic embedding length {s_hat.values.size} does not match "
            f"{params.n_regions} regions x {params.segment_dim}")
    w, trace, _ = _forward_cached(params, noise.values, template.values, s_hat.values)
    return LatentCode(w), trace


def save_flp(path, params: FLPParams) -> None:
    meta = {"noise_dim": params.noise_dim, "n_regions": params.n_regions,
            "alpha": params.alpha, "attention_mode": params.attention_mode,
            "trunk_blocks": len(params.trunk)}
    _ckpt.save_checkpoint(path, "flp", meta, params.to_arrays())


def load_flp(path) -> FLPParams:
    header, arrays = _ckpt.load_checkpoint(path, expected_kind="flp")
    meta = header["meta"]
    trunk = []
    for i in range(meta["trunk_blocks"]):
        trunk.append((arrays[f"trunk{i}_w"], arrays[f"trunk{i}_b"]))
    return FLPParams(
        wt=arrays["wt"], bt=arrays["bt"], ws=arrays["ws"], bs=arrays["bs"],
        wq=arrays["wq"], bq=arrays["bq"], wk=arrays["wk"], bk=arrays["bk"],
        wv=arrays["wv"], bv=arrays["bv"], wo=arrays["wo"], bo=arrays["bo"],
        trunk=trunk, wf=arrays["wf"], bf=arrays["bf"],
        noise_dim=meta["noise_dim"], n_regions=meta["n_regions"],
        alpha=meta["alpha"], attention_mode=meta["attention_mode"],
    )
