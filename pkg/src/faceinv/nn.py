"""Shared numeric substrate for the trainable modules.

Everything runs in float64 numpy. Layers are plain (weight, bias) array
pairs; each trainable module wires its own forward/backward pass and hands
named gradient dicts to :class:`Adam`. Keeping the math explicit here makes
the finite-difference checks in the test suite a genuine second route.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "TrainingDivergedError",
    "kaiming_uniform",
    "bias_uniform",
    "relu",
    "relu_grad",
    "leaky_relu",
    "leaky_relu_grad",
    "softmax",
    "l2_normalize",
    "l2_normalize_vjp",
    "cosine",
    "Adam",
    "spawn_rngs",
]


class TrainingDivergedError(RuntimeError):
    """Raised when a training loop encounters a non-finite loss term."""


def kaiming_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    """Fan-in scaled uniform weight init with bound sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def bias_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=fan_out)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(pre: np.ndarray) -> np.ndarray:
    """Derivative of relu evaluated at the pre-activation."""
    return (pre > 0.0).astype(np.float64)


def leaky_relu(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(x >= 0.0, x, alpha * x)


def leaky_relu_grad(pre: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(pre >= 0.0, 1.0, alpha)


def softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot l2-normalize a zero vector")
    return v / n


def l2_normalize_vjp(v: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """VJP of v -> v / ||v||: (g - u (u . g)) / ||v|| with u the unit vector."""
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot l2-normalize a zero vector")
    u = v / n
    return (grad_out - u * float(u @ grad_out)) / n


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; raises on a zero-norm argument."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(u @ v) / (nu * nv)


class Adam:
    """Adam over a dict of named parameter arrays, updated in place.

    The caller keeps ownership of the arrays; ``step`` applies the update to
    the same storage so parameter dataclasses see it immediately. ``lr`` is a
    plain attribute so schedules can reassign it between steps.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        unknown = set(grads) - set(self.params)
        if unknown:
            raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n independent generators derived from one seed via SeedSequence.spawn."""
    root = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in root.spawn(n)]
