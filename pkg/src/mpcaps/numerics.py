"""Dense-array plumbing: seeded RNG, initialization, Adam, finite differences.

Tensors are plain ``numpy.ndarray`` values. Gradient checks run in float64;
training may run in float32.

The random stream is PCG64 (O'Neill 2014, as shipped by numpy) seeded with a
64-bit integer. Normal deviates are produced with the Box-Muller transform on
top of PCG64 doubles rather than numpy's ziggurat sampler, so the mapping from
seed to values is fully specified here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidArgument, NumericFailure

RNG_ALGORITHM = "pcg64+box-muller"


class Rng:
    """Seeded random stream (PCG64) with Box-Muller normals."""

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int = 0):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise InvalidArgument(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return low + (high - low) * self._gen.random(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, size) -> np.ndarray:
        """Standard normal samples via Box-Muller."""
        size = tuple(np.atleast_1d(size).tolist()) if not isinstance(size, tuple) else size
        n = int(np.prod(size)) if size else 1
        pairs = (n + 1) // 2
        # 1 - U lies in (0, 1], keeping the log finite
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        return z[:n].reshape(size)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream keyed by an integer, derived from this seed."""
        mixed = (self.seed * 0x9E3779B97F4A7C15 + int(key) * 0xBF58476D1CE4E5B9 + 1) % 2**64
        return Rng(mixed)

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = state["bit_generator"]


def init_normal(shape, sigma: float, rng: Rng, dtype=np.float64) -> np.ndarray:
    """I.i.d. zero-mean normal entries with standard deviation ``sigma``."""
    if not sigma > 0:
        raise InvalidArgument(f"sigma must be positive, got {sigma}")
    return (sigma * rng.normal(tuple(shape))).astype(dtype)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, like: np.ndarray, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros_like(like), np.zeros_like(like), 0, lr, beta1, beta2, eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_param, new_state)``."""
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise InvalidArgument(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_param = param - (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)
    new_state = AdamState(m.astype(param.dtype), v.astype(param.dtype), t,
                          state.lr, state.beta1, state.beta2, state.eps)
    return new_param, new_state


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is not modified)."""
    if not h > 0:
        raise InvalidArgument(f"h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericFailure(f"non-finite function value at entry {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
