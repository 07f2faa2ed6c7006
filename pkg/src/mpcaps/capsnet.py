"""Standard capsule machinery: conv front-end, primary capsules, squash, votes, routing.

Every forward op has a hand-written backward counterpart. Arrays are
batch-first: capsules are ``(B, n, d)``, votes ``(B, n_child, n_parent, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument


@dataclass(frozen=True)
class ConvLayerConfig:
    in_channels: int
    out_channels: int = 256
    kernel_size: int = 9
    stride: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise InvalidArgument(f"stride must be 1 or 2, got {self.stride}")
        if min(self.in_channels, self.out_channels, self.kernel_size) < 1:
            raise InvalidArgument(f"conv extents must be positive: {self}")

    def output_size(self, size: int) -> int:
        if size < self.kernel_size:
            raise InvalidArgument(f"kernel {self.kernel_size} larger than input extent {size}")
        return (size - self.kernel_size) // self.stride + 1


@dataclass
class ConvCache:
    x: np.ndarray
    windows: np.ndarray
    active: np.ndarray
    stride: int


def conv_forward(x, cfg: ConvLayerConfig, weight, bias=None, return_cache=False):
    """Valid cross-correlation with stride followed by ReLU.

    ``x`` is ``(B, C, H, W)``, ``weight`` is ``(O, C, k, k)``; returns ``(B, O, Ho, Wo)``.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise InvalidArgument(f"expected input (B, {cfg.in_channels}, H, W), got {x.shape}")
    k, s = cfg.kernel_size, cfg.stride
    if weight.shape != (cfg.out_channels, cfg.in_channels, k, k):
        raise InvalidArgument(f"weight shape {weight.shape} does not match {cfg}")
    cfg.output_size(x.shape[2])
    cfg.output_size(x.shape[3])
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    z = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        z = z + bias[None, :, None, None]
    active = z > 0
    out = np.where(active, z, 0).astype(x.dtype, copy=False)
    if return_cache:
        return out, ConvCache(x, windows, active, s)
    return out


def conv_backward(grad_out, cache: ConvCache, weight, need_input_grad=True):
    """Returns ``(grad_x, grad_weight, grad_bias)``; ``grad_x`` is None if not requested."""
    gz = np.where(cache.active, grad_out, 0)
    grad_bias = gz.sum(axis=(0, 2, 3))
    grad_weight = np.tensordot(gz, cache.windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_x = None
    if need_input_grad:
        k = weight.shape[2]
        s = cache.stride
        _, _, ho, wo = gz.shape
        cols = np.tensordot(gz, weight, axes=([1], [0]))  # (B, Ho, Wo, C, k, k)
        grad_x = np.zeros_like(cache.x)
        for ki in range(k):
            for kj in range(k):
                grad_x[:, :, ki:ki + s * (ho - 1) + 1:s, kj:kj + s * (wo - 1) + 1:s] += (
                    cols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                )
    return grad_x, grad_weight, grad_bias


def squash(s: np.ndarray) -> np.ndarray:
    """``|s|^2 / (1 + |s|^2) * s / |s|`` along the last axis; zero maps to zero."""
    n = np.sqrt(np.sum(s * s, axis=-1, keepdims=True))
    return s * (n / (1.0 + n * n))


def squash_backward(s: np.ndarray, grad_v: np.ndarray) -> np.ndarray:
    n2 = np.sum(s * s, axis=-1, keepdims=True)
    n = np.sqrt(n2)
    g = n / (1.0 + n2)
    dg = (1.0 - n2) / (1.0 + n2) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        radial = np.where(n > 0, dg / n, 0.0)
    return g * grad_v + radial * np.sum(s * grad_v, axis=-1, keepdims=True) * s


def capsule_norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


@dataclass
class PrimaryCache:
    pre_squash: np.ndarray
    feature_shape: tuple


def form_primary_capsules(features: np.ndarray, d1: int, return_cache=False):
    """Reshape ``(B, D, H, W)`` features into ``(B, H*W*D/d1, d1)`` squashed capsules.

    Capsule index is ``(y * W + x) * (D // d1) + block``; each block is a
    contiguous run of ``d1`` channels at one spatial position.
    """
    features = np.asarray(features)
    if features.ndim != 4:
        raise InvalidArgument(f"expected (B, D, H, W) features, got shape {features.shape}")
    b, depth, h, w = features.shape
    if d1 < 1 or depth % d1:
        raise InvalidArgument(f"feature depth {depth} not divisible by capsule dim {d1}")
    s = features.transpose(0, 2, 3, 1).reshape(b, h * w * (depth // d1), d1)
    v = squash(s)
    if return_cache:
        return v, PrimaryCache(s, features.shape)
    return v


def primary_backward(grad_v: np.ndarray, cache: PrimaryCache) -> np.ndarray:
    b, depth, h, w = cache.feature_shape
    gs = squash_backward(cache.pre_squash, grad_v)
    return gs.reshape(b, h, w, depth).transpose(0, 3, 1, 2)


def compute_votes(children: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``votes[b, i, j] = weights[i, j] @ children[b, i]``.

    ``children`` is ``(B, n, d_in)``; ``weights`` is ``(n, m, d_out, d_in)``.
    """
    if children.ndim != 3:
        raise InvalidArgument(f"expected (B, n, d) capsules, got {children.shape}")
    bsz, n, d_in = children.shape
    if weights.ndim != 4 or weights.shape[0] != n or weights.shape[3] != d_in:
        raise InvalidArgument(
            f"transform shape {weights.shape} incompatible with {n} children of dim {d_in}"
        )
    _, m, d_out, _ = weights.shape
    wr = weights.reshape(n, m * d_out, d_in)
    votes = np.matmul(children.transpose(1, 0, 2), wr.transpose(0, 2, 1))
    return votes.reshape(n, bsz, m, d_out).transpose(1, 0, 2, 3)


def votes_backward(grad_votes, children, weights):
    """Returns ``(grad_children, grad_weights)``."""
    bsz, n, d_in = children.shape
    _, m, d_out, _ = weights.shape
    gr = grad_votes.transpose(1, 0, 2, 3).reshape(n, bsz, m * d_out)
    ut = children.transpose(1, 0, 2)
    grad_w = np.matmul(ut.transpose(0, 2, 1), gr).reshape(n, d_in, m, d_out).transpose(0, 2, 3, 1)
    grad_u = np.matmul(gr, weights.reshape(n, m * d_out, d_in)).transpose(1, 0, 2)
    return grad_u, grad_w


def coupling_from_logits(b: np.ndarray) -> np.ndarray:
    """Softmax over the last (parent) axis, max-shifted."""
    z = b - b.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class RoutingState:
    logits: np.ndarray
    coupling: np.ndarray
    iterations: int
    # per-iteration (coupling, pre-squash s, v), kept for the backward pass
    history: list = field(default_factory=list, repr=False)


def dynamic_routing(votes: np.ndarray, r: int = 3):
    """Routing by agreement over ``(B, n, m, d)`` votes. Returns ``(v, state)``.

    Logits start at zero; the agreement update is skipped after the last iteration.
    """
    if r < 1:
        raise InvalidArgument(f"routing iterations must be >= 1, got {r}")
    if votes.ndim != 4:
        raise InvalidArgument(f"expected (B, n, m, d) votes, got {votes.shape}")
    # parent-major copy: (B, m, n, d)
    up = np.ascontiguousarray(votes.transpose(0, 2, 1, 3))
    bsz, n, m, _ = votes.shape
    logits = np.zeros((bsz, n, m), dtype=votes.dtype)
    history = []
    for it in range(r):
        c = coupling_from_logits(logits)
        s = np.matmul(c.transpose(0, 2, 1)[:, :, None, :], up)[:, :, 0, :]
        v = squash(s)
        history.append((c, s, v))
        if it < r - 1:
            agreement = np.matmul(up, v[:, :, :, None])[..., 0]  # (B, m, n)
            logits = logits + agreement.transpose(0, 2, 1)
    return v, RoutingState(logits, c, r, history)


def routing_backward(grad_v, votes, state: RoutingState, detach_coupling=False):
    """Gradient w.r.t. the votes, unrolled across all routing iterations.

    With ``detach_coupling`` the coupling coefficients are treated as constants.
    """
    up = votes.transpose(0, 2, 1, 3)
    # grad_up[b, j, i] is a sum of outer products coef[b, j, i] * vec[b, j];
    # collect them and contract once
    coefs, vecs = [], []
    grad_logits = None
    r = state.iterations
    for it in range(r - 1, -1, -1):
        c, s, v = state.history[it]
        gv = grad_v if it == r - 1 else np.zeros_like(v)
        if grad_logits is not None:
            # b_{t+1} = b_t + <v_t, u_hat>
            ga = grad_logits.transpose(0, 2, 1)  # (B, m, n)
            gv = gv + np.matmul(ga[:, :, None, :], up)[:, :, 0, :]
            coefs.append(ga)
            vecs.append(v)
        gs = squash_backward(s, gv)
        coefs.append(c.transpose(0, 2, 1))
        vecs.append(gs)
        # logits at iteration 0 are the constant zero
        if detach_coupling or it == 0:
            continue
        gc = np.matmul(up, gs[:, :, :, None])[..., 0].transpose(0, 2, 1)  # (B, n, m)
        gb = c * (gc - np.sum(c * gc, axis=-1, keepdims=True))
        grad_logits = gb if grad_logits is None else grad_logits + gb
    grad_up = np.matmul(np.stack(coefs, axis=-1), np.stack(vecs, axis=-2))
    return grad_up.transpose(0, 2, 1, 3)
