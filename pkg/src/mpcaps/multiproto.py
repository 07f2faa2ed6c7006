"""Multi-prototype capsules: co-groups, winner-take-all, competitive cross-entropy.

A layer's capsules are partitioned into co-groups, one per part (or class in
the final layer). Between layers only the longest capsule of each co-group is
forwarded, through a transform matrix shared by the whole co-group. The final
layer instead holds a soft competition whose normalized norms form both the
output distribution and, within the true class, the training target.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .capsnet import capsule_norms, compute_votes
from .errors import DegenerateError, InvalidArgument
from .numerics import Rng, init_normal

EPS_NORM = 1e-12
EPS_LOG = 1e-12


class GroupSpec:
    """Partition of a layer's ``n`` capsules into ``S`` non-empty co-groups.

    Indices inside every group are kept sorted so that ties resolve to the
    lowest capsule index.
    """

    def __init__(self, groups: Sequence[Sequence[int]], layer: int = 0):
        groups = tuple(tuple(sorted(int(i) for i in g)) for g in groups)
        if not groups:
            raise InvalidArgument("a group spec needs at least one group")
        if any(len(g) == 0 for g in groups):
            raise InvalidArgument("empty co-group")
        flat = np.concatenate([np.asarray(g) for g in groups])
        n = flat.size
        if np.unique(flat).size != n or flat.min() != 0 or flat.max() != n - 1:
            raise InvalidArgument("groups must partition 0..n-1 (disjoint and exhaustive)")
        self.groups = groups
        self.layer = layer
        self.n = n
        sizes = np.array([len(g) for g in groups])
        self.sizes = sizes
        pad = np.full((len(groups), sizes.max()), -1, dtype=np.int64)
        for p, g in enumerate(groups):
            pad[p, : len(g)] = g
        self._padded = pad
        self.group_of = np.empty(n, dtype=np.int64)
        for p, g in enumerate(groups):
            self.group_of[list(g)] = p

    @property
    def n_parts(self) -> int:
        return len(self.groups)

    @property
    def is_trivial(self) -> bool:
        return self.n_parts == self.n

    def __eq__(self, other):
        return isinstance(other, GroupSpec) and self.groups == other.groups

    def __repr__(self):
        return f"GroupSpec(n={self.n}, parts={self.n_parts}, layer={self.layer})"

    @classmethod
    def singletons(cls, n: int, layer: int = 0) -> "GroupSpec":
        return cls([[i] for i in range(n)], layer)

    @classmethod
    def uniform(cls, n_groups: int, prototypes: int, layer: int = 0) -> "GroupSpec":
        """``n_groups`` contiguous co-groups of ``prototypes`` capsules each."""
        if n_groups < 1 or prototypes < 1:
            raise InvalidArgument("group count and prototypes per group must be positive")
        return cls([range(p * prototypes, (p + 1) * prototypes) for p in range(n_groups)], layer)

    @classmethod
    def per_position(cls, positions: int, per_position: int, groups_per_position: int,
                     layer: int = 0) -> "GroupSpec":
        """Co-groups of primary capsules sharing one spatial position.

        The ``per_position`` capsules at each position are split into
        ``groups_per_position`` contiguous blocks of ``per_position // G``;
        leftover capsules are dealt round-robin to groups 0, 1, ...
        """
        g = groups_per_position
        if g < 1 or g > per_position:
            raise InvalidArgument(f"cannot split {per_position} capsules into {g} groups")
        q, rem = divmod(per_position, g)
        groups = []
        for pos in range(positions):
            base = pos * per_position
            blocks = [list(range(base + j * q, base + (j + 1) * q)) for j in range(g)]
            for extra in range(rem):
                blocks[extra % g].append(base + g * q + extra)
            groups.extend(blocks)
        return cls(groups, layer)

    def to_dict(self) -> dict:
        return {"layer": self.layer, "groups": [list(g) for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupSpec":
        return cls(d["groups"], d.get("layer", 0))

    def gather(self, values: np.ndarray, fill) -> np.ndarray:
        """``values[..., n]`` rearranged to ``[..., S, max_group_size]`` with ``fill`` padding."""
        out = values[..., np.maximum(self._padded, 0)]
        return np.where(self._padded >= 0, out, fill)


@dataclass
class TransformBank:
    """One ``d_out x d_in`` matrix per (child part, parent capsule) pair."""

    weights: np.ndarray  # (S, n_parent, d_out, d_in)
    sigma: float = 0.01

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise InvalidArgument(f"transform bank must be 4-d, got {self.weights.shape}")

    @classmethod
    def init(cls, n_parts, n_parents, d_in, d_out, sigma, rng: Rng, dtype=np.float64):
        w = init_normal((n_parts, n_parents, d_out, d_in), sigma, rng, dtype)
        return cls(w, sigma)

    @property
    def matrix_count(self) -> int:
        return self.weights.shape[0] * self.weights.shape[1]

    @property
    def size(self) -> int:
        return int(self.weights.size)


def winner_select(caps: np.ndarray, spec: GroupSpec):
    """Keep the longest capsule of every co-group.

    ``caps`` is ``(B, n, d)``. Returns ``(selected (B, S, d), winners (B, S))``
    where ``winners`` holds capsule indices into the layer.
    """
    if caps.shape[-2] != spec.n:
        raise InvalidArgument(f"spec covers {spec.n} capsules, layer has {caps.shape[-2]}")
    norms = capsule_norms(caps)
    grouped = spec.gather(norms, -np.inf)
    pos = np.argmax(grouped, axis=-1)
    winners = spec._padded[np.arange(spec.n_parts), pos]
    selected = np.take_along_axis(caps, winners[..., None], axis=-2)
    return selected, winners


def winner_backward(grad_selected: np.ndarray, winners: np.ndarray, n: int) -> np.ndarray:
    """Scatter winner gradients back; masked losers get zero."""
    bsz, _, d = grad_selected.shape
    grad = np.zeros((bsz, n, d), dtype=grad_selected.dtype)
    np.put_along_axis(grad, winners[..., None], grad_selected, axis=-2)
    return grad


def shared_votes(selected: np.ndarray, bank: TransformBank) -> np.ndarray:
    """Votes of the co-group winners through their group's shared matrices."""
    if selected.shape[-2] != bank.weights.shape[0]:
        raise InvalidArgument(
            f"{selected.shape[-2]} winners but the bank has {bank.weights.shape[0]} parts"
        )
    return compute_votes(selected, bank.weights)


def output_distribution(final_caps: np.ndarray) -> np.ndarray:
    """Capsule norms normalized over all final capsules."""
    norms = capsule_norms(final_caps)
    total = norms.sum(axis=-1, keepdims=True)
    if np.any(total <= EPS_NORM):
        raise DegenerateError("all final capsule norms vanish; output distribution undefined")
    return norms / total


def target_distribution(final_caps: np.ndarray, k, spec: GroupSpec) -> np.ndarray:
    """Norms of the true class's co-group normalized within it, zero elsewhere.

    ``final_caps`` is ``(B, n, d)`` with ``k`` of shape ``(B,)``, or ``(n, d)`` with scalar ``k``.
    """
    single = final_caps.ndim == 2
    caps = final_caps[None] if single else final_caps
    k = np.atleast_1d(np.asarray(k, dtype=np.int64))
    if np.any(k < 0) or np.any(k >= spec.n_parts):
        raise InvalidArgument(f"class index out of range for {spec.n_parts} classes")
    norms = capsule_norms(caps)
    member = spec.group_of[None, :] == k[:, None]
    masked = np.where(member, norms, 0.0)
    total = masked.sum(axis=-1, keepdims=True)
    if np.any(total <= EPS_NORM):
        raise DegenerateError("true-class co-group norms vanish; target undefined")
    tau = masked / total
    return tau[0] if single else tau


def cce_loss(y: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """``-sum tau * log(y + eps)`` over the last axis, counting only ``tau > 0``."""
    logs = np.log(y + EPS_LOG)
    return -np.sum(np.where(tau > 0, tau * logs, 0.0), axis=-1)


def cce_backward(final_caps: np.ndarray, y: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Gradient of ``cce_loss(output_distribution(v), tau)`` w.r.t. ``v``, ``tau`` held fixed.

    With ``N = sum |v_t|`` and ``y_i = |v_i| / N``:
    ``dE/d|v_s| = (-tau_s / (y_s + eps) + sum_i tau_i y_i / (y_i + eps)) / N``,
    then ``dE/dv_s = dE/d|v_s| * v_s / |v_s|``.
    """
    norms = capsule_norms(final_caps)
    total = norms.sum(axis=-1, keepdims=True)
    ratio = tau / (y + EPS_LOG)
    d_norm = (-ratio + np.sum(ratio * y, axis=-1, keepdims=True)) / total
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(norms[..., None] > EPS_NORM, final_caps / norms[..., None], 0.0)
    return d_norm[..., None] * unit


@dataclass(frozen=True)
class RegConfig:
    beta: float = 0.0
    sigma: float = 0.01
    # (n_child, n_parent, d_child, d_parent); None means "take from the bank"
    dims: tuple | None = None

    def __post_init__(self):
        if self.beta < 0 or not self.sigma > 0:
            raise InvalidArgument(f"need beta >= 0 and sigma > 0, got {self.beta}, {self.sigma}")


def _reg_coefficient(weights: np.ndarray, cfg: RegConfig) -> float:
    size = weights.size
    if cfg.dims is not None:
        if int(np.prod(cfg.dims)) != size:
            raise InvalidArgument(f"regularizer dims {cfg.dims} do not match bank size {size}")
    return cfg.beta / (cfg.sigma * np.sqrt(size))


def frobenius_reg(weights: np.ndarray, cfg: RegConfig) -> float:
    """``beta / (sigma * sqrt(size(W))) * ||W||_F``; about ``beta`` at initialization."""
    return float(_reg_coefficient(weights, cfg) * np.linalg.norm(weights.ravel()))


def frobenius_reg_grad(weights: np.ndarray, cfg: RegConfig) -> np.ndarray:
    norm = np.linalg.norm(weights.ravel())
    if norm == 0.0:
        return np.zeros_like(weights)
    return (_reg_coefficient(weights, cfg) / norm) * weights


def total_loss(data_loss: float, reg_terms: Sequence[float] = ()) -> float:
    """Data loss plus one normalized Frobenius term per capsule-layer pair."""
    return float(data_loss) + float(sum(reg_terms))


@dataclass
class CompetitiveOutput:
    y: np.ndarray
    tau: np.ndarray
    k: np.ndarray
    spec: GroupSpec


def competitive_output(final_caps, k, spec: GroupSpec) -> CompetitiveOutput:
    return CompetitiveOutput(output_distribution(final_caps),
                             target_distribution(final_caps, k, spec), np.asarray(k), spec)


def class_scores(final_caps: np.ndarray, spec: GroupSpec, rule: str = "sum") -> np.ndarray:
    norms = capsule_norms(final_caps)
    if rule == "sum":
        return spec.gather(norms, 0.0).sum(axis=-1)
    if rule == "max":
        return spec.gather(norms, -np.inf).max(axis=-1)
    raise InvalidArgument(f"unknown prediction rule {rule!r}")


def predict(final_caps: np.ndarray, spec: GroupSpec, rule: str = "sum") -> np.ndarray:
    """Class with the largest summed (or max, for ``rule='max'``) co-group norm."""
    return np.argmax(class_scores(final_caps, spec, rule), axis=-1)
