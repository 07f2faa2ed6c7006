"""Deep multi-prototype capsule network: forward pass, loss and backward pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import capsnet
from .capsnet import ConvLayerConfig
from .errors import InvalidArgument
from .multiproto import (
    GroupSpec,
    RegConfig,
    cce_backward,
    cce_loss,
    frobenius_reg,
    frobenius_reg_grad,
    output_distribution,
    predict,
    target_distribution,
    winner_backward,
    winner_select,
)
from .numerics import Rng, init_normal


@dataclass(frozen=True)
class CapsLayerSpec:
    """A routed capsule layer: ``n_groups`` co-groups of ``prototypes`` capsules of ``dim``."""

    n_groups: int
    prototypes: int
    dim: int

    @property
    def n(self) -> int:
        return self.n_groups * self.prototypes


@dataclass
class NetworkConfig:
    input_shape: tuple  # (C, H, W); with no conv layers these are external features
    n_classes: int
    layers: list  # routed capsule layers; the last one is the class layer
    conv: list = field(default_factory=list)
    primary_dim: int = 8
    # None: each primary capsule is its own part
    primary_groups_per_position: int | None = None
    routing_iters: int = 3
    predict_rule: str = "sum"
    detach_coupling: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.conv = [c if isinstance(c, ConvLayerConfig) else ConvLayerConfig(**c) for c in self.conv]
        self.layers = [c if isinstance(c, CapsLayerSpec) else CapsLayerSpec(**c) for c in self.layers]
        self.validate()

    def validate(self):
        if len(self.input_shape) != 3:
            raise InvalidArgument(f"input_shape must be (C, H, W), got {self.input_shape}")
        if not self.layers:
            raise InvalidArgument("need at least one routed capsule layer (two capsule layers total)")
        if self.layers[-1].n_groups != self.n_classes:
            raise InvalidArgument(
                f"final layer has {self.layers[-1].n_groups} co-groups but there are "
                f"{self.n_classes} classes"
            )
        if self.routing_iters < 1:
            raise InvalidArgument("routing_iters must be >= 1")
        if self.predict_rule not in ("sum", "max"):
            raise InvalidArgument(f"unknown predict_rule {self.predict_rule!r}")
        channels = self.input_shape[0]
        for i, c in enumerate(self.conv):
            if c.in_channels != channels:
                raise InvalidArgument(
                    f"conv{i} expects {c.in_channels} input channels, previous layer gives {channels}"
                )
            channels = c.out_channels
        depth, h, w = self.feature_shape
        if depth % self.primary_dim:
            raise InvalidArgument(
                f"feature depth {depth} not divisible by primary capsule dim {self.primary_dim}"
            )
        g = self.primary_groups_per_position
        if g is not None and not 1 <= g <= depth // self.primary_dim:
            raise InvalidArgument(
                f"cannot form {g} co-groups from {depth // self.primary_dim} capsules per position"
            )

    @property
    def feature_shape(self) -> tuple:
        c, h, w = self.input_shape
        for conv in self.conv:
            h, w, c = conv.output_size(h), conv.output_size(w), conv.out_channels
        return (c, h, w)

    @property
    def caps_per_position(self) -> int:
        return self.feature_shape[0] // self.primary_dim

    @property
    def n_primary(self) -> int:
        _, h, w = self.feature_shape
        return h * w * self.caps_per_position

    @property
    def capsule_layer_count(self) -> int:
        return len(self.layers) + 1

    def group_specs(self) -> list:
        _, h, w = self.feature_shape
        g = self.primary_groups_per_position
        if g is None:
            specs = [GroupSpec.singletons(self.n_primary, layer=0)]
        else:
            specs = [GroupSpec.per_position(h * w, self.caps_per_position, g, layer=0)]
        for l, spec in enumerate(self.layers, start=1):
            specs.append(GroupSpec.uniform(spec.n_groups, spec.prototypes, layer=l))
        return specs

    def layer_dims(self) -> list:
        return [self.primary_dim] + [s.dim for s in self.layers]

    def layer_sizes(self) -> list:
        return [self.n_primary] + [s.n for s in self.layers]

    def part_counts(self) -> list:
        g = self.primary_groups_per_position
        first = self.n_primary if g is None else self.n_primary // self.caps_per_position * g
        return [first] + [s.n_groups for s in self.layers]

    def bank_shapes(self) -> list:
        """``(S^l, n^{l+1}, d_{l+1}, d_l)`` for each consecutive capsule-layer pair."""
        parts, sizes, dims = self.part_counts(), self.layer_sizes(), self.layer_dims()
        return [(parts[l], sizes[l + 1], dims[l + 1], dims[l]) for l in range(len(self.layers))]

    def transform_matrix_counts(self) -> list:
        return [s[0] * s[1] for s in self.bank_shapes()]

    def parameter_count(self) -> int:
        caps = sum(int(np.prod(s)) for s in self.bank_shapes())
        conv = sum(c.out_channels * c.in_channels * c.kernel_size**2 + c.out_channels for c in self.conv)
        return caps + conv

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class ForwardCache:
    conv: list
    primary: object
    layers: list  # per routed layer: (child caps, selected, winners, votes, routing state)
    final: np.ndarray


class Network:
    """Parameters plus forward/backward for a :class:`NetworkConfig`.

    ``params`` is an ordered dict: ``conv{i}.weight``, ``conv{i}.bias`` and
    ``caps{l}.weight`` (the transform bank from capsule layer ``l`` to ``l+1``).
    """

    def __init__(self, config: NetworkConfig, params: dict):
        self.config = config
        self.params = params
        self.specs = config.group_specs()
        expected = dict(self.param_shapes(config))
        if list(params) != list(expected):
            raise InvalidArgument(f"parameter names {list(params)} != {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise InvalidArgument(f"{name}: shape {params[name].shape} != {shape}")

    @staticmethod
    def param_shapes(config: NetworkConfig) -> list:
        shapes = []
        for i, c in enumerate(config.conv):
            shapes.append((f"conv{i}.weight", (c.out_channels, c.in_channels, c.kernel_size, c.kernel_size)))
            shapes.append((f"conv{i}.bias", (c.out_channels,)))
        for l, s in enumerate(config.bank_shapes()):
            shapes.append((f"caps{l}.weight", s))
        return shapes

    @classmethod
    def init(cls, config: NetworkConfig, rng: Rng, sigma: float = 0.05, dtype=np.float32):
        """He-normal conv kernels, zero conv biases, N(0, sigma) transform entries."""
        params = {}
        for name, shape in cls.param_shapes(config):
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=dtype)
            elif name.startswith("conv"):
                fan_in = shape[1] * shape[2] * shape[3]
                params[name] = init_normal(shape, np.sqrt(2.0 / fan_in), rng, dtype)
            else:
                params[name] = init_normal(shape, sigma, rng, dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def bank_names(self) -> list:
        return [f"caps{l}.weight" for l in range(len(self.config.layers))]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Final capsules ``(B, n^L, d_L)``."""
        return self.run(x)[0]

    def run(self, x: np.ndarray, fixed_winners=None, keep_cache=False):
        """Forward pass returning ``(final capsules, ForwardCache)``.

        ``fixed_winners`` (one array or None per routed layer) overrides the
        winner choice; gradient checks use it to hold the masks fixed.
        """
        cfg = self.config
        h = np.asarray(x, dtype=self.dtype)
        if h.ndim == 3:
            h = h[None]
        if tuple(h.shape[1:]) != cfg.input_shape:
            raise InvalidArgument(f"input shape {h.shape[1:]} != configured {cfg.input_shape}")
        conv_caches = []
        for i, c in enumerate(cfg.conv):
            h, cc = capsnet.conv_forward(h, c, self.params[f"conv{i}.weight"],
                                         self.params[f"conv{i}.bias"], return_cache=True)
            conv_caches.append(cc if keep_cache else None)
        u, pcache = capsnet.form_primary_capsules(h, cfg.primary_dim, return_cache=True)
        layer_caches = []
        for l in range(len(cfg.layers)):
            spec = self.specs[l]
            if spec.is_trivial:
                sel, win = u, None
            elif fixed_winners is not None and fixed_winners[l] is not None:
                win = fixed_winners[l]
                sel = np.take_along_axis(u, win[..., None], axis=-2)
            else:
                sel, win = winner_select(u, spec)
            votes = capsnet.compute_votes(sel, self.params[f"caps{l}.weight"])
            v, state = capsnet.dynamic_routing(votes, cfg.routing_iters)
            if keep_cache:
                layer_caches.append((u, sel, win, votes, state))
            else:
                layer_caches.append((None, None, win, None, None))
            u = v
        return u, ForwardCache(conv_caches, pcache if keep_cache else None, layer_caches, u)

    def winners(self, x) -> list:
        _, cache = self.run(x)
        return [lc[2] for lc in cache.layers]

    def regularizer(self, reg: RegConfig) -> list:
        return [frobenius_reg(self.params[name], reg) for name in self.bank_names()]

    def loss(self, x, labels, reg: RegConfig | None = None, fixed=None) -> float:
        """Mean competitive cross-entropy over the batch plus regularizer terms.

        ``fixed`` may carry ``tau`` and ``winners`` to evaluate the loss with
        both held constant.
        """
        fixed = fixed or {}
        final, _ = self.run(x, fixed_winners=fixed.get("winners"))
        y = output_distribution(final)
        tau = fixed["tau"] if "tau" in fixed else target_distribution(final, labels, self.specs[-1])
        data = float(np.mean(cce_loss(y, tau)))
        terms = self.regularizer(reg) if reg is not None and reg.beta > 0 else []
        return data + float(sum(terms))

    def loss_and_grads(self, x, labels, reg: RegConfig | None = None):
        """Returns ``(total_loss, data_loss, grads, aux)``; grads keyed like ``params``."""
        cfg = self.config
        final, cache = self.run(x, keep_cache=True)
        bsz = final.shape[0]
        y = output_distribution(final)
        tau = target_distribution(final, labels, self.specs[-1])
        data = float(np.mean(cce_loss(y, tau)))
        grads = {}
        g = cce_backward(final, y, tau) / bsz
        for l in range(len(cfg.layers) - 1, -1, -1):
            u, sel, win, votes, state = cache.layers[l]
            gvotes = capsnet.routing_backward(g, votes, state, cfg.detach_coupling)
            gsel, gw = capsnet.votes_backward(gvotes, sel, self.params[f"caps{l}.weight"])
            grads[f"caps{l}.weight"] = gw
            g = gsel if win is None else winner_backward(gsel, win, u.shape[-2])
        gfeat = capsnet.primary_backward(g, cache.primary)
        for i in range(len(cfg.conv) - 1, -1, -1):
            gfeat, gw, gb = capsnet.conv_backward(gfeat, cache.conv[i], self.params[f"conv{i}.weight"],
                                                  need_input_grad=i > 0)
            grads[f"conv{i}.weight"] = gw
            grads[f"conv{i}.bias"] = gb
        total = data
        if reg is not None and reg.beta > 0:
            for name in self.bank_names():
                total += frobenius_reg(self.params[name], reg)
                grads[name] = grads[name] + frobenius_reg_grad(self.params[name], reg)
        grads = {name: grads[name].astype(self.dtype, copy=False) for name in self.params}
        aux = {"y": y, "tau": tau, "final": final,
               "winners": [lc[2] for lc in cache.layers]}
        return total, data, grads, aux

    def predict(self, x, batch_size: int = 64) -> np.ndarray:
        out = []
        for start in range(0, len(x), batch_size):
            final = self.forward(x[start:start + batch_size])
            out.append(predict(final, self.specs[-1], self.config.predict_rule))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
