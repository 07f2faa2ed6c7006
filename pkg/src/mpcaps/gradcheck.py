"""Analytic vs. central-difference gradients on the fixed miniature network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .multiproto import RegConfig
from .network import Network
from .numerics import Rng, finite_diff_grad, relative_error
from .presets import gradcheck_network

TOLERANCE = 1e-4
# large enough that routing, winner masks and squash all operate off their linear regime
SIGMA = 0.5
BETA = 0.1


@dataclass(frozen=True)
class GroupResult:
    name: str
    size: int
    rel_error: float


def gradcheck(h: float = 1e-5, seed: int = 0, batch: int = 2):
    """Per-parameter-group norm-wise relative error, float64, tau and winners held fixed."""
    cfg = gradcheck_network()
    rng = Rng(seed)
    net = Network.init(cfg, rng.spawn(1), SIGMA, np.float64)
    x = rng.spawn(2).uniform(size=(batch,) + cfg.input_shape)
    labels = np.arange(batch) % cfg.n_classes
    reg = RegConfig(BETA, SIGMA)
    _, _, grads, aux = net.loss_and_grads(x, labels, reg)
    fixed = {"tau": aux["tau"], "winners": aux["winners"]}
    results = []
    for name in net.params:
        original = net.params[name]

        def f(t, name=name):
            net.params[name] = t
            return net.loss(x, labels, reg, fixed)

        try:
            numeric = finite_diff_grad(f, original.copy(), h)
        finally:
            net.params[name] = original
        results.append(GroupResult(name, original.size, relative_error(grads[name], numeric)))
    return results


def format_table(results, tolerance: float = TOLERANCE) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'group':<{width}}  {'size':>6}  {'rel_error':>10}  status"]
    for r in results:
        status = "ok" if r.rel_error <= tolerance else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.size:>6}  {r.rel_error:>10.3e}  {status}")
    return "\n".join(lines)
