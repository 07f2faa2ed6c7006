"""Training loop, evaluation, run reports and the checkpoint file format.

Checkpoint layout (little-endian)::

    b"MPCK"  u32 version  u64 header_length
    header   UTF-8 JSON (sorted keys): configs, epoch, RNG state, tensor table
    tensors  raw row-major bytes, in tensor-table order
    sha256   32-byte digest of everything above

Run reports are JSON lines: one ``{"kind": "epoch", ...}`` record per epoch
and a final ``{"kind": "summary", ...}`` record. Wall-clock timings are kept
out of the report file (see :meth:`RunReport.timing_jsonl`) so seeded runs
produce identical reports.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, batch_iter
from .errors import ChecksumError, FormatError, InvalidArgument, NumericFailure
from .multiproto import RegConfig, predict
from .network import Network, NetworkConfig
from .numerics import AdamState, Rng, adam_step

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MPCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    beta: float = 0.01  # regularizer weight
    sigma: float = 0.05  # transform init std, also the regularizer normalizer
    seed: int = 0
    dtype: str = "float32"
    clip_norm: float | None = None  # global-norm clipping; 10.0 is the suggested valve
    keep_best: bool = False  # return the epoch with best held-out accuracy

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise InvalidArgument(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgument(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def reg(self) -> RegConfig:
        return RegConfig(beta=self.beta, sigma=self.sigma)


@dataclass
class Checkpoint:
    network: NetworkConfig
    params: dict
    optimizer: dict = field(default_factory=dict)  # name -> AdamState
    epoch: int = 0
    rng_state: dict | None = None
    train_config: dict | None = None
    version: int = CHECKPOINT_VERSION

    def model(self) -> Network:
        return Network(self.network, self.params)


@dataclass
class RunReport:
    epochs: list = field(default_factory=list)
    confusion: np.ndarray | None = None
    final_accuracy: float | None = None
    wall_times: list = field(default_factory=list)
    best_epoch: int | None = None
    parameter_count: int = 0

    def summary(self) -> dict:
        return {
            "kind": "summary",
            "epochs": len(self.epochs),
            "final_accuracy": self.final_accuracy,
            "best_epoch": self.best_epoch,
            "parameter_count": self.parameter_count,
            "confusion": None if self.confusion is None else self.confusion.tolist(),
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "epoch", **e}, sort_keys=True) for e in self.epochs]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def timing_jsonl(self) -> str:
        return "".join(json.dumps({"epoch": i + 1, "wall_time": t}) + "\n"
                       for i, t in enumerate(self.wall_times))


def confusion_matrix(pred, labels, n_classes) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(pred)), 1)
    return cm


def evaluate(model, data: Dataset, batch_size: int = 64):
    """Returns ``(accuracy, confusion)``; rows of the confusion matrix are true classes."""
    net = model.model() if isinstance(model, Checkpoint) else model
    if data.n_classes != net.config.n_classes:
        raise InvalidArgument(
            f"dataset has {data.n_classes} classes, network has {net.config.n_classes}"
        )
    if len(data) == 0:
        raise InvalidArgument("cannot evaluate on an empty dataset")
    pred = net.predict(data.images, batch_size)
    acc = float(np.mean(pred == data.labels))
    return acc, confusion_matrix(pred, data.labels, data.n_classes)


def _global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def train(net_cfg: NetworkConfig, data: Dataset, cfg: TrainConfig = TrainConfig(),
          eval_data: Dataset | None = None, progress=None):
    """Train from the seeded initialization. Returns ``(Checkpoint, RunReport)``.

    ``progress``, if given, is called with each finished epoch record.
    """
    if data.n_classes != net_cfg.n_classes:
        raise InvalidArgument(f"dataset has {data.n_classes} classes, network expects {net_cfg.n_classes}")
    rng = Rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    net = Network.init(net_cfg, rng.spawn(1), cfg.sigma, dtype)
    opt = {name: AdamState.fresh(p, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) for name, p in net.params.items()}
    reg = cfg.reg
    report = RunReport(parameter_count=net_cfg.parameter_count())
    shuffle_seed = int(rng.integers(0, 2**63))
    best = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        for b, (_, x, y) in enumerate(batch_iter(data, cfg.batch_size, shuffle_seed, epoch)):
            try:
                total, _, grads, aux = net.loss_and_grads(x, y, reg)
            except NumericFailure as exc:
                raise type(exc)(f"epoch {epoch}, batch {b}: {exc}") from exc
            gnorm = _global_norm(grads)
            if not (math.isfinite(total) and math.isfinite(gnorm)):
                raise NumericFailure(
                    f"non-finite loss at epoch {epoch}, batch {b}: loss={total}, "
                    f"max|grad|={max(float(np.max(np.abs(g))) for g in grads.values())}"
                )
            if cfg.clip_norm is not None and gnorm > cfg.clip_norm:
                scale = cfg.clip_norm / gnorm
                grads = {k: g * scale for k, g in grads.items()}
            for name in net.params:
                net.params[name], opt[name] = adam_step(net.params[name], grads[name], opt[name])
            loss_sum += total * len(y)
            correct += int(np.sum(predict(aux["final"], net.specs[-1], net_cfg.predict_rule) == y))
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / len(data),
            "train_accuracy": correct / len(data),
        }
        if eval_data is not None:
            acc, _ = evaluate(net, eval_data)
            record["test_accuracy"] = acc
            if cfg.keep_best and (best is None or acc > best[0]):
                best = (acc, epoch, {k: v.copy() for k, v in net.params.items()},
                        {k: AdamState(s.m.copy(), s.v.copy(), s.step, s.lr, s.beta1, s.beta2, s.eps)
                         for k, s in opt.items()})
        report.epochs.append(record)
        report.wall_times.append(time.perf_counter() - t0)
        log.info("epoch %d: %s", epoch, record)
        if progress is not None:
            progress(record)
    final_epoch = cfg.epochs
    if best is not None:
        _, final_epoch, net.params, opt = best
        report.best_epoch = final_epoch
    ckpt = Checkpoint(net_cfg, net.params, opt, final_epoch, rng.get_state(), asdict(cfg))
    final_set = eval_data if eval_data is not None else data
    report.final_accuracy, report.confusion = evaluate(net, final_set)
    return ckpt, report


# --- checkpoint file ---------------------------------------------------------

def _tensor_entries(ckpt: Checkpoint):
    for name, p in ckpt.params.items():
        yield f"param/{name}", p
    for name, s in ckpt.optimizer.items():
        yield f"adam_m/{name}", s.m
        yield f"adam_v/{name}", s.v


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = list(_tensor_entries(ckpt))
    header = {
        "version": ckpt.version,
        "network": ckpt.network.to_dict(),
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "optimizer": {name: {"step": s.step, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps}
                      for name, s in ckpt.optimizer.items()},
        "tensors": [{"name": n, "dtype": np.dtype(a.dtype).str, "shape": list(a.shape)} for n, a in tensors],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", ckpt.version, len(hbytes)), hbytes]
    for _, a in tensors:
        parts.append(np.ascontiguousarray(a, dtype=np.dtype(a.dtype).newbyteorder("<")).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 + 32 or raw[:4] != CHECKPOINT_MAGIC:
        if raw[:4] == CHECKPOINT_MAGIC:
            raise ChecksumError(f"{path}: truncated checkpoint")
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (corrupted or truncated)")
    header = json.loads(body[16:16 + hlen].decode())
    offset = 16 + hlen
    arrays = {}
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        nbytes = count * dt.itemsize
        arrays[t["name"]] = np.frombuffer(body, dtype=dt, count=count, offset=offset).reshape(t["shape"]).copy()
        offset += nbytes
    if offset != len(body):
        raise ChecksumError(f"{path}: tensor table does not match payload size")
    net_cfg = NetworkConfig.from_dict(header["network"])
    params = {n[len("param/"):]: a for n, a in arrays.items() if n.startswith("param/")}
    opt = {}
    # the header's optimizer table is key-sorted; restore the tensor-table order
    for name in (n[len("adam_m/"):] for n in arrays if n.startswith("adam_m/")):
        h = header["optimizer"][name]
        opt[name] = AdamState(arrays[f"adam_m/{name}"], arrays[f"adam_v/{name}"], h["step"],
                              h["lr"], h["beta1"], h["beta2"], h["eps"])
    return Checkpoint(net_cfg, params, opt, header["epoch"], header["rng_state"],
                      header["train_config"], version)
