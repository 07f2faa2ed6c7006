"""Part-level prototype analysis on the toy face set."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .data import FACE, Dataset, ToyConfig, eye_box
from .errors import InvalidArgument


def purity(winners, part_labels) -> float:
    """Best fraction of agreement over one-to-one prototype/label assignments."""
    winners = np.asarray(winners)
    part_labels = np.asarray(part_labels)
    if winners.shape != part_labels.shape or winners.size == 0:
        raise InvalidArgument("winners and part labels must be non-empty and aligned")
    protos = np.unique(winners)
    labels = np.unique(part_labels)
    slots = max(len(protos), len(labels))
    protos = list(protos) + [None] * (slots - len(protos))
    best = 0
    for perm in permutations(protos, len(labels)):
        hits = sum(int(np.sum((winners == p) & (part_labels == lab)))
                   for p, lab in zip(perm, labels) if p is not None)
        best = max(best, hits)
    return best / winners.size


def eye_crops(images: np.ndarray, toy_cfg: ToyConfig = ToyConfig()) -> np.ndarray:
    """Average of the left and right eye boxes, ``(N, h, w)``."""
    crops = []
    for eye in (0, 1):
        rows, cols = eye_box(eye, toy_cfg)
        crops.append(images[:, 0, rows, cols])
    return 0.5 * (crops[0] + crops[1])


@dataclass
class PrototypeReport:
    layer: int
    group: int
    winners: np.ndarray  # position of the winning prototype inside the group, per face image
    purity: float
    means: np.ndarray  # (prototypes, h, w) mean eye area per winning prototype
    counts: np.ndarray
    margin: float  # L2 distance between the two most frequent prototypes' means
    spread: float  # pooled std of per-image L2 distance to the own prototype mean


def _layer_winners(net, images, layer, batch_size=64):
    """Winning capsule index per co-group of capsule layer ``layer`` (0 = primary)."""
    if not 0 <= layer < len(net.config.layers):
        raise InvalidArgument(f"layer {layer} does not feed a routed layer")
    spec = net.specs[layer]
    if spec.is_trivial:
        raise InvalidArgument(f"capsule layer {layer} has no multi-prototype co-groups")
    out = []
    for start in range(0, len(images), batch_size):
        out.append(net.winners(images[start:start + batch_size])[layer])
    return np.concatenate(out), spec


def group_purities(net, data: Dataset, layer: int) -> np.ndarray:
    """Eye-prototype purity of every co-group in ``layer``."""
    if data.part_labels is None:
        raise InvalidArgument("dataset carries no part labels")
    face = (data.labels == FACE) & (data.part_labels >= 0)
    winners, spec = _layer_winners(net, data.images[face], layer)
    labels = data.part_labels[face]
    return np.array([purity(winners[:, p], labels) for p in range(spec.n_parts)])


def prototype_analysis(net, data: Dataset, layer: int, group: int,
                       toy_cfg: ToyConfig = ToyConfig()) -> PrototypeReport:
    """Which prototype of ``group`` wins on each face, and the mean eye area per prototype."""
    if data.part_labels is None:
        raise InvalidArgument("dataset carries no part labels")
    face = (data.labels == FACE) & (data.part_labels >= 0)
    if not np.any(face):
        raise InvalidArgument("dataset has no labelled face images")
    winners, spec = _layer_winners(net, data.images[face], layer)
    if not 0 <= group < spec.n_parts:
        raise InvalidArgument(f"group {group} out of range for {spec.n_parts} groups")
    members = np.asarray(spec.groups[group])
    if len(members) < 2:
        raise InvalidArgument(f"group {group} has a single prototype")
    pos = np.searchsorted(members, winners[:, group])
    labels = data.part_labels[face]
    crops = eye_crops(data.images[face], toy_cfg)
    k = len(members)
    counts = np.bincount(pos, minlength=k)
    means = np.zeros((k,) + crops.shape[1:], dtype=np.float64)
    for p in range(k):
        if counts[p]:
            means[p] = crops[pos == p].mean(axis=0)
    top = np.argsort(-counts, kind="stable")[:2]
    margin = float(np.linalg.norm(means[top[0]] - means[top[1]]))
    dist_var = [np.var(np.linalg.norm((crops[pos == p] - means[p]).reshape(counts[p], -1), axis=1))
                for p in top if counts[p] > 1]
    spread = float(np.sqrt(np.mean(dist_var))) if dist_var else float("inf")
    return PrototypeReport(layer, group, pos, purity(pos, labels), means, counts, margin, spread)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit portable graymap; values in [0, 1] map linearly to 0..255."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = open(path, "rb").read()
    tokens = []
    idx = 0
    while len(tokens) < 4:
        while raw[idx:idx + 1].isspace():
            idx += 1
        if raw[idx:idx + 1] == b"#":
            idx = raw.index(b"\n", idx) + 1
            continue
        start = idx
        while not raw[idx:idx + 1].isspace():
            idx += 1
        tokens.append(raw[start:idx])
    if tokens[0] != b"P5":
        raise InvalidArgument(f"{path}: not a binary graymap")
    w, h, maxval = (int(t) for t in tokens[1:])
    payload = raw[idx + 1:idx + 1 + w * h]
    if len(payload) != w * h:
        raise InvalidArgument(f"{path}: truncated graymap")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w) / float(maxval)
