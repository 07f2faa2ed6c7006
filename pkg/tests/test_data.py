import struct

import numpy as np
import pytest
from scipy.stats import binomtest

from conftest import write_idx
from mpcaps.data import (
    EYE_CENTERS,
    FACE,
    NOISE,
    Dataset,
    ToyConfig,
    _static_parts,
    batch_iter,
    eye_box,
    generate_toy,
    load_dataset,
    load_features,
    load_idx,
    load_labels,
    save_dataset,
    write_features,
    write_labels,
)
from mpcaps.errors import ConsistencyError, FormatError, InvalidArgument, LengthError


@pytest.fixture(scope="module")
def toy():
    return generate_toy(ToyConfig())


# --- IDX -------------------------------------------------------------------------

def test_idx_hand_fixture(tmp_path):
    img = tmp_path / "img"
    lab = tmp_path / "lab"
    # two 2x2 images, bytes written out by hand
    img.write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2,
                           0, 255, 51, 102,
                           204, 0, 0, 255]))
    lab.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 2, 7, 3]))
    ds = load_idx(img, lab)
    assert ds.images.shape == (2, 1, 2, 2)
    assert np.array_equal(ds.images[0, 0], np.array([[0.0, 1.0], [0.2, 0.4]], dtype=np.float32))
    assert np.array_equal(ds.images[1, 0], np.array([[0.8, 0.0], [0.0, 1.0]], dtype=np.float32))
    assert list(ds.labels) == [7, 3]


def test_idx_wrong_label_magic(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 3, 3)), 0x803)
    write_idx(tmp_path / "l", np.zeros(2), 0x803)
    with pytest.raises(FormatError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 3, 3)), 0x803)
    write_idx(tmp_path / "l", np.zeros(2), 0x801)
    with pytest.raises(ConsistencyError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_truncated_payload(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 3, 3)), 0x803)
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(raw[:-1])
    write_idx(tmp_path / "l", np.zeros(2), 0x801)
    with pytest.raises(LengthError):
        load_idx(tmp_path / "i", tmp_path / "l")


@pytest.mark.parametrize("compress", [False, True])
def test_idx_round_trip(tmp_path, rng, compress):
    images = rng.integers(0, 256, size=(5, 4, 6))
    labels = rng.integers(0, 10, size=5)
    write_idx(tmp_path / "i", images, 0x803, compress)
    write_idx(tmp_path / "l", labels, 0x801, compress)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.allclose(ds.images[:, 0] * 255, images, atol=1e-4)
    assert np.array_equal(ds.labels, labels)


# --- toy set -------------------------------------------------------------------------

def test_toy_defaults(toy):
    assert toy.images.shape == (1200, 1, 64, 64)
    assert np.sum(toy.labels == FACE) == 600 and np.sum(toy.labels == NOISE) == 600
    assert toy.images.min() >= 0 and toy.images.max() <= 1


def test_toy_deterministic(toy):
    again = generate_toy(ToyConfig())
    assert np.array_equal(toy.images, again.images)
    assert np.array_equal(toy.part_labels, again.part_labels)
    other = generate_toy(ToyConfig(per_class=20, seed=1))
    assert not np.array_equal(other.images[:20], toy.images[:20])


def test_toy_part_labels(toy):
    faces = toy.part_labels[toy.labels == FACE]
    assert set(np.unique(faces)) == {0, 1}
    assert np.all(toy.part_labels[toy.labels == NOISE] == -1)
    ci = binomtest(int(faces.sum()), faces.size).proportion_ci(0.99)
    assert ci.low <= 0.5 <= ci.high


def test_toy_placement_bounds():
    ds = generate_toy(ToyConfig(per_class=10_000, dropout_patches=0))
    faces = ds.labels == FACE
    shift = ds.meta["eye_shift"][faces]
    scale = ds.meta["eye_scale"][faces]
    assert np.abs(shift).max() <= 3.0
    assert scale.min() >= 0.7 and scale.max() <= 1.0
    hist, _ = np.histogram(scale, bins=10, range=(0.7, 1.0))
    assert np.all(hist > 0)


def test_toy_measured_eye_displacement():
    # recover each eye's centre from the pixels of a patch-free render
    ds = generate_toy(ToyConfig(per_class=300, dropout_patches=0))
    static = _static_parts(64)
    worst = 0.0
    for i in np.flatnonzero(ds.labels == FACE):
        eyes_only = np.where(static > 0, 0.0, ds.images[i, 0])
        for e, (cy, cx) in enumerate(EYE_CENTERS):
            rs, cs = eye_box(e)
            crop = eyes_only[rs, cs]
            ys, xs = np.nonzero(crop)
            if ds.part_labels[i] == 0:
                # the ring glyph is symmetric about its centre
                centre = np.array([ys.mean() + rs.start, xs.mean() + cs.start])
                worst = max(worst, np.abs(centre - [cy, cx]).max())
    assert worst <= 3.0 + 0.5


def test_toy_prototypes_differ_in_structure():
    ds = generate_toy(ToyConfig(per_class=200, dropout_patches=0, shift_max=0, scale_range=(1.0, 1.0)))
    faces = ds.labels == FACE
    a = ds.images[faces & (ds.part_labels == 0)][0]
    b = ds.images[faces & (ds.part_labels == 1)][0]
    assert np.sum(a != b) > 50


def test_toy_face_noise_structure_statistic(toy):
    # lag-1 horizontal correlation: strong for faces, near zero for noise
    def corr(images):
        x = images[:, 0]
        a = x[:, :, :-1] - x.mean(axis=(1, 2), keepdims=True)
        b = x[:, :, 1:] - x.mean(axis=(1, 2), keepdims=True)
        return np.mean(np.sum(a * b, axis=(1, 2)) / np.sqrt(np.sum(a * a, axis=(1, 2)) * np.sum(b * b, axis=(1, 2))))

    face = corr(toy.images[toy.labels == FACE])
    noise = corr(toy.images[toy.labels == NOISE])
    assert face > 0.5
    assert abs(noise) < 0.05


def test_toy_rejects_bad_patch():
    with pytest.raises(InvalidArgument):
        ToyConfig(patch_size=65)


# --- feature files ------------------------------------------------------------------------

def test_features_trivial(tmp_path):
    path = tmp_path / "f.mpcf"
    x = np.arange(8, dtype=np.float32).reshape(1, 8, 1, 1)
    write_features(path, x)
    raw = path.read_bytes()
    assert raw[:4] == b"MPCF"
    assert struct.unpack("<IBB", raw[4:10]) == (1, 1, 4)
    out = load_features(path)
    assert out.shape == (1, 8, 1, 1) and np.array_equal(out, x)


def test_features_round_trip_bitwise(tmp_path, rng):
    x = rng.normal(size=(3, 5, 2, 7)).astype(np.float32)
    write_features(tmp_path / "f", x)
    assert load_features(tmp_path / "f").tobytes() == x.tobytes()


def test_features_truncated(tmp_path):
    write_features(tmp_path / "f", np.ones((2, 4), dtype=np.float32))
    raw = (tmp_path / "f").read_bytes()
    (tmp_path / "f").write_bytes(raw[:-4])
    with pytest.raises(LengthError):
        load_features(tmp_path / "f")


def test_features_bad_magic_and_version(tmp_path):
    write_features(tmp_path / "f", np.ones(3, dtype=np.float32))
    raw = bytearray((tmp_path / "f").read_bytes())
    (tmp_path / "m").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_features(tmp_path / "m")
    raw[4] = 9
    (tmp_path / "v").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_features(tmp_path / "v")


def test_labels_sidecar(tmp_path):
    write_labels(tmp_path / "l", [0, 1, 1], [1, -1, 0])
    raw = (tmp_path / "l").read_bytes()
    assert raw == struct.pack("<I", 3) + bytes([0, 1, 1, 1, 255, 0])
    labels, parts = load_labels(tmp_path / "l")
    assert list(labels) == [0, 1, 1] and list(parts) == [1, -1, 0]


def test_dataset_directory_round_trip(tmp_path):
    ds = generate_toy(ToyConfig(per_class=5))
    save_dataset(ds, tmp_path / "toy")
    back = load_dataset(tmp_path / "toy")
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.part_labels, ds.part_labels)


def test_dataset_consistency():
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((3, 1, 2, 2)), [0, 1], 2)
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((2, 1, 2, 2)), [0, 2], 2)


# --- batching ----------------------------------------------------------------------------

def _tiny(n=10):
    return Dataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.zeros(n), 1)


def test_batches_keep_partial():
    sizes = [len(idx) for idx, _, _ in batch_iter(_tiny(), 4)]
    assert sizes == [4, 4, 2]


def test_batches_unshuffled_order():
    order = np.concatenate([idx for idx, _, _ in batch_iter(_tiny(), 3)])
    assert np.array_equal(order, np.arange(10))


def test_batches_seeded():
    def perm(seed, epoch):
        return np.concatenate([idx for idx, _, _ in batch_iter(_tiny(), 3, seed, epoch)])

    assert np.array_equal(perm(5, 0), perm(5, 0))
    assert not np.array_equal(perm(5, 0), perm(5, 1))
    assert sorted(perm(5, 2)) == list(range(10))


def test_batches_invalid_size():
    with pytest.raises(InvalidArgument):
        list(batch_iter(_tiny(), 0))
