"""Datasets, label-noise transition matrices, corruption and auditing."""
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataIOError, FormatError, StateError, ValidationError

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")

# truck -> automobile, bird -> airplane, deer -> horse, cat <-> dog
CIFAR10_PAIR_MAP = {9: 1, 2: 0, 4: 7, 3: 5, 5: 3}

# CIFAR-100 coarse groups (fine label ids), in coarse-label order.
CIFAR100_SUPERCLASSES = (
    (4, 30, 55, 72, 95),    # aquatic mammals
    (1, 32, 67, 73, 91),    # fish
    (54, 62, 70, 82, 92),   # flowers
    (9, 10, 16, 28, 61),    # food containers
    (0, 51, 53, 57, 83),    # fruit and vegetables
    (22, 39, 40, 86, 87),   # household electrical devices
    (5, 20, 25, 84, 94),    # household furniture
    (6, 7, 14, 18, 24),     # insects
    (3, 42, 43, 88, 97),    # large carnivores
    (12, 17, 37, 68, 76),   # large man-made outdoor things
    (23, 33, 49, 60, 71),   # large natural outdoor scenes
    (15, 19, 21, 31, 38),   # large omnivores and herbivores
    (34, 63, 64, 66, 75),   # medium-sized mammals
    (26, 45, 77, 79, 99),   # non-insect invertebrates
    (2, 11, 35, 46, 98),    # people
    (27, 29, 44, 78, 93),   # reptiles
    (36, 50, 65, 74, 80),   # small mammals
    (47, 52, 56, 59, 96),   # trees
    (8, 13, 48, 58, 90),    # vehicles 1
    (41, 69, 81, 85, 89),   # vehicles 2
)


def cifar100_pair_map():
    """Each fine class flips into the next one of its super-class, circularly."""
    pairs = {}
    for group in CIFAR100_SUPERCLASSES:
        for i, c in enumerate(group):
            pairs[c] = group[(i + 1) % len(group)]
    return pairs


class LabeledDataset:
    """Images in [0, 1] with clean labels and (after corruption) noisy labels."""

    def __init__(self, images, labels, class_count, split="train"):
        labels = np.asarray(labels, dtype=np.int64)
        if split not in ("train", "test"):
            raise ValidationError(f"split must be train or test, got {split!r}")
        if labels.ndim != 1 or len(labels) != len(images):
            raise ValidationError("one label per image required")
        if len(labels) and (labels.min() < 0 or labels.max() >= class_count):
            raise ValidationError(f"labels must lie in [0, {class_count})")
        self.images = images
        self.class_count = int(class_count)
        self.split = split
        self._clean_labels = labels
        self.noisy_labels = labels.copy()
        self.corrupted = False

    def __len__(self):
        return len(self._clean_labels)

    def __repr__(self):
        return (f"LabeledDataset(n={len(self)}, shape={self.images.shape[1:]}, classes={self.class_count}, "
                f"split={self.split!r}, corrupted={self.corrupted})")

    @property
    def clean_labels(self):
        """Ground truth. Only metric code reads this; training sees ``noisy_labels``."""
        return self._clean_labels

    @property
    def clean_flag(self):
        return self.noisy_labels == self._clean_labels

    def with_noisy_labels(self, noisy):
        out = LabeledDataset(self.images, self._clean_labels, self.class_count, self.split)
        out.noisy_labels = np.asarray(noisy, dtype=np.int64)
        out.corrupted = True
        return out


@dataclass
class TransitionMatrix:
    q: np.ndarray
    model: str
    epsilon: float

    @property
    def class_count(self):
        return self.q.shape[0]


def build_transition_matrix(model, epsilon, class_count, pair_map=None):
    """Row-stochastic Q with Q[i, j] = Pr[noisy = j | clean = i]."""
    if not 0 <= epsilon < 1:
        raise ValidationError(f"noise rate must lie in [0, 1), got {epsilon}")
    if class_count < 2:
        raise ValidationError("need at least two classes")
    if model == "symmetric":
        q = np.full((class_count, class_count), epsilon / (class_count - 1))
        np.fill_diagonal(q, 1.0 - epsilon)
    elif model == "asymmetric":
        if pair_map is None:
            if class_count == 10:
                pair_map = CIFAR10_PAIR_MAP
            elif class_count == 100:
                pair_map = cifar100_pair_map()
            else:
                raise ValidationError("asymmetric noise needs a pair_map unless class_count is 10 or 100")
        q = np.eye(class_count)
        for s, t in pair_map.items():
            if s == t:
                raise ValidationError(f"pair_map sends class {s} to itself")
            if not (0 <= s < class_count and 0 <= t < class_count):
                raise ValidationError(f"pair_map entry {s}->{t} outside [0, {class_count})")
            q[s, s] = 1.0 - epsilon
            q[s, t] = epsilon
    else:
        raise ValidationError(f"unknown noise model {model!r}")
    return TransitionMatrix(q, model, float(epsilon))


def _sample_uniforms(seed, count):
    # one independent stream per sample index, so any subset corrupts identically
    return np.array([np.random.default_rng([seed, i]).random() for i in range(count)])


def corrupt_labels(dataset, q, seed):
    """Draw each noisy label from row ``q[clean_label]`` with a per-sample stream."""
    if dataset.split != "train":
        raise ValidationError("only the train split may be corrupted")
    if dataset.corrupted:
        raise StateError("dataset labels are already corrupted")
    if q.class_count != dataset.class_count:
        raise ValidationError(f"transition matrix is {q.class_count}-class, dataset has {dataset.class_count}")
    cdf = np.cumsum(q.q, axis=1)
    cdf[:, -1] = 1.0
    u = _sample_uniforms(seed, len(dataset))
    clean = dataset.clean_labels
    noisy = (u[:, None] >= cdf[clean]).sum(axis=1)
    return dataset.with_noisy_labels(np.minimum(noisy, dataset.class_count - 1))


@dataclass
class NoiseAudit:
    realized_flip_rate: float
    empirical_q: np.ndarray
    counts: np.ndarray


def noise_audit(dataset):
    if not dataset.corrupted:
        raise StateError("noise_audit needs a corrupted dataset")
    c = dataset.class_count
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (dataset.clean_labels, dataset.noisy_labels), 1)
    rows = counts.sum(axis=1, keepdims=True)
    emp = np.divide(counts, rows, out=np.zeros((c, c)), where=rows > 0)
    flip = float(1.0 - dataset.clean_flag.mean()) if len(dataset) else 0.0
    return NoiseAudit(flip, emp, counts)


# ------------------------------------------------------------- synthetic


def _frequency_pairs(count):
    # (i, j) grid walked shell by shell: (0,0), (1,0), (0,1), (1,1), (2,0), ...
    n = 1
    while n * n < count:
        n += 1
    pairs = sorted(((i, j) for i in range(n) for j in range(n)), key=lambda p: (max(p), p[1], p[0]))
    return pairs[:count]


def _templates(class_count, side, channels):
    # Products of centred cosines: even in x (a horizontal flip keeps the class)
    # and slow enough that a few pixels of crop shift barely move them. The low
    # class bits pick per-channel signs, the remaining bits shift the frequency pair.
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    centre = (side - 1) / 2.0
    bits = min(channels, 3)
    index = [c % 4 + 4 * (c >> bits) for c in range(class_count)]
    pairs = _frequency_pairs(max(index) + 1)
    out = np.empty((class_count, channels, side, side))
    for c in range(class_count):
        i, j = pairs[index[c]]
        fx, fy = 0.5 * (1 + i), 0.5 * (1 + j)
        wave = np.cos(2 * np.pi * fx * (xx - centre) / side) * np.cos(2 * np.pi * fy * (yy - centre) / side)
        for ch in range(channels):
            sign = 1.0 if ((c >> ch) + ch) % 2 == 0 else -1.0
            out[c, ch] = 0.5 + 0.25 * sign * wave
    return out


def synth_blobs(class_count, per_class, image_side, seed, channels=3, noise_std=0.25, split="train"):
    """Per-class cosine textures plus seeded Gaussian pixel noise, clipped to [0, 1].

    Templates depend only on (class, side, channels), so datasets drawn with
    different seeds share a distribution.
    """
    if class_count < 2:
        raise ValidationError("synth_blobs needs class_count >= 2")
    rng = np.random.default_rng(seed)
    tmpl = _templates(class_count, image_side, channels)
    labels = np.repeat(np.arange(class_count), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = tmpl[labels] + noise_std * rng.standard_normal((len(labels), channels, image_side, image_side))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(images, labels, class_count, split)


# ---------------------------------------------------------------- CIFAR-10

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"


def read_cifar10_batch(path):
    """(images uint8 [N,3,32,32], labels int64 [N]) from one binary batch file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read CIFAR-10 batch {path}: {exc}") from exc
    if not raw or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise FormatError(f"{path}: label byte {labels.max()} out of range")
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def write_cifar10_batch(path, images, labels):
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), 3 * 32 * 32)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def load_cifar10(directory):
    parts = [read_cifar10_batch(os.path.join(directory, f)) for f in CIFAR10_TRAIN_FILES]
    x_train = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    y_train = np.concatenate([p[1] for p in parts])
    x_test, y_test = read_cifar10_batch(os.path.join(directory, CIFAR10_TEST_FILE))
    return (LabeledDataset(x_train, y_train, 10, "train"),
            LabeledDataset(x_test.astype(np.float32) / 255.0, y_test, 10, "test"))


# -------------------------------------------------------- flat binary format
#
#   b"CMDS" | u32 version | u32 N | u32 channels | u32 H | u32 W | u32 class_count | u32 flags
#   int32 clean labels [N] | (flags & 1) int32 noisy labels [N] | float32 pixels [N, channels, H, W]
# little endian throughout.

DATASET_MAGIC = b"CMDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4s7I")


def save_dataset(path, dataset):
    n, c, h, w = dataset.images.shape
    flags = 1 if dataset.corrupted else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, h, w, dataset.class_count, flags))
        fh.write(dataset.clean_labels.astype("<i4").tobytes())
        if flags & 1:
            fh.write(dataset.noisy_labels.astype("<i4").tobytes())
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())


def load_dataset(path, split="train"):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataIOError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, c, h, w, classes, flags = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise FormatError(f"{path}: not a version-{DATASET_VERSION} dataset file")
    label_blocks = 2 if flags & 1 else 1
    expected = _HEADER.size + 4 * n * label_blocks + 4 * n * c * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    pos = _HEADER.size
    clean = np.frombuffer(raw, "<i4", n, pos).astype(np.int64)
    pos += 4 * n
    noisy = None
    if flags & 1:
        noisy = np.frombuffer(raw, "<i4", n, pos).astype(np.int64)
        pos += 4 * n
    images = np.frombuffer(raw, "<f4", n * c * h * w, pos).reshape(n, c, h, w).copy()
    ds = LabeledDataset(images, clean, classes, split)
    return ds.with_noisy_labels(noisy) if noisy is not None else ds
