"""Synthetic image populations and the HPDS dataset codec.

Three prototype families stand in for real image corpora:

* ``victim_task``: low-contrast smooth blob fields, one prototype per class.
* ``shadow_ood``: blob textures of higher contrast from a separately seeded
  family; ``num_classes`` here is the number of distinct textures.
* ``attack_pool``: unlabeled blends of shadow prototypes with freshly drawn
  smooth noise textures.

Samples are ``clip(prototype + sigma * noise, 0, 1)`` after a random integer
translation of up to ``max_shift`` pixels (edge-replicated).
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CodecError, ConfigError, UsageError
from .seeding import derive_seed, make_rng

FAMILIES = ("victim_task", "shadow_ood", "attack_pool")

MAGIC = b"HPDS"
VERSION = 1
_HEADER = struct.Struct("<4s6IB3x")
HEADER_SIZE = _HEADER.size  # 32
LABELS_NONE, LABELS_HARD, LABELS_SOFT = 0, 1, 2
DEFAULT_CONTRAST = {"victim_task": 0.6, "shadow_ood": 1.0}


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    channels: int = 1
    height: int = 16
    width: int = 16
    samples_per_split: dict = field(default_factory=lambda: {"train": 3000, "test": 1000})
    noise_sigma: float = 0.15
    prototype_family_seed: int = 20240
    family: str = "victim_task"
    max_shift: int = 2
    contrast: float = None  # sigmoid gain of the prototypes; None picks the family default

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.channels, self.height, self.width) < 1:
            raise ConfigError("image dimensions must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.contrast is not None and self.contrast <= 0:
            raise ConfigError("contrast must be positive")

    @property
    def shape(self):
        return (self.channels, self.height, self.width)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labeled (or unlabeled) image collection."""

    inputs: np.ndarray
    labels: np.ndarray = None
    num_classes: int = 10
    split_name: str = ""
    generation_seed: int = 0

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        if inputs.ndim != 4:
            raise UsageError(f"inputs must be [count, C, H, W], got shape {inputs.shape}")
        if inputs.size and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise UsageError("pixel values must lie in [0, 1]")
        inputs.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64)
            if labels.shape != (len(inputs),):
                raise UsageError("labels must have one entry per sample")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise UsageError(f"labels must lie in [0, {self.num_classes})")
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.inputs)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.num_classes == other.num_classes and same_labels
                and self.inputs.shape == other.inputs.shape
                and np.array_equal(self.inputs, other.inputs))

    @property
    def shape(self):
        return self.inputs.shape[1:]

    def subset(self, indices, split_name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices],
                       None if self.labels is None else self.labels[indices],
                       self.num_classes, split_name or self.split_name, self.generation_seed)

    def class_counts(self):
        if self.labels is None:
            raise UsageError("dataset is unlabeled")
        return np.bincount(self.labels, minlength=self.num_classes)


def _smooth_field(rng, shape, n_blobs):
    """Sum of random signed Gaussian blobs, standardized per channel."""
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros(shape)
    for ch in range(c):
        for _ in range(n_blobs):
            cy, cx = rng.uniform(-1, h), rng.uniform(-1, w)
            width = rng.uniform(1.5, 3.5)
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
            out[ch] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return _standardize(out)


def _standardize(field_):
    mu = field_.mean(axis=(1, 2), keepdims=True)
    sd = field_.std(axis=(1, 2), keepdims=True)
    return (field_ - mu) / np.where(sd > 0, sd, 1.0)


def _squash(z, gain=2.5):
    """Map a standardized field into (0.05, 0.95); larger gain, higher contrast."""
    return 0.05 + 0.9 / (1.0 + np.exp(-gain * z))


def prototypes(spec, family=None):
    """Class prototypes of a family; a pure function of the family seed.

    ``attack_pool`` has no prototypes of its own and reuses the shadow family.
    """
    family = family or spec.family
    if family == "attack_pool":
        family = "shadow_ood"
    rng = make_rng(spec.prototype_family_seed, f"prototypes/{family}")
    gain = spec.contrast if spec.contrast is not None else DEFAULT_CONTRAST[family]
    return np.stack([_squash(_smooth_field(rng, spec.shape, 7), gain) for _ in range(spec.num_classes)])


def _translate(img, dy, dx, max_shift):
    if dy == 0 and dx == 0:
        return img
    s = max_shift
    padded = np.pad(img, ((0, 0), (s, s), (s, s)), mode="edge")
    h, w = img.shape[1:]
    return padded[:, s - dy:s - dy + h, s - dx:s - dx + w]


def generate(spec, seed, split="train"):
    """Generate one split of a family. Deterministic per (spec, seed, split)."""
    if split not in spec.samples_per_split:
        raise UsageError(f"split {split!r} not in samples_per_split {sorted(spec.samples_per_split)}")
    count = int(spec.samples_per_split[split])
    if count < 1:
        raise UsageError(f"split {split!r} requests zero samples")
    rng = make_rng(seed, f"{spec.family}/{split}")
    protos = prototypes(spec)
    n = spec.num_classes
    out = np.empty((count, *spec.shape))
    if spec.family == "attack_pool":
        labels = None
        for i in range(count):
            a, b = rng.choice(n, size=2, replace=False)
            w = rng.uniform()
            lam = rng.uniform()
            texture = _squash(_smooth_field(rng, spec.shape, int(rng.integers(3, 10))))
            out[i] = lam * (w * protos[a] + (1 - w) * protos[b]) + (1 - lam) * texture
    else:
        labels = rng.permutation(np.arange(count) % n)
        out[:] = protos[labels]
    for i in range(count):
        if spec.max_shift > 0:
            dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
            out[i] = _translate(out[i], int(dy), int(dx), spec.max_shift)
        if spec.noise_sigma > 0:
            out[i] += spec.noise_sigma * rng.standard_normal(spec.shape)
    np.clip(out, 0.0, 1.0, out=out)
    return Dataset(out, labels, n, split, int(seed))


def class_balanced_subset(ds, per_class, seed):
    """``min(per_class, available)`` samples of every class, chosen by a seeded shuffle."""
    if ds.labels is None:
        raise UsageError("class_balanced_subset needs a labeled dataset")
    if per_class < 1:
        raise UsageError("per_class must be >= 1")
    order = np.random.default_rng(derive_seed(seed, "balanced_subset")).permutation(len(ds))
    taken = np.zeros(ds.num_classes, dtype=np.int64)
    keep = []
    for idx in order:
        label = ds.labels[idx]
        if taken[label] < per_class:
            taken[label] += 1
            keep.append(idx)
    return ds.subset(keep)


def expected_file_size(count, shape, label_kind=LABELS_HARD, num_classes=10):
    per_label = {LABELS_NONE: 0, LABELS_HARD: 4, LABELS_SOFT: 8 * num_classes}[label_kind]
    return HEADER_SIZE + count * (per_label + 8 * int(np.prod(shape)))


def _encode(inputs, label_kind, labels, num_classes):
    count, c, h, w = inputs.shape
    header = _HEADER.pack(MAGIC, VERSION, count, c, h, w, num_classes, label_kind)
    pixels = np.ascontiguousarray(inputs, dtype="<f8").reshape(count, -1)
    if label_kind == LABELS_NONE:
        body = pixels
        return header + body.tobytes()
    if label_kind == LABELS_HARD:
        row = np.dtype([("label", "<u4"), ("pixels", "<f8", pixels.shape[1])])
        rec = np.empty(count, dtype=row)
        rec["label"] = labels
    else:
        row = np.dtype([("target", "<f8", num_classes), ("pixels", "<f8", pixels.shape[1])])
        rec = np.empty(count, dtype=row)
        rec["target"] = labels
    rec["pixels"] = pixels
    return header + rec.tobytes()


def _decode(buf):
    if len(buf) < HEADER_SIZE:
        raise CodecError("file shorter than the 32-byte header", len(buf))
    magic, version, count, c, h, w, n, label_kind = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CodecError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise CodecError(f"unsupported version {version}", 4)
    if label_kind not in (LABELS_NONE, LABELS_HARD, LABELS_SOFT):
        raise CodecError(f"invalid label flag {label_kind}", 28)
    expected = expected_file_size(count, (c, h, w), label_kind, n)
    if len(buf) != expected:
        raise CodecError(f"payload size mismatch: expected {expected} bytes, found {len(buf)}",
                         min(len(buf), expected))
    d = c * h * w
    if label_kind == LABELS_NONE:
        inputs = np.frombuffer(buf, dtype="<f8", offset=HEADER_SIZE).reshape(count, c, h, w)
        return inputs.astype(np.float64), None, n, label_kind
    if label_kind == LABELS_HARD:
        row = np.dtype([("label", "<u4"), ("pixels", "<f8", d)])
        rec = np.frombuffer(buf, dtype=row, offset=HEADER_SIZE)
        labels = rec["label"].astype(np.int64)
    else:
        row = np.dtype([("target", "<f8", n), ("pixels", "<f8", d)])
        rec = np.frombuffer(buf, dtype=row, offset=HEADER_SIZE)
        labels = rec["target"].astype(np.float64)
    return rec["pixels"].reshape(count, c, h, w).astype(np.float64), labels, n, label_kind


def write_dataset(ds, path):
    kind = LABELS_NONE if ds.labels is None else LABELS_HARD
    with open(path, "wb") as f:
        f.write(_encode(ds.inputs, kind, ds.labels, ds.num_classes))


def read_dataset(path, split_name=""):
    with open(path, "rb") as f:
        buf = f.read()
    inputs, labels, n, kind = _decode(buf)
    if kind == LABELS_SOFT:
        raise CodecError("file holds a soft-target transfer set, not a dataset", 28)
    try:
        return Dataset(inputs, labels, n, split_name)
    except UsageError as exc:
        raise CodecError(f"invalid dataset contents: {exc}", HEADER_SIZE) from None


def prototype_separation(spec_a, spec_b, seed, probe=200):
    """Family-distinctness proxy.

    Returns ``(cross_rms, within_sd)``: the mean RMS per-pixel distance
    between prototypes of the two families, and the RMS per-pixel deviation
    of untranslated samples of ``spec_a`` from their own prototype.
    """
    pa, pb = prototypes(spec_a), prototypes(spec_b)
    diffs = pa[:, None] - pb[None, :]
    cross = float(np.sqrt((diffs ** 2).mean(axis=(2, 3, 4))).mean())
    local = DatasetSpec(spec_a.num_classes, *spec_a.shape, {"probe": probe}, spec_a.noise_sigma,
                        spec_a.prototype_family_seed, spec_a.family, 0, spec_a.contrast)
    ds = generate(local, seed, "probe")
    within = float(np.sqrt(((ds.inputs - pa[ds.labels]) ** 2).mean()))
    return cross, within
