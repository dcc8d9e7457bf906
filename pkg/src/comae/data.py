"""Attributed datasets: containers, on-disk format, split protocol, synthetic generator.

A dataset directory holds::

    features.bin    magic "CMAE", u32 n/height/width/channels (little-endian),
                    then n*height*width*channels float32 values (little-endian)
    labels.csv      one integer class id per line
    attributes.csv  one row per class, comma-separated attribute values
    split.txt       optional; line 1 = seen class ids, line 2 = unseen class ids

All attributes are class-level: the attribute vector of sample ``i`` is the
row of ``class_attributes`` selected by ``labels[i]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import (
    as_array,
    check_finite,
    check_labels,
    check_non_negative,
    check_unit_interval,
)

FEATURES_MAGIC = b"CMAE"
FEATURES_FILE = "features.bin"
LABELS_FILE = "labels.csv"
ATTRIBUTES_FILE = "attributes.csv"
SPLIT_FILE = "split.txt"


class DatasetFormatError(ValueError):
    """A dataset file is malformed or violates a dataset invariant."""

    def __init__(self, message, path=None, line=None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if path is not None:
            where = f" [{path}" + (f", line {line}" if line is not None else "") + "]"
        super().__init__(f"{message}{where}")


@dataclass(frozen=True, eq=False)
class SplitSpec:
    """Disjoint partition of class ids into seen and unseen sets.

    The seed records how the split was drawn; it is provenance only and does
    not take part in equality (the on-disk format carries just the two sets).
    """

    seen: frozenset
    unseen: frozenset
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seen", frozenset(int(c) for c in self.seen))
        object.__setattr__(self, "unseen", frozenset(int(c) for c in self.unseen))
        if self.seen & self.unseen:
            raise ValueError(
                f"seen and unseen classes overlap: {sorted(self.seen & self.unseen)}"
            )

    def __eq__(self, other):
        if not isinstance(other, SplitSpec):
            return NotImplemented
        return self.seen == other.seen and self.unseen == other.unseen

    def __hash__(self):
        return hash((self.seen, self.unseen))

    @staticmethod
    def all_seen(num_classes, seed=0):
        return SplitSpec(frozenset(range(num_classes)), frozenset(), seed)

    def validate(self, num_classes):
        universe = self.seen | self.unseen
        if universe != set(range(num_classes)):
            raise ValueError(
                f"split must partition all {num_classes} classes, covers {sorted(universe)}"
            )
        return self


@dataclass(frozen=True, eq=False)
class AttributedDataset:
    """Samples with integer labels and a class-level attribute matrix.

    samples            (n, height, width, channels) float32 tensors; either raw
                       inputs for a trainable backbone or precomputed feature maps
    labels             (n,) integer class ids
    class_attributes   (num_classes, num_attributes) float32, finite values
    split              seen/unseen class partition
    attribute_names    optional tuple of num_attributes strings
    """

    samples: np.ndarray
    labels: np.ndarray
    class_attributes: np.ndarray
    split: SplitSpec
    attribute_names: tuple = None

    def __post_init__(self):
        samples = as_array(self.samples, "samples", dtype=np.float32, ndim=4)
        attrs = as_array(self.class_attributes, "class_attributes", dtype=np.float32, ndim=2)
        check_finite(samples, "samples")
        check_finite(attrs, "class_attributes")
        if samples.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if attrs.shape[1] < 1:
            raise ValueError("attribute dimension must be at least 1")
        labels = check_labels(self.labels, attrs.shape[0])
        if labels.shape[0] != samples.shape[0]:
            raise ValueError(
                f"labels length {labels.shape[0]} does not match {samples.shape[0]} samples"
            )
        self.split.validate(attrs.shape[0])
        if self.attribute_names is not None:
            names = tuple(str(s) for s in self.attribute_names)
            if len(names) != attrs.shape[1]:
                raise ValueError("attribute_names length does not match attribute dimension")
            object.__setattr__(self, "attribute_names", names)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_attributes", attrs)

    # -- shape accessors -------------------------------------------------
    @property
    def num_samples(self):
        return self.samples.shape[0]

    @property
    def num_classes(self):
        return self.class_attributes.shape[0]

    @property
    def num_attributes(self):
        return self.class_attributes.shape[1]

    @property
    def height(self):
        return self.samples.shape[1]

    @property
    def width(self):
        return self.samples.shape[2]

    @property
    def channels(self):
        return self.samples.shape[3]

    def sample_attributes(self, indices=None):
        """Per-sample attribute vectors, looked up from the class matrix."""
        labels = self.labels if indices is None else self.labels[indices]
        return self.class_attributes[labels]

    def indices_of(self, classes):
        """Positions of all samples whose label is in ``classes`` (dataset order)."""
        wanted = np.asarray(sorted(int(c) for c in classes), dtype=np.int64)
        return np.flatnonzero(np.isin(self.labels, wanted))

    def with_split(self, split):
        return AttributedDataset(
            self.samples, self.labels, self.class_attributes, split, self.attribute_names
        )

    def __eq__(self, other):
        if not isinstance(other, AttributedDataset):
            return NotImplemented
        return (
            self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
            and np.array_equal(self.labels, other.labels)
            and self.class_attributes.shape == other.class_attributes.shape
            and self.class_attributes.tobytes() == other.class_attributes.tobytes()
            and self.split == other.split
            and self.attribute_names == other.attribute_names
        )


# -- split protocol -------------------------------------------------------

def make_split(dataset, unseen_ratio, seed):
    """Draw a seeded seen/unseen partition with round(ratio * num_classes) unseen.

    Rounding is half-up on the floating-point product. The class order is a
    single seeded permutation whose prefix becomes the unseen set, so for a
    fixed seed the unseen sets are nested as the ratio grows.
    """
    check_unit_interval(unseen_ratio, "unseen_ratio")
    num_classes = dataset.num_classes
    num_unseen = int(math.floor(unseen_ratio * num_classes + 0.5))
    order = np.random.default_rng(seed).permutation(num_classes)
    unseen = frozenset(int(c) for c in order[:num_unseen])
    seen = frozenset(int(c) for c in order[num_unseen:])
    return SplitSpec(seen, unseen, seed)


# -- synthetic generator ----------------------------------------------------

def make_synthetic(num_classes, num_attributes, per_class, noise, seed, height=4, width=4):
    """Generate a dataset whose attributes are recoverable by construction.

    Each class gets an attribute vector drawn uniformly from [0, 1]^K; every
    spatial cell of a sample embeds that vector plus zero-mean Gaussian noise
    of scale ``noise`` (channels == num_attributes). With noise 0 the
    per-class mean of any spatial cell reproduces the class attribute row
    exactly, which makes this generator a transfer-test oracle.
    """
    for name, value in (
        ("num_classes", num_classes),
        ("num_attributes", num_attributes),
        ("per_class", per_class),
        ("height", height),
        ("width", width),
    ):
        if value < 1:
            raise ValueError(f"{name} must be at least 1, got {value}")
    check_non_negative(noise, "noise")

    rng = np.random.default_rng(seed)
    attrs = rng.random((num_classes, num_attributes)).astype(np.float32)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    base = attrs[labels][:, None, None, :]  # (n, 1, 1, k)
    samples = np.broadcast_to(base, (labels.size, height, width, num_attributes)).copy()
    if noise > 0:
        jitter = rng.standard_normal(samples.shape) * noise
        samples = (samples + jitter).astype(np.float32)
    return AttributedDataset(
        samples=samples,
        labels=labels,
        class_attributes=attrs,
        split=SplitSpec.all_seen(num_classes, seed),
    )


# -- on-disk format ---------------------------------------------------------

def _format_float(value):
    # shortest decimal string that parses back to the identical float32
    return np.format_float_positional(np.float32(value), unique=True, trim="0")


def save_dataset(dataset, root_path):
    """Write the directory layout read by :func:`load_dataset` (bit-exact)."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)

    header = FEATURES_MAGIC + struct.pack(
        "<IIII", dataset.num_samples, dataset.height, dataset.width, dataset.channels
    )
    payload = np.ascontiguousarray(dataset.samples, dtype="<f4").tobytes()
    (root / FEATURES_FILE).write_bytes(header + payload)

    (root / LABELS_FILE).write_text(
        "".join(f"{int(label)}\n" for label in dataset.labels)
    )

    rows = [
        ",".join(_format_float(v) for v in row) for row in dataset.class_attributes
    ]
    (root / ATTRIBUTES_FILE).write_text("".join(r + "\n" for r in rows))

    seen = ",".join(str(c) for c in sorted(dataset.split.seen))
    unseen = ",".join(str(c) for c in sorted(dataset.split.unseen))
    (root / SPLIT_FILE).write_text(seen + "\n" + unseen + "\n")


def _parse_id_line(line, path, lineno):
    line = line.strip()
    if not line:
        return frozenset()
    try:
        return frozenset(int(tok) for tok in line.split(","))
    except ValueError:
        raise DatasetFormatError("malformed class id list", path, lineno) from None


def load_dataset(root_path):
    """Load and validate a dataset directory; missing split.txt means all-seen."""
    root = Path(root_path)

    features_path = root / FEATURES_FILE
    try:
        raw = features_path.read_bytes()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read features: {exc}", features_path) from exc
    if len(raw) < 20 or raw[:4] != FEATURES_MAGIC:
        raise DatasetFormatError("malformed header (bad magic)", features_path)
    n, height, width, channels = struct.unpack("<IIII", raw[4:20])
    expected = n * height * width * channels * 4
    if len(raw) - 20 != expected:
        raise DatasetFormatError(
            f"payload size mismatch: expected {expected} bytes, found {len(raw) - 20}",
            features_path,
        )
    samples = (
        np.frombuffer(raw, dtype="<f4", offset=20)
        .reshape(n, height, width, channels)
        .copy()
    )

    labels_path = root / LABELS_FILE
    labels = []
    try:
        lines = labels_path.read_text().splitlines()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read labels: {exc}", labels_path) from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            labels.append(int(line))
        except ValueError:
            raise DatasetFormatError("malformed label", labels_path, lineno) from None
    if len(labels) != n:
        raise DatasetFormatError(
            f"row-count mismatch: features declare {n} samples, found {len(labels)} labels",
            labels_path,
        )
    labels = np.asarray(labels, dtype=np.int64)

    attrs_path = root / ATTRIBUTES_FILE
    rows = []
    try:
        lines = attrs_path.read_text().splitlines()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read attributes: {exc}", attrs_path) from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            row = [np.float32(tok) for tok in line.split(",")]
        except ValueError:
            raise DatasetFormatError("malformed attribute value", attrs_path, lineno) from None
        if not all(np.isfinite(row)):
            raise DatasetFormatError("non-finite attribute", attrs_path, lineno)
        if rows and len(row) != len(rows[0]):
            raise DatasetFormatError(
                f"column-count mismatch: expected {len(rows[0])} values", attrs_path, lineno
            )
        rows.append(row)
    if not rows:
        raise DatasetFormatError("attributes file is empty", attrs_path)
    attrs = np.asarray(rows, dtype=np.float32)

    if labels.size and (labels.min() < 0 or labels.max() >= attrs.shape[0]):
        bad_idx = int(np.flatnonzero((labels < 0) | (labels >= attrs.shape[0]))[0])
        raise DatasetFormatError(
            f"label out of range: {int(labels[bad_idx])} with {attrs.shape[0]} classes",
            labels_path,
            bad_idx + 1,
        )

    split_path = root / SPLIT_FILE
    if split_path.exists():
        split_lines = split_path.read_text().splitlines()
        while len(split_lines) < 2:
            split_lines.append("")
        seen = _parse_id_line(split_lines[0], split_path, 1)
        unseen = _parse_id_line(split_lines[1], split_path, 2)
        try:
            split = SplitSpec(seen, unseen).validate(attrs.shape[0])
        except ValueError as exc:
            raise DatasetFormatError(str(exc), split_path) from exc
    else:
        split = SplitSpec.all_seen(attrs.shape[0])

    try:
        return AttributedDataset(samples, labels, attrs, split)
    except ValueError as exc:
        raise DatasetFormatError(str(exc), root) from exc
