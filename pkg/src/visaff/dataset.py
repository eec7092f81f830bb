"""Labels, feature files, fold plans and synthetic fixtures.

Artifacts handled here:

* annotation CSV, header ``image_id,annotator_id,d1,...,d12``, raw integer
  ratings on the bipolar 7-point scale
* label CSV, header ``image_id,d1,...,d12``, aggregated ratings scaled to
  [-0.5, +0.5]
* feature files, a little-endian binary container (layout below)

Feature file layout, magic ``AMTF``::

    magic     4 bytes   b"AMTF"
    version   u32       1
    layout    u8        0 = tiled, 1 = whole
    count     u32       record count
    record:
        id_len    u16
        id        UTF-8 bytes
        payload   float32 array; tiled = 4*16*2048 values in
                  (model, sub-image, dim) row-major order, whole = 8064

A tiled payload holds one 2048-dim vector per (model row, sub-image) pair
in the fixed model order inception, xception, resnet, densenet; sub-images
are ordered row-major over the 4x4 grid.  The densenet row carries 1920
real dims followed by 128 zeros of padding.  A whole payload is the
2048+2048+2048+1920 concatenation of whole-image vectors in the same model
order.  Both readers and writers reject records that violate the padding.

Feature values are stored at float32 precision; all engine math promotes
to float64 at batch-assembly time.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    MissingDataError,
    PaddingError,
    TruncatedFileError,
    VersionError,
)

N_MODELS = 4
N_SUBIMAGES = 16
FEATURE_DIM = 2048
DENSENET_DIM = 1920
DENSENET_PAD = FEATURE_DIM - DENSENET_DIM  # 128
DENSENET_ROW = 3  # index of the densenet row on the model axis
WHOLE_DIM = 3 * FEATURE_DIM + DENSENET_DIM  # 8064

MODEL_NAMES = ("inception", "xception", "resnet", "densenet")

# The twelve affective dimensions, in their fixed reporting order.
DIMENSIONS = (
    "Complexity",
    "Quality",
    "Appeal",
    "Naturalness",
    "Pleasantness",
    "Arousal",
    "Familiarity",
    "Coping Potential",
    "Comprehensibility",
    "Coherence",
    "Excitingness",
    "General Interest",
)
N_TASKS = len(DIMENSIONS)

_MAGIC = b"AMTF"
_VERSION = 1
_LAYOUT_CODES = {"tiled": 0, "whole": 1}
_LAYOUT_NAMES = {v: k for k, v in _LAYOUT_CODES.items()}

AGGREGATION_MODES = ("mean", "median")


def seeded_rng(seed):
    """Generator from a signed or unsigned 64-bit seed."""
    return np.random.default_rng(seed & ((1 << 64) - 1))


def scale_rating(x):
    """Map a raw rating in [1, 7] onto [-0.5, +0.5] via (x - 4) / 6."""
    if not 1.0 <= x <= 7.0:
        raise ValueError(f"rating {x!r} outside the 1..7 scale")
    return (x - 4.0) / 6.0


# ---------------------------------------------------------------------------
# annotations and labels


@dataclass(frozen=True)
class AnnotationRow:
    image_id: str
    annotator_id: str
    ratings: tuple  # 12 ints, each in 1..7


@dataclass
class RawAnnotationTable:
    """Raw per-annotator ratings, one row per (image, annotator) pair."""

    rows: list

    def validate(self):
        seen = set()
        for row in self.rows:
            if len(row.ratings) != N_TASKS:
                raise ValueError(
                    f"image {row.image_id!r}: expected {N_TASKS} ratings, "
                    f"got {len(row.ratings)}"
                )
            for r in row.ratings:
                if not isinstance(r, int) or not 1 <= r <= 7:
                    raise ValueError(
                        f"image {row.image_id!r}: rating {r!r} outside the 1..7 scale"
                    )
            key = (row.image_id, row.annotator_id)
            if key in seen:
                raise ValueError(
                    f"duplicate annotation for image {row.image_id!r} "
                    f"by annotator {row.annotator_id!r}"
                )
            seen.add(key)
        return self

    def image_ids(self):
        return sorted({row.image_id for row in self.rows})


def read_annotations(path):
    """Parse an annotation CSV; errors cite the offending line number."""
    expected = ["image_id", "annotator_id"] + [f"d{i + 1}" for i in range(N_TASKS)]
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise FormatError(
                f"{path}: line 1: expected header {','.join(expected)!r}"
            )
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(expected):
                raise FormatError(
                    f"{path}: line {lineno}: expected {len(expected)} fields, got {len(rec)}"
                )
            ratings = []
            for j, raw in enumerate(rec[2:]):
                try:
                    value = int(raw)
                except ValueError:
                    raise ValueError(
                        f"{path}: line {lineno}: rating {raw!r} for d{j + 1} is not an integer"
                    ) from None
                if not 1 <= value <= 7:
                    raise ValueError(
                        f"{path}: line {lineno}: rating {value} for d{j + 1} "
                        f"outside the 1..7 scale"
                    )
                ratings.append(value)
            rows.append(AnnotationRow(rec[0], rec[1], tuple(ratings)))
    table = RawAnnotationTable(rows)
    table.validate()
    return table


@dataclass
class LabelMatrix:
    """Aggregated, scaled labels: one row per image, twelve columns."""

    image_ids: list
    values: np.ndarray  # (N, 12) float64, every entry in [-0.5, +0.5]
    aggregation: str = "mean"
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.image_ids), N_TASKS):
            raise ValueError(
                f"label matrix shape {self.values.shape} does not match "
                f"{len(self.image_ids)} ids x {N_TASKS} dimensions"
            )
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("duplicate image ids in label matrix")
        if self.values.size and (
            self.values.min() < -0.5 or self.values.max() > 0.5
        ):
            raise ValueError("label values must lie in [-0.5, +0.5]")
        if self.aggregation not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation mode {self.aggregation!r}")
        self._index = {iid: i for i, iid in enumerate(self.image_ids)}

    def rows_for(self, ids):
        """Stack label rows for the given ids, (len(ids), 12)."""
        missing = [i for i in ids if i not in self._index]
        if missing:
            raise MissingDataError(f"no labels for image ids: {missing[:5]}")
        return self.values[[self._index[i] for i in ids]]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id"] + [f"d{i + 1}" for i in range(N_TASKS)])
            for iid, row in zip(self.image_ids, self.values):
                writer.writerow([iid] + [repr(float(v)) for v in row])

    @staticmethod
    def from_csv(path, aggregation="mean"):
        expected = ["image_id"] + [f"d{i + 1}" for i in range(N_TASKS)]
        ids, values = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != expected:
                raise FormatError(f"{path}: line 1: expected header {','.join(expected)!r}")
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(expected):
                    raise FormatError(
                        f"{path}: line {lineno}: expected {len(expected)} fields"
                    )
                try:
                    row = [float(v) for v in rec[1:]]
                except ValueError:
                    raise ValueError(
                        f"{path}: line {lineno}: non-numeric label value"
                    ) from None
                ids.append(rec[0])
                values.append(row)
        return LabelMatrix(ids, np.array(values, dtype=np.float64).reshape(len(ids), N_TASKS),
                           aggregation=aggregation)


def aggregate_labels(table, mode="mean", expected_ids=None):
    """Aggregate raw ratings per image, then scale onto [-0.5, +0.5].

    Rows of the result are sorted by image id.  When ``expected_ids`` is
    given, every listed image must carry at least one annotation.
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    table.validate()
    by_image = {}
    for row in table.rows:
        by_image.setdefault(row.image_id, []).append(row.ratings)
    if expected_ids is not None:
        missing = sorted(set(expected_ids) - set(by_image))
        if missing:
            raise MissingDataError(
                f"image {missing[0]!r} has no annotations"
                + (f" ({len(missing)} images total)" if len(missing) > 1 else "")
            )
    ids = sorted(by_image)
    values = np.empty((len(ids), N_TASKS), dtype=np.float64)
    for i, iid in enumerate(ids):
        block = np.asarray(by_image[iid], dtype=np.float64)
        agg = block.mean(axis=0) if mode == "mean" else np.median(block, axis=0)
        values[i] = [(a - 4.0) / 6.0 for a in agg]
    return LabelMatrix(ids, values, aggregation=mode)


# ---------------------------------------------------------------------------
# feature tensors and their binary container


@dataclass
class FeatureTensor:
    """Per-image feature payload in either the tiled or the whole layout."""

    image_id: str
    layout: str  # "tiled" | "whole"
    values: np.ndarray  # float32; (4, 16, 2048) tiled, (8064,) whole

    def validate(self):
        if self.layout not in _LAYOUT_CODES:
            raise FormatError(f"{self.image_id!r}: unknown layout {self.layout!r}")
        v = self.values
        if self.layout == "tiled":
            if v.shape != (N_MODELS, N_SUBIMAGES, FEATURE_DIM):
                raise FormatError(
                    f"{self.image_id!r}: tiled payload shape {v.shape}, "
                    f"expected {(N_MODELS, N_SUBIMAGES, FEATURE_DIM)}"
                )
            pad = v[DENSENET_ROW, :, DENSENET_DIM:]
            if np.any(pad != 0.0):
                raise PaddingError(
                    f"{self.image_id!r}: densenet row carries non-zero values "
                    f"in its {DENSENET_PAD}-entry zero pad"
                )
        else:
            if v.shape != (WHOLE_DIM,):
                raise FormatError(
                    f"{self.image_id!r}: whole payload length {v.shape}, "
                    f"expected ({WHOLE_DIM},)"
                )
        if not np.all(np.isfinite(v)):
            raise FormatError(f"{self.image_id!r}: payload contains non-finite values")
        return self


def features_by_id(records):
    """Index records by image id, rejecting duplicates."""
    out = {}
    for rec in records:
        if rec.image_id in out:
            raise ValueError(f"duplicate feature record for image {rec.image_id!r}")
        out[rec.image_id] = rec
    return out


def write_features(path, records, layout=None):
    """Serialize records to the binary feature container.

    All records must share one layout; for an empty record list the layout
    must be passed explicitly (or defaults to tiled).
    """
    records = list(records)
    if records:
        layouts = {r.layout for r in records}
        if len(layouts) > 1:
            raise ValueError(f"mixed layouts in one file: {sorted(layouts)}")
        inferred = records[0].layout
        if layout is not None and layout != inferred:
            raise ValueError(f"layout argument {layout!r} contradicts records ({inferred!r})")
        layout = inferred
    elif layout is None:
        layout = "tiled"
    if layout not in _LAYOUT_CODES:
        raise ValueError(f"unknown layout {layout!r}")
    for rec in records:
        rec.validate()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IBI", _VERSION, _LAYOUT_CODES[layout], len(records)))
        for rec in records:
            idb = rec.image_id.encode("utf-8")
            if len(idb) > 0xFFFF:
                raise ValueError(f"image id too long: {rec.image_id[:32]!r}...")
            fh.write(struct.pack("<H", len(idb)))
            fh.write(idb)
            fh.write(np.ascontiguousarray(rec.values, dtype="<f4").tobytes())


def read_features(path):
    """Parse a binary feature container, validating every record."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<4sIBI")
    if len(blob) < header:
        raise TruncatedFileError(f"{path}: file shorter than the header")
    magic, version, layout_code, count = struct.unpack_from("<4sIBI", blob, 0)
    if magic != _MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise VersionError(f"{path}: unsupported version {version}, expected {_VERSION}")
    if layout_code not in _LAYOUT_NAMES:
        raise FormatError(f"{path}: unknown layout code {layout_code}")
    layout = _LAYOUT_NAMES[layout_code]
    n_values = N_MODELS * N_SUBIMAGES * FEATURE_DIM if layout == "tiled" else WHOLE_DIM
    offset = header
    records = []
    for i in range(count):
        if offset + 2 > len(blob):
            raise TruncatedFileError(f"{path}: record {i}: truncated id length")
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + id_len > len(blob):
            raise TruncatedFileError(f"{path}: record {i}: truncated id")
        image_id = blob[offset : offset + id_len].decode("utf-8")
        offset += id_len
        nbytes = 4 * n_values
        if offset + nbytes > len(blob):
            raise TruncatedFileError(f"{path}: record {i} ({image_id!r}): truncated payload")
        values = np.frombuffer(blob, dtype="<f4", count=n_values, offset=offset).copy()
        offset += nbytes
        if layout == "tiled":
            values = values.reshape(N_MODELS, N_SUBIMAGES, FEATURE_DIM)
        rec = FeatureTensor(image_id, layout, values)
        rec.validate()
        records.append(rec)
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after last record")
    return records


# ---------------------------------------------------------------------------
# fold plans


@dataclass
class FoldPlan:
    """A k-way partition of image ids, sizes differing by at most one."""

    k: int
    assignments: dict  # image_id -> fold index
    seed: int

    def fold_members(self, fold):
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def train_members(self, fold):
        return sorted(i for i, f in self.assignments.items() if f != fold)


def kfold_split(image_ids, k, seed):
    """Seeded uniform shuffle of the sorted ids, then contiguous chunking."""
    ids = list(image_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids passed to kfold_split")
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of images ({len(ids)})")
    # permute the sorted id list so the plan is independent of input order
    rng = seeded_rng(seed)
    ordered = sorted(ids)
    sequence = [ordered[i] for i in rng.permutation(len(ordered))]
    base, extra = divmod(len(ids), k)
    assignments = {}
    pos = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        for iid in sequence[pos : pos + size]:
            assignments[iid] = fold
        pos += size
    return FoldPlan(k=k, assignments=assignments, seed=seed)


# ---------------------------------------------------------------------------
# synthetic planted-signal fixtures

# Encoding of the latent scalar t: the planted sub-image's first
# coordinate (in every model row) is PLANTED_OFFSET + PLANTED_GAIN * t,
# and its remaining coordinates are zero.  Every other sub-image carries
# a strong per-image distractor in that same first coordinate plus faint
# background noise elsewhere, so diffuse pooling reads a corrupted
# signal: concentrating attention on the planted sub-image is the only
# way to predict the labels well.
PLANTED_OFFSET = 8.0
PLANTED_GAIN = 8.0
PLANTED_NOISE_SCALE = 0.01
PLANTED_DISTRACTOR_SCALE = 2.25

# Distinct per-dimension affine label maps, chosen to keep every label
# inside [-0.5, +0.5] for t in [-0.5, 0.5].
PLANTED_SLOPES = tuple(
    (0.3 + 0.5 * k / (N_TASKS - 1)) * (1.0 if k % 2 == 0 else -1.0)
    for k in range(N_TASKS)
)
PLANTED_INTERCEPTS = tuple(0.04 * ((k % 3) - 1) for k in range(N_TASKS))


def synth_planted_dataset(n, planted_subimage, seed):
    """Generate a tiled dataset whose signal lives in one sub-image.

    All sub-image vectors are seeded noise (faint background noise, plus
    a strong distractor in the first coordinate) except the planted
    sub-image, whose first coordinate encodes a latent scalar
    t ~ U(-0.5, 0.5) in every model row.  All twelve label columns are
    distinct affine functions of t, so a regressor that reads only the
    planted sub-image can reach r^2 = 1 on every dimension, while
    sub-image-agnostic pooling is capped well below that by the
    distractors.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if not 0 <= planted_subimage < N_SUBIMAGES:
        raise ValueError(f"planted_subimage must be in 0..{N_SUBIMAGES - 1}")
    rng = seeded_rng(seed)
    slopes = np.array(PLANTED_SLOPES)
    intercepts = np.array(PLANTED_INTERCEPTS)
    records = []
    labels = np.empty((n, N_TASKS), dtype=np.float64)
    for i in range(n):
        t = rng.uniform(-0.5, 0.5)
        values = rng.normal(0.0, PLANTED_NOISE_SCALE,
                            (N_MODELS, N_SUBIMAGES, FEATURE_DIM))
        values[:, :, 0] = rng.normal(0.0, PLANTED_DISTRACTOR_SCALE,
                                     (N_MODELS, N_SUBIMAGES))
        values[:, planted_subimage, :] = 0.0
        values[:, planted_subimage, 0] = PLANTED_OFFSET + PLANTED_GAIN * t
        values[DENSENET_ROW, :, DENSENET_DIM:] = 0.0
        records.append(
            FeatureTensor(f"synth-{i:05d}", "tiled", values.astype(np.float32))
        )
        labels[i] = slopes * t + intercepts
    ids = [r.image_id for r in records]
    return records, LabelMatrix(ids, labels, aggregation="mean")


def whole_from_tiled(records):
    """Collapse tiled records to the whole layout by sub-image mean pooling.

    This is the synthetic stand-in for shape-agnostic global pooling over
    the full image: any signal local to one sub-image gets diluted by the
    pooling, exactly the handicap the non-attentive baseline faces.
    """
    out = []
    for rec in records:
        if rec.layout != "tiled":
            raise ValueError(f"{rec.image_id!r}: expected a tiled record")
        rec.validate()
        v = rec.values.astype(np.float64)
        parts = [v[m].mean(axis=0) for m in range(N_MODELS - 1)]
        parts.append(v[DENSENET_ROW, :, :DENSENET_DIM].mean(axis=0))
        whole = np.concatenate(parts).astype(np.float32)
        out.append(FeatureTensor(rec.image_id, "whole", whole))
    return out
