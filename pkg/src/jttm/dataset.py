"""Datasets of fixed feature vectors partitioned into (class, attribute) groups.

A dataset is stored column-wise (feature matrix plus label / attribute /
corruption vectors) so that training and scoring stay vectorized; individual
rows are available as :class:`Example` records.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence

import numpy as np

NEGATION_WORDS = frozenset({
    "no", "never", "nothing", "nobody", "not", "yet",
    "refuse", "refuses", "refused", "fail", "fails", "failed",
    "only", "incapable", "unable", "neither", "none",
})

SPLITS = ("train", "dev", "test")

_TOKEN_SPLIT = re.compile(r"[^a-z]+")

# stream tags for SeedSequence so generator draws and noise draws never collide
_FEATURE_STREAM = 0
_NOISE_STREAM = 1


class DatasetError(ValueError):
    pass


def detect_negation_attribute(text: str) -> int:
    """Return 1 if `text` contains a negation cue as a whole token, else 0."""
    tokens = _TOKEN_SPLIT.split(text.lower())
    return int(any(tok in NEGATION_WORDS for tok in tokens if tok))


class GroupKey(NamedTuple):
    label: int
    attribute: int

    def name(self, label_names: Optional[Sequence[str]] = None) -> str:
        lab = label_names[self.label] if label_names else str(self.label)
        return f"[{lab}, {'neg' if self.attribute else 'no neg'}]"


def all_group_keys(num_classes: int) -> List[GroupKey]:
    return [GroupKey(y, a) for y in range(num_classes) for a in (0, 1)]


@dataclass(frozen=True)
class Example:
    id: int
    features: np.ndarray
    label: int
    attribute: int
    corrupted: bool = False


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    num_classes: int
    split_tag: str = "train"
    ids: Optional[np.ndarray] = None
    corrupted: Optional[np.ndarray] = None
    label_names: Optional[List[str]] = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DatasetError("features must be a 2-d array (N, d)")
        n = self.features.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        self.attributes = np.asarray(self.attributes, dtype=np.int64).reshape(n)
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(n)
        if self.corrupted is None:
            self.corrupted = np.zeros(n, dtype=bool)
        self.corrupted = np.asarray(self.corrupted, dtype=bool).reshape(n)

        if self.split_tag not in SPLITS:
            raise DatasetError(f"unknown split tag {self.split_tag!r}")
        if self.num_classes < 1:
            raise DatasetError("num_classes must be positive")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("label out of range")
        if n and not np.isin(self.attributes, (0, 1)).all():
            raise DatasetError("attribute must be 0 or 1")
        if len(np.unique(self.ids)) != n or (n and self.ids.min() < 0):
            raise DatasetError("ids must be unique non-negative integers")
        if self.label_names is not None and len(self.label_names) != self.num_classes:
            raise DatasetError("label_names must have one entry per class")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def examples(self) -> List[Example]:
        return list(self)

    def __iter__(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield Example(
                id=int(self.ids[i]),
                features=self.features[i],
                label=int(self.labels[i]),
                attribute=int(self.attributes[i]),
                corrupted=bool(self.corrupted[i]),
            )

    def index_of(self, ids) -> np.ndarray:
        """Row positions of the given ids."""
        lookup = {int(k): i for i, k in enumerate(self.ids)}
        try:
            return np.array([lookup[int(k)] for k in ids], dtype=np.int64)
        except KeyError as exc:
            raise DatasetError(f"id {exc.args[0]} not in dataset") from None

    def group_indices(self) -> np.ndarray:
        """Flat group index 2*label + attribute for every row."""
        return 2 * self.labels + self.attributes

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.split_tag == other.split_tag
            and self.label_names == other.label_names
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.attributes, other.attributes)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.corrupted, other.corrupted)
        )


def group_partition(dataset: Dataset) -> Dict[GroupKey, List[int]]:
    """Map every (label, attribute) key to the ids of its members, in dataset order."""
    groups: Dict[GroupKey, List[int]] = {k: [] for k in all_group_keys(dataset.num_classes)}
    for i, y, a in zip(dataset.ids.tolist(), dataset.labels.tolist(), dataset.attributes.tolist()):
        groups[GroupKey(y, a)].append(i)
    return groups


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Class-conditional Gaussian groups with prescribed counts.

    ``examples_per_group[y][a]`` is the number of examples with label ``y`` and
    attribute ``a``; ``group_means[y][a]`` their center.
    """

    examples_per_group: List[List[int]]
    group_means: List[List[List[float]]]
    noise_scale: float = 1.0
    label_noise_rate: float = 0.0
    seed: int = 0
    split_tag: str = "train"
    label_names: Optional[List[str]] = None

    @property
    def num_classes(self) -> int:
        return len(self.examples_per_group)

    @property
    def feature_dim(self) -> int:
        return len(self.group_means[0][0])

    def validate(self) -> None:
        counts = np.asarray(self.examples_per_group)
        if counts.ndim != 2 or counts.shape[1] != 2:
            raise DatasetError("examples_per_group must be a C x 2 table")
        if (counts < 0).any():
            raise DatasetError("group counts must be non-negative")
        if counts.sum() == 0:
            raise DatasetError("spec describes zero examples")
        means = np.asarray(self.group_means, dtype=np.float64)
        if means.ndim != 3 or means.shape[:2] != counts.shape:
            raise DatasetError("group_means must be a C x 2 x d array matching the count table")
        if not np.isfinite(means).all():
            raise DatasetError("group means must be finite")
        if not (math.isfinite(self.noise_scale) and self.noise_scale > 0):
            raise DatasetError("noise_scale must be positive and finite")
        if not (0.0 <= self.label_noise_rate < 1.0):
            raise DatasetError("label_noise_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "examples_per_group": [list(map(int, row)) for row in self.examples_per_group],
            "group_means": [[list(map(float, m)) for m in row] for row in self.group_means],
            "noise_scale": float(self.noise_scale),
            "label_noise_rate": float(self.label_noise_rate),
            "seed": int(self.seed),
            "split_tag": self.split_tag,
            "label_names": self.label_names,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw a dataset from `spec`.

    Examples are emitted group by group in (label, attribute) order and then
    shuffled; randomness comes from numpy's PCG64 seeded with
    ``SeedSequence([seed, 0])``, so output is a pure function of the spec.
    """
    spec.validate()
    counts = np.asarray(spec.examples_per_group, dtype=np.int64)
    means = np.asarray(spec.group_means, dtype=np.float64)
    c, _, d = means.shape
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, _FEATURE_STREAM])))

    labels = np.repeat(np.repeat(np.arange(c), 2), counts.ravel())
    attrs = np.repeat(np.tile([0, 1], c), counts.ravel())
    centers = means[labels, attrs]
    features = centers + spec.noise_scale * rng.standard_normal(centers.shape)
    order = rng.permutation(len(labels))

    ds = Dataset(
        features=features[order],
        labels=labels[order],
        attributes=attrs[order],
        num_classes=c,
        split_tag=spec.split_tag,
        label_names=spec.label_names,
    )
    if spec.label_noise_rate > 0:
        ds = inject_label_noise(ds, spec.label_noise_rate, spec.seed)
    return ds


def noise_selection(n: int, num_classes: int, rate: float, seed: int):
    """Row positions chosen for label corruption and the label offsets applied to them.

    The k = floor(rate * n) positions are a uniform draw without replacement;
    each corrupted label becomes ``(label + offset) % C`` with offset uniform
    in 1..C-1, i.e. a uniformly chosen different class.
    """
    if not (0.0 <= rate < 1.0):
        raise DatasetError(f"noise rate must lie in [0, 1), got {rate}")
    k = math.floor(rate * n)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _NOISE_STREAM])))
    rows = np.sort(rng.choice(n, size=k, replace=False)) if k else np.empty(0, dtype=np.int64)
    offsets = rng.integers(1, num_classes, size=k) if k else np.empty(0, dtype=np.int64)
    return rows, offsets


def inject_label_noise(dataset: Dataset, rate: float, seed: int) -> Dataset:
    """Copy of `dataset` with floor(rate * N) labels flipped to a different class."""
    if dataset.num_classes < 2 and rate > 0:
        raise DatasetError("label noise needs at least two classes")
    rows, offsets = noise_selection(len(dataset), dataset.num_classes, rate, seed)
    labels = dataset.labels.copy()
    corrupted = dataset.corrupted.copy()
    labels[rows] = (labels[rows] + offsets) % dataset.num_classes
    corrupted[rows] = True
    return Dataset(
        features=dataset.features.copy(),
        labels=labels,
        attributes=dataset.attributes.copy(),
        num_classes=dataset.num_classes,
        split_tag=dataset.split_tag,
        ids=dataset.ids.copy(),
        corrupted=corrupted,
        label_names=dataset.label_names,
    )


def canonical_spec(
    split: str = "train",
    label_noise_rate: float = 0.0,
    seed: Optional[int] = None,
    separation: float = 10.0,
    spurious: float = 2.0,
    pull: float = 0.5,
    scale: float = 0.1,
) -> SyntheticSpec:
    """The 3-class, 8-dimensional benchmark used by the acceptance experiments.

    Majority groups are (0, 1), (1, 0) and (2, 0); in the training split each
    outnumbers its class's minority group 3922:78 (about 50:1). Dev and test
    splits are group-balanced (500 per group).

    Geometry, in units of the noise standard deviation:
      * majority-group centers sit on an equilateral triangle of side
        `separation` in dims 0-1;
      * dim 2 is +`spurious` for attribute 1 and -`spurious` for attribute 0;
      * a minority group's center is moved a fraction `pull` of the way
        toward the majority centers of the other classes that share its
        attribute, so it overlaps them;
      * dims 3-7 are pure noise.
    Everything is multiplied by `scale`, which keeps a tanh network's hidden
    units out of saturation without changing any Mahalanobis distance.
    """
    d = 8
    radius = separation / math.sqrt(3.0)
    cores = [np.array([radius * math.cos(a), radius * math.sin(a)])
             for a in (math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3)]
    majority_attr = (1, 0, 0)
    means = []
    for y in range(3):
        row = []
        for a in (0, 1):
            center = cores[y]
            if a != majority_attr[y]:
                others = [cores[k] for k in range(3) if k != y and majority_attr[k] == a]
                center = center + pull * (np.mean(others, axis=0) - center)
            vec = np.zeros(d)
            vec[:2] = center
            vec[2] = spurious if a else -spurious
            row.append((scale * vec).tolist())
        means.append(row)

    if split == "train":
        major, minor = 3922, 78
        counts = [[minor, major], [major, minor], [major, minor]]
        default_seed = 101
    elif split in ("dev", "test"):
        counts = [[500, 500], [500, 500], [500, 500]]
        default_seed = 202 if split == "dev" else 303
    else:
        raise DatasetError(f"unknown split {split!r}")
    return SyntheticSpec(
        examples_per_group=counts,
        group_means=means,
        noise_scale=scale,
        label_noise_rate=label_noise_rate,
        seed=default_seed if seed is None else seed,
        split_tag=split,
    )


# ---------------------------------------------------------------------------
# line-delimited JSON ingestion / export
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingSchema:
    """Which record keys hold what, plus the label vocabulary.

    ``label_names`` maps string labels to indices by position; it may also
    come from a header line ``{"labels": [...]}`` at the top of the file.
    Integer labels need ``num_classes`` when no vocabulary is given.
    """

    features_key: str = "features"
    label_key: str = "label"
    attribute_key: str = "attribute"
    text_key: str = "text"
    corrupted_key: str = "corrupted"
    label_names: Optional[List[str]] = None
    num_classes: Optional[int] = None
    split_tag: str = "train"


def load_embeddings(path, schema: Optional[EmbeddingSchema] = None) -> Dataset:
    schema = schema or EmbeddingSchema()
    label_names = list(schema.label_names) if schema.label_names else None
    num_classes = schema.num_classes
    split_tag = schema.split_tag
    feats: List[List[float]] = []
    labels: List[int] = []
    attrs: List[int] = []
    corrupted: List[bool] = []
    dim = None
    record_no = 0

    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_no}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"line {line_no}: record is not a JSON object")
            if schema.features_key not in rec and ("labels" in rec or "num_classes" in rec):
                if record_no:
                    raise DatasetError(f"line {line_no}: header must precede records")
                if label_names is None and rec.get("labels"):
                    label_names = [str(x) for x in rec["labels"]]
                num_classes = num_classes or rec.get("num_classes")
                split_tag = rec.get("split", split_tag)
                continue

            record_no += 1
            where = f"line {line_no} (record {record_no})"
            vec = rec.get(schema.features_key)
            if not isinstance(vec, list) or not vec or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec
            ):
                raise DatasetError(f"{where}: '{schema.features_key}' must be a non-empty array of numbers")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DatasetError(f"{where}: feature dimension {len(vec)} != {dim} of earlier records")

            raw_label = rec.get(schema.label_key)
            if isinstance(raw_label, bool) or raw_label is None:
                raise DatasetError(f"{where}: missing or invalid label")
            if isinstance(raw_label, str):
                if label_names is None or raw_label not in label_names:
                    raise DatasetError(f"{where}: unknown label {raw_label!r}")
                y = label_names.index(raw_label)
            elif isinstance(raw_label, int):
                limit = len(label_names) if label_names else num_classes
                if raw_label < 0 or (limit is not None and raw_label >= limit):
                    raise DatasetError(f"{where}: unknown label {raw_label}")
                y = raw_label
            else:
                raise DatasetError(f"{where}: label must be a string or integer")

            if schema.attribute_key in rec:
                a = rec[schema.attribute_key]
                if a not in (0, 1) or isinstance(a, float):
                    raise DatasetError(f"{where}: attribute must be 0 or 1")
            elif isinstance(rec.get(schema.text_key), str):
                a = detect_negation_attribute(rec[schema.text_key])
            else:
                raise DatasetError(f"{where}: needs '{schema.attribute_key}' or '{schema.text_key}'")

            feats.append([float(v) for v in vec])
            labels.append(y)
            attrs.append(int(a))
            corrupted.append(bool(rec.get(schema.corrupted_key, False)))

    if not feats:
        raise DatasetError(f"{path}: no records")
    if label_names is not None:
        num_classes = len(label_names)
    elif num_classes is None:
        num_classes = max(labels) + 1
    return Dataset(
        features=np.array(feats, dtype=np.float64),
        labels=labels,
        attributes=attrs,
        corrupted=corrupted,
        num_classes=int(num_classes),
        split_tag=split_tag,
        label_names=label_names,
    )


def export_embeddings(dataset: Dataset, path) -> None:
    """Write `dataset` in the format read by :func:`load_embeddings`.

    Ids are positional on reload, so the export is only lossless for
    datasets whose ids are 0..N-1 in order.
    """
    header = {"num_classes": dataset.num_classes, "split": dataset.split_tag}
    names = dataset.label_names
    if names:
        header["labels"] = list(names)
    with Path(path).open("w", encoding="utf-8") as handle:
        handle.write(json.dumps(header) + "\n")
        for i in range(len(dataset)):
            rec = {
                "features": dataset.features[i].tolist(),
                "label": names[int(dataset.labels[i])] if names else int(dataset.labels[i]),
                "attribute": int(dataset.attributes[i]),
            }
            if dataset.corrupted[i]:
                rec["corrupted"] = True
            handle.write(json.dumps(rec) + "\n")
