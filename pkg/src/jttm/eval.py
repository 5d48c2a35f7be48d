"""Group-wise accuracy, cross-seed aggregation and significance testing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dataset import Dataset, GroupKey, all_group_keys, group_partition
from .model import predict
from .ood import OodPartition
from .special import student_t_sf_two_sided


class DegenerateTestError(ValueError):
    """Raised when the paired differences have zero variance."""


@dataclass
class GroupStats:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")


@dataclass
class GroupReport:
    num_classes: int
    per_group: Dict[GroupKey, GroupStats]
    label_names: Optional[List[str]] = None

    @property
    def total(self) -> int:
        return sum(s.total for s in self.per_group.values())

    @property
    def correct(self) -> int:
        return sum(s.correct for s in self.per_group.values())

    @property
    def average_accuracy(self) -> float:
        return self.correct / self.total

    @property
    def worst_group(self) -> Tuple[GroupKey, float]:
        """Lowest-accuracy nonempty group; ties go to the smallest (label, attribute)."""
        nonempty = [(s.accuracy, k) for k, s in sorted(self.per_group.items()) if s.total]
        acc, key = min(nonempty, key=lambda t: t[0])
        return key, acc

    def group_accuracy(self, key: GroupKey) -> float:
        return self.per_group[GroupKey(*key)].accuracy

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "groups": [[k.label, k.attribute, s.correct, s.total] for k, s in sorted(self.per_group.items())],
        }

    @classmethod
    def from_dict(cls, d: dict, label_names=None) -> "GroupReport":
        per_group = {GroupKey(y, a): GroupStats(c, t) for y, a, c, t in d["groups"]}
        return cls(num_classes=d["num_classes"], per_group=per_group, label_names=label_names)


def group_report_from_predictions(dataset: Dataset, predictions: np.ndarray) -> GroupReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hit = np.asarray(predictions) == dataset.labels
    g = dataset.group_indices()
    per_group = {}
    for k in all_group_keys(dataset.num_classes):
        mask = g == 2 * k.label + k.attribute
        per_group[k] = GroupStats(int(hit[mask].sum()), int(mask.sum()))
    return GroupReport(dataset.num_classes, per_group, dataset.label_names)


def evaluate_groups(model, dataset: Dataset) -> GroupReport:
    params = getattr(model, "params", model)
    return group_report_from_predictions(dataset, predict(params, dataset.features))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Sample mean and n-1 standard deviation (NaN std for a single value)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no values")
    mean = float(x.mean())
    if x.size < 2:
        return mean, float("nan")
    return mean, float(np.sqrt(((x - mean) ** 2).sum() / (x.size - 1)))


def metric_values(report: GroupReport) -> Dict[str, float]:
    out = {"average": report.average_accuracy, "worst": report.worst_group[1]}
    for k, s in report.per_group.items():
        if s.total:
            out[f"group_{k.label}_{k.attribute}"] = s.accuracy
    return out


@dataclass
class AggregateReport:
    # method -> seed -> metric -> value
    values: Dict[str, Dict[int, Dict[str, float]]] = field(default_factory=dict)

    def summary(self, method: str, metric: str) -> Tuple[float, float]:
        runs = self.values[method]
        return mean_std([runs[s][metric] for s in sorted(runs) if metric in runs[s]])

    def metrics(self, method: str) -> List[str]:
        names = set()
        for m in self.values[method].values():
            names.update(m)
        return sorted(names)

    def paired(self, a: str, b: str, metric: str) -> Tuple[List[float], List[float]]:
        sa, sb = sorted(self.values[a]), sorted(self.values[b])
        if sa != sb:
            raise ValueError(f"seed sets differ between {a!r} ({sa}) and {b!r} ({sb})")
        return ([self.values[a][s][metric] for s in sa], [self.values[b][s][metric] for s in sb])

    def significance(self, a: str, b: str, metric: str) -> Optional[float]:
        """Two-sided paired t-test p-value, or None when the differences are constant."""
        xs, ys = self.paired(a, b, metric)
        try:
            return paired_t_test(xs, ys)[1]
        except DegenerateTestError:
            return None


def aggregate(reports: Mapping[str, Mapping[int, GroupReport]]) -> AggregateReport:
    """Collect per-seed metrics for each method; summaries are computed on demand."""
    agg = AggregateReport()
    for method, by_seed in reports.items():
        agg.values[method] = {int(s): metric_values(r) for s, r in sorted(by_seed.items())}
    return agg


def paired_t_test(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float]:
    """Paired t statistic on x - y and its two-sided p-value (n - 1 dof)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired samples must be 1-d and of equal length")
    n = x.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = x - y
    mean, sd = mean_std(d)
    if sd == 0 or not math.isfinite(sd):
        raise DegenerateTestError("differences have zero variance")
    t = mean / (sd / math.sqrt(n))
    return t, student_t_sf_two_sided(t, n - 1)


def ood_fraction_per_group(error_ids, partition: OodPartition, dataset: Dataset) -> Dict[GroupKey, Optional[float]]:
    """Share of each group's error-set members that fall in the outlier set.

    Groups with no error-set members map to None.
    """
    error_ids = set(int(i) for i in error_ids)
    uncovered = error_ids - partition.s_in - partition.s_out
    if uncovered:
        raise KeyError(f"error ids not covered by the partition: {sorted(uncovered)[:10]}")
    out = {}
    for key, ids in group_partition(dataset).items():
        errs = error_ids.intersection(ids)
        out[key] = len(errs & partition.s_out) / len(errs) if errs else None
    return out
