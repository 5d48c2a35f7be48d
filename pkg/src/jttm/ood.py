"""Class-conditional Mahalanobis outlier scoring with a chi-squared cut-off."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Set, Tuple

import numpy as np
from scipy.linalg import solve_triangular

from .special import chi2_cdf, chi2_sf, chi2_upper_quantile

__all__ = [
    "CovarianceError",
    "ClassGaussian",
    "OodPartition",
    "fit_class_gaussians",
    "mahalanobis",
    "mahalanobis_batch",
    "chi2_cdf",
    "chi2_upper_quantile",
    "is_outlier",
    "partition_ood",
    "prune_error_set",
    "export_scores",
]

RIDGE = 1e-6


class CovarianceError(ValueError):
    pass


@dataclass
class ClassGaussian:
    label: int
    mean: np.ndarray
    covariance: np.ndarray
    factor: np.ndarray
    count: int
    regularized: bool = False

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _mle_covariance(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    # exact symmetry regardless of BLAS accumulation order
    return mean, 0.5 * (cov + cov.T)


def fit_class_gaussians(features: np.ndarray, labels: np.ndarray, num_classes: int = None) -> List[ClassGaussian]:
    """Per-class mean and maximum-likelihood covariance (divisor n).

    The Cholesky factor is taken of ``cov + RIDGE * trace(cov)/h * I``;
    classes that have no examples are skipped.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise ValueError("features must be (n, h) with one label per row")
    h = x.shape[1]
    classes = range(num_classes) if num_classes is not None else np.unique(labels).tolist()
    out = []
    for y in classes:
        xs = x[labels == y]
        n = xs.shape[0]
        if n == 0 and num_classes is not None:
            continue
        if n < 2:
            raise CovarianceError(f"class {y}: need at least 2 examples, got {n}")
        mean, cov = _mle_covariance(xs)
        scale = np.trace(cov) / h
        if not scale > 0:
            raise CovarianceError(f"class {y}: covariance is zero (all {n} points coincide)")
        reg = cov + RIDGE * scale * np.eye(h)
        try:
            factor = np.linalg.cholesky(reg)
        except np.linalg.LinAlgError:
            raise CovarianceError(
                f"class {y}: Cholesky failed after regularization (condition ~{np.linalg.cond(reg):.3g})"
            ) from None
        out.append(ClassGaussian(label=int(y), mean=mean, covariance=cov, factor=factor,
                                 count=n, regularized=n < h + 1))
    return out


def mahalanobis_batch(x: np.ndarray, g: ClassGaussian) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != g.dim:
        raise ValueError(f"dimension {x.shape[1]} != Gaussian dimension {g.dim}")
    z = solve_triangular(g.factor, (x - g.mean).T, lower=True, check_finite=False)
    return np.sqrt(np.einsum("ij,ij->j", z, z))


def mahalanobis(x: np.ndarray, g: ClassGaussian) -> float:
    """Euclidean norm of the whitened residual ``L^-1 (x - mean)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single vector")
    return float(mahalanobis_batch(x, g)[0])


def is_outlier(p_value: float, alpha: float, orientation: str = "upper_tail") -> bool:
    """Decide membership of the out-of-distribution set from an upper-tail p-value.

    ``"upper_tail"`` flags small p-values (far from the class mean).
    ``"as_printed"`` is the reverse inequality (p >= alpha is out) and is kept
    only so that both readings can be compared.
    """
    if orientation == "upper_tail":
        return p_value < alpha
    if orientation == "as_printed":
        return p_value >= alpha
    raise ValueError(f"unknown orientation {orientation!r}")


@dataclass
class OodPartition:
    s_in: Set[int]
    s_out: Set[int]
    # id -> (distance, squared distance, upper-tail p-value)
    scores: Dict[int, Tuple[float, float, float]] = field(default_factory=dict)
    labels: Dict[int, int] = field(default_factory=dict)


def partition_ood(
    ids: Sequence[int],
    features: np.ndarray,
    labels: Sequence[int],
    gaussians: Iterable[ClassGaussian],
    df: int,
    alpha: float,
    statistic: str = "squared",
    orientation: str = "upper_tail",
) -> OodPartition:
    """Score each example against its annotated class and split into in / out sets.

    `statistic` selects what is compared with the chi-squared law: the squared
    distance (default) or the plain distance.
    """
    if statistic not in ("squared", "distance"):
        raise ValueError(f"unknown statistic {statistic!r}")
    if df <= 0:
        raise ValueError("df must be positive")
    by_label = {g.label: g for g in gaussians}
    ids = [int(i) for i in ids]
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    missing = set(labels.tolist()) - set(by_label)
    if missing:
        raise KeyError(f"no class Gaussian for label(s) {sorted(missing)}")

    dist = np.empty(len(ids))
    for y, g in by_label.items():
        rows = np.flatnonzero(labels == y)
        if rows.size:
            dist[rows] = mahalanobis_batch(x[rows], g)

    part = OodPartition(s_in=set(), s_out=set())
    for i, key in enumerate(ids):
        m = float(dist[i])
        m2 = m * m
        p = chi2_sf(df, m2 if statistic == "squared" else m)
        part.scores[key] = (m, m2, p)
        part.labels[key] = int(labels[i])
        (part.s_out if is_outlier(p, alpha, orientation) else part.s_in).add(key)
    return part


def prune_error_set(error_ids: Iterable[int], partition: OodPartition) -> Set[int]:
    """Error set with its out-of-distribution members removed."""
    error_ids = set(int(i) for i in error_ids)
    uncovered = error_ids - partition.s_in - partition.s_out
    if uncovered:
        raise KeyError(f"error ids not covered by the partition: {sorted(uncovered)[:10]}")
    return error_ids - partition.s_out


def export_scores(partition: OodPartition, path) -> None:
    """One JSON record per scored example, ordered by id."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for key in sorted(partition.scores):
            m, m2, p = partition.scores[key]
            rec = {"id": key, "label": partition.labels.get(key), "distance": m,
                   "squared_distance": m2, "p_value": p, "out": key in partition.s_out}
            handle.write(json.dumps(rec) + "\n")
