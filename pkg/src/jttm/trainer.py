"""ERM, JTT and JTT-m training loops.

All three share one minibatch loop over per-example weights: ERM uses
weight 1 everywhere, the two-stage methods give weight ``lambda_up`` to the
(pruned) error set of a first-stage model. Each batch minimizes the weighted
mean loss.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Set

import numpy as np

from .dataset import Dataset
from .model import MlpParams, init_params, penultimate, per_example_loss, predict, weighted_loss_and_grad
from .ood import OodPartition, fit_class_gaussians, partition_ood, prune_error_set

logger = logging.getLogger(__name__)

METHODS = ("erm", "jtt", "jtt_m")
OPTIMIZERS = ("sgd", "adamw")
SCHEDULES = ("constant", "linear_decay")

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 1e-2
    optimizer_stage1: str = "sgd"
    optimizer_stage2: str = "adamw"
    weight_decay: float = 0.0
    grad_clip: Optional[float] = 1.0
    lr_schedule: str = "linear_decay"
    lambda_up: float = 4.0
    df: int = 16
    alpha: float = 1e-3
    seed: int = 0
    hidden: List[int] = field(default_factory=lambda: [16])
    # stage-1 knobs; None means "same as the shared setting"
    stage1_epochs: Optional[int] = None
    stage1_learning_rate: Optional[float] = None
    ood_statistic: str = "squared"
    stage2_from_stage1: bool = False

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer_stage1 not in OPTIMIZERS or self.optimizer_stage2 not in OPTIMIZERS:
            raise ValueError(f"optimizers must be one of {OPTIMIZERS}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")
        if not self.lambda_up >= 1:
            raise ValueError("lambda_up must be >= 1")
        if self.df < 1:
            raise ValueError("df must be a positive integer")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.stage1_epochs is not None and self.stage1_epochs < 1:
            raise ValueError("stage1_epochs must be positive")
        if self.stage1_learning_rate is not None and not self.stage1_learning_rate > 0:
            raise ValueError("stage1_learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedModel:
    params: MlpParams
    method: str
    config: dict
    error_set_size: int = 0
    removed_outliers: int = 0
    error_ids: Set[int] = field(default_factory=set)
    partition: Optional[OodPartition] = None
    stage1_params: Optional[MlpParams] = None

    def __post_init__(self):
        if not 0 <= self.removed_outliers <= self.error_set_size:
            raise ValueError("removed-outlier count must lie in [0, |E|]")

    def provenance(self) -> dict:
        return {"method": self.method, "config": self.config,
                "error_set_size": self.error_set_size, "removed_outliers": self.removed_outliers}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    m: Optional[List[np.ndarray]] = None
    v: Optional[List[np.ndarray]] = None


def global_norm(arrays) -> float:
    return math.sqrt(sum(float(np.dot(a.ravel(), a.ravel())) for a in arrays))


def optimizer_step(kind, state: OptimizerState, params: MlpParams, grads: MlpParams,
                   lr: float, weight_decay: float = 0.0, grad_clip: Optional[float] = None) -> OptimizerState:
    """Update `params` in place and return the advanced optimizer state."""
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    if len(p_arrays) != len(g_arrays) or any(p.shape != g.shape for p, g in zip(p_arrays, g_arrays)):
        raise ValueError("gradient structure does not match parameters")
    norm = global_norm(g_arrays)
    if not math.isfinite(norm) or not math.isfinite(lr):
        raise TrainingError(f"non-finite gradient norm or learning rate at optimizer step {state.step}")
    scale = 1.0
    if grad_clip is not None and norm > grad_clip:
        scale = grad_clip / norm

    if kind == "sgd":
        for p, g in zip(p_arrays, g_arrays):
            p -= lr * scale * g
        return OptimizerState(step=state.step + 1)
    if kind != "adamw":
        raise ValueError(f"unknown optimizer {kind!r}")

    b1, b2 = ADAM_BETAS
    t = state.step + 1
    m = state.m if state.m is not None else [np.zeros_like(p) for p in p_arrays]
    v = state.v if state.v is not None else [np.zeros_like(p) for p in p_arrays]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, mi, vi in zip(p_arrays, g_arrays, m, v):
        if scale != 1.0:
            g = g * scale
        if weight_decay:
            p -= lr * weight_decay * p
        mi *= b1
        mi += (1.0 - b1) * g
        vi *= b2
        vi += (1.0 - b2) * g * g
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + ADAM_EPS)
    return OptimizerState(step=t, m=m, v=v)


def learning_rate_at(schedule: str, base_lr: float, step: int, total_steps: int) -> float:
    if schedule == "constant":
        return base_lr
    if schedule == "linear_decay":
        return base_lr * (1.0 - step / total_steps)
    raise ValueError(f"unknown schedule {schedule!r}")


# ---------------------------------------------------------------------------
# seeds and shuffling
# ---------------------------------------------------------------------------


def derive_seed(seed: int, stage: int) -> int:
    """Independent seed for a training stage (stage 1 uses the config seed itself)."""
    if stage == 1:
        return seed
    return int(np.random.SeedSequence([seed, stage]).generate_state(1, dtype=np.uint32)[0])


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Batch order for one epoch: a Philox (counter-based) stream keyed by (seed, epoch)."""
    bitgen = np.random.Philox(np.random.SeedSequence([seed, epoch]))
    return np.random.Generator(bitgen).permutation(n)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def fit(
    dataset: Dataset,
    weights: np.ndarray,
    *,
    seed: int,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    optimizer: str,
    schedule: str,
    weight_decay: float,
    grad_clip: Optional[float],
    hidden: List[int],
    init: Optional[MlpParams] = None,
) -> MlpParams:
    """Minibatch training on the weighted-mean cross-entropy."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = init.copy() if init is not None else init_params(
        [dataset.feature_dim, *hidden, dataset.num_classes], seed)
    x, y = dataset.features, dataset.labels
    w = np.asarray(weights, dtype=np.float64)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    state = OptimizerState()
    step = 0
    for epoch in range(epochs):
        order = epoch_permutation(n, seed, epoch)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            lr = learning_rate_at(schedule, learning_rate, step, total)
            if w[idx].sum() <= 0:
                step += 1
                continue
            loss, grads = weighted_loss_and_grad(params, x[idx], y[idx], w[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at step {step} (lr={lr:.3g})")
            try:
                state = optimizer_step(optimizer, state, params, grads, lr, weight_decay, grad_clip)
            except TrainingError as exc:
                raise TrainingError(f"{exc}; training step {step} (lr={lr:.3g})") from None
            step += 1
    return params


def _stage2(dataset: Dataset, config: TrainConfig, weights: np.ndarray,
            init: Optional[MlpParams] = None) -> MlpParams:
    return fit(
        dataset, weights,
        seed=derive_seed(config.seed, 2),
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        optimizer=config.optimizer_stage2,
        schedule=config.lr_schedule,
        weight_decay=config.weight_decay,
        grad_clip=config.grad_clip,
        hidden=config.hidden,
        init=init,
    )


def _stage1(dataset: Dataset, config: TrainConfig) -> MlpParams:
    # SGD, constant learning rate, no clipping
    return fit(
        dataset, np.ones(len(dataset)),
        seed=derive_seed(config.seed, 1),
        epochs=config.stage1_epochs or config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.stage1_learning_rate or config.learning_rate,
        optimizer=config.optimizer_stage1,
        schedule="constant",
        weight_decay=0.0,
        grad_clip=None,
        hidden=config.hidden,
    )


def train_erm(dataset: Dataset, config: TrainConfig, seed: Optional[int] = None) -> TrainedModel:
    """Plain ERM with the stage-2 optimizer settings.

    `seed` overrides the config seed for initialization and shuffling.
    """
    config.validate()
    params = fit(
        dataset, np.ones(len(dataset)),
        seed=config.seed if seed is None else seed,
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        optimizer=config.optimizer_stage2,
        schedule=config.lr_schedule,
        weight_decay=config.weight_decay,
        grad_clip=config.grad_clip,
        hidden=config.hidden,
    )
    return TrainedModel(params=params, method="erm", config=config.to_dict())


def collect_error_set(model, dataset: Dataset) -> Set[int]:
    params = model.params if isinstance(model, TrainedModel) else model
    wrong = predict(params, dataset.features) != dataset.labels
    return set(dataset.ids[wrong].tolist())


def upweight_vector(dataset: Dataset, error_ids, lambda_up: float) -> np.ndarray:
    w = np.ones(len(dataset))
    if error_ids:
        w[dataset.index_of(sorted(error_ids))] = lambda_up
    return w


def upweighted_objective(params: MlpParams, dataset: Dataset, error_ids, lambda_up: float) -> float:
    """(lambda_up * sum_E loss + sum_rest loss) / N_up with N_up = N + (lambda_up - 1)|E|.

    Evaluated as the weighted mean sum(w * loss) / sum(w) with w = lambda_up on
    E and 1 elsewhere, so that lambda_up = 1 or an empty E reproduces the
    plain mean bit for bit.
    """
    losses = per_example_loss(params, dataset.features, dataset.labels)
    w = upweight_vector(dataset, error_ids, lambda_up)
    return float((w * losses).sum() / w.sum())


def _two_stage(dataset: Dataset, config: TrainConfig, prune: bool) -> TrainedModel:
    config.validate()
    stage1 = _stage1(dataset, config)
    errors = collect_error_set(stage1, dataset)
    partition = None
    kept = errors
    if prune:
        feats = penultimate(stage1, dataset.features)
        gaussians = fit_class_gaussians(feats, dataset.labels, dataset.num_classes)
        partition = partition_ood(dataset.ids, feats, dataset.labels, gaussians,
                                  df=config.df, alpha=config.alpha, statistic=config.ood_statistic)
        kept = prune_error_set(errors, partition)
    logger.debug("stage 1: |E|=%d, kept %d", len(errors), len(kept))
    weights = upweight_vector(dataset, kept, config.lambda_up)
    params = _stage2(dataset, config, weights, init=stage1 if config.stage2_from_stage1 else None)
    return TrainedModel(
        params=params,
        method="jtt_m" if prune else "jtt",
        config=config.to_dict(),
        error_set_size=len(errors),
        removed_outliers=len(errors) - len(kept),
        error_ids=errors,
        partition=partition,
        stage1_params=stage1,
    )


def train_jtt(dataset: Dataset, config: TrainConfig) -> TrainedModel:
    return _two_stage(dataset, config, prune=False)


def train_jtt_m(dataset: Dataset, config: TrainConfig) -> TrainedModel:
    return _two_stage(dataset, config, prune=True)


def train(method: str, dataset: Dataset, config: TrainConfig) -> TrainedModel:
    if method == "erm":
        return train_erm(dataset, config)
    if method == "jtt":
        return train_jtt(dataset, config)
    if method == "jtt_m":
        return train_jtt_m(dataset, config)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
