"""Per-bag BCE optimization with decoupled-weight-decay Adam and early
stopping on validation balanced accuracy."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .bagging import Bag
from .errors import ConfigError
from .evaluation import ScoredSet, balanced_accuracy
from .model import (
    PARAM_FIELDS,
    AbmilParams,
    backward,
    forward,
    init_params,
    pooled_backward,
    pooled_forward,
    zeros_like_params,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    tau: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], **overrides) -> "TrainConfig":
        """Build from a flat string mapping (config file); kwargs override."""
        kwargs = {}
        casts = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in casts:
                raise ConfigError(f"unknown training option: {key!r}")
            cast = int if casts[key] == "int" else float
            try:
                kwargs[key] = cast(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class AdamState:
    m: AbmilParams
    v: AbmilParams
    t: int = 0


def init_adam_state(params: AbmilParams) -> AdamState:
    return AdamState(m=zeros_like_params(params), v=zeros_like_params(params), t=0)


def bce_loss(p_hat: float, label: int) -> float:
    """BCE from a probability; prefer ``bce_from_logit`` during optimization."""
    if not 0.0 < p_hat < 1.0:
        raise ValueError("p_hat must lie strictly in (0, 1)")
    return -(label * np.log(p_hat) + (1 - label) * np.log1p(-p_hat))


def bce_from_logit(logit: float, label: int) -> float:
    # softplus(logit) - label * logit, computed without overflow.
    return float(np.log1p(np.exp(-abs(logit))) + max(logit, 0.0) - label * logit)


def mean_bce_from_logits(logits: Sequence[float], labels: Sequence[int]) -> float:
    return float(np.mean([bce_from_logit(l, y) for l, y in zip(logits, labels)]))


def adamw_step(
    params: AbmilParams,
    grads: AbmilParams,
    state: AdamState,
    config: TrainConfig,
) -> tuple[AbmilParams, AdamState]:
    """One bias-corrected Adam update with decay applied before the Adam delta."""
    t = state.t + 1
    new_params = params.copy()
    new_m = state.m.copy()
    new_v = state.v.copy()
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name in PARAM_FIELDS:
        theta = getattr(new_params, name)
        g = getattr(grads, name)
        m = config.beta1 * getattr(state.m, name) + (1 - config.beta1) * g
        v = config.beta2 * getattr(state.v, name) + (1 - config.beta2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta = theta * (1.0 - config.lr * config.weight_decay)
        theta = theta - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        if name == "b":
            theta, m, v = float(theta), float(m), float(v)
        setattr(new_params, name, theta)
        setattr(new_m, name, m)
        setattr(new_v, name, v)
    return new_params, AdamState(m=new_m, v=new_v, t=t)


@dataclass(frozen=True)
class EpochStats:
    train_loss: float
    val_ba: float


@dataclass
class TrainReport:
    best_params: AbmilParams
    best_epoch: int
    history: list[EpochStats] = field(default_factory=list)


_AGGREGATORS: dict[str, tuple[Callable, Callable]] = {
    "gated": (forward, backward),
    "mean": (
        lambda p, b: pooled_forward(p, b, "mean"),
        lambda p, b, y: pooled_backward(p, b, y, "mean"),
    ),
    "max": (
        lambda p, b: pooled_forward(p, b, "max"),
        lambda p, b, y: pooled_backward(p, b, y, "max"),
    ),
}


def train(
    train_bags: Sequence[Bag],
    val_bags: Sequence[Bag],
    embed_dim: int,
    config: TrainConfig,
    attention_dim: int = 128,
    aggregator: str = "gated",
    initial_params: AbmilParams | None = None,
) -> TrainReport:
    """Per-bag optimization loop.

    Each epoch shuffles the training bags with the seeded generator, applies
    one forward/backward/adamw step per bag, then scores validation balanced
    accuracy at ``config.tau``. Stops once ``patience`` consecutive epochs
    bring no strict improvement; among epochs tied at the best validation
    score the latest one's parameters are kept, since they carry the most
    training progress.
    """
    if not train_bags or not val_bags:
        raise ValueError("train and validation bag sets must be nonempty")
    fwd, bwd = _AGGREGATORS[aggregator]
    params = (
        initial_params.copy()
        if initial_params is not None
        else init_params(embed_dim, attention_dim, config.seed)
    )
    state = init_adam_state(params)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    val_labels = [bag.label for bag in val_bags]

    best_params = params.copy()
    best_ba = -np.inf
    best_epoch = 0
    since_improvement = 0
    history: list[EpochStats] = []

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_bags))
        losses = []
        for idx in order:
            bag = train_bags[idx]
            score = fwd(params, bag)
            losses.append(bce_from_logit(score.logit, bag.label))
            grads = bwd(params, bag, bag.label)
            params, state = adamw_step(params, grads, state, config)
        val_scores = [fwd(params, bag).p_hat for bag in val_bags]
        val_ba = balanced_accuracy(ScoredSet(val_scores, val_labels), config.tau)
        history.append(EpochStats(train_loss=float(np.mean(losses)), val_ba=val_ba))
        if val_ba > best_ba:
            since_improvement = 0
        else:
            since_improvement += 1
        if val_ba >= best_ba:
            best_ba = val_ba
            best_params = params.copy()
            best_epoch = epoch
        if since_improvement >= config.patience:
            break
    return TrainReport(best_params=best_params, best_epoch=best_epoch, history=history)


def write_history_csv(path: str | Path, report: TrainReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_ba"])
        for epoch, stats in enumerate(report.history):
            writer.writerow([epoch, repr(stats.train_loss), repr(stats.val_ba)])
