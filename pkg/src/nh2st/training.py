"""Adam with step decay and the epoch loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import STDataset, knn_table
from .model import forward_batch, init_params, make_batch
from .numerics import ParamTree, save_checkpoint

log = logging.getLogger(__name__)

REPORT_HEADER = ("epoch", "total", "ls", "ln", "mse", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamTree, grads, lr: float) -> tuple[AdamState, ParamTree]:
    """One bias-corrected Adam update.  Inputs are left untouched."""
    for path in params:
        if not np.all(np.isfinite(grads[path])):
            raise FloatingPointError(f"non-finite gradient for {path}")
    t = state.t + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    m, v = {}, {}
    new = ParamTree()
    for path, value in params.items():
        g = np.asarray(grads[path], dtype=np.float64).reshape(value.shape)
        m[path] = state.beta1 * state.m.get(path, 0.0) + (1.0 - state.beta1) * g
        v[path] = state.beta2 * state.v.get(path, 0.0) + (1.0 - state.beta2) * (g * g)
        new[path] = value - lr * (m[path] / bc1) / (np.sqrt(v[path] / bc2) + state.eps)
    return AdamState(state.beta1, state.beta2, state.eps, t, m, v), new


def lr_at(step_count: int, cfg: TrainConfig) -> float:
    """Step decay: lr * decay_rate ** floor(step_count / step_size)."""
    if step_count < 0:
        raise ValueError("step_count must be non-negative")
    return cfg.lr * cfg.decay_rate ** (step_count // cfg.step_size)


@dataclass
class EpochRow:
    epoch: int
    total: float
    ls: float
    ln: float
    mse: float
    lr: float


@dataclass
class TrainReport:
    rows: list[EpochRow]
    params: ParamTree
    steps: int = 0
    checkpoint: Path | None = None

    def write_csv(self, path) -> None:
        write_report_csv(self.rows, path)


def write_report_csv(rows: list[EpochRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r.epoch, repr(r.total), repr(r.ls), repr(r.ln), repr(r.mse), repr(r.lr)])


def epoch_batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split a shuffled order into batches; a trailing batch of one spot is dropped."""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if batches and len(batches[-1]) < 2 <= batch_size:
        batches.pop()
    return batches


def _check_finite(terms, epoch: int) -> None:
    for name in ("ls", "ln", "mse", "total"):
        value = getattr(terms, name)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite {name} loss ({value}) in epoch {epoch}")


def train(
    ds: STDataset,
    cfg: TrainConfig,
    params: ParamTree | None = None,
    checkpoint: str | Path | None = None,
    max_steps: int | None = None,
) -> TrainReport:
    """Train both branches on ``ds`` for ``cfg.epochs`` epochs.

    Spot order is reshuffled each epoch from ``cfg.seed``; the loss columns of
    the report are means over that epoch's batches.  ``max_steps`` stops early
    after that many optimizer updates (the partial epoch is still reported).
    """
    if not ds.normalized:
        raise TrainingError("dataset must be normalized before training")
    if ds.P != cfg.P or ds.n != cfg.n:
        raise TrainingError(f"dataset has P={ds.P}, n={ds.n}; config expects P={cfg.P}, n={cfg.n}")
    if ds.M <= cfg.K:
        raise TrainingError(f"need more than K={cfg.K} spots, dataset has {ds.M}")
    params = init_params(cfg) if params is None else params.copy()
    neighbors = knn_table(ds, cfg.K)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    rows: list[EpochRow] = []
    step = 0
    for epoch in range(cfg.epochs):
        if max_steps is not None and step >= max_steps:
            break
        order = rng.permutation(ds.M)
        sums = np.zeros(4)
        count = 0
        lr = lr_at(epoch, cfg)
        for idx in epoch_batches(order, cfg.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            if cfg.step_unit == "iteration":
                lr = lr_at(step, cfg)
            result = forward_batch(params, cfg, make_batch(ds, idx, neighbors))
            _check_finite(result.terms, epoch)
            state, params = adam_step(state, params, result.grads, lr)
            t = result.terms
            sums += (t.total, t.ls, t.ln, t.mse)
            count += 1
            step += 1
        if count == 0:
            raise TrainingError("no batch of at least two spots fits in the dataset")
        total, ls, ln, mse = (sums / count).tolist()
        rows.append(EpochRow(epoch, total, ls, ln, mse, lr))
        log.debug("epoch %d total=%.6f ls=%.4f ln=%.4f mse=%.6f lr=%.3g", epoch, total, ls, ln, mse, lr)
    report = TrainReport(rows, params, step)
    if checkpoint is not None:
        report.checkpoint = Path(checkpoint)
        save_checkpoint(params, report.checkpoint)
    return report
