"""Regression metrics and the k-fold evaluation harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .data import STDataset, kfold_split
from .model import init_params, predict
from .training import train

METRICS = ("mse", "mae", "pcc")


@dataclass
class EvalResult:
    mse: float
    mae: float
    pcc: float
    per_gene_pcc: np.ndarray
    fold_values: list[tuple[float, float, float]] = field(default_factory=list)


def per_gene_pearson(pred: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Pearson correlation of each column; 0 where either column is constant."""
    dp = pred - pred.mean(axis=0)
    dl = label - label.mean(axis=0)
    sp = np.sqrt((dp**2).sum(axis=0))
    sl = np.sqrt((dl**2).sum(axis=0))
    denom = sp * sl
    ok = denom > 0
    r = np.zeros(pred.shape[1])
    r[ok] = (dp * dl).sum(axis=0)[ok] / denom[ok]
    return np.clip(r, -1.0, 1.0)


def compute_metrics(pred, label) -> EvalResult:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape or pred.ndim != 2:
        raise ValueError(f"shape mismatch: {pred.shape} vs {label.shape}")
    if pred.shape[0] < 2:
        raise ValueError("PCC needs at least two spots")
    err = pred - label
    r = per_gene_pearson(pred, label)
    return EvalResult(
        mse=float(np.mean(err**2)),
        mae=float(np.mean(np.abs(err))),
        pcc=float(r.mean()),
        per_gene_pcc=r,
    )


@dataclass
class CVReport:
    folds: list[tuple[float, float, float]]

    @property
    def values(self) -> np.ndarray:
        return np.array(self.folds, dtype=np.float64).reshape(-1, 3)

    @property
    def mean(self) -> tuple[float, float, float]:
        return tuple(self.values.mean(axis=0).tolist())

    @property
    def std(self) -> tuple[float, float, float]:
        # population std across folds
        return tuple(self.values.std(axis=0, ddof=0).tolist())

    def summary(self) -> dict[str, tuple[float, float]]:
        return {m: (mu, sd) for m, mu, sd in zip(METRICS, self.mean, self.std)}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", *METRICS])
            for i, row in enumerate(self.folds):
                w.writerow([i, *(repr(float(v)) for v in row)])
            w.writerow(["summary", *(f"{mu!r}±{sd!r}" for mu, sd in zip(self.mean, self.std))])


def evaluate_fold(ds: STDataset, cfg: TrainConfig, train_idx, test_idx, seed: int) -> EvalResult:
    params = init_params(cfg, seed=seed)
    report = train(ds.subset(train_idx), cfg, params=params)
    test = ds.subset(test_idx)
    return compute_metrics(predict(report.params, cfg, test.patches), test.expr)


def cross_validate(ds: STDataset, cfg: TrainConfig, k: int, seed: int) -> CVReport:
    """Train one model per fold on the other k-1 folds and score the held-out fold.

    Neighbourhoods are computed within the training spots only, so held-out
    expression never enters training.  Fold f initializes from ``seed + f``.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    split = kfold_split(ds, k, seed)
    folds = []
    for f in range(k):
        res = evaluate_fold(ds, cfg.replace(seed=seed + f), split.train_indices(f), split.test_indices(f), seed + f)
        folds.append((res.mse, res.mae, res.pcc))
    return CVReport(folds)
