"""Sigmoid-output averaging, bootstrap ensemble curves and two-decoder LDA fusion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mmdecode import numcore as nc
from mmdecode.dataio import read_bundle, write_bundle


class AlignmentError(ValueError):
    """Two output matrices do not describe the same ordered pairs."""


@dataclass
class OutputMatrix:
    """Sigmoid outputs of several decoder instances on the same pairs.

    ``keys`` identify each column as (subject, recording, onset, label); the
    label doubles as the order flag since it records which slot holds the
    match. ``splits`` tags the dataset split each pair came from.
    """

    values: np.ndarray
    labels: np.ndarray
    keys: list[tuple] = field(default_factory=list)
    splits: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.values.shape[1]
        if self.labels.shape != (n,):
            raise ValueError(f"{self.labels.shape[0]} labels for {n} pairs")
        if not set(np.unique(self.labels)) <= {0, 1}:
            raise ValueError("labels must be 0 or 1")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("sigmoid outputs must lie in [0, 1]")
        if not self.keys:
            self.keys = [("", "", float(i), int(lab)) for i, lab in enumerate(self.labels)]
        if not self.splits:
            self.splits = [""] * n
        self.keys = [tuple(k) for k in self.keys]
        if len(self.keys) != n or len(self.splits) != n:
            raise ValueError("keys/splits must have one entry per pair")

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.values.shape[1]

    def subset_pairs(self, mask) -> "OutputMatrix":
        idx = np.flatnonzero(mask)
        return OutputMatrix(
            self.values[:, idx], self.labels[idx],
            [self.keys[i] for i in idx], [self.splits[i] for i in idx],
        )

    def split(self, name: str) -> "OutputMatrix":
        return self.subset_pairs(np.array([s == name for s in self.splits], dtype=bool))

    def save(self, path) -> None:
        header = {
            "kind": "output_matrix",
            "keys": [list(k) for k in self.keys],
            "splits": self.splits,
        }
        write_bundle(path, header, {"values": self.values, "labels": self.labels.astype(np.float64)})

    @classmethod
    def load(cls, path) -> "OutputMatrix":
        header, tensors = read_bundle(path)
        if header.get("kind") != "output_matrix":
            raise ValueError(f"{path} is not an output matrix")
        labels = np.rint(tensors["labels"]).astype(np.int64)
        values = np.clip(tensors["values"], 0.0, 1.0)
        return cls(values, labels, [tuple(k) for k in header["keys"]], header["splits"])


def check_aligned(a: OutputMatrix, b: OutputMatrix) -> None:
    if a.keys != b.keys or not np.array_equal(a.labels, b.labels):
        raise AlignmentError("output matrices are not aligned on the same pair ids")


def average_outputs(m: OutputMatrix, instance_subset: Sequence[int] | None = None) -> np.ndarray:
    """Mean sigmoid output per pair over the chosen instances (all by default)."""
    rows = range(m.n_instances) if instance_subset is None else list(instance_subset)
    if len(rows) == 0:
        raise ValueError("instance subset is empty")
    return m.values[np.asarray(rows, dtype=np.int64)].mean(axis=0)


def _n_correct(m: OutputMatrix, instance_subset: Sequence[int] | None) -> int:
    return int(np.sum((average_outputs(m, instance_subset) >= 0.5) == (m.labels == 1)))


def ensemble_accuracy(m: OutputMatrix, instance_subset: Sequence[int] | None = None) -> float:
    return _n_correct(m, instance_subset) / m.n_pairs


@dataclass
class CurvePoint:
    k: int
    mean: float
    min: float
    max: float


def bootstrap_curve(
    m: OutputMatrix,
    ks: Sequence[int],
    draws: int = 100,
    rng: np.random.Generator | None = None,
) -> list[CurvePoint]:
    """Accuracy of k-instance averages over random instance subsets.

    Each draw picks k distinct instances; k equal to the pool size therefore
    always yields the same subset and a zero-width range.
    """
    rng = nc.seeded_rng(0) if rng is None else rng
    if draws < 1:
        raise ValueError("draws must be >= 1")
    points = []
    for k in ks:
        if not 1 <= k <= m.n_instances:
            raise ValueError(f"k={k} outside 1..{m.n_instances}")
        sub = nc.split(rng, "k", int(k))
        # integer counts keep the mean exact when every draw scores the same
        correct = [_n_correct(m, sub.choice(m.n_instances, size=k, replace=False)) for _ in range(draws)]
        points.append(CurvePoint(
            int(k), sum(correct) / (draws * m.n_pairs), min(correct) / m.n_pairs, max(correct) / m.n_pairs,
        ))
    return points


def write_curve_csv(path, points: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "mean_acc", "min_acc", "max_acc"])
        for p in points:
            w.writerow([p.k, f"{p.mean:.6f}", f"{p.min:.6f}", f"{p.max:.6f}"])


# ---------------------------------------------------------------------------
# LDA fusion


@dataclass
class LdaModel:
    mean0: np.ndarray
    mean1: np.ndarray
    covariance: np.ndarray
    ridge: float
    w: np.ndarray
    b: float

    def decision(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.w - self.b


def lda_fit(features, labels) -> LdaModel:
    """Two-class LDA with pooled covariance (denominator n - 2) and a tiny ridge."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"features {x.shape} do not match labels {y.shape}")
    if x.shape[0] < 4:
        raise ValueError("LDA needs at least 4 points")
    x0, x1 = x[y == 0], x[y == 1]
    if len(x0) == 0 or len(x1) == 0:
        raise ValueError("LDA needs both classes present")
    mu0, mu1 = x0.mean(axis=0), x1.mean(axis=0)
    scatter = (x0 - mu0).T @ (x0 - mu0) + (x1 - mu1).T @ (x1 - mu1)
    cov = scatter / (x.shape[0] - 2)
    cov = 0.5 * (cov + cov.T)
    ridge = 1e-9 * np.trace(cov) / 2.0
    if ridge == 0.0:
        ridge = 1e-12
    w = np.linalg.solve(cov + ridge * np.eye(cov.shape[0]), mu1 - mu0)
    b = float(w @ (mu0 + mu1) / 2.0)
    return LdaModel(mu0, mu1, cov, ridge, w, b)


def lda_predict(model: LdaModel, features) -> np.ndarray:
    """1 where w.x >= b (points on the boundary go to class 1)."""
    x = np.asarray(features, dtype=np.float64)
    return (x @ model.w >= model.b).astype(np.int64)


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson_r needs two equal-length 1-D samples with n >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson_r undefined for a zero-variance sample")
    return float(np.clip((xc @ yc) / np.sqrt(sxx * syy), -1.0, 1.0))


def fuse(baseline_avg, ffr_avg, lda: LdaModel) -> np.ndarray:
    return lda_predict(lda, np.column_stack([baseline_avg, ffr_avg]))


def write_fusion_csv(path, keys, p_baseline, p_ffr, predicted, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_id", "p_baseline", "p_ffr", "predicted", "label"])
        for key, pb, pf, pr, lab in zip(keys, p_baseline, p_ffr, predicted, labels):
            w.writerow([pair_id(key), f"{pb:.6f}", f"{pf:.6f}", int(pr), int(lab)])


def pair_id(key: tuple) -> str:
    subject, recording, onset, label = key
    return f"{subject}/{recording}@{float(onset):.3f}#{int(label)}"


def write_scatter_csv(path, p_baseline, p_ffr, labels) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p_baseline", "p_ffr", "label"])
        for pb, pf, lab in zip(p_baseline, p_ffr, labels):
            w.writerow([f"{pb:.6f}", f"{pf:.6f}", int(lab)])
