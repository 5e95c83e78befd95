"""Population training of decoder instances and per-subject fine-tuning."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from mmdecode import numcore as nc
from mmdecode.dataio import PairDataset, Recording, build_dataset
from mmdecode.model import ModelConfig, ModelWeights, build_forward, init_model, predict_batch, stack_pairs

logger = logging.getLogger(__name__)

POPULATION_HOP = 1.0
FINETUNE_HOP = 0.125


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    # validation-loss gain that counts as progress for early stopping
    min_delta: float = 1e-3
    hop_seconds: float = POPULATION_HOP
    seed: int = 0
    validation_fraction: float = 0.1
    mode: str = "population"
    # fine-tuning ablations: keep the input regularisation / the dense hop
    finetune_regularization: bool = True

    def validate(self) -> None:
        if self.mode not in ("population", "finetune"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("lr >= 0, batch_size >= 1, max_epochs >= 1 and patience >= 1 required")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.min_delta < 0:
            raise ValueError("min_delta must be non-negative")
        if self.hop_seconds <= 0:
            raise ValueError("hop_seconds must be positive")
        if not 0.0 < self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    stopping_epoch: int = 0
    best_epoch: int = 0
    weights_checksum: str = ""
    seed: str = ""
    ops: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def weights_checksum(weights: ModelWeights) -> str:
    h = hashlib.sha256()
    for name in sorted(weights.params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(weights.params[name].value, dtype="<f8").tobytes())
    return h.hexdigest()


def _describe_seed(rng: np.random.Generator) -> str:
    seq = rng.bit_generator.seed_seq
    return f"{seq.entropy}:{'/'.join(str(k) for k in seq.spawn_key)}"


def _bce(p: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(nc.bce_loss(p, labels)))


def evaluate_pairs(weights: ModelWeights, pairs) -> tuple[float, float]:
    """(mean BCE, accuracy) in inference mode."""
    p = predict_batch(weights, pairs)
    labels = np.array([ex.label for ex in pairs], dtype=np.float64)
    return _bce(p, labels), float(np.mean((p >= 0.5) == (labels == 1)))


def _fit(
    weights: ModelWeights,
    dataset: PairDataset,
    train_config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[ModelWeights, TrainReport]:
    order_rng = nc.split(rng, "order")
    dropout_rng = nc.split(rng, "dropout")
    report = TrainReport(seed=_describe_seed(rng))
    params = weights.trainable()
    n = len(dataset.train)
    best_loss, best_weights = math.inf, weights.copy()
    # patience counts epochs since the last gain larger than min_delta;
    # the returned weights are still those with the lowest validation loss
    progress_loss, wait = math.inf, 0

    for epoch in range(1, train_config.max_epochs + 1):
        perm = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, train_config.batch_size):
            batch = [dataset.train[i] for i in perm[start : start + train_config.batch_size]]
            eeg, s1, s2, labels = stack_pairs(batch)
            g = nc.Graph()
            try:
                p = build_forward(g, weights, eeg, s1, s2, train=True, rng=dropout_rng)
                loss = g.bce_loss(p, labels[:, None])
            except nc.NonFiniteError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: {exc}") from exc
            if not report.ops:
                report.ops = g.ops()
            weights.zero_grad()
            g.backward(loss)
            nc.adam_step(params, train_config.lr)
            total += float(loss.value) * len(batch)
            if not all(np.isfinite(q.value).all() for q in params):
                raise TrainingDivergedError(f"epoch {epoch}: parameters became non-finite")

        val_loss, val_acc = evaluate_pairs(weights, dataset.validation)
        report.train_loss.append(total / n)
        report.val_loss.append(val_loss)
        report.val_accuracy.append(val_acc)
        report.stopping_epoch = epoch
        logger.debug("epoch %d train %.4f val %.4f acc %.3f", epoch, total / n, val_loss, val_acc)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"epoch {epoch}: validation loss is not finite")
        if val_loss < best_loss:
            best_loss, best_weights = val_loss, weights.copy()
            report.best_epoch = epoch
        if val_loss < progress_loss - train_config.min_delta:
            progress_loss, wait = val_loss, 0
        else:
            wait += 1
            if wait >= train_config.patience:
                break

    report.weights_checksum = weights_checksum(best_weights)
    return best_weights, report


def train_instance(
    dataset: PairDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[ModelWeights, TrainReport]:
    """Train one decoder from scratch; returns the best-validation weights.

    ``rng`` defaults to ``seeded_rng(train_config.seed)``; initialisation and
    example order draw from its "init" and "order" substreams.
    """
    train_config.validate()
    if train_config.mode != "population":
        raise ValueError("train_instance runs population training; use finetune_subject for fine-tuning")
    if model_config.input_regularization:
        raise ValueError("population training is unregularised; input_regularization must be off")
    if not dataset.train or not dataset.validation:
        raise ValueError("dataset needs both training and validation pairs")
    rng = nc.seeded_rng(train_config.seed) if rng is None else rng
    weights = init_model(model_config, nc.split(rng, "init"))
    return _fit(weights, dataset, train_config, rng)


def instance_rng(seed: int, index: int) -> np.random.Generator:
    return nc.split(nc.seeded_rng(seed), index)


def train_population(
    dataset: PairDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    n_instances: int,
    jobs: int = 1,
) -> list[tuple[ModelWeights, TrainReport]]:
    """Independent instances; instance i uses the stream split(seed, i)."""
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")

    def one(i):
        return train_instance(dataset, model_config, train_config, instance_rng(train_config.seed, i))

    if jobs <= 1:
        return [one(i) for i in range(n_instances)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, range(n_instances)))


def subject_dataset(
    recordings: Sequence[Recording],
    decoder: str,
    train_config: TrainConfig,
    rng: np.random.Generator,
    validation_recordings: Sequence[Recording] | None = None,
) -> PairDataset:
    """Pairs for one subject at the configured (fine-tuning) hop."""
    subjects = {r.subject_id for r in recordings} | {r.subject_id for r in validation_recordings or []}
    if len(subjects) != 1:
        raise ValueError(f"expected recordings of exactly one subject, got {sorted(subjects)}")
    return build_dataset(
        recordings, decoder, train_config.hop_seconds, rng,
        train_config.validation_fraction, validation_recordings,
    )


def finetune_subject(
    population_weights: ModelWeights,
    subject_data: PairDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[ModelWeights, TrainReport]:
    """Continue training a copy of the population decoder on one subject.

    Input batch-norm and spatial dropout (``model_config.dropout_rate``) are
    switched on at the EEG input; Adam state starts fresh. The population
    weights are not modified.
    """
    train_config.validate()
    if train_config.mode != "finetune":
        raise ValueError("finetune_subject needs train_config.mode == 'finetune'")
    if not subject_data.train or not subject_data.validation:
        raise ValueError("subject has too few eligible windows for training and validation")
    subjects = {ex.subject_id for ex in subject_data.train} | {ex.subject_id for ex in subject_data.validation}
    if len(subjects) != 1:
        raise ValueError(f"fine-tuning data must come from one subject, got {sorted(subjects)}")

    weights = population_weights.copy()
    for p in weights.params.values():
        p.adam_m[...] = 0.0
        p.adam_v[...] = 0.0
        p.step_count = 0
        p.zero_grad()
    weights.config.dropout_rate = model_config.dropout_rate
    if train_config.finetune_regularization:
        weights.enable_input_regularization()
    rng = nc.seeded_rng(train_config.seed) if rng is None else rng
    return _fit(weights, subject_data, train_config, rng)
