import json

import numpy as np
import pytest

from mmdecode import numcore as nc
from mmdecode.dataio import PairDataset, build_dataset, load_recordings, recording_pairs
from mmdecode.model import ModelConfig, build_forward, init_model, stack_pairs
from mmdecode.synth import SyntheticConfig, synth_generate
from mmdecode.trainer import (
    TrainConfig,
    TrainingDivergedError,
    evaluate_pairs,
    finetune_subject,
    instance_rng,
    subject_dataset,
    train_instance,
    train_population,
    weights_checksum,
)

CHANNELS = 6
MODEL = ModelConfig(eeg_channels=CHANNELS, spatial_filters=4, conv_filters=8)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    cfg = SyntheticConfig(n_subjects=2, recordings_per_subject=5, duration_seconds=20.0,
                          eeg_channels=CHANNELS, snr_db=0.0, include_ffr=False,
                          split_fractions={"train": 3, "validation": 1, "heldout": 1})
    return synth_generate(cfg, nc.seeded_rng(0), tmp_path_factory.mktemp("synth"))


@pytest.fixture(scope="module")
def dataset(manifest):
    return build_dataset(load_recordings(manifest, ["train"], decoder="baseline"), "baseline", 1.0,
                         nc.seeded_rng(1), validation_recordings=load_recordings(manifest, ["validation"], decoder="baseline"))


FAST = TrainConfig(max_epochs=6, patience=2, batch_size=32)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="other").validate()
    with pytest.raises(ValueError):
        TrainConfig(patience=10, max_epochs=5).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(FAST.to_dict()) == FAST


def test_training_learns_high_snr(dataset, manifest):
    weights, report = train_instance(dataset, MODEL, TrainConfig(max_epochs=10, patience=3, batch_size=32))
    assert max(report.val_accuracy) >= 0.9
    held = recording_pairs(load_recordings(manifest, ["heldout"], decoder="baseline"), "baseline", 1.0, nc.seeded_rng(2))
    assert evaluate_pairs(weights, held)[1] >= 0.9
    assert report.best_epoch == int(np.argmin(report.val_loss)) + 1
    assert report.weights_checksum == weights_checksum(weights)


def test_training_bit_identical(dataset):
    a, ra = train_instance(dataset, MODEL, FAST)
    b, rb = train_instance(dataset, MODEL, FAST)
    assert ra.to_json() == rb.to_json()
    for name in a.params:
        assert a.params[name].value.tobytes() == b.params[name].value.tobytes()


def test_early_stopping_respects_patience(dataset):
    cfg = TrainConfig(max_epochs=30, patience=1, lr=0.05, batch_size=32, min_delta=0.0)
    _, report = train_instance(dataset, MODEL, cfg)
    assert report.stopping_epoch == len(report.val_loss)
    if report.stopping_epoch < 30:
        assert report.val_loss[-1] >= min(report.val_loss[:-1])


def test_min_delta_stops_on_small_gains(dataset):
    # no later gain can exceed 10, so training stops after exactly `patience` more epochs
    _, report = train_instance(dataset, MODEL, TrainConfig(max_epochs=10, patience=2, min_delta=10.0))
    assert report.stopping_epoch == 3
    assert report.best_epoch == int(np.argmin(report.val_loss)) + 1
    with pytest.raises(ValueError):
        TrainConfig(min_delta=-1.0).validate()


def test_population_instances_differ_and_n1_matches(dataset):
    pool = train_population(dataset, MODEL, TrainConfig(max_epochs=2, patience=1), 2)
    a, b = pool[0][0], pool[1][0]
    assert weights_checksum(a) != weights_checksum(b)
    single, _ = train_instance(dataset, MODEL, TrainConfig(max_epochs=2, patience=1), instance_rng(0, 0))
    assert weights_checksum(single) == weights_checksum(a)
    (only,) = train_population(dataset, MODEL, TrainConfig(max_epochs=2, patience=1), 1)
    assert weights_checksum(only[0]) == weights_checksum(a)


def test_population_threads_match_serial(dataset):
    cfg = TrainConfig(max_epochs=1, patience=1)
    serial = [weights_checksum(w) for w, _ in train_population(dataset, MODEL, cfg, 3, jobs=1)]
    threaded = [weights_checksum(w) for w, _ in train_population(dataset, MODEL, cfg, 3, jobs=3)]
    assert serial == threaded


def test_overfit_one_example(dataset):
    weights = init_model(MODEL, nc.seeded_rng(3))
    eeg, s1, s2, labels = stack_pairs(dataset.train[:1])
    losses = []
    for _ in range(101):
        g = nc.Graph()
        loss = g.bce_loss(build_forward(g, weights, eeg, s1, s2, train=True), labels[:, None])
        losses.append(float(loss.value))
        weights.zero_grad()
        g.backward(loss)
        nc.adam_step(weights.trainable(), 1e-3)
    decreasing = sum(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 90


def test_population_graph_has_no_regularisation(dataset):
    _, report = train_instance(dataset, MODEL, TrainConfig(max_epochs=1, patience=1))
    assert "batch_norm" not in report.ops and "spatial_dropout" not in report.ops
    assert report.ops.count("conv1d") == 1 + 3 * MODEL.conv_layers
    with pytest.raises(ValueError):
        train_instance(dataset, ModelConfig(eeg_channels=CHANNELS, input_regularization=True), FAST)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_instance(PairDataset([], []), MODEL, FAST)


def test_divergence_reported(dataset):
    with pytest.raises(TrainingDivergedError):
        train_instance(dataset, MODEL, TrainConfig(max_epochs=2, patience=1, lr=1e300))


def _subject_data(manifest, sid, cfg):
    return subject_dataset(
        load_recordings(manifest, ["train"], [sid], "baseline"), "baseline", cfg, nc.seeded_rng(4),
        load_recordings(manifest, ["validation"], [sid], "baseline"),
    )


def test_finetune_adds_regularisation_and_keeps_population(dataset, manifest):
    pop, _ = train_instance(dataset, MODEL, TrainConfig(max_epochs=1, patience=1))
    before = weights_checksum(pop)
    cfg = TrainConfig(mode="finetune", hop_seconds=0.5, max_epochs=1, patience=1)
    tuned, report = finetune_subject(pop, _subject_data(manifest, "S000", cfg), MODEL, cfg)
    assert weights_checksum(pop) == before
    assert "batch_norm" in report.ops and "spatial_dropout" in report.ops
    assert report.ops.index("batch_norm") < report.ops.index("conv1d")
    assert tuned.bn_state.initialized


def test_finetune_lr_zero_is_frozen(dataset, manifest):
    pop, _ = train_instance(dataset, MODEL, TrainConfig(max_epochs=1, patience=1))
    cfg = TrainConfig(mode="finetune", hop_seconds=0.5, max_epochs=2, patience=1, lr=0.0)
    tuned, _ = finetune_subject(pop, _subject_data(manifest, "S000", cfg), MODEL, cfg)
    for name, p in pop.params.items():
        np.testing.assert_array_equal(tuned.params[name].value, p.value)
    np.testing.assert_array_equal(tuned.params["input_bn.gamma"].value, 1.0)
    np.testing.assert_array_equal(tuned.params["input_bn.beta"].value, 0.0)


def test_finetune_hop_gives_more_windows(manifest):
    dense = _subject_data(manifest, "S000", TrainConfig(mode="finetune", hop_seconds=0.125))
    sparse = _subject_data(manifest, "S000", TrainConfig(mode="finetune", hop_seconds=1.0))
    # 3 training recordings of 20 s: 137 vs 18 windows each
    assert len(dense.train) == 3 * 137
    assert len(sparse.train) == 3 * 18


def test_finetune_rejects_mixed_subjects(dataset, manifest):
    pop, _ = train_instance(dataset, MODEL, TrainConfig(max_epochs=1, patience=1))
    cfg = TrainConfig(mode="finetune", max_epochs=1, patience=1)
    with pytest.raises(ValueError):
        finetune_subject(pop, dataset, MODEL, cfg)
    with pytest.raises(ValueError):
        subject_dataset(load_recordings(manifest, ["train"], decoder="baseline"), "baseline", cfg, nc.seeded_rng(0))
    with pytest.raises(ValueError):
        finetune_subject(pop, _subject_data(manifest, "S000", cfg), MODEL, FAST)


def test_report_json_round_trip(dataset):
    _, report = train_instance(dataset, MODEL, TrainConfig(max_epochs=1, patience=1))
    doc = json.loads(report.to_json())
    assert doc["stopping_epoch"] == 1 and len(doc["val_loss"]) == 1
    assert doc["seed"]
