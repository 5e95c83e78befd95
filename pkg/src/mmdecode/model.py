"""Dual-stream match-mismatch decoder.

EEG goes through a 1x1 spatial convolution and a dilated convolution stack;
each candidate stimulus goes through a second, shared dilated stack. The
channel-by-channel cosine similarities of the two feature maps form the
similarity grid, and a bias-free linear readout of the difference between the
two candidates' grids gives the logit that the first candidate matches.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from mmdecode import numcore as nc


@dataclass
class ModelConfig:
    eeg_channels: int = 64
    stim_channels: int = 1
    spatial_filters: int = 8
    conv_filters: int = 16
    conv_layers: int = 3
    kernel_size: int = 3
    dilation_base: int = 3
    sample_rate: float = 64.0
    segment_seconds: float = 3.0
    input_regularization: bool = False
    dropout_rate: float = 0.2

    @property
    def segment_samples(self) -> int:
        return int(round(self.sample_rate * self.segment_seconds))

    def dilations(self) -> list[int]:
        return [self.dilation_base**i for i in range(self.conv_layers)]

    def validate(self) -> None:
        for name in ("eeg_channels", "stim_channels", "spatial_filters", "conv_filters",
                     "conv_layers", "kernel_size", "dilation_base"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.sample_rate <= 0 or self.segment_seconds <= 0:
            raise ValueError("sample_rate and segment_seconds must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        span = (self.kernel_size - 1) * self.dilation_base ** (self.conv_layers - 1)
        if span >= self.segment_samples:
            raise ValueError(
                f"receptive span {span} does not fit a {self.segment_samples}-sample segment"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def ffr_config(**overrides) -> ModelConfig:
    """Same architecture, fed with the 512 Hz envelope-modulation feature."""
    return ModelConfig(**{"sample_rate": 512.0, **overrides})


@dataclass
class PairExample:
    eeg: np.ndarray
    stim_first: np.ndarray
    stim_second: np.ndarray
    label: int
    subject_id: str = ""
    recording_id: str = ""
    onset_seconds: float = 0.0
    mismatch_onset_seconds: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.subject_id, self.recording_id, round(self.onset_seconds, 9), self.label)


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, nc.Parameter]
    bn_state: nc.BatchNormState | None = None

    def trainable(self) -> list[nc.Parameter]:
        return list(self.params.values())

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            ModelConfig(**asdict(self.config)),
            {k: p.copy() for k, p in self.params.items()},
            None if self.bn_state is None else self.bn_state.copy(),
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def enable_input_regularization(self) -> None:
        """Add input batch-norm parameters (gamma=1, beta=0) and switch it on."""
        c = self.config.eeg_channels
        self.config.input_regularization = True
        if "input_bn.gamma" not in self.params:
            self.params["input_bn.gamma"] = nc.Parameter(np.ones(c))
            self.params["input_bn.beta"] = nc.Parameter(np.zeros(c))
        if self.bn_state is None:
            self.bn_state = nc.BatchNormState(c)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(config: ModelConfig, rng: np.random.Generator) -> ModelWeights:
    config.validate()
    f, k = config.conv_filters, config.kernel_size
    shapes = {"spatial.kernel": (config.spatial_filters, config.eeg_channels, 1)}
    c_in = config.spatial_filters
    for i in range(config.conv_layers):
        shapes[f"eeg.conv{i}.kernel"] = (f, c_in, k)
        c_in = f
    c_in = config.stim_channels
    for i in range(config.conv_layers):
        shapes[f"stim.conv{i}.kernel"] = (f, c_in, k)
        c_in = f
    shapes["output.weight"] = (1, f * f)
    params = {name: nc.Parameter(_glorot(rng, shape)) for name, shape in shapes.items()}
    weights = ModelWeights(ModelConfig(**asdict(config)), params)
    if config.input_regularization:
        weights.enable_input_regularization()
    return weights


def _conv_stack(g: nc.Graph, x: nc.Node, weights: ModelWeights, prefix: str) -> nc.Node:
    for i, d in enumerate(weights.config.dilations()):
        x = g.relu(g.conv1d(x, g.param(weights.params[f"{prefix}.conv{i}.kernel"]), d))
    return x


def build_forward(
    g: nc.Graph,
    weights: ModelWeights,
    eeg: np.ndarray,
    stim_first: np.ndarray,
    stim_second: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> nc.Node:
    """Record the forward pass on ``g`` and return the probability node.

    Arrays may be single examples ([C, T]) or batches ([B, C, T]); the output
    has shape [..., 1].
    """
    cfg = weights.config
    eeg = nc.as_tensor(eeg)
    stim_first = nc.as_tensor(stim_first)
    stim_second = nc.as_tensor(stim_second)
    t = cfg.segment_samples
    if eeg.shape[-2:] != (cfg.eeg_channels, t):
        raise ValueError(f"EEG segment {eeg.shape[-2:]} does not match ({cfg.eeg_channels}, {t})")
    for s in (stim_first, stim_second):
        if s.shape[-2:] != (cfg.stim_channels, t) or s.shape[:-2] != eeg.shape[:-2]:
            raise ValueError(f"stimulus segment {s.shape} does not match EEG {eeg.shape}")

    x = g.constant(eeg)
    if cfg.input_regularization:
        x = g.batch_norm(
            x,
            g.param(weights.params["input_bn.gamma"]),
            g.param(weights.params["input_bn.beta"]),
            train,
            weights.bn_state,
        )
        x = g.spatial_dropout(x, cfg.dropout_rate, train, rng)
    x = g.conv1d(x, g.param(weights.params["spatial.kernel"]), 1)
    eeg_feat = _conv_stack(g, x, weights, "eeg")

    sim_first = g.cosine_sim_time(eeg_feat, _conv_stack(g, g.constant(stim_first), weights, "stim"))
    sim_second = g.cosine_sim_time(eeg_feat, _conv_stack(g, g.constant(stim_second), weights, "stim"))
    logit = g.dense(g.sub(sim_first, sim_second), g.param(weights.params["output.weight"]))
    return g.sigmoid(logit)


def forward_pair(
    weights: ModelWeights,
    ex: PairExample,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> float:
    """Probability that ``ex.stim_first`` is the stimulus matching ``ex.eeg``."""
    g = nc.Graph()
    p = build_forward(g, weights, ex.eeg, ex.stim_first, ex.stim_second, train, rng)
    return float(p.value.reshape(-1)[0])


def similarity_features(weights: ModelWeights, eeg: np.ndarray, stim: np.ndarray) -> np.ndarray:
    """The similarity grid between one EEG segment and one stimulus (inference mode)."""
    g = nc.Graph()
    cfg = weights.config
    x = g.constant(eeg)
    if cfg.input_regularization:
        x = g.batch_norm(x, g.param(weights.params["input_bn.gamma"]),
                         g.param(weights.params["input_bn.beta"]), False, weights.bn_state)
    x = g.conv1d(x, g.param(weights.params["spatial.kernel"]), 1)
    eeg_feat = _conv_stack(g, x, weights, "eeg")
    return g.cosine_sim_time(eeg_feat, _conv_stack(g, g.constant(stim), weights, "stim")).value


def predict_batch(
    weights: ModelWeights,
    pairs: Sequence[PairExample],
    batch_size: int = 256,
) -> np.ndarray:
    """Inference-mode probabilities for a list of pairs."""
    out = np.empty(len(pairs))
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        eeg, s1, s2, _ = stack_pairs(chunk)
        g = nc.Graph()
        out[start : start + len(chunk)] = build_forward(g, weights, eeg, s1, s2).value[:, 0]
    return out


def stack_pairs(pairs: Sequence[PairExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    eeg = np.stack([p.eeg for p in pairs]).astype(np.float64)
    s1 = np.stack([p.stim_first for p in pairs]).astype(np.float64)
    s2 = np.stack([p.stim_second for p in pairs]).astype(np.float64)
    labels = np.array([p.label for p in pairs], dtype=np.float64)
    return eeg, s1, s2, labels


def predict(p: float, threshold: float = 0.5) -> int:
    """Label 1 (first candidate matches) when p >= threshold; ties go to 1."""
    return int(p >= threshold)
