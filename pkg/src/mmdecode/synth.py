"""Seeded synthetic EEG stand-in for the challenge recordings.

Each subject has a fixed forward model: a mixing matrix from lagged copies of
the speech envelope to the EEG channels, and a second one for the
high-frequency (FFR-like) feature. EEG is generated at 512 Hz as the sum of
both responses plus 1/f noise, then decimated to 64 Hz for the envelope
decoder. The FFR feature is a band-limited carrier (80-200 Hz) under a slow
modulation that is drawn independently of the envelope, so the two decoders
see independent information.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import signal

from mmdecode import numcore as nc
from mmdecode.dataio import SPLITS, Manifest, RecordingEntry, write_tensor

logger = logging.getLogger(__name__)

ENVELOPE_RATE = 64
FFR_RATE = 512
UPSAMPLE = FFR_RATE // ENVELOPE_RATE


@dataclass
class SyntheticConfig:
    n_subjects: int = 3
    recordings_per_subject: int = 10
    duration_seconds: float = 60.0
    eeg_channels: int = 64
    snr_db: float = 10.0
    subject_mixing_seed: int = 0
    lag_taps: list[int] = field(default_factory=lambda: [2, 5, 9])
    noise_spectral_exponent: float = 1.0
    # fraction of each subject's mixing pattern that is individual rather than shared
    subject_variability: float = 0.5
    ffr_lag_taps: list[int] = field(default_factory=lambda: [3, 7])
    ffr_relative_db: float = 0.0
    include_ffr: bool = True
    split_fractions: dict[str, float] = field(
        default_factory=lambda: {"train": 0.7, "validation": 0.1, "lda_fit": 0.1, "heldout": 0.1}
    )

    def validate(self) -> None:
        if self.n_subjects < 1 or self.recordings_per_subject < 1:
            raise ValueError("need at least one subject and one recording")
        if self.duration_seconds <= 0 or self.eeg_channels < 1:
            raise ValueError("duration and channel count must be positive")
        if not np.isfinite(self.snr_db) or not np.isfinite(self.ffr_relative_db):
            raise ValueError("snr_db must be finite")
        if any(lag < 0 for lag in self.lag_taps + self.ffr_lag_taps) or not self.lag_taps:
            raise ValueError("lag taps must be non-negative and non-empty")
        if not 0.0 <= self.subject_variability <= 1.0:
            raise ValueError("subject_variability must lie in [0, 1]")
        unknown = set(self.split_fractions) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown split names {sorted(unknown)}")
        if any(v < 0 for v in self.split_fractions.values()) or sum(self.split_fractions.values()) <= 0:
            raise ValueError("split fractions must be non-negative with a positive sum")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown SyntheticConfig keys: {sorted(unknown)}")
        return cls(**d)


def split_plan(n_recordings: int, fractions: dict[str, float]) -> list[str]:
    """Largest-remainder allocation of recordings to splits, in SPLITS order."""
    names = [s for s in SPLITS if fractions.get(s, 0.0) > 0]
    total = sum(fractions[s] for s in names)
    quotas = [fractions[s] / total * n_recordings for s in names]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(names)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n_recordings - sum(counts)]:
        counts[i] += 1
    return [name for name, c in zip(names, counts) for _ in range(c)]


def pink_noise(rng: np.random.Generator, shape: tuple[int, int], exponent: float) -> np.ndarray:
    """Unit-variance noise with power spectrum ~ 1/f**exponent along the last axis."""
    n = shape[-1]
    spec = rng.standard_normal(shape[:-1] + (n // 2 + 1,)) + 1j * rng.standard_normal(shape[:-1] + (n // 2 + 1,))
    freqs = np.fft.rfftfreq(n)
    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-exponent / 2.0)
    out = np.fft.irfft(spec * scale, n=n, axis=-1)
    return out / out.std(axis=-1, keepdims=True)


def _lowpass(rng: np.random.Generator, n: int, rate: float, cutoff: float) -> np.ndarray:
    sos = signal.butter(4, cutoff, btype="low", fs=rate, output="sos")
    x = signal.sosfiltfilt(sos, rng.standard_normal(n))
    return x / x.std()


def speech_envelope(rng: np.random.Generator, n: int) -> np.ndarray:
    """Positive, slowly varying envelope-like series at 64 Hz."""
    return np.exp(0.75 * _lowpass(rng, n, ENVELOPE_RATE, 6.0))


def ffr_feature(rng: np.random.Generator, n: int) -> np.ndarray:
    """80-200 Hz carrier under an independent slow modulation, at 512 Hz."""
    sos = signal.butter(4, [80.0, 200.0], btype="band", fs=FFR_RATE, output="sos")
    carrier = signal.sosfiltfilt(sos, rng.standard_normal(n))
    modulation = np.exp(0.75 * _lowpass(rng, n, FFR_RATE, 4.0))
    out = carrier * modulation
    return out / out.std()


def lagged_response(feature: np.ndarray, mixing: np.ndarray, lags: list[int]) -> np.ndarray:
    """sum_l mixing[:, l] * feature(t - lags[l]), zero before the recording starts."""
    n = feature.shape[-1]
    out = np.zeros((mixing.shape[0], n))
    for col, lag in enumerate(lags):
        shifted = np.zeros(n)
        shifted[lag:] = feature[: n - lag] if lag else feature
        out += mixing[:, col : col + 1] * shifted
    return out


def subject_mixing(config: SyntheticConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-subject (envelope, FFR) mixing matrices around shared population patterns."""
    base = nc.seeded_rng(config.subject_mixing_seed)
    shared_env = nc.split(base, "shared", "envelope").standard_normal((config.eeg_channels, len(config.lag_taps)))
    shared_ffr = nc.split(base, "shared", "ffr").standard_normal((config.eeg_channels, len(config.ffr_lag_taps)))
    v = config.subject_variability
    keep = np.sqrt(1.0 - v * v)
    out = []
    for s in range(config.n_subjects):
        own = nc.split(base, "subject", s)
        env = keep * shared_env + v * own.standard_normal(shared_env.shape)
        ffr = keep * shared_ffr + v * own.standard_normal(shared_ffr.shape)
        out.append((env, ffr))
    return out


def _unit_power(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x))


def synth_recording(config: SyntheticConfig, mixing: tuple[np.ndarray, np.ndarray], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """All streams of one recording: eeg (64 Hz), envelope, and optionally eeg_ffr / ffr_feature (512 Hz)."""
    n64 = int(round(ENVELOPE_RATE * config.duration_seconds))
    n512 = n64 * UPSAMPLE
    env = speech_envelope(nc.split(rng, "envelope"), n64)
    env_up = signal.resample_poly(env, UPSAMPLE, 1)[:n512]
    env_mix, ffr_mix = mixing
    lags512 = [lag * UPSAMPLE for lag in config.lag_taps]
    response = _unit_power(lagged_response(env_up - env_up.mean(), env_mix, lags512))

    streams = {"envelope": env[None, :]}
    ffr = None
    if config.include_ffr:
        ffr = ffr_feature(nc.split(rng, "ffr"), n512)
        ffr_resp = _unit_power(lagged_response(ffr, ffr_mix, config.ffr_lag_taps))
        response = response + 10.0 ** (config.ffr_relative_db / 20.0) * ffr_resp

    noise = pink_noise(nc.split(rng, "noise"), (config.eeg_channels, n512), config.noise_spectral_exponent)
    signal_power = np.mean(response * response)
    noise_gain = np.sqrt(signal_power / 10.0 ** (config.snr_db / 10.0))
    eeg512 = response + noise_gain * noise
    streams["eeg"] = signal.resample_poly(eeg512, 1, UPSAMPLE, axis=-1)[:, :n64]
    if ffr is not None:
        streams["eeg_ffr"] = eeg512
        streams["ffr_feature"] = ffr[None, :]
    return streams


def synth_generate(config: SyntheticConfig, rng: np.random.Generator, out_dir) -> Manifest:
    """Write a full synthetic dataset (TensorFiles + manifest.json) under ``out_dir``."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = split_plan(config.recordings_per_subject, config.split_fractions)
    mixing = subject_mixing(config)
    entries = []
    for s in range(config.n_subjects):
        subject_id = f"S{s:03d}"
        (out_dir / subject_id).mkdir(exist_ok=True)
        for r in range(config.recordings_per_subject):
            recording_id = f"{subject_id}_R{r:03d}"
            streams = synth_recording(config, mixing[s], nc.split(rng, "recording", s, r))
            paths = {}
            for name, data in streams.items():
                rel = f"{subject_id}/{recording_id}_{name}.mmd"
                write_tensor(out_dir / rel, data)
                paths[name] = rel
            entries.append(
                RecordingEntry(
                    subject_id=subject_id,
                    recording_id=recording_id,
                    split=plan[r],
                    duration_seconds=float(config.duration_seconds),
                    eeg_path=paths["eeg"],
                    eeg_rate=float(ENVELOPE_RATE),
                    envelope_path=paths["envelope"],
                    envelope_rate=float(ENVELOPE_RATE),
                    eeg_ffr_path=paths.get("eeg_ffr"),
                    eeg_ffr_rate=float(FFR_RATE) if "eeg_ffr" in paths else None,
                    ffr_feature_path=paths.get("ffr_feature"),
                    ffr_feature_rate=float(FFR_RATE) if "ffr_feature" in paths else None,
                )
            )
    manifest = Manifest(entries, out_dir)
    manifest.save(out_dir / "manifest.json")
    logger.info("wrote %d recordings for %d subjects to %s", len(entries), config.n_subjects, out_dir)
    return manifest
