"""Binary tensor container, dataset manifest, segmentation and pair sampling."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from mmdecode import numcore as nc
from mmdecode.model import ModelConfig, ModelWeights, PairExample

logger = logging.getLogger(__name__)

MAGIC = b"MMD1"
BUNDLE_MAGIC = b"MMDB"
VERSION = 1
DTYPE_F32LE = 0

_HEADER = struct.Struct("<4sHHH")


class TensorFileError(ValueError):
    """Base class for malformed container files."""


class BadMagicError(TensorFileError):
    pass


class UnsupportedVersionError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


class TruncatedHeaderError(TensorFileError):
    pass


class PayloadSizeError(TensorFileError):
    pass


# ---------------------------------------------------------------------------
# Tensor container


def encode_tensor(tensor) -> bytes:
    arr = np.ascontiguousarray(np.asarray(tensor), dtype="<f4")
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"cannot store tensor with empty dimension {arr.shape}")
    head = _HEADER.pack(MAGIC, VERSION, DTYPE_F32LE, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0, dtype=np.float64) -> tuple[np.ndarray, int]:
    """Parse one tensor record at ``offset``; returns (tensor, offset after payload).

    When the record is not the last thing in ``buf`` the caller gets the end
    offset back; trailing bytes after a standalone file are rejected by
    :func:`read_tensor`.
    """
    if len(buf) - offset < _HEADER.size:
        raise TruncatedHeaderError("file shorter than the tensor header")
    magic, version, dtype_code, ndim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    if dtype_code != DTYPE_F32LE:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype_code}")
    offset += _HEADER.size
    if len(buf) - offset < 8 * ndim:
        raise TruncatedHeaderError("file shorter than the declared dimension list")
    dims = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    nbytes = 4 * math.prod(dims)
    if len(buf) - offset < nbytes:
        raise PayloadSizeError(
            f"payload size mismatch: expected {nbytes} bytes, found {len(buf) - offset}"
        )
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=offset).reshape(dims)
    return arr.astype(dtype), offset + nbytes


def write_tensor(path, tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path, dtype=np.float64) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf, 0, dtype)
    if end != len(buf):
        raise PayloadSizeError(
            f"payload size mismatch: {len(buf) - end} unexpected trailing bytes"
        )
    return arr


def write_bundle(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Several named tensors plus a JSON header in one file.

    Layout: b"MMDB", u16 version, u32 header length, UTF-8 JSON header,
    u32 entry count, then per entry u16 name length, UTF-8 name and one
    complete tensor record.
    """
    out = io.BytesIO()
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.write(BUNDLE_MAGIC + struct.pack("<HI", VERSION, len(head)) + head)
    out.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw + encode_tensor(t))
    Path(path).write_bytes(out.getvalue())


def read_bundle(path, dtype=np.float64) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < 10:
        raise TruncatedHeaderError("file shorter than the bundle header")
    if buf[:4] != BUNDLE_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {BUNDLE_MAGIC!r}")
    version, head_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported bundle version {version}")
    pos = 10
    if len(buf) < pos + head_len + 4:
        raise TruncatedHeaderError("file shorter than the bundle header")
    try:
        header = json.loads(buf[pos : pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedHeaderError(f"unreadable bundle header: {exc}") from exc
    pos += head_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise TruncatedHeaderError("bundle entry header truncated")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        tensors[name], pos = decode_tensor(buf, pos, dtype)
    if pos != len(buf):
        raise PayloadSizeError(f"payload size mismatch: {len(buf) - pos} unexpected trailing bytes")
    return header, tensors


# ---------------------------------------------------------------------------
# Checkpoints


def save_weights(path, weights: ModelWeights) -> None:
    header = {"kind": "model_weights", "config": weights.config.to_dict(), "step_counts": {}}
    tensors = {}
    for name, p in weights.params.items():
        tensors[name] = p.value
        tensors[name + ".adam_m"] = p.adam_m
        tensors[name + ".adam_v"] = p.adam_v
        header["step_counts"][name] = p.step_count
    if weights.bn_state is not None:
        header["bn_initialized"] = weights.bn_state.initialized
        tensors["input_bn.running_mean"] = weights.bn_state.mean
        tensors["input_bn.running_var"] = weights.bn_state.var
    write_bundle(path, header, tensors)


def load_weights(path) -> ModelWeights:
    header, tensors = read_bundle(path)
    if header.get("kind") != "model_weights":
        raise TensorFileError(f"{path} is not a model checkpoint")
    config = ModelConfig.from_dict(header["config"])
    params = {}
    for name, steps in header["step_counts"].items():
        p = nc.Parameter(tensors[name])
        p.adam_m[...] = tensors[name + ".adam_m"]
        p.adam_v[...] = tensors[name + ".adam_v"]
        p.step_count = int(steps)
        params[name] = p
    bn = None
    if "input_bn.running_mean" in tensors:
        bn = nc.BatchNormState(config.eeg_channels)
        bn.mean = tensors["input_bn.running_mean"]
        bn.var = tensors["input_bn.running_var"]
        bn.initialized = bool(header.get("bn_initialized", True))
    return ModelWeights(config, params, bn)


# ---------------------------------------------------------------------------
# Manifest and recordings

SPLITS = ("train", "validation", "lda_fit", "heldout")

# decoder kind -> (EEG stream, stimulus stream)
DECODER_STREAMS = {
    "baseline": ("eeg", "envelope"),
    "ffr": ("eeg_ffr", "ffr_feature"),
}


@dataclass
class RecordingEntry:
    subject_id: str
    recording_id: str
    split: str
    duration_seconds: float
    eeg_path: str
    eeg_rate: float
    envelope_path: str
    envelope_rate: float = 64.0
    eeg_ffr_path: str | None = None
    eeg_ffr_rate: float | None = None
    ffr_feature_path: str | None = None
    ffr_feature_rate: float | None = None

    def streams(self) -> dict[str, tuple[str, float]]:
        out = {"eeg": (self.eeg_path, self.eeg_rate), "envelope": (self.envelope_path, self.envelope_rate)}
        if self.eeg_ffr_path is not None:
            out["eeg_ffr"] = (self.eeg_ffr_path, self.eeg_ffr_rate)
        if self.ffr_feature_path is not None:
            out["ffr_feature"] = (self.ffr_feature_path, self.ffr_feature_rate)
        return out


@dataclass
class Manifest:
    recordings: list[RecordingEntry] = field(default_factory=list)
    root: Path = Path(".")

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.recordings})

    def select(self, splits: Iterable[str] | None = None, subjects: Iterable[str] | None = None) -> list[RecordingEntry]:
        splits = None if splits is None else set(splits)
        subjects = None if subjects is None else set(subjects)
        return [
            r for r in self.recordings
            if (splits is None or r.split in splits) and (subjects is None or r.subject_id in subjects)
        ]

    def to_json(self) -> str:
        doc = {"version": VERSION, "recordings": [asdict(r) for r in self.recordings]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        entries = [RecordingEntry(**r) for r in doc["recordings"]]
        for e in entries:
            if e.split not in SPLITS:
                raise ValueError(f"recording {e.recording_id}: unknown split {e.split!r}")
        return cls(entries, path.parent)


@dataclass
class Recording:
    """Aligned streams of one subject/stimulus pair, held in memory as [C, N] float32."""

    subject_id: str
    recording_id: str
    split: str
    duration_seconds: float
    streams: dict[str, np.ndarray]
    rates: dict[str, float]

    def check_alignment(self) -> None:
        for name, data in self.streams.items():
            expected = round(self.rates[name] * self.duration_seconds)
            if abs(data.shape[-1] - expected) > 1:
                raise ValueError(
                    f"{self.recording_id}/{name}: {data.shape[-1]} samples, expected {expected} +- 1"
                )


def zscore(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return ((x - mean) / np.where(std > 0, std, 1.0)).astype(np.float32)


def load_recording(entry: RecordingEntry, root, streams: Iterable[str] | None = None, normalize: bool = True) -> Recording:
    """Read the listed streams (all by default), z-scoring every channel."""
    root = Path(root)
    available = entry.streams()
    names = list(available) if streams is None else list(streams)
    data, rates = {}, {}
    for name in names:
        if name not in available:
            raise KeyError(f"recording {entry.recording_id} has no {name!r} stream")
        rel, rate = available[name]
        arr = read_tensor(root / rel, dtype=np.float32)
        if arr.ndim == 1:
            arr = arr[None, :]
        data[name] = zscore(arr) if normalize else arr
        rates[name] = float(rate)
    rec = Recording(entry.subject_id, entry.recording_id, entry.split, entry.duration_seconds, data, rates)
    rec.check_alignment()
    return rec


def load_recordings(manifest: Manifest, splits=None, subjects=None, decoder: str | None = None) -> list[Recording]:
    streams = None if decoder is None else DECODER_STREAMS[decoder]
    return [load_recording(e, manifest.root, streams) for e in manifest.select(splits, subjects)]


# ---------------------------------------------------------------------------
# Segmentation and pairing


@dataclass
class Segment:
    recording: Recording
    onset_seconds: float
    window_seconds: float

    def bounds(self, stream: str) -> tuple[int, int]:
        rate = self.recording.rates[stream]
        start = int(round(self.onset_seconds * rate))
        return start, start + int(round(self.window_seconds * rate))

    def window(self, stream: str) -> np.ndarray:
        start, stop = self.bounds(stream)
        return self.recording.streams[stream][:, start:stop]


def segment_count(duration: float, window: float, hop: float) -> int:
    if window > duration + 1e-9:
        return 0
    return int(math.floor((duration - window) / hop + 1e-9)) + 1


def segment(
    recording: Recording,
    window_seconds: float = 3.0,
    hop_seconds: float = 1.0,
    start_seconds: float = 0.0,
    end_seconds: float | None = None,
) -> list[Segment]:
    """Windows at onsets start, start+hop, ... that fit inside [start, end]."""
    if hop_seconds <= 0:
        raise ValueError("hop_seconds must be positive")
    end = recording.duration_seconds if end_seconds is None else end_seconds
    span = end - start_seconds
    if window_seconds > span + 1e-9:
        raise ValueError(f"window {window_seconds}s longer than the {span}s recording")
    segments = []
    for i in range(segment_count(span, window_seconds, hop_seconds)):
        seg = Segment(recording, start_seconds + i * hop_seconds, window_seconds)
        if all(seg.bounds(s)[1] <= recording.streams[s].shape[-1] for s in recording.streams):
            segments.append(seg)
    return segments


def make_pairs(
    segments: Sequence[Segment],
    rng: np.random.Generator,
    min_separation_seconds: float = 3.0,
    order_balance: bool = True,
    decoder: str = "baseline",
) -> list[PairExample]:
    """Pair each EEG window with its own stimulus and one imposter from the same recording.

    The random draws depend only on the segment onsets, so calling this with
    identically seeded generators yields the same pairing for every decoder.
    """
    eeg_stream, stim_stream = DECODER_STREAMS[decoder]
    by_recording: dict[int, list[Segment]] = {}
    for seg in segments:
        by_recording.setdefault(id(seg.recording), []).append(seg)

    pairs, skipped = [], 0
    for group in by_recording.values():
        onsets = np.array([s.onset_seconds for s in group])
        for i, seg in enumerate(group):
            eligible = np.flatnonzero(np.abs(onsets - seg.onset_seconds) >= min_separation_seconds - 1e-9)
            if eligible.size == 0:
                skipped += 1
                continue
            other = group[int(eligible[rng.integers(eligible.size)])]
            first_is_match = bool(rng.random() < 0.5) if order_balance else True
            match, imposter = seg.window(stim_stream), other.window(stim_stream)
            rec = seg.recording
            pairs.append(
                PairExample(
                    eeg=seg.window(eeg_stream),
                    stim_first=match if first_is_match else imposter,
                    stim_second=imposter if first_is_match else match,
                    label=int(first_is_match),
                    subject_id=rec.subject_id,
                    recording_id=rec.recording_id,
                    onset_seconds=seg.onset_seconds,
                    mismatch_onset_seconds=other.onset_seconds,
                )
            )
    if skipped:
        logger.warning("%d windows had no mismatch candidate at >= %.3gs separation", skipped, min_separation_seconds)
    return pairs


def recording_pairs(
    recordings: Sequence[Recording],
    decoder: str,
    hop_seconds: float,
    rng: np.random.Generator,
    window_seconds: float = 3.0,
    min_separation_seconds: float = 3.0,
) -> list[PairExample]:
    """Segment and pair each recording with its own derived stream.

    Pairing for a recording depends on (rng seed, recording id, hop) only.
    """
    pairs = []
    for rec in recordings:
        segs = segment(rec, window_seconds, hop_seconds)
        sub = nc.split(rng, "pairs", rec.subject_id, rec.recording_id)
        pairs.extend(make_pairs(segs, sub, min_separation_seconds, True, decoder))
    return pairs


@dataclass
class PairDataset:
    train: list[PairExample]
    validation: list[PairExample]


def build_dataset(
    recordings: Sequence[Recording],
    decoder: str,
    hop_seconds: float,
    rng: np.random.Generator,
    validation_fraction: float = 0.1,
    validation_recordings: Sequence[Recording] | None = None,
    window_seconds: float = 3.0,
) -> PairDataset:
    """Training and validation pairs, kept apart at the recording level.

    Validation pairs come from ``validation_recordings`` when given; otherwise
    a seeded ``validation_fraction`` of the recordings (at least one) is held
    back. Validation pairs always use a 1 s hop.
    """
    recordings = list(recordings)
    if validation_recordings:
        val_recs = list(validation_recordings)
        train_recs = recordings
    else:
        if len(recordings) < 2:
            raise ValueError("need at least two recordings to carve out a validation set")
        order = nc.split(rng, "validation_split").permutation(len(recordings))
        n_val = min(len(recordings) - 1, max(1, int(round(validation_fraction * len(recordings)))))
        held = set(order[:n_val].tolist())
        val_recs = [r for i, r in enumerate(recordings) if i in held]
        train_recs = [r for i, r in enumerate(recordings) if i not in held]
    train = recording_pairs(train_recs, decoder, hop_seconds, rng, window_seconds)
    validation = recording_pairs(val_recs, decoder, 1.0, rng, window_seconds)
    return PairDataset(train, validation)
