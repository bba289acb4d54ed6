"""
Feature Extractors - Per-frame paralinguistic and semantic features.

This module turns a raw waveform segment into paralinguistic frames with a three
block 1-D CNN (conv 8/1 x50 -> pool 10/10 -> conv 6/1 x125 -> pool 5/5 -> conv 6/1
x125 -> pool 5/5, ReLU after every convolution), broadcasts aligned word
embeddings over frames ("hold last word") for the semantic stream, and pools the
CNN frames down to the label rate. It also reads and writes the waveform and
word-event files the pipeline consumes.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import soundfile as sf
from pydantic import BaseModel, Field, field_validator, model_validator

from .embeddings_io import EmbeddingTable
from .errors import ArgumentError, DimensionError, ParseError
from .tensor_core import Tensor, as_tensor, conv1d, glorot_uniform, matmul, maxpool1d, relu, zeros

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class FeatureConfig(BaseModel):
    """Waveform framing and CNN layout."""
    sample_rate: int = Field(22050, gt=0)
    segment_seconds: float = Field(10.0, gt=0)
    label_rate: float = Field(10.0, gt=0)
    conv_kernels: List[int] = [8, 6, 6]
    conv_channels: List[int] = [50, 125, 125]
    pool_sizes: List[int] = [10, 5, 5]

    @field_validator("conv_kernels", "conv_channels", "pool_sizes")
    @classmethod
    def positive_entries(cls, v):
        if not v or any(x < 1 for x in v):
            raise ValueError("layer sizes must be positive")
        return v

    @model_validator(mode="after")
    def whole_frames(self):
        if len({len(self.conv_kernels), len(self.conv_channels), len(self.pool_sizes)}) != 1:
            raise ValueError("conv_kernels, conv_channels and pool_sizes need one entry per block")
        if self.samples_per_segment % self.downsample:
            raise ValueError(f"{self.samples_per_segment} samples per segment do not split into "
                             f"CNN frames of {self.downsample} samples")
        if self.label_rate > self.cnn_frame_rate:
            raise ValueError(f"label rate {self.label_rate} Hz exceeds the CNN frame rate "
                             f"{self.cnn_frame_rate} Hz")
        return self

    @property
    def samples_per_segment(self) -> int:
        return int(round(self.sample_rate * self.segment_seconds))

    @property
    def downsample(self) -> int:
        return int(np.prod(self.pool_sizes))

    @property
    def cnn_frames(self) -> int:
        return self.samples_per_segment // self.downsample

    @property
    def cnn_frame_rate(self) -> float:
        return self.sample_rate / self.downsample

    @property
    def label_frames(self) -> int:
        return int(round(self.segment_seconds * self.label_rate))

    @property
    def paralinguistic_dim(self) -> int:
        return self.conv_channels[-1]


@dataclass
class WaveformSegment:
    """A fixed-length slice of audio; `valid_length` counts the real (unpadded) samples."""
    samples: np.ndarray
    sample_rate: int = 22050
    valid_length: Optional[int] = None
    segment_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.valid_length is None:
            self.valid_length = len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class WordEvent:
    """A word and its time span within the segment, in seconds."""
    token: str
    start_time: float
    end_time: float

    def __post_init__(self):
        if not 0 <= self.start_time < self.end_time:
            raise ArgumentError(
                f"word '{self.token}' has invalid span [{self.start_time}, {self.end_time})")


@dataclass
class FrameSequence:
    """Time-major T x d feature matrix with a per-frame validity mask."""
    frames: np.ndarray
    frame_rate: float
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(len(self.frames), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.frames[~self.mask] = 0.0

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return len(self.frames) / self.frame_rate


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

def segment_waveform(samples: np.ndarray, config: FeatureConfig,
                     prefix: str = "seg") -> List[WaveformSegment]:
    """Cut a recording into fixed segments; the last one is zero-padded."""
    samples = np.asarray(samples, dtype=np.float64)
    size = config.samples_per_segment
    segments = []
    for i, start in enumerate(range(0, max(len(samples), 1), size)):
        chunk = samples[start:start + size]
        padded = np.zeros(size)
        padded[:len(chunk)] = chunk
        segments.append(WaveformSegment(padded, config.sample_rate, len(chunk), f"{prefix}{i:04d}"))
    return segments


def segment_word_events(events: Sequence[WordEvent], config: FeatureConfig,
                        count: int) -> List[List[WordEvent]]:
    """Distribute recording-level events over `count` segments, in segment-local time.

    A word belongs to the segment its start falls in; a word running past the
    segment end is cut at the boundary.
    """
    seconds = config.segment_seconds
    segments: List[List[WordEvent]] = [[] for _ in range(count)]
    for event in events:
        index = min(int(event.start_time // seconds), count - 1)
        offset = index * seconds
        segments[index].append(WordEvent(event.token, event.start_time - offset,
                                         min(event.end_time - offset, seconds)))
    return segments


def label_mask(segment: WaveformSegment, config: FeatureConfig) -> np.ndarray:
    """Label frames whose start time falls inside the real audio."""
    times = np.arange(config.label_frames) / config.label_rate
    return times < segment.valid_length / segment.sample_rate


# ---------------------------------------------------------------------------
# Paralinguistic stream
# ---------------------------------------------------------------------------

class ParalinguisticCNN:
    """Raw-waveform CNN: same-padded stride-1 convolutions, ReLU, non-overlapping max-pools."""

    def __init__(self, config: FeatureConfig, rng: np.random.Generator):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        in_channels = 1
        for i, (kernel, channels) in enumerate(zip(config.conv_kernels, config.conv_channels)):
            self.params[f"conv{i}.W"] = glorot_uniform(
                rng, (channels, in_channels, kernel), in_channels * kernel, channels * kernel)
            self.params[f"conv{i}.b"] = zeros((channels,))
            in_channels = channels

    def forward(self, samples) -> Tensor:
        """(L,) waveform -> (L / downsample) x C_last frames, time-major."""
        x = as_tensor(samples)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        for i, pool in enumerate(self.config.pool_sizes):
            x = relu(conv1d(x, self.params[f"conv{i}.W"], stride=1, padding="same",
                            bias=self.params[f"conv{i}.b"]))
            x = maxpool1d(x, pool, pool)
        return x.T


def paralinguistic_frames(segment: WaveformSegment, params: ParalinguisticCNN) -> Tensor:
    """Differentiable CNN frames of one full-length segment."""
    expected = params.config.samples_per_segment
    if len(segment.samples) != expected:
        raise ArgumentError(f"segment has {len(segment.samples)} samples, expected {expected}")
    return params.forward(segment.samples)


def extract_paralinguistic(segment: WaveformSegment, params: ParalinguisticCNN) -> FrameSequence:
    """CNN frames for one segment (882 x 125 with the default layout)."""
    frames = paralinguistic_frames(segment, params).data
    frame_rate = params.config.cnn_frame_rate
    times = np.arange(len(frames)) / frame_rate
    mask = times < segment.valid_length / segment.sample_rate
    return FrameSequence(frames, frame_rate, mask)


# ---------------------------------------------------------------------------
# Semantic stream
# ---------------------------------------------------------------------------

def semantic_vectors(events: Sequence[WordEvent], table: EmbeddingTable,
                     W: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Start times and (optionally mapped) embedding rows of the known words, in time order."""
    if W is not None and (np.ndim(W) != 2 or np.shape(W)[1] != table.dim):
        raise DimensionError(f"map of shape {np.shape(W)} cannot apply to {table.dim}-dimensional embeddings")
    known = [e for e in sorted(events, key=lambda e: e.start_time) if e.token in table]
    skipped = len(events) - len(known)
    if skipped:
        logger.warning("Skipped %d word events with tokens missing from the speech table", skipped)
    dim = table.dim if W is None else W.shape[0]
    if not known:
        return np.zeros(0), np.zeros((0, dim))
    rows = np.stack([table.vector(e.token) for e in known])
    if W is not None:
        rows = rows @ np.asarray(W).T
    return np.array([e.start_time for e in known]), rows


def extract_semantic(events: Sequence[WordEvent], speech_table: EmbeddingTable, W,
                     frame_times: Sequence[float], frame_rate: Optional[float] = None) -> FrameSequence:
    """Hold-last-word broadcast of mapped embeddings W s over frame times.

    Each frame gets the vector of the latest word with start_time <= t; frames
    before the first word are zero. Pass W=None to broadcast the raw rows.
    """
    matrix = getattr(W, "W", W)
    frame_times = np.asarray(frame_times, dtype=np.float64)
    starts, rows = semantic_vectors(events, speech_table, matrix)
    frames = np.zeros((len(frame_times), rows.shape[1]))
    if len(starts):
        latest = np.searchsorted(starts, frame_times, side="right") - 1
        held = latest >= 0
        frames[held] = rows[latest[held]]
    if frame_rate is None:
        frame_rate = 1.0 / (frame_times[1] - frame_times[0]) if len(frame_times) > 1 else 1.0
    return FrameSequence(frames, frame_rate)


# ---------------------------------------------------------------------------
# Rate conversion
# ---------------------------------------------------------------------------

def resample_matrix(frames_in: int, frames_out: int) -> np.ndarray:
    """frames_out x frames_in averaging matrix over contiguous bins.

    Bin i spans [floor(i * n / m), floor((i + 1) * n / m)), so leftovers are spread
    one frame at a time and the last bin closes on the final frame.
    """
    if frames_out < 1 or frames_out > frames_in:
        raise ArgumentError(f"cannot pool {frames_in} frames into {frames_out} bins")
    edges = (np.arange(frames_out + 1) * frames_in) // frames_out
    pooling = np.zeros((frames_out, frames_in))
    for i in range(frames_out):
        pooling[i, edges[i]:edges[i + 1]] = 1.0 / (edges[i + 1] - edges[i])
    return pooling


def resample_frames(frames, frames_out: int) -> Tensor:
    """Differentiable bin-mean pooling of a T x d tensor."""
    frames = as_tensor(frames)
    return matmul(Tensor(resample_matrix(frames.shape[0], frames_out)), frames)


def pool_frames(frames, frame_rate: float, label_rate: float) -> Tensor:
    """Differentiable mean-pooling of T x d frames at `frame_rate` down to `label_rate`."""
    if label_rate > frame_rate:
        raise ArgumentError(f"label rate {label_rate} Hz exceeds frame rate {frame_rate} Hz")
    frames = as_tensor(frames)
    return resample_frames(frames, int(round(frames.shape[0] / frame_rate * label_rate)))


def resample_to_label_rate(seq: FrameSequence, label_rate: float) -> FrameSequence:
    """Mean-pool frames to `label_rate`; T' = duration x label_rate."""
    pooled = pool_frames(seq.frames, seq.frame_rate, label_rate).data
    frames_out = len(pooled)
    edges = (np.arange(frames_out + 1) * len(seq)) // frames_out
    mask = seq.mask[edges[:-1]]
    return FrameSequence(pooled, label_rate, mask)


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

def load_waveform(path: PathLike, sample_rate: int = 22050) -> np.ndarray:
    """Read mono 16-bit PCM WAV (via soundfile) or raw float32 little-endian samples."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        samples, rate = sf.read(str(path), dtype="float64", always_2d=True)
        if rate != sample_rate:
            raise ArgumentError(f"{path} is sampled at {rate} Hz, expected {sample_rate} Hz")
        if samples.shape[1] != 1:
            raise ArgumentError(f"{path} has {samples.shape[1]} channels, expected mono")
        return samples[:, 0]
    return np.fromfile(str(path), dtype="<f4").astype(np.float64)


def save_waveform(path: PathLike, samples: np.ndarray, sample_rate: int = 22050):
    """Write samples in [-1, 1] as mono 16-bit PCM WAV, or raw float32 for other suffixes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    if path.suffix.lower() == ".wav":
        sf.write(str(path), samples, sample_rate, subtype="PCM_16")
    else:
        samples.astype("<f4").tofile(str(path))


def load_word_events(path: PathLike,
                     durations: Optional[Mapping[str, float]] = None) -> Dict[str, List[WordEvent]]:
    """Read "segment_id,token,start,end" rows into per-segment event lists.

    Within a segment, rows must be in time order without overlap. When
    `durations` is given, every word must also end inside its recording.
    """
    events: Dict[str, List[WordEvent]] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["segment_id", "token", "start", "end"]:
            raise ParseError("expected header 'segment_id,token,start,end'", line=1, path=str(path))
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError("expected 4 fields", line=line_no, path=str(path))
            try:
                event = WordEvent(row[1], float(row[2]), float(row[3]))
            except ValueError:
                raise ParseError("non-numeric time", line=line_no, path=str(path)) from None
            except ArgumentError as e:
                raise ParseError(str(e), line=line_no, path=str(path)) from None
            segment = events.setdefault(row[0], [])
            if segment and event.start_time < segment[-1].end_time:
                raise ParseError(f"word '{event.token}' starts before '{segment[-1].token}' ends",
                                 line=line_no, path=str(path))
            if durations is not None and row[0] in durations and event.end_time > durations[row[0]] + 1e-9:
                raise ParseError(f"word '{event.token}' ends after the recording ({durations[row[0]]:g} s)",
                                 line=line_no, path=str(path))
            segment.append(event)
    return events


def save_word_events(path: PathLike, events: Dict[str, List[WordEvent]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["segment_id", "token", "start", "end"])
        for segment_id, items in events.items():
            for e in items:
                writer.writerow([segment_id, e.token, repr(e.start_time), repr(e.end_time)])
