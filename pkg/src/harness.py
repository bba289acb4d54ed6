"""
Harness - Synthetic data, alignment runs, training and evaluation.

This module wires the pipeline end to end: it generates a seeded synthetic
corpus (embedding tables related by a hidden rotation, waveforms whose
loudness follows arousal, word streams whose embeddings follow valence and
liking), loads it back, fits the speech-to-text map, trains the CNN + fusion +
LSTM regressor with the CCC loss and scores checkpoints per affect dimension.

Every random draw comes from a counter-based stream keyed by (seed, purpose,
epoch, batch), so runs and resumed runs see identical randomness.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .alignment import (
    AlignmentConfig, LinearMap, adversarial_train, refine_with_dictionary, translation_precision,
)
from .checkpoint import load_tensors, save_tensors
from .embeddings_io import (
    Dictionary, EmbeddingTable, build_frequency_dictionary, load_word2vec_text, normalize,
    save_word2vec_text,
)
from .errors import DataError, DegenerateInputError, DimensionError, NumericError, ParseError
from .feature_extractors import (
    FeatureConfig, ParalinguisticCNN, WaveformSegment, WordEvent, extract_semantic, label_mask,
    load_waveform, load_word_events, paralinguistic_frames, pool_frames, save_waveform,
    save_word_events, segment_waveform, segment_word_events,
)
from .fusion_recurrence import (
    DIMENSIONS, EmotionModel, FusionConfig, FusionParams, LstmParams, attention_pair, ccc_loss,
    ccc_per_dimension, disentangled_fuse, interleave, lstm_forward,
)
from .tensor_core import (
    AdamState, Tape, Tensor, adam_step, backward, clip_grad_norm, conv1d, counter_rng,
    gradient_check, matmul, maxpool1d, parameter, softmax,
)
from .utils import append_jsonl, batched, ensure_directory, load_json_config, save_json_config

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_KIND = "affect_model"
DATASET_FORMAT = 1

# counter_rng purposes
_EMBEDDINGS, _ROTATION, _SPEECH_NOISE, _AFFECT, _WORDS, _DIRECTIONS, _AUDIO = range(7)
_CNN_INIT, _MODEL_INIT, _SHUFFLE, _DROPOUT = 10, 11, 20, 21


class SyntheticSpec(BaseModel):
    """Shape and seed of a generated corpus."""
    vocab_size: int = Field(1000, ge=4)
    speech_dim: int = Field(50, gt=0)
    text_dim: int = Field(50, gt=0)
    noise: float = Field(0.01, ge=0.0)
    train_segments: int = Field(8, ge=1)
    dev_segments: int = Field(4, ge=0)
    max_frequency: float = Field(0.1, gt=0.0)
    snr_db: float = 20.0
    words_per_second: float = Field(2.0, gt=0.0)
    anisotropy: float = Field(4.0, ge=1.0)
    common_offset: float = Field(0.5, ge=0.0)
    heldout_pairs: int = Field(200, ge=0)
    seed: int = 0


class RunConfig(BaseModel):
    """Training run settings."""
    learning_rate: float = Field(1e-4, ge=0.0)
    batch_size: int = Field(4, ge=1)
    sequence_length: int = Field(100, ge=2)
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    recurrent_dropout: float = Field(0.0, ge=0.0, lt=1.0)
    clip_norm: float = Field(5.0, gt=0.0)
    clip_scope: Literal["lstm", "global"] = "lstm"
    epochs: int = Field(10, ge=0)
    seed: int = 0
    fusion: Literal["concat", "disentangled"] = "disentangled"
    features: Literal["fused", "semantic", "paralinguistic"] = "fused"
    semantic_source: Literal["aligned", "speech", "text"] = "aligned"
    shared_dim: int = Field(128, gt=0)
    hidden_size: int = Field(128, gt=0)
    shared_query: bool = False
    data_dir: Optional[str] = None
    map_path: Optional[str] = None
    checkpoint_dir: str = "runs/latest"

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            mode=self.fusion, features=self.features, shared_dim=self.shared_dim,
            shared_query=self.shared_query, fusion_dropout=self.dropout,
            hidden_size=self.hidden_size, recurrent_dropout=self.recurrent_dropout,
        )


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def _semi_orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random matrix with orthonormal columns (rows >= cols) or rows (rows < cols)."""
    if rows >= cols:
        q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
        return q * np.sign(np.diag(r))
    return _semi_orthogonal(rng, cols, rows).T


def structured_embeddings(rng: np.random.Generator, rows: int, dim: int,
                          anisotropy: float = 4.0, common_offset: float = 0.5) -> np.ndarray:
    """Unit rows sharing a common direction, with skewed spread of decaying scale per axis."""
    scales = np.geomspace(anisotropy, 1.0, dim)
    spread = (rng.exponential(1.0, (rows, dim)) - 1.0) * scales
    common = rng.standard_normal(dim)
    common *= common_offset * np.linalg.norm(scales) / np.linalg.norm(common)
    vectors = spread + common
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


def _affect_components(rng: np.random.Generator, max_frequency: float) -> np.ndarray:
    """Per dimension: offset plus three (amplitude, frequency, phase) sinusoids."""
    components = np.zeros((len(DIMENSIONS), 10))
    for d in range(len(DIMENSIONS)):
        components[d, 0] = rng.uniform(-0.3, 0.3)
        components[d, 1:4] = rng.uniform(0.2, 0.4, size=3)
        components[d, 4:7] = rng.uniform(0.2, 1.0, size=3) * max_frequency
        components[d, 7:10] = rng.uniform(0.0, 2.0 * np.pi, size=3)
    return components


def _affect_at(components: np.ndarray, times: np.ndarray) -> np.ndarray:
    """len(times) x 3 trajectories clipped to [-1, 1]."""
    times = np.asarray(times, dtype=np.float64)
    out = np.empty((len(times), len(DIMENSIONS)))
    for d, c in enumerate(components):
        waves = c[1:4, None] * np.sin(2.0 * np.pi * c[4:7, None] * times[None, :] + c[7:10, None])
        out[:, d] = c[0] + waves.sum(axis=0)
    return np.clip(out, -1.0, 1.0)


def _rank_scores(values: np.ndarray) -> np.ndarray:
    """Map values to evenly spaced ranks in [-1, 1]."""
    ranks = np.argsort(np.argsort(values, kind="stable"), kind="stable")
    return 2.0 * ranks / max(len(values) - 1, 1) - 1.0


def _synthesize_waveform(rng: np.random.Generator, arousal: np.ndarray, snr_db: float) -> np.ndarray:
    """Noise carrier whose envelope tracks arousal, plus background noise at `snr_db`."""
    envelope = 0.35 * (1.0 + 0.8 * arousal)
    signal = envelope * rng.standard_normal(len(arousal)) * 0.5
    power = np.mean(signal * signal)
    background = rng.standard_normal(len(arousal)) * np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return np.clip(signal + background, -1.0, 1.0)


def _synthesize_words(rng: np.random.Generator, components: np.ndarray, words: List[str],
                      valence_rank: np.ndarray, liking_rank: np.ndarray, duration: float,
                      words_per_second: float) -> List[WordEvent]:
    """Word stream whose tokens sit in the vocabulary bin nearest the current valence and liking."""
    pool = max(1, len(words) // 50)
    events = []
    t = rng.uniform(0.0, 0.5)
    while t < duration:
        gap = rng.exponential(1.0 / words_per_second) + 0.1
        end = min(t + 0.8 * gap, duration)
        if end - t < 1e-3:
            break
        target = _affect_at(components, [t])[0]
        distance = (valence_rank - target[1]) ** 2 + (liking_rank - target[2]) ** 2
        candidates = np.argsort(distance, kind="stable")[:pool]
        token = words[int(candidates[rng.integers(0, len(candidates))])]
        events.append(WordEvent(token, round(float(t), 6), round(float(end), 6)))
        t += gap
    return events


def gen_synthetic(spec: SyntheticSpec, out_dir: PathLike,
                  features: Optional[FeatureConfig] = None) -> Dict[str, Any]:
    """Write a complete synthetic corpus to `out_dir` and return its manifest.

    Layout: speech.vec/.freq and text.vec/.freq (word2vec text + sidecar),
    audio/<segment>.wav, words.csv, labels.csv and manifest.json (which records
    the hidden rotation R with t = R s).
    """
    features = features or FeatureConfig()
    out = ensure_directory(Path(out_dir))
    V, d_t, d_s = spec.vocab_size, spec.text_dim, spec.speech_dim
    words = [f"w{i:04d}" for i in range(V)]

    text = structured_embeddings(counter_rng(spec.seed, _EMBEDDINGS), V, d_t,
                                 spec.anisotropy, spec.common_offset)
    rotation = _semi_orthogonal(counter_rng(spec.seed, _ROTATION), d_t, d_s)
    speech = text @ rotation
    if spec.noise > 0:
        speech = speech + spec.noise * counter_rng(spec.seed, _SPEECH_NOISE).standard_normal((V, d_s))

    ranks = np.arange(1, V + 1)
    save_word2vec_text(EmbeddingTable(words, np.floor(1e6 / ranks), text),
                       out / "text.vec", out / "text.freq")
    save_word2vec_text(EmbeddingTable(words, np.floor(1e5 / ranks), speech),
                       out / "speech.vec", out / "speech.freq")

    directions = _semi_orthogonal(counter_rng(spec.seed, _DIRECTIONS), d_t, 2)
    valence_rank = _rank_scores(text @ directions[:, 0])
    liking_rank = _rank_scores(text @ directions[:, 1])

    splits = {
        "train": [f"train{i:04d}" for i in range(spec.train_segments)],
        "dev": [f"dev{i:04d}" for i in range(spec.dev_segments)],
    }
    duration = features.segment_seconds
    sample_times = np.arange(features.samples_per_segment) / features.sample_rate
    label_times = np.arange(features.label_frames) / features.label_rate

    all_events: Dict[str, List[WordEvent]] = {}
    label_rows = []
    for n, segment_id in enumerate(splits["train"] + splits["dev"]):
        components = _affect_components(counter_rng(spec.seed, _AFFECT, n), spec.max_frequency)
        arousal = _affect_at(components, sample_times)[:, 0]
        samples = _synthesize_waveform(counter_rng(spec.seed, _AUDIO, n), arousal, spec.snr_db)
        save_waveform(out / "audio" / f"{segment_id}.wav", samples, features.sample_rate)
        all_events[segment_id] = _synthesize_words(
            counter_rng(spec.seed, _WORDS, n), components, words, valence_rank, liking_rank,
            duration, spec.words_per_second)
        for k, row in enumerate(_affect_at(components, label_times)):
            label_rows.append([segment_id, k] + [repr(round(float(x), 6)) for x in row])

    save_word_events(out / "words.csv", all_events)
    with open(out / "labels.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["segment_id", "frame_index", *DIMENSIONS])
        writer.writerows(label_rows)

    manifest = {
        "format": DATASET_FORMAT,
        "spec": spec.model_dump(),
        "features": features.model_dump(),
        "rotation": rotation.tolist(),
        "splits": splits,
    }
    save_json_config(manifest, out / "manifest.json")
    logger.info("Wrote %d segments and %d-word tables to %s",
                len(splits["train"]) + len(splits["dev"]), V, out)
    return manifest


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------

@dataclass
class SegmentRecord:
    segment: WaveformSegment
    events: List[WordEvent]
    labels: np.ndarray
    mask: np.ndarray


@dataclass
class Dataset:
    """An on-disk corpus loaded into memory."""
    root: Path
    features: FeatureConfig
    speech: EmbeddingTable
    text: EmbeddingTable
    segments: Dict[str, SegmentRecord]
    splits: Dict[str, List[str]]
    manifest: Dict[str, Any] = field(default_factory=dict)

    def split(self, name: str) -> List[SegmentRecord]:
        if name not in self.splits:
            raise FileNotFoundError(f"split '{name}' not found in {self.root}")
        return [self.segments[s] for s in self.splits[name]]

    @property
    def rotation(self) -> Optional[np.ndarray]:
        rotation = self.manifest.get("rotation")
        return None if rotation is None else np.array(rotation, dtype=np.float64)

    @property
    def heldout_pairs(self) -> int:
        return int(self.manifest.get("spec", {}).get("heldout_pairs", 0))


def _load_labels(path: Path, frames: Dict[str, int]) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Per-recording (gold, present) arrays; `frames` gives each recording's label frame count."""
    labels: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["segment_id", "frame_index", *DIMENSIONS]:
            raise ParseError("expected header 'segment_id,frame_index,arousal,valence,liking'",
                             line=1, path=str(path))
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                index = int(row[1])
                values = [float(x) for x in row[2:5]]
            except (ValueError, IndexError):
                raise ParseError("malformed label row", line=line_no, path=str(path)) from None
            if row[0] not in frames:
                continue
            limit = frames[row[0]]
            if len(row) != 5 or not 0 <= index < limit:
                raise ParseError(f"frame index {row[1]} outside 0..{limit - 1}",
                                 line=line_no, path=str(path))
            if any(abs(v) > 1.0 for v in values):
                raise ParseError("label outside [-1, 1]", line=line_no, path=str(path))
            gold, present = labels.setdefault(row[0], (np.zeros((limit, 3)), np.zeros(limit, dtype=bool)))
            gold[index] = values
            present[index] = True
    return labels


def _cut_recording(samples: np.ndarray, features: FeatureConfig, recording_id: str) -> List[WaveformSegment]:
    segments = segment_waveform(samples, features, prefix=f"{recording_id}.")
    if len(segments) == 1:
        segments[0].segment_id = recording_id
    else:
        logger.info("Recording %s spans %d segments", recording_id, len(segments))
    return segments


def load_dataset(root: PathLike) -> Dataset:
    """Read a corpus written by gen_synthetic (or laid out the same way).

    Recordings longer than one segment are cut into "<id>.0000", "<id>.0001", ...
    with the last one zero-padded and masked; their labels and word events are
    indexed from the start of the recording.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = load_json_config(manifest_path)
    features = FeatureConfig(**manifest.get("features", {}))

    speech = load_word2vec_text(root / "speech.vec", _optional(root / "speech.freq"))
    text = load_word2vec_text(root / "text.vec", _optional(root / "text.freq"))

    recording_splits = {name: list(ids) for name, ids in manifest.get("splits", {}).items()}
    recordings: Dict[str, List[WaveformSegment]] = {}
    durations: Dict[str, float] = {}
    for recording_id in (r for ids in recording_splits.values() for r in ids):
        samples = load_waveform(root / "audio" / f"{recording_id}.wav", features.sample_rate)
        recordings[recording_id] = _cut_recording(samples, features, recording_id)
        durations[recording_id] = len(samples) / features.sample_rate

    events = load_word_events(root / "words.csv", durations)
    labels = _load_labels(root / "labels.csv",
                          {r: len(segs) * features.label_frames for r, segs in recordings.items()})

    frames = features.label_frames
    segments: Dict[str, SegmentRecord] = {}
    for recording_id, pieces in recordings.items():
        if recording_id not in labels:
            raise DataError(f"segment {recording_id} has no labels")
        gold, present = labels[recording_id]
        words = segment_word_events(events.get(recording_id, []), features, len(pieces))
        for i, segment in enumerate(pieces):
            span = slice(i * frames, (i + 1) * frames)
            segments[segment.segment_id] = SegmentRecord(
                segment, words[i], gold[span], present[span] & label_mask(segment, features))

    splits = {name: [s.segment_id for r in ids for s in recordings[r]]
              for name, ids in recording_splits.items()}
    return Dataset(root, features, speech, text, segments, splits, manifest)


def _optional(path: Path) -> Optional[Path]:
    return path if path.exists() else None


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

def alignment_dictionaries(speech: EmbeddingTable, text: EmbeddingTable, config: AlignmentConfig,
                           heldout: int) -> Tuple[Dictionary, Dictionary]:
    """Frequent-word dictionary split into (refinement pairs, held-out evaluation pairs)."""
    full = build_frequency_dictionary(speech, text, config.dictionary_size + heldout)
    return full.split(min(heldout, full.k // 2))


def alignment_report(linear_map: LinearMap, speech: EmbeddingTable, text: EmbeddingTable,
                     gold: Dictionary, rotation: Optional[np.ndarray] = None) -> Dict[str, float]:
    report: Dict[str, float] = {}
    if gold.k:
        report["precision_at_1"] = translation_precision(linear_map, speech, text, gold, k_nn=1)
        report["precision_at_5"] = translation_precision(linear_map, speech, text, gold, k_nn=5)
    if linear_map.d_t == linear_map.d_s:
        report["orthogonality_defect"] = linear_map.orthogonality_defect()
    if rotation is not None and rotation.shape == linear_map.W.shape:
        report["rotation_error"] = float(np.linalg.norm(linear_map.W - rotation))
    return report


def fit_alignment(dataset: Dataset, config: AlignmentConfig,
                  refine: bool = True) -> Tuple[LinearMap, Dict[str, float]]:
    """Adversarial phase, then Procrustes refinement on the frequent shared words."""
    speech, text = normalize(dataset.speech), normalize(dataset.text)
    linear_map = adversarial_train(speech, text, config)
    train_pairs, heldout = alignment_dictionaries(speech, text, config, dataset.heldout_pairs)
    if refine:
        linear_map = refine_with_dictionary(speech, text, train_pairs, linear_map)
    return linear_map, alignment_report(linear_map, speech, text, heldout, dataset.rotation)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Model parameters, optimizer moments, config snapshot and the semantic map."""
    params: Dict[str, np.ndarray]
    config: RunConfig
    features: FeatureConfig
    semantic_dim: int
    linear_map: Optional[np.ndarray] = None
    optimizer: Optional[AdamState] = None
    epoch: int = 0
    best_score: Optional[float] = None

    def save(self, path: PathLike):
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        optimizer = None
        if self.optimizer is not None:
            tensors.update({f"adam.m/{k}": v for k, v in self.optimizer.m.items()})
            tensors.update({f"adam.v/{k}": v for k, v in self.optimizer.v.items()})
            optimizer = {"t": self.optimizer.t, "learning_rate": self.optimizer.learning_rate,
                         "beta1": self.optimizer.beta1, "beta2": self.optimizer.beta2,
                         "epsilon": self.optimizer.epsilon}
        if self.linear_map is not None:
            tensors["map/W"] = self.linear_map
        metadata = {
            "kind": CHECKPOINT_KIND,
            "epoch": self.epoch,
            "best_score": self.best_score,
            "semantic_dim": self.semantic_dim,
            "config": self.config.model_dump(),
            "features": self.features.model_dump(),
            "optimizer": optimizer,
            "rng": {"bit_generator": "Philox", "seed": self.config.seed, "next_epoch": self.epoch + 1},
        }
        save_tensors(path, tensors, metadata)

    @classmethod
    def load(cls, path: PathLike) -> "Checkpoint":
        tensors, metadata = load_tensors(path)
        if metadata.get("kind") != CHECKPOINT_KIND:
            raise ParseError("file is not a model checkpoint", path=str(path))

        def section(prefix: str) -> Dict[str, np.ndarray]:
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        optimizer = None
        if metadata.get("optimizer") is not None:
            optimizer = AdamState(**metadata["optimizer"], m=section("adam.m/"), v=section("adam.v/"))
        return cls(
            params=section("param/"),
            config=RunConfig(**metadata["config"]),
            features=FeatureConfig(**metadata["features"]),
            semantic_dim=int(metadata["semantic_dim"]),
            linear_map=tensors.get("map/W"),
            optimizer=optimizer,
            epoch=int(metadata.get("epoch", 0)),
            best_score=metadata.get("best_score"),
        )


# ---------------------------------------------------------------------------
# Model and sequences
# ---------------------------------------------------------------------------

@dataclass
class PreparedSequence:
    """One segment ready for the model: waveform segment, semantic frames, gold and mask."""
    segment: WaveformSegment
    semantic: np.ndarray
    labels: np.ndarray
    mask: np.ndarray


def _semantic_table(dataset: Dataset, source: str) -> EmbeddingTable:
    return normalize(dataset.text if source == "text" else dataset.speech)


def prepare_sequences(dataset: Dataset, split: str, config: RunConfig,
                      linear_map: Optional[np.ndarray]) -> List[PreparedSequence]:
    """Precompute semantic frames (they carry no trainable parameters) and cut to sequence_length."""
    features = dataset.features
    table = _semantic_table(dataset, config.semantic_source)
    W = linear_map if config.semantic_source == "aligned" else None
    frame_times = np.arange(features.label_frames) / features.label_rate
    steps = min(features.label_frames, config.sequence_length)
    if steps < features.label_frames:
        logger.warning("Using the first %d of %d label frames per segment", steps, features.label_frames)

    prepared = []
    for record in dataset.split(split):
        semantic = extract_semantic(record.events, table, W, frame_times, features.label_rate)
        prepared.append(PreparedSequence(
            record.segment, semantic.frames[:steps],
            record.labels[:steps], record.mask[:steps]))
    return prepared


def _interleave_array(arrays: List[np.ndarray]) -> np.ndarray:
    stacked = np.stack(arrays, axis=1)
    return stacked.reshape(stacked.shape[0] * stacked.shape[1], *stacked.shape[2:])


class AffectPipeline:
    """Paralinguistic CNN plus the fusion/LSTM emotion model, with namespaced parameters."""

    def __init__(self, config: RunConfig, features: FeatureConfig, semantic_dim: int):
        self.config = config
        self.features = features
        self.semantic_dim = semantic_dim
        self.cnn = ParalinguisticCNN(features, counter_rng(config.seed, _CNN_INIT))
        self.model = EmotionModel(config.fusion_config(), semantic_dim, features.paralinguistic_dim,
                                  counter_rng(config.seed, _MODEL_INIT))

    def parameters(self) -> Dict[str, Tensor]:
        named = {f"cnn.{k}": v for k, v in self.cnn.params.items()}
        named.update(self.model.parameters())
        return named

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for name, param in self.parameters().items():
            if name not in arrays:
                raise ParseError(f"checkpoint lacks parameter '{name}'")
            if arrays[name].shape != param.shape:
                raise ParseError(f"parameter '{name}' has shape {arrays[name].shape}, expected {param.shape}")
            param.data = np.array(arrays[name], dtype=np.float64)

    def forward(self, batch: List[PreparedSequence], train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """(T * B) x 3 predictions for a batch of equal-length sequences."""
        steps = len(batch[0].labels)
        x_s = x_p = None
        if self.config.features != "paralinguistic":
            x_s = interleave([seq.semantic for seq in batch])
        if self.config.features != "semantic":
            rate = self.features.cnn_frame_rate
            frames = [pool_frames(paralinguistic_frames(seq.segment, self.cnn), rate,
                                  self.features.label_rate)[:steps]
                      for seq in batch]
            x_p = interleave(frames)
        return self.model.forward(x_s, x_p, batch_size=len(batch), train=train, rng=rng)


def score_sequences(pipeline: AffectPipeline, sequences: List[PreparedSequence],
                    batch_size: int) -> Dict[str, Any]:
    """Dropout-free predictions over `sequences`, scored per dimension on valid frames."""
    preds, golds, masks = [], [], []
    for batch in batched(sequences, batch_size):
        pred = pipeline.forward(batch, train=False).data
        preds.append(pred)
        golds.append(_interleave_array([seq.labels for seq in batch]))
        masks.append(_interleave_array([seq.mask for seq in batch]))
    return score_predictions(np.concatenate(preds), np.concatenate(golds), np.concatenate(masks))


def score_predictions(pred: np.ndarray, gold: np.ndarray, mask: Optional[np.ndarray] = None) -> Dict[str, Any]:
    """{dimension: ccc, ..., "mean": ..., "degenerate": [dimensions scored 0 by convention]}."""
    report = ccc_per_dimension(pred, gold, mask)
    scores: Dict[str, Any] = {name: report[name]["ccc"] for name in DIMENSIONS}
    scores["mean"] = float(np.mean([scores[name] for name in DIMENSIONS]))
    scores["degenerate"] = [name for name in DIMENSIONS if report[name]["degenerate"]]
    return scores


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: List[Dict[str, Any]]
    best_path: Optional[Path]
    last_path: Path
    pipeline: AffectPipeline


def _clip(grads: Dict[str, np.ndarray], config: RunConfig) -> Dict[str, np.ndarray]:
    if config.clip_scope == "global":
        return clip_grad_norm(grads, config.clip_norm)
    lstm = {k: g for k, g in grads.items() if k.startswith("lstm.")}
    clipped = dict(grads)
    clipped.update(clip_grad_norm(lstm, config.clip_norm))
    return clipped


def _run_epoch(pipeline: AffectPipeline, sequences: List[PreparedSequence], config: RunConfig,
               state: AdamState, epoch: int) -> Optional[float]:
    params = pipeline.parameters()
    order = counter_rng(config.seed, _SHUFFLE, epoch).permutation(len(sequences))
    losses = []
    for batch_id, indices in enumerate(batched(order, config.batch_size)):
        batch = [sequences[i] for i in indices]
        gold = _interleave_array([seq.labels for seq in batch])
        mask = _interleave_array([seq.mask for seq in batch])
        try:
            with Tape() as tape:
                pred = pipeline.forward(batch, train=True,
                                        rng=counter_rng(config.seed, _DROPOUT, epoch, batch_id))
                loss = ccc_loss(pred, gold, mask)
        except DegenerateInputError as e:
            logger.warning("Skipping batch %d of epoch %d: %s", batch_id, epoch, e)
            continue
        except NumericError as e:
            raise NumericError(f"epoch {epoch}, batch {batch_id}: {e}", batch_id=batch_id) from e
        grads = _clip(backward(tape, loss).collect(params), config)
        adam_step(params, grads, state)
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else None


def _semantic_dim(dataset: Dataset, config: RunConfig, linear_map: Optional[np.ndarray]) -> int:
    if config.semantic_source == "aligned":
        return linear_map.shape[0]
    return dataset.text.dim if config.semantic_source == "text" else dataset.speech.dim


def _resolve_map(dataset: Dataset, config: RunConfig,
                 alignment: Optional[AlignmentConfig]) -> Optional[np.ndarray]:
    if config.semantic_source != "aligned":
        return None
    if config.map_path:
        W = LinearMap.load(config.map_path).W
        if W.shape[1] != dataset.speech.dim:
            raise DimensionError(f"map {config.map_path} expects {W.shape[1]}-dimensional speech "
                                 f"embeddings, corpus has {dataset.speech.dim}")
        return W
    linear_map, report = fit_alignment(dataset, alignment or AlignmentConfig(seed=config.seed))
    logger.info("Fitted alignment map: %s", report)
    return linear_map.W


def train(config: RunConfig, dataset: Dataset, alignment: Optional[AlignmentConfig] = None,
          resume: Optional[PathLike] = None) -> TrainResult:
    """Train for config.epochs epochs, logging metrics.jsonl and keeping best.ckpt / last.ckpt."""
    out_dir = ensure_directory(Path(config.checkpoint_dir))
    metrics_path = out_dir / "metrics.jsonl"
    best_path, last_path = out_dir / "best.ckpt", out_dir / "last.ckpt"

    restored = Checkpoint.load(resume) if resume else None
    if restored is not None:
        linear_map = restored.linear_map
    else:
        linear_map = _resolve_map(dataset, config, alignment)
        metrics_path.unlink(missing_ok=True)

    semantic_dim = _semantic_dim(dataset, config, linear_map)
    pipeline = AffectPipeline(config, dataset.features, semantic_dim)
    state = AdamState(learning_rate=config.learning_rate)
    start_epoch, best = 1, None
    if restored is not None:
        pipeline.load_arrays(restored.params)
        state = restored.optimizer or state
        state.learning_rate = config.learning_rate
        start_epoch, best = restored.epoch + 1, restored.best_score

    train_seqs = prepare_sequences(dataset, "train", config, linear_map)
    dev_seqs = prepare_sequences(dataset, "dev", config, linear_map) if dataset.splits.get("dev") else []
    if not train_seqs:
        raise DataError("training split is empty")

    history = []
    for epoch in range(start_epoch, config.epochs + 1):
        train_loss = _run_epoch(pipeline, train_seqs, config, state, epoch)
        train_scores = score_sequences(pipeline, train_seqs, config.batch_size)
        dev_scores = score_sequences(pipeline, dev_seqs, config.batch_size) if dev_seqs else None
        selection = (dev_scores or train_scores)["mean"]
        improved = best is None or selection > best
        if improved:
            best = selection

        snapshot = Checkpoint(pipeline.state_arrays(), config, dataset.features, semantic_dim,
                              linear_map, state, epoch, best)
        if improved:
            snapshot.save(best_path)
        snapshot.save(last_path)

        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "train_ccc": {k: train_scores[k] for k in (*DIMENSIONS, "mean")},
            "dev_ccc": None if dev_scores is None else {k: dev_scores[k] for k in (*DIMENSIONS, "mean")},
            "best": improved,
        }
        append_jsonl(record, metrics_path)
        history.append(record)
        logger.info("epoch %d: loss=%s train_ccc=%.4f%s", epoch,
                    "n/a" if train_loss is None else f"{train_loss:.4f}", train_scores["mean"],
                    "" if dev_scores is None else f" dev_ccc={dev_scores['mean']:.4f}")

    return TrainResult(history, best_path if best_path.exists() else None, last_path, pipeline)


def evaluate(checkpoint: Union[PathLike, Checkpoint], dataset: Dataset, split: str = "dev",
             batch_size: Optional[int] = None) -> Dict[str, Any]:
    """Deterministic per-dimension CCC of a checkpoint on one split."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    config = checkpoint.config
    records = dataset.split(split)
    if not records:
        raise DataError(f"split '{split}' is empty")
    pipeline = AffectPipeline(config, checkpoint.features, checkpoint.semantic_dim)
    pipeline.load_arrays(checkpoint.params)
    sequences = prepare_sequences(dataset, split, config, checkpoint.linear_map)
    scores = score_sequences(pipeline, sequences, batch_size or config.batch_size)
    scores["split"] = split
    scores["epoch"] = checkpoint.epoch
    return scores


# ---------------------------------------------------------------------------
# Gradient diagnostics
# ---------------------------------------------------------------------------

def _projected(out_fn, rng: np.random.Generator):
    """Scalar loss sum(out * r) with a fixed random r, so every output element matters."""
    weights = rng.standard_normal(out_fn().shape)
    return lambda *_: (out_fn() * weights).sum()


def _gradient_cases(rng: np.random.Generator) -> Dict[str, Tuple[Any, List[Tensor]]]:
    def p(*shape):
        return parameter(rng.standard_normal(shape))

    cases: Dict[str, Tuple[Any, List[Tensor]]] = {}

    x, k, b = p(2, 9), p(3, 2, 4), p(3)
    stride = int(rng.integers(1, 3))
    padding = ("same", "valid")[int(rng.integers(0, 2))]
    cases["conv1d"] = (_projected(lambda: conv1d(x, k, stride=stride, padding=padding, bias=b), rng),
                       [x, k, b])

    x = p(2, 10)
    stride = int(rng.integers(2, 4))
    cases["maxpool1d"] = (_projected(lambda: maxpool1d(x, 3, stride), rng), [x])

    a, m = p(3, 4), p(4, 2)
    cases["matmul"] = (_projected(lambda: matmul(a, m), rng), [a, m])

    s = p(3, 5)
    axis = int(rng.integers(0, 2))
    cases["softmax"] = (_projected(lambda: softmax(s, axis=axis), rng), [s])

    lstm = LstmParams(3, 4, rng)
    frames = p(5, 3)
    cases["lstm"] = (_projected(lambda: lstm_forward(frames, lstm), rng),
                     [frames, *lstm.params.values()])

    u, w, q_u, q_w = p(3, 4), p(3, 4), p(4), p(4)
    cases["attention_pair"] = (_projected(lambda: attention_pair(u, w, q_u, q_w), rng),
                               [u, w, q_u, q_w])

    fusion = FusionParams(3, 4, 3, rng)
    x_s, x_p = p(2, 3), p(2, 4)
    cases["disentangled_fuse"] = (_projected(lambda: disentangled_fuse(x_s, x_p, fusion), rng),
                                  [x_s, x_p, *fusion.params.values()])

    pred, gold = p(6, 3), rng.standard_normal((6, 3))
    cases["ccc_loss"] = (lambda *_: ccc_loss(pred, gold), [pred])
    return cases


def gradient_suite(cases: int = 20, seed: int = 0) -> Dict[str, float]:
    """Worst relative error of tape vs central-difference gradients per operation."""
    worst: Dict[str, float] = {}
    for case in range(cases):
        for name, (fn, inputs) in _gradient_cases(counter_rng(seed, 30, case)).items():
            worst[name] = max(worst.get(name, 0.0), gradient_check(fn, inputs))
    return worst
