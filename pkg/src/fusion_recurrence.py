"""
Fusion and Recurrence - Combine feature streams, run the LSTM, score with CCC.

Frames are rows. Fusion works on a single frame vector or on a whole T x d
matrix at once, since every step is row-wise. The LSTM consumes time-major
interleaved rows (row t * B + b holds frame t of sequence b) so that a
mini-batch advances one time step per matrix product.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .errors import ArgumentError, DegenerateInputError, DimensionError
from .tensor_core import (
    Tensor, as_tensor, concat, dropout, glorot_uniform, matmul, parameter, sigmoid,
    softmax, stack, tanh, zeros,
)

logger = logging.getLogger(__name__)

DIMENSIONS = ("arousal", "valence", "liking")
DEGENERATE_DENOMINATOR = 1e-12


class FusionConfig(BaseModel):
    """Fusion block and recurrent model shape."""
    mode: Literal["concat", "disentangled"] = "disentangled"
    features: Literal["fused", "semantic", "paralinguistic"] = "fused"
    shared_dim: int = Field(128, gt=0)
    shared_query: bool = False
    fusion_dropout: float = Field(0.5, ge=0.0, lt=1.0)
    hidden_size: int = Field(128, gt=0)
    recurrent_dropout: float = Field(0.0, ge=0.0, lt=1.0)


@dataclass
class AffectSequence:
    """T x 3 (arousal, valence, liking) values with a frame mask."""
    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(DIMENSIONS):
            raise DimensionError(f"affect sequence must be T x 3, got {self.values.shape}")
        if self.mask is None:
            self.mask = np.ones(len(self.values), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    def __len__(self) -> int:
        return len(self.values)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def concat_fuse(x_s, x_p) -> Tensor:
    """[x_s, x_p] along the feature axis."""
    return concat([x_s, x_p], axis=-1)


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.ndim == 1:
        return (matmul(x.reshape(1, -1), W.T) + b).reshape(-1)
    return matmul(x, W.T) + b


def _column(t: Tensor, i: int) -> Tensor:
    return t[i:i + 1] if t.ndim == 1 else t[:, i:i + 1]


def attention_weights(u, w, q_u, q_w) -> Tensor:
    """Softmax over the two scaled query scores; shape (2,) or (T, 2)."""
    u, w, q_u, q_w = as_tensor(u), as_tensor(w), as_tensor(q_u), as_tensor(q_w)
    if u.shape != w.shape or q_u.shape != q_w.shape or q_u.shape != u.shape[-1:]:
        raise ArgumentError(
            f"attention inputs {u.shape}, {w.shape} and queries {q_u.shape}, {q_w.shape} disagree")
    scale = 1.0 / np.sqrt(u.shape[-1])
    score_u = (u * q_u).sum(axis=-1, keepdims=True) * scale
    score_w = (w * q_w).sum(axis=-1, keepdims=True) * scale
    return softmax(concat([score_u, score_w], axis=-1), axis=-1)


def attention_pair(u, w, q_u, q_w) -> Tensor:
    """alpha_1 u + alpha_2 w with alpha = softmax(u.q_u / sqrt(d), w.q_w / sqrt(d))."""
    alpha = attention_weights(u, w, q_u, q_w)
    return _column(alpha, 0) * u + _column(alpha, 1) * w


class FusionParams:
    """Projections, per-dimension FC layers and attention queries of the disentangled block.

    Six queries by default (one per branch per attention layer); with
    shared_query both branches of a layer use the same vector.
    """

    LAYERS = (("s", "p"), ("a", "l"), ("z", "v"))

    def __init__(self, semantic_dim: int, paralinguistic_dim: int, shared_dim: int,
                 rng: np.random.Generator, shared_query: bool = False):
        self.shared_dim = shared_dim
        self.shared_query = shared_query
        d = shared_dim
        self.params: Dict[str, Tensor] = {
            "W_s": glorot_uniform(rng, (d, semantic_dim), semantic_dim, d),
            "b_s": zeros((d,)),
            "W_p": glorot_uniform(rng, (d, paralinguistic_dim), paralinguistic_dim, d),
            "b_p": zeros((d,)),
        }
        for branch in "avl":
            self.params[f"W_{branch}"] = glorot_uniform(rng, (d, d), d, d)
            self.params[f"b_{branch}"] = zeros((d,))
        for name in self.query_names():
            self.params[name] = parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=d))

    def query_names(self) -> List[str]:
        if self.shared_query:
            return [f"q_{left}{right}" for left, right in self.LAYERS]
        return [f"q_{branch}" for layer in self.LAYERS for branch in layer]

    def queries(self, layer: int) -> Tuple[Tensor, Tensor]:
        left, right = self.LAYERS[layer]
        if self.shared_query:
            q = self.params[f"q_{left}{right}"]
            return q, q
        return self.params[f"q_{left}"], self.params[f"q_{right}"]


def disentangled_fuse(x_s, x_p, params: FusionParams, return_weights: bool = False):
    """Project both streams to d_u, attend, split into arousal/valence/liking spaces, re-attend.

    With return_weights the three attention weight tensors come back alongside
    the fused output.
    """
    p = params.params
    x_s, x_p = as_tensor(x_s), as_tensor(x_p)
    semantic = _affine(x_s, p["W_s"], p["b_s"])
    paralinguistic = _affine(x_p, p["W_p"], p["b_p"])

    weights = []
    q_left, q_right = params.queries(0)
    weights.append(attention_weights(semantic, paralinguistic, q_left, q_right))
    joint = _column(weights[0], 0) * semantic + _column(weights[0], 1) * paralinguistic

    a = _affine(joint, p["W_a"], p["b_a"])
    v = _affine(joint, p["W_v"], p["b_v"])
    l = _affine(joint, p["W_l"], p["b_l"])

    q_left, q_right = params.queries(1)
    weights.append(attention_weights(a, l, q_left, q_right))
    z = _column(weights[1], 0) * a + _column(weights[1], 1) * l

    q_left, q_right = params.queries(2)
    weights.append(attention_weights(z, v, q_left, q_right))
    fused = _column(weights[2], 0) * z + _column(weights[2], 1) * v

    if return_weights:
        return fused, weights
    return fused


# ---------------------------------------------------------------------------
# Recurrence
# ---------------------------------------------------------------------------

class LstmParams:
    """One-layer LSTM (gate order i, f, g, o) plus an affine H -> 3 head."""

    def __init__(self, input_dim: int, hidden_size: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_size = hidden_size
        H = hidden_size
        bias = np.zeros(4 * H)
        bias[H:2 * H] = 1.0
        self.params: Dict[str, Tensor] = {
            "W_x": glorot_uniform(rng, (input_dim, 4 * H), input_dim, 4 * H),
            "W_h": glorot_uniform(rng, (H, 4 * H), H, 4 * H),
            "b": parameter(bias),
            "W_o": glorot_uniform(rng, (H, len(DIMENSIONS)), H, len(DIMENSIONS)),
            "b_o": zeros((len(DIMENSIONS),)),
        }


def lstm_forward(frames, params: LstmParams, batch_size: int = 1, train: bool = False,
                 rng: Optional[np.random.Generator] = None,
                 recurrent_dropout: float = 0.0) -> Tensor:
    """Run the LSTM from a zero state over (T * B) x d interleaved rows; returns (T * B) x 3."""
    frames = as_tensor(frames)
    p = params.params
    H = params.hidden_size
    if frames.ndim != 2 or frames.shape[1] != params.input_dim:
        raise DimensionError(f"LSTM expects rows of width {params.input_dim}, got {frames.shape}")
    if batch_size < 1 or frames.shape[0] % batch_size or frames.shape[0] == 0:
        raise ArgumentError(f"{frames.shape[0]} rows do not split into batches of {batch_size}")
    steps = frames.shape[0] // batch_size

    mask = None
    if train and recurrent_dropout > 0.0:
        if rng is None:
            raise ArgumentError("recurrent dropout in train mode needs a random generator")
        mask = Tensor((rng.random((batch_size, H)) >= recurrent_dropout) / (1.0 - recurrent_dropout))

    projected = matmul(frames, p["W_x"]) + p["b"]
    h = Tensor(np.zeros((batch_size, H)))
    c = Tensor(np.zeros((batch_size, H)))
    hidden = []
    for t in range(steps):
        recurrent = h if mask is None else h * mask
        gates = projected[t * batch_size:(t + 1) * batch_size] + matmul(recurrent, p["W_h"])
        i = sigmoid(gates[:, 0:H])
        f = sigmoid(gates[:, H:2 * H])
        g = tanh(gates[:, 2 * H:3 * H])
        o = sigmoid(gates[:, 3 * H:4 * H])
        c = f * c + i * g
        h = o * tanh(c)
        hidden.append(h)

    states = concat(hidden, axis=0)
    return matmul(states, p["W_o"]) + p["b_o"]


# ---------------------------------------------------------------------------
# Concordance
# ---------------------------------------------------------------------------

def ccc(x: Sequence[float], y: Sequence[float]) -> float:
    """Concordance correlation coefficient with population moments."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ArgumentError(f"ccc needs two equal-length series, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ArgumentError("ccc needs at least 2 values")
    mx, my = x.mean(), y.mean()
    covariance = np.mean((x - mx) * (y - my))
    denominator = x.var() + y.var() + (mx - my) ** 2
    if denominator < DEGENERATE_DENOMINATOR:
        raise DegenerateInputError(f"ccc denominator {denominator:.3g} is degenerate")
    return float(2.0 * covariance / denominator)


def _valid_rows(mask, count: int) -> np.ndarray:
    if mask is None:
        return np.arange(count)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (count,):
        raise DimensionError(f"mask of shape {mask.shape} for {count} frames")
    return np.flatnonzero(mask)


def ccc_per_dimension(pred, gold, mask=None) -> Dict[str, dict]:
    """CCC for each affect dimension; degenerate dimensions score 0.0 and are flagged."""
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    gold = np.asarray(getattr(gold, "data", gold), dtype=np.float64)
    rows = _valid_rows(mask, len(pred))
    report = {}
    for d, name in enumerate(DIMENSIONS):
        try:
            value, degenerate = ccc(pred[rows, d], gold[rows, d]), False
        except DegenerateInputError:
            logger.warning("CCC for %s is degenerate (constant series); reporting 0.0", name)
            value, degenerate = 0.0, True
        report[name] = {"ccc": value, "degenerate": degenerate}
    return report


def ccc_loss(pred, gold, mask=None) -> Tensor:
    """Mean over dimensions of 1 - CCC, on valid frames only; differentiable in pred."""
    pred = as_tensor(pred)
    gold = as_tensor(gold)
    if pred.shape != gold.shape or pred.ndim != 2 or pred.shape[1] != len(DIMENSIONS):
        raise DimensionError(f"ccc_loss: prediction {pred.shape} vs gold {gold.shape}")
    rows = _valid_rows(mask, pred.shape[0])
    if len(rows) < 2:
        raise ArgumentError("ccc_loss needs at least 2 valid frames")
    x = pred[rows]
    y = gold[rows]

    mean_x = x.mean(axis=0)
    mean_y = y.mean(axis=0)
    dx = x - mean_x
    dy = y - mean_y
    covariance = (dx * dy).mean(axis=0)
    gap = mean_x - mean_y
    denominator = (dx * dx).mean(axis=0) + (dy * dy).mean(axis=0) + gap * gap
    for d, name in enumerate(DIMENSIONS):
        if denominator.data[d] < DEGENERATE_DENOMINATOR:
            raise DegenerateInputError(f"ccc_loss: {name} is degenerate", dimension=name)
    concordance = 2.0 * covariance / denominator
    return (1.0 - concordance).mean()


# ---------------------------------------------------------------------------
# Full recurrent emotion model
# ---------------------------------------------------------------------------

class EmotionModel:
    """Fusion block (or a single feature stream) feeding the LSTM regressor."""

    def __init__(self, config: FusionConfig, semantic_dim: int, paralinguistic_dim: int,
                 rng: np.random.Generator):
        self.config = config
        self.semantic_dim = semantic_dim
        self.paralinguistic_dim = paralinguistic_dim
        self.fusion: Optional[FusionParams] = None
        if config.features == "semantic":
            input_dim = semantic_dim
        elif config.features == "paralinguistic":
            input_dim = paralinguistic_dim
        elif config.mode == "concat":
            input_dim = semantic_dim + paralinguistic_dim
        else:
            self.fusion = FusionParams(semantic_dim, paralinguistic_dim, config.shared_dim,
                                       rng, shared_query=config.shared_query)
            input_dim = config.shared_dim
        self.lstm = LstmParams(input_dim, config.hidden_size, rng)

    def parameters(self) -> Dict[str, Tensor]:
        named = {}
        if self.fusion is not None:
            named.update({f"fusion.{k}": v for k, v in self.fusion.params.items()})
        named.update({f"lstm.{k}": v for k, v in self.lstm.params.items()})
        return named

    def fuse(self, x_s, x_p) -> Tensor:
        if self.config.features == "semantic":
            return as_tensor(x_s)
        if self.config.features == "paralinguistic":
            return as_tensor(x_p)
        if self.fusion is None:
            return concat_fuse(x_s, x_p)
        return disentangled_fuse(x_s, x_p, self.fusion)

    def forward(self, x_s, x_p, batch_size: int = 1, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Interleaved (T * B) x d_s and x d_p rows -> (T * B) x 3 predictions."""
        fused = dropout(self.fuse(x_s, x_p), self.config.fusion_dropout, train, rng)
        return lstm_forward(fused, self.lstm, batch_size=batch_size, train=train, rng=rng,
                            recurrent_dropout=self.config.recurrent_dropout)


def interleave(sequences: Sequence) -> Tensor:
    """Stack B equal-length T x d sequences into (T * B) x d time-major rows."""
    tensors = [as_tensor(s) for s in sequences]
    if not tensors:
        raise ArgumentError("interleave: no sequences given")
    steps, width = tensors[0].shape
    return stack(tensors, axis=1).reshape(steps * len(tensors), width)
