"""
Alignment - Map speech embeddings into the text embedding space.

This module learns the linear map W (d_t x d_s) in two phases: a
domain-adversarial game between W and a small discriminator, then a closed-form
orthogonal Procrustes refinement on a frequent-word dictionary, solved with the
one-sided Jacobi SVD implemented here. Embeddings are rows; the map is applied
as z = s @ W.T.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .checkpoint import load_tensors, save_tensors
from .embeddings_io import Dictionary, EmbeddingTable, gather
from .errors import ArgumentError, DimensionError, NumericError, ParseError
from .tensor_core import (
    AdamState, Tape, Tensor, adam_step, as_tensor, backward, clip, counter_rng, dropout,
    glorot_uniform, leaky_relu, log, parameter, sigmoid, zeros,
)

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12


class AlignmentConfig(BaseModel):
    """Adversarial and refinement settings for the speech-to-text map."""
    steps: int = Field(1000, ge=0)
    discriminator_steps: int = Field(5, ge=1)
    batch_size: int = Field(32, ge=1)
    discriminator_lr: float = Field(5e-4, gt=0)
    map_lr: float = Field(2e-3, gt=0)
    discriminator_warmup: int = Field(100, ge=0)  # discriminator-only steps against the initial map
    eval_fraction: float = Field(0.1, ge=0.0, lt=1.0)  # rows withheld for the accuracy metric
    label_smoothing: float = Field(0.1, ge=0.0, lt=0.5)
    orthogonality_beta: float = Field(0.01, ge=0.0)
    hidden_size: int = Field(512, ge=1)
    input_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    leaky_slope: float = Field(0.2, ge=0.0)
    most_frequent: int = Field(0, ge=0)  # 0 samples from the whole vocabulary
    dictionary_size: int = Field(5000, ge=1)
    eval_interval: int = Field(100, ge=1)
    seed: int = 0


@dataclass
class LinearMap:
    """The alignment matrix W (d_t x d_s)."""
    W: np.ndarray
    history: List[Dict[str, float]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise DimensionError(f"alignment map must be a matrix, got shape {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise NumericError("alignment map has non-finite entries")

    @property
    def d_t(self) -> int:
        return self.W.shape[0]

    @property
    def d_s(self) -> int:
        return self.W.shape[1]

    def apply(self, rows: np.ndarray) -> np.ndarray:
        """Map speech rows (n x d_s) into the text space (n x d_t)."""
        return np.asarray(rows, dtype=np.float64) @ self.W.T

    def orthogonality_defect(self) -> float:
        return float(np.max(np.abs(self.W.T @ self.W - np.eye(self.d_s))))

    def save(self, path: Union[str, Path]):
        save_tensors(path, {"W": self.W}, {"kind": "linear_map", "d_t": self.d_t, "d_s": self.d_s})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LinearMap":
        tensors, metadata = load_tensors(path)
        if metadata.get("kind") != "linear_map" or "W" not in tensors:
            raise ParseError("file does not hold an alignment map", path=str(path))
        W = tensors["W"]
        if W.shape != (metadata["d_t"], metadata["d_s"]):
            raise ParseError(f"map shape {W.shape} disagrees with header", path=str(path))
        return cls(W)


def initial_map(d_t: int, d_s: int) -> LinearMap:
    """Identity when the spaces share a dimension, zero-padded identity otherwise."""
    return LinearMap(np.eye(d_t, d_s))


# ---------------------------------------------------------------------------
# SVD (one-sided Jacobi) and Procrustes
# ---------------------------------------------------------------------------

def _round_robin(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint column pairs covering every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left, right = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                left.append(min(a, b))
                right.append(max(a, b))
        rounds.append((np.array(left, dtype=np.int64), np.array(right, dtype=np.int64)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(partial: np.ndarray, size: int) -> np.ndarray:
    """Extend orthonormal columns to a full orthogonal matrix."""
    rank = partial.shape[1]
    if rank == size:
        return partial
    q, _ = np.linalg.qr(np.hstack([partial, np.eye(size)]))
    return np.hstack([partial, q[:, rank:size]])


def svd(M: np.ndarray, tol: Optional[float] = None,
        max_sweeps: int = 60) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full SVD M = U diag(S) V^T by one-sided (Hestenes) Jacobi rotations.

    Returns U (p x p), S (min(p, q), descending, nonnegative) and V (q x q).
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise DimensionError(f"svd expects a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericError("svd input has non-finite entries")
    p, q = M.shape
    if tol is None:
        tol = max(p, q) * np.finfo(np.float64).eps
    if p < q:
        U, S, V = svd(M.T, tol=tol, max_sweeps=max_sweeps)
        return V, S, U

    A = M.copy()
    V = np.eye(q)
    rounds = _round_robin(q)
    off = 0.0
    for sweep in range(max_sweeps):
        off = 0.0
        rotated = False
        for left, right in rounds:
            ai, aj = A[:, left], A[:, right]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            scale = np.sqrt(alpha * beta)
            active = (gamma != 0) & (np.abs(gamma) > tol * scale)
            if not np.any(active):
                continue
            off = max(off, float(np.max(np.abs(gamma[active]) / scale[active])))
            rotated = True
            zeta = np.zeros_like(gamma)
            zeta[active] = (beta[active] - alpha[active]) / (2.0 * gamma[active])
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t[~active] = 0.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            A[:, left], A[:, right] = c * ai - s * aj, s * ai + c * aj
            vi, vj = V[:, left], V[:, right]
            V[:, left], V[:, right] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps", residual=off)

    sigma = np.linalg.norm(A, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, A, V = sigma[order], A[:, order], V[:, order]
    cutoff = max(p, q) * np.finfo(np.float64).eps * (sigma[0] if q else 0.0)
    rank = int(np.sum(sigma > cutoff))
    U = _complete_basis(A[:, :rank] / sigma[:rank], p)
    return U, sigma, V


def procrustes_refine(S_r: np.ndarray, T_r: np.ndarray) -> LinearMap:
    """Orthogonal W* = U V^T from svd(T_r^T S_r); minimises ||W S_r^T - T_r^T||_F."""
    S_r = np.asarray(S_r, dtype=np.float64)
    T_r = np.asarray(T_r, dtype=np.float64)
    if S_r.ndim != 2 or S_r.shape != T_r.shape:
        raise ArgumentError(f"refinement needs equally shaped pairs, got {S_r.shape} and {T_r.shape}")
    if S_r.shape[0] < 1:
        raise ArgumentError("refinement needs at least one pair")
    U, _, V = svd(T_r.T @ S_r)
    return LinearMap(U @ V.T)


def procrustes_objective(W: np.ndarray, S_r: np.ndarray, T_r: np.ndarray) -> float:
    return float(np.linalg.norm(W @ S_r.T - T_r.T))


# ---------------------------------------------------------------------------
# Adversarial phase
# ---------------------------------------------------------------------------

class Discriminator:
    """Two affine layers with leaky ReLU between; sigmoid output = P(speech | z)."""

    def __init__(self, dim: int, hidden: int = 512, input_dropout: float = 0.1,
                 slope: float = 0.2, rng: Optional[np.random.Generator] = None):
        rng = rng or counter_rng(0)
        self.input_dropout = input_dropout
        self.slope = slope
        self.params: Dict[str, Tensor] = {
            "W1": glorot_uniform(rng, (dim, hidden), dim, hidden),
            "b1": zeros((hidden,)),
            "W2": glorot_uniform(rng, (hidden, 1), hidden, 1),
            "b2": zeros((1,)),
        }

    def __call__(self, z, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        p = self.params
        z = dropout(as_tensor(z), self.input_dropout, train, rng)
        hidden = leaky_relu(z @ p["W1"] + p["b1"], self.slope)
        return sigmoid(hidden @ p["W2"] + p["b2"])


def _mapped(W, speech_batch) -> Tensor:
    return as_tensor(speech_batch) @ as_tensor(W).T


def _binary_cross_entropy(prob: Tensor, target: float) -> Tensor:
    prob = clip(prob, PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
    terms = log(prob) * target + log(1.0 - prob) * (1.0 - target)
    return -terms.mean()


def discriminator_loss(disc: Discriminator, W, speech_batch, text_batch,
                       smoothing: float = 0.0, train: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tensor:
    """-mean log P(speech=1 | W s) - mean log P(speech=0 | t), with optional label smoothing."""
    if len(speech_batch) == 0 or len(text_batch) == 0:
        raise ArgumentError("discriminator_loss needs nonempty batches")
    W = as_tensor(W).detach() if isinstance(W, Tensor) else W
    speech_prob = disc(_mapped(W, speech_batch), train=train, rng=rng)
    text_prob = disc(text_batch, train=train, rng=rng)
    return (_binary_cross_entropy(speech_prob, 1.0 - smoothing)
            + _binary_cross_entropy(text_prob, smoothing))


def generator_loss(disc: Discriminator, W, speech_batch, text_batch) -> Tensor:
    """-mean log P(speech=0 | W s) - mean log P(speech=1 | t); only W is updated from it."""
    if len(speech_batch) == 0 or len(text_batch) == 0:
        raise ArgumentError("generator_loss needs nonempty batches")
    speech_prob = disc(_mapped(W, speech_batch))
    text_prob = disc(text_batch)
    return _binary_cross_entropy(speech_prob, 0.0) + _binary_cross_entropy(text_prob, 1.0)


def orthogonality_pullback(W: np.ndarray, beta: float) -> np.ndarray:
    """W <- (1 + beta) W - beta (W W^T) W."""
    return (1.0 + beta) * W - beta * (W @ W.T) @ W


def _as_matrix(table: Union[EmbeddingTable, np.ndarray]) -> np.ndarray:
    return table.matrix if isinstance(table, EmbeddingTable) else np.asarray(table, dtype=np.float64)


def _split_rows(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """(training rows, held-out rows) of the first n; both are all rows when nothing can be withheld."""
    held = int(round(fraction * n))
    if held == 0 or held >= n:
        rows = np.arange(n)
        return rows, rows
    order = rng.permutation(n)
    return np.sort(order[held:]), np.sort(order[:held])


class AdversarialAligner:
    """Alternates discriminator and generator updates on sampled embedding batches.

    The discriminator is first fitted against the initial map for
    `discriminator_warmup` steps, so the step-0 accuracy is that of a trained
    adversary. Accuracy is always measured on a fixed slice of rows that no
    batch is drawn from.
    """

    def __init__(self, speech: Union[EmbeddingTable, np.ndarray],
                 text: Union[EmbeddingTable, np.ndarray], config: AlignmentConfig):
        self.S = _as_matrix(speech)
        self.T = _as_matrix(text)
        self.config = config
        d_s, d_t = self.S.shape[1], self.T.shape[1]
        self.W = parameter(initial_map(d_t, d_s).W)
        self.discriminator = Discriminator(
            d_t, hidden=config.hidden_size, input_dropout=config.input_dropout,
            slope=config.leaky_slope, rng=counter_rng(config.seed, 0))
        self.disc_state = AdamState(learning_rate=config.discriminator_lr)
        self.map_state = AdamState(learning_rate=config.map_lr)
        self.sample_rng = counter_rng(config.seed, 1)
        self.dropout_rng = counter_rng(config.seed, 2)
        self.speech_rows, self.speech_heldout = _split_rows(
            self._pool(self.S), config.eval_fraction, counter_rng(config.seed, 4))
        self.text_rows, self.text_heldout = _split_rows(
            self._pool(self.T), config.eval_fraction, counter_rng(config.seed, 5))
        self.history: List[Dict[str, float]] = []

    def _pool(self, matrix: np.ndarray) -> int:
        limit = self.config.most_frequent
        return len(matrix) if limit == 0 else min(limit, len(matrix))

    def _sample(self) -> Tuple[np.ndarray, np.ndarray]:
        size = self.config.batch_size
        speech = self.S[self.sample_rng.choice(self.speech_rows, size=size)]
        text = self.T[self.sample_rng.choice(self.text_rows, size=size)]
        return speech, text

    def discriminator_accuracy(self) -> float:
        """Balanced accuracy of the discriminator on the held-out rows."""
        speech_prob = self.discriminator(_mapped(self.W.data, self.S[self.speech_heldout])).data
        text_prob = self.discriminator(self.T[self.text_heldout]).data
        return 0.5 * float(np.mean(speech_prob > 0.5) + np.mean(text_prob < 0.5))

    def _check(self, value: float, which: str, step: int):
        if not np.isfinite(value):
            raise NumericError(f"{which} loss diverged at step {step}", batch_id=step)

    def discriminator_step(self, step: int) -> float:
        speech, text = self._sample()
        with Tape() as tape:
            loss = discriminator_loss(self.discriminator, self.W.data, speech, text,
                                      smoothing=self.config.label_smoothing, train=True,
                                      rng=self.dropout_rng)
        value = loss.item()
        self._check(value, "discriminator", step)
        grads = backward(tape, loss).collect(self.discriminator.params)
        adam_step(self.discriminator.params, grads, self.disc_state)
        return value

    def step(self, step: int) -> Tuple[float, float]:
        cfg = self.config
        disc_value = 0.0
        for _ in range(cfg.discriminator_steps):
            disc_value = self.discriminator_step(step)

        speech, text = self._sample()
        with Tape() as tape:
            loss = generator_loss(self.discriminator, self.W, speech, text)
        gen_value = loss.item()
        self._check(gen_value, "generator", step)
        grads = backward(tape, loss).collect({"W": self.W})
        adam_step({"W": self.W}, grads, self.map_state)
        if self.W.shape[0] == self.W.shape[1] and cfg.orthogonality_beta > 0:
            self.W.data = orthogonality_pullback(self.W.data, cfg.orthogonality_beta)
        return disc_value, gen_value

    def train(self) -> LinearMap:
        cfg = self.config
        if cfg.steps:
            for _ in range(cfg.discriminator_warmup):
                self.discriminator_step(0)
            self.history.append({"step": 0, "disc_accuracy": self.discriminator_accuracy()})
        for step in range(1, cfg.steps + 1):
            disc_value, gen_value = self.step(step)
            if step % cfg.eval_interval == 0 or step == cfg.steps:
                accuracy = self.discriminator_accuracy()
                self.history.append({"step": step, "disc_loss": disc_value,
                                     "gen_loss": gen_value, "disc_accuracy": accuracy})
                logger.info("adversarial step %d: L_D=%.4f L_G=%.4f disc_acc=%.3f",
                            step, disc_value, gen_value, accuracy)
        return LinearMap(self.W.data.copy(), history=list(self.history))


def adversarial_train(S: Union[EmbeddingTable, np.ndarray], T: Union[EmbeddingTable, np.ndarray],
                      config: AlignmentConfig) -> LinearMap:
    """Domain-adversarial estimate of W (see AdversarialAligner)."""
    return AdversarialAligner(S, T, config).train()


def refine_with_dictionary(speech: EmbeddingTable, text: EmbeddingTable,
                           dictionary: Dictionary, fallback: LinearMap) -> LinearMap:
    """Procrustes refinement on a dictionary; keeps `fallback` when dimensions differ."""
    if speech.dim != text.dim:
        logger.warning("Skipping refinement: d_t=%d differs from d_s=%d", text.dim, speech.dim)
        return fallback
    if dictionary.k == 0:
        logger.warning("Skipping refinement: empty dictionary")
        return fallback
    S_r = gather(speech, dictionary, "speech")
    T_r = gather(text, dictionary, "text")
    refined = procrustes_refine(S_r, T_r)
    refined.history = list(fallback.history)
    return refined


def translation_precision(W: Union[LinearMap, np.ndarray], S: Union[EmbeddingTable, np.ndarray],
                          T: Union[EmbeddingTable, np.ndarray], gold: Dictionary, k_nn: int = 1) -> float:
    """Fraction of gold pairs whose text row is among the k_nn cosine neighbours of the mapped speech row."""
    if gold.k == 0:
        raise ArgumentError("translation_precision needs a nonempty gold dictionary")
    W = W.W if isinstance(W, LinearMap) else np.asarray(W, dtype=np.float64)
    S, T = _as_matrix(S), _as_matrix(T)
    if W.ndim != 2 or W.shape[1] != S.shape[1]:
        raise DimensionError(f"map of shape {W.shape} cannot apply to {S.shape[1]}-dimensional embeddings")
    k_nn = min(k_nn, len(T))

    mapped = S[gold.speech_indices()] @ W.T
    mapped = mapped / np.maximum(np.linalg.norm(mapped, axis=1, keepdims=True), 1e-12)
    targets = T / np.maximum(np.linalg.norm(T, axis=1, keepdims=True), 1e-12)
    sims = mapped @ targets.T
    top = np.argpartition(-sims, k_nn - 1, axis=1)[:, :k_nn]
    hits = np.any(top == gold.text_indices()[:, None], axis=1)
    return float(np.mean(hits))
