"""
Embeddings IO - Load, validate, normalise and save embedding tables.

This module handles the speech (S) and text (T) embedding tables in word2vec text
format, optional "<token> <count>" frequency sidecars, and the frequent-word
dictionary that pairs speech rows with text rows for Procrustes refinement.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ArgumentError, DataError, DimensionError, ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Vocabulary, per-word frequencies and a row-per-word embedding matrix."""
    words: Tuple[str, ...]
    frequencies: np.ndarray
    matrix: np.ndarray
    _index: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        words = tuple(self.words)
        object.__setattr__(self, "words", words)
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(words):
            raise DimensionError(f"{len(words)} words but matrix of shape {matrix.shape}")
        frequencies = np.array(self.frequencies, dtype=np.float64)
        if frequencies.shape != (len(words),) or np.any(frequencies < 0):
            raise DataError("frequencies must be one nonnegative count per word")
        index = {}
        for i, word in enumerate(words):
            if word in index:
                raise DataError(f"duplicate token '{word}'")
            index[word] = i
        matrix.setflags(write=False)
        frequencies.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "frequencies", frequencies)
        object.__setattr__(self, "_index", index)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index[token]

    def get_index(self, token: str) -> Optional[int]:
        return self._index.get(token)

    def vector(self, token: str) -> np.ndarray:
        return self.matrix[self._index[token]]


@dataclass(frozen=True)
class Dictionary:
    """Pairs of (speech row, text row) indices."""
    pairs: Tuple[Tuple[int, int], ...]
    shortfall: int = 0  # how many of the requested pairs were unavailable

    def __post_init__(self):
        pairs = tuple((int(s), int(t)) for s, t in self.pairs)
        if len(set(pairs)) != len(pairs):
            raise DataError("dictionary pairs must be unique")
        object.__setattr__(self, "pairs", pairs)

    @property
    def k(self) -> int:
        return len(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def speech_indices(self) -> np.ndarray:
        return np.array([s for s, _ in self.pairs], dtype=np.int64)

    def text_indices(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.int64)

    def split(self, heldout: int) -> Tuple["Dictionary", "Dictionary"]:
        """Split off the last `heldout` pairs (the least frequent ones) for evaluation."""
        if heldout < 0 or heldout > self.k:
            raise ArgumentError(f"cannot hold out {heldout} of {self.k} pairs")
        cut = self.k - heldout
        return Dictionary(self.pairs[:cut]), Dictionary(self.pairs[cut:])


def rank_frequencies(count: int) -> np.ndarray:
    """Counts implied by file order when no sidecar is given (first row most frequent)."""
    return np.arange(count, 0, -1, dtype=np.float64)


def load_frequencies(path: PathLike) -> Dict[str, float]:
    """Read a "<token> <count>" sidecar file."""
    counts: Dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 2:
                raise ParseError("expected '<token> <count>'", line=line_no, path=str(path))
            try:
                count = float(fields[1])
            except ValueError:
                raise ParseError(f"non-numeric count '{fields[1]}'", line=line_no, path=str(path)) from None
            if count < 0:
                raise ParseError("negative count", line=line_no, path=str(path))
            counts[fields[0]] = count
    return counts


def load_word2vec_text(path: PathLike, frequency_path: Optional[PathLike] = None) -> EmbeddingTable:
    """Parse a word2vec text file: header "<count> <dim>" then "token v1 ... vdim" lines."""
    path = Path(path)
    words: List[str] = []
    rows: List[List[float]] = []
    seen = set()

    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        fields = header.split()
        if len(fields) != 2:
            raise ParseError("header must be '<count> <dim>'", line=1, path=str(path))
        try:
            count, dim = int(fields[0]), int(fields[1])
        except ValueError:
            raise ParseError("header must hold two integers", line=1, path=str(path)) from None
        if count < 0 or dim <= 0:
            raise ParseError("header count/dim out of range", line=1, path=str(path))

        line_no = 1
        for line_no, line in enumerate(f, start=2):
            fields = line.rstrip("\n").split(" ")
            fields = [x for x in fields if x != ""]
            if not fields:
                continue
            if len(words) == count:
                raise ParseError(f"more rows than the {count} declared in the header",
                                 line=line_no, path=str(path))
            if len(fields) != dim + 1:
                raise ParseError(f"expected token and {dim} values, got {len(fields) - 1} values",
                                 line=line_no, path=str(path))
            token = fields[0]
            if token in seen:
                raise ParseError(f"duplicate token '{token}'", line=line_no, path=str(path))
            try:
                values = [float(x) for x in fields[1:]]
            except ValueError:
                raise ParseError("non-numeric field", line=line_no, path=str(path)) from None
            seen.add(token)
            words.append(token)
            rows.append(values)

    if len(words) != count:
        raise ParseError(f"header declares {count} rows but file has {len(words)} (at EOF)",
                         line=line_no + 1, path=str(path))

    matrix = np.array(rows, dtype=np.float64).reshape(count, dim)
    if not np.all(np.isfinite(matrix)):
        raise ParseError("non-finite embedding value", path=str(path))

    if frequency_path is not None:
        counts = load_frequencies(frequency_path)
        missing = [w for w in words if w not in counts]
        if missing:
            logger.warning("%d tokens have no sidecar frequency; using 0", len(missing))
        frequencies = np.array([counts.get(w, 0.0) for w in words])
    else:
        frequencies = rank_frequencies(count)

    logger.debug("Loaded %d x %d embeddings from %s", count, dim, path)
    return EmbeddingTable(tuple(words), frequencies, matrix)


def save_word2vec_text(table: EmbeddingTable, path: PathLike, frequency_path: Optional[PathLike] = None):
    """Write the table in word2vec text format (and optionally its frequency sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{len(table)} {table.dim}\n")
        for word, row in zip(table.words, table.matrix):
            f.write(word + " " + " ".join(repr(float(x)) for x in row) + "\n")
    if frequency_path is not None:
        with open(frequency_path, "w", encoding="utf-8") as f:
            for word, count in zip(table.words, table.frequencies):
                f.write(f"{word} {int(count) if float(count).is_integer() else count}\n")


def normalize(table: EmbeddingTable) -> EmbeddingTable:
    """Scale every row to unit L2 norm."""
    norms = np.linalg.norm(table.matrix, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DataError(f"cannot normalise zero-norm row for token '{table.words[zero[0]]}'")
    return EmbeddingTable(table.words, table.frequencies, table.matrix / norms[:, None])


def build_frequency_dictionary(speech: EmbeddingTable, text: EmbeddingTable, k: int) -> Dictionary:
    """Pair the k most frequent tokens shared by both vocabularies.

    Ranking is by summed frequency, descending; ties go to the lexicographically
    smaller token.
    """
    if k < 1:
        raise ArgumentError(f"dictionary size must be >= 1, got {k}")
    shared = [w for w in speech.words if w in text]
    ranked = sorted(
        shared,
        key=lambda w: (-(speech.frequencies[speech.index(w)] + text.frequencies[text.index(w)]), w),
    )
    chosen = ranked[:k]
    shortfall = k - len(chosen)
    if shortfall:
        logger.warning("Only %d shared tokens for a dictionary of %d (%d missing)",
                       len(chosen), k, shortfall)
    return Dictionary(tuple((speech.index(w), text.index(w)) for w in chosen), shortfall=shortfall)


def gather(table: EmbeddingTable, dictionary: Dictionary, side: str) -> np.ndarray:
    """Rows of `table` selected in dictionary order (k x d)."""
    if dictionary.k == 0:
        raise ArgumentError("cannot gather rows for an empty dictionary")
    if side == "speech":
        indices = dictionary.speech_indices()
    elif side == "text":
        indices = dictionary.text_indices()
    else:
        raise ArgumentError(f"side must be 'speech' or 'text', got '{side}'")
    if indices.min() < 0 or indices.max() >= len(table):
        raise IndexError(f"dictionary index out of range for a table of {len(table)} rows")
    return table.matrix[indices].copy()
