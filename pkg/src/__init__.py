"""
affect-align - Cross-modal speech emotion recognition.

This package predicts continuous arousal, valence and liking from speech by
combining:
- Paralinguistic features from a raw-waveform CNN
- Semantic features from speech word embeddings mapped into a text space
- Disentangled attention fusion and a one-layer LSTM trained with a CCC loss
"""

__version__ = "1.0.0"
__author__ = "affect-align developers"

from .alignment import AlignmentConfig, LinearMap, adversarial_train, procrustes_refine, svd
from .embeddings_io import EmbeddingTable, load_word2vec_text
from .fusion_recurrence import ccc, ccc_loss, disentangled_fuse
from .harness import RunConfig, SyntheticSpec, evaluate, gen_synthetic, train

__all__ = [
    "AlignmentConfig",
    "LinearMap",
    "adversarial_train",
    "procrustes_refine",
    "svd",
    "EmbeddingTable",
    "load_word2vec_text",
    "ccc",
    "ccc_loss",
    "disentangled_fuse",
    "RunConfig",
    "SyntheticSpec",
    "evaluate",
    "gen_synthetic",
    "train",
]
