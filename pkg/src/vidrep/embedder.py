"""Scikit-learn estimator facade over the encoder and the contrastive trainer.

``ContrastiveVideoEmbedder`` follows the fit/transform convention: ``X`` is a
list of (f_i, d) frame-descriptor arrays and ``y`` assigns an integer group
label per video. Videos sharing a non-negative label form positive pairs;
videos labeled -1 (or alone in their group) are the distractor pool. After
fitting, ``transform`` maps sequences to unit-norm video-level embeddings and
``transform_frames`` to refined unit-norm frame sequences, so the estimator
slots into downstream sklearn tooling (nearest neighbors, clustering, ...).
"""

from __future__ import annotations

from itertools import combinations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import encoder as enc
from . import trainer
from .validation import MalformedInputError


class ContrastiveVideoEmbedder(TransformerMixin, BaseEstimator):
    """Self-attention video embedder trained with memory-bank contrastive loss.

    Parameters mirror the encoder and trainer configurations; ``dim`` is
    inferred from the data when left as None.
    """

    def __init__(
        self,
        dim: int | None = None,
        heads: int = 8,
        ffn_dim: int = 2048,
        dropout_rate: float = 0.5,
        loss: str = "circle",
        tau: float = 0.07,
        gamma: float = 256.0,
        margin: float = 0.25,
        epochs: int = 40,
        batch_size: int = 64,
        negatives_per_step: int = 1024,
        bank_capacity: int = 4096,
        pad_length: int = 64,
        base_lr: float = 1e-5,
        seed: int = 0,
    ):
        self.dim = dim
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.dropout_rate = dropout_rate
        self.loss = loss
        self.tau = tau
        self.gamma = gamma
        self.margin = margin
        self.epochs = epochs
        self.batch_size = batch_size
        self.negatives_per_step = negatives_per_step
        self.bank_capacity = bank_capacity
        self.pad_length = pad_length
        self.base_lr = base_lr
        self.seed = seed

    def _validate_sequences(self, X) -> list[np.ndarray]:
        sequences = []
        for i, seq in enumerate(X):
            arr = np.asarray(seq, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise MalformedInputError(f"X[{i}] must be a non-empty (f, d) array")
            sequences.append(arr)
        if not sequences:
            raise MalformedInputError("X is empty")
        dims = {seq.shape[1] for seq in sequences}
        if len(dims) > 1:
            raise MalformedInputError(f"sequences disagree in dimension: {sorted(dims)}")
        return sequences

    def fit(self, X, y):
        """Train the encoder contrastively from group labels.

        y[i] >= 0 groups videos into events (all within-group pairs become
        positive pairs); y[i] == -1 and singleton groups are distractors.
        """
        sequences = self._validate_sequences(X)
        y = np.asarray(y)
        if y.shape != (len(sequences),):
            raise MalformedInputError("y must assign one label per sequence")

        ids = [f"v{i:06d}" for i in range(len(sequences))]
        groups: dict[int, list[str]] = {}
        for vid, label in zip(ids, y):
            label = int(label)
            if label >= 0:
                groups.setdefault(label, []).append(vid)
        core_pairs = []
        paired = set()
        for members in groups.values():
            if len(members) < 2:
                continue
            paired.update(members)
            core_pairs.extend(combinations(members, 2))
        distractors = [vid for vid in ids if vid not in paired]
        dataset = trainer.VideoDataset(
            sequences=dict(zip(ids, sequences)),
            core_pairs=core_pairs,
            distractors=distractors,
        )

        dim = self.dim if self.dim is not None else sequences[0].shape[1]
        self.encoder_config_ = enc.EncoderConfig(
            dim=dim, heads=self.heads, ffn_dim=self.ffn_dim,
            dropout_rate=self.dropout_rate, seed=self.seed,
        )
        config = trainer.TrainingConfig(
            batch_size=self.batch_size, epochs=self.epochs,
            negatives_per_step=min(self.negatives_per_step, len(distractors)),
            bank_capacity=self.bank_capacity, pad_length=self.pad_length,
            base_lr=self.base_lr, loss=self.loss, tau=self.tau,
            gamma=self.gamma, margin=self.margin, seed=self.seed,
        )
        result = trainer.fit(dataset, self.encoder_config_, config)
        self.params_ = result.params
        self.history_ = result.history
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("ContrastiveVideoEmbedder is not fitted")

    def transform(self, X) -> np.ndarray:
        """Unit-norm video-level embeddings, one row per input sequence."""
        self._check_fitted()
        sequences = self._validate_sequences(X)
        rows = []
        for seq in sequences:
            refined = enc.encode_frames(
                self.params_, seq, heads=self.encoder_config_.heads
            )
            rows.append(enc.aggregate_video(refined))
        return np.stack(rows)

    def transform_frames(self, X) -> list[np.ndarray]:
        """Refined frame sequences, rows L2-normalized, shapes preserved."""
        self._check_fitted()
        out = []
        for seq in self._validate_sequences(X):
            refined = enc.encode_frames(
                self.params_, seq, heads=self.encoder_config_.heads
            )
            out.append(refined / np.linalg.norm(refined, axis=1, keepdims=True))
        return out
