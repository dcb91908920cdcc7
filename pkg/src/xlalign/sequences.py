"""Token sequences and parallel pairs shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """A variable-length run of token embeddings with a validity mask.

    Attributes:
        embeddings: (length, dim) float array.
        mask: (length,) boolean array, True for valid tokens.
        language_id: language tag.
        semantic_id: identity shared by parallel utterances.
    """

    embeddings: np.ndarray
    mask: np.ndarray = field(default=None)  # type: ignore[assignment]
    language_id: str = ""
    semantic_id: int = -1

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=float)
        if emb.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got shape {emb.shape}")
        mask = np.ones(emb.shape[0], dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != (emb.shape[0],):
            raise ValueError(f"mask shape {mask.shape} does not match length {emb.shape[0]}")
        if not mask.any():
            raise ValueError("sequence has no valid tokens")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings contain non-finite values")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "mask", mask)

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def valid(self) -> np.ndarray:
        """Embeddings of the valid tokens only."""
        return self.embeddings[self.mask]

    def with_embeddings(self, embeddings: np.ndarray) -> TokenSequence:
        return TokenSequence(embeddings, self.mask.copy(), self.language_id, self.semantic_id)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            self.language_id == other.language_id
            and self.semantic_id == other.semantic_id
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.embeddings, other.embeddings)
        )


@dataclass(frozen=True)
class ParallelPair:
    """Two utterances with the same semantic content in different languages."""

    first: TokenSequence
    second: TokenSequence

    def __post_init__(self) -> None:
        if self.first.semantic_id != self.second.semantic_id:
            raise ValueError(
                f"semantic ids differ: {self.first.semantic_id} vs {self.second.semantic_id}"
            )
        if self.first.language_id == self.second.language_id:
            raise ValueError(f"both sides are in language {self.first.language_id!r}")

    @property
    def semantic_id(self) -> int:
        return self.first.semantic_id
