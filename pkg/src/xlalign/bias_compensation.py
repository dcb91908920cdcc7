"""Per-language bias estimation and subtraction.

Each utterance representation is modeled as a language-neutral part plus a
bias shared by every utterance of its language. The bias is the mean of the
temporally pooled utterances of that language, and compensation subtracts it
from every valid token.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sequences import TokenSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LanguageBias:
    language_id: str
    bias: np.ndarray
    sample_count: int

    def __post_init__(self) -> None:
        bias = np.asarray(self.bias, dtype=float)
        if bias.ndim != 1 or not np.all(np.isfinite(bias)):
            raise ValueError("bias must be a finite 1-D vector")
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")
        object.__setattr__(self, "bias", bias)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LanguageBias):
            return NotImplemented
        return (
            self.language_id == other.language_id
            and self.sample_count == other.sample_count
            and np.array_equal(self.bias, other.bias)
        )


def pool(seq: TokenSequence) -> np.ndarray:
    """Mean of the valid-token embeddings."""
    valid = seq.valid
    if valid.shape[0] == 0:
        raise ValueError("cannot pool a sequence with no valid tokens")
    return valid.mean(axis=0)


def estimate_bias(utterances: Iterable[TokenSequence], language_id: str) -> LanguageBias:
    utts = list(utterances)
    if not utts:
        raise ValueError(f"no utterances to estimate the bias of {language_id!r}")
    others = {u.language_id for u in utts if u.language_id != language_id}
    if others:
        raise ValueError(f"utterances of other languages {sorted(others)} passed for {language_id!r}")
    pooled = np.stack([pool(u) for u in utts])
    return LanguageBias(language_id, pooled.mean(axis=0), len(utts))


def compensate(seq: TokenSequence, bias: LanguageBias) -> TokenSequence:
    """Subtract ``bias`` from every valid token of ``seq``; masked tokens are left as they were."""
    if seq.language_id != bias.language_id:
        raise ValueError(f"bias for {bias.language_id!r} applied to a {seq.language_id!r} utterance")
    if seq.dim != bias.bias.shape[0]:
        raise ValueError(f"dim mismatch: sequence {seq.dim}, bias {bias.bias.shape[0]}")
    emb = seq.embeddings.copy()
    emb[seq.mask] -= bias.bias
    return seq.with_embeddings(emb)


class BiasTable(Mapping[str, LanguageBias]):
    """Immutable mapping from language id to its estimated bias."""

    def __init__(self, biases: Iterable[LanguageBias] = ()):
        table: dict[str, LanguageBias] = {}
        for b in biases:
            if b.language_id in table:
                raise ValueError(f"duplicate language {b.language_id!r} in bias table")
            table[b.language_id] = b
        self._table = table

    def __getitem__(self, key: str) -> LanguageBias:
        return self._table[key]

    def __iter__(self):
        return iter(self._table)

    def __len__(self) -> int:
        return len(self._table)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BiasTable):
            return NotImplemented
        return dict(self._table) == dict(other._table)

    @classmethod
    def estimate(cls, utterances: Iterable[TokenSequence]) -> BiasTable:
        """Group utterances by language and estimate one bias per language."""
        groups: dict[str, list[TokenSequence]] = {}
        for u in utterances:
            groups.setdefault(u.language_id, []).append(u)
        return cls(estimate_bias(groups[lang], lang) for lang in sorted(groups))

    def apply(self, seq: TokenSequence) -> TokenSequence:
        """Compensate ``seq``; languages without a bias get the zero vector and a warning."""
        bias = self._table.get(seq.language_id)
        if bias is None:
            log.warning("no bias estimated for language %r; leaving it uncompensated", seq.language_id)
            return seq
        return compensate(seq, bias)

    def save(self, path: str | Path) -> None:
        lines = []
        for lang in self._table:
            b = self._table[lang]
            fields = [lang, str(b.sample_count)] + [format(x, ".17g") for x in b.bias]
            lines.append("\t".join(fields))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> BiasTable:
        rows = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected language, count and bias values")
            try:
                rows.append(LanguageBias(parts[0], np.array([float(x) for x in parts[2:]]), int(parts[1])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
        return cls(rows)
