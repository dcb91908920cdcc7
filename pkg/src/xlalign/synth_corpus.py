"""Seeded synthetic multilingual parallel corpora.

Every semantic item owns a latent vector shared by all languages. A
language renders it through its own mixing matrix (a shared base plus a
language-specific perturbation), adds its offset and gaussian noise, and
emits a variable-length token sequence with per-token jitter in latent
space. The offsets are the ground-truth language biases.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CorpusConfig, PairingStrategy
from .projector_net import make_pairing
from .sequences import ParallelPair, TokenSequence

FORMAT_TAG = "xlalign-corpus"
FORMAT_VERSION = 1


class CorpusFormatError(ValueError):
    """Malformed corpus file; ``lineno`` points at the offending record."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


class CorpusVersionError(CorpusFormatError):
    pass


@dataclass(frozen=True, eq=False)
class LanguageSpec:
    language_id: str
    mixing: np.ndarray
    offset: np.ndarray
    noise_sigma: float
    length_range: tuple[int, int]
    holdout: bool = False

    def __post_init__(self) -> None:
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid length range {self.length_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if np.linalg.matrix_rank(self.mixing) < self.mixing.shape[1]:
            raise ValueError(f"mixing matrix of {self.language_id!r} is column-rank deficient")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LanguageSpec):
            return NotImplemented
        return (
            self.language_id == other.language_id
            and np.array_equal(self.mixing, other.mixing)
            and np.array_equal(self.offset, other.offset)
            and self.noise_sigma == other.noise_sigma
            and tuple(self.length_range) == tuple(other.length_range)
            and self.holdout == other.holdout
        )


@dataclass(frozen=True, eq=False)
class SemanticItem:
    semantic_id: int
    latent: np.ndarray
    split: str = "train"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SemanticItem):
            return NotImplemented
        return (
            self.semantic_id == other.semantic_id
            and self.split == other.split
            and np.array_equal(self.latent, other.latent)
        )


@dataclass(eq=False)
class Corpus:
    languages: list[LanguageSpec]
    items: list[SemanticItem]
    utterances: dict[tuple[int, str], TokenSequence]
    seed: int
    dim: int
    latent_dim: int
    _by_id: dict[int, SemanticItem] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_id = {it.semantic_id: it for it in self.items}

    @property
    def language_ids(self) -> list[str]:
        return [l.language_id for l in self.languages]

    @property
    def train_languages(self) -> list[str]:
        return [l.language_id for l in self.languages if not l.holdout]

    @property
    def holdout_languages(self) -> list[str]:
        return [l.language_id for l in self.languages if l.holdout]

    @property
    def num_classes(self) -> int:
        return max(it.semantic_id for it in self.items) + 1

    def split_of(self, semantic_id: int) -> str:
        return self._by_id[semantic_id].split

    def item_ids(self, split: str) -> list[int]:
        return [it.semantic_id for it in self.items if it.split == split]

    def utterances_in(self, split: str, languages: list[str] | None = None) -> list[TokenSequence]:
        langs = self.language_ids if languages is None else languages
        return [
            self.utterances[(sid, lang)]
            for sid in self.item_ids(split)
            for lang in langs
            if (sid, lang) in self.utterances
        ]

    def language(self, language_id: str) -> LanguageSpec:
        for spec in self.languages:
            if spec.language_id == language_id:
                return spec
        raise KeyError(language_id)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.dim == other.dim
            and self.latent_dim == other.latent_dim
            and self.languages == other.languages
            and self.items == other.items
            and self.utterances.keys() == other.utterances.keys()
            and all(self.utterances[k] == other.utterances[k] for k in self.utterances)
        )


def generate(config: CorpusConfig, seed: int = 0) -> Corpus:
    """Build a corpus that is a pure function of ``(config, seed)``."""
    cfg = config
    rng = np.random.default_rng(seed)
    d, k = cfg.dim, cfg.latent_dim
    # Shared semantic subspace plus a complementary nuisance subspace in which
    # each language renders the latent its own way.
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    semantic, nuisance = basis[:, :k], basis[:, k:]
    base = semantic @ (rng.standard_normal((k, k)) / np.sqrt(k) + np.eye(k))
    n_nuis = nuisance.shape[1]

    langs: list[LanguageSpec] = []
    all_langs = [(l, False) for l in cfg.languages] + [(l, True) for l in cfg.holdout_languages]
    for lang, holdout in all_langs:
        mixing = base + cfg.mixing_perturbation * nuisance @ rng.standard_normal((n_nuis, k)) / np.sqrt(k)
        offset = cfg.offset_scale * rng.standard_normal(d)
        sigma = cfg.low_resource_sigma if lang in cfg.low_resource_languages else cfg.noise_sigma
        langs.append(LanguageSpec(lang, mixing, offset, float(sigma), (cfg.min_len, cfg.max_len), holdout))

    n_test = max(1, int(round(cfg.n_items * cfg.test_fraction)))
    if n_test >= cfg.n_items:
        raise ValueError("test split would leave no training items")
    test_ids = set(rng.permutation(cfg.n_items)[:n_test].tolist())
    items = [
        SemanticItem(i, rng.standard_normal(k), "test" if i in test_ids else "train")
        for i in range(cfg.n_items)
    ]

    utterances: dict[tuple[int, str], TokenSequence] = {}
    for item in items:
        for spec in langs:
            if spec.holdout and item.split != "test":
                continue
            length = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
            latent = item.latent + cfg.token_jitter * rng.standard_normal((length, k))
            tokens = latent @ spec.mixing.T + spec.offset + spec.noise_sigma * rng.standard_normal((length, d))
            utterances[(item.semantic_id, spec.language_id)] = TokenSequence(
                tokens, np.ones(length, dtype=bool), spec.language_id, item.semantic_id
            )
    return Corpus(langs, items, utterances, seed, d, k)


def _fmt(values: np.ndarray) -> list[str]:
    return [format(float(x), ".17g") for x in np.ravel(values)]


def save(corpus: Corpus, path: str | Path) -> None:
    """Write the line-oriented text format; floats keep 17 significant digits."""
    lines = [
        f"{FORMAT_TAG} {FORMAT_VERSION}",
        f"seed {corpus.seed}",
        f"dims {corpus.dim} {corpus.latent_dim}",
    ]
    for spec in corpus.languages:
        lines.append(
            " ".join(
                ["language", spec.language_id, str(int(spec.holdout)), format(spec.noise_sigma, ".17g"),
                 str(spec.length_range[0]), str(spec.length_range[1])]
                + _fmt(spec.offset)
                + _fmt(spec.mixing)
            )
        )
    for item in corpus.items:
        lines.append(" ".join(["item", str(item.semantic_id), item.split] + _fmt(item.latent)))
    for (sid, lang), seq in corpus.utterances.items():
        mask = "".join("1" if x else "0" for x in seq.mask)
        lines.append(
            " ".join(["utt", str(sid), lang, corpus.split_of(sid), str(seq.length), mask] + _fmt(seq.embeddings))
        )
    n_records = len(lines) - 3
    lines.append(f"end {n_records}")
    Path(path).write_text("\n".join(lines) + "\n")


def _floats(parts: list[str], count: int, lineno: int) -> np.ndarray:
    if len(parts) != count:
        raise CorpusFormatError(f"expected {count} float fields, found {len(parts)}", lineno)
    try:
        return np.array([float(x) for x in parts])
    except ValueError as exc:
        raise CorpusFormatError(str(exc), lineno) from None


def load(path: str | Path) -> Corpus:
    """Parse a corpus file; any defect raises ``CorpusFormatError``."""
    text = Path(path).read_text()
    lines = text.split("\n")
    if not text.endswith("\n"):
        raise CorpusFormatError("file is truncated (no trailing newline)", len(lines))
    lines = lines[:-1]
    if not lines:
        raise CorpusFormatError("empty file", 1)
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT_TAG:
        raise CorpusFormatError(f"not a corpus file (header {lines[0]!r})", 1)
    if head[1] != str(FORMAT_VERSION):
        raise CorpusVersionError(f"unsupported corpus format version {head[1]!r} (expected {FORMAT_VERSION})", 1)

    seed = dim = latent_dim = None
    langs: list[LanguageSpec] = []
    items: list[SemanticItem] = []
    utterances: dict[tuple[int, str], TokenSequence] = {}
    splits: dict[int, str] = {}
    end_count = None
    n_records = 0
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            raise CorpusFormatError("blank line", lineno)
        if end_count is not None:
            raise CorpusFormatError("record after end marker", lineno)
        kind = parts[0]
        try:
            if kind == "seed":
                seed = int(parts[1])
            elif kind == "dims":
                dim, latent_dim = int(parts[1]), int(parts[2])
            elif kind == "end":
                end_count = int(parts[1])
            elif dim is None or latent_dim is None or seed is None:
                raise CorpusFormatError(f"{kind!r} record before seed/dims header", lineno)
            elif kind == "language":
                lang, holdout, sigma, lo, hi = parts[1], parts[2] == "1", float(parts[3]), int(parts[4]), int(parts[5])
                values = _floats(parts[6:], dim + dim * latent_dim, lineno)
                langs.append(
                    LanguageSpec(lang, values[dim:].reshape(dim, latent_dim), values[:dim], sigma, (lo, hi), holdout)
                )
                n_records += 1
            elif kind == "item":
                sid, split = int(parts[1]), parts[2]
                if split not in ("train", "test"):
                    raise CorpusFormatError(f"unknown split {split!r}", lineno)
                items.append(SemanticItem(sid, _floats(parts[3:], latent_dim, lineno), split))
                splits[sid] = split
                n_records += 1
            elif kind == "utt":
                sid, lang, split, length, mask = int(parts[1]), parts[2], parts[3], int(parts[4]), parts[5]
                if splits.get(sid) != split:
                    raise CorpusFormatError(f"utterance split {split!r} disagrees with item {sid}", lineno)
                if len(mask) != length or set(mask) - {"0", "1"}:
                    raise CorpusFormatError("bad mask field", lineno)
                emb = _floats(parts[6:], length * dim, lineno).reshape(length, dim)
                utterances[(sid, lang)] = TokenSequence(emb, np.array([c == "1" for c in mask]), lang, sid)
                n_records += 1
            else:
                raise CorpusFormatError(f"unknown record type {kind!r}", lineno)
        except CorpusFormatError:
            raise
        except (IndexError, ValueError) as exc:
            raise CorpusFormatError(f"malformed {kind!r} record: {exc}", lineno) from None
    if end_count is None:
        raise CorpusFormatError("file is truncated (missing end marker)", len(lines))
    if end_count != n_records:
        raise CorpusFormatError(f"end marker counts {end_count} records, found {n_records}", len(lines))
    if seed is None or dim is None or latent_dim is None:
        raise CorpusFormatError("missing seed or dims header", 2)
    known = {l.language_id for l in langs}
    for sid, lang in utterances:
        if lang not in known or sid not in splits:
            raise CorpusFormatError(f"utterance ({sid}, {lang}) refers to an undeclared item or language")
    return Corpus(langs, items, utterances, seed, dim, latent_dim)


def make_batches(
    corpus: Corpus,
    batch_size: int,
    seed: int,
    strategy: PairingStrategy = "random_pairwise",
    anchor: str = "en",
    epochs: int | None = None,
) -> Iterator[list[tuple[ParallelPair, tuple[bool, bool]]]]:
    """Yield seeded batches of training pairs with their gradient-flow flags.

    Only training items and non-holdout languages are used. The stream runs
    for ``epochs`` passes over the train split, or forever when None.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    train_ids = corpus.item_ids("train")
    if not train_ids:
        raise ValueError("train split is empty")
    langs = corpus.train_languages
    epoch = 0
    while epochs is None or epoch < epochs:
        order = np.random.default_rng([seed, epoch]).permutation(len(train_ids))
        for b, start in enumerate(range(0, len(order), batch_size)):
            chunk = [train_ids[i] for i in order[start : start + batch_size]]
            groups = [
                {lang: corpus.utterances[(sid, lang)] for lang in langs if (sid, lang) in corpus.utterances}
                for sid in chunk
            ]
            rng = np.random.default_rng([seed, epoch, b, 1])
            yield make_pairing(groups, strategy, anchor=anchor, rng=rng)
        epoch += 1
