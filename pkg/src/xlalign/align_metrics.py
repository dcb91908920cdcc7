"""Cross-lingual alignment metrics: Recall@1, JSD, centroid distances, PCA.

Representations are mean-pooled utterance vectors grouped by language and
keyed by semantic id. JSD needs discrete distributions, so both languages
are quantized with one shared k-means codebook and their code histograms are
compared.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

# language_id -> (semantic ids, (n, dim) pooled vectors)
Reps = Mapping[str, tuple[Sequence[int], np.ndarray]]


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero vector among {what}")
    return x / norms[:, None]


def recall_at_1(queries: np.ndarray, gallery: np.ndarray, pairing: Sequence[int] | None = None) -> float:
    """Fraction of queries whose cosine-nearest gallery vector is their true pair.

    ``pairing[i]`` is the gallery index paired with query ``i`` (identity by
    default). A tie between the true pair and any other gallery vector counts
    as a miss.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    g = np.atleast_2d(np.asarray(gallery, dtype=float))
    if q.shape[0] == 0 or g.shape[0] == 0:
        raise ValueError("queries and gallery must be nonempty")
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"dim mismatch: queries {q.shape[1]}, gallery {g.shape[1]}")
    idx = np.arange(q.shape[0]) if pairing is None else np.asarray(pairing, dtype=int)
    if idx.shape != (q.shape[0],):
        raise ValueError(f"pairing has {idx.size} entries for {q.shape[0]} queries")
    if pairing is None and q.shape[0] != g.shape[0]:
        raise ValueError(f"size mismatch: {q.shape[0]} queries vs {g.shape[0]} gallery vectors")
    if np.unique(idx).size != idx.size or idx.min() < 0 or idx.max() >= g.shape[0]:
        raise ValueError("pairing must map queries injectively into the gallery")
    sims = _unit_rows(q, "queries") @ _unit_rows(g, "gallery").T
    rows = np.arange(q.shape[0])
    true = sims[rows, idx]
    sims[rows, idx] = -np.inf
    return float(np.mean(true > sims.max(axis=1))) if g.shape[0] > 1 else 1.0


def _canonical_order(x: np.ndarray) -> np.ndarray:
    return np.lexsort(x.T[::-1])


def quantize(points: np.ndarray, k: int, seed: int = 0, iters: int = 20) -> np.ndarray:
    """Shared k-means codes for ``points``.

    Points are clustered in a canonical (lexicographic) order, so the codes
    do not depend on how the caller ordered them.
    """
    if k > points.shape[0]:
        raise ValueError(f"codebook size {k} exceeds the {points.shape[0]} samples")
    order = _canonical_order(points)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, labels = kmeans2(points[order], k, iter=iters, minit="++", seed=np.random.default_rng(seed))
    codes = np.empty(points.shape[0], dtype=int)
    codes[order] = labels
    return codes


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence (natural log) of two histograms."""
    p = np.asarray(p, dtype=float) / np.sum(p)
    q = np.asarray(q, dtype=float) / np.sum(q)
    m = 0.5 * (p + q)

    def kl(x: np.ndarray) -> float:
        nz = x > 0
        return float(np.sum(x[nz] * np.log(x[nz] / m[nz])))

    return 0.5 * (kl(p) + kl(q))


def jsd(
    rep_a: np.ndarray,
    rep_b: np.ndarray,
    codebook_size: int = 16,
    seed: int = 0,
    iters: int = 20,
    smoothing: float = 1.0,
) -> float:
    """JSD between the code-usage histograms of two sets of vectors.

    Both sets are quantized by one k-means codebook fitted on their union;
    histograms get ``smoothing`` pseudo-counts per code.
    """
    a = np.atleast_2d(np.asarray(rep_a, dtype=float))
    b = np.atleast_2d(np.asarray(rep_b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both representation sets must be nonempty")
    if codebook_size < 2:
        raise ValueError("codebook_size must be >= 2")
    codes = quantize(np.vstack([a, b]), codebook_size, seed, iters)
    ha = np.bincount(codes[: a.shape[0]], minlength=codebook_size) + smoothing
    hb = np.bincount(codes[a.shape[0] :], minlength=codebook_size) + smoothing
    return js_divergence(ha, hb)


def centroids(reps: Reps) -> dict[str, np.ndarray]:
    return {lang: np.asarray(x, dtype=float).mean(axis=0) for lang, (_, x) in reps.items()}


def centroid_distances(reps: Reps) -> dict[tuple[str, str], float]:
    cents = centroids(reps)
    langs = list(reps)
    return {
        (la, lb): float(np.linalg.norm(cents[la] - cents[lb])) for la, lb in itertools.combinations(langs, 2)
    }


def centroid_shift(before: Reps, after: Reps) -> dict[tuple[str, str], tuple[float, float]]:
    """Pairwise language-centroid distance before and after a transform."""
    if set(before) != set(after):
        raise ValueError(f"language sets differ: {sorted(before)} vs {sorted(after)}")
    db = centroid_distances(before)
    da = centroid_distances({lang: after[lang] for lang in before})
    return {pair: (db[pair], da[pair]) for pair in db}


def principal_axes(x: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Mean and top-``k`` principal directions (rows) of ``x``, sign-normalized."""
    x = np.asarray(x, dtype=float)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(1, x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    if vals[-1] <= 1e-14 * max(1.0, float(np.abs(x).max()) ** 2):
        raise ValueError("degenerate covariance: all points coincide")
    axes = vecs[:, ::-1][:, :k].T.copy()
    for row in axes:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return mean, axes


def project_2d(reps: Sequence[tuple[np.ndarray, str, int]]) -> list[tuple[float, float, str, int]]:
    """Project tagged vectors onto their top-2 principal components."""
    if len(reps) < 3:
        raise ValueError("need at least 3 vectors to project")
    x = np.stack([np.asarray(v, dtype=float) for v, _, _ in reps])
    if x.shape[1] < 2:
        raise ValueError("vectors must have at least 2 dimensions")
    mean, axes = principal_axes(x, 2)
    xy = (x - mean) @ axes.T
    return [(float(px), float(py), lang, int(sid)) for (px, py), (_, lang, sid) in zip(xy, reps)]


def cluster_separation(reps: Reps) -> float:
    """Mean inter-language centroid distance over mean intra-language spread."""
    cents = centroids(reps)
    inter = np.mean(list(centroid_distances(reps).values()))
    intra = np.mean(
        [np.linalg.norm(np.asarray(x) - cents[lang], axis=1).mean() for lang, (_, x) in reps.items()]
    )
    return float(inter / intra)


@dataclass
class MetricsReport:
    recall_at_1: dict[tuple[str, str], float]
    jsd: dict[tuple[str, str], float]
    centroid_distance: dict[tuple[str, str], float]
    n_items: int
    centroid_reference: dict[tuple[str, str], float] = field(default_factory=dict)

    def pairs(self) -> list[tuple[str, str]]:
        return list(self.jsd)

    def pair_recall(self, pair: tuple[str, str]) -> float:
        a, b = pair
        return 0.5 * (self.recall_at_1[(a, b)] + self.recall_at_1[(b, a)])

    def one_minus_jsd_norm(self, pair: tuple[str, str]) -> float:
        return 1.0 - self.jsd[pair] / math.log(2.0)

    def mean_recall(self, pairs: Sequence[tuple[str, str]] | None = None) -> float:
        pairs = self.pairs() if pairs is None else pairs
        return float(np.mean([self.pair_recall(p) for p in pairs]))

    def mean_one_minus_jsd(self, pairs: Sequence[tuple[str, str]] | None = None) -> float:
        pairs = self.pairs() if pairs is None else pairs
        return float(np.mean([self.one_minus_jsd_norm(p) for p in pairs]))

    def rows(self) -> list[list[str]]:
        out = []
        for pair in self.pairs():
            a, b = pair
            after = self.centroid_distance[pair]
            before = self.centroid_reference.get(pair, after)
            out.append(
                [
                    f"{a}-{b}",
                    repr(self.recall_at_1[(a, b)]),
                    repr(self.recall_at_1[(b, a)]),
                    repr(self.jsd[pair]),
                    repr(self.one_minus_jsd_norm(pair)),
                    repr(before),
                    repr(after),
                ]
            )
        return out

    HEADER = ["pair", "r_at_1_ab", "r_at_1_ba", "jsd", "one_minus_jsd_norm", "centroid_before", "centroid_after"]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            w.writerows(self.rows())

    @classmethod
    def read_csv(cls, path: str | Path) -> MetricsReport:
        recall, js, cent, ref = {}, {}, {}, {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                a, b = row["pair"].split("-", 1)
                recall[(a, b)] = float(row["r_at_1_ab"])
                recall[(b, a)] = float(row["r_at_1_ba"])
                js[(a, b)] = float(row["jsd"])
                ref[(a, b)] = float(row["centroid_before"])
                cent[(a, b)] = float(row["centroid_after"])
        return cls(recall, js, cent, 0, ref)


def evaluate(
    reps: Reps,
    codebook_size: int = 16,
    seed: int = 0,
    iters: int = 20,
    smoothing: float = 1.0,
    reference: Reps | None = None,
) -> MetricsReport:
    """Metrics for every language pair of ``reps``.

    Retrieval for a pair runs over the semantic ids both languages share.
    ``reference`` supplies the representations whose centroid distances are
    reported as the "before" column.
    """
    langs = list(reps)
    keyed = {lang: dict(zip((int(s) for s in ids), np.asarray(x, dtype=float))) for lang, (ids, x) in reps.items()}
    recall: dict[tuple[str, str], float] = {}
    js: dict[tuple[str, str], float] = {}
    n_items = 0
    for la, lb in itertools.combinations(langs, 2):
        shared = sorted(set(keyed[la]) & set(keyed[lb]))
        if not shared:
            raise ValueError(f"languages {la!r} and {lb!r} share no items")
        n_items = max(n_items, len(shared))
        xa = np.stack([keyed[la][s] for s in shared])
        xb = np.stack([keyed[lb][s] for s in shared])
        recall[(la, lb)] = recall_at_1(xa, xb)
        recall[(lb, la)] = recall_at_1(xb, xa)
        k = min(codebook_size, xa.shape[0] + xb.shape[0])
        js[(la, lb)] = jsd(xa, xb, k, seed, iters, smoothing)
    ref = centroid_distances(reference) if reference is not None else {}
    return MetricsReport(recall, js, centroid_distances(reps), n_items, ref)
