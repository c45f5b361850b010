"""Word-level translation references.

A translation table maps a source word to a probability distribution over
target words. Tables can be estimated from sentence-aligned parallel text
(IBM Model 1 EM), parsed from a lexical-table file, converted from a
bilingual dictionary (uniform weights), or derived from word embeddings
(nearest neighbors by clamped, normalized cosine similarity).
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .textprep import normalize_text

log = logging.getLogger(__name__)

_EMPTY: dict[str, float] = {}


@dataclass(frozen=True)
class TranslationTable:
    """Sparse source word -> {target word: probability} lookup.

    Probabilities are non-negative and, per source word, sum to at most
    1 + 1e-6 (exactly 1 for EM-estimated and dictionary tables). Absent
    source words map to the empty distribution.
    """

    entries: dict[str, dict[str, float]]
    src_lang: str = ""
    tgt_lang: str = ""

    def __post_init__(self) -> None:
        for src, dist in self.entries.items():
            total = 0.0
            for tgt, p in dist.items():
                if p < 0.0:
                    raise ValueError(f"negative probability for ({src!r}, {tgt!r})")
                total += p
            if total > 1.0 + 1e-6:
                raise ValueError(f"probabilities for {src!r} sum to {total} > 1")

    def lookup(self, word: str) -> dict[str, float]:
        """Distribution over target words for ``word`` (empty if unknown)."""
        return dict(self.entries.get(word, _EMPTY))

    def prob(self, target: str, source: str) -> float:
        """Probability of ``source`` translating to ``target``."""
        return self.entries.get(source, _EMPTY).get(target, 0.0)

    def top_k(self, word: str, k: int) -> dict[str, float]:
        """The k most probable targets, renormalized to sum 1.

        Ties are broken by lexicographic order of the target word so the
        truncation is deterministic. Truncating an already truncated
        distribution again with the same k is a no-op.
        """
        dist = self.entries.get(word)
        if not dist:
            return {}
        ranked = sorted(dist.items(), key=lambda it: (-it[1], it[0]))[:k]
        total = sum(p for _, p in ranked)
        if total <= 0.0:
            return {}
        return {t: p / total for t, p in ranked}

    def save(self, path: str | Path) -> None:
        """Write the table as TSV lines "source<TAB>target<TAB>prob"."""
        with open(path, "w", encoding="utf-8") as fh:
            for src in sorted(self.entries):
                for tgt, p in sorted(self.entries[src].items()):
                    fh.write(f"{src}\t{tgt}\t{p:.12g}\n")


def lookup(table: TranslationTable, word: str) -> dict[str, float]:
    return table.lookup(word)


def top_k(table: TranslationTable, word: str, k: int) -> dict[str, float]:
    return table.top_k(word, k)


@dataclass(frozen=True)
class ParallelCorpus:
    """Sentence-aligned word lists; both sides non-empty per pair."""

    pairs: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]

    def __post_init__(self) -> None:
        for i, (src, tgt) in enumerate(self.pairs):
            if not src or not tgt:
                raise ValueError(f"pair {i} has an empty side")

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_sentences(
        cls, pairs: Iterable[tuple[Sequence[str], Sequence[str]]]
    ) -> "ParallelCorpus":
        return cls(tuple((tuple(s), tuple(t)) for s, t in pairs))

    @classmethod
    def load(cls, path: str | Path) -> "ParallelCorpus":
        """Read TSV lines "source sentence<TAB>target sentence".

        Both sides are normalized; pairs with an empty side are dropped.
        """
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"expected two tab-separated sentences, got {line!r}")
            src = normalize_text(parts[0]).split()
            tgt = normalize_text(parts[1]).split()
            if src and tgt:
                pairs.append((tuple(src), tuple(tgt)))
        return cls(tuple(pairs))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for src, tgt in self.pairs:
                fh.write(" ".join(src) + "\t" + " ".join(tgt) + "\n")


def estimate_model1(
    corpus: ParallelCorpus, iterations: int, src_lang: str = "", tgt_lang: str = ""
) -> TranslationTable:
    """Estimate P(target word | source word) with IBM Model 1 EM.

    Initialization is uniform over the target words that co-occur with a
    source word; alignment has no NULL word. Per-source distributions sum
    to 1 after every M-step.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if len(corpus) == 0:
        raise ValueError("empty parallel corpus")

    candidates: dict[str, set[str]] = defaultdict(set)
    for src, tgt in corpus.pairs:
        for s in src:
            candidates[s].update(tgt)
    t: dict[str, dict[str, float]] = {}
    for s, tgts in candidates.items():
        t[s] = {w: 1.0 / len(tgts) for w in sorted(tgts)}

    for _ in range(iterations):
        counts: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
        totals: dict[str, float] = defaultdict(float)
        for src, tgt in corpus.pairs:
            for w_t in tgt:
                denom = sum(t[w_s][w_t] for w_s in src)
                if denom <= 0.0:
                    continue
                for w_s in src:
                    frac = t[w_s][w_t] / denom
                    counts[w_s][w_t] += frac
                    totals[w_s] += frac
        for w_s, row in counts.items():
            total = totals[w_s]
            t[w_s] = {w_t: c / total for w_t, c in row.items()}

    entries = {s: dict(dist) for s, dist in t.items()}
    return TranslationTable(entries=entries, src_lang=src_lang, tgt_lang=tgt_lang)


def model1_log_likelihood(corpus: ParallelCorpus, table: TranslationTable) -> float:
    """Model 1 data log-likelihood up to alignment-count constants.

    Sum over target tokens of log of the average translation probability
    from the source sentence; used to verify EM monotonicity.
    """
    ll = 0.0
    for src, tgt in corpus.pairs:
        for w_t in tgt:
            p = sum(table.prob(w_t, w_s) for w_s in src) / len(src)
            ll += math.log(p) if p > 0.0 else -1e9
    return ll


def load_lexical_table(
    path: str | Path, src_lang: str = "", tgt_lang: str = ""
) -> TranslationTable:
    """Parse a lexical-table file with lines "source target probability".

    Fields may be separated by tabs or spaces. Duplicate (source, target)
    lines have their probabilities summed. Words are normalized so lookups
    match preprocessed text.
    """
    entries: dict[str, dict[str, float]] = defaultdict(dict)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'source target prob', got {line!r}")
            src, tgt, raw = parts
            try:
                p = float(raw)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad probability {raw!r}") from exc
            src = normalize_text(src)
            tgt = normalize_text(tgt)
            if not src or not tgt:
                raise ValueError(f"{path}:{lineno}: word normalizes to nothing")
            entries[src][tgt] = entries[src].get(tgt, 0.0) + p
    return TranslationTable(entries=dict(entries), src_lang=src_lang, tgt_lang=tgt_lang)


def table_from_dictionary(
    dictionary: Mapping[str, Iterable[str]], src_lang: str = "", tgt_lang: str = ""
) -> TranslationTable:
    """Uniformly spread each source word's mass over its dictionary entries.

    Source words with no translations are dropped rather than stored with
    an empty distribution.
    """
    entries: dict[str, dict[str, float]] = {}
    for src, targets in dictionary.items():
        tgts = sorted({normalize_text(t) for t in targets if normalize_text(t)})
        if not tgts:
            continue
        src_n = normalize_text(src)
        if not src_n:
            continue
        entries[src_n] = {t: 1.0 / len(tgts) for t in tgts}
    return TranslationTable(entries=entries, src_lang=src_lang, tgt_lang=tgt_lang)


def load_dictionary(path: str | Path) -> dict[str, set[str]]:
    """Read TSV lines "source<TAB>target" into a word -> word-set map."""
    out: dict[str, set[str]] = defaultdict(set)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'source<TAB>target'")
            out[parts[0]].add(parts[1])
    return dict(out)


@dataclass(frozen=True)
class WordEmbeddingSet:
    """Fixed-dimension word vectors for one language."""

    vectors: dict[str, np.ndarray]
    dim: int = field(init=False)

    def __post_init__(self) -> None:
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent vector shapes: {sorted(dims)}")
        dim = next(iter(dims))[0] if dims else 0
        for w, v in self.vectors.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite vector for {w!r}")
        object.__setattr__(self, "dim", dim)

    @classmethod
    def load(cls, path: str | Path) -> "WordEmbeddingSet":
        """Read the text format: header "count dim", then "word v1 ... vdim"."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        count, dim = (int(x) for x in lines[0].split())
        vectors: dict[str, np.ndarray] = {}
        for line in lines[1 : 1 + count]:
            parts = line.split()
            word = parts[0]
            vec = np.asarray([float(x) for x in parts[1:]], dtype=np.float64)
            if vec.shape[0] != dim:
                raise ValueError(f"vector for {word!r} has dim {vec.shape[0]}, expected {dim}")
            vectors[word] = vec
        return cls(vectors=vectors)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self.vectors)} {self.dim}\n")
            for word in sorted(self.vectors):
                vals = " ".join(f"{x:.8g}" for x in self.vectors[word])
                fh.write(f"{word} {vals}\n")


def table_from_embeddings(
    src: WordEmbeddingSet,
    tgt: WordEmbeddingSet,
    k: int = 5,
    src_lang: str = "",
    tgt_lang: str = "",
) -> TranslationTable:
    """Nearest-neighbor translation table from bilingual embeddings.

    For each source word the k most cosine-similar target words become its
    translations; negative similarities are clamped to 0 and the kept
    weights normalized to sum 1. Words whose vector is zero (or that have
    no positive-similarity neighbor) are skipped; the skip count is logged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if src.dim != tgt.dim:
        raise ValueError(f"embedding dims differ: {src.dim} vs {tgt.dim}")

    tgt_words = sorted(tgt.vectors)
    tgt_mat = np.stack([tgt.vectors[w] for w in tgt_words])
    tgt_norms = np.linalg.norm(tgt_mat, axis=1)
    usable = tgt_norms > 0.0
    skipped = int(np.count_nonzero(~usable))

    entries: dict[str, dict[str, float]] = {}
    for word in sorted(src.vectors):
        vec = src.vectors[word]
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            skipped += 1
            continue
        sims = np.zeros(len(tgt_words))
        sims[usable] = (tgt_mat[usable] @ vec) / (tgt_norms[usable] * norm)
        sims = np.maximum(sims, 0.0)
        order = sorted(range(len(tgt_words)), key=lambda i: (-sims[i], tgt_words[i]))[:k]
        total = float(sims[order].sum())
        if total <= 0.0:
            skipped += 1
            continue
        entries[word] = {tgt_words[i]: float(sims[i]) / total for i in order if sims[i] > 0.0}
    if skipped:
        log.warning("table_from_embeddings skipped %d words (zero or negative vectors)", skipped)
    return TranslationTable(entries=entries, src_lang=src_lang, tgt_lang=tgt_lang)
