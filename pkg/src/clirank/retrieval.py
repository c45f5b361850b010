"""First-stage retrieval: inverted index, Okapi BM25, and weighted
translated-query scoring.

A cross-language query is expanded per source term into its top-k table
translations; document scores average, over source terms, the weighted
BM25 contributions of those translations. A monolingual query is the
degenerate case with a single weight-1 translation per term.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .xresource import TranslationTable

K1 = 1.2
B = 0.75


@dataclass(frozen=True)
class InvertedIndex:
    """Term postings plus the corpus statistics BM25 needs."""

    postings: dict[str, tuple[tuple[str, int], ...]]
    doc_lengths: dict[str, int]

    def __post_init__(self) -> None:
        for term, plist in self.postings.items():
            ids = [doc for doc, _ in plist]
            if ids != sorted(ids):
                raise ValueError(f"postings for {term!r} not sorted by doc id")

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    @property
    def avg_doc_len(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return sum(self.doc_lengths.values()) / len(self.doc_lengths)

    def term_freq(self, term: str, doc_id: str) -> int:
        for doc, tf in self.postings.get(term, ()):
            if doc == doc_id:
                return tf
        return 0

    def doc_freq(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def save(self, path: str | Path) -> None:
        blob = {
            "postings": {t: list(map(list, p)) for t, p in self.postings.items()},
            "doc_lengths": self.doc_lengths,
        }
        Path(path).write_text(json.dumps(blob), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "InvertedIndex":
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
        postings = {
            t: tuple((doc, int(tf)) for doc, tf in p) for t, p in blob["postings"].items()
        }
        return cls(postings=postings, doc_lengths={k: int(v) for k, v in blob["doc_lengths"].items()})


def build_index(corpus: Mapping[str, Sequence[str]] | Iterable[tuple[str, Sequence[str]]]) -> InvertedIndex:
    """Index preprocessed documents (id -> word list)."""
    items = corpus.items() if isinstance(corpus, Mapping) else corpus
    counts: dict[str, dict[str, int]] = {}
    lengths: dict[str, int] = {}
    for doc_id, words in items:
        if doc_id in lengths:
            raise ValueError(f"duplicate doc id {doc_id!r}")
        lengths[doc_id] = len(words)
        for w in words:
            counts.setdefault(w, {})
            counts[w][doc_id] = counts[w].get(doc_id, 0) + 1
    if not lengths:
        raise ValueError("empty corpus")
    postings = {
        term: tuple(sorted(per_doc.items())) for term, per_doc in counts.items()
    }
    return InvertedIndex(postings=postings, doc_lengths=lengths)


def idf(index: InvertedIndex, term: str) -> float:
    """ln((N - df + 0.5) / (df + 0.5)), clamped at 0."""
    n, df = index.n_docs, index.doc_freq(term)
    return max(math.log((n - df + 0.5) / (df + 0.5)), 0.0)


def bm25_term(index: InvertedIndex, term: str, doc_id: str, k1: float = K1, b: float = B) -> float:
    """Okapi BM25 contribution of one term to one document."""
    tf = index.term_freq(term, doc_id)
    if tf == 0:
        return 0.0
    dl = index.doc_lengths[doc_id]
    norm = k1 * (1.0 - b + b * dl / index.avg_doc_len)
    return idf(index, term) * tf * (k1 + 1.0) / (tf + norm)


@dataclass(frozen=True)
class WeightedQuery:
    """Per source term, a normalized weighting over target-language terms."""

    groups: tuple[tuple[str, tuple[tuple[str, float], ...]], ...]

    def __post_init__(self) -> None:
        for source, weighted in self.groups:
            if any(w < 0.0 for _, w in weighted):
                raise ValueError(f"negative weight under {source!r}")
            total = sum(w for _, w in weighted)
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"weights under {source!r} sum to {total}, expected 1")

    @classmethod
    def monolingual(cls, terms: Sequence[str]) -> "WeightedQuery":
        return cls(groups=tuple((t, ((t, 1.0),)) for t in terms))


def translate_query(query_words: Sequence[str], table: TranslationTable, k: int = 10) -> WeightedQuery:
    """Expand each source term into its top-k translations.

    Terms without any table entry contribute no group at all.
    """
    groups = []
    for term in query_words:
        dist = table.top_k(term, k)
        if dist:
            groups.append((term, tuple(sorted(dist.items()))))
    return WeightedQuery(groups=tuple(groups))


def retrieve(index: InvertedIndex, wq: WeightedQuery, k: int) -> list[tuple[str, float]]:
    """Top-k documents under the averaged weighted-BM25 combination.

    score(d) = (1/|groups|) * sum over groups of
               sum over its translations of weight * bm25(term, d).
    Only documents with positive score are returned; ties break by
    ascending doc id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not wq.groups:
        return []
    scores: dict[str, float] = {}
    share = 1.0 / len(wq.groups)
    for _, weighted in wq.groups:
        for term, weight in weighted:
            if weight == 0.0:
                continue
            plist = index.postings.get(term)
            if not plist:
                continue
            term_idf = idf(index, term)
            if term_idf == 0.0:
                continue
            avgdl = index.avg_doc_len
            for doc_id, tf in plist:
                dl = index.doc_lengths[doc_id]
                norm = K1 * (1.0 - B + B * dl / avgdl)
                s = term_idf * tf * (K1 + 1.0) / (tf + norm)
                scores[doc_id] = scores.get(doc_id, 0.0) + share * weight * s
    ranked = sorted(scores.items(), key=lambda it: (-it[1], it[0]))
    return ranked[:k]


def write_trec_run(path: str | Path, run: Mapping[str, Sequence[tuple[str, float]]], tag: str) -> None:
    """TREC run format: "qid Q0 docid rank score tag", rank starting at 1."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(run):
            for rank, (doc_id, score) in enumerate(run[qid], start=1):
                fh.write(f"{qid} Q0 {doc_id} {rank} {score:.6f} {tag}\n")


def read_trec_run(path: str | Path) -> dict[str, list[tuple[str, float]]]:
    run: dict[str, list[tuple[str, float]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 TREC run fields")
        qid, _, doc_id, _, score, _ = parts
        run.setdefault(qid, []).append((doc_id, float(score)))
    return run


def load_corpus(path: str | Path) -> dict[str, str]:
    """Read a JSON-lines corpus with one {"id": ..., "text": ...} per line."""
    docs: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "id" not in rec or "text" not in rec:
            raise ValueError(f"{path}:{lineno}: record needs 'id' and 'text' fields")
        doc_id = str(rec["id"])
        if doc_id in docs:
            raise ValueError(f"{path}:{lineno}: duplicate doc id {doc_id!r}")
        docs[doc_id] = str(rec["text"])
    return docs


def save_corpus(path: str | Path, docs: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id in docs:
            fh.write(json.dumps({"id": doc_id, "text": docs[doc_id]}) + "\n")
