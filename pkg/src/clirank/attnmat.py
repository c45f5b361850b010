"""Translation attention matrix construction.

From an encoded query/document pair and a translation table we build an
m x m row-stochastic matrix: every token attends to itself with weight 1,
mutually translated query/document words exchange their translation
probability symmetrically (spread over all subword pieces of both words),
and rows are then normalized. A placebo variant is the identity matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .textprep import TokenizedSequence
from .xresource import TranslationTable


@dataclass(frozen=True)
class TranslationAttentionMatrix:
    """Dense m x m row-stochastic matrix of non-negative weights."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"matrix must be square, got shape {v.shape}")
        if np.any(v < 0.0):
            raise ValueError("matrix has negative entries")
        sums = v.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ValueError("rows must sum to 1")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.values, np.eye(self.m)))

    def dump_tsv(self, path: str | Path, labels: list[str] | None = None) -> None:
        """Write the matrix as TSV with token labels for inspection."""
        labels = labels if labels is not None else [str(i) for i in range(self.m)]
        if len(labels) != self.m:
            raise ValueError("need one label per token")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("token\t" + "\t".join(labels) + "\n")
            for lab, row in zip(labels, self.values):
                fh.write(lab + "\t" + "\t".join(f"{x:.6g}" for x in row) + "\n")


def raw_translation_matrix(seq: TokenizedSequence, table: TranslationTable) -> np.ndarray:
    """The pre-normalization matrix: unit diagonal plus symmetric
    cross-segment translation weights over whole word spans.

    Translation lookups use the words as they were before subword
    splitting; every piece of a query word shares its weight with every
    piece of the translated document word. Special tokens and unknown
    words keep only their diagonal entry.
    """
    m = seq.m
    raw = np.zeros((m, m))
    np.fill_diagonal(raw, 1.0)
    spans = seq.word_spans()
    for qi in range(seq.m_q):
        q_span = spans.get(qi)
        if q_span is None:
            continue
        dist = table.entries.get(seq.words[qi])
        if not dist:
            continue
        for dj in range(seq.m_q, seq.m_q + seq.m_d):
            p = dist.get(seq.words[dj], 0.0)
            if p == 0.0:
                continue
            d_span = spans.get(dj)
            if d_span is None:
                continue
            for ti in q_span:
                for tj in d_span:
                    raw[ti, tj] = p
                    raw[tj, ti] = p
    return raw


def build_mtr(seq: TokenizedSequence, table: TranslationTable) -> TranslationAttentionMatrix:
    """Build the row-normalized translation attention matrix for a pair."""
    raw = raw_translation_matrix(seq, table)
    return TranslationAttentionMatrix(values=raw / raw.sum(axis=1, keepdims=True))


def build_placebo(m: int) -> TranslationAttentionMatrix:
    """The m x m identity matrix used by the placebo control."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return TranslationAttentionMatrix(values=np.eye(m))
