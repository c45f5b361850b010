"""Text normalization, word tokenization, and a trainable subword vocabulary.

The subword tokenizer is a small byte-pair-encoding variant whose encoded
sequences keep a per-token map back to the originating word, which the
translation attention matrix needs to spread word-level weights over all
pieces of a split word.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
SEP = "[SEP]"

SPECIALS = (PAD, UNK, CLS, SEP)

# word_index value used for [CLS]/[SEP]/[PAD] tokens, which have no source word
NO_WORD = -1

_CONT = "##"


def normalize_text(raw: str) -> str:
    """Lowercase, strip diacritics, and keep only letters.

    Diacritics are removed by canonical (NFD) decomposition followed by
    dropping combining marks. Every non-alphabetic character becomes a
    space and whitespace runs are collapsed. Idempotent.
    """
    lowered = raw.lower()
    decomposed = unicodedata.normalize("NFD", lowered)
    chars = []
    for ch in decomposed:
        if unicodedata.category(ch) == "Mn":
            continue
        chars.append(ch if ch.isalpha() else " ")
    return " ".join("".join(chars).split())


def tokenize_words(text: str, stoplist: frozenset[str] | set[str] = frozenset()) -> list[str]:
    """Split normalized text on whitespace and drop stopwords (no stemming)."""
    return [w for w in text.split() if w not in stoplist]


def load_stoplist(path: str | Path) -> frozenset[str]:
    """Read a stopword file, one word per line, blank lines ignored."""
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        word = line.strip()
        if word:
            words.add(word)
    return frozenset(words)


def _word_symbols(word: str) -> list[str]:
    """Initial symbol sequence of a word: first char bare, rest ##-marked."""
    return [word[0]] + [_CONT + c for c in word[1:]]


def _merge_symbols(a: str, b: str) -> str:
    return a + b.removeprefix(_CONT)


@dataclass(frozen=True)
class Vocab:
    """Immutable subword vocabulary: piece list plus ordered merge rules.

    Piece ids are dense 0..len(pieces)-1 with the four specials first, so
    they can never be produced by a merge. Encoding is deterministic given
    the merge list.
    """

    pieces: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    piece_ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        ids = {p: i for i, p in enumerate(self.pieces)}
        if len(ids) != len(self.pieces):
            raise ValueError("duplicate pieces in vocabulary")
        for sp in SPECIALS:
            if sp not in ids:
                raise ValueError(f"vocabulary missing special piece {sp}")
        object.__setattr__(self, "piece_ids", ids)

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def pad_id(self) -> int:
        return self.piece_ids[PAD]

    @property
    def unk_id(self) -> int:
        return self.piece_ids[UNK]

    @property
    def cls_id(self) -> int:
        return self.piece_ids[CLS]

    @property
    def sep_id(self) -> int:
        return self.piece_ids[SEP]

    def encode_word(self, word: str) -> list[int]:
        """Encode one word into piece ids, mapping unknown symbols to [UNK]."""
        symbols = _word_symbols(word)
        for a, b in self.merges:
            merged: list[str] = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
                    merged.append(_merge_symbols(a, b))
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return [self.piece_ids.get(s, self.unk_id) for s in symbols]

    def save(self, path: str | Path) -> None:
        """Write "pieces N merges M" header, then pieces, then merge rules."""
        lines = [f"pieces {len(self.pieces)} merges {len(self.merges)}"]
        lines.extend(self.pieces)
        lines.extend(f"{a} {b}" for a, b in self.merges)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = lines[0].split()
        if len(header) != 4 or header[0] != "pieces" or header[2] != "merges":
            raise ValueError(f"bad vocab header: {lines[0]!r}")
        n_pieces, n_merges = int(header[1]), int(header[3])
        pieces = tuple(lines[1 : 1 + n_pieces])
        merges = []
        for line in lines[1 + n_pieces : 1 + n_pieces + n_merges]:
            a, b = line.split()
            merges.append((a, b))
        return cls(pieces=pieces, merges=tuple(merges))


def train_subword_vocab(corpus: Mapping[str, int] | Iterable[str], target_size: int) -> Vocab:
    """Train a subword vocabulary by greedy pair merging.

    ``corpus`` is a word multiset (word -> count mapping, or an iterable of
    words). Merging stops when the vocabulary reaches ``target_size`` pieces
    (specials included) or no pair occurs twice. Ties between equally
    frequent pairs are broken by lexicographic order of the pair, so
    training is deterministic.
    """
    counts = Counter(corpus) if not isinstance(corpus, Mapping) else Counter(dict(corpus))
    counts = Counter({w: c for w, c in counts.items() if w})
    if not counts:
        raise ValueError("empty corpus")

    words = {w: _word_symbols(w) for w in counts}
    alphabet = sorted({s for syms in words.values() for s in syms})
    base_size = len(SPECIALS) + len(alphabet)
    if target_size < base_size:
        raise ValueError(
            f"target_size {target_size} below alphabet size {len(alphabet)} plus "
            f"{len(SPECIALS)} specials"
        )

    merges: list[tuple[str, str]] = []
    merged_pieces: list[str] = []
    while base_size + len(merges) < target_size:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for w, syms in words.items():
            c = counts[w]
            for a, b in zip(syms, syms[1:]):
                pair_counts[(a, b)] += c
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        merges.append(best)
        merged_pieces.append(_merge_symbols(*best))
        a, b = best
        for w, syms in words.items():
            if a not in syms:
                continue
            out: list[str] = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(merged_pieces[-1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = out

    pieces = tuple(SPECIALS) + tuple(alphabet) + tuple(merged_pieces)
    return Vocab(pieces=pieces, merges=tuple(merges))


@dataclass(frozen=True)
class TokenizedSequence:
    """Encoded [CLS] query [SEP] document [SEP] pair with word-span map.

    ``word_index[t]`` gives, for every piece, the position of its source
    word in ``words`` (query words first, then document words), or NO_WORD
    for special tokens. ``segment`` is 0 for the query side including its
    [SEP], 1 for the document side.
    """

    token_ids: tuple[int, ...]
    word_index: tuple[int, ...]
    segment: tuple[int, ...]
    words: tuple[str, ...]
    m_q: int
    m_d: int

    def __post_init__(self) -> None:
        if not (len(self.token_ids) == len(self.word_index) == len(self.segment)):
            raise ValueError("token_ids, word_index, segment must share length")
        if len(self.words) != self.m_q + self.m_d:
            raise ValueError("words must hold m_q query words then m_d document words")

    @property
    def m(self) -> int:
        return len(self.token_ids)

    def word_spans(self) -> dict[int, list[int]]:
        """Token positions grouped by source word index (specials omitted)."""
        spans: dict[int, list[int]] = {}
        for t, w in enumerate(self.word_index):
            if w != NO_WORD:
                spans.setdefault(w, []).append(t)
        return spans


def encode_pair(
    query_words: Sequence[str], doc_words: Sequence[str], vocab: Vocab
) -> TokenizedSequence:
    """Encode a query/document word pair as [CLS] q [SEP] d [SEP]."""
    token_ids = [vocab.cls_id]
    word_index = [NO_WORD]
    segment = [0]
    for i, word in enumerate(query_words):
        for pid in vocab.encode_word(word):
            token_ids.append(pid)
            word_index.append(i)
            segment.append(0)
    token_ids.append(vocab.sep_id)
    word_index.append(NO_WORD)
    segment.append(0)
    for j, word in enumerate(doc_words):
        for pid in vocab.encode_word(word):
            token_ids.append(pid)
            word_index.append(len(query_words) + j)
            segment.append(1)
    token_ids.append(vocab.sep_id)
    word_index.append(NO_WORD)
    segment.append(1)
    return TokenizedSequence(
        token_ids=tuple(token_ids),
        word_index=tuple(word_index),
        segment=tuple(segment),
        words=tuple(query_words) + tuple(doc_words),
        m_q=len(query_words),
        m_d=len(doc_words),
    )
