import numpy as np
import pytest

from clirank.attnmat import (
    TranslationAttentionMatrix,
    build_mtr,
    build_placebo,
    raw_translation_matrix,
)
from clirank.textprep import NO_WORD, TokenizedSequence
from clirank.xresource import TranslationTable


def oracle_mtr(seq, table):
    """Brute-force re-implementation of the matrix construction.

    Walks every token pair directly: diagonal ones, then for each pair of
    a query-side token and a document-side token (in either order), the
    probability of the document word given the query word; rows normalized
    last. Kept loop-only and index-only on purpose.
    """
    m = seq.m
    M = [[0.0] * m for _ in range(m)]
    for k in range(m):
        M[k][k] = 1.0
    for i in range(m):
        for j in range(m):
            wi, wj = seq.word_index[i], seq.word_index[j]
            if wi == NO_WORD or wj == NO_WORD:
                continue
            if wi < seq.m_q and wj >= seq.m_q:
                p = table.entries.get(seq.words[wi], {}).get(seq.words[wj], 0.0)
                if p != 0.0:
                    M[i][j] = p
                    M[j][i] = p
    out = np.asarray(M)
    return out / out.sum(axis=1, keepdims=True)


def make_seq(query_pieces, doc_pieces, query_words, doc_words):
    """Assemble a TokenizedSequence from per-word piece counts."""
    token_ids = [2]
    word_index = [NO_WORD]
    segment = [0]
    for i, n in enumerate(query_pieces):
        for _ in range(n):
            token_ids.append(10 + i)
            word_index.append(i)
            segment.append(0)
    token_ids.append(3)
    word_index.append(NO_WORD)
    segment.append(0)
    for j, n in enumerate(doc_pieces):
        for _ in range(n):
            token_ids.append(50 + j)
            word_index.append(len(query_pieces) + j)
            segment.append(1)
    token_ids.append(3)
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


def fuzz_instance(rng):
    """Random sequence plus random sparse table over a small vocabulary."""
    q_vocab = [f"q{i}" for i in range(6)]
    d_vocab = [f"d{i}" for i in range(6)]
    n_q = int(rng.integers(0, 4))
    n_d = int(rng.integers(1, 5))
    q_words = [q_vocab[rng.integers(0, 6)] for _ in range(n_q)]
    d_words = [d_vocab[rng.integers(0, 6)] for _ in range(n_d)]
    q_pieces = [int(rng.integers(1, 4)) for _ in range(n_q)]
    d_pieces = [int(rng.integers(1, 4)) for _ in range(n_d)]
    seq = make_seq(q_pieces, d_pieces, q_words, d_words)
    entries = {}
    for s in q_vocab:
        if rng.random() < 0.3:
            continue
        targets = [t for t in d_vocab if rng.random() < 0.5]
        if not targets:
            continue
        probs = rng.random(len(targets))
        probs = probs / probs.sum() * rng.uniform(0.3, 1.0)
        entries[s] = {t: float(p) for t, p in zip(targets, probs)}
    return seq, TranslationTable(entries=entries)


def single_pair_seq():
    return make_seq([1], [1], ["cat"], ["katze"])


class TestBuildMtr:
    def test_single_pair_weights(self):
        table = TranslationTable(entries={"cat": {"katze": 0.8}})
        mtr = build_mtr(single_pair_seq(), table)
        # tokens: [CLS] cat [SEP] katze [SEP]
        cat, katze = 1, 3
        assert mtr.values[cat, cat] == pytest.approx(1 / 1.8)
        assert mtr.values[cat, katze] == pytest.approx(0.8 / 1.8)
        assert mtr.values[katze, katze] == pytest.approx(1 / 1.8)
        assert mtr.values[katze, cat] == pytest.approx(0.8 / 1.8)

    def test_empty_table_gives_identity(self):
        mtr = build_mtr(single_pair_seq(), TranslationTable(entries={}))
        assert mtr.is_identity()
        np.testing.assert_array_equal(mtr.values, build_placebo(mtr.m).values)

    def test_split_word_block_expansion(self):
        # katze split into two pieces: both receive 0.8 in cat's row
        seq = make_seq([1], [2], ["cat"], ["katze"])
        table = TranslationTable(entries={"cat": {"katze": 0.8}})
        mtr = build_mtr(seq, table)
        cat, ka, tze = 1, 3, 4
        assert mtr.values[cat, cat] == pytest.approx(1 / 2.6)
        assert mtr.values[cat, ka] == pytest.approx(0.8 / 2.6)
        assert mtr.values[cat, tze] == pytest.approx(0.8 / 2.6)
        for piece in (ka, tze):
            assert mtr.values[piece, piece] == pytest.approx(1 / 1.8)
            assert mtr.values[piece, cat] == pytest.approx(0.8 / 1.8)
        # the two pieces of one word give each other nothing
        assert mtr.values[ka, tze] == 0.0

    def test_matches_bruteforce_oracle_fuzzed(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            seq, table = fuzz_instance(rng)
            got = build_mtr(seq, table).values
            want = oracle_mtr(seq, table)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_rows_stochastic_fuzzed(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            seq, table = fuzz_instance(rng)
            mtr = build_mtr(seq, table)
            np.testing.assert_allclose(mtr.values.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(mtr.values >= 0.0)

    def test_prenorm_symmetric_diag_dominant_and_segment_zeros(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            seq, table = fuzz_instance(rng)
            raw = raw_translation_matrix(seq, table)
            np.testing.assert_array_equal(raw, raw.T)
            # unit diagonal bounds every off-diagonal entry in its row
            assert np.all(np.diag(raw) == 1.0)
            assert np.all(raw <= 1.0 + 1e-12)
            # no weight inside a segment (or on specials) besides the diagonal
            for i in range(seq.m):
                for j in range(seq.m):
                    if i == j:
                        continue
                    wi, wj = seq.word_index[i], seq.word_index[j]
                    same_side = (
                        wi == NO_WORD
                        or wj == NO_WORD
                        or (wi < seq.m_q) == (wj < seq.m_q)
                    )
                    if same_side:
                        assert raw[i, j] == 0.0

    def test_repeated_words_each_occurrence_weighted(self):
        seq = make_seq([1, 1], [1], ["cat", "cat"], ["katze"])
        table = TranslationTable(entries={"cat": {"katze": 0.5}})
        mtr = build_mtr(seq, table)
        c1, c2, katze = 1, 2, 4
        assert mtr.values[c1, katze] == pytest.approx(0.5 / 1.5)
        assert mtr.values[c2, katze] == pytest.approx(0.5 / 1.5)
        # katze row: self 1 plus 0.5 from each cat occurrence
        assert mtr.values[katze, c1] == pytest.approx(0.5 / 2.0)
        assert mtr.values[katze, c2] == pytest.approx(0.5 / 2.0)


class TestPlacebo:
    def test_identity_3(self):
        np.testing.assert_array_equal(build_placebo(3).values, np.eye(3))

    def test_m_1(self):
        np.testing.assert_array_equal(build_placebo(1).values, [[1.0]])

    def test_m_zero_rejected(self):
        with pytest.raises(ValueError):
            build_placebo(0)


class TestMatrixType:
    def test_rejects_non_stochastic(self):
        with pytest.raises(ValueError):
            TranslationAttentionMatrix(values=np.array([[0.5, 0.1], [0.0, 1.0]]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            TranslationAttentionMatrix(values=np.array([[1.5, -0.5], [0.0, 1.0]]))

    def test_dump_tsv(self, tmp_path):
        table = TranslationTable(entries={"cat": {"katze": 0.8}})
        mtr = build_mtr(single_pair_seq(), table)
        path = tmp_path / "mtr.tsv"
        mtr.dump_tsv(path, labels=["[CLS]", "cat", "[SEP]", "katze", "[SEP]"])
        lines = path.read_text().splitlines()
        assert lines[0].split("\t")[1] == "[CLS]"
        assert len(lines) == mtr.m + 1
