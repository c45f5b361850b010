import numpy as np

from clirank.textprep import NO_WORD, TokenizedSequence


def build_seq(query_pieces, doc_pieces, query_words, doc_words, vocab_size=64):
    """Assemble a TokenizedSequence from per-word piece counts, with token
    ids spread deterministically over a small vocabulary."""
    token_ids = [2]
    word_index = [NO_WORD]
    segment = [0]
    counter = 0
    for i, n in enumerate(query_pieces):
        for _ in range(n):
            counter += 1
            token_ids.append(4 + counter % (vocab_size - 4))
            word_index.append(i)
            segment.append(0)
    token_ids.append(3)
    word_index.append(NO_WORD)
    segment.append(0)
    for j, n in enumerate(doc_pieces):
        for _ in range(n):
            counter += 1
            token_ids.append(4 + counter % (vocab_size - 4))
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


def cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
