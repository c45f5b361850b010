"""Ranking metrics, paired significance testing, layer-wise representation
similarity analysis, and the synthetic bilingual benchmark generator.

MAP and P@10 are rank-based; queries without any relevant document are
excluded. The paired t-test computes its two-tailed p-value from a
regularized-incomplete-beta continued fraction, accurate to about 1e-8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attnmat import build_mtr, build_placebo
from .textprep import TokenizedSequence
from .xresource import ParallelCorpus, TranslationTable


@dataclass(frozen=True)
class Qrels:
    """Binary relevance judgments keyed by (query id, doc id)."""

    grades: dict[tuple[str, str], int]

    def __post_init__(self) -> None:
        for key, grade in self.grades.items():
            if grade not in (0, 1):
                raise ValueError(f"non-binary grade {grade} for {key}")

    def is_relevant(self, qid: str, doc_id: str) -> bool:
        return self.grades.get((qid, doc_id), 0) == 1

    def relevant_docs(self, qid: str) -> set[str]:
        return {d for (q, d), g in self.grades.items() if q == qid and g == 1}

    def n_relevant(self, qid: str) -> int:
        return sum(1 for (q, _), g in self.grades.items() if q == qid and g == 1)

    def query_ids(self) -> list[str]:
        return sorted({q for q, _ in self.grades})

    def save(self, path: str | Path) -> None:
        """TREC qrels format: "qid 0 docid grade"."""
        with open(path, "w", encoding="utf-8") as fh:
            for (qid, doc_id), grade in sorted(self.grades.items()):
                fh.write(f"{qid} 0 {doc_id} {grade}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Qrels":
        grades: dict[tuple[str, str], int] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'qid 0 docid grade'")
            grades[(parts[0], parts[2])] = int(parts[3])
        return cls(grades=grades)


RunLike = Mapping[str, Sequence[tuple[str, float]]]


@dataclass(frozen=True)
class RankedRun:
    """Per query, documents ordered by non-increasing score."""

    rankings: dict[str, tuple[tuple[str, float], ...]]

    def __post_init__(self) -> None:
        for qid, docs in self.rankings.items():
            ids = [d for d, _ in docs]
            if len(ids) != len(set(ids)):
                raise ValueError(f"duplicate doc ids for query {qid}")
            scores = [s for _, s in docs]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise ValueError(f"scores not non-increasing for query {qid}")

    @classmethod
    def from_mapping(cls, run: RunLike) -> "RankedRun":
        return cls(rankings={q: tuple(docs) for q, docs in run.items()})


def _rankings(run: RunLike | RankedRun) -> Mapping[str, Sequence[tuple[str, float]]]:
    return run.rankings if isinstance(run, RankedRun) else run


def average_precision(
    ranking: Sequence[tuple[str, float]], relevant: set[str], cutoff: int
) -> float:
    """Sum of precision at each relevant retrieved rank within the cutoff,
    divided by the total number of relevant documents."""
    hits = 0
    total = 0.0
    for rank, (doc_id, _) in enumerate(ranking[:cutoff], start=1):
        if doc_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def per_query_ap(run: RunLike | RankedRun, qrels: Qrels, cutoff: int = 100) -> dict[str, float]:
    """AP per query; queries with no relevant documents are excluded."""
    rankings = _rankings(run)
    if not rankings:
        raise ValueError("empty run")
    out: dict[str, float] = {}
    for qid, ranking in rankings.items():
        relevant = qrels.relevant_docs(qid)
        if not relevant:
            continue
        out[qid] = average_precision(ranking, relevant, cutoff)
    return out


def map_at(run: RunLike | RankedRun, qrels: Qrels, cutoff: int = 100) -> float:
    """Mean average precision over the top ``cutoff`` documents."""
    aps = per_query_ap(run, qrels, cutoff)
    if not aps:
        raise ValueError("no query in the run has relevant documents")
    return sum(aps.values()) / len(aps)


def per_query_precision(run: RunLike | RankedRun, qrels: Qrels, k: int = 10) -> dict[str, float]:
    rankings = _rankings(run)
    if not rankings:
        raise ValueError("empty run")
    out: dict[str, float] = {}
    for qid, ranking in rankings.items():
        relevant = qrels.relevant_docs(qid)
        if not relevant:
            continue
        hits = sum(1 for doc_id, _ in ranking[:k] if doc_id in relevant)
        out[qid] = hits / k
    return out


def p_at(run: RunLike | RankedRun, qrels: Qrels, k: int = 10) -> float:
    """Precision of the top k retrieved documents (divisor is always k)."""
    vals = per_query_precision(run, qrels, k)
    if not vals:
        raise ValueError("no query in the run has relevant documents")
    return sum(vals.values()) / len(vals)


# ---------------------------------------------------------------------------
# paired t-test
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified
    Lentz's method)."""
    max_iter = 300
    eps = 1e-15
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), accurate to about 1e-8 over the t-test's inputs."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_tailed_p(t: float, dof: int) -> float:
    """Two-tailed p-value of the t distribution via I_x(nu/2, 1/2)."""
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return regularized_incomplete_beta(dof / 2.0, 0.5, x)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool
    degenerate: bool = False


def paired_t_test(
    a: Mapping[str, float], b: Mapping[str, float], alpha: float = 0.05
) -> TTestResult:
    """Two-tailed paired t-test on per-query metrics keyed by query id.

    Zero-variance differences are degenerate: all-zero differences report
    p = 1 (not significant) by convention, a nonzero constant difference
    reports p = 0 with the degenerate flag set.
    """
    if set(a) != set(b):
        raise ValueError("metric dicts must cover the same query ids")
    keys = sorted(a)
    if len(keys) < 2:
        raise ValueError("need at least two paired observations")
    diffs = np.asarray([a[q] - b[q] for q in keys], dtype=np.float64)
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, significant=False, degenerate=True)
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t=t, p=0.0, significant=True, degenerate=True)
    t = mean / (sd / math.sqrt(len(keys)))
    p = t_two_tailed_p(t, len(keys) - 1)
    return TTestResult(t=t, p=p, significant=p < alpha)


# ---------------------------------------------------------------------------
# layer-wise representation similarity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSimReport:
    """Mean cosine similarity per layer for translated and random
    cross-segment word pairs; None marks an empty category."""

    translated: tuple[float | None, ...]
    random: tuple[float | None, ...]
    n_translated_pairs: int
    n_random_pairs: int

    def __post_init__(self) -> None:
        for series in (self.translated, self.random):
            for v in series:
                if v is not None and not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                    raise ValueError(f"cosine {v} outside [-1, 1]")

    @property
    def n_layers(self) -> int:
        return len(self.translated) - 1

    def to_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("layer\ttranslated_sim\trandom_sim\n")
            for layer, (ts, rs) in enumerate(zip(self.translated, self.random)):
                t_str = "NA" if ts is None else f"{ts:.6f}"
                r_str = "NA" if rs is None else f"{rs:.6f}"
                fh.write(f"{layer}\t{t_str}\t{r_str}\n")


def _word_vectors(state: np.ndarray, seq: TokenizedSequence) -> dict[int, np.ndarray]:
    """Mean hidden vector over each word's subword pieces."""
    return {w: state[pos].mean(axis=0) for w, pos in seq.word_spans().items()}


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def layer_similarity_report(
    model,
    eval_pairs: Sequence[TokenizedSequence],
    table: TranslationTable,
    seed: int,
    n_random: int = 10,
    use_placebo: bool = False,
) -> LayerSimReport:
    """Compare layer-wise similarities of translated vs random word pairs.

    For every input, all cross-segment word pairs with positive table
    probability count as translated; ``n_random`` zero-probability pairs
    are sampled per input. Word vectors average their subword pieces.
    """
    rng = np.random.default_rng(seed)
    n_layers = model.config.layers
    sums_t = np.zeros(n_layers + 1)
    sums_r = np.zeros(n_layers + 1)
    count_t = 0
    count_r = 0
    for seq in eval_pairs:
        mtr = build_placebo(seq.m) if use_placebo else build_mtr(seq, table)
        states = [s.value for s in model.forward_states(seq, mtr)]
        translated = []
        untranslated = []
        for qi in range(seq.m_q):
            for dj in range(seq.m_q, seq.m_q + seq.m_d):
                pair = (qi, dj)
                if table.prob(seq.words[dj], seq.words[qi]) > 0.0:
                    translated.append(pair)
                else:
                    untranslated.append(pair)
        chosen_random = untranslated
        if len(untranslated) > n_random:
            picks = rng.choice(len(untranslated), size=n_random, replace=False)
            chosen_random = [untranslated[i] for i in picks]
        for layer, state in enumerate(states):
            vecs = _word_vectors(state, seq)
            for qi, dj in translated:
                sums_t[layer] += _cos(vecs[qi], vecs[dj])
            for qi, dj in chosen_random:
                sums_r[layer] += _cos(vecs[qi], vecs[dj])
        count_t += len(translated)
        count_r += len(chosen_random)
    translated_mean = tuple(
        (s / count_t) if count_t else None for s in sums_t
    )
    random_mean = tuple((s / count_r) if count_r else None for s in sums_r)
    return LayerSimReport(
        translated=translated_mean,
        random=random_mean,
        n_translated_pairs=count_t,
        n_random_pairs=count_r,
    )


# ---------------------------------------------------------------------------
# synthetic bilingual benchmark
# ---------------------------------------------------------------------------


def _letter_code(i: int, width: int = 3) -> str:
    chars = []
    for _ in range(width):
        chars.append(chr(ord("a") + i % 26))
        i //= 26
    return "".join(reversed(chars))


@dataclass(frozen=True)
class SyntheticBenchmark:
    corpus: dict[str, str]
    queries: dict[str, str]
    qrels: Qrels
    table: TranslationTable
    parallel: ParallelCorpus


def required_overlap(query_len: int) -> int:
    return math.ceil(query_len / 2)


def gen_synthetic_clir(
    vocab_size: int,
    n_docs: int,
    n_queries: int,
    noise: float,
    seed: int,
    doc_len_range: tuple[int, int] = (10, 18),
    query_len_range: tuple[int, int] = (3, 5),
    n_parallel: int = 400,
    parallel_len_range: tuple[int, int] = (4, 9),
    max_attempts: int = 200,
) -> SyntheticBenchmark:
    """Generate a bilingual retrieval task with a known word bijection.

    Source word i maps to target word i. Documents are random bags of
    target words; queries are random source word sets, redrawn until at
    least one document is relevant. A query is relevant to a document iff
    at least half (rounded up) of its mapped target words occur there.
    The translation table gives each source word probability 1 - noise on
    its true target plus noise/2 on two random confusers.
    """
    if vocab_size < 3 or n_docs < 1 or n_queries < 1:
        raise ValueError("vocab_size must be >= 3 and counts positive")
    if not 0.0 <= noise < 1.0:
        raise ValueError("noise must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    src_vocab = [f"s{_letter_code(i)}" for i in range(vocab_size)]
    tgt_vocab = [f"t{_letter_code(i)}" for i in range(vocab_size)]

    corpus: dict[str, str] = {}
    doc_words: dict[str, set[str]] = {}
    for j in range(n_docs):
        length = int(rng.integers(doc_len_range[0], doc_len_range[1] + 1))
        words = [tgt_vocab[int(rng.integers(0, vocab_size))] for _ in range(length)]
        doc_id = f"doc{j:05d}"
        corpus[doc_id] = " ".join(words)
        doc_words[doc_id] = set(words)

    queries: dict[str, str] = {}
    grades: dict[tuple[str, str], int] = {}
    for q in range(n_queries):
        qid = f"q{q:04d}"
        for attempt in range(max_attempts):
            length = int(rng.integers(query_len_range[0], query_len_range[1] + 1))
            picks = rng.choice(vocab_size, size=length, replace=False)
            mapped = {tgt_vocab[int(i)] for i in picks}
            need = required_overlap(length)
            relevant = {
                doc_id for doc_id, words in doc_words.items()
                if len(mapped & words) >= need
            }
            if relevant:
                queries[qid] = " ".join(src_vocab[int(i)] for i in picks)
                for doc_id in sorted(relevant):
                    grades[(qid, doc_id)] = 1
                break
        else:
            raise ValueError(
                f"could not draw a query with any relevant document after {max_attempts} tries"
            )

    entries: dict[str, dict[str, float]] = {}
    for i, src in enumerate(src_vocab):
        if noise == 0.0:
            entries[src] = {tgt_vocab[i]: 1.0}
            continue
        others = [k for k in range(vocab_size) if k != i]
        confusers = rng.choice(len(others), size=2, replace=False)
        dist = {tgt_vocab[i]: 1.0 - noise}
        for c in confusers:
            tgt = tgt_vocab[others[int(c)]]
            dist[tgt] = dist.get(tgt, 0.0) + noise / 2.0
        entries[src] = dist

    pairs = []
    for _ in range(n_parallel):
        length = int(rng.integers(parallel_len_range[0], parallel_len_range[1] + 1))
        idx = rng.integers(0, vocab_size, size=length)
        pairs.append(
            (
                tuple(src_vocab[int(i)] for i in idx),
                tuple(tgt_vocab[int(i)] for i in idx),
            )
        )

    return SyntheticBenchmark(
        corpus=corpus,
        queries=queries,
        qrels=Qrels(grades=grades),
        table=TranslationTable(entries=entries, src_lang="src", tgt_lang="tgt"),
        parallel=ParallelCorpus(pairs=tuple(pairs)),
    )
