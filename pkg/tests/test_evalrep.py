import math

import numpy as np
import pytest
from scipy import stats

from clirank.evalrep import (
    LayerSimReport,
    Qrels,
    RankedRun,
    gen_synthetic_clir,
    layer_similarity_report,
    map_at,
    p_at,
    paired_t_test,
    per_query_ap,
    regularized_incomplete_beta,
    required_overlap,
    t_two_tailed_p,
)
from clirank.model import ModelConfig, assemble_mart
from clirank.textprep import encode_pair, train_subword_vocab

from conftest import build_seq


def oracle_ap(ranking, relevant, cutoff):
    """Brute-force AP: recompute precision at every rank from scratch."""
    ap = 0.0
    for k in range(1, min(cutoff, len(ranking)) + 1):
        doc_k = ranking[k - 1][0]
        if doc_k not in relevant:
            continue
        retrieved = [d for d, _ in ranking[:k]]
        prec = sum(1 for d in retrieved if d in relevant) / k
        ap += prec
    return ap / len(relevant)


def random_run_and_qrels(rng, n_queries=4, n_docs=30):
    run = {}
    grades = {}
    for q in range(n_queries):
        qid = f"q{q}"
        docs = [f"d{i}" for i in range(n_docs)]
        rng.shuffle(docs)
        scores = np.sort(rng.random(n_docs))[::-1]
        run[qid] = [(d, float(s)) for d, s in zip(docs, scores)]
        n_rel = int(rng.integers(1, 6))
        for d in rng.choice(docs, size=n_rel, replace=False):
            grades[(qid, str(d))] = 1
    return run, Qrels(grades=grades)


class TestAveragePrecision:
    def test_worked_example(self):
        run = {"q": [("d1", 3.0), ("d2", 2.0), ("d3", 1.0)]}
        qrels = Qrels(grades={("q", "d1"): 1, ("q", "d3"): 1})
        assert map_at(run, qrels) == pytest.approx((1 + 2 / 3) / 2)
        assert map_at(run, qrels) == pytest.approx(0.8333, abs=1e-4)

    def test_perfect_ranking(self):
        run = {"q": [("d1", 2.0), ("d2", 1.0), ("d3", 0.5)]}
        qrels = Qrels(grades={("q", "d1"): 1, ("q", "d2"): 1})
        assert map_at(run, qrels) == 1.0

    def test_no_relevant_retrieved_within_cutoff(self):
        run = {"q": [(f"d{i}", float(-i)) for i in range(200)]}
        qrels = Qrels(grades={("q", "d150"): 1})
        assert map_at(run, qrels, cutoff=100) == 0.0

    def test_matches_bruteforce_on_random_instances(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            run, qrels = random_run_and_qrels(rng)
            got = per_query_ap(run, qrels, cutoff=20)
            for qid, ranking in run.items():
                relevant = qrels.relevant_docs(qid)
                if not relevant:
                    continue
                assert got[qid] == pytest.approx(
                    oracle_ap(ranking, relevant, 20), abs=1e-12
                )

    def test_queries_without_relevant_docs_excluded(self):
        run = {
            "q1": [("d1", 2.0)],
            "q2": [("d9", 1.0)],
        }
        qrels = Qrels(grades={("q1", "d1"): 1})
        assert map_at(run, qrels) == 1.0

    def test_empty_run_rejected(self):
        with pytest.raises(ValueError):
            map_at({}, Qrels(grades={("q", "d"): 1}))

    def test_rank_based_invariance(self):
        rng = np.random.default_rng(3)
        run, qrels = random_run_and_qrels(rng)
        transformed = {
            q: [(d, math.exp(3.0 * s) + 1) for d, s in docs] for q, docs in run.items()
        }
        assert map_at(run, qrels) == pytest.approx(map_at(transformed, qrels))
        assert p_at(run, qrels) == pytest.approx(p_at(transformed, qrels))


class TestPrecisionAtK:
    def test_three_in_top_ten(self):
        run = {"q": [(f"d{i}", float(20 - i)) for i in range(20)]}
        qrels = Qrels(grades={("q", "d0"): 1, ("q", "d5"): 1, ("q", "d9"): 1})
        assert p_at(run, qrels, k=10) == pytest.approx(0.3)

    def test_short_ranking_divides_by_k(self):
        run = {"q": [("d0", 1.0)]}
        qrels = Qrels(grades={("q", "d0"): 1})
        assert p_at(run, qrels, k=10) == pytest.approx(0.1)

    def test_all_relevant(self):
        run = {"q": [(f"d{i}", float(10 - i)) for i in range(10)]}
        qrels = Qrels(grades={("q", f"d{i}"): 1 for i in range(10)})
        assert p_at(run, qrels, k=10) == 1.0


class TestRankedRunType:
    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            RankedRun.from_mapping({"q": [("d", 1.0), ("d", 0.5)]})

    def test_rejects_increasing_scores(self):
        with pytest.raises(ValueError):
            RankedRun.from_mapping({"q": [("a", 0.5), ("b", 1.0)]})

    def test_accepted_and_usable(self):
        run = RankedRun.from_mapping({"q": [("a", 1.0), ("b", 0.5)]})
        qrels = Qrels(grades={("q", "a"): 1})
        assert map_at(run, qrels) == 1.0


class TestQrelsFile:
    def test_roundtrip(self, tmp_path):
        qrels = Qrels(grades={("q1", "d1"): 1, ("q1", "d2"): 0, ("q2", "d3"): 1})
        path = tmp_path / "qrels.txt"
        qrels.save(path)
        assert Qrels.load(path) == qrels

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            Qrels(grades={("q", "d"): 2})


class TestPairedTTest:
    def test_identical_samples_convention(self):
        a = {"q1": 0.5, "q2": 0.25, "q3": 0.75}
        res = paired_t_test(a, dict(a))
        assert res.p == 1.0
        assert not res.significant
        assert res.degenerate

    def test_constant_nonzero_difference(self):
        a = {"q1": 1.0, "q2": 2.0, "q3": 3.0, "q4": 4.0}
        b = {q: v - 1.0 for q, v in a.items()}
        res = paired_t_test(a, b)
        assert res.p == 0.0
        assert res.significant
        assert res.degenerate
        assert math.isinf(res.t)

    def test_worked_example(self):
        diffs = [0.1, -0.2, 0.3, 0.05, 0.15]
        a = {f"q{i}": d for i, d in enumerate(diffs)}
        b = {f"q{i}": 0.0 for i in range(len(diffs))}
        res = paired_t_test(a, b)
        t_ref, p_ref = stats.ttest_rel(diffs, [0.0] * 5)
        assert res.t == pytest.approx(t_ref, abs=1e-10)
        assert res.p == pytest.approx(p_ref, abs=1e-8)
        assert res.t == pytest.approx(0.98, abs=0.02)
        assert res.p == pytest.approx(0.39, abs=0.02)
        assert not res.significant

    def test_matches_scipy_on_random_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            x = rng.normal(size=n)
            y = x + rng.normal(scale=0.5, size=n)
            a = {f"q{i}": float(v) for i, v in enumerate(x)}
            b = {f"q{i}": float(v) for i, v in enumerate(y)}
            res = paired_t_test(a, b)
            t_ref, p_ref = stats.ttest_rel(x, y)
            assert res.t == pytest.approx(t_ref, abs=1e-10)
            assert res.p == pytest.approx(p_ref, abs=1e-8)

    def test_self_comparison_never_significant(self):
        rng = np.random.default_rng(4)
        a = {f"q{i}": float(v) for i, v in enumerate(rng.random(10))}
        assert not paired_t_test(a, dict(a)).significant

    def test_mismatched_keys_rejected(self):
        with pytest.raises(ValueError):
            paired_t_test({"a": 1.0, "b": 2.0}, {"a": 1.0, "c": 2.0})

    def test_incomplete_beta_against_scipy(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            a = float(rng.uniform(0.5, 20))
            b = float(rng.uniform(0.5, 20))
            x = float(rng.uniform(0, 1))
            assert regularized_incomplete_beta(a, b, x) == pytest.approx(
                stats.beta.cdf(x, a, b), abs=1e-8
            )

    def test_t_cdf_against_scipy(self):
        for dof in (1, 2, 4, 9, 29):
            for t in (-3.2, -0.5, 0.0, 0.97, 2.5, 10.0):
                want = 2 * stats.t.sf(abs(t), dof)
                assert t_two_tailed_p(t, dof) == pytest.approx(want, abs=1e-8)


class TestLayerSimilarityReport:
    def make_model(self):
        cfg = ModelConfig(
            d=8, n=2, layers=2, mat_layers=frozenset({1}), ffn_hidden=16,
            max_len=32, vocab_size=64, dropout_rate=0.0, precision=64,
        )
        return assemble_mart(cfg, seed=5)

    def test_row_count_and_bounds(self):
        model = self.make_model()
        from clirank.xresource import TranslationTable

        table = TranslationTable(entries={"qa": {"da": 0.8}})
        seqs = [build_seq([1, 2], [2, 1], ["qa", "qb"], ["da", "db"])]
        report = layer_similarity_report(model, seqs, table, seed=0)
        assert len(report.translated) == model.config.layers + 1
        assert len(report.random) == model.config.layers + 1
        for v in report.translated + report.random:
            assert v is None or -1.0 <= v <= 1.0

    def test_tied_embeddings_give_unit_similarity_at_layer_zero(self):
        model = self.make_model()
        from clirank.xresource import TranslationTable

        seq = build_seq([1], [1], ["qa"], ["da"])
        # force the two word tokens (and positions/segments) to share vectors
        tok_q, tok_d = seq.token_ids[1], seq.token_ids[3]
        model.tok_emb.value[tok_d] = model.tok_emb.value[tok_q]
        model.pos_emb.value[...] = 0.0
        model.seg_emb.value[...] = 0.0
        table = TranslationTable(entries={"qa": {"da": 1.0}})
        report = layer_similarity_report(model, [seq], table, seed=0)
        assert report.translated[0] == pytest.approx(1.0)

    def test_empty_translated_category_marked(self):
        model = self.make_model()
        from clirank.xresource import TranslationTable

        table = TranslationTable(entries={})
        seqs = [build_seq([1], [1], ["qa"], ["da"])]
        report = layer_similarity_report(model, seqs, table, seed=0)
        assert report.translated == (None,) * (model.config.layers + 1)
        assert report.n_translated_pairs == 0

    def test_tsv_output(self, tmp_path):
        model = self.make_model()
        from clirank.xresource import TranslationTable

        table = TranslationTable(entries={"qa": {"da": 0.8}})
        seqs = [build_seq([1], [1], ["qa"], ["da"])]
        report = layer_similarity_report(model, seqs, table, seed=0)
        path = tmp_path / "sim.tsv"
        report.to_tsv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "layer\ttranslated_sim\trandom_sim"
        assert len(lines) == model.config.layers + 2


def validate_qrels_by_overlap(bench):
    """Independent consistency check of generated judgments."""
    src = sorted({w for q in bench.queries.values() for w in q.split()})
    mapping = {s: "t" + s[1:] for s in src}
    for qid, qtext in bench.queries.items():
        qwords = qtext.split()
        mapped = {mapping[w] for w in qwords}
        need = math.ceil(len(qwords) / 2)
        for doc_id, text in bench.corpus.items():
            expected = 1 if len(mapped & set(text.split())) >= need else 0
            got = 1 if bench.qrels.is_relevant(qid, doc_id) else 0
            assert got == expected, (qid, doc_id)


class TestSyntheticBenchmark:
    def test_zero_noise_table_is_exact_bijection(self):
        bench = gen_synthetic_clir(20, 30, 5, noise=0.0, seed=1)
        for src, dist in bench.table.entries.items():
            assert len(dist) == 1
            ((tgt, p),) = dist.items()
            assert p == 1.0
            assert tgt == "t" + src[1:]

    def test_same_seed_identical(self):
        a = gen_synthetic_clir(30, 40, 6, noise=0.2, seed=9)
        b = gen_synthetic_clir(30, 40, 6, noise=0.2, seed=9)
        assert a.corpus == b.corpus
        assert a.queries == b.queries
        assert a.qrels == b.qrels
        assert a.table.entries == b.table.entries
        assert a.parallel == b.parallel

    def test_qrels_match_overlap_rule(self):
        bench = gen_synthetic_clir(30, 50, 8, noise=0.2, seed=3)
        validate_qrels_by_overlap(bench)

    def test_every_query_has_a_relevant_doc(self):
        bench = gen_synthetic_clir(40, 60, 10, noise=0.1, seed=4)
        for qid in bench.queries:
            assert bench.qrels.n_relevant(qid) >= 1

    def test_noise_split_over_two_confusers(self):
        bench = gen_synthetic_clir(25, 30, 5, noise=0.2, seed=6)
        for src, dist in bench.table.entries.items():
            true_tgt = "t" + src[1:]
            assert dist[true_tgt] >= 0.8 - 1e-12
            assert sum(dist.values()) == pytest.approx(1.0)

    def test_infeasible_parameters_rejected(self):
        with pytest.raises(ValueError):
            gen_synthetic_clir(2, 5, 2, noise=0.0, seed=0)
        with pytest.raises(ValueError):
            gen_synthetic_clir(20, 10, 2, noise=1.0, seed=0)

    def test_required_overlap(self):
        assert required_overlap(3) == 2
        assert required_overlap(4) == 2
        assert required_overlap(5) == 3

    def test_words_survive_normalization(self):
        from clirank.textprep import normalize_text

        bench = gen_synthetic_clir(20, 20, 4, noise=0.1, seed=2)
        for text in list(bench.corpus.values()) + list(bench.queries.values()):
            assert normalize_text(text) == text
