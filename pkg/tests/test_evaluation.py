from itertools import permutations

import numpy as np
import pytest
from conftest import toy_weights
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from matryoshka3d.data import Sample, rank_by_similarity
from matryoshka3d.errors import DataError, NumericalError, ParameterError, UsageError
from matryoshka3d.evaluation import (
    EvalReport,
    RetrievalTask,
    SynthTaskSpec,
    accuracy,
    classify_by_label_similarity,
    embed_taps,
    evaluate_retrieval,
    generate_synthetic_task,
    has_relevant,
    ndcg_at_k,
    normalize_prefix,
    retrieval_ndcg,
    run_sweep,
    spearman,
    task_from_samples,
)


def test_ndcg_examples():
    assert ndcg_at_k([3, 1, 2], {3: 1.0}) == 1.0
    assert ndcg_at_k([0, 5, 1], {5: 1.0}) == pytest.approx(1 / np.log2(3), abs=1e-15)
    assert ndcg_at_k([0, 5, 1], {5: 1.0}) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_k([0, 1], {}) == 0.0 and not has_relevant({0: 0.0})
    assert ndcg_at_k(list(range(20)), {15: 1.0}) == 0.0
    with pytest.raises(ParameterError):
        ndcg_at_k([0], {0: 1}, k=0)


def oracle_ndcg(scores, rel, k):
    """Enumerate every ordering: the ranked one is the sorted-by-(score desc, index asc) ordering;
    the ideal is the best over all orderings."""
    n = len(scores)

    def dcg(order):
        return sum(rel[d] / np.log2(i + 2) for i, d in enumerate(order[:k]))

    ranked = min(permutations(range(n)), key=lambda p: [(-scores[d], d) for d in p])
    ideal = max(dcg(p) for p in permutations(range(n)))
    return 0.0 if ideal == 0 else dcg(ranked) / ideal


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_ndcg_matches_enumeration(data):
    n = data.draw(st.integers(1, 7))
    scores = data.draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    rel = data.draw(st.lists(st.sampled_from([0.0, 1.0, 2.0]), min_size=n, max_size=n))
    k = data.draw(st.integers(1, 10))
    ranked = rank_by_similarity(np.array(scores, dtype=float))
    got = ndcg_at_k(ranked, {i: r for i, r in enumerate(rel)}, k)
    assert got == oracle_ndcg(scores, rel, k)
    assert 0.0 <= got <= 1.0


def test_spearman_examples_and_errors():
    x = [0.1, 0.5, 0.3, 0.9]
    assert spearman(x, x) == 1.0
    assert spearman(x, [-v for v in x]) == -1.0
    with pytest.raises(NumericalError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ParameterError):
        spearman([1], [1])
    with pytest.raises(ParameterError):
        spearman([1, 2], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=3, max_size=12))
def test_spearman_matches_rank_then_pearson(pairs):
    x = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs], dtype=float)
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    expected = np.corrcoef(rx, ry)[0, 1]
    assert abs(spearman(x, y) - expected) <= 1e-12


def test_accuracy():
    assert accuracy([0, 1, 1, 2], [0, 1, 0, 2]) == 0.75


def test_classification_self_match_and_ties():
    w = toy_weights()
    labels = ["alpha beta", "gamma", "delta epsilon zeta"]
    for i, text in enumerate(labels):
        assert classify_by_label_similarity(w, text, labels) == i
    # duplicate labels tie exactly; the lower index wins
    assert classify_by_label_similarity(w, "gamma", ["gamma", "gamma"]) == 0
    assert classify_by_label_similarity(w, labels, labels) == [0, 1, 2]
    with pytest.raises(ParameterError):
        classify_by_label_similarity(w, "x", ["only"])


def test_classification_follows_dot_sign():
    w = toy_weights()
    texts = ["a", "b c", "d e f", "g h", "i"]
    labels = ["p q", "r s t"]
    taps = embed_taps(w, texts + labels, [2])[2]
    v = normalize_prefix(taps, 16)
    diff = v[5] - v[6]
    expected = [0 if v[i] @ diff > 0 else 1 for i in range(5)]
    assert classify_by_label_similarity(w, texts, labels) == expected


def test_synthetic_generator_is_pure_and_valid():
    spec = SynthTaskSpec(n_clusters=3, docs_per_cluster=4, words_per_cluster=10, doc_len=5, query_len=3)
    a, b = generate_synthetic_task(spec), generate_synthetic_task(spec)
    assert a.corpus == b.corpus and a.queries == b.queries and a.gold == b.gold
    assert len(a.corpus) == 12 and all(0 <= g < 12 for g in a.gold)
    assert generate_synthetic_task(SynthTaskSpec(n_clusters=3, docs_per_cluster=4, words_per_cluster=10,
                                                 doc_len=5, query_len=3, seed=1)).corpus != a.corpus
    for q, g in zip(a.queries, a.gold):
        assert set(q.split()) <= set(a.cluster_words[a.doc_cluster[g]])
    with pytest.raises(ParameterError):
        SynthTaskSpec(query_len=9, doc_len=8)


def test_synthetic_task_admits_perfect_scorer():
    task = generate_synthetic_task(SynthTaskSpec())
    n = len(task.corpus)
    # lookup scorer: one-hot vector of the gold document
    q = np.eye(n)[task.gold]
    assert retrieval_ndcg(q, np.eye(n), task.gold) == 1.0


def test_training_samples_shape():
    task = generate_synthetic_task(SynthTaskSpec(n_clusters=2, docs_per_cluster=4))
    it = task.training_samples(n_hard=7)
    s = next(it)
    assert len(s.hard_negatives) == 7 and s.positive not in s.hard_negatives
    pairs, scores = task.sts_pairs(20)
    assert len(pairs) == 20 and all(0 <= x <= 1 for x in scores)


def test_retrieval_task_validation():
    with pytest.raises(DataError):
        RetrievalTask("t", ["a"], ["q"], [1])
    t = task_from_samples([Sample("q1", "a", ("b",)), Sample("q2", "b", ("a", "c"))])
    assert t.corpus == ["a", "b", "c"] and t.gold == [0, 1]


@pytest.fixture(scope="module")
def small_task():
    return generate_synthetic_task(SynthTaskSpec(n_clusters=3, docs_per_cluster=4, words_per_cluster=12))


def test_sweep_keys_and_degeneracy(small_task):
    w = toy_weights()
    rep = run_sweep(w, [small_task], depths=[1, 2], dims=[4, 16], ranks=[2, 8])
    assert set(rep.entries) == {(l, d, r) for l in (1, 2) for d in (4, 16) for r in (2, 8)}
    assert rep.value(2, 16, 8) == evaluate_retrieval(w, small_task)
    assert all(0 <= v[small_task.name] <= 1 for v in rep.entries.values())
    one = run_sweep(w, [small_task], depths=[1], dims=[4], ranks=[4])
    assert list(one.entries) == [(1, 4, 4)]


def test_sweep_rank_modes(small_task):
    w = toy_weights()
    cols = run_sweep(w, [small_task], depths=[2], dims=[16], ranks=[4], rank_mode="columns")
    assert cols.value(2, 16, 4) == evaluate_retrieval(w, small_task, rank=4)
    with pytest.raises(UsageError):
        run_sweep(w, [small_task], depths=[3])
    with pytest.raises(UsageError):
        run_sweep(w, [small_task], ranks=[4], rank_mode="bogus")


def test_report_round_trip(small_task, tmp_path):
    rep = run_sweep(toy_weights(), [small_task], depths=[1, 2], dims=[16])
    rep.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.entries == rep.entries and back.native_rank == 8
    assert len(rep.to_table().splitlines()) == 3
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(UsageError):
        EvalReport.load(tmp_path / "x.json")
