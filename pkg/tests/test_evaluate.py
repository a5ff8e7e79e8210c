import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpe.evaluate import (FilterIndex, Scorer, ThresholdSet, accuracy_at, best_threshold, candidate_thresholds,
                          generate_classification_negatives, link_prediction, position_pools, rank_entity,
                          rank_from_scores, triple_classification, tune_thresholds)
from rpe.kb import TripleStore, build_type_index
from rpe.model import ModelParams, score_final
from rpe.paths import mine_evidence
from rpe.synthetic import compositional_kb, random_graph


def toy(seed=0, E=12, mode="acom", norm=1, lam=1.0, n=3):
    rng = np.random.default_rng(seed)
    edges = random_graph(E, 2, 3 * E, rng)
    held = edges[: E // 3]
    store = TripleStore.from_triples(edges[E // 3:], test=held, num_entities=E, num_relations=2).add_inverses()
    proj = np.eye(n) + rng.normal(size=(4, n, n)) * 0.3
    params = ModelParams(rng.normal(size=(E, n)) * 0.5, rng.normal(size=(4, n)) * 0.5, proj, mode, lam, norm)
    return store, params, mine_evidence(store, max_len=2, eta=0.05)


def oracle_rank(triple, side, params, evidence, known, tie):
    """Score every candidate with the scalar reference score and count by brute force."""
    h, r, t = triple
    cands = [(c, r, t) if side == "head" else (h, r, c) for c in range(params.num_entities)]
    scores = [score_final(*c, evidence, params) for c in cands]
    target = cands.index(tuple(triple))
    s = scores[target]
    def beats(i):
        if i == target:
            return False
        return scores[i] < s if tie == "optimistic" else scores[i] <= s
    raw = 1 + sum(beats(i) for i in range(len(cands)))
    fil = 1 + sum(beats(i) and cands[i] not in known for i in range(len(cands)))
    return raw, fil


class TestScorer:
    @pytest.mark.parametrize("mode", ["acom", "mcom", "initial"])
    @pytest.mark.parametrize("norm", [1, 2])
    def test_candidate_scores_match_scalar(self, mode, norm):
        store, params, ev = toy(1, mode=mode, norm=norm)
        sc = Scorer(params, ev)
        for tr in store.train[:10].tolist():
            for side in ("head", "tail"):
                got = sc.candidate_scores(tr, side)
                for c in range(params.num_entities):
                    cand = (c, tr[1], tr[2]) if side == "head" else (tr[0], tr[1], c)
                    assert got[c] == pytest.approx(score_final(*cand, ev, params), abs=1e-9)

    def test_triple_scores_match_scalar(self):
        store, params, ev = toy(2)
        got = Scorer(params, ev).triple_scores(store.train)
        want = [score_final(*tr, ev, params) for tr in store.train.tolist()]
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_bad_side(self):
        store, params, ev = toy(0)
        with pytest.raises(ValueError):
            Scorer(params, ev).candidate_scores((0, 0, 1), "middle")


class TestRanking:
    def test_filtered_known_positives(self):
        # three candidates beat the target but all are known positives
        scores = np.array([0.1, 0.2, 0.3, 0.5, 0.9])
        mask = np.array([True, True, True, False, False])
        assert rank_from_scores(scores, 3, mask) == (4, 1)

    def test_all_tied(self):
        scores = np.zeros(6)
        assert rank_from_scores(scores, 2, None, "optimistic") == (1, 1)
        assert rank_from_scores(scores, 2, None, "pessimistic") == (6, 6)

    def test_filter_mask_excludes_target(self):
        f = FilterIndex([(0, 0, 1), (0, 0, 2)])
        assert f.mask((0, 0, 1), "tail", 4).tolist() == [False, False, True, False]
        assert f.mask((0, 0, 1), "head", 4).tolist() == [False] * 4

    @given(st.integers(0, 10_000), st.sampled_from(["optimistic", "pessimistic"]))
    @settings(max_examples=15, deadline=None)
    def test_oracle_equivalence(self, seed, tie):
        store, params, ev = toy(seed, mode=["acom", "mcom", "initial"][seed % 3])
        known = store.known_positives()
        rng = np.random.default_rng(seed)
        for tr in store.test[rng.permutation(len(store.test))[:3]].tolist():
            for side in ("head", "tail"):
                res = rank_entity(tr, side, params, ev, store, tie)
                assert (res.raw_rank, res.filtered_rank) == oracle_rank(tr, side, params, ev, known, tie)
                assert res.filtered_rank <= res.raw_rank

    def test_bad_tie_rule(self):
        store, params, ev = toy(0)
        with pytest.raises(ValueError):
            rank_entity(store.test[0], "tail", params, ev, store, tie="random")


class TestLinkPrediction:
    def test_metric_bounds_and_category_average(self):
        store, params, ev = toy(3, E=20)
        rep = link_prediction(store.test, params, store, ev)
        E = store.num_entities
        assert 1 <= rep.mean_rank_filter <= rep.mean_rank_raw <= E
        assert 0 <= rep.hits10_raw <= rep.hits10_filter <= 100
        weighted = sum(rep.by_category[k] * rep.category_counts[k] for k in rep.by_category)
        assert weighted / sum(rep.category_counts.values()) == pytest.approx(rep.hits10_filter, abs=1e-9)
        assert rep.num_queries == 2 * len(store.test)

    def test_report_rendering(self):
        store, params, ev = toy(4, E=20)
        rep = link_prediction(store.test, params, store, ev)
        tsv = rep.to_tsv()
        assert tsv.startswith("metric\tvalue\n") and "hits10_filter\t" in tsv
        assert "Filter" in rep.pretty()
        assert "-" in rep.pretty(setting="raw", by_category=False).splitlines()[2]

    def test_perfect_model(self):
        # one-hot entities and exact translations: every query ranks first after filtering
        store = TripleStore.from_triples([(0, 0, 1), (2, 0, 3)], test=[(0, 0, 1)], num_entities=4).add_inverses()
        params = ModelParams.zeros(4, 2, 4, 4, mode="initial", lam=0.0)
        params.entity[:] = np.eye(4) * 0.5
        rep = link_prediction(store.test, params, store)
        assert rep.hits10_filter == 100.0


class TestThresholds:
    def test_candidates(self):
        c = candidate_thresholds([0.2, 0.4, 0.4, 1.0])
        assert c[:3].tolist() == [0.2, 0.30000000000000004, 0.7]
        assert c[3] > 1.0

    def test_separable(self):
        delta, acc = best_threshold([0.1, 0.2, 0.8, 0.9], [1, 1, -1, -1])
        assert acc == 1.0 and delta == pytest.approx(0.5)

    def test_ties_prefer_smallest(self):
        delta, acc = best_threshold([0.5, 0.5], [1, -1])
        assert acc == 0.5 and delta == 0.5

    @given(st.lists(st.tuples(st.floats(0, 10, allow_nan=False), st.sampled_from([1, -1])), min_size=1,
                    max_size=30))
    def test_optimal_over_candidate_set(self, pairs):
        scores, labels = map(np.array, zip(*pairs))
        delta, acc = best_threshold(scores, labels)
        assert acc == pytest.approx(accuracy_at(scores, labels, delta))
        for c in candidate_thresholds(scores):
            assert accuracy_at(scores, labels, c) <= acc + 1e-12

    def test_per_relation_dominates_global(self):
        store, params, ev = toy(5, E=30)
        x, y = generate_classification_negatives(store.train, store, seed=1)
        th = tune_thresholds(x, y, params, ev)
        per = triple_classification(x, y, params, th, ev)
        scores = Scorer(params, ev).triple_scores(x)
        for c in candidate_thresholds(scores):
            assert per >= 100 * accuracy_at(scores, y, c) - 1e-9

    def test_fallback_for_unseen_relation(self):
        ts = ThresholdSet({0: 1.0}, 2.5)
        assert ts.get(0) == 1.0 and ts.get(7) == 2.5


class TestClassificationNegatives:
    def setup_method(self):
        self.store = compositional_kb(num_entities=60, fanout=2).add_inverses()

    def test_one_per_positive_and_not_known(self):
        x, y = generate_classification_negatives(self.store.test, self.store, seed=3)
        assert (y == 1).sum() == (y == -1).sum() == len(self.store.test)
        known = self.store.known_positives()
        assert all(tuple(tr) not in known for tr in x[y == -1].tolist())

    def test_deterministic(self):
        a = generate_classification_negatives(self.store.valid, self.store, seed=4)
        b = generate_classification_negatives(self.store.valid, self.store, seed=4)
        np.testing.assert_array_equal(a[0], b[0])

    def test_replay_position_pools(self):
        log = []
        generate_classification_negatives(self.store.test, self.store, build_type_index(self.store), seed=5,
                                          sample_log=log)
        heads, tails = (set(p.tolist()) for p in position_pools(self.store))
        for rec in log:
            e = rec.negative[0] if rec.side == "head" else rec.negative[2]
            assert e in (heads if rec.side == "head" else tails)
            assert rec.negative[1] == rec.positive[1]
