import time

import numpy as np
import pytest

from ktrace.data import Catalog, SimConfig, simulate, response_probability
from ktrace.model import ModelConfig
from ktrace.review import (CandidateScore, Predictor, adaptive_diagnostic,
                           model_score_fn, recommend_next, score_pool,
                           smart_review_pair)
from ktrace.training import xavier_init


def make_predictor(vocab=12, window=6, seed=0, prior=0.61):
    ids = [f"q{i:02d}" for i in range(vocab)]
    catalog = Catalog(ids=ids)
    config = ModelConfig(question_vocab=vocab, d_embed=6, d_lstm=4,
                         lstm_layers=1, d_attn=6, head_dims=(8,),
                         window=window)
    params = xavier_init(config, seed=seed)
    return Predictor(config, params, catalog, prior_p=prior)


def history_of(pairs):
    return [(f"q{i:02d}", r) for i, r in pairs]


class TestScorePool:
    def test_singleton_pool(self):
        predictor = make_predictor()
        scores = score_pool(predictor, history_of([(0, 1)]), ["q01"])
        assert len(scores) == 1
        assert scores[0].question_id == "q01"
        assert 0.0 < scores[0].prob < 1.0

    def test_duplicate_candidates_score_identically(self):
        predictor = make_predictor()
        scores = score_pool(predictor, history_of([(0, 1), (1, 0)]),
                            ["q05", "q05"])
        assert scores[0].prob == scores[1].prob
        np.testing.assert_array_equal(scores[0].attention,
                                      scores[1].attention)

    def test_sorted_ascending_by_probability(self):
        predictor = make_predictor()
        scores = score_pool(predictor, history_of([(0, 1), (1, 0), (2, 1)]),
                            [f"q{i:02d}" for i in range(10)])
        probs = [s.prob for s in scores]
        assert probs == sorted(probs)

    def test_matches_single_prediction_path(self):
        predictor = make_predictor()
        history = history_of([(0, 1), (3, 0)])
        scores = score_pool(predictor, history, ["q07"])
        single = predictor.predict(history, "q07")
        assert scores[0].prob == pytest.approx(single, rel=1e-6)

    def test_cold_start_serves_prior_and_policies_still_work(self):
        predictor = make_predictor(prior=0.61)
        pool = [f"q{i:02d}" for i in range(5)]
        scores = score_pool(predictor, [], pool)
        assert all(s.prob == 0.61 for s in scores)
        assert [s.question_id for s in scores] == sorted(pool)
        recs = recommend_next(scores, already_answered=set(), k=3)
        assert recs == sorted(pool)[:3]

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            score_pool(make_predictor(), history_of([(0, 1)]), [])

    def test_attention_rows_align_with_windowed_history(self):
        predictor = make_predictor(window=4)
        history = history_of([(i, 1) for i in range(9)])
        scores = score_pool(predictor, history, ["q00"])
        assert scores[0].attention.shape == (4,)
        assert scores[0].attention.sum() == pytest.approx(1.0, abs=1e-6)

    def test_pool_of_100_under_a_second(self):
        catalog = Catalog(ids=[f"q{i:03d}" for i in range(100)])
        config = ModelConfig(question_vocab=100)
        predictor = Predictor(config, xavier_init(config, seed=1), catalog)
        history = [(f"q{i:03d}", i % 2) for i in range(50)]
        start = time.perf_counter()
        score_pool(predictor, history, list(catalog.ids))
        assert time.perf_counter() - start < 1.0


def fixed_scores(pairs):
    return [CandidateScore(qid, p, np.zeros(0)) for qid, p in pairs]


class TestRecommendNext:
    def test_everything_above_threshold_gives_empty(self):
        scores = fixed_scores([("a", 0.9), ("b", 0.95)])
        assert recommend_next(scores, eliminate_above=0.85, k=5) == []

    def test_k_one_is_argmin(self):
        scores = fixed_scores([("a", 0.4), ("b", 0.2), ("c", 0.6)])
        assert recommend_next(scores, k=1) == ["b"]

    def test_threshold_one_is_pure_ranking(self):
        scores = fixed_scores([("a", 0.99), ("b", 0.2), ("c", 0.6)])
        assert recommend_next(scores, eliminate_above=1.0, k=3) == \
            ["b", "c", "a"]

    def test_answered_items_dropped(self):
        scores = fixed_scores([("a", 0.1), ("b", 0.2), ("c", 0.3)])
        out = recommend_next(scores, already_answered={"a"}, k=5)
        assert out == ["b", "c"]

    def test_ties_break_by_question_id(self):
        scores = fixed_scores([("z", 0.5), ("a", 0.5), ("m", 0.5)])
        assert recommend_next(scores, k=2) == ["a", "m"]

    def test_output_invariants(self, rng):
        pool = [(f"q{i}", float(rng.random())) for i in range(30)]
        scores = fixed_scores(pool)
        answered = {f"q{i}" for i in range(0, 30, 3)}
        out = recommend_next(scores, answered, eliminate_above=0.7, k=10)
        assert len(out) == len(set(out)) <= 10
        assert not answered & set(out)
        by_id = dict(pool)
        probs = [by_id[q] for q in out]
        assert probs == sorted(probs)
        assert all(p <= 0.7 for p in probs)


class TestSmartReviewPair:
    def test_all_correct_history_gives_none(self):
        predictor = make_predictor()
        history = history_of([(0, 1), (1, 1), (2, 1)])
        assert smart_review_pair(predictor, history, "q09") is None

    def test_single_incorrect_item_selected_regardless_of_weight(self):
        predictor = make_predictor()
        history = history_of([(0, 1), (4, 0), (2, 1)])
        pair = smart_review_pair(predictor, history, "q09")
        assert pair.review_question_id == "q04"
        assert pair.original_response == 0
        assert pair.weak_question_id == "q09"

    def test_picks_highest_attended_incorrect(self):
        predictor = make_predictor()
        history = history_of([(0, 0), (1, 0), (2, 0), (3, 1)])
        scores = score_pool(predictor, history, ["q09"])
        alpha = scores[0].attention
        pair = smart_review_pair(predictor, history, "q09")
        wrong_steps = [i for i, (_, r) in enumerate(history) if r == 0]
        best = max(wrong_steps, key=lambda i: alpha[i])
        assert pair.review_question_id == history[best][0]
        assert pair.attention_weight == pytest.approx(float(alpha[best]),
                                                      rel=1e-6)

    def test_result_is_from_history(self):
        predictor = make_predictor()
        history = history_of([(5, 0), (6, 0)])
        pair = smart_review_pair(predictor, history, "q01")
        assert pair.review_question_id in {q for q, _ in history}

    def test_empty_history_gives_none(self):
        assert smart_review_pair(make_predictor(), [], "q01") is None


class TestAdaptiveDiagnostic:
    def test_constant_half_picks_stable_id_order(self):
        pool = ["q3", "q1", "q2", "q5", "q4"]
        asked = adaptive_diagnostic(
            lambda history, cands: np.full(len(cands), 0.5),
            pool, respond=lambda qid: 1, steps=3)
        assert asked == ["q1", "q2", "q3"]

    def test_single_step_is_argmin_of_uncertainty(self):
        table = {"a": 0.9, "b": 0.48, "c": 0.1}
        asked = adaptive_diagnostic(
            lambda history, cands: np.array([table[c] for c in cands]),
            ["a", "b", "c"], respond=lambda qid: 0, steps=1)
        assert asked == ["b"]

    def test_never_repeats_items(self):
        rng = np.random.default_rng(0)
        asked = adaptive_diagnostic(
            lambda history, cands: rng.random(len(cands)),
            [f"q{i}" for i in range(10)], respond=lambda qid: 1, steps=6)
        assert len(set(asked)) == 6

    def test_pool_smaller_than_steps_rejected(self):
        with pytest.raises(ValueError):
            adaptive_diagnostic(lambda h, c: np.zeros(len(c)), ["a"],
                                respond=lambda q: 1, steps=2)

    def test_responses_feed_back_into_history(self):
        seen = []

        def score(history, cands):
            seen.append(list(history))
            return np.full(len(cands), 0.5)

        adaptive_diagnostic(score, ["a", "b", "c"], respond=lambda q: 1,
                            steps=2)
        assert seen[0] == []
        assert seen[1] == [("a", 1)]

    def test_model_score_fn_handles_cold_start(self):
        predictor = make_predictor(prior=0.7)
        fn = model_score_fn(predictor)
        out = fn([], ["q01", "q02"])
        np.testing.assert_array_equal(out, [0.7, 0.7])
        out2 = fn(history_of([(0, 1)]), ["q01"])
        assert 0.0 < out2[0] < 1.0


GRID = np.linspace(-4.0, 4.0, 321)


def posterior_weights(items, responses, discrimination, difficulty):
    """Grid posterior over a scalar ability: standard normal prior times
    the two-parameter logistic likelihood of the observed responses."""
    log_post = -0.5 * GRID ** 2
    for j, y in zip(items, responses):
        p = response_probability(discrimination[j], difficulty[j], GRID)
        p = np.clip(p, 1e-12, 1 - 1e-12)
        log_post = log_post + np.where(y, np.log(p), np.log1p(-p))
    log_post -= log_post.max()
    w = np.exp(log_post)
    return w / w.sum()


def posterior_mean_ability(items, responses, discrimination, difficulty):
    w = posterior_weights(items, responses, discrimination, difficulty)
    return float((GRID * w).sum())


def test_adaptive_selection_beats_random_items_at_ability_estimation():
    # scalar-ability cohort: 6 probes chosen by the posterior-predictive
    # uncertainty rule ("closest to even odds given the responses so far")
    # against 6 random probes, both scored by the posterior-mean estimator
    res = simulate(SimConfig(n_users=1000, n_questions=300, n_tags=1,
                             tags_per_question=(1, 1), sequence_length=1,
                             learning_gain=0.0, seed=17))
    a, b = res.discrimination, res.difficulty
    ids = res.catalog.ids
    index = {qid: j for j, qid in enumerate(ids)}
    prob_grid = response_probability(a[None, :], b[None, :], GRID[:, None])
    rng = np.random.default_rng(99)
    sq_err_adaptive, sq_err_random = [], []
    for u in range(1000):
        theta = float(res.abilities[u, 0])

        def predictive_scores(history, cands):
            items = [index[q] for q, _ in history]
            answers = [r for _, r in history]
            w = posterior_weights(items, answers, a, b)
            marginal = w @ prob_grid
            return marginal[[index[c] for c in cands]]

        collected = []

        def respond(qid):
            p = response_probability(a[index[qid]], b[index[qid]], theta)
            r = int(rng.random() < p)
            collected.append(r)
            return r

        asked = adaptive_diagnostic(predictive_scores, ids, respond, steps=6)
        items = [index[q] for q in asked]
        est = posterior_mean_ability(items, collected, a, b)
        sq_err_adaptive.append((est - theta) ** 2)

        random_items = rng.choice(len(ids), size=6, replace=False)
        answers = [int(rng.random() < response_probability(a[j], b[j], theta))
                   for j in random_items]
        est = posterior_mean_ability(random_items, answers, a, b)
        sq_err_random.append((est - theta) ** 2)
    assert np.mean(sq_err_adaptive) < np.mean(sq_err_random)
