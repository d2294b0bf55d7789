"""Combined scoring, masked softmax weighting, training loop, ranking."""

import numpy as np
import pytest

import gradcheck
import synthetic
from rulekbc.grounding import ground_all
from rulekbc.kb import KBError
from rulekbc.rules import TrigramSimilarity, classify_case, map_relations, parse_rule
from rulekbc.trainer import (
    RelationParams,
    TrainerConfig,
    _rank_of_gold,
    combined_score,
    load_params,
    masked_weights,
    normalize_embedding_row,
    rank,
    relation_loss_and_grads,
    reporting_weights,
    save_params,
    sigmoid,
    softmax,
    train,
)


class TestSoftmaxInvariants:
    def test_thousand_random_vectors_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            size = int(rng.integers(1, 12))
            scale = 10.0 ** rng.integers(-3, 7)
            x = rng.normal(scale=scale, size=size)
            p = softmax(x)
            assert abs(p.sum() - 1.0) < 1e-9
            assert (p >= 0).all()
            assert np.isfinite(p).all()
            assert int(np.argmax(p)) == int(np.argmax(x))

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=8)
        np.testing.assert_allclose(softmax(x), softmax(x + 123.456), atol=1e-12)

    def test_sigmoid_extremes(self):
        assert sigmoid(0.0) == pytest.approx(0.5)
        assert sigmoid(100.0) == pytest.approx(1.0)
        assert sigmoid(-100.0) == pytest.approx(0.0)
        assert np.isfinite(sigmoid(-1e4))


class TestMaskedWeights:
    def test_inactive_rules_get_exact_zero(self):
        logits = np.array([0.3, -0.2, 0.8, 0.1])
        active = np.array([[True, False, True]])
        w = masked_weights(logits, active)[0]
        assert w[1] == 0.0
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_all_rules_inactive_gives_embedding_everything(self):
        logits = np.array([5.0, 5.0, -3.0])
        active = np.array([[False, False]])
        w = masked_weights(logits, active)[0]
        np.testing.assert_allclose(w, [0.0, 0.0, 1.0])

    def test_equal_logits_split_evenly_among_active(self):
        logits = np.zeros(4)
        active = np.array([[True, True, False]])
        w = masked_weights(logits, active)[0]
        np.testing.assert_allclose(w, [1 / 3, 1 / 3, 0.0, 1 / 3])


class TestNormalizeEmbeddingRow:
    def test_flat_row_collapses_to_zeros(self):
        np.testing.assert_array_equal(normalize_embedding_row(np.full(5, 3.3)), np.zeros(5))

    def test_min_max_endpoints(self):
        row = normalize_embedding_row(np.array([-2.0, 0.0, 6.0]))
        np.testing.assert_allclose(row, [0.0, 0.25, 1.0])


class TestCombinedScore:
    def test_no_rules_uses_embedding_only(self):
        rp = RelationParams(logits=np.zeros(1), mix_logit=0.0)
        emb = np.array([0.1, 0.9, 0.4])
        got = combined_score(rp, [], emb)
        np.testing.assert_allclose(got, 0.5 * emb)

    def test_rule_dominates_when_mix_saturated(self):
        rp = RelationParams(logits=np.zeros(2), mix_logit=50.0)
        row = {0: 3.0, 2: 1.0}
        got = combined_score(rp, [row], np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(got, 0.5 * np.array([3.0, 0.0, 1.0]), atol=1e-12)

    def test_hand_computed_blend(self):
        rp = RelationParams(logits=np.array([np.log(2.0), 0.0, 0.0]), mix_logit=0.0)
        r1 = np.array([2.0, 0.0, 0.0])
        r2 = np.array([0.0, 1.0, 0.0])
        emb = np.array([0.0, 0.0, 1.0])
        got = combined_score(rp, [r1, r2], emb)
        expected = 0.5 * (0.5 * r1 + 0.25 * r2) + 0.5 * 0.25 * emb
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_sparse_and_dense_rows_agree(self):
        rp = RelationParams(logits=np.array([0.2, -0.4, 0.1]), mix_logit=0.3)
        dense = np.array([[0.0, 2.0, 0.0, 1.0], [3.0, 0.0, 0.0, 0.0]])
        sparse = [{1: 2.0, 3: 1.0}, {0: 3.0}]
        emb = np.array([0.1, 0.2, 0.3, 0.4])
        np.testing.assert_array_equal(
            combined_score(rp, dense, emb), combined_score(rp, sparse, emb)
        )

    def test_zero_row_rule_removal_is_exact(self):
        # a rule with an all-zero row must leave the score vector bit-identical
        # to the same model with that rule deleted outright
        rng = np.random.default_rng(5)
        for _ in range(25):
            n = int(rng.integers(2, 6))
            e = int(rng.integers(3, 8))
            logits = rng.normal(size=n + 1)
            dead = int(rng.integers(n))
            rows = rng.integers(-2, 3, size=(n, e)).astype(float)
            rows[dead] = 0.0
            emb = rng.random(e)
            full = RelationParams(logits=logits.copy(), mix_logit=float(rng.normal()))
            reduced = RelationParams(
                logits=np.delete(logits, dead), mix_logit=full.mix_logit
            )
            got_full = combined_score(full, rows, emb)
            got_reduced = combined_score(reduced, np.delete(rows, dead, axis=0), emb)
            np.testing.assert_array_equal(got_full, got_reduced)


class TestLossAndGrads:
    def test_matches_central_differences(self):
        for seed in range(3):
            assert gradcheck.trainer_fd_check(seed) < 1e-4

    def test_hand_computed_multi_gold_loss(self):
        S = np.array([[[2.0, 0.0, 1.0]]])
        active = np.array([[True]])
        F = np.array([[0.5, 0.0, 1.0]])
        Y = np.array([[1.0, 0.0, 1.0]])
        logits = np.zeros(2)
        z = 0.5 * (0.5 * S[0, 0]) + 0.5 * (0.5 * F[0])
        logsum = np.log(np.exp(z).sum())
        expected = (2 * logsum - z[0] - z[2]) / 2.0
        loss, _, _ = relation_loss_and_grads(logits, 0.0, S, F, Y, active)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_no_golds_means_zero_loss_and_grads(self):
        S = np.zeros((1, 1, 3))
        loss, d_logits, d_mix = relation_loss_and_grads(
            np.zeros(2), 0.0, S, np.zeros((1, 3)), np.zeros((1, 3)), np.array([[False]])
        )
        assert loss == 0.0
        assert (d_logits == 0).all()
        assert d_mix == 0.0


def family_setup():
    kb = synthetic.family_kb()
    provider = TrigramSimilarity()
    rule = classify_case(
        map_relations(parse_rule(synthetic.PLANTED_RULE_TEXT), kb, provider)
    )
    groundings = ground_all(kb, [rule])
    return kb, groundings


class TestTrainLoop:
    def test_zero_lr_leaves_parameters_unchanged(self):
        kb, groundings = family_setup()
        cfg = TrainerConfig(lr=0.0, max_epochs=5, patience=3)
        params, _ = train(kb, groundings, None, cfg)
        for rp in params.per_relation.values():
            assert (rp.logits == 0).all()
            assert rp.mix_logit == 0.0

    def test_uniform_mode_freezes_logits(self):
        kb, pool, _ = synthetic.planted_kb(0)
        groundings = ground_all(kb, pool)
        cfg = TrainerConfig(lr=0.1, max_epochs=40, patience=10, uniform_weights=True)
        params, _ = train(kb, groundings, None, cfg)
        rel = kb.relations.id("grandparent")
        rp = params.per_relation[rel]
        assert (rp.logits == 0).all()
        w = reporting_weights(rp)
        np.testing.assert_allclose(w, np.full(len(pool) + 1, 1.0 / (len(pool) + 1)))

    def test_all_relations_get_blocks(self):
        kb, groundings = family_setup()
        params, traces = train(kb, groundings, None, TrainerConfig(max_epochs=2, patience=1))
        assert set(params.per_relation) == set(range(kb.num_relations))
        assert set(traces) == {kb.relation_name(r) for r in range(kb.num_relations)}

    def test_early_stopping_restores_best_epoch(self):
        kb, pool, _ = synthetic.planted_kb(3)
        groundings = ground_all(kb, pool)
        cfg = TrainerConfig(lr=0.1, max_epochs=300, patience=10)
        params, traces = train(kb, groundings, None, cfg)
        rel = kb.relations.id("grandparent")
        rp = params.per_relation[rel]
        trace = traces["grandparent"]["metric"]
        assert rp.stopped
        assert rp.epochs_trained < 300
        from rulekbc.trainer import _RelationData

        data = _RelationData(kb, rel, groundings[rel], None)
        assert data.valid_mrr(rp.logits, rp.mix_logit) == pytest.approx(max(trace))

    def test_max_epochs_zero_trains_nothing(self):
        kb, groundings = family_setup()
        params, traces = train(kb, groundings, None, TrainerConfig(max_epochs=0))
        assert all(not t["loss"] for t in traces.values())
        for rp in params.per_relation.values():
            assert rp.epochs_trained == 0


class TestRanking:
    def test_gold_rank_tie_is_mean_of_ties(self):
        scores = np.array([0.5, 0.5, 0.1, 0.5])
        keep = np.ones(4, dtype=bool)
        assert _rank_of_gold(scores, 0, keep) == 2.0  # three-way tie at the top
        assert _rank_of_gold(scores, 2, keep) == 4.0

    def test_two_way_tie(self):
        scores = np.array([0.7, 0.7, 0.1])
        keep = np.ones(3, dtype=bool)
        assert _rank_of_gold(scores, 0, keep) == 1.5
        assert _rank_of_gold(scores, 1, keep) == 1.5

    def test_shift_invariance(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            scores = rng.normal(size=10)
            keep = rng.random(10) < 0.8
            gold = int(rng.integers(10))
            keep[gold] = True
            base = _rank_of_gold(scores, gold, keep)
            assert _rank_of_gold(scores + 5.5, gold, keep) == base

    def test_rank_against_naive_sort_oracle(self):
        kb, groundings = family_setup()
        cfg = TrainerConfig(lr=0.05, max_epochs=30, patience=10)
        params, _ = train(kb, groundings, None, cfg)
        rel = kb.relations.id("grandparent")
        for head in range(kb.num_entities):
            res = rank(params, kb, groundings, None, head, rel, top_k=kb.num_entities)
            scores = {e.tail: e.score for e in res.entries}
            ordered = sorted(scores, key=lambda t: (-scores[t], t))
            assert [e.tail for e in res.entries] == ordered

    def test_filtered_protocol_removes_known_tails(self):
        kb = synthetic.build_kb(
            ["a", "b", "c", "d"],
            ["r"],
            [("a", "r", "b")],
            valid=[("a", "r", "c")],
            test=[("a", "r", "d")],
        )
        params, _ = train(kb, {}, None, TrainerConfig(max_epochs=0))
        res = rank(params, kb, {}, None, 0, 0, gold=kb.entities.id("d"))
        # b (train) and c (valid) are filtered, leaving a, d
        assert res.candidate_count == 2
        assert res.gold_rank == 1.5  # all-zero scores tie

    def test_attributions_sum_to_score(self):
        kb, pool, _ = synthetic.planted_kb(1)
        groundings = ground_all(kb, pool)
        cfg = TrainerConfig(lr=0.1, max_epochs=60, patience=15)
        params, _ = train(kb, groundings, None, cfg)
        rel = kb.relations.id("grandparent")
        checked = 0
        for head in range(0, 20):
            res = rank(params, kb, groundings, None, head, rel, top_k=5)
            for e in res.entries:
                total = sum(v for _, v in e.contributions)
                assert total == pytest.approx(e.score, abs=1e-12)
                checked += 1
        assert checked > 50

    def test_top_k_zero_still_ranks_gold(self):
        kb, groundings = family_setup()
        params, _ = train(kb, groundings, None, TrainerConfig(max_epochs=2, patience=1))
        rel = kb.relations.id("grandparent")
        res = rank(
            params, kb, groundings, None, kb.entities.id("Anna"), rel,
            gold=kb.entities.id("Charlie"), top_k=0,
        )
        assert res.entries == []
        assert res.gold_rank is not None


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        kb, groundings = family_setup()
        cfg = TrainerConfig(lr=0.05, max_epochs=10, patience=5)
        params, _ = train(kb, groundings, None, cfg)
        path = str(tmp_path / "params.json")
        save_params(path, params, kb)
        back = load_params(path, kb)
        for rel, rp in params.per_relation.items():
            brp = back.per_relation[rel]
            np.testing.assert_array_equal(brp.logits, rp.logits)
            assert brp.mix_logit == rp.mix_logit
            assert brp.rule_keys == rp.rule_keys
            assert brp.epochs_trained == rp.epochs_trained
            assert brp.stopped == rp.stopped
        save_params(str(tmp_path / "again.json"), back, kb)
        assert (tmp_path / "params.json").read_bytes() == (tmp_path / "again.json").read_bytes()

    def test_resume_continues_epoch_counters(self, tmp_path):
        kb, groundings = family_setup()
        first = TrainerConfig(lr=0.01, max_epochs=4, patience=100)
        params, _ = train(kb, groundings, None, first)
        rel = kb.relations.id("grandparent")
        assert params.per_relation[rel].epochs_trained == 4
        path = str(tmp_path / "params.json")
        save_params(path, params, kb)
        resumed = load_params(path, kb)
        second = TrainerConfig(lr=0.01, max_epochs=7, patience=100)
        params2, traces2 = train(kb, groundings, None, second, initial=resumed)
        assert params2.per_relation[rel].epochs_trained == 7
        assert len(traces2["grandparent"]["loss"]) == 3

    def test_resume_with_mismatched_rules_raises(self, tmp_path):
        kb, groundings = family_setup()
        params, _ = train(kb, groundings, None, TrainerConfig(max_epochs=1, patience=1))
        path = str(tmp_path / "params.json")
        save_params(path, params, kb)
        loaded = load_params(path, kb)
        provider = TrigramSimilarity()
        other = classify_case(
            map_relations(
                parse_rule("IF (A, parent, B) THEN (A, grandparent, B)"), kb, provider
            )
        )
        different = ground_all(kb, [other])
        with pytest.raises(KBError, match="do not match"):
            train(kb, different, None, TrainerConfig(max_epochs=1, patience=1), initial=loaded)
