import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tpad.dataset import Corpus, Session, SynthConfig, cold_split, filter_corpus, split_sessions, synth_generate
from tpad.nn_core import cross_entropy, derive_seed, grad_check, make_generator
from tpad.pipeline import EmbeddingTable, TrainConfig
from tpad.recsys import (
    SessionRecModel, _pad, eval_topk, gr_metric, paired_ttest, popularity_ranks, rank_metrics, rec_score, rec_train,
    target_ranks,
)


def table(n, d, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(np.arange(n), rng.normal(size=(n, d)), rng.normal(size=(n, d)), "test")


def np_rec_score(model, prefix):
    """Straight-line recomputation of the fused-item attention recommender."""
    p = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    lin = lambda x, name: x @ p[f"{name}.weight"] + p[f"{name}.bias"]
    ids = p["id_emb"] * p["id_mask"][:, None]
    av = lin(lin(p["ev"], "adapter.first.v"), "adapter.second.v")
    at = lin(lin(p["et"], "adapter.first.t"), "adapter.second.t")
    items = lin(np.concatenate([ids, av, at], axis=1), "fuse")
    h = items[prefix]
    last = h[-1]
    logits = (lin(h, "attn_k") * lin(last, "attn_q")).sum(-1) / math.sqrt(model.d_rec)
    alpha = np.exp(logits - logits.max())
    alpha /= alpha.sum()
    sess = lin(np.concatenate([alpha @ h, last]), "out")
    return items @ sess


class TestMetrics:
    def test_rank_one(self):
        assert rank_metrics(np.array([1, 1, 1])) == {"hr@5": 1.0, "ndcg@5": 1.0, "hr@10": 1.0, "ndcg@10": 1.0}

    def test_rank_seven(self):
        m = rank_metrics(np.array([7]))
        assert m["hr@5"] == 0.0 and m["ndcg@5"] == 0.0 and m["hr@10"] == 1.0

    def test_rank_three_ndcg(self):
        assert rank_metrics(np.array([3]), ks=(5,))["ndcg@5"] == 0.5

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=60))
    def test_ordering_and_monotonicity(self, ranks):
        m = rank_metrics(np.array(ranks), ks=(1, 5, 10, 20))
        for k in (1, 5, 10, 20):
            assert m[f"ndcg@{k}"] <= m[f"hr@{k}"] + 1e-15
        for a, b in ((1, 5), (5, 10), (10, 20)):
            assert m[f"hr@{a}"] <= m[f"hr@{b}"] and m[f"ndcg@{a}"] <= m[f"ndcg@{b}"]

    def test_tie_break_by_row(self):
        scores = np.array([[1.0, 2.0, 2.0, 0.5]])
        assert target_ranks(scores, np.array([1]))[0] == 1
        assert target_ranks(scores, np.array([2]))[0] == 2
        assert target_ranks(scores, np.array([0]))[0] == 3

    def test_uniform_scores_give_k_over_v(self):
        rng = np.random.default_rng(0)
        n_items, n = 200, 20_000
        targets = rng.integers(0, n_items, size=n)
        ranks = target_ranks(np.zeros((n, n_items)), targets)
        for k in (5, 10):
            p = k / n_items
            assert abs(rank_metrics(ranks, ks=(k,))[f"hr@{k}"] - p) <= 3 * math.sqrt(p * (1 - p) / n)


class TestGr:
    def test_ratio(self):
        vk, cat = gr_metric([1] * 8 + [0] * 2, [1] * 10, [{1, 2}] * 10, [{1, 2}] * 10)
        assert vk == pytest.approx(0.8) and cat == 1.0

    def test_empty_prediction_mismatches(self):
        assert gr_metric([0], [0], [set()], [set()]) == (1.0, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gr_metric([0, 1], [0], [{1}], [{1}])

    def test_random_predictions(self):
        rng = np.random.default_rng(1)
        n, c = 10_000, 4
        vk, _ = gr_metric(rng.integers(c, size=n), rng.integers(c, size=n), [{0}] * n, [{0}] * n)
        assert abs(vk - 1 / c) <= 3 * math.sqrt((1 / c) * (1 - 1 / c) / n)


class TestScoring:
    def test_zero_weights_equal_scores(self):
        model = SessionRecModel(6, 4, make_generator(0), table(6, 3))
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        s = rec_score(model, [1, 2])
        assert np.all(s == s[0])

    def test_matches_straight_line_oracle(self):
        model = SessionRecModel(7, 5, make_generator(1), table(7, 3, seed=1))
        for prefix in ([3], [0, 6, 2]):
            np.testing.assert_allclose(rec_score(model, prefix), np_rec_score(model, prefix), atol=1e-12, rtol=0)

    def test_candidate_order_independent(self):
        model = SessionRecModel(7, 5, make_generator(2), table(7, 3, seed=2))
        s = rec_score(model, [1, 4])
        perm = np.random.default_rng(0).permutation(7)
        # per-candidate scores come from a dot product with that candidate alone
        reprs = model.item_reprs().detach()
        p, lengths = _pad([[1, 4]])
        sess = model.session_repr(reprs, p, lengths).detach()[0]
        np.testing.assert_allclose((reprs[perm] @ sess).numpy(), s[perm], atol=1e-12, rtol=0)

    def test_empty_prefix(self):
        with pytest.raises(ValueError):
            rec_score(SessionRecModel(3, 2, make_generator(0)), [])

    def test_cold_item_ignores_id_row(self):
        model = SessionRecModel(6, 4, make_generator(3), table(6, 3, seed=3))
        model.zero_id_rows([2])
        before = rec_score(model, [0, 1])
        with torch.no_grad():
            model.id_emb[2] += 5.0
        np.testing.assert_array_equal(rec_score(model, [0, 1]), before)
        np.testing.assert_array_equal(rec_score(model, [2]), rec_score(model, [2]))

    def test_cross_entropy_gradient(self):
        model = SessionRecModel(6, 3, make_generator(4), table(6, 2, seed=4))
        p, lengths = _pad([[0, 1], [2], [3, 4, 5], [1]])
        y = torch.tensor([2, 3, 0, 5])
        params = dict(model.named_parameters())
        assert grad_check(lambda: cross_entropy(model(p, lengths), y), params, coords_per_param=3) < 1e-4

    def test_id_only_gradient(self):
        model = SessionRecModel(5, 3, make_generator(5))
        p, lengths = _pad([[0, 1], [2], [3, 4], [1]])
        y = torch.tensor([2, 3, 0, 4])
        # attention-key gradients are ~1e-7 here, so a small step drowns in round-off
        assert grad_check(lambda: cross_entropy(model(p, lengths), y), dict(model.named_parameters()), eps=1e-4) < 1e-4


def small_cfg(**kw):
    return TrainConfig(**{"d_rec": 16, "rec_epochs": 3, **kw})


class TestTraining:
    def test_single_item_vocabulary(self):
        c = Corpus(np.array([1]), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1, dtype=np.int64),
                   np.zeros((1, 1), dtype=np.int64), [Session(i, (1, 1)) for i in range(10)], 1, 1)
        sp = split_sessions(c, seed=0)
        res = rec_train(c, sp, None, small_cfg(rec_epochs=1), seed=0)
        rep = eval_topk(res.model, c, c.sessions_for(sp.test))
        assert rep.hr5 == 1.0 and rep.ndcg10 == 1.0

    def test_deterministic_curve(self):
        c = filter_corpus(synth_generate(SynthConfig(n_sessions=300, items_per_cluster=8), 0))
        sp = split_sessions(c, seed=0)
        a = rec_train(c, sp, table(c.n_items, 4), small_cfg(), seed=3)
        b = rec_train(c, sp, table(c.n_items, 4), small_cfg(), seed=3)
        assert a.valid_curve == b.valid_curve

    def test_id_only_beats_popularity(self):
        c = filter_corpus(synth_generate(SynthConfig(n_sessions=2000, items_per_cluster=10), 1))
        sp = split_sessions(c, seed=1)
        res = rec_train(c, sp, None, small_cfg(rec_epochs=4, d_rec=32), seed=1)
        test = c.sessions_for(sp.test)
        pop = rank_metrics(popularity_ranks(c, c.sessions_for(sp.train), test))
        assert eval_topk(res.model, c, test).hr10 > pop["hr@10"]

    def test_cold_items_get_no_training_signal(self):
        c = filter_corpus(synth_generate(SynthConfig(n_sessions=600, items_per_cluster=8), 2))
        sp = cold_split(c, 0.3, seed=2)
        cold = c.rows(sorted(sp.cold_items))
        init = SessionRecModel(c.n_items, 16, make_generator(derive_seed(2, "rec", "init"))).id_emb.detach().clone()
        res = rec_train(c, sp, None, small_cfg(), seed=2)
        # cold ID rows are neither targets nor negatives, so they never move
        assert torch.equal(res.model.id_emb.detach()[cold], init[cold])
        assert torch.all(res.model.id_mask[cold] == 0)

    def test_popularity_oracle(self):
        c = Corpus(np.arange(4), np.zeros((4, 1)), np.zeros((4, 1)), np.zeros(4, dtype=np.int64),
                   np.zeros((4, 1), dtype=np.int64),
                   [Session(0, (2, 2, 3)), Session(1, (2, 0)), Session(2, (1, 3)), Session(3, (0, 1))], 1, 1)
        # training counts: item0 1, item1 1, item2 3, item3 2; ties rank the lower row first
        ranks = popularity_ranks(c, c.sessions[:3], c.sessions)
        assert ranks.tolist() == [2, 3, 2, 4]


def test_paired_ttest_matches_hand_formula():
    a, b = [0.12, 0.10, 0.11, 0.13, 0.09], [0.08, 0.09, 0.07, 0.10, 0.08]
    d = np.subtract(a, b)
    t_hand = d.mean() / (d.std(ddof=1) / math.sqrt(len(d)))
    t, p = paired_ttest(a, b)
    assert t == pytest.approx(t_hand, rel=1e-12)
    assert 0 < p < 0.05
    assert paired_ttest([1, 2], [1, 2]) == (0.0, 1.0)
