import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpad.dataset import (
    Corpus, MetaPair, Session, SynthConfig, cluster_bigrams, cold_split, extract_meta_pairs, filter_corpus,
    filter_meta_pairs, load_corpus, save_corpus, split_sessions, synth_generate,
)
from tpad.errors import ConfigError, CorpusParseError, ReferentialError, SplitError


def make_corpus(n_items, sessions, d=3):
    ids = np.arange(1, n_items + 1)
    rng = np.random.default_rng(0)
    return Corpus(ids, rng.normal(size=(n_items, d)), rng.normal(size=(n_items, d)), ids % 2,
                  np.stack([ids % 3, ids % 3 + 3], axis=1), [Session(i, tuple(s)) for i, s in enumerate(sessions)], 2, 6)


def random_sessions(rng, n, n_items=30, max_len=8):
    return [tuple(int(x) for x in rng.integers(1, n_items + 1, size=rng.integers(1, max_len + 1))) for _ in range(n)]


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


class TestLoad:
    def _items(self, n=3):
        return [{"id": i, "feat_txt": [0.1 * i, 1.0], "feat_img": [1.0, 2.0], "vk": i % 2, "cats": [0, 1]}
                for i in range(n)]

    def test_empty_sessions(self, tmp_path):
        write_jsonl(tmp_path / "i.jsonl", self._items())
        (tmp_path / "s.jsonl").write_text("")
        c = load_corpus(tmp_path / "i.jsonl", tmp_path / "s.jsonl")
        assert (c.n_items, len(c.sessions)) == (3, 0)

    def test_counts(self, tmp_path):
        write_jsonl(tmp_path / "i.jsonl", self._items())
        write_jsonl(tmp_path / "s.jsonl", [{"sid": 7, "items": [0, 1, 2]}])
        c = load_corpus(tmp_path / "i.jsonl", tmp_path / "s.jsonl")
        assert (c.n_items, len(c.sessions)) == (3, 1)
        assert c.session(7).target == 2

    def test_parse_error_has_line_number(self, tmp_path):
        (tmp_path / "i.jsonl").write_text(json.dumps(self._items(1)[0]) + "\n{broken\n")
        (tmp_path / "s.jsonl").write_text("")
        with pytest.raises(CorpusParseError) as exc:
            load_corpus(tmp_path / "i.jsonl", tmp_path / "s.jsonl")
        assert exc.value.line_no == 2

    def test_unknown_item_reference(self, tmp_path):
        write_jsonl(tmp_path / "i.jsonl", self._items())
        write_jsonl(tmp_path / "s.jsonl", [{"sid": 0, "items": [0, 9]}])
        with pytest.raises(ReferentialError, match="9"):
            load_corpus(tmp_path / "i.jsonl", tmp_path / "s.jsonl")

    def test_round_trip(self, tmp_path):
        c = synth_generate(SynthConfig(n_sessions=50, items_per_cluster=5), seed=3)
        save_corpus(c, tmp_path / "i.jsonl", tmp_path / "s.jsonl")
        back = load_corpus(tmp_path / "i.jsonl", tmp_path / "s.jsonl")
        np.testing.assert_array_equal(back.feat_txt, c.feat_txt)
        assert back.sessions == c.sessions
        save_corpus(back, tmp_path / "i2.jsonl", tmp_path / "s2.jsonl")
        assert (tmp_path / "i.jsonl").read_bytes() == (tmp_path / "i2.jsonl").read_bytes()


def naive_fixpoint(sessions, min_count, min_len):
    sessions = {i: list(s) for i, s in enumerate(sessions)}
    changed = True
    while changed:
        changed = False
        counts = Counter(x for s in sessions.values() for x in s)
        for sid in list(sessions):
            kept = [x for x in sessions[sid] if counts[x] >= min_count]
            if kept != sessions[sid]:
                sessions[sid], changed = kept, True
        for sid in list(sessions):
            if len(sessions[sid]) < min_len:
                del sessions[sid]
                changed = True
    return {sid: tuple(s) for sid, s in sessions.items()}


class TestFilter:
    def test_unchanged_when_frequent(self):
        c = make_corpus(2, [(1, 2)] * 5)
        f = filter_corpus(c, 5, 2)
        assert [s.items for s in f.sessions] == [(1, 2)] * 5 and f.n_items == 2

    def test_single_item_session_removed(self):
        c = make_corpus(1, [(1,)])
        assert filter_corpus(c, 1, 2).sessions == []

    def test_cascade(self):
        # dropping item 3 shortens session 0 below 2, which drops item 2 below threshold
        sessions = [(2, 3)] + [(1, 1)] * 3 + [(1, 2)] * 1
        got = filter_corpus(make_corpus(3, sessions), 2, 2)
        want = naive_fixpoint(sessions, 2, 2)
        assert {s.sid: s.items for s in got.sessions} == want
        assert 2 not in got.item_ids

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_fixpoint_oracle(self, seed):
        sessions = random_sessions(np.random.default_rng(seed), 40, n_items=25)
        got = filter_corpus(make_corpus(25, sessions), 3, 2)
        assert {s.sid: s.items for s in got.sessions} == naive_fixpoint(sessions, 3, 2)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_idempotent(self, seed):
        c = filter_corpus(make_corpus(25, random_sessions(np.random.default_rng(seed), 40, n_items=25)), 3, 2)
        again = filter_corpus(c, 3, 2)
        assert again.sessions == c.sessions
        np.testing.assert_array_equal(again.item_ids, c.item_ids)


class TestSplit:
    def test_sizes_small(self):
        s = split_sessions(make_corpus(2, [(1, 2)] * 10), (7, 2, 1), 0)
        assert (len(s.train), len(s.valid), len(s.test)) == (7, 2, 1)

    def test_sizes_large(self):
        s = split_sessions(make_corpus(2, [(1, 2)] * 8983), (7, 2, 1), 0)
        sizes = (len(s.train), len(s.valid), len(s.test))
        assert all(abs(a - b) <= 1 for a, b in zip(sizes, (6288, 1797, 898)))

    def test_deterministic_disjoint_exhaustive(self):
        c = make_corpus(2, [(1, 2)] * 57)
        a, b = split_sessions(c, seed=4), split_sessions(c, seed=4)
        assert a == b
        all_ids = a.train + a.valid + a.test
        assert sorted(all_ids) == list(range(57))

    def test_too_few_sessions(self):
        with pytest.raises(SplitError):
            split_sessions(make_corpus(2, [(1, 2)] * 2))


class TestMetaPairs:
    def test_definition(self):
        assert extract_meta_pairs([(1, 2, 3)], 1) == [MetaPair(1, (1,), 2), MetaPair(1, (2,), 3)]
        assert extract_meta_pairs([(1, 2)], 2) == []

    def test_filter_example(self):
        pairs = [MetaPair(1, (1,), 2), MetaPair(1, (3,), 2), MetaPair(1, (4,), 5)]
        assert filter_meta_pairs(pairs) == pairs[:2]
        assert filter_meta_pairs([MetaPair(1, (1,), 2), MetaPair(1, (1,), 3)]) == []

    def test_filter_counts_within_order(self):
        pairs = [MetaPair(1, (1,), 2), MetaPair(2, (0, 1), 2)]
        assert filter_meta_pairs(pairs) == []

    def test_sizes(self):
        sessions = random_sessions(np.random.default_rng(1), 50)
        assert len(extract_meta_pairs(sessions, 1)) == sum(len(s) - 1 for s in sessions)
        assert len(extract_meta_pairs(sessions, 2)) == sum(max(len(s) - 2, 0) for s in sessions)


class TestColdSplit:
    def test_no_cold_in_train(self):
        c = filter_corpus(synth_generate(SynthConfig(n_sessions=800, items_per_cluster=10), 0))
        s = cold_split(c, 0.3, seed=1)
        assert len(s.cold_items) == round(0.3 * c.n_items)
        for sess in c.sessions_for(s.train):
            assert not set(sess.items) & s.cold_items
        assert sorted(s.train + s.valid + s.test) == sorted(x.sid for x in c.sessions)

    def test_tiny_fraction_equals_warm(self):
        c = make_corpus(40, [(1, 2)] * 10)
        # 0.01 * 40 rounds to 0 cold items
        s = cold_split(c, 0.01, seed=2)
        w = split_sessions(c, seed=2)
        assert (s.train, s.valid, s.test) == (w.train, w.valid, w.test) and not s.cold_items

    def test_item_in_every_session(self):
        c = make_corpus(1, [(1, 1)] * 10)
        with pytest.raises(SplitError):
            cold_split(c, 0.5, seed=0)


class TestSynth:
    def test_identity_transitions(self):
        cfg = SynthConfig(n_sessions=200, items_per_cluster=5, t_mat=tuple(tuple(float(i == j) for j in range(8)) for i in range(8)))
        c = synth_generate(cfg, 0)
        for p in extract_meta_pairs(c.sessions, 1):
            assert c.clusters[c.row(p.query[0])] == c.clusters[c.row(p.target)]

    def test_zero_noise(self):
        c = synth_generate(SynthConfig(n_sessions=10, items_per_cluster=4, sigma=0.0), 0)
        for k in range(8):
            rows = np.flatnonzero(c.clusters == k)
            assert np.all(c.feat_txt[rows] == c.feat_txt[rows[0]])
            assert np.all(c.feat_img[rows] == c.feat_img[rows[0]])

    def test_bigrams_match_planted_matrix(self):
        cfg = SynthConfig(n_sessions=3600, items_per_cluster=5)
        c = synth_generate(cfg, 5)
        counts = cluster_bigrams(c)
        n_from = counts.sum(axis=1, keepdims=True)
        assert counts.sum() >= 10_000
        t = cfg.transition_matrix()
        z = np.abs(counts / n_from - t) / np.sqrt(t * (1 - t) / n_from)
        # 64 cells at 3 sigma: about 0.17 exceedances expected, two or more has p ~ 1%
        assert (z > 3).sum() <= 1 and z.max() <= 4

    def test_reproducible(self):
        a, b = synth_generate(SynthConfig(n_sessions=30), 9), synth_generate(SynthConfig(n_sessions=30), 9)
        assert a.sessions == b.sessions and np.array_equal(a.feat_img, b.feat_img)

    def test_labels_are_cluster_functions(self):
        c = synth_generate(SynthConfig(n_sessions=10), 0)
        for k in range(8):
            rows = np.flatnonzero(c.clusters == k)
            assert len(set(c.vk[rows])) == 1 and len({tuple(x) for x in c.cats[rows]}) == 1

    def test_bad_matrix(self):
        with pytest.raises(ConfigError):
            synth_generate(SynthConfig(n_clusters=2, t_mat=((0.5, 0.6), (0.5, 0.5))), 0)
