import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minirec import decoding as D
from minirec import policy as P
from minirec import tokenizer as T


def exhaustive_ranking(policy, prompt, trie):
    scored = []
    for item, path in trie.paths.items():
        scored.append((-P.sequence_log_prob(policy, prompt, path, trie)[1], path, item))
    scored.sort()
    return [item for _, _, item in scored], [-s for s, _, _ in scored]


def one_item_trie():
    lay = P.VocabLayout(3, 4, 6, 0)
    return D.build_trie([T.SidAssignment(0, (1, 2, 3), np.zeros(1))], {0: (5,)}, lay), lay


class TestTrie:
    def test_one_item_single_path(self):
        trie, lay = one_item_trie()
        assert trie.sid.paths[0] == (lay.sid_token(0, 1), lay.sid_token(1, 2), lay.sid_token(2, 3), lay.EOS)
        for d in range(4):
            assert len(D.legal_next_tokens(trie.sid, trie.sid.paths[0][:d])) == 1

    def test_terminals_equal_catalog(self, tiny):
        assert len(tiny.trie) == len(tiny.catalog) == tiny.trie.title.n_terminals

    def test_every_path_walks_home(self, tiny):
        for a in tiny.table:
            path = tiny.layout.item_tokens(a) + (tiny.layout.EOS,)
            assert tiny.trie.sid.item_at(path) == a.item_id

    def test_after_complete_sid_only_eos(self, tiny):
        a = tiny.table[0]
        assert D.legal_next_tokens(tiny.trie.sid, tiny.layout.item_tokens(a)) == {tiny.layout.EOS}

    def test_depth_unions(self, tiny):
        lay = tiny.layout
        root = D.legal_next_tokens(tiny.trie.sid, ())
        assert root == {lay.sid_token(0, a.codes[0]) for a in tiny.table}
        level1 = set()
        for t0 in root:
            level1 |= D.legal_next_tokens(tiny.trie.sid, (t0,))
        assert level1 == {lay.sid_token(1, a.codes[1]) for a in tiny.table}

    def test_illegal_prefix(self, tiny):
        with pytest.raises(D.IllegalPrefixError):
            tiny.trie.sid.legal((tiny.layout.EOS,))

    def test_duplicate_path_rejected(self):
        lay = P.VocabLayout(3, 4, 6, 0)
        dup = [T.SidAssignment(i, (1, 1, 1), np.zeros(1)) for i in range(2)]
        with pytest.raises(D.DuplicatePathError):
            D.build_trie(dup, None, lay)


class TestBeamSearch:
    def test_exhaustive_oracle(self, tiny):
        prompt = [tiny.layout.BOS, tiny.layout.task_token("generative_retrieval"), tiny.layout.SEP]
        g = D.beam_search(tiny.policy, prompt, len(tiny.catalog), tiny.trie)
        items, scores = exhaustive_ranking(tiny.policy, prompt, tiny.trie.sid)
        assert g.item_ids == items
        np.testing.assert_allclose(g.scores, scores, atol=1e-10)

    def test_scores_are_plain_sums(self, tiny):
        g = D.beam_search(tiny.policy, [1, 4, 3], 8, tiny.trie)
        for s, lp, toks in zip(g.scores, g.token_logprobs, g.completions):
            assert s == pytest.approx(float(sum(lp)), abs=1e-12)
            assert len(lp) == len(toks)

    def test_width_one_is_greedy(self, tiny):
        prompt = [1, 4, 3]
        g = D.beam_search(tiny.policy, prompt, 1, tiny.trie)
        path = []
        node_prompt = list(prompt)
        while not path or path[-1] != tiny.layout.EOS:
            lp = tiny.policy.next_log_probs(np.array(node_prompt + path))[0]
            legal = tiny.trie.sid.legal(path)
            path.append(int(legal[np.argmax(lp[legal])]))
        assert g.completions[0] == tuple(path)

    def test_distinct_legal_items_and_ranks(self, tiny):
        g = D.beam_search(tiny.policy, [1, 4, 3], 16, tiny.trie)
        assert len(set(g.item_ids)) == 16 == len(g)
        assert set(g.item_ids) <= set(range(len(tiny.catalog)))
        assert g.ranks == list(range(1, 17))
        assert D.diversity(g).ratio == 1.0

    def test_width_clamped(self, tiny, caplog):
        with caplog.at_level("INFO"):
            g = D.beam_search(tiny.policy, [1, 4, 3], 100, tiny.trie)
        assert len(g) == len(tiny.catalog) and g.requested_width == 100
        assert "clamped" in caplog.text

    def test_batch_matches_single(self, tiny):
        prompts = [[1, 4, 3], [1, 4, 20, 3], [1, 5, 3]]
        batch = D.beam_search_batch(tiny.policy, prompts, 5, tiny.trie)
        for p, g in zip(prompts, batch):
            assert g.item_ids == D.beam_search(tiny.policy, p, 5, tiny.trie).item_ids

    def test_title_trie(self, tiny):
        g = D.beam_search(tiny.policy, [1, 7, 3], 4, tiny.trie.title)
        for toks, item in zip(g.completions, g.item_ids):
            assert toks[:-1] == tiny.layout.title_tokens(tiny.catalog.title_of(item))

    def test_bad_width(self, tiny):
        with pytest.raises(ValueError):
            D.beam_search(tiny.policy, [1, 4, 3], 0, tiny.trie)


def four_item_setup():
    lay = P.VocabLayout(3, 2, 4, 0)
    table = [T.SidAssignment(i, (i // 2, i % 2, 0), np.zeros(1)) for i in range(4)]
    trie = D.build_trie(table, None, lay)
    pol = P.init_policy(P.PolicyConfig(1, 8, 2, 16, 16, 3, init_std=0.5), lay)
    return pol, trie, lay


class TestSampling:
    def test_frequencies_match_constrained_softmax(self):
        pol, trie, lay = four_item_setup()
        prompt = [lay.BOS, lay.SEP]
        probs = np.array([math.exp(P.sequence_log_prob(pol, prompt, trie.sid.paths[i], trie.sid)[1]) for i in range(4)])
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        n = 10_000
        g = D.sample_top_k(pol, prompt, n, trie, seed=0)
        freq = np.bincount(g.item_ids, minlength=4) / n
        sigma = np.sqrt(probs * (1 - probs) / n)
        assert np.all(np.abs(freq - probs) <= 3 * sigma)

    def test_dominant_item_unique_one(self):
        pol, trie, lay = four_item_setup()
        path = trie.sid.paths[2]
        emb = pol.tensors["tok_emb"].data
        emb[list(path)] *= 400.0
        g = D.sample_top_k(pol, [lay.BOS, lay.SEP], 8, trie, seed=1)
        assert D.diversity(g).unique == 1

    def test_samples_legal_and_ranked(self, tiny):
        g = D.sample_top_k(tiny.policy, [1, 4, 3], 12, tiny.trie, seed=3)
        assert len(g) == 12 and g.n_draws == 12
        assert all(tiny.trie.sid.item_at(c) == i for c, i in zip(g.completions, g.item_ids))
        assert sorted(g.ranks) == list(range(1, 13))
        order = sorted(range(12), key=lambda i: g.ranks[i])
        assert all(g.scores[a] >= g.scores[b] for a, b in zip(order, order[1:]))

    def test_seeded(self, tiny):
        a = D.sample_top_k(tiny.policy, [1, 4, 3], 6, tiny.trie, seed=11)
        b = D.sample_top_k(tiny.policy, [1, 4, 3], 6, tiny.trie, seed=11)
        assert a.item_ids == b.item_ids

    def test_top_k_one_is_greedy(self, tiny):
        g = D.sample_top_k(tiny.policy, [1, 4, 3], 5, tiny.trie, seed=0, top_k=1)
        assert set(g.item_ids) == {D.beam_search(tiny.policy, [1, 4, 3], 1, tiny.trie).item_ids[0]}


class TestDynamic:
    @pytest.mark.parametrize("G", [2, 3, 7, 16])
    def test_draw_count(self, tiny, G):
        g = D.dynamic_sample(tiny.policy, [1, 4, 3], G, None, tiny.trie, seed=0)
        assert g.n_draws == math.ceil(1.5 * G) and len(g) == G

    def draws(self, items):
        n = len(items)
        return D.GenerationGroup((1,), [(i,) for i in items], list(items), [-float(i) for i in range(n)],
                                 [np.zeros(1)] * n, list(range(1, n + 1)), "top_k", n)

    def test_target_first_then_unique(self):
        out = D.select_dynamic(self.draws([5, 5, 6, 9, 7, 5]), 4, target=9)
        assert sorted(out.item_ids) == [5, 6, 7, 9]

    def test_target_not_injected(self):
        out = D.select_dynamic(self.draws([5, 5, 6]), 2, target=9)
        assert 9 not in out.item_ids

    def test_fills_with_duplicates(self):
        out = D.select_dynamic(self.draws([5, 5, 5, 6]), 3, target=None)
        assert sorted(out.item_ids) == [5, 5, 6]

    @given(st.lists(st.integers(0, 6), min_size=6, max_size=6), st.integers(0, 6))
    def test_diversity_not_below_raw_prefix(self, items, target):
        out = D.select_dynamic(self.draws(items), 4, target)
        assert D.diversity(out).unique >= len(set(items[:4]))
        if target in items:
            assert target in out.item_ids

    def test_seeded_trials_diversity(self, tiny):
        for seed in range(100):
            raw = D.sample_top_k(tiny.policy, [1, 4, 3], 6, tiny.trie, seed=seed)
            dyn = D.select_dynamic(raw, 4, None)
            assert D.diversity(dyn).unique >= len(set(raw.item_ids[:4]))

    def test_needs_two(self, tiny):
        with pytest.raises(ValueError):
            D.dynamic_sample(tiny.policy, [1, 4, 3], 1, None, tiny.trie, 0)


class TestDiversity:
    def test_counts(self):
        assert D.diversity(["a", "a", "b", "c"]).ratio == 0.75
        assert D.diversity([3] * 8).ratio == 1 / 8

    def test_empty(self):
        with pytest.raises(ValueError):
            D.diversity([])


def test_trace_dump(tmp_path, tiny):
    g = D.beam_search(tiny.policy, [1, 4, 3], 3, tiny.trie)
    D.dump_traces([g], tmp_path / "t.jsonl", ["p0"])
    rec = (tmp_path / "t.jsonl").read_text()
    assert '"prompt_id": "p0"' in rec and '"ranks": [1, 2, 3]' in rec
