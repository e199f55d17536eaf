import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from minirec import catalog as C
from minirec import decoding as D
from minirec import metrics as M
from minirec import policy as P
from minirec import sft as S
from minirec import tokenizer as T


class TestHitRate:
    def test_always_first(self):
        lists = [[1, 2, 3], [4, 5, 6]]
        assert all(M.hr_at_k(lists, [1, 4], k) == 1.0 for k in (1, 2, 3))

    def test_absent(self):
        assert M.hr_at_k([[1, 2], [3, 4]], [9, 9], 2) == 0.0

    def test_direct_count(self):
        lists = [list(range(10)), list(range(10))]
        assert M.hr_at_k(lists, [1, 6], 5) == 0.5

    def test_short_list_flagged(self, caplog):
        with caplog.at_level("WARNING"):
            assert M.hr_at_k([[1, 2]], [2], 5) == 1.0
        assert "shorter than K=5" in caplog.text

    def test_mismatch(self):
        with pytest.raises(ValueError):
            M.hr_at_k([[1]], [1, 2], 1)


class TestNdcg:
    @pytest.mark.parametrize("rank,k,expected", [(1, 10, 1.0), (3, 5, 0.5), (11, 10, 0.0), (2, 3, 1 / math.log2(3))])
    def test_values(self, rank, k, expected):
        ranked = list(range(100, 120))
        target = ranked[rank - 1]
        assert M.ndcg_per_example(ranked, target, k) == pytest.approx(expected, abs=1e-15)

    @given(st.integers(1, 20), st.integers(1, 12))
    def test_range(self, rank, k):
        v = M.ndcg_per_example(list(range(20)), rank - 1, k)
        assert v == 0.0 or 1 / math.log2(k + 1) - 1e-15 <= v <= 1.0


class TestReport:
    @given(st.lists(st.integers(0, 25), min_size=1, max_size=40))
    def test_monotone_and_bounded(self, ranks):
        lists = [list(range(20))] * len(ranks)
        rep = M.report_from_lists(lists, ranks)
        rep.check()
        for k in M.CUTOFFS:
            assert 0 <= rep.ndcg[k] <= rep.hr[k] <= 1

    def test_check_rejects_non_monotone(self):
        rep = M.MetricsReport({3: 0.5, 5: 0.4, 10: 0.6}, {3: 0.1, 5: 0.2, 10: 0.3}, 1.0, 10)
        with pytest.raises(AssertionError):
            rep.check()

    def test_json_and_ledger(self, tmp_path):
        rep = M.report_from_lists([[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]], [3], meta={"seed": 1, "stage": "sft"})
        rep.save(tmp_path / "r.json")
        back = M.MetricsReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
        assert back == rep
        M.append_ledger(rep, "run-a", tmp_path / "runs.csv")
        M.append_ledger(rep, "run-b", tmp_path / "runs.csv")
        lines = (tmp_path / "runs.csv").read_text().splitlines()
        assert lines[0] == ",".join(M.LEDGER_FIELDS) and len(lines) == 3
        assert lines[1].startswith("run-a,sft,")


class TestPopularity:
    def ex(self, targets):
        return [C.Example(0, (0,), t, 1) for t in targets]

    def test_single_item(self):
        assert M.popularity_baseline(self.ex([4]))[0] == 4

    def test_frequency_ties_by_id(self):
        a, b, c, d = 7, 2, 5, 0
        train = self.ex([a] * 5 + [c] * 3 + [b] * 3 + [d])
        assert M.popularity_baseline(train) == [a, b, c, d]

    def test_unseen_items_last(self):
        assert M.popularity_baseline(self.ex([3, 3, 1]), n_items=5) == [3, 1, 0, 2, 4]

    def test_reproducible(self, tiny):
        a = M.evaluate_ranking(M.popularity_baseline(tiny.split.train, 40), tiny.split.test)
        b = M.evaluate_ranking(M.popularity_baseline(tiny.split.train, 40), tiny.split.test)
        assert a == b


class TestEvaluateModel:
    def test_width_below_k(self, tiny):
        with pytest.raises(ValueError):
            M.evaluate_model(tiny.policy, tiny.split.test, tiny.table, tiny.trie, 10, 5)

    def test_deterministic(self, tiny):
        a = M.evaluate_model(tiny.policy, tiny.split.test, tiny.table, tiny.trie, meta={"seed": 0})
        b = M.evaluate_model(tiny.policy, tiny.split.test, tiny.table, tiny.trie, meta={"seed": 0})
        assert a == b and a.diversity == 1.0 and a.n_examples == len(tiny.split.test)

    def test_untrained_near_chance(self):
        cat = C.generate_catalog(0, 120, 8, 6)
        sp = C.truncate_histories(C.chronological_split(C.generate_interactions(1, cat, 600, 0.9)))
        cb = T.train_rq_kmeans(cat.embeddings, 3, 8, 20, 0)
        table = T.sid_table(cat.embeddings, cb)
        lay = P.VocabLayout.for_table(table, 3, 8)
        trie = D.build_trie(table, None, lay)
        # near-zero weights make the constrained distribution uniform over children
        pol = P.init_policy(P.PolicyConfig(1, 8, 2, 16, 64, 0, init_std=1e-6), lay)
        rep = M.evaluate_model(pol, sp.test, table, trie)
        p = 10 / 120
        assert abs(rep.hr[10] - p) <= 3 * math.sqrt(p * (1 - p) / len(sp.test))


def single_level_setup(n=12, seed=0):
    lay = P.VocabLayout(1, n, 4, 0)
    table = [T.SidAssignment(i, (i,), np.zeros(1)) for i in range(n)]
    pol = P.init_policy(P.PolicyConfig(1, 8, 2, 16, 16, seed, init_std=0.5), lay)
    return pol, D.build_trie(table, None, lay)


class TestPrefixStability:
    def test_holds_for_single_token_items(self):
        pol, trie = single_level_setup()
        for seed in range(5):
            pol, trie = single_level_setup(seed=seed)
            wide = D.beam_search(pol, [1, 3], 12, trie).item_ids
            for w in range(1, 12):
                assert D.beam_search(pol, [1, 3], w, trie).item_ids == wide[:w]

    def test_holds_once_width_covers_catalog(self, tiny):
        a = D.beam_search(tiny.trained, [1, 4, 3], len(tiny.catalog), tiny.trie).item_ids
        b = D.beam_search(tiny.trained, [1, 4, 3], 4 * len(tiny.catalog), tiny.trie).item_ids
        assert a == b

    def test_not_guaranteed_for_multi_token_paths(self, tiny):
        # a narrow beam can prune the prefix of the best full path
        prompts = [e.prompt for e in S.build_generative_retrieval(tiny.split.test, tiny.table, tiny.layout)]
        narrow = D.beam_search_batch(tiny.trained, prompts, 1, tiny.trie)
        wide = D.beam_search_batch(tiny.trained, prompts, len(tiny.catalog), tiny.trie)
        assert any(n.item_ids != w.item_ids[:1] for n, w in zip(narrow, wide))
