import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from minirec import autodiff as ad
from minirec import catalog as C
from minirec import policy as P
from minirec import sft as S
from minirec import tokenizer as T


class TestGenerativeRetrieval:
    def test_length_arithmetic(self, tiny):
        plain = next(a for a in tiny.table if not a.extended)
        other = next(a for a in tiny.table if not a.extended and a.item_id != plain.item_id)
        ex = S.gr_example((plain.item_id,), other.item_id, S.sid_lookup(tiny.table), tiny.layout)
        assert ex.n_prompt == 1 + 1 + 3 + 1
        assert ex.completion == tiny.layout.item_tokens(other) + (tiny.layout.EOS,)

    def test_mask_covers_completion_only(self, tiny):
        for ex in S.build_generative_retrieval(tiny.split.train[:30], tiny.table, tiny.layout):
            n = ex.n_prompt
            assert not any(ex.mask[:n]) and all(ex.mask[n:])
            assert ex.tokens[n - 1] == tiny.layout.SEP and ex.tokens[-1] == tiny.layout.EOS

    def test_history_round_trip(self, tiny):
        for e in tiny.split.train[:50]:
            ex = S.gr_example(e.history, e.target, S.sid_lookup(tiny.table), tiny.layout)
            assert S.decode_sid_history(ex.prompt, tiny.layout, tiny.table) == list(e.history)

    def test_round_trip_with_disambiguation(self):
        lay = P.VocabLayout(3, 2, 4, 2)
        table = [T.SidAssignment(0, (0, 0, 0), np.zeros(1), 0, True), T.SidAssignment(1, (0, 0, 0), np.zeros(1), 1, True),
                 T.SidAssignment(2, (1, 1, 1), np.zeros(1))]
        ex = S.gr_example((1, 2, 0), 2, S.sid_lookup(table), lay)
        assert S.decode_sid_history(ex.prompt, lay, table) == [1, 2, 0]

    def test_missing_sid(self, tiny):
        with pytest.raises(KeyError, match="999"):
            S.gr_example((999,), 0, S.sid_lookup(tiny.table), tiny.layout)


class TestAlignment:
    def test_title_sid_inverse(self, tiny):
        lookup = S.sid_lookup(tiny.table)
        for i in range(len(tiny.catalog)):
            a = S.alignment_example("sid_to_title", tiny.catalog, lookup, tiny.layout, i)
            b = S.alignment_example("title_to_sid", tiny.catalog, lookup, tiny.layout, i)
            assert a.completion[:-1] == b.prompt[2:-1]
            assert b.completion[:-1] == a.prompt[2:-1]

    def test_text_history_uses_titles(self, tiny):
        lookup = S.sid_lookup(tiny.table)
        ex = S.alignment_example("text_history_to_sid", tiny.catalog, lookup, tiny.layout, 3, (1, 2))
        kinds = {tiny.layout.kind(t) for t in ex.prompt[2:]}
        assert kinds == {"word", "sep"}

    def test_unknown_task(self, tiny):
        with pytest.raises(ValueError):
            S.alignment_example("summarize", tiny.catalog, S.sid_lookup(tiny.table), tiny.layout, 0)

    def test_zero_weight_family_absent(self, tiny):
        mix = S.TaskMix((0.7, 0.1, 0.0, 0.1, 0.1))
        tasks = Counter(e.task for e in S.build_alignment_examples(tiny.catalog, tiny.split, tiny.table, tiny.layout, mix))
        assert tasks["sid_history_to_title"] == 0 and tasks["sid_to_title"] > 0

    def test_no_align_mix(self, tiny):
        assert S.build_alignment_examples(tiny.catalog, tiny.split, tiny.table, tiny.layout, S.TaskMix.no_align()) == []

    def test_proportions_large_corpus(self):
        cat = C.generate_catalog(0, 300, 8, 10)
        sp = C.truncate_histories(C.chronological_split(C.generate_interactions(1, cat, 1400, 0.9)))
        cb = T.train_rq_kmeans(cat.embeddings, 3, 16, 20, 0)
        table = T.sid_table(cat.embeddings, cb)
        lay = P.VocabLayout.for_table(table, 3, 16)
        corpus = S.build_corpus(cat, sp, table, lay, S.TaskMix())
        assert len(corpus) >= 10_000
        share = Counter(e.task for e in corpus)
        for task, w in zip(P.TASKS, S.TaskMix().weights):
            assert abs(share[task] / len(corpus) - w) <= 0.02

    def test_deterministic(self, tiny):
        a = S.build_corpus(tiny.catalog, tiny.split, tiny.table, tiny.layout, S.TaskMix(), seed=3)
        b = S.build_corpus(tiny.catalog, tiny.split, tiny.table, tiny.layout, S.TaskMix(), seed=3)
        assert a == b


class TestTaskMix:
    @given(st.integers(1, 5000))
    def test_counts_total(self, n):
        c = S.TaskMix().counts(n)
        assert n + sum(c.values()) == round(n / 0.6)
        assert set(c) == set(S.ALIGN_TASKS)

    @pytest.mark.parametrize("w", [(0.5, 0.5), (0.5, 0.5, 0.1, 0.0, -0.1), (0.0, 0.25, 0.25, 0.25, 0.25), (0.5, 0.1, 0.1, 0.1, 0.1)])
    def test_rejects(self, w):
        with pytest.raises(ValueError):
            S.TaskMix(w)


class TestCorpusFile:
    def test_round_trip(self, tiny, tmp_path):
        corpus = S.build_corpus(tiny.catalog, tiny.split, tiny.table, tiny.layout, S.TaskMix())
        S.save_corpus(corpus, tmp_path / "c.jsonl")
        assert S.load_corpus(tmp_path / "c.jsonl") == corpus

    def test_bad_record(self, tmp_path):
        (tmp_path / "c.jsonl").write_text('{"tokens": [1, 2], "mask": [0, 0], "task": "x"}\n')
        with pytest.raises(ValueError, match=":1:"):
            S.load_corpus(tmp_path / "c.jsonl")


def toy_examples(n=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        prompt = [1, 4] + list(rng.integers(9, 29, 3)) + [3]
        comp = list(rng.integers(9, 29, 3)) + [2]
        out.append(S.TrainingExample(tuple(prompt + comp), (False,) * 6 + (True,) * 4, "generative_retrieval"))
    return out


def toy_policy(seed=0):
    return P.init_policy(P.PolicyConfig(2, 16, 2, 32, 16, seed), P.VocabLayout(3, 4, 6, 2))


class TestLoss:
    def test_masked_labels_ignored(self):
        pol = toy_policy()
        toks, mask = S.pad_batch(toy_examples(4))
        base = S.batch_loss(pol, toks, mask).item()
        logits = pol.logits(toks)
        labels = toks[:, 1:].copy()
        labels[mask[:, 1:] == 0] = 7
        perturbed = ad.softmax_cross_entropy(logits[:, :-1], labels, mask[:, 1:]).item()
        assert perturbed == pytest.approx(base, abs=1e-12)

    def test_masked_logit_gradient_zero(self):
        pol = toy_policy()
        toks, mask = S.pad_batch(toy_examples(3))
        logits = ad.Tensor(pol.logits(toks).data, requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.softmax_cross_entropy(logits[:, :-1], toks[:, 1:], mask[:, 1:])
        g = tape.gradient(loss, [logits])[0]
        assert not g[:, :5].any() and g[:, 5:-1].any()

    def test_untrained_near_uniform(self):
        pol = toy_policy()
        v = pol.layout.size
        assert S.eval_loss(pol, toy_examples(20)) == pytest.approx(math.log(v), rel=0.05)

    def test_eval_loss_pure_and_deterministic(self):
        pol = toy_policy()
        before = {n: a.copy() for n, a in pol.arrays().items()}
        exs = toy_examples(10)
        assert S.eval_loss(pol, exs) == S.eval_loss(pol, exs)
        assert all(np.array_equal(before[n], a) for n, a in pol.arrays().items())

    def test_pad_batch(self):
        exs = toy_examples(2)
        short = S.TrainingExample((1, 4, 3, 20, 2), (False, False, False, True, True), "generative_retrieval")
        toks, mask = S.pad_batch(exs + [short])
        assert toks.shape == (3, 10) and not toks[2, 5:].any() and not mask[2, 5:].any()


class TestSftTrain:
    def test_memorizes_eight_examples(self):
        res = S.sft_train(toy_policy(), toy_examples(8), None, S.SftConfig(batch_size=8, lr=1e-2, max_steps=300))
        assert res.step_losses[-1] < 0.05
        assert len(res.step_losses) == 300

    def test_best_checkpoint_returned(self, tiny):
        corpus = S.build_generative_retrieval(tiny.split.train, tiny.table, tiny.layout)
        valid = S.build_generative_retrieval(tiny.split.valid, tiny.table, tiny.layout)
        res = S.sft_train(tiny.policy.copy(), corpus, valid, S.SftConfig(epochs=30, batch_size=16, lr=1e-2))
        best = min(h["valid_loss"] for h in res.history)
        assert res.history[res.best_epoch - 1]["valid_loss"] == best
        assert S.eval_loss(res.policy, valid) == pytest.approx(best, abs=1e-12)
        assert best <= res.history[-1]["valid_loss"]
        # patience one: stops right after the first non-improving epoch
        if len(res.history) < 30:
            assert res.history[-1]["valid_loss"] >= res.history[-2]["valid_loss"]
            assert res.best_epoch == len(res.history) - 1

    def test_train_below_valid_after_convergence(self, tiny):
        corpus = S.build_generative_retrieval(tiny.split.train, tiny.table, tiny.layout)
        valid = S.build_generative_retrieval(tiny.split.valid, tiny.table, tiny.layout)
        res = S.sft_train(tiny.trained.copy(), corpus, None, S.SftConfig(epochs=30, batch_size=32, lr=3e-3))
        assert S.eval_loss(res.policy, corpus) <= S.eval_loss(res.policy, valid)

    def test_cosine_schedule_recorded(self):
        res = S.sft_train(toy_policy(), toy_examples(8), None, S.SftConfig(batch_size=4, epochs=2))
        assert res.opt_state.schedule == {"kind": "cosine", "total": 4, "base_lr": 3e-4}
        assert res.opt_state.step == 4

    def test_divergence(self):
        pol = toy_policy()
        pol.tensors["tok_emb"].data[:] = np.inf
        with pytest.raises(S.TrainingDiverged):
            S.sft_train(pol, toy_examples(4), None, S.SftConfig(batch_size=4, epochs=1))

    def test_empty(self):
        with pytest.raises(ValueError):
            S.sft_train(toy_policy(), [], None)

    def test_loss_csv(self, tmp_path):
        S.write_loss_csv([{"epoch": 1, "train_loss": 2.0, "valid_loss": 2.5}], tmp_path / "l.csv")
        assert (tmp_path / "l.csv").read_text().splitlines() == ["epoch,train_loss,valid_loss", "1,2.0,2.5"]
