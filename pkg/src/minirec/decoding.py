"""Trie-constrained generation: beam search, ancestral sampling, dynamic sampling.

Every path in a :class:`TokenTrie` ends with EOS, and the EOS node carries the
item id.  At each step illegal tokens are dropped *before* the softmax, so the
step distribution is renormalised over the trie children.  Beam scores are
plain sums of those log-probabilities; nothing is divided by length.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy import KVCache, Policy, VocabLayout

log = logging.getLogger(__name__)


class IllegalPrefixError(KeyError):
    pass


class DuplicatePathError(ValueError):
    pass


class _Node:
    __slots__ = ("children", "item_id", "_legal")

    def __init__(self):
        self.children: dict[int, _Node] = {}
        self.item_id: int | None = None
        self._legal: np.ndarray | None = None

    def legal(self) -> np.ndarray:
        if self._legal is None:
            self._legal = np.array(sorted(self.children), dtype=np.int64)
        return self._legal


class TokenTrie:
    def __init__(self, eos: int):
        self.eos = eos
        self.root = _Node()
        self.paths: dict[int, tuple[int, ...]] = {}

    def add(self, tokens: Sequence[int], item_id: int) -> None:
        path = tuple(tokens) + (self.eos,)
        node = self.root
        for tok in path:
            node._legal = None
            node = node.children.setdefault(int(tok), _Node())
        if node.item_id is not None:
            raise DuplicatePathError(
                f"items {node.item_id} and {item_id} share the token path {path}"
            )
        node.item_id = item_id
        self.paths[item_id] = path

    def node(self, prefix: Sequence[int]) -> _Node:
        node = self.root
        for i, tok in enumerate(prefix):
            nxt = node.children.get(int(tok))
            if nxt is None:
                raise IllegalPrefixError(f"token {tok} at position {i} leaves the trie (prefix {tuple(prefix)})")
            node = nxt
        return node

    def legal(self, prefix: Sequence[int]) -> np.ndarray:
        node = self.node(prefix)
        if not node.children:
            raise IllegalPrefixError(f"prefix {tuple(prefix)} is already complete")
        return node.legal()

    def item_at(self, path: Sequence[int]) -> int:
        item = self.node(path).item_id
        if item is None:
            raise IllegalPrefixError(f"path {tuple(path)} does not end at an item")
        return item

    @property
    def n_terminals(self) -> int:
        return len(self.paths)


@dataclass
class SidTrie:
    sid: TokenTrie
    title: TokenTrie

    def __len__(self) -> int:
        return self.sid.n_terminals


def build_trie(sid_table, title_table: dict[int, Sequence[int]] | None, layout: VocabLayout) -> SidTrie:
    """Tries over item SID token paths and (optionally) title token paths."""
    sid = TokenTrie(layout.EOS)
    for a in sorted(sid_table, key=lambda a: a.item_id):
        sid.add(layout.item_tokens(a), a.item_id)
    title = TokenTrie(layout.EOS)
    for item_id, words in sorted((title_table or {}).items()):
        title.add(layout.title_tokens(words), item_id)
    return SidTrie(sid, title)


def legal_next_tokens(trie: TokenTrie, prefix: Sequence[int]) -> set[int]:
    return {int(t) for t in trie.legal(prefix)}


def _resolve(trie) -> TokenTrie:
    return trie.sid if isinstance(trie, SidTrie) else trie


def _constrained(logits_row: np.ndarray, legal: np.ndarray) -> np.ndarray:
    z = logits_row[legal]
    m = z.max()
    return z - (m + math.log(np.exp(z - m).sum()))


@dataclass
class GenerationGroup:
    prompt: tuple[int, ...]
    completions: list[tuple[int, ...]]
    item_ids: list[int]
    scores: list[float]
    token_logprobs: list[np.ndarray]
    ranks: list[int]
    sampler: str = "beam"
    n_draws: int = 0
    requested_width: int | None = None

    def __len__(self) -> int:
        return len(self.item_ids)

    def to_record(self, prompt_id=None) -> dict:
        return {
            "prompt_id": prompt_id,
            "sampler": self.sampler,
            "candidates": self.item_ids,
            "scores": self.scores,
            "ranks": self.ranks,
        }


@dataclass
class DiversityStat:
    unique: int
    group_size: int

    @property
    def ratio(self) -> float:
        return self.unique / self.group_size


def diversity(group) -> DiversityStat:
    items = group.item_ids if isinstance(group, GenerationGroup) else list(group)
    if not items:
        raise ValueError("diversity of an empty group")
    return DiversityStat(len(set(items)), len(items))


def _buckets(prompts: Sequence[Sequence[int]]) -> dict[int, list[int]]:
    by_len = defaultdict(list)
    for i, p in enumerate(prompts):
        by_len[len(p)].append(i)
    return by_len


def _prefill(policy: Policy, prompts, idxs) -> tuple[KVCache, np.ndarray]:
    cache = KVCache()
    toks = np.array([prompts[i] for i in idxs], dtype=np.int64)
    h = policy.hidden(toks, cache)
    return cache, policy.project(h[:, -1:, :]).data[:, 0]


@dataclass
class _Hyp:
    tokens: tuple
    score: float
    logps: tuple
    node: _Node

    @property
    def done(self) -> bool:
        return self.node.item_id is not None


def beam_search_batch(
    policy: Policy, prompts: Sequence[Sequence[int]], width: int, trie, chunk: int = 64
) -> list[GenerationGroup]:
    """Constrained beam search for many prompts; prompts of equal length share forwards."""
    if width < 1:
        raise ValueError("beam width must be at least 1")
    trie = _resolve(trie)
    eff = min(width, trie.n_terminals)
    if eff < width:
        log.info("beam width %d clamped to %d reachable items", width, eff)
    out: list[GenerationGroup | None] = [None] * len(prompts)
    for _, idxs in sorted(_buckets(prompts).items()):
        for s in range(0, len(idxs), chunk):
            part = idxs[s : s + chunk]
            groups = _beam_bucket(policy, prompts, part, eff, trie)
            for i, g in zip(part, groups):
                g.requested_width = width
                out[i] = g
    return out


def _beam_bucket(policy, prompts, idxs, width, trie) -> list[GenerationGroup]:
    cache, logits = _prefill(policy, prompts, idxs)
    beams = [[_Hyp((), 0.0, (), trie.root)] for _ in idxs]
    rows = [[j] for j in range(len(idxs))]  # cache row per live hypothesis
    while True:
        new_beams, parent_rows, feed = [], [], []
        for p, hyps in enumerate(beams):
            cands = []
            for h, row in zip(hyps, rows[p]):
                if h.done:
                    cands.append((h, None))
                    continue
                legal = h.node.legal()
                lp = _constrained(logits[row], legal)
                for tok, l in zip(legal, lp):
                    tok = int(tok)
                    cands.append(
                        (_Hyp(h.tokens + (tok,), h.score + float(l), h.logps + (float(l),), h.node.children[tok]), row)
                    )
            cands.sort(key=lambda c: (-c[0].score, c[0].tokens))
            kept = cands[:width]
            new_beams.append([c[0] for c in kept])
            prow = []
            for hyp, row in kept:
                if hyp.done:
                    prow.append(None)
                else:
                    prow.append(len(parent_rows))
                    parent_rows.append(row)
                    feed.append(hyp.tokens[-1])
            rows[p] = prow
        beams = new_beams
        if not parent_rows:
            break
        cache = cache.select(parent_rows)
        h = policy.hidden(np.array(feed, dtype=np.int64)[:, None], cache)
        logits = policy.project(h).data[:, 0]
    groups = []
    for i, hyps in zip(idxs, beams):
        hyps = sorted(hyps, key=lambda h: (-h.score, h.tokens))
        groups.append(
            GenerationGroup(
                tuple(prompts[i]),
                [h.tokens for h in hyps],
                [h.node.item_id for h in hyps],
                [h.score for h in hyps],
                [np.array(h.logps) for h in hyps],
                list(range(1, len(hyps) + 1)),
                "beam",
                len(hyps),
            )
        )
    return groups


def beam_search(policy: Policy, prompt: Sequence[int], width: int = 16, trie=None) -> GenerationGroup:
    return beam_search_batch(policy, [prompt], width, trie)[0]


def _rank_by_score(scores: Sequence[float]) -> list[int]:
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranks = [0] * len(scores)
    for r, i in enumerate(order, 1):
        ranks[i] = r
    return ranks


def sample_batch(
    policy: Policy,
    prompts: Sequence[Sequence[int]],
    n: int,
    trie,
    seed: int,
    temperature: float = 1.0,
    top_k: int | None = None,
) -> list[GenerationGroup]:
    """``n`` independent constrained ancestral samples per prompt.

    Scores are the policy's constrained log-probs at temperature 1 without
    truncation; ``temperature``/``top_k`` only shape the draw.
    """
    if n < 1:
        raise ValueError("group size must be at least 1")
    trie = _resolve(trie)
    rng = np.random.default_rng(seed)
    out: list[GenerationGroup | None] = [None] * len(prompts)
    for _, idxs in sorted(_buckets(prompts).items()):
        cache, logits = _prefill(policy, prompts, idxs)
        rep = np.repeat(np.arange(len(idxs)), n)
        cache = cache.select(rep)
        logits = logits[rep]
        hyps = [_Hyp((), 0.0, (), trie.root) for _ in rep]
        live = list(range(len(hyps)))
        while live:
            feed, still = [], []
            for row, hi in enumerate(live):
                h = hyps[hi]
                legal = h.node.legal()
                lp = _constrained(logits[row], legal)
                draw_lp = lp / temperature
                if top_k is not None and top_k < len(legal):
                    cut = np.sort(draw_lp)[-top_k]
                    draw_lp = np.where(draw_lp >= cut, draw_lp, -np.inf)
                p = np.exp(draw_lp - draw_lp.max())
                j = int(rng.choice(len(legal), p=p / p.sum()))
                tok = int(legal[j])
                hyps[hi] = h = _Hyp(h.tokens + (tok,), h.score + float(lp[j]), h.logps + (float(lp[j]),), h.node.children[tok])
                if not h.done:
                    still.append((row, hi))
                    feed.append(tok)
            if not still:
                break
            cache = cache.select([r for r, _ in still])
            live = [hi for _, hi in still]
            hh = policy.hidden(np.array(feed, dtype=np.int64)[:, None], cache)
            logits = policy.project(hh).data[:, 0]
        for b, i in enumerate(idxs):
            g = hyps[b * n : (b + 1) * n]
            scores = [h.score for h in g]
            out[i] = GenerationGroup(
                tuple(prompts[i]),
                [h.tokens for h in g],
                [h.node.item_id for h in g],
                scores,
                [np.array(h.logps) for h in g],
                _rank_by_score(scores),
                "top_k",
                n,
            )
    return out


def sample_top_k(policy, prompt, G, trie, seed, temperature=1.0, top_k=None) -> GenerationGroup:
    return sample_batch(policy, [prompt], G, trie, seed, temperature, top_k)[0]


def select_dynamic(draws: GenerationGroup, G: int, target) -> GenerationGroup:
    """Keep ``G`` of the over-sampled draws: the target first if it was drawn,
    then unseen non-target items in draw order, then repeats to fill."""
    chosen: list[int] = []
    seen = set()
    if target is not None and target in draws.item_ids:
        j = draws.item_ids.index(target)
        chosen.append(j)
        seen.add(target)
    for j, it in enumerate(draws.item_ids):
        if len(chosen) == G:
            break
        if it not in seen:
            chosen.append(j)
            seen.add(it)
    for j in range(len(draws.item_ids)):
        if len(chosen) == G:
            break
        if j not in chosen:
            chosen.append(j)
    chosen.sort()
    scores = [draws.scores[j] for j in chosen]
    return GenerationGroup(
        draws.prompt,
        [draws.completions[j] for j in chosen],
        [draws.item_ids[j] for j in chosen],
        scores,
        [draws.token_logprobs[j] for j in chosen],
        _rank_by_score(scores),
        "dynamic",
        draws.n_draws,
    )


def dynamic_sample_batch(policy, prompts, G, targets, trie, seed, temperature=1.0, top_k=None):
    if G < 2:
        raise ValueError("dynamic sampling needs G >= 2")
    n = math.ceil(1.5 * G)
    draws = sample_batch(policy, prompts, n, trie, seed, temperature, top_k)
    return [select_dynamic(d, G, t) for d, t in zip(draws, targets)]


def dynamic_sample(policy, prompt, G, target, trie, seed, temperature=1.0, top_k=None) -> GenerationGroup:
    return dynamic_sample_batch(policy, [prompt], G, [target], trie, seed, temperature, top_k)[0]


def dump_traces(groups: Sequence[GenerationGroup], path, prompt_ids=None) -> None:
    with open(path, "w") as fh:
        for k, g in enumerate(groups):
            pid = prompt_ids[k] if prompt_ids is not None else k
            fh.write(json.dumps(g.to_record(pid)) + "\n")
