"""Hit rate and NDCG for single-target next-item prediction."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .catalog import Example
from .decoding import beam_search_batch, diversity
from .policy import Policy
from .sft import build_generative_retrieval

log = logging.getLogger(__name__)

CUTOFFS = (3, 5, 10)


def _rank_of(ranked: Sequence[int], target: int) -> int | None:
    for r, it in enumerate(ranked, 1):
        if it == target:
            return r
    return None


def _check_lengths(lists, k: int) -> int:
    short = sum(1 for l in lists if len(l) < k)
    if short:
        log.warning("%d ranked lists are shorter than K=%d; scored with their full list", short, k)
    return short


def hr_at_k(ranked_lists: Sequence[Sequence[int]], targets: Sequence[int], k: int) -> float:
    if len(ranked_lists) != len(targets) or not targets:
        raise ValueError("hr_at_k needs one non-empty ranked list per target")
    _check_lengths(ranked_lists, k)
    hits = [1.0 if target in list(l)[:k] else 0.0 for l, target in zip(ranked_lists, targets)]
    return float(np.mean(hits))


def ndcg_per_example(ranked: Sequence[int], target: int, k: int) -> float:
    r = _rank_of(list(ranked)[:k], target)
    return 0.0 if r is None else 1.0 / math.log2(r + 1)


def ndcg_at_k(ranked_lists: Sequence[Sequence[int]], targets: Sequence[int], k: int) -> float:
    """Mean of ``1/log2(rank+1)`` for targets within the cutoff (IDCG = 1)."""
    if len(ranked_lists) != len(targets) or not targets:
        raise ValueError("ndcg_at_k needs one non-empty ranked list per target")
    _check_lengths(ranked_lists, k)
    return float(np.mean([ndcg_per_example(l, t, k) for l, t in zip(ranked_lists, targets)]))


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    diversity: float
    n_examples: int
    meta: dict = field(default_factory=dict)  # seed, stage, config_hash

    def check(self) -> None:
        ks = sorted(self.hr)
        for a, b in zip(ks, ks[1:]):
            if self.hr[a] > self.hr[b] + 1e-15 or self.ndcg[a] > self.ndcg[b] + 1e-15:
                raise AssertionError(f"metrics not monotone in K between {a} and {b}")
        for k in ks:
            if not 0.0 <= self.ndcg[k] <= self.hr[k] + 1e-15 <= 1.0 + 1e-15:
                raise AssertionError(f"metric bounds violated at K={k}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hr"] = {str(k): v for k, v in self.hr.items()}
        d["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            {int(k): v for k, v in d["hr"].items()},
            {int(k): v for k, v in d["ndcg"].items()},
            d["diversity"],
            d["n_examples"],
            d.get("meta", {}),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def row(self, run_id: str) -> dict:
        r = {"run_id": run_id, "stage": self.meta.get("stage", "")}
        r.update({f"HR@{k}": self.hr[k] for k in CUTOFFS if k in self.hr})
        r.update({f"NDCG@{k}": self.ndcg[k] for k in CUTOFFS if k in self.ndcg})
        r["diversity"] = self.diversity
        return r


LEDGER_FIELDS = ["run_id", "stage"] + [f"HR@{k}" for k in CUTOFFS] + [f"NDCG@{k}" for k in CUTOFFS] + ["diversity"]


def append_ledger(report: MetricsReport, run_id: str, path) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LEDGER_FIELDS)
        if new:
            w.writeheader()
        w.writerow(report.row(run_id))


def report_from_lists(ranked_lists, targets, div: float = 1.0, cutoffs=CUTOFFS, meta=None) -> MetricsReport:
    rep = MetricsReport(
        {k: hr_at_k(ranked_lists, targets, k) for k in cutoffs},
        {k: ndcg_at_k(ranked_lists, targets, k) for k in cutoffs},
        div,
        len(targets),
        dict(meta or {}),
    )
    rep.check()
    return rep


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate_model(
    policy: Policy,
    examples: Sequence[Example],
    sids,
    trie,
    k_max: int = 10,
    width: int = 16,
    meta: dict | None = None,
    return_lists: bool = False,
):
    """Constrained beam decode of every example's prompt, then HR/NDCG at 3/5/10."""
    if width < k_max:
        raise ValueError(f"beam width {width} is below K_max={k_max}")
    prompts = [e.prompt for e in build_generative_retrieval(examples, sids, policy.layout)]
    groups = beam_search_batch(policy, prompts, width, trie)
    lists = [g.item_ids for g in groups]
    targets = [e.target for e in examples]
    div = float(np.mean([diversity(g).ratio for g in groups]))
    rep = report_from_lists(lists, targets, div, tuple(k for k in CUTOFFS if k <= k_max), meta)
    return (rep, lists) if return_lists else rep


def popularity_baseline(train: Sequence[Example], n_items: int | None = None) -> list[int]:
    """Items by descending training-target frequency, ties by item id; unseen items last."""
    counts = Counter(e.target for e in train)
    items = set(counts) if n_items is None else set(range(n_items))
    return sorted(items, key=lambda i: (-counts.get(i, 0), i))


def evaluate_ranking(ranking: Sequence[int], examples: Sequence[Example], meta=None) -> MetricsReport:
    """Metrics for one fixed ranking applied to every example."""
    lists = [list(ranking)] * len(examples)
    return report_from_lists(lists, [e.target for e in examples], 1.0, meta=meta)
