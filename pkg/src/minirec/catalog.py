"""Synthetic item catalog, interaction logs with a planted cluster-level
Markov pattern, chronological splits, and a matrix-factorisation scorer.

Embeddings stand in for frozen text-encoder outputs: cluster centre plus
isotropic noise, so items in one latent category sit close together.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

N_WORDS = 64


@dataclass(frozen=True)
class Item:
    item_id: int
    embedding: np.ndarray
    title_tokens: tuple[int, ...]
    cluster_label: int


@dataclass
class Catalog:
    items: list[Item]

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, item_id: int) -> Item:
        return self.items[item_id]

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([it.embedding for it in self.items])

    @property
    def cluster_labels(self) -> np.ndarray:
        return np.array([it.cluster_label for it in self.items])

    @property
    def dim(self) -> int:
        return self.items[0].embedding.shape[0]

    def title_of(self, item_id: int) -> tuple[int, ...]:
        return self.items[item_id].title_tokens


@dataclass
class InteractionLog:
    sequences: dict[int, list[int]]
    kernel: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.sequences)


@dataclass(frozen=True)
class Example:
    user_id: int
    history: tuple[int, ...]
    target: int
    position: int


@dataclass
class DatasetSplit:
    train: list[Example] = field(default_factory=list)
    valid: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)


def generate_catalog(
    seed: int,
    n_items: int,
    dim: int,
    n_clusters: int,
    noise: float = 0.1,
    center_scale: float = 1.0,
) -> Catalog:
    """Cluster-plus-noise embeddings with unique word-token titles.

    Items are dealt to clusters round-robin so every cluster has
    ``n_items // n_clusters`` or one more members.  A title is the cluster
    word followed by random suffix words; on a clash another suffix word is
    appended until the title is new.
    """
    if n_clusters > n_items:
        raise ValueError("n_clusters must not exceed n_items")
    if dim < 4:
        raise ValueError("dim must be at least 4")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(n_clusters, dim))
    labels = np.arange(n_items) % n_clusters
    noise_draw = rng.normal(0.0, 1.0, size=(n_items, dim))
    cluster_words = rng.permutation(N_WORDS)
    seen: set[tuple[int, ...]] = set()
    items = []
    for i in range(n_items):
        c = int(labels[i])
        title = (int(cluster_words[c % N_WORDS]), int(rng.integers(N_WORDS)))
        while title in seen:
            title = title + (int(rng.integers(N_WORDS)),)
        seen.add(title)
        items.append(Item(i, centers[c] + noise * noise_draw[i], title, c))
    return Catalog(items)


def make_kernel(rng: np.random.Generator, n_clusters: int, primary_weight: float = 0.75) -> np.ndarray:
    """Sparse cluster transition matrix: a primary and a secondary successor
    per cluster, each taken from a random permutation.

    Both successor maps are permutations, so the kernel is doubly stochastic
    and its stationary distribution is uniform: cluster popularity carries no
    signal and the only learnable structure is sequential.
    """
    kernel = np.zeros((n_clusters, n_clusters))
    primary = rng.permutation(n_clusters)
    secondary = rng.permutation(n_clusters)
    for c in range(n_clusters):
        kernel[c, primary[c]] += primary_weight
        kernel[c, secondary[c]] += 1.0 - primary_weight
    return kernel


def generate_interactions(
    seed: int,
    catalog: Catalog,
    n_users: int,
    markov_sharpness: float,
    min_len: int = 5,
    max_len: int = 9,
) -> InteractionLog:
    """Per-user sequences whose next-item cluster follows the planted kernel
    with probability ``markov_sharpness`` and is uniform otherwise."""
    if not 0.0 <= markov_sharpness <= 1.0:
        raise ValueError("markov_sharpness must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = catalog.cluster_labels
    n_clusters = int(labels.max()) + 1
    members = [np.flatnonzero(labels == c) for c in range(n_clusters)]
    kernel = make_kernel(rng, n_clusters)
    sequences = {}
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        seq = [int(rng.integers(len(catalog)))]
        for _ in range(length - 1):
            cur = labels[seq[-1]]
            if rng.random() < markov_sharpness:
                nxt = int(rng.choice(n_clusters, p=kernel[cur]))
            else:
                nxt = int(rng.integers(n_clusters))
            seq.append(int(rng.choice(members[nxt])))
        sequences[u] = seq
    return InteractionLog(sequences, kernel)


def split_counts(n_examples: int) -> tuple[int, int, int]:
    """Train/valid/test sizes for one user's ``n_examples`` chronological examples."""
    if n_examples < 3:
        return n_examples, 0, 0
    n_train = int(math.floor(0.8 * n_examples))
    rest = n_examples - n_train
    n_valid = rest // 2
    return n_train, n_valid, rest - n_valid


def chronological_split(log: InteractionLog) -> DatasetSplit:
    """Leave-last-out style 8:1:1 split over each user's (prefix, next item) examples."""
    if not log.sequences:
        raise ValueError("interaction log is empty")
    split = DatasetSplit()
    for user in sorted(log.sequences):
        seq = log.sequences[user]
        examples = [Example(user, tuple(seq[:t]), seq[t], t) for t in range(1, len(seq))]
        n_train, n_valid, _ = split_counts(len(examples))
        split.train.extend(examples[:n_train])
        split.valid.extend(examples[n_train : n_train + n_valid])
        split.test.extend(examples[n_train + n_valid :])
    return split


def truncate_histories(split: DatasetSplit, max_len: int = 10) -> DatasetSplit:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")

    def cut(exs: Iterable[Example]) -> list[Example]:
        return [replace(e, history=e.history[-max_len:]) for e in exs]

    return DatasetSplit(cut(split.train), cut(split.valid), cut(split.test))


# --- persistence -----------------------------------------------------------


def save_catalog(catalog: Catalog, path) -> None:
    with open(path, "w") as fh:
        for it in catalog.items:
            rec = {
                "item_id": it.item_id,
                "embedding": [float(v) for v in it.embedding],
                "title_tokens": list(it.title_tokens),
                "cluster_label": it.cluster_label,
            }
            fh.write(json.dumps(rec) + "\n")


def load_catalog(path) -> Catalog:
    items = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items.append(
                    Item(
                        int(rec["item_id"]),
                        np.asarray(rec["embedding"], dtype=np.float64),
                        tuple(int(t) for t in rec["title_tokens"]),
                        int(rec["cluster_label"]),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad catalog record ({exc})") from None
    items.sort(key=lambda it: it.item_id)
    return Catalog(items)


def save_interactions(log: InteractionLog, path) -> None:
    with open(path, "w") as fh:
        for user in sorted(log.sequences):
            fh.write(json.dumps({"user_id": user, "items": log.sequences[user]}) + "\n")


def load_interactions(path) -> InteractionLog:
    sequences = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sequences[int(rec["user_id"])] = [int(i) for i in rec["items"]]
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad interaction record ({exc})") from None
    return InteractionLog(sequences)


# --- collaborative-filtering baseline --------------------------------------


@dataclass
class CfBaseline:
    """Factorisation scorer; a user is the mean of its history's context factors.

    ``score(history, items) = mean(P[history]) . Q[items] + b[items]``
    """

    context_factors: np.ndarray
    item_factors: np.ndarray
    item_bias: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    def user_vector(self, history: Sequence[int]) -> np.ndarray:
        return self.context_factors[list(history)].mean(0)

    def score(self, history: Sequence[int], items=None) -> np.ndarray:
        u = self.user_vector(history)
        if items is None:
            return self.item_factors @ u + self.item_bias
        items = np.asarray(items)
        return self.item_factors[items] @ u + self.item_bias[items]

    def rank(self, history: Sequence[int], k: int | None = None) -> list[int]:
        s = self.score(history)
        order = np.lexsort((np.arange(s.size), -s))
        return [int(i) for i in (order if k is None else order[:k])]


def init_cf_baseline(n_items: int, factors: int, seed: int = 0) -> CfBaseline:
    if factors < 2:
        raise ValueError("factors must be at least 2")
    rng = np.random.default_rng(seed)
    return CfBaseline(
        rng.normal(0, 0.1, (n_items, factors)),
        rng.normal(0, 0.1, (n_items, factors)),
        np.zeros(n_items),
    )


def train_cf_baseline(
    train: Sequence[Example],
    n_items: int,
    factors: int = 16,
    epochs: int = 10,
    lr: float = 1e-2,
    batch_size: int = 256,
    seed: int = 0,
) -> CfBaseline:
    """BCE matrix factorisation with one uniformly sampled negative per positive."""
    cf = init_cf_baseline(n_items, factors, seed)
    if epochs == 0 or not train:
        return cf
    rng = np.random.default_rng(seed + 1)
    max_h = max(len(e.history) for e in train)
    hist_idx = np.zeros((len(train), max_h), dtype=np.int64)
    hist_w = np.zeros((len(train), max_h))
    for r, e in enumerate(train):
        hist_idx[r, : len(e.history)] = e.history
        hist_w[r, : len(e.history)] = 1.0 / len(e.history)
    pos = np.array([e.target for e in train])
    P = ad.Tensor(cf.context_factors, requires_grad=True, name="context_factors")
    Q = ad.Tensor(cf.item_factors, requires_grad=True, name="item_factors")
    b = ad.Tensor(cf.item_bias[:, None], requires_grad=True, name="item_bias")
    params = [P, Q, b]
    opt = ad.AdamW(params, lr=lr, weight_decay=0.0)
    for _ in range(epochs):
        order = rng.permutation(len(train))
        neg_all = rng.integers(n_items, size=len(train))
        total = 0.0
        for start in range(0, len(order), batch_size):
            rows = order[start : start + batch_size]
            with ad.Tape() as tape:
                u = (ad.embedding(P, hist_idx[rows]) * hist_w[rows][..., None]).sum(1)
                items = np.stack([pos[rows], neg_all[rows]], 1)
                q = ad.embedding(Q, items)
                s = (q * u.reshape(len(rows), 1, factors)).sum(2) + ad.embedding(b, items).reshape(len(rows), 2)
                labels = np.tile([1.0, 0.0], (len(rows), 1))
                # BCE with logits: softplus(s) - y*s, softplus via log(1 + exp(s))
                loss = (ad.log(1.0 + ad.exp(s)) - s * labels).sum() * (1.0 / len(rows))
            opt.step(tape.gradient(loss, params))
            total += loss.item() * len(rows)
        cf.loss_history.append(total / len(train))
    cf.context_factors = P.data
    cf.item_factors = Q.data
    cf.item_bias = b.data[:, 0]
    return cf
