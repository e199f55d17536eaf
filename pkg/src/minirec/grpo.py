"""Group-relative policy optimisation on top of an SFT checkpoint.

A rollout group is G constrained completions for one prompt.  Rewards are
normalised within the group to advantages, broadcast to every token, and
optimised with a clipped importance-ratio surrogate minus a k3 KL penalty
towards the frozen reference policy.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .catalog import Catalog, CfBaseline
from .decoding import (
    GenerationGroup,
    SidTrie,
    beam_search_batch,
    diversity,
    dynamic_sample_batch,
    sample_batch,
)
from .policy import Policy
from .sft import ALIGN_TASKS, TaskMix, TrainingExample

log = logging.getLogger(__name__)

SAMPLERS = ("beam", "top_k", "dynamic")


@dataclass(frozen=True)
class RewardRecipe:
    rule: bool = True
    rank: bool = True
    collaborative: bool = False
    semantic: bool = False
    collaborative_weight: float = 1.0
    semantic_weight: float = 1.0

    @classmethod
    def rule_only(cls) -> "RewardRecipe":
        return cls(rank=False)


@dataclass
class RLConfig:
    group_size: int = 16
    clip_eps: float = 0.2
    beta_kl: float = 0.04
    lr: float = 1e-5
    epochs: int = 2
    std_floor: float = 1e-6
    sampler: str = "beam"
    recipe: RewardRecipe = field(default_factory=RewardRecipe)
    prompts_per_step: int = 8
    max_prompts: int | None = None  # generative-retrieval prompts per epoch (None: all)
    align: bool = True
    mix: TaskMix = field(default_factory=TaskMix)
    weight_decay: float = 0.01
    temperature: float = 1.0
    top_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; choose from {SAMPLERS}")


# --- rewards ---------------------------------------------------------------


@dataclass
class RewardVector:
    rule: np.ndarray
    rank: np.ndarray
    dense: dict[str, np.ndarray]
    total: np.ndarray
    target: int


def rule_reward(candidate, target) -> float:
    return 1.0 if candidate == target else 0.0


def ranking_reward(items: Sequence, ranks: Sequence[int], target, log_fn: Callable = np.log) -> np.ndarray:
    """``-R_hat / sum(R_hat)`` with ``R_hat = -1/log(rank+1)`` on negatives, 0 on the target.

    Harder (higher-ranked) negatives receive larger penalties; the penalties
    sum to -1 whenever at least one negative is present.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    neg = np.array([it != target for it in items])
    raw = np.where(neg, -1.0 / log_fn(ranks + 1.0), 0.0)
    total = raw.sum()
    if total == 0.0:
        return np.zeros(len(items))
    return -raw / total


def collaborative_reward(items: Sequence[int], history: Sequence[int], cf: CfBaseline) -> np.ndarray:
    """CF scores of the candidates, standardised within the group."""
    s = cf.score(history, np.asarray(items))
    sd = s.std()
    return np.zeros(len(items)) if sd < 1e-12 else (s - s.mean()) / sd


def semantic_reward(items: Sequence[int], target: int, embeddings: np.ndarray) -> np.ndarray:
    """Cosine similarity between each candidate's embedding and the target's."""
    t = embeddings[target]
    tn = np.linalg.norm(t)
    out = np.zeros(len(items))
    for j, it in enumerate(items):
        e = embeddings[it]
        den = np.linalg.norm(e) * tn
        out[j] = 0.0 if den == 0.0 else float(np.clip(e @ t / den, -1.0, 1.0))
    return out


def combined_reward(
    group: GenerationGroup,
    target: int,
    recipe: RewardRecipe = RewardRecipe(),
    cf: CfBaseline | None = None,
    history: Sequence[int] = (),
    catalog: Catalog | None = None,
) -> RewardVector:
    items = group.item_ids
    rule = np.array([rule_reward(it, target) for it in items])
    rank = ranking_reward(items, group.ranks, target) if recipe.rank else np.zeros(len(items))
    dense = {}
    if recipe.collaborative:
        if cf is None:
            raise ValueError("collaborative reward needs a CF baseline")
        dense["collaborative"] = recipe.collaborative_weight * collaborative_reward(items, history, cf)
    if recipe.semantic:
        if catalog is None:
            raise ValueError("semantic reward needs the catalog")
        dense["semantic"] = recipe.semantic_weight * semantic_reward(items, target, catalog.embeddings)
    total = (rule if recipe.rule else np.zeros(len(items))) + rank + sum(dense.values(), np.zeros(len(items)))
    return RewardVector(rule, rank, dense, total, target)


def normalize_advantages(rewards: Sequence[float], std_floor: float = 1e-6) -> np.ndarray:
    """``(R - mean) / std`` with the population std; all zeros when std < floor."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need a group of at least 2")
    sd = r.std()
    if sd < std_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / sd


def k3_kl(logp: np.ndarray, ref_logp: np.ndarray) -> np.ndarray:
    d = ref_logp - logp
    return np.exp(d) - d - 1.0


# --- loss ------------------------------------------------------------------


@dataclass
class RolloutGroup:
    prompt: tuple[int, ...]
    completions: list[tuple[int, ...]]
    item_ids: list[int]
    target: int
    task: str
    trie: object  # TokenTrie used for legality masks
    rewards: RewardVector | None = None
    advantages: np.ndarray | None = None
    old_logprobs: list[np.ndarray] | None = None
    ref_logprobs: list[np.ndarray] | None = None
    diversity: float = 1.0
    n_draws: int = 0

    @property
    def informative(self) -> bool:
        return self.advantages is not None and bool(np.any(self.advantages != 0.0))


def _pack(groups: Sequence[RolloutGroup], vocab: int):
    """Right-padded prompt+completion rows with per-token legality masks."""
    rows, spans, legal = [], [], []
    for g in groups:
        for comp in g.completions:
            rows.append(tuple(g.prompt) + tuple(comp))
            spans.append((len(g.prompt), len(comp)))
            m = np.zeros((len(comp), vocab), dtype=bool)
            for t in range(len(comp)):
                m[t, g.trie.legal(comp[:t])] = True
            legal.append(m)
    T = max(len(r) for r in rows)
    C = max(n for _, n in spans)
    toks = np.zeros((len(rows), T), dtype=np.int64)
    # gather index of the logit row predicting completion token t
    pos = np.zeros((len(rows), C), dtype=np.int64)
    tgt = np.zeros((len(rows), C), dtype=np.int64)
    tmask = np.zeros((len(rows), C))
    lmask = np.zeros((len(rows), C, vocab), dtype=bool)
    lmask[..., 0] = True  # padded steps: any admissible entry keeps the softmax defined
    for r, (row, (p, n), m) in enumerate(zip(rows, spans, legal)):
        toks[r, : len(row)] = row
        pos[r, :n] = np.arange(p - 1, p + n - 1)
        tgt[r, :n] = row[p:]
        tmask[r, :n] = 1.0
        lmask[r, :n] = m
    return toks, pos, tgt, tmask, lmask


def token_logprobs(policy: Policy, packed) -> ad.Tensor:
    """Constrained log-prob of every completion token, shape (N, C); padding gives 0."""
    toks, pos, tgt, tmask, lmask = packed
    h = policy.hidden(toks)
    n = toks.shape[0]
    hs = h[np.arange(n)[:, None], pos]
    lp = ad.log_softmax(policy.project(hs), lmask)
    return ad.gather_last(lp, tgt) * tmask


@dataclass
class LossStats:
    loss: float
    kl: float
    clip_frac: float
    mean_ratio: float


def grpo_loss(
    policy: Policy,
    ref: Policy,
    groups: Sequence[RolloutGroup],
    config: RLConfig,
    packed=None,
) -> tuple[ad.Tensor, LossStats]:
    """Mean over groups of ``-(1/G) sum_i (1/|y_i|) sum_t (surrogate_t - beta*KL_t)``.

    Requires ``old_logprobs`` and ``advantages`` on every group; reference
    log-probs are computed here when missing.  Run inside a Tape to get
    gradients.
    """
    groups = [g for g in groups if g.advantages is not None]
    if not groups:
        raise ValueError("grpo_loss: no groups with advantages")
    vocab = policy.layout.size
    packed = packed or _pack(groups, vocab)
    tmask = packed[3]
    lp = token_logprobs(policy, packed)
    if any(g.ref_logprobs is None for g in groups):
        ref_lp = token_logprobs(ref, packed).data
    else:
        ref_lp = _stack([x for g in groups for x in g.ref_logprobs], tmask.shape)
    old = _stack([x for g in groups for x in g.old_logprobs], tmask.shape)
    adv = np.concatenate([np.asarray(g.advantages, dtype=np.float64) for g in groups])[:, None] * tmask
    lengths = tmask.sum(1)
    sizes = np.concatenate([[len(g.completions)] * len(g.completions) for g in groups])
    # weight of token (i, t): 1 / (|y_i| * G * n_groups)
    w = tmask / (lengths * sizes * len(groups))[:, None]

    ratio = ad.exp(lp - old)
    clipped = ad.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)
    surrogate = ad.minimum(ratio * adv, clipped * adv)
    diff = ad.Tensor(ref_lp) - lp
    kl = ad.exp(diff) - diff - 1.0
    loss = -((surrogate - config.beta_kl * kl) * w).sum()

    r = ratio.data[tmask > 0]
    stats = LossStats(
        loss.item(),
        float((kl.data * tmask).sum() / tmask.sum()),
        float(np.mean((r < 1.0 - config.clip_eps) | (r > 1.0 + config.clip_eps))),
        float(r.mean()),
    )
    if not np.isfinite(r).all():
        raise ad.NonFiniteError("grpo_loss: non-finite importance ratio")
    return loss, stats


def _stack(arrs: Sequence[np.ndarray], shape) -> np.ndarray:
    out = np.zeros(shape)
    for r, a in enumerate(arrs):
        out[r, : len(a)] = a
    return out


def score_groups(policy: Policy, groups: Sequence[RolloutGroup]) -> list[np.ndarray]:
    """Per-token constrained log-probs of every completion under ``policy``."""
    packed = _pack(groups, policy.layout.size)
    lp = token_logprobs(policy, packed).data
    lengths = packed[3].sum(1).astype(int)
    return [lp[r, :n] for r, n in enumerate(lengths)]


# --- rollouts and training -------------------------------------------------


@dataclass
class RLPrompt:
    example: TrainingExample
    history: tuple[int, ...] = ()

    @property
    def task(self) -> str:
        return self.example.task

    @property
    def target(self) -> int:
        return self.example.item_id


def _trie_for(task: str, trie: SidTrie):
    return trie.title if task in ("sid_history_to_title", "sid_to_title") else trie.sid


def generate_groups(
    policy: Policy, prompts: Sequence[RLPrompt], trie: SidTrie, config: RLConfig, seed: int
) -> list[tuple[GenerationGroup, object]]:
    """One group per prompt with the configured sampler; prompts sharing a trie are batched."""
    out: list = [None] * len(prompts)
    by_trie: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_trie.setdefault(id(_trie_for(p.task, trie)), []).append(i)
    for idxs in by_trie.values():
        t = _trie_for(prompts[idxs[0]].task, trie)
        ps = [prompts[i].example.prompt for i in idxs]
        G = config.group_size
        if config.sampler == "beam":
            gs = beam_search_batch(policy, ps, G, t)
        elif config.sampler == "top_k":
            gs = sample_batch(policy, ps, G, t, seed, config.temperature, config.top_k)
        else:
            gs = dynamic_sample_batch(
                policy, ps, G, [prompts[i].target for i in idxs], t, seed, config.temperature, config.top_k
            )
        for i, g in zip(idxs, gs):
            out[i] = (g, t)
    return out


def build_rollouts(
    policy: Policy,
    prompts: Sequence[RLPrompt],
    trie: SidTrie,
    config: RLConfig,
    seed: int,
    cf: CfBaseline | None = None,
    catalog: Catalog | None = None,
) -> list[RolloutGroup]:
    groups = []
    for p, (g, t) in zip(prompts, generate_groups(policy, prompts, trie, config, seed)):
        # alignment rollouts get the exact-match reward only
        recipe = config.recipe if p.task == "generative_retrieval" else RewardRecipe.rule_only()
        rv = combined_reward(g, p.target, recipe, cf, p.history, catalog)
        groups.append(
            RolloutGroup(
                tuple(g.prompt), list(g.completions), list(g.item_ids), p.target, p.task, t,
                rewards=rv,
                advantages=normalize_advantages(rv.total, config.std_floor),
                diversity=diversity(g).ratio,
                n_draws=g.n_draws,
            )
        )
    return groups


@dataclass
class RLResult:
    policy: Policy
    history: list[dict] = field(default_factory=list)
    opt_state: ad.OptimizerState | None = None


METRIC_FIELDS = ["step", "mean_reward", "mean_diversity", "draws_per_group", "kl", "clip_frac", "loss", "informative"]


def rl_prompts(
    gr: Sequence[TrainingExample],
    align: Sequence[TrainingExample],
    histories: Sequence[tuple[int, ...]],
) -> list[RLPrompt]:
    return [RLPrompt(e, h) for e, h in zip(gr, histories)] + [RLPrompt(e) for e in align]


def rl_train(
    policy: Policy,
    gr_prompts: Sequence[RLPrompt],
    align_prompts: Sequence[RLPrompt],
    trie: SidTrie,
    config: RLConfig | None = None,
    cf: CfBaseline | None = None,
    catalog: Catalog | None = None,
    ref: Policy | None = None,
) -> RLResult:
    """GRPO epochs over generative-retrieval prompts with alignment prompts interleaved.

    Each step: roll out groups from the current weights, score them once to
    record the old log-probs, take one AdamW step on the GRPO loss.
    """
    cfg = config or RLConfig()
    ref = ref or policy.snapshot()
    rng = np.random.default_rng(cfg.seed)
    params = policy.params
    state = ad.OptimizerState.zeros_like(params, {"kind": "constant", "lr": cfg.lr})
    result = RLResult(policy, opt_state=state)
    step = 0
    for epoch in range(cfg.epochs):
        n_gr = len(gr_prompts) if cfg.max_prompts is None else min(cfg.max_prompts, len(gr_prompts))
        chosen = [gr_prompts[i] for i in rng.permutation(len(gr_prompts))[:n_gr]]
        if cfg.align and align_prompts:
            counts = cfg.mix.counts(n_gr)
            for task in ALIGN_TASKS:
                pool = [p for p in align_prompts if p.task == task]
                if pool and counts[task]:
                    idx = rng.permutation(len(pool))
                    chosen += [pool[idx[j % len(pool)]] for j in range(counts[task])]
        order = rng.permutation(len(chosen))
        informative_epoch = 0
        for s in range(0, len(order), cfg.prompts_per_step):
            batch = [chosen[i] for i in order[s : s + cfg.prompts_per_step]]
            groups = build_rollouts(policy, batch, trie, cfg, cfg.seed * 100003 + step, cf, catalog)
            live = [g for g in groups if g.informative]
            row = {
                "step": step,
                "mean_reward": float(np.mean([g.rewards.total.mean() for g in groups])),
                "mean_diversity": float(np.mean([g.diversity for g in groups])),
                "draws_per_group": float(np.mean([g.n_draws for g in groups])),
                "informative": len(live),
            }
            if live:
                informative_epoch += len(live)
                packed = _pack(live, policy.layout.size)
                old = token_logprobs(policy, packed).data
                refl = token_logprobs(ref, packed).data
                lengths = packed[3].sum(1).astype(int)
                r = 0
                for g in live:
                    g.old_logprobs = [old[r + j, : lengths[r + j]] for j in range(len(g.completions))]
                    g.ref_logprobs = [refl[r + j, : lengths[r + j]] for j in range(len(g.completions))]
                    r += len(g.completions)
                with ad.Tape() as tape:
                    loss, stats = grpo_loss(policy, ref, live, cfg, packed)
                grads = tape.gradient(loss, params)
                ad.adamw_step(params, grads, state, cfg.lr, weight_decay=cfg.weight_decay)
                row.update(kl=stats.kl, clip_frac=stats.clip_frac, loss=stats.loss)
            else:
                row.update(kl=0.0, clip_frac=0.0, loss=0.0)
            result.history.append(row)
            step += 1
        if informative_epoch == 0:
            log.warning("RL epoch %d: no informative groups (all advantages zero)", epoch + 1)
    return result


def write_metrics_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in METRIC_FIELDS})
