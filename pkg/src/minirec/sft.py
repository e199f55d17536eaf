"""Mixed-task supervised corpus and masked next-token training.

Every example is ``prompt + completion`` where the prompt is
``BOS, task tag, ..., SEP`` and the completion ends with EOS.  The loss mask
is true exactly on the completion positions.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .catalog import Catalog, DatasetSplit, Example
from .policy import TASKS, Policy, VocabLayout
from .tokenizer import SidAssignment, TrainingDiverged

log = logging.getLogger(__name__)

ALIGN_TASKS = TASKS[1:]


@dataclass(frozen=True)
class TrainingExample:
    tokens: tuple[int, ...]
    mask: tuple[bool, ...]
    task: str
    item_id: int = -1  # item the completion names; used as the RL target

    def __post_init__(self):
        if len(self.mask) != len(self.tokens):
            raise ValueError("mask and tokens differ in length")
        if not any(self.mask):
            raise ValueError("example has no supervised position")

    @property
    def n_prompt(self) -> int:
        return self.mask.index(True)

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.tokens[: self.n_prompt]

    @property
    def completion(self) -> tuple[int, ...]:
        return self.tokens[self.n_prompt :]


@dataclass(frozen=True)
class TaskMix:
    weights: tuple[float, ...] = (0.6, 0.1, 0.1, 0.1, 0.1)  # in TASKS order

    def __post_init__(self):
        if len(self.weights) != len(TASKS):
            raise ValueError(f"mix needs {len(TASKS)} weights")
        if any(w < 0 for w in self.weights):
            raise ValueError("mix weights must be nonnegative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"mix weights sum to {sum(self.weights)}, not 1")
        if self.weights[0] <= 0:
            raise ValueError("generative retrieval weight must be positive")

    @classmethod
    def no_align(cls) -> "TaskMix":
        return cls((1.0, 0.0, 0.0, 0.0, 0.0))

    def weight(self, task: str) -> float:
        return self.weights[TASKS.index(task)]

    def counts(self, n_gr: int) -> dict[str, int]:
        """Alignment example counts so that ``n_gr`` generative-retrieval
        examples make up their mix share; largest-remainder rounding."""
        total = n_gr / self.weights[0]
        raw = {t: total * self.weight(t) for t in ALIGN_TASKS}
        base = {t: int(math.floor(v)) for t, v in raw.items()}
        short = int(round(total)) - n_gr - sum(base.values())
        for t in sorted(raw, key=lambda t: (-(raw[t] - base[t]), TASKS.index(t)))[: max(short, 0)]:
            base[t] += 1
        return base


def sid_lookup(sids: Sequence[SidAssignment]) -> dict[int, SidAssignment]:
    return {a.item_id: a for a in sids}


def _item_toks(item: int, table: dict[int, SidAssignment], layout: VocabLayout) -> tuple[int, ...]:
    a = table.get(item)
    if a is None:
        raise KeyError(f"item {item} has no semantic ID")
    return layout.item_tokens(a)


def _example(prompt: list[int], completion: Sequence[int], task: str, item: int, layout: VocabLayout) -> TrainingExample:
    comp = tuple(completion) + (layout.EOS,)
    return TrainingExample(
        tuple(prompt) + comp, (False,) * len(prompt) + (True,) * len(comp), task, item
    )


def gr_example(history: Sequence[int], target: int, table, layout: VocabLayout) -> TrainingExample:
    prompt = [layout.BOS, layout.task_token("generative_retrieval")]
    for it in history:
        prompt.extend(_item_toks(it, table, layout))
    prompt.append(layout.SEP)
    return _example(prompt, _item_toks(target, table, layout), "generative_retrieval", target, layout)


def build_generative_retrieval(examples: Sequence[Example], sids, layout: VocabLayout) -> list[TrainingExample]:
    table = sids if isinstance(sids, dict) else sid_lookup(sids)
    return [gr_example(e.history, e.target, table, layout) for e in examples]


def alignment_example(task: str, catalog: Catalog, table, layout: VocabLayout, item: int, history=()) -> TrainingExample:
    tag = [layout.BOS, layout.task_token(task)]
    title = lambda i: layout.title_tokens(catalog.title_of(i))  # noqa: E731
    if task == "text_history_to_sid":
        prompt = tag[:]
        for it in history:
            prompt.extend(title(it) + (layout.SEP,))
        return _example(prompt, _item_toks(item, table, layout), task, item, layout)
    if task == "sid_history_to_title":
        prompt = tag[:]
        for it in history:
            prompt.extend(_item_toks(it, table, layout))
        prompt.append(layout.SEP)
        return _example(prompt, title(item), task, item, layout)
    if task == "sid_to_title":
        return _example(tag + list(_item_toks(item, table, layout)) + [layout.SEP], title(item), task, item, layout)
    if task == "title_to_sid":
        return _example(tag + list(title(item)) + [layout.SEP], _item_toks(item, table, layout), task, item, layout)
    raise ValueError(f"unknown alignment task {task!r}")


def _cycle(rng: np.random.Generator, n_pool: int, n: int) -> np.ndarray:
    # without replacement while the pool lasts, then a fresh permutation
    reps = -(-n // n_pool) if n else 0
    return np.concatenate([rng.permutation(n_pool) for _ in range(reps)] or [np.zeros(0, int)])[:n]


def build_alignment_examples(
    catalog: Catalog,
    split: DatasetSplit,
    sids,
    layout: VocabLayout,
    mix: TaskMix,
    seed: int = 0,
    n_gr: int | None = None,
) -> list[TrainingExample]:
    """Alignment families sized so they hold their mix share next to the
    ``n_gr`` (default: all training) generative-retrieval examples."""
    table = sids if isinstance(sids, dict) else sid_lookup(sids)
    counts = mix.counts(len(split.train) if n_gr is None else n_gr)
    rng = np.random.default_rng(seed)
    out = []
    for task in ALIGN_TASKS:
        n = counts[task]
        if task in ("text_history_to_sid", "sid_history_to_title"):
            for j in _cycle(rng, len(split.train), n):
                e = split.train[j]
                out.append(alignment_example(task, catalog, table, layout, e.target, e.history))
        else:
            for j in _cycle(rng, len(catalog), n):
                out.append(alignment_example(task, catalog, table, layout, int(j)))
    return out


def build_corpus(catalog, split, sids, layout, mix: TaskMix, seed: int = 0) -> list[TrainingExample]:
    gr = build_generative_retrieval(split.train, sids, layout)
    return gr + build_alignment_examples(catalog, split, sids, layout, mix, seed, len(gr))


def decode_sid_history(tokens: Sequence[int], layout: VocabLayout, sids) -> list[int]:
    """Item ids named by the SID groups of a generative-retrieval prompt."""
    inverse = {layout.item_tokens(a): a.item_id for a in sids}
    body = list(tokens)
    if body[:2] != [layout.BOS, layout.task_token("generative_retrieval")] or body[-1] != layout.SEP:
        raise ValueError("not a generative-retrieval prompt")
    body = body[2:-1]
    items, i = [], 0
    while i < len(body):
        n = layout.levels
        if i + n < len(body) and layout.kind(body[i + n]) == "disambig":
            n += 1
        items.append(inverse[tuple(body[i : i + n])])
        i += n
    return items


# --- persistence -----------------------------------------------------------


def save_corpus(examples: Sequence[TrainingExample], path) -> None:
    with open(path, "w") as fh:
        for e in examples:
            fh.write(json.dumps({"tokens": list(e.tokens), "mask": [int(m) for m in e.mask], "task": e.task, "item_id": e.item_id}) + "\n")


def load_corpus(path) -> list[TrainingExample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    TrainingExample(
                        tuple(int(t) for t in rec["tokens"]),
                        tuple(bool(m) for m in rec["mask"]),
                        rec["task"],
                        int(rec.get("item_id", -1)),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record ({exc})") from None
    return out


# --- training --------------------------------------------------------------


@dataclass
class SftConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.01
    patience: int = 1
    max_steps: int | None = None  # hard cap on optimizer steps (overrides epochs)
    seed: int = 0


@dataclass
class SftResult:
    policy: Policy
    history: list[dict] = field(default_factory=list)  # epoch, train_loss, valid_loss
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    opt_state: ad.OptimizerState | None = None


def pad_batch(examples: Sequence[TrainingExample], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(e.tokens) for e in examples)
    toks = np.full((len(examples), T), pad, dtype=np.int64)
    mask = np.zeros((len(examples), T))
    for r, e in enumerate(examples):
        toks[r, : len(e.tokens)] = e.tokens
        mask[r, : len(e.tokens)] = e.mask
    return toks, mask


def batch_loss(policy: Policy, toks: np.ndarray, mask: np.ndarray) -> ad.Tensor:
    """Mean cross-entropy over masked-in target positions."""
    first = int(np.argmax(mask.any(0)))  # positions before the earliest target carry no loss
    logits = policy.logits(toks)
    return ad.softmax_cross_entropy(logits[:, max(first - 1, 0) : -1], toks[:, max(first, 1) :], mask[:, max(first, 1) :])


def make_batches(examples: Sequence[TrainingExample], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of similar length: sort within pools of 32 batches."""
    order = rng.permutation(len(examples))
    pool = batch_size * 32
    batches = []
    for s in range(0, len(order), pool):
        chunk = order[s : s + pool]
        chunk = chunk[np.argsort([len(examples[i].tokens) for i in chunk], kind="stable")]
        batches.extend(chunk[j : j + batch_size] for j in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def eval_loss(policy: Policy, examples: Sequence[TrainingExample], batch_size: int = 256) -> float:
    """Token-weighted mean masked cross-entropy; no tape, no mutation."""
    total, count = 0.0, 0.0
    order = np.argsort([len(e.tokens) for e in examples], kind="stable")
    for s in range(0, len(order), batch_size):
        batch = [examples[i] for i in order[s : s + batch_size]]
        toks, mask = pad_batch(batch)
        w = mask[:, 1:].sum()
        total += batch_loss(policy, toks, mask).item() * w
        count += w
    return total / count


def sft_train(
    policy: Policy,
    examples: Sequence[TrainingExample],
    valid: Sequence[TrainingExample] | None = None,
    config: SftConfig | None = None,
    opt_state: ad.OptimizerState | None = None,
    on_epoch=None,
) -> SftResult:
    """AdamW on the masked loss with a cosine schedule over the planned steps.

    After every epoch the validation loss is measured; training stops once it
    fails to improve for ``patience`` epochs and the best-validation weights
    are returned (the final weights when ``valid`` is empty).
    """
    cfg = config or SftConfig()
    if not examples:
        raise ValueError("sft_train: no training examples")
    rng = np.random.default_rng(cfg.seed)
    per_epoch = -(-len(examples) // cfg.batch_size)
    total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * per_epoch
    params = policy.params
    state = opt_state or ad.OptimizerState.zeros_like(params, {"kind": "cosine", "total": total_steps, "base_lr": cfg.lr})
    result = SftResult(policy.copy(), opt_state=state)
    best = math.inf
    bad = 0
    step = state.step
    epoch = 0
    while step < total_steps:
        epoch += 1
        losses = []
        for rows in make_batches(examples, cfg.batch_size, rng):
            if step >= total_steps:
                break
            toks, mask = pad_batch([examples[i] for i in rows])
            try:
                with ad.Tape() as tape:
                    loss = batch_loss(policy, toks, mask)
                grads = tape.gradient(loss, params)
                lr = ad.cosine_lr(min(step, total_steps - 1), total_steps, cfg.lr)
                ad.adamw_step(params, grads, state, lr, weight_decay=cfg.weight_decay)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"SFT diverged at step {step}: {exc}", result) from exc
            step += 1
            losses.append(loss.item())
            result.step_losses.append(loss.item())
        v = eval_loss(policy, valid) if valid else math.nan
        result.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_loss": float(v)})
        log.info("sft epoch %d train %.4f valid %.4f", epoch, np.mean(losses), v)
        if on_epoch is not None:
            on_epoch(epoch, policy, result.history[-1])
        if not valid or v < best:
            best = v if valid else best
            bad = 0
            result.policy = policy.copy()
            result.best_epoch = epoch
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return result


def write_loss_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "valid_loss"])
        w.writeheader()
        for row in history:
            w.writerow(row)
