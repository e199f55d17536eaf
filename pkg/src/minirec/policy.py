"""Tiny decoder-only transformer policy over SID, title-word and control tokens."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

TASKS = (
    "generative_retrieval",
    "text_history_to_sid",
    "sid_history_to_title",
    "sid_to_title",
    "title_to_sid",
)


@dataclass(frozen=True)
class VocabLayout:
    """Disjoint id ranges: specials, task tags, title words, level-tagged SIDs,
    disambiguation indices.  SID token for (level, code) is ``sid_base + level*K + code``."""

    levels: int = 3
    codebook_size: int = 32
    n_words: int = 64
    n_disambig: int = 0

    PAD = 0
    BOS = 1
    EOS = 2
    SEP = 3
    task_base = 4

    @property
    def word_base(self) -> int:
        return self.task_base + len(TASKS)

    @property
    def sid_base(self) -> int:
        return self.word_base + self.n_words

    @property
    def disambig_base(self) -> int:
        return self.sid_base + self.levels * self.codebook_size

    @property
    def size(self) -> int:
        return self.disambig_base + self.n_disambig

    def task_token(self, task: str) -> int:
        return self.task_base + TASKS.index(task)

    def word_token(self, word: int) -> int:
        if not 0 <= word < self.n_words:
            raise ValueError(f"word {word} outside vocabulary of {self.n_words}")
        return self.word_base + word

    def sid_token(self, level: int, code: int) -> int:
        if not (0 <= level < self.levels and 0 <= code < self.codebook_size):
            raise ValueError(f"SID (level={level}, code={code}) outside layout")
        return self.sid_base + level * self.codebook_size + code

    def disambig_token(self, index: int) -> int:
        if not 0 <= index < self.n_disambig:
            raise ValueError(f"disambiguation index {index} outside layout ({self.n_disambig})")
        return self.disambig_base + index

    def kind(self, token: int) -> str:
        if token < self.task_base:
            return ("pad", "bos", "eos", "sep")[token]
        if token < self.word_base:
            return "task"
        if token < self.sid_base:
            return "word"
        if token < self.disambig_base:
            return "sid"
        if token < self.size:
            return "disambig"
        raise ValueError(f"token {token} outside vocabulary of {self.size}")

    def sid_level(self, token: int) -> int:
        if self.kind(token) != "sid":
            raise ValueError(f"token {token} is not a SID token")
        return (token - self.sid_base) // self.codebook_size

    def sid_code(self, token: int) -> int:
        return (token - self.sid_base) % self.codebook_size

    def item_tokens(self, assignment) -> tuple[int, ...]:
        toks = tuple(self.sid_token(l, c) for l, c in enumerate(assignment.codes))
        if assignment.extended:
            toks += (self.disambig_token(assignment.disambiguation),)
        return toks

    def title_tokens(self, words: Sequence[int]) -> tuple[int, ...]:
        return tuple(self.word_token(w) for w in words)

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "codebook_size": self.codebook_size,
            "n_words": self.n_words,
            "n_disambig": self.n_disambig,
            "tasks": list(TASKS),
        }

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def for_table(cls, table, levels: int, codebook_size: int, n_words: int = 64) -> "VocabLayout":
        n_dis = max((a.disambiguation + 1 for a in table if a.extended), default=0)
        return cls(levels, codebook_size, n_words, n_dis)


@dataclass(frozen=True)
class PolicyConfig:
    layers: int = 4
    width: int = 128
    heads: int = 4
    ff: int = 512
    max_len: int = 64
    seed: int = 0
    tie_weights: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


def param_count(cfg: PolicyConfig, vocab_size: int) -> int:
    D, F = cfg.width, cfg.ff
    per_layer = 2 * D + (3 * D * D + 3 * D) + (D * D + D) + 2 * D + (D * F + F) + (F * D + D)
    total = vocab_size * D + cfg.max_len * D + cfg.layers * per_layer + 2 * D
    if not cfg.tie_weights:
        total += D * vocab_size
    return total


def init_params(cfg: PolicyConfig, vocab_size: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    D, F, s = cfg.width, cfg.ff, cfg.init_std
    proj_s = s / np.sqrt(2 * cfg.layers)
    p = {
        "tok_emb": rng.normal(0, s, (vocab_size, D)),
        "pos_emb": rng.normal(0, s, (cfg.max_len, D)),
    }
    for i in range(cfg.layers):
        p[f"h{i}.ln1.g"] = np.ones(D)
        p[f"h{i}.ln1.b"] = np.zeros(D)
        p[f"h{i}.attn.w_qkv"] = rng.normal(0, s, (D, 3 * D))
        p[f"h{i}.attn.b_qkv"] = np.zeros(3 * D)
        p[f"h{i}.attn.w_out"] = rng.normal(0, proj_s, (D, D))
        p[f"h{i}.attn.b_out"] = np.zeros(D)
        p[f"h{i}.ln2.g"] = np.ones(D)
        p[f"h{i}.ln2.b"] = np.zeros(D)
        p[f"h{i}.mlp.w_in"] = rng.normal(0, s, (D, F))
        p[f"h{i}.mlp.b_in"] = np.zeros(F)
        p[f"h{i}.mlp.w_out"] = rng.normal(0, proj_s, (F, D))
        p[f"h{i}.mlp.b_out"] = np.zeros(D)
    p["ln_f.g"] = np.ones(D)
    p["ln_f.b"] = np.zeros(D)
    if not cfg.tie_weights:
        p["w_out"] = rng.normal(0, s, (D, vocab_size))
    return p


@dataclass
class KVCache:
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    length: int = 0

    def select(self, rows) -> "KVCache":
        rows = np.asarray(rows)
        return KVCache([k[rows] for k in self.keys], [v[rows] for v in self.values], self.length)


class Policy:
    """Parameters of the policy as named tensors plus its config and vocab layout.

    ``frozen`` policies hold read-only copies and are used as the reference
    and rollout snapshots.
    """

    def __init__(self, config: PolicyConfig, layout: VocabLayout, params: dict[str, np.ndarray], frozen: bool = False):
        self.config = config
        self.layout = layout
        self.frozen = frozen
        self.tensors = {}
        for name, arr in params.items():
            arr = np.array(arr, dtype=np.float64, copy=True) if frozen else np.asarray(arr, dtype=np.float64)
            if frozen:
                arr.flags.writeable = False
            self.tensors[name] = ad.Tensor(arr, requires_grad=not frozen, name=name)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def params(self) -> list[ad.Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def snapshot(self) -> "Policy":
        return Policy(self.config, self.layout, self.arrays(), frozen=True)

    def copy(self) -> "Policy":
        return Policy(self.config, self.layout, {n: a.copy() for n, a in self.arrays().items()})

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if self.frozen:
            raise RuntimeError("cannot load into a frozen policy")
        for n, a in arrays.items():
            self.tensors[n].data = np.array(a, dtype=np.float64, copy=True)

    # -- forward -----------------------------------------------------------

    def hidden(self, tokens, cache: KVCache | None = None) -> ad.Tensor:
        """Final-layer hidden states (B, T, D); appends to ``cache`` when given."""
        cfg, P = self.config, self.tensors
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.dtype.kind not in "iu":
            raise ValueError("token ids must be integers")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.layout.size):
            bad = tokens[(tokens < 0) | (tokens >= self.layout.size)][0]
            raise ValueError(f"unknown token id {int(bad)} (vocabulary size {self.layout.size})")
        B, T = tokens.shape
        start = cache.length if cache is not None else 0
        if start + T > cfg.max_len:
            raise ValueError(f"sequence length {start + T} exceeds max_len {cfg.max_len}")
        H, D = cfg.heads, cfg.width
        dh = D // H
        x = ad.embedding(P["tok_emb"], tokens) + ad.embedding(P["pos_emb"], np.arange(start, start + T))
        total = start + T
        causal = np.arange(total)[None, :] <= (start + np.arange(T))[:, None]
        scale = 1.0 / np.sqrt(dh)
        for i in range(cfg.layers):
            h = ad.layer_norm(x, P[f"h{i}.ln1.g"], P[f"h{i}.ln1.b"])
            qkv = ad.matmul(h, P[f"h{i}.attn.w_qkv"]) + P[f"h{i}.attn.b_qkv"]
            qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            if cache is not None:
                if i < len(cache.keys):
                    k = ad.concat([cache.keys[i], k], axis=2)
                    v = ad.concat([cache.values[i], v], axis=2)
                    cache.keys[i], cache.values[i] = k.data, v.data
                else:
                    cache.keys.append(k.data)
                    cache.values.append(v.data)
            att = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * scale
            att = ad.masked_softmax(att, causal)
            y = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
            x = x + ad.matmul(y, P[f"h{i}.attn.w_out"]) + P[f"h{i}.attn.b_out"]
            h = ad.layer_norm(x, P[f"h{i}.ln2.g"], P[f"h{i}.ln2.b"])
            h = ad.gelu(ad.matmul(h, P[f"h{i}.mlp.w_in"]) + P[f"h{i}.mlp.b_in"])
            x = x + ad.matmul(h, P[f"h{i}.mlp.w_out"]) + P[f"h{i}.mlp.b_out"]
        if cache is not None:
            cache.length = total
        return ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"])

    def project(self, h: ad.Tensor) -> ad.Tensor:
        if self.config.tie_weights:
            return ad.matmul(h, ad.transpose(self.tensors["tok_emb"], (1, 0)))
        return ad.matmul(h, self.tensors["w_out"])

    def logits(self, tokens, cache: KVCache | None = None) -> ad.Tensor:
        return self.project(self.hidden(tokens, cache))

    def next_log_probs(self, tokens, cache: KVCache | None = None) -> np.ndarray:
        """Unconstrained log-probabilities of the token after each row of ``tokens``."""
        h = self.hidden(tokens, cache)
        return ad.log_softmax(self.project(h[:, -1:, :])).data[:, 0]


def init_policy(config: PolicyConfig, layout: VocabLayout) -> Policy:
    return Policy(config, layout, init_params(config, layout.size))


def sequence_log_prob(policy: Policy, prompt: Sequence[int], completion: Sequence[int], trie=None):
    """Per-token log-probs of ``completion`` given ``prompt`` and their plain sum.

    With ``trie`` (anything exposing ``legal(prefix)``), each step's
    distribution is renormalised over the legal continuations.
    """
    if len(completion) == 0:
        raise ValueError("sequence_log_prob: completion is empty")
    seq = np.array(list(prompt) + list(completion), dtype=np.int64)
    h = policy.hidden(seq[None])
    n_p = len(prompt)
    pos = np.arange(n_p - 1, len(seq) - 1)
    logits = policy.project(h[:, pos, :])
    mask = None
    if trie is not None:
        mask = np.zeros((1, len(completion), policy.layout.size), dtype=bool)
        for t in range(len(completion)):
            mask[0, t, trie.legal(tuple(completion[:t]))] = True
    lp = ad.log_softmax(logits, mask)
    per_token = ad.gather_last(lp, np.asarray(completion)[None]).data[0]
    return per_token, float(per_token.sum())


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"MRCK"
CKPT_VERSION = 1


class IncompatibleCheckpointError(ValueError):
    pass


def _write_block(buf: list, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    buf.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(policy: Policy, opt_state: ad.OptimizerState | None = None, extra: dict | None = None) -> bytes:
    header = {
        "config": asdict(policy.config),
        "layout": policy.layout.to_dict(),
        "layout_hash": policy.layout.hash(),
        "names": policy.names,
        "optimizer": None if opt_state is None else {"step": opt_state.step, "schedule": opt_state.schedule},
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hb)), hb]
    for name, arr in policy.arrays().items():
        _write_block(buf, name, arr)
    if opt_state is not None:
        for name, m, v in zip(policy.names, opt_state.m, opt_state.v):
            _write_block(buf, "opt.m." + name, m)
            _write_block(buf, "opt.v." + name, v)
    return b"".join(buf)


def save_checkpoint(path, policy: Policy, opt_state: ad.OptimizerState | None = None, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(policy, opt_state, extra))


def load_checkpoint(path, expect_layout: VocabLayout | None = None, expect_config: PolicyConfig | None = None):
    """Returns ``(policy, optimizer_state_or_None, extra)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise IncompatibleCheckpointError(f"{path}: not a policy checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 12
    header = json.loads(raw[off : off + hlen])
    off += hlen
    lay = header["layout"]
    layout = VocabLayout(lay["levels"], lay["codebook_size"], lay["n_words"], lay["n_disambig"])
    if layout.hash() != header["layout_hash"] or tuple(lay["tasks"]) != TASKS:
        raise IncompatibleCheckpointError(f"{path}: vocabulary layout hash mismatch")
    if expect_layout is not None and expect_layout.hash() != layout.hash():
        raise IncompatibleCheckpointError(
            f"{path}: vocabulary layout {layout.hash()} does not match expected {expect_layout.hash()}"
        )
    config = PolicyConfig(**header["config"])
    if expect_config is not None and expect_config != config:
        raise IncompatibleCheckpointError(f"{path}: policy config differs from the expected one")
    blocks = {}
    try:
        while off < len(raw):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(raw):
                raise IncompatibleCheckpointError(f"{path}: truncated tensor block {name!r} at offset {off}")
            blocks[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except struct.error as exc:
        raise IncompatibleCheckpointError(f"{path}: truncated at offset {off}") from exc
    params = {n: blocks[n] for n in header["names"]}
    policy = Policy(config, layout, params)
    expected = init_params(config, layout.size)
    for n, a in expected.items():
        if n not in params or params[n].shape != a.shape:
            raise IncompatibleCheckpointError(f"{path}: tensor {n!r} missing or misshaped for the config")
    opt = None
    if header["optimizer"] is not None:
        opt = ad.OptimizerState(
            [blocks["opt.m." + n] for n in header["names"]],
            [blocks["opt.v." + n] for n in header["names"]],
            header["optimizer"]["step"],
            header["optimizer"]["schedule"],
        )
    return policy, opt, header["extra"]
