"""Run configuration: typed sections read from a flat ``section.key = value`` file.

    # comments and blank lines are ignored
    seed = 3
    data.n_users = 2000
    policy.layers = 4
    rl.sampler = dynamic
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

from .grpo import SAMPLERS, RewardRecipe, RLConfig
from .policy import TASKS, PolicyConfig
from .sft import SftConfig, TaskMix


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` lists the offending entries."""

    def __init__(self, message: str, keys=()):
        super().__init__(message)
        self.keys = list(keys)


@dataclass
class DataSection:
    n_items: int = 500
    dim: int = 16
    n_clusters: int = 20
    noise: float = 0.1
    n_users: int = 2000
    markov_sharpness: float = 0.9
    min_len: int = 5
    max_len: int = 9
    history_len: int = 10


@dataclass
class TokenizerSection:
    method: str = "rq_kmeans"  # or rq_vae
    levels: int = 3
    k: int = 32
    lloyd_iters: int = 50
    beta_commit: float = 0.25
    vae_latent: int = 16
    vae_hidden: int = 64
    vae_steps: int = 300
    vae_lr: float = 1e-3


@dataclass
class PolicySection:
    layers: int = 4
    width: int = 128
    heads: int = 4
    ff: int = 512
    max_len: int = 64
    tie_weights: bool = True
    init_std: float = 0.02


@dataclass
class SftSection:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.01
    patience: int = 1
    max_steps: typing.Optional[int] = None
    align: bool = True
    mix_generative_retrieval: float = 0.6
    mix_text_history_to_sid: float = 0.1
    mix_sid_history_to_title: float = 0.1
    mix_sid_to_title: float = 0.1
    mix_title_to_sid: float = 0.1


@dataclass
class RlSection:
    group_size: int = 16
    clip_eps: float = 0.2
    beta_kl: float = 0.04
    lr: float = 1e-5
    epochs: int = 2
    std_floor: float = 1e-6
    sampler: str = "beam"
    reward_rule: bool = True
    reward_rank: bool = True
    reward_collaborative: bool = False
    reward_semantic: bool = False
    prompts_per_step: int = 8
    max_prompts: typing.Optional[int] = None
    align: bool = True
    temperature: float = 1.0
    top_k: typing.Optional[int] = None
    weight_decay: float = 0.01
    cf_factors: int = 16
    cf_epochs: int = 10


@dataclass
class EvalSection:
    width: int = 16
    k_max: int = 10
    split: str = "test"  # or valid
    stage: str = "auto"  # sft, rl, or auto (rl when present)


SECTIONS = {
    "data": DataSection,
    "tokenizer": TokenizerSection,
    "policy": PolicySection,
    "sft": SftSection,
    "rl": RlSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    policy: PolicySection = field(default_factory=PolicySection)
    sft: SftSection = field(default_factory=SftSection)
    rl: RlSection = field(default_factory=RlSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        bad = []
        if self.tokenizer.method not in ("rq_kmeans", "rq_vae"):
            bad.append("tokenizer.method")
        if self.rl.sampler not in SAMPLERS:
            bad.append("rl.sampler")
        if self.eval.split not in ("test", "valid"):
            bad.append("eval.split")
        if self.eval.stage not in ("auto", "sft", "rl"):
            bad.append("eval.stage")
        if not 0.0 <= self.data.markov_sharpness <= 1.0:
            bad.append("data.markov_sharpness")
        if self.policy.width % self.policy.heads:
            bad.append("policy.heads")
        if self.eval.width < self.eval.k_max:
            bad.append("eval.width")
        if not 0.0 < self.rl.clip_eps < 1.0:
            bad.append("rl.clip_eps")
        if self.rl.group_size < 2:
            bad.append("rl.group_size")
        try:
            self.task_mix()
        except ValueError:
            bad.append("sft.mix_*")
        if bad:
            raise ConfigError(f"invalid values for: {', '.join(bad)}", bad)
        return self

    # -- conversion to module configs -------------------------------------

    def task_mix(self) -> TaskMix:
        if not self.sft.align:
            return TaskMix.no_align()
        return TaskMix(tuple(getattr(self.sft, f"mix_{t}") for t in TASKS))

    def policy_config(self) -> PolicyConfig:
        p = self.policy
        return PolicyConfig(p.layers, p.width, p.heads, p.ff, p.max_len, self.seed, p.tie_weights, p.init_std)

    def sft_config(self) -> SftConfig:
        s = self.sft
        return SftConfig(s.epochs, s.batch_size, s.lr, s.weight_decay, s.patience, s.max_steps, self.seed)

    def rl_config(self) -> RLConfig:
        r = self.rl
        return RLConfig(
            group_size=r.group_size,
            clip_eps=r.clip_eps,
            beta_kl=r.beta_kl,
            lr=r.lr,
            epochs=r.epochs,
            std_floor=r.std_floor,
            sampler=r.sampler,
            recipe=RewardRecipe(r.reward_rule, r.reward_rank, r.reward_collaborative, r.reward_semantic),
            prompts_per_step=r.prompts_per_step,
            max_prompts=r.max_prompts,
            align=r.align,
            mix=self.task_mix() if self.sft.align else TaskMix(),
            weight_decay=r.weight_decay,
            temperature=r.temperature,
            top_k=r.top_k,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        sub = {n: d[n] for n in names}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:12]

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def flat(self) -> dict[str, object]:
        out = {"seed": self.seed, "out": self.out}
        for name in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        return out


def _coerce(raw: str, hint, key: str):
    s = raw.strip()
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if s.lower() in ("none", "null", ""):
            return None
        hint = args[0]
    if hint is bool:
        if s.lower() in ("true", "yes", "1", "on"):
            return True
        if s.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}", [key])
    if hint is int:
        try:
            return int(s)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}", [key]) from None
    if hint is float:
        try:
            return float(s)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}", [key]) from None
    return s.strip("\"'")


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Set ``section.key`` (or top-level) entries from strings; unknown keys are rejected."""
    unknown, errors = [], []
    for key, raw in pairs.items():
        if key in ("seed", "out"):
            try:
                setattr(cfg, key, _coerce(raw, int if key == "seed" else str, key))
            except ConfigError as exc:
                errors.append(exc)
            continue
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            unknown.append(key)
            continue
        section = getattr(cfg, sec)
        hints = typing.get_type_hints(type(section))
        if name not in hints:
            unknown.append(key)
            continue
        try:
            setattr(section, name, _coerce(raw, hints[name], key))
        except ConfigError as exc:
            errors.append(exc)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}", unknown)
    if errors:
        raise ConfigError("; ".join(str(e) for e in errors), [k for e in errors for k in e.keys])
    return cfg


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", [line])
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", [key])
        pairs[key] = value.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file, then ``MINIREC_OUT``, then ``overrides``; validated."""
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            apply_overrides(cfg, parse_config_text(fh.read(), str(path)))
    env_out = os.environ.get("MINIREC_OUT")
    if env_out:
        cfg.out = env_out
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.flat().items():
        lines.append(f"{k} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
