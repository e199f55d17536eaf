"""Stage runner behind the command line: content-addressed artifacts plus a manifest.

Each stage writes into ``<out>/<stage>-<hash>`` where the hash covers the
config sections the stage depends on, so changing an RL knob never
invalidates the SFT checkpoint.  Files are written to a scratch directory and
renamed into place, so a failed stage leaves nothing behind.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import time
from pathlib import Path

from . import catalog as cat_mod
from . import grpo, metrics, policy as pol_mod, sft, tokenizer
from .config import RunConfig
from .decoding import build_trie

log = logging.getLogger(__name__)

STAGES = ("data", "tokenizer", "sft", "rl", "eval")
_DEPENDS = {
    "data": ("data",),
    "tokenizer": ("data", "tokenizer"),
    "sft": ("data", "tokenizer", "policy", "sft"),
    "rl": ("data", "tokenizer", "policy", "sft", "rl"),
}


class MissingArtifactError(FileNotFoundError):
    pass


class StaleArtifactError(RuntimeError):
    pass


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Pipeline:
    def __init__(self, config: RunConfig):
        self.cfg = config
        self.out = Path(config.out)

    # -- layout --------------------------------------------------------------

    def stage_dir(self, stage: str, ckpt: str | None = None) -> Path:
        if stage == "eval":
            d = self.cfg.to_dict()
            key = {"seed": d["seed"], "eval": d["eval"], "ckpt": ckpt}
            digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:12]
            return self.out / f"eval-{digest}"
        d = self.cfg.to_dict()
        key = {"seed": d["seed"], **{s: d[s] for s in _DEPENDS[stage]}}
        digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:12]
        return self.out / f"{stage}-{digest}"

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            with open(self.manifest_path) as fh:
                return json.load(fh)
        return {"runs": {}, "artifacts": {}}

    def _record(self, stage: str, final: Path, upstream: list[Path]) -> None:
        m = self.manifest()
        files = {p.name: file_sha256(p) for p in sorted(final.iterdir()) if p.is_file()}
        m["artifacts"][final.name] = {
            "stage": stage,
            "files": files,
            "upstream": [u.name for u in upstream],
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        run = m["runs"].setdefault(self.cfg.hash(), {"config": self.cfg.flat(), "stages": {}})
        run["stages"][stage] = final.name
        tmp = self.manifest_path.with_suffix(".json.tmp")
        with open(tmp, "w") as fh:
            json.dump(m, fh, indent=2, sort_keys=True)
        os.replace(tmp, self.manifest_path)

    def require(self, stage: str, filename: str, ckpt: str | None = None) -> Path:
        path = self.stage_dir(stage, ckpt) / filename
        if not path.exists():
            raise MissingArtifactError(f"missing upstream artifact {path} (run the '{stage}' stage first)")
        entry = self.manifest()["artifacts"].get(path.parent.name)
        if entry is not None and entry["files"].get(filename) not in (None, file_sha256(path)):
            raise StaleArtifactError(f"{path} does not match the hash recorded in {self.manifest_path}")
        return path

    def _write_stage(self, stage: str, writer, upstream: list[Path], ckpt: str | None = None) -> Path:
        final = self.stage_dir(stage, ckpt)
        self.out.mkdir(parents=True, exist_ok=True)
        scratch = self.out / f".{final.name}.tmp-{os.getpid()}"
        shutil.rmtree(scratch, ignore_errors=True)
        scratch.mkdir()
        try:
            writer(scratch)
        except BaseException:
            shutil.rmtree(scratch, ignore_errors=True)
            raise
        if final.exists():
            shutil.rmtree(final)
        os.replace(scratch, final)
        self._record(stage, final, upstream)
        return final

    def has(self, stage: str, filename: str) -> bool:
        return (self.stage_dir(stage) / filename).exists()

    # -- stages --------------------------------------------------------------

    def gen_data(self) -> Path:
        d, seed = self.cfg.data, self.cfg.seed

        def write(tmp: Path):
            catalog = cat_mod.generate_catalog(seed, d.n_items, d.dim, d.n_clusters, d.noise)
            log_ = cat_mod.generate_interactions(seed + 1, catalog, d.n_users, d.markov_sharpness, d.min_len, d.max_len)
            cat_mod.save_catalog(catalog, tmp / "catalog.jsonl")
            cat_mod.save_interactions(log_, tmp / "interactions.jsonl")

        return self._write_stage("data", write, [])

    def load_data(self):
        catalog = cat_mod.load_catalog(self.require("data", "catalog.jsonl"))
        log_ = cat_mod.load_interactions(self.require("data", "interactions.jsonl"))
        split = cat_mod.truncate_histories(cat_mod.chronological_split(log_), self.cfg.data.history_len)
        return catalog, log_, split

    def train_tokenizer(self) -> Path:
        catalog, _, _ = self.load_data()
        t, seed = self.cfg.tokenizer, self.cfg.seed

        def write(tmp: Path):
            x = catalog.embeddings
            if t.method == "rq_kmeans":
                cb = tokenizer.train_rq_kmeans(x, t.levels, t.k, t.lloyd_iters, seed, t.beta_commit)
                table = tokenizer.sid_table(x, cb)
            else:
                vcfg = tokenizer.RqVaeConfig(
                    t.vae_latent, t.vae_hidden, t.levels, t.k, t.beta_commit, t.vae_lr, steps=t.vae_steps, seed=seed
                )
                vae = tokenizer.train_rq_vae(x, vcfg)
                cb = vae.codebook
                table = vae.assignments(x)
            tokenizer.save_codebook(cb, tmp / "codebook.rqcb")
            tokenizer.save_sid_table(table, tmp / "sids.jsonl")

        return self._write_stage("tokenizer", write, [self.stage_dir("data")])

    def load_tokenizer(self, catalog):
        cb = tokenizer.load_codebook(self.require("tokenizer", "codebook.rqcb"))
        table = tokenizer.load_sid_table(self.require("tokenizer", "sids.jsonl"))
        layout = pol_mod.VocabLayout.for_table(table, cb.levels, cb.size, cat_mod.N_WORDS)
        trie = build_trie(table, {it.item_id: it.title_tokens for it in catalog.items}, layout)
        return cb, table, layout, trie

    def corpus(self, catalog, split, table, layout):
        train = sft.build_corpus(catalog, split, table, layout, self.cfg.task_mix(), self.cfg.seed)
        valid = sft.build_generative_retrieval(split.valid, table, layout)
        return train, valid

    def sft(self) -> Path:
        catalog, _, split = self.load_data()
        _, table, layout, _ = self.load_tokenizer(catalog)

        def write(tmp: Path):
            train, valid = self.corpus(catalog, split, table, layout)
            sft.save_corpus(train, tmp / "corpus.jsonl")
            policy = pol_mod.init_policy(self.cfg.policy_config(), layout)
            res = sft.sft_train(policy, train, valid, self.cfg.sft_config())
            pol_mod.save_checkpoint(
                tmp / "sft.ckpt", res.policy, None, {"best_epoch": res.best_epoch, "stage": "sft"}
            )
            sft.write_loss_csv(res.history, tmp / "sft_loss.csv")

        return self._write_stage("sft", write, [self.stage_dir("data"), self.stage_dir("tokenizer")])

    def load_policy(self, stage: str, layout) -> pol_mod.Policy:
        name = "sft.ckpt" if stage == "sft" else "rl.ckpt"
        policy, _, _ = pol_mod.load_checkpoint(self.require(stage, name), expect_layout=layout)
        return policy

    def rl_prompts(self, catalog, split, table, layout):
        lookup = sft.sid_lookup(table)
        gr = [grpo.RLPrompt(sft.gr_example(e.history, e.target, lookup, layout), e.history) for e in split.train]
        align = [
            grpo.RLPrompt(x)
            for x in sft.build_alignment_examples(catalog, split, lookup, layout, sft.TaskMix(), self.cfg.seed)
        ]
        return gr, align

    def rl(self) -> Path:
        sft_path = self.require("sft", "sft.ckpt")
        catalog, _, split = self.load_data()
        _, table, layout, trie = self.load_tokenizer(catalog)
        rcfg = self.cfg.rl_config()

        def write(tmp: Path):
            policy, _, _ = pol_mod.load_checkpoint(sft_path, expect_layout=layout)
            cf = None
            if rcfg.recipe.collaborative:
                cf = cat_mod.train_cf_baseline(
                    split.train, len(catalog), self.cfg.rl.cf_factors, self.cfg.rl.cf_epochs, seed=self.cfg.seed
                )
            gr, align = self.rl_prompts(catalog, split, table, layout)
            res = grpo.rl_train(policy, gr, align, trie, rcfg, cf, catalog)
            pol_mod.save_checkpoint(tmp / "rl.ckpt", res.policy, None, {"stage": "rl"})
            grpo.write_metrics_csv(res.history, tmp / "rl_metrics.csv")

        return self._write_stage("rl", write, [self.stage_dir("sft")])

    def resolve_eval_stage(self) -> str:
        stage = self.cfg.eval.stage
        if stage == "auto":
            stage = "rl" if self.has("rl", "rl.ckpt") else "sft"
        return stage

    def evaluate(self, stage: str | None = None) -> metrics.MetricsReport:
        stage = stage or self.resolve_eval_stage()
        ckpt = self.require(stage, "sft.ckpt" if stage == "sft" else "rl.ckpt")
        catalog, _, split = self.load_data()
        _, table, layout, trie = self.load_tokenizer(catalog)
        policy = self.load_policy(stage, layout)
        examples = split.test if self.cfg.eval.split == "test" else split.valid
        meta = {"seed": self.cfg.seed, "stage": stage, "config_hash": self.cfg.hash(), "checkpoint": ckpt.parent.name}
        report = metrics.evaluate_model(policy, examples, table, trie, self.cfg.eval.k_max, self.cfg.eval.width, meta)

        def write(tmp: Path):
            report.save(tmp / "report.json")

        final = self._write_stage("eval", write, [ckpt.parent], ckpt.parent.name)
        metrics.append_ledger(report, final.name, self.out / "runs.csv")
        return report

    def popularity(self) -> metrics.MetricsReport:
        catalog, _, split = self.load_data()
        examples = split.test if self.cfg.eval.split == "test" else split.valid
        ranking = metrics.popularity_baseline(split.train, len(catalog))
        return metrics.evaluate_ranking(ranking, examples, {"seed": self.cfg.seed, "stage": "popularity"})

    def run_all(self, through: str = "eval", reuse: bool = True):
        """Run every stage up to ``through``, reusing artifacts that already exist."""
        steps = [("data", "catalog.jsonl", self.gen_data), ("tokenizer", "sids.jsonl", self.train_tokenizer),
                 ("sft", "sft.ckpt", self.sft), ("rl", "rl.ckpt", self.rl)]
        for stage, probe, fn in steps:
            if not (reuse and self.has(stage, probe)):
                fn()
            if stage == through:
                return None
        return self.evaluate()


# --- ablations ---------------------------------------------------------------

VARIANTS = {
    "align=none": {"sft.align": "false", "rl.align": "false"},
    "align=sft_only": {"rl.align": "false"},
    "align=rl_only": {"sft.align": "false"},
    "align=full": {},
    "sampler=beam": {"rl.sampler": "beam"},
    "sampler=top_k": {"rl.sampler": "top_k"},
    "sampler=dynamic": {"rl.sampler": "dynamic"},
    "reward=rule_rank": {},
    "reward=rule_only": {"rl.reward_rank": "false"},
    "reward=collaborative": {"rl.reward_rank": "false", "rl.reward_collaborative": "true"},
    "reward=semantic": {"rl.reward_semantic": "true"},
}


def variant_config(base: RunConfig, name: str) -> RunConfig:
    from .config import apply_overrides

    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {', '.join(sorted(VARIANTS))}")
    cfg = dataclasses.replace(
        base, **{s: dataclasses.replace(getattr(base, s)) for s in ("data", "tokenizer", "policy", "sft", "rl", "eval")}
    )
    return apply_overrides(cfg, VARIANTS[name]).validate()


def ablation_rows(reports: dict[str, metrics.MetricsReport]) -> list[dict]:
    rows = []
    for name, rep in reports.items():
        for k in sorted(rep.hr):
            rows.append({"variant": name, "metric": f"HR@{k}", "value": rep.hr[k]})
        for k in sorted(rep.ndcg):
            rows.append({"variant": name, "metric": f"NDCG@{k}", "value": rep.ndcg[k]})
        rows.append({"variant": name, "metric": "diversity", "value": rep.diversity})
    return rows


def run_ablation(base: RunConfig, name: str) -> dict:
    vcfg = variant_config(base, name)
    reports = {"default": Pipeline(base).run_all(), name: Pipeline(vcfg).run_all()}
    rows = ablation_rows(reports)
    out = Path(base.out)
    tag = name.replace("=", "-")
    with open(out / f"ablation-{tag}.json", "w") as fh:
        json.dump({"variant": name, "rows": rows, "reports": {k: v.to_dict() for k, v in reports.items()}}, fh, indent=2)
    with open(out / f"ablation-{tag}.csv", "w") as fh:
        fh.write("variant,metric,value\n")
        for r in rows:
            fh.write(f"{r['variant']},{r['metric']},{r['value']!r}\n")
    return {"rows": rows, "reports": reports}
