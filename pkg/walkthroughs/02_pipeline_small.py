"""Run every stage on a small catalog and compare SFT, RL and the popularity baseline.

Run: python walkthroughs/02_pipeline_small.py [out_dir]   (about a minute on one core)
"""

import sys

from minirec import config as CF
from minirec import pipeline as PL

out = sys.argv[1] if len(sys.argv) > 1 else "runs/walkthrough"
cfg = CF.load_config(
    None,
    {
        "out": out,
        "data.n_items": "120",
        "data.n_clusters": "8",
        "data.n_users": "1000",
        "tokenizer.k": "8",
        "policy.layers": "2",
        "policy.width": "32",
        "policy.heads": "2",
        "policy.ff": "64",
        "sft.epochs": "12",
        "sft.lr": "3e-3",
        "sft.patience": "12",
        "rl.epochs": "1",
        "rl.max_prompts": "64",
        "rl.lr": "1e-4",
    },
)
pipe = PL.Pipeline(cfg)
pipe.run_all(through="rl")


def show(name, rep):
    print(f"{name:>10}  HR@10 {rep.hr[10]:.3f}  NDCG@10 {rep.ndcg[10]:.3f}")


show("popularity", pipe.popularity())
show("sft", pipe.evaluate("sft"))
show("rl", pipe.evaluate("rl"))
print(f"chance HR@10 = {10 / cfg.data.n_items:.3f}; artifacts under {out}")
