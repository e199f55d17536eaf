"""Reward algebra for one rollout group, then the three ways of drawing a group.

Run: python walkthroughs/03_rewards_and_sampling.py
"""

import numpy as np

from minirec import catalog as C
from minirec import decoding as D
from minirec import grpo as G
from minirec import policy as P
from minirec import tokenizer as Tk

# A group of four candidates in beam order; the target (item 7) came second.
items, ranks = [3, 7, 5, 9], [1, 2, 3, 4]
rule = np.array([G.rule_reward(i, 7) for i in items])
rank = G.ranking_reward(items, ranks, 7)
print("rule   ", rule)
print("ranking", rank.round(4), "sum", rank.sum().round(12))
adv = G.normalize_advantages(rule + rank)
print("advantages", adv.round(4), "mean", adv.mean().round(12), "std", adv.std().round(12))

# Groups from an untrained policy over a 60-item catalog.
cat = C.generate_catalog(0, 60, 8, 6)
table = Tk.sid_table(cat.embeddings, Tk.train_rq_kmeans(cat.embeddings, 3, 8, 50, 0))
layout = P.VocabLayout.for_table(table, 3, 8)
trie = D.build_trie(table, None, layout)
policy = P.init_policy(P.PolicyConfig(2, 32, 2, 64, 64), layout)
prompt = [layout.BOS, layout.task_token("generative_retrieval"), layout.SEP]

beam = D.beam_search(policy, prompt, 8, trie)
top_k = D.sample_top_k(policy, prompt, 8, trie, seed=0)
dyn = D.dynamic_sample(policy, prompt, 8, 7, trie, seed=0)
for name, group in (("beam", beam), ("top-k", top_k), ("dynamic", dyn)):
    print(f"{name:>8}: items {group.item_ids}  diversity {D.diversity(group).ratio:.3f}  draws {group.n_draws}")
