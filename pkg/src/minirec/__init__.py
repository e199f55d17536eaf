"""Desk-scale generative recommendation: residual-quantised semantic IDs,
mixed-task SFT of a tiny transformer, trie-constrained decoding and GRPO."""

__version__ = "0.1.0"
