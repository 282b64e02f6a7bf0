"""
datmt - self-generated in-context examples for LLM machine translation

Demonstration Augmentation for Translation, featuring:
- Recall-based n-gram relevance and MMR filtering of generated sources
- LLM-synthesized source/target demonstration pairs
- An accumulating demonstration pool with R-BM25 retrieval
- Record/replay of every LLM exchange for reproducible runs
"""

__version__ = "0.1.0"
__author__ = "datmt contributors"
