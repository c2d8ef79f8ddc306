"""Toolkit for identifying direct-cause utterances of dialogue responses.

The core object is a binary classifier over (u_j, u_prev, response) text
triples that realizes a conditional-independence test: it decides whether a
response still depends on an earlier utterance once the immediately preceding
utterance is taken into account.  Around it the package provides corpus
ingestion and statistics, a constrained incremental self-training loop,
cause-aware training-set preprocessing and response selection, a history
perturbation study, evaluation metrics, and a synthetic world with known
ground-truth causal graphs used as the test oracle.
"""

__version__ = "0.1.0"
