"""Deterministic simulator of federated domain generalization.

Clients holding private labeled source domains and a server holding an
unlabeled target domain jointly train a global classifier via feature
distribution matching (domain confusion + multi-kernel MMD), weighted
model aggregation, and consensus-vote pseudo-label fine-tuning, with
negative transfer measured every round.
"""

__version__ = "0.1.0"
