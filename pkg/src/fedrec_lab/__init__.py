"""Desk-scale laboratory for federated recommender systems.

Simulates Fed-NCF / Fed-LightGCN training with FedAvg, runs an
interaction-level membership inference attacker against per-round
uploads, and evaluates two defenses (Gaussian LDP noise and a proximal
constraint on the shared parameters). Everything is seeded and replays
bit-identically.
"""

__version__ = "0.1.0"
