"""Deterministic simulator for a decentralized gradient-trading federation.

Parties train local models, publish artificial samples for mutual
credibility scoring, and trade masked model updates for points.  Every
exchange is committed to an append-only permissioned ledger, and updates
travel under a three-layer encryption scheme whose inner layer is an
additively homomorphic one-time pad, so each receiver learns only the sum
of its peers' contributions.
"""

__version__ = "0.1.0"
