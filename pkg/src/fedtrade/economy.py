"""Points economy: initialization, budgets, allocation, transfers.

One point buys one gradient coordinate.  A party's opening balance grows
with its sharing level, so generous parties start with more purchasing
power; afterwards points only move between parties (uploads earn, downloads
spend), keeping the total in circulation constant except for balances
frozen by a ban.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict


class InsufficientPointsError(ValueError):
    """A transfer would drive the payer's balance below zero."""


@dataclass
class PointsAccount:
    party_id: int
    balance: int

    def __post_init__(self) -> None:
        if self.balance < 0:
            raise ValueError("balances are non-negative")


def init_points(sharing_level: float, param_count: int, n_parties: int) -> int:
    """Opening balance: floor(sharing_level * parameters * (n - 1))."""
    if not 0.0 < sharing_level <= 1.0:
        raise ValueError(f"sharing level must be in (0, 1], got {sharing_level}")
    if n_parties < 2:
        raise ValueError("a federation needs at least 2 parties")
    return math.floor(sharing_level * param_count * (n_parties - 1))


def set_budget(account: PointsAccount) -> int:
    """Per-round download budget equals the current balance."""
    return account.balance


def allocate(
    credibility: float,
    budget: int,
    peer_sharing_level: float,
    peer_gradient_count: int,
) -> int:
    """Coordinates to buy from one peer this round.

    The credibility share of the budget, capped by what the peer is
    willing to release; fractional products floor to whole points.
    """
    return math.floor(
        min(credibility * budget, peer_sharing_level * peer_gradient_count)
    )


def transfer(requester: PointsAccount, uploader: PointsAccount, amount: int) -> None:
    """Move ``amount`` points; total is conserved, neither side goes negative."""
    if amount < 0:
        raise ValueError("transfer amount must be non-negative")
    if requester.balance < amount:
        raise InsufficientPointsError(
            f"party {requester.party_id} holds {requester.balance}, "
            f"cannot pay {amount}"
        )
    requester.balance -= amount
    uploader.balance += amount


def total_balance(accounts: Dict[int, PointsAccount]) -> int:
    return sum(acc.balance for acc in accounts.values())
