"""Mutual evaluation: sample publication, voting, credibility, bans.

Each party publishes a batch of unlabeled artificial samples drawn from
its pool, every credible party (publisher included) labels them with its
current model, and the publisher compares each peer's column against the
row-wise majority vote.  The match ratio seeds a per-owner credibility
ledger that is blended 0.2/0.8 with fresh scores every round, normalized
over the owner's peers, and used both to weight download allocation and
to flag low-contribution parties for a majority ban vote.

The default publisher perturbs real training points with Gaussian noise.
This stands in for a private generative model and is NOT differentially
private; any generator with the same interface can be plugged in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence, Set, Tuple

import numpy as np

DEFAULT_NOISE_SCALE = 0.1
HISTORY_WEIGHT = 0.2
FRESH_WEIGHT = 0.8


@dataclass
class SamplePublisher:
    """Per-party pool of publishable samples (feature-standardized units)."""

    pool: np.ndarray  # (m, features)
    noise_scale: float = DEFAULT_NOISE_SCALE

    def publish(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``count`` pool points and add zero-mean noise; no labels."""
        if count < 0 or count > self.pool.shape[0]:
            raise ValueError(
                f"cannot publish {count} samples from a pool of {self.pool.shape[0]}"
            )
        if count == 0:
            return np.zeros((0, self.pool.shape[1]))
        chosen = rng.choice(self.pool.shape[0], size=count, replace=False)
        batch = self.pool[chosen].astype(np.float64)
        if self.noise_scale > 0:
            batch = batch + rng.normal(0.0, self.noise_scale, batch.shape)
        return batch


@dataclass(frozen=True)
class LabelMatrix:
    """One row per published sample, one column per credible party."""

    labels: np.ndarray  # (rows, columns) int64
    parties: Tuple[int, ...]  # column order, publisher included

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError("label matrix must be two-dimensional")
        if self.labels.shape[1] != len(self.parties):
            raise ValueError("column count must match the party list")

    def column(self, party: int) -> np.ndarray:
        return self.labels[:, self.parties.index(party)]


def majority_vote(matrix: LabelMatrix) -> np.ndarray:
    """Row-wise modal label; ties resolve to the smallest label value."""
    labels = matrix.labels
    if labels.shape[1] < 1:
        raise ValueError("majority vote needs at least one column")
    out = np.empty(labels.shape[0], dtype=np.int64)
    for row in range(labels.shape[0]):
        out[row] = np.bincount(labels[row]).argmax()
    return out


def raw_agreement_scores(matrix: LabelMatrix) -> Dict[int, float]:
    """Per-column fraction of labels matching the majority vote."""
    majority = majority_vote(matrix)
    rows = matrix.labels.shape[0]
    return {
        party: float(np.mean(matrix.labels[:, col] == majority))
        for col, party in enumerate(matrix.parties)
        if rows
    }


# ---------------------------------------------------------------------------
# Credibility ledgers
# ---------------------------------------------------------------------------


@dataclass
class CredibilityLedger:
    """One party's private, normalized view of its peers' usefulness."""

    owner: int
    scores: Dict[int, float] = field(default_factory=dict)
    normalized: bool = False

    def peers(self) -> Tuple[int, ...]:
        return tuple(sorted(self.scores))

    def normalize(self) -> None:
        total = sum(self.scores.values())
        if total <= 0.0:
            # Degenerate: no peer matched anything; fall back to uniform.
            uniform = 1.0 / len(self.scores)
            self.scores = {p: uniform for p in self.scores}
        else:
            self.scores = {p: s / total for p, s in self.scores.items()}
        self.normalized = True

    def drop_peer(self, party: int) -> None:
        if party in self.scores:
            del self.scores[party]
            if self.scores:
                self.normalize()

    def flagged_peers(self, threshold: float) -> Set[int]:
        if not self.normalized:
            raise ValueError("flagging requires a normalized ledger")
        return {p for p, s in self.scores.items() if s < threshold}


def init_credibility(owner: int, matrix: LabelMatrix, published: int) -> CredibilityLedger:
    """Initial ledger: majority-match ratio per peer, then normalized."""
    if matrix.labels.shape[0] != published:
        raise ValueError(
            f"label matrix has {matrix.labels.shape[0]} rows, expected {published}"
        )
    raw = raw_agreement_scores(matrix)
    ledger = CredibilityLedger(
        owner, {p: raw[p] for p in matrix.parties if p != owner}
    )
    ledger.normalize()
    return ledger


def update_credibility(
    old: CredibilityLedger, fresh_raw: Dict[int, float]
) -> CredibilityLedger:
    """Blend history with fresh raw scores (0.2 / 0.8), renormalize."""
    if set(old.scores) != set(fresh_raw):
        raise ValueError(
            f"peer sets differ: {sorted(old.scores)} vs {sorted(fresh_raw)}"
        )
    blended = {
        p: HISTORY_WEIGHT * old.scores[p] + FRESH_WEIGHT * fresh_raw[p]
        for p in old.scores
    }
    ledger = CredibilityLedger(old.owner, blended)
    ledger.normalize()
    return ledger


def compute_cth(credible_count: int) -> float:
    """Low-contribution threshold: two thirds of a uniform peer share."""
    if credible_count < 2:
        raise ValueError("threshold needs at least 2 credible parties")
    return (2.0 / 3.0) / (credible_count - 1)


def collect_reports_and_ban(
    reports: Dict[int, Set[int]], credible_set: Iterable[int]
) -> Tuple[Set[int], Set[int]]:
    """Apply one round of majority ban voting.

    A party is removed when a strict majority of the *other* credible
    parties flagged it.  Returns ``(surviving_set, removed_set)``.
    """
    credible = set(credible_set)
    removed: Set[int] = set()
    for accused in sorted(credible):
        voters = credible - {accused}
        if not voters:
            continue
        flags = sum(1 for reporter in voters if accused in reports.get(reporter, ()))
        if flags > len(voters) / 2:
            removed.add(accused)
    return credible - removed, removed
