"""Contribution axes and the collaborative-fairness coefficient.

Fairness is the sample Pearson correlation between a contribution vector
(standalone accuracies, plus normalized sharing levels in the
mixed-contribution setting) and the per-party final accuracies.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np


def contribution_axis(
    setting: int,
    sharing_levels: Sequence[float],
    standalone_accuracies: Sequence[float],
) -> np.ndarray:
    """Per-party contribution scores.

    Setting 2 sums the normalized sharing-level vector with the
    normalized standalone-accuracy vector; settings 1 and 3 use the raw
    standalone accuracies.
    """
    lam = np.asarray(sharing_levels, dtype=np.float64)
    sacc = np.asarray(standalone_accuracies, dtype=np.float64)
    if lam.shape != sacc.shape:
        raise ValueError("sharing-level and accuracy vectors must align")
    if setting == 2:
        return lam / lam.sum() + sacc / sacc.sum()
    if setting in (1, 3):
        return sacc.copy()
    raise ValueError(f"unknown setting {setting}")


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample correlation with corrected standard deviations.

    Degenerate inputs (either vector constant) have no defined
    correlation; a warning is emitted and NaN returned.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length vectors")
    n = x.shape[0]
    if n < 2:
        raise ValueError("correlation needs at least 2 points")
    sx = x.std(ddof=1)
    sy = y.std(ddof=1)
    if sx == 0.0 or sy == 0.0:
        warnings.warn("zero variance in correlation input", RuntimeWarning)
        return float("nan")
    cov = float(np.dot(x - x.mean(), y - y.mean()))
    return cov / ((n - 1) * sx * sy)


@dataclass
class FairnessReport:
    setting: int
    parties: List[int]
    contributions: List[float]  # x-axis
    accuracies: List[float]  # y-axis, final per-party accuracy
    correlation: float  # NaN when degenerate

    def to_json_dict(self) -> dict:
        r = self.correlation
        return {
            "setting": self.setting,
            "parties": list(self.parties),
            "contributions": [float(v) for v in self.contributions],
            "accuracies": [float(v) for v in self.accuracies],
            "correlation": None if np.isnan(r) else float(r),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def fairness_report(
    setting: int,
    parties: Sequence[int],
    sharing_levels: Sequence[float],
    standalone_accuracies: Sequence[float],
    final_accuracies: Sequence[float],
) -> FairnessReport:
    x = contribution_axis(setting, sharing_levels, standalone_accuracies)
    y = np.asarray(final_accuracies, dtype=np.float64)
    if len(parties) != x.shape[0] or y.shape != x.shape:
        raise ValueError("party, contribution, and accuracy lists must align")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        r = pearson(x, y) if x.shape[0] >= 2 else float("nan")
    return FairnessReport(
        setting, list(parties), x.tolist(), y.tolist(), r
    )
