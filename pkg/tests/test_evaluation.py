import numpy as np
import pytest

from fedtrade.evaluation import (
    CredibilityLedger,
    LabelMatrix,
    SamplePublisher,
    collect_reports_and_ban,
    compute_cth,
    init_credibility,
    majority_vote,
    raw_agreement_scores,
    update_credibility,
)


def matrix(rows, parties):
    return LabelMatrix(np.array(rows, dtype=np.int64), tuple(parties))


# ---------------------------------------------------------------------------
# Sample publication
# ---------------------------------------------------------------------------


def test_publish_zero_samples():
    pub = SamplePublisher(np.ones((10, 4)))
    out = pub.publish(0, np.random.default_rng(0))
    assert out.shape == (0, 4)


def test_publish_without_noise_is_exact_subsample():
    pool = np.arange(40, dtype=np.float64).reshape(10, 4)
    pub = SamplePublisher(pool, noise_scale=0.0)
    batch = pub.publish(5, np.random.default_rng(1))
    pool_rows = {tuple(r) for r in pool}
    assert all(tuple(r) in pool_rows for r in batch)
    assert len({tuple(r) for r in batch}) == 5  # without replacement


def test_publish_deterministic_under_seed():
    pub = SamplePublisher(np.random.default_rng(0).normal(0, 1, (30, 8)))
    a = pub.publish(7, np.random.default_rng(42))
    b = pub.publish(7, np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_publish_rejects_oversized_request():
    pub = SamplePublisher(np.ones((3, 2)))
    with pytest.raises(ValueError):
        pub.publish(4, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Voting and scores
# ---------------------------------------------------------------------------


def test_majority_simple():
    m = matrix([[1, 1, 2]], parties=[0, 1, 2])
    assert majority_vote(m).tolist() == [1]


def test_majority_tie_breaks_to_smallest_label():
    m = matrix([[3, 7], [7, 3], [9, 0]], parties=[0, 1])
    assert majority_vote(m).tolist() == [3, 3, 0]


def test_majority_single_column_is_identity():
    m = matrix([[4], [2], [9]], parties=[5])
    assert majority_vote(m).tolist() == [4, 2, 9]


def test_raw_agreement_ratio():
    # Peer 1 matches the majority on 8 of 10 rows.
    rows = [[0, 0, 0]] * 8 + [[1, 2, 1]] * 2
    m = matrix(rows, parties=[0, 1, 2])
    scores = raw_agreement_scores(m)
    assert scores[1] == pytest.approx(0.8)
    assert scores[0] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Credibility ledgers
# ---------------------------------------------------------------------------


def test_init_credibility_normalizes_over_peers():
    # Owner 0's column is perfect but never appears in its own ledger.
    rows = (
        [[0, 0, 0, 0]] * 4  # everyone agrees on 4 rows
        + [[1, 1, 9, 8]] * 4  # peer 1 keeps matching, 2 and 3 drift
        + [[2, 2, 2, 7]] * 2  # peer 2 comes back, 3 stays off
    )
    m = matrix(rows, parties=[0, 1, 2, 3])
    ledger = init_credibility(0, m, published=10)
    # raw: peer1 = 1.0, peer2 = 0.6, peer3 = 0.4 -> normalized by 2.0
    assert ledger.peers() == (1, 2, 3)
    assert ledger.scores[1] == pytest.approx(0.5)
    assert ledger.scores[2] == pytest.approx(0.3)
    assert ledger.scores[3] == pytest.approx(0.2)
    assert sum(ledger.scores.values()) == pytest.approx(1.0, abs=1e-9)


def test_normalization_example():
    # raw [0.8, 0.4, 0.4] -> [0.5, 0.25, 0.25]
    ledger = CredibilityLedger(9, {1: 0.8, 2: 0.4, 3: 0.4})
    ledger.normalize()
    assert ledger.scores[1] == pytest.approx(0.5)
    assert ledger.scores[2] == pytest.approx(0.25)
    assert ledger.scores[3] == pytest.approx(0.25)


def test_init_credibility_row_count_mismatch():
    m = matrix([[0, 0]], parties=[0, 1])
    with pytest.raises(ValueError):
        init_credibility(0, m, published=5)


def test_update_blend_example():
    old = CredibilityLedger(0, {1: 0.5, 2: 0.5}, normalized=True)
    new = update_credibility(old, {1: 1.0, 2: 0.0})
    assert new.scores[1] == pytest.approx(0.9)
    assert new.scores[2] == pytest.approx(0.1)


def test_update_with_identical_scores_is_fixed_point():
    old = CredibilityLedger(0, {1: 0.25, 2: 0.75}, normalized=True)
    new = update_credibility(old, dict(old.scores))
    assert new.scores[1] == pytest.approx(0.25)
    assert new.scores[2] == pytest.approx(0.75)


def test_update_peer_set_mismatch():
    old = CredibilityLedger(0, {1: 0.5, 2: 0.5}, normalized=True)
    with pytest.raises(ValueError):
        update_credibility(old, {1: 0.5, 3: 0.5})


def test_drop_peer_renormalizes():
    ledger = CredibilityLedger(0, {1: 0.5, 2: 0.3, 3: 0.2}, normalized=True)
    ledger.drop_peer(1)
    assert ledger.peers() == (2, 3)
    assert sum(ledger.scores.values()) == pytest.approx(1.0, abs=1e-9)
    assert ledger.scores[2] == pytest.approx(0.6)


@pytest.mark.parametrize(
    "count,expected", [(4, 0.22222), (2, 0.66667), (16, 0.04444)]
)
def test_compute_cth(count, expected):
    assert compute_cth(count) == pytest.approx(expected, abs=1e-4)


def test_compute_cth_rejects_singleton():
    with pytest.raises(ValueError):
        compute_cth(1)


# ---------------------------------------------------------------------------
# Ban voting
# ---------------------------------------------------------------------------


def test_unanimous_report_removes_party():
    reports = {i: {4} for i in range(4)}
    survivors, removed = collect_reports_and_ban(reports, {0, 1, 2, 3, 4})
    assert removed == {4}
    assert survivors == {0, 1, 2, 3}


def test_minority_report_retains_party():
    reports = {0: {4}, 1: {4}}
    survivors, removed = collect_reports_and_ban(reports, {0, 1, 2, 3, 4})
    assert removed == set()
    assert survivors == {0, 1, 2, 3, 4}


def test_empty_reports_keep_everyone():
    survivors, removed = collect_reports_and_ban({}, {0, 1, 2})
    assert survivors == {0, 1, 2} and removed == set()


def test_exact_half_is_not_a_majority():
    reports = {0: {3}, 1: {3}}  # 2 of 4 other parties
    survivors, removed = collect_reports_and_ban(reports, {0, 1, 2, 3, 4})
    assert removed == set()


def test_accused_own_report_does_not_count():
    reports = {3: {3}, 0: {3}}
    survivors, removed = collect_reports_and_ban(reports, {0, 1, 2, 3})
    assert removed == set()


# ---------------------------------------------------------------------------
# Random-labeler detection (Monte-Carlo oracle)
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("credible_count", [4, 8, 16])
def test_random_labeler_lands_below_threshold(credible_count):
    # Honest peers label near-perfectly; one column is uniform over 10
    # classes.  Its raw score should average ~0.1 and its normalized
    # credibility must sit below the ban threshold.
    rng = np.random.default_rng(credible_count)
    rows, trials = 50, 1000
    threshold = compute_cth(credible_count)
    raw_scores = []
    below = 0
    for _ in range(trials):
        truth = rng.integers(0, 10, rows)
        columns = [truth.copy() for _ in range(credible_count - 1)]
        for col in columns[1:]:  # small honest disagreement
            flip = rng.random(rows) < 0.05
            col[flip] = rng.integers(0, 10, flip.sum())
        columns.append(rng.integers(0, 10, rows))  # the random labeler
        m = LabelMatrix(np.column_stack(columns), tuple(range(credible_count)))
        ledger = init_credibility(0, m, published=rows)
        raw_scores.append(raw_agreement_scores(m)[credible_count - 1])
        if ledger.scores[credible_count - 1] < threshold:
            below += 1
    assert np.mean(raw_scores) == pytest.approx(0.1, abs=0.02)
    assert below / trials > 0.999


def test_ledger_normalization_invariant_after_operations():
    ledger = CredibilityLedger(0, {1: 0.2, 2: 0.5, 3: 0.9})
    ledger.normalize()
    assert sum(ledger.scores.values()) == pytest.approx(1.0, abs=1e-9)
    updated = update_credibility(ledger, {1: 0.9, 2: 0.9, 3: 0.1})
    assert sum(updated.scores.values()) == pytest.approx(1.0, abs=1e-9)
    updated.drop_peer(3)
    assert sum(updated.scores.values()) == pytest.approx(1.0, abs=1e-9)
