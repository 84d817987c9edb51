import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedtrade.economy import (
    InsufficientPointsError,
    PointsAccount,
    allocate,
    init_points,
    set_budget,
    total_balance,
    transfer,
)


@pytest.mark.parametrize(
    "lam,params,n,expected",
    [(0.1, 1000, 4, 300), (0.1, 100, 2, 10), (1.0, 50, 3, 100)],
)
def test_init_points(lam, params, n, expected):
    assert init_points(lam, params, n) == expected


def test_init_points_rejects_bad_inputs():
    with pytest.raises(ValueError):
        init_points(0.0, 100, 4)
    with pytest.raises(ValueError):
        init_points(1.5, 100, 4)
    with pytest.raises(ValueError):
        init_points(0.1, 100, 1)


def test_budget_equals_balance():
    assert set_budget(PointsAccount(0, 300)) == 300
    assert set_budget(PointsAccount(0, 0)) == 0
    acc = PointsAccount(0, 250)
    acc.balance += 50  # earned mid-round; next budget sees it
    assert set_budget(acc) == 300


@pytest.mark.parametrize(
    "cred,budget,lam,params,expected",
    [
        (0.3, 1000, 0.1, 5000, 300),  # credibility-limited
        (0.9, 1000, 0.1, 5000, 500),  # sharing-level-limited
        (0.0, 1000, 0.1, 5000, 0),
        (1.0 / 3.0, 100, 0.5, 100, 33),  # fractional product floors
    ],
)
def test_allocate(cred, budget, lam, params, expected):
    assert allocate(cred, budget, lam, params) == expected


def test_transfer_full_spend():
    a, b = PointsAccount(0, 300), PointsAccount(1, 0)
    transfer(a, b, 300)
    assert (a.balance, b.balance) == (0, 300)


def test_transfer_zero_is_noop():
    a, b = PointsAccount(0, 10), PointsAccount(1, 5)
    transfer(a, b, 0)
    assert (a.balance, b.balance) == (10, 5)


def test_transfer_over_balance_leaves_both_unchanged():
    a, b = PointsAccount(0, 10), PointsAccount(1, 5)
    with pytest.raises(InsufficientPointsError):
        transfer(a, b, 11)
    assert (a.balance, b.balance) == (10, 5)


def test_account_rejects_negative_balance():
    with pytest.raises(ValueError):
        PointsAccount(0, -1)


@given(
    st.lists(st.integers(min_value=0, max_value=1000), min_size=2, max_size=6),
    st.data(),
)
def test_transfers_conserve_total_and_nonnegativity(balances, data):
    accounts = {i: PointsAccount(i, b) for i, b in enumerate(balances)}
    start_total = total_balance(accounts)
    for _ in range(20):
        payer = data.draw(st.sampled_from(sorted(accounts)))
        payee = data.draw(st.sampled_from(sorted(accounts)))
        if payer == payee:
            continue
        amount = data.draw(st.integers(min_value=0, max_value=1200))
        try:
            transfer(accounts[payer], accounts[payee], amount)
        except InsufficientPointsError:
            pass
        assert all(acc.balance >= 0 for acc in accounts.values())
        assert total_balance(accounts) == start_total


def test_allocation_never_exceeds_budget_with_normalized_scores():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n_peers = int(rng.integers(2, 8))
        raw = rng.random(n_peers)
        scores = raw / raw.sum()
        budget = int(rng.integers(0, 10 ** 5))
        total = sum(allocate(c, budget, 0.5, 10 ** 6) for c in scores)
        assert total <= budget
