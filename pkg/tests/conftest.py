import os
from pathlib import Path

import pytest

from fedtrade.datasets import load_mnist

DATA_ROOT = Path(
    os.environ.get(
        "FEDTRADE_DATA", Path(__file__).resolve().parent.parent / "data" / "mnist"
    )
)


@pytest.fixture(scope="session")
def mnist():
    """(train, test) MNIST splits, standardized with training statistics."""
    if not DATA_ROOT.exists():
        pytest.skip(f"dataset root {DATA_ROOT} missing; set FEDTRADE_DATA")
    return load_mnist(DATA_ROOT)
