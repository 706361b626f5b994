import numpy as np
import pytest

from socialrec.graphs import InteractionRecord
from socialrec.training import RecDataset

DAY = 86_400


def canonical_dataset() -> RecDataset:
    """5 users, 8 items, 2 types; small enough for finite differences."""
    rows = [
        (0, 0, 0, 1), (0, 1, 0, 3), (0, 2, 1, 9),
        (1, 1, 1, 2), (1, 3, 0, 5), (1, 4, 0, 11),
        (2, 2, 0, 4), (2, 5, 1, 6), (2, 0, 1, 12),
        (3, 5, 0, 7), (3, 6, 1, 8), (3, 7, 0, 13),
        (4, 6, 0, 10), (4, 7, 1, 14), (4, 3, 1, 15),
        (0, 0, 1, 16),  # same pair as the first row under another type
    ]
    records = [InteractionRecord(u, v, k, ts * DAY) for u, v, k, ts in rows]
    return RecDataset(
        user_count=5,
        item_count=8,
        type_count=2,
        records=records,
        social_edges=[(0, 1), (1, 2), (3, 4)],
        item_categories={j: ["x" if j < 4 else "y"] for j in range(8)},
    )


@pytest.fixture
def canonical():
    return canonical_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
