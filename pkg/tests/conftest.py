import numpy as np
import pytest

from fairpoll import dataset, geo


def random_grouped(rng, n, m, dim=2, facilities=None):
    pts = rng.random((n, dim))
    gi = np.concatenate([np.arange(m), rng.integers(0, m, n - m)])
    rng.shuffle(gi)
    fac = pts if facilities is None else facilities
    return dataset.GroupedDataset(coords=pts, group_index=gi, labels=[f"G{g}" for g in range(m)],
                                  facilities=fac, metric=geo.euclidean(dim))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
