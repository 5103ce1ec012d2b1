import numpy as np
import pytest

from dichogeo.core import SurveyDataset
from dichogeo.numerics import limit_blas_threads

limit_blas_threads()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260810)


def random_binary_dataset(rng, m=None, max_per_loc=3, extent=0.3):
    """Small random binary survey used by oracle comparisons."""
    m = int(m if m is not None else rng.integers(1, 4))
    coords = rng.uniform(0.0, extent, (m, 2))
    n_i = rng.integers(1, max_per_loc + 1, m)
    loc_index = np.repeat(np.arange(m), n_i)
    yb = rng.integers(0, 2, int(n_i.sum())).astype(float)
    if yb.size > 1 and (yb == yb[0]).all():
        yb[0] = 1.0 - yb[0]  # avoid fully degenerate outcomes
    return SurveyDataset.from_arrays(coords, loc_index=loc_index, y_binary=yb)
