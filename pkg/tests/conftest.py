import numpy as np
import pytest

from detapp.episode import PatchGrid, Sample


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grid_of(values, sample_id=0):
    """PatchGrid from a nested list shaped (H, W) or (H, W, d)."""
    a = np.asarray(values, dtype=float)
    if a.ndim == 2:
        a = a[..., None]
    return PatchGrid(a, sample_id)


def sample_of(values, label, sample_id=0, noise="clean"):
    return Sample(grid_of(values, sample_id), label, noise)
