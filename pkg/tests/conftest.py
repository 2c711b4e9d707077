import numpy as np
import pytest

from physseg.pgs import fit_gmm, label_pgs
from physseg.phantom import generate_phantom


@pytest.fixture(scope="session")
def small_phantom():
    """One 24^3 phantom with its true labels (session-wide, read-only)."""
    return generate_phantom(seed=1234, dims=(24, 24, 24), age=40.0)


@pytest.fixture(scope="session")
def labeled_phantom(small_phantom):
    """Phantom plus fitted mixture and reference labels."""
    mpm, hard_true = small_phantom
    gmm = fit_gmm(mpm)
    soft, hard = label_pgs(mpm, gmm)
    return mpm, hard_true, gmm, soft, hard


@pytest.fixture()
def rng():
    return np.random.default_rng(99)
