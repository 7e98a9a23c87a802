import numpy as np
import pytest

from pigment.encoder import EncoderConfig
from pigment.pipeline import BlendParams, PigmentModelParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return EncoderConfig.tiny()


def random_params(rng, n=8, l=6, offset_scale=0.05, blend=True, dtype=np.float64):
    """Random but well-conditioned pipeline parameters for tests."""
    raw = rng.normal(0, 1, (3, n))
    offsets = rng.uniform(-offset_scale, offset_scale, (n, l))
    U = rng.normal(0, 0.3, (3, n))
    if blend:
        b = BlendParams(
            rng.normal(0, 0.5, (n, n)), rng.normal(0, 0.1, n),
            rng.uniform(0.5, 1.5, n), rng.normal(0, 0.1, n),
            rng.normal(0, 0.1, n), rng.uniform(0.5, 1.5, n),
            rng.normal(0, 0.5, (n, n)), rng.normal(0, 0.1, n),
        )
    else:
        b = BlendParams.identity(n, bypass=True)
    return PigmentModelParams(raw, offsets, U, b).astype(dtype)


def identity_params(rng, n=8, l=6, dtype=np.float64):
    """Zero offsets, bypassed blend and ``U = pinv(W^T)`` from a least-squares solve."""
    from pigment.pipeline import normalize_expansion_weights

    raw = rng.normal(0, 1, (3, n))
    what = normalize_expansion_weights(raw)
    # least-squares solution of what^T @ U = I_N is the pseudo-inverse of what^T
    U = np.linalg.lstsq(what.T, np.eye(n), rcond=None)[0]
    return PigmentModelParams(raw, np.zeros((n, l)), U,
                              BlendParams.identity(n, bypass=True)).astype(dtype)


def dense_oracle(p, ordinates, grid_points=100_001):
    """Evaluate the curve on a dense grid, then interpolate the nearest grid segment."""
    knots = np.linspace(0, 1, ordinates.shape[0])
    grid = np.linspace(0, 1, grid_points)
    # each grid value from its own segment, computed by explicit loop over segments
    vals = np.empty_like(grid)
    for l in range(len(knots) - 1):
        sel = (grid >= knots[l]) & (grid <= knots[l + 1])
        a = (knots[l + 1] - grid[sel]) / (knots[l + 1] - knots[l])
        vals[sel] = a * ordinates[l] + (1 - a) * ordinates[l + 1]
    j = np.clip(np.floor(p * (grid_points - 1)).astype(int), 0, grid_points - 2)
    f = (p - grid[j]) / (grid[j + 1] - grid[j])
    return (1 - f) * vals[j] + f * vals[j + 1]
