import os

import numpy as np
import pytest

from metatree.networks import MetaModel, ModelConfig

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ML100K_DIR = os.environ.get("ML100K_DIR", os.path.join(REPO_ROOT, "data", "ml-100k"))
ARTIFACTS_DIR = os.environ.get("METATREE_ARTIFACTS",
                               os.path.join(REPO_ROOT, "artifacts"))

ml100k_available = os.path.isfile(os.path.join(ML100K_DIR, "u1.base"))
needs_ml100k = pytest.mark.skipif(
    not ml100k_available,
    reason=f"MovieLens 100K files not found under {ML100K_DIR}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model(rng):
    """Small model: d_x=4, d_h=8, depth 2, rating-style output range."""
    return MetaModel(ModelConfig(d_x=4, d_h=8, max_depth=2,
                                 output_range=(1.0, 5.0)), rng)


def finite_diff_grad(fn, param_data, i, h=1e-5):
    """Central finite difference of scalar fn() w.r.t. param_data.ravel()[i]."""
    flat = param_data.ravel()
    orig = flat[i]
    flat[i] = orig + h
    up = fn()
    flat[i] = orig - h
    down = fn()
    flat[i] = orig
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
