import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flowsynth import maf


def zeroed_flow(d, hidden=4, n_flows=1, identity_perms=True, seed=0):
    """A flow whose networks output mu=0, log_sigma=0 (the identity map
    when the permutations are identities)."""
    model = maf.build_model(d, [hidden], n_flows, seed=seed)
    for layer in model.layers:
        if identity_perms:
            layer.perm = np.arange(d)
        p = layer.made
        p.weights = [np.zeros_like(w) for w in p.weights]
        p.biases = [np.zeros_like(b) for b in p.biases]
        p.w_mu = np.zeros_like(p.w_mu)
        p.b_mu = np.zeros_like(p.b_mu)
        p.w_ls = np.zeros_like(p.w_ls)
        p.b_ls = np.zeros_like(p.b_ls)
    return model


def affine_flow(d, mu, log_sigma):
    """Single-layer flow with constant heads: x = mu + z * exp(log_sigma)."""
    model = zeroed_flow(d)
    layer = model.layers[0]
    layer.made.b_mu = np.full(d, float(mu))
    layer.made.b_ls = np.full(d, float(log_sigma))
    return model


def compound_symmetry(n, d, rho, seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, 1))
    e = rng.standard_normal((n, d))
    return np.sqrt(rho) * g + np.sqrt(1.0 - rho) * e


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
