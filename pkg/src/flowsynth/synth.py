"""The three synthetic-data mechanisms.

Latent noise injection interpolates each observation with fresh
Gaussian noise in the flow's latent space, keeping a one-to-one row
correspondence with the input. Flow sampling draws fresh rows with no
linkage. Direct noise injection mixes Gaussian noise into the
observation space and is the degradation baseline.

All mechanisms take either a seed or a pre-drawn noise bank; sharing
one bank across a grid of weights makes the grid comparison exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataio, maf
from .numerics import ContractError

__all__ = [
    "MECHANISMS",
    "SynthesisSpec",
    "noise_bank",
    "latent_noise_inject",
    "flow_sample",
    "direct_noise_inject",
    "synthesize",
]

MECHANISMS = ("latent-noise", "flow-sample", "direct-noise")


@dataclass
class SynthesisSpec:
    """Mechanism tag, perturbation weight, seed, and optional size."""

    mechanism: str
    w: float = 1.0
    seed: int = 0
    m: int | None = None  # flow-sample only

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ContractError(f"unknown mechanism {self.mechanism!r}")
        if not 0.0 <= self.w <= 1.0:
            raise ContractError(f"w must be in [0, 1], got {self.w}")
        if self.mechanism == "flow-sample":
            if self.m is None or self.m < 1:
                raise ContractError("flow-sample needs a sample count m >= 1")


def noise_bank(n: int, d: int, seed: int) -> np.ndarray:
    """n x d standard Gaussian draws for reuse across a weight grid."""
    return np.random.default_rng(seed).standard_normal((n, d))


def _values_of(X):
    if isinstance(X, dataio.Dataset):
        return np.asarray(X.values, dtype=np.float64), X
    return np.atleast_2d(np.asarray(X, dtype=np.float64)), None


def _pack_like(values, template):
    if template is None:
        return values
    return template.replace_values(values)


def latent_noise_inject(model: maf.MafModel, X, w: float,
                        seed: int | None = None,
                        noise: np.ndarray | None = None):
    """Per-row map f(sqrt(w) f^{-1}(x_i) + sqrt(1-w) Z_i), rows aligned.

    w == 1 short-circuits to the identity (the zero-noise limit of the
    mechanism is exact, not merely within flow round-trip error).
    """
    vals, template = _values_of(X)
    if vals.shape[1] != model.d:
        raise ContractError(
            f"data has {vals.shape[1]} columns, model expects {model.d}"
        )
    if not 0.0 <= w <= 1.0:
        raise ContractError(f"w must be in [0, 1], got {w}")
    if w == 1.0:
        return _pack_like(vals.copy(), template)
    z = _resolve_noise(noise, seed, vals.shape)
    lat, _ = maf.inverse(model, vals)
    mixed = np.sqrt(w) * lat + np.sqrt(1.0 - w) * z
    out = maf.forward(model, mixed)
    return _pack_like(out, template)


def flow_sample(model: maf.MafModel, m: int, seed: int):
    """Fresh draws from the trained flow (delegates to maf.sample)."""
    return maf.sample(model, m, seed)


def direct_noise_inject(X, w: float, seed: int | None = None,
                        noise: np.ndarray | None = None):
    """Observation-space baseline: sqrt(w) x_i + sqrt(1-w) sd * Z_i."""
    vals, template = _values_of(X)
    if vals.shape[0] < 2:
        raise ContractError("need at least two rows for column scales")
    if not 0.0 <= w <= 1.0:
        raise ContractError(f"w must be in [0, 1], got {w}")
    sds = vals.std(axis=0)
    if np.any(sds == 0.0):
        col = int(np.argmin(sds))
        raise ContractError(f"column {col} has zero variance")
    if w == 1.0:
        return _pack_like(vals.copy(), template)
    z = _resolve_noise(noise, seed, vals.shape)
    out = np.sqrt(w) * vals + np.sqrt(1.0 - w) * (z * sds)
    return _pack_like(out, template)


def _resolve_noise(noise, seed, shape):
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != shape:
            raise ContractError(
                f"noise bank shape {noise.shape} does not match data {shape}"
            )
        return noise
    if seed is None:
        raise ContractError("either a seed or a noise bank is required")
    return noise_bank(shape[0], shape[1], seed)


def synthesize(model: maf.MafModel | None, X, spec: SynthesisSpec):
    """Dispatch a :class:`SynthesisSpec` to its mechanism."""
    if spec.mechanism == "latent-noise":
        if model is None:
            raise ContractError("latent-noise needs a trained model")
        return latent_noise_inject(model, X, spec.w, seed=spec.seed)
    if spec.mechanism == "flow-sample":
        if model is None:
            raise ContractError("flow-sample needs a trained model")
        return flow_sample(model, spec.m, spec.seed)
    return direct_noise_inject(X, spec.w, seed=spec.seed)
