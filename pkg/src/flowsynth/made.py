"""Masked feedforward block with an autoregressive connectivity pattern.

A block maps a d-vector to per-coordinate (mu, log_sigma) heads such
that coordinate i only ever reads coordinates 1..i-1. Binary masks on
each weight matrix enforce the pattern; spectral normalization keeps
every weight matrix inside the unit spectral ball.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError, DomainError

__all__ = [
    "MaskSet",
    "MadeParams",
    "build_masks",
    "init_made",
    "made_forward",
    "spectral_normalize",
]

LOG_SIGMA_CLAMP = 7.0  # |log sigma| bound applied by the flow layer


@dataclass
class MaskSet:
    """Degree labels per layer and one 0/1 mask per weight matrix.

    ``masks[l]`` has shape (units_in, units_out); hidden masks connect
    unit i to unit j iff degree(j) >= degree(i), the final output mask
    uses the strict inequality so output i depends on inputs 1..i-1.
    """

    degrees: list[np.ndarray]
    masks: list[np.ndarray]


def build_masks(d: int, hidden_sizes, seed: int = 0) -> MaskSet:
    """Degree assignment and masks for one block.

    Input degrees are 1..d; hidden degrees cycle deterministically
    through 1..d-1 (all zeros when d == 1, which disconnects the heads
    from the input). ``seed`` is accepted for interface stability but
    the assignment is deterministic.
    """
    if d < 1:
        raise ContractError("input dimension must be >= 1")
    hidden_sizes = [int(h) for h in hidden_sizes]
    if not hidden_sizes or any(h < 1 for h in hidden_sizes):
        raise ContractError("hidden sizes must all be >= 1")

    degrees = [np.arange(1, d + 1)]
    for h in hidden_sizes:
        if d == 1:
            degrees.append(np.zeros(h, dtype=int))
        else:
            degrees.append(np.arange(h) % (d - 1) + 1)

    masks = []
    for prev, nxt in zip(degrees[:-1], degrees[1:]):
        masks.append((prev[:, None] <= nxt[None, :]).astype(np.float64))
    # strict inequality into the output heads
    out_degrees = degrees[0]
    masks.append((degrees[-1][:, None] < out_degrees[None, :]).astype(np.float64))
    return MaskSet(degrees=degrees, masks=masks)


@dataclass
class MadeParams:
    """Weights and biases of one block; hidden activation is tanh.

    Masked-out weight entries are kept at exactly zero, so the stored
    matrices coincide with the effective (masked) ones.
    """

    d: int
    hidden_sizes: list[int]
    mask_set: MaskSet
    weights: list[np.ndarray]  # hidden chain
    biases: list[np.ndarray]
    w_mu: np.ndarray
    b_mu: np.ndarray
    w_ls: np.ndarray
    b_ls: np.ndarray

    def all_weights(self):
        return self.weights + [self.w_mu, self.w_ls]

    def copy(self) -> "MadeParams":
        return MadeParams(
            d=self.d,
            hidden_sizes=list(self.hidden_sizes),
            mask_set=self.mask_set,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            w_mu=self.w_mu.copy(),
            b_mu=self.b_mu.copy(),
            w_ls=self.w_ls.copy(),
            b_ls=self.b_ls.copy(),
        )


def init_made(d: int, hidden_sizes, seed: int,
              spectral_norm: bool = True) -> MadeParams:
    """Uniform(-s, s) init with s = 1/sqrt(fan_in), masked, then one
    spectral normalization pass so every matrix starts inside the unit
    spectral ball."""
    mask_set = build_masks(d, hidden_sizes)
    rng = np.random.default_rng(seed)
    sizes = [d] + list(hidden_sizes)

    def make(n_in, n_out, mask):
        s = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-s, s, size=(n_in, n_out)) * mask
        if spectral_norm:
            w = spectral_normalize(w, iters=50, seed=seed)
        return w

    weights = []
    biases = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(make(n_in, n_out, mask_set.masks[i]))
        biases.append(np.zeros(n_out))
    out_mask = mask_set.masks[-1]
    w_mu = make(sizes[-1], d, out_mask)
    w_ls = make(sizes[-1], d, out_mask)
    return MadeParams(
        d=d,
        hidden_sizes=list(hidden_sizes),
        mask_set=mask_set,
        weights=weights,
        biases=biases,
        w_mu=w_mu,
        b_mu=np.zeros(d),
        w_ls=w_ls,
        b_ls=np.zeros(d),
    )


def made_forward(params: MadeParams, x):
    """Evaluate the block on a d-vector or an (n, d) batch.

    Returns (mu, log_sigma) with the same leading shape as ``x``;
    log_sigma is returned unclamped, positivity of sigma comes from the
    exp parameterization in the flow.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("made_forward input contains non-finite entries")
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.d:
        raise ContractError(f"expected {params.d} columns, got {h.shape[1]}")
    for w, b, m in zip(params.weights, params.biases, params.mask_set.masks):
        h = np.tanh(h @ (w * m) + b)
    out_mask = params.mask_set.masks[-1]
    mu = h @ (params.w_mu * out_mask) + params.b_mu
    ls = h @ (params.w_ls * out_mask) + params.b_ls
    if single:
        return mu[0], ls[0]
    return mu, ls


def spectral_normalize(w, iters: int = 20, seed: int = 0, u=None):
    """Divide a matrix by its power-iteration top singular value.

    An all-zero matrix is returned unchanged (its norm is already 0).
    With iters >= 20 the result's true top singular value is within
    1e-3 of 1 for generic matrices.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ContractError(f"expected a matrix, got shape {w.shape}")
    if iters < 1:
        raise ContractError("iters must be >= 1")
    if not np.any(w):
        return w.copy()
    sigma, _ = _power_iteration(w, iters, seed, u)
    return w / sigma


def _power_iteration(w, iters, seed, u=None):
    """Top singular value estimate; returns (sigma, u) for warm starts."""
    m = w.shape[0]
    if u is None:
        u = np.random.default_rng(seed).standard_normal(m)
        u /= np.linalg.norm(u)
    for _ in range(iters):
        v = w.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            # u landed in the left null space; restart deterministically
            u = np.ones(m) / np.sqrt(m)
            v = w.T @ u
            nv = np.linalg.norm(v)
        v /= nv
        u = w @ v
        nu = np.linalg.norm(u)
        u /= nu
    sigma = float(u @ (w @ v))
    return sigma, u
