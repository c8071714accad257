"""Privacy auditing and calibration of the perturbation weight.

Membership scores are nearest-synthetic distances; the attack AUC uses
the half-weight tie rule so it matches the pair-enumeration definition
exactly. The closed-form budget calculators implement the asymptotic
local-DP formulas; they are reported verbatim, with no finite-sample
correction.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial.distance import cdist

from . import dataio, maf, synth
from .numerics import ContractError

__all__ = [
    "PrivacyReport",
    "membership_score",
    "membership_scores",
    "mia_auc",
    "closer_real_probability",
    "perturbation_ranks",
    "median_rank",
    "calibrate_w",
    "dp_epsilon",
    "dp_w_bound",
    "empirical_sensitivity",
    "write_report_csv",
    "write_report_json",
]

_CHUNK = 1024  # rows per pairwise-distance block


@dataclass
class PrivacyReport:
    """One row of the audit table; fields may be NaN when not computed."""

    w: float
    auc: float
    closer_prob: float
    median_rank: float
    n: int

    def validate(self):
        if not math.isnan(self.auc) and not 0.0 <= self.auc <= 1.0:
            raise ContractError(f"auc out of range: {self.auc}")
        if not math.isnan(self.closer_prob) and not 0.0 <= self.closer_prob <= 1.0:
            raise ContractError(f"closer_prob out of range: {self.closer_prob}")
        return self


def _matrix(X, name):
    if isinstance(X, dataio.Dataset):
        X = X.values
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.size == 0:
        raise ContractError(f"{name} is empty")
    return X


def membership_score(x0, synthetic) -> float:
    """Distance from one point to its nearest synthetic row."""
    S = _matrix(synthetic, "synthetic set")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1 or x0.shape[0] != S.shape[1]:
        raise ContractError(
            f"point has shape {x0.shape}, synthetic rows have {S.shape[1]} columns"
        )
    return float(np.min(np.linalg.norm(S - x0, axis=1)))


def membership_scores(X, synthetic) -> np.ndarray:
    """Nearest-synthetic distance for every row of X (blocked)."""
    X = _matrix(X, "query set")
    S = _matrix(synthetic, "synthetic set")
    if X.shape[1] != S.shape[1]:
        raise ContractError("query and synthetic dimensions disagree")
    out = np.empty(X.shape[0])
    for lo in range(0, X.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, X.shape[0])
        out[lo:hi] = cdist(X[lo:hi], S).min(axis=1)
    return out


def mia_auc(member_scores, nonmember_scores) -> float:
    """Attack AUC with ties at half weight.

    Computed from midranks, which is algebraically identical to the
    double sum over pairs of 1{s_i < s*_j} + 0.5 * 1{s_i = s*_j}.
    """
    m = np.asarray(member_scores, dtype=np.float64).ravel()
    f = np.asarray(nonmember_scores, dtype=np.float64).ravel()
    if m.size == 0 or f.size == 0:
        raise ContractError("both score sets must be non-empty")
    combined = np.concatenate([m, f])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size)
    sorted_vals = combined[order]
    # midranks over tied runs
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_nonmembers = float(ranks[m.size:].sum())
    u = rank_sum_nonmembers - f.size * (f.size + 1) / 2.0
    return u / (m.size * f.size)


def _neighbor_counts(X, Xt) -> np.ndarray:
    """r_i = #{j != i : ||X_i - X_j|| < ||X_i - Xt_i||}, blocked."""
    X = _matrix(X, "real set")
    Xt = _matrix(Xt, "synthetic set")
    if X.shape != Xt.shape:
        raise ContractError(
            f"matched datasets required, got {X.shape} and {Xt.shape}"
        )
    if X.shape[0] < 2:
        raise ContractError("need at least two rows")
    d_synth = np.linalg.norm(X - Xt, axis=1)
    counts = np.empty(X.shape[0], dtype=np.int64)
    for lo in range(0, X.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, X.shape[0])
        block = cdist(X[lo:hi], X)
        closer = block < d_synth[lo:hi, None]
        # a row is never its own neighbor; the diagonal distance 0 would
        # otherwise count whenever the perturbation is nonzero
        for k in range(lo, hi):
            if closer[k - lo, k]:
                closer[k - lo, k] = False
        counts[lo:hi] = closer.sum(axis=1)
    return counts


def closer_real_probability(X, Xt) -> float:
    """Fraction of ordered pairs (i, j) where another real point sits
    closer to X_i than its own perturbed copy does."""
    counts = _neighbor_counts(X, Xt)
    n = counts.shape[0]
    return float(counts.sum()) / (n * (n - 1))


def perturbation_ranks(X, Xt) -> np.ndarray:
    """Rank of each row's perturbation distance among its real-data
    neighbor distances (0 = closer than every neighbor)."""
    return _neighbor_counts(X, Xt)


def median_rank(ranks) -> int:
    """Lower median: for even counts the smaller middle value."""
    r = np.sort(np.asarray(ranks))
    if r.size == 0:
        raise ContractError("empty rank sequence")
    return int(r[(r.size - 1) // 2])


def calibrate_w(data: dataio.Dataset, model_train_fn, grid,
                auc_threshold: float = 0.55, split_fraction: float = 0.8,
                seed: int = 0, min_closer_prob: float | None = None):
    """Pick the largest grid weight whose attack AUC stays below the
    threshold.

    The data is split into a modeling set D1 and a holdout D0;
    transforms are fitted on D1 only, a flow is trained on D1, and for
    each weight the perturbed copy of D1 is attacked with D1 as members
    and D0 as non-members. ``min_closer_prob`` optionally also requires
    the closer-real-neighbor probability to reach a floor before a
    weight qualifies. Returns (w_star, reports, threshold_met).
    """
    grid = [float(w) for w in grid]
    if not grid:
        raise ContractError("weight grid is empty")
    if sorted(grid) != grid:
        raise ContractError("weight grid must be sorted ascending")
    if not 0.0 < split_fraction < 1.0:
        raise ContractError("split_fraction must be in (0, 1)")
    ss = np.random.SeedSequence(seed)
    split_seed, train_seed, noise_seed = (int(s.generate_state(1)[0])
                                          for s in ss.spawn(3))
    d1, d0 = dataio.split(data, split_fraction, seed=split_seed)
    d1_model = dataio.fit_apply_transforms(d1, seed=split_seed)
    d0_model = dataio.apply_transforms(d0, d1_model.transforms, seed=split_seed)
    model = model_train_fn(d1_model, train_seed)

    x1 = d1_model.values
    x0 = d0_model.values
    bank = synth.noise_bank(x1.shape[0], x1.shape[1], noise_seed)
    reports = []
    w_star = None
    for w in grid:
        xt = synth.latent_noise_inject(model, x1, w, noise=bank)
        s_members = membership_scores(x1, xt)
        s_nonmembers = membership_scores(x0, xt)
        auc = mia_auc(s_members, s_nonmembers)
        ranks = perturbation_ranks(x1, xt)
        rep = PrivacyReport(
            w=w,
            auc=auc,
            closer_prob=closer_real_probability(x1, xt),
            median_rank=median_rank(ranks),
            n=x1.shape[0],
        ).validate()
        reports.append(rep)
        qualifies = auc < auc_threshold
        if min_closer_prob is not None:
            qualifies &= rep.closer_prob >= min_closer_prob
        if qualifies:
            w_star = w
    threshold_met = w_star is not None
    if not threshold_met:
        w_star = grid[0]
    return w_star, reports, threshold_met


def dp_epsilon(C: float, w: float, delta: float) -> float:
    """Asymptotic local-DP budget of the latent Gaussian mechanism."""
    if not 0.0 < w < 1.0:
        raise ContractError("w must be in (0, 1)")
    if not 0.0 < delta < 1.0:
        raise ContractError("delta must be in (0, 1)")
    if C <= 0.0:
        raise ContractError("sensitivity bound must be positive")
    return (w * C * C / (2.0 * (1.0 - w))
            + C * math.sqrt(2.0 * w * math.log(1.0 / delta))
            / math.sqrt(1.0 - w))


def dp_w_bound(Delta: float, eps: float, delta: float) -> float:
    """Largest admissible weight for a target (eps, delta), small-w regime."""
    if not 0.0 < eps < 1.0:
        raise ContractError("eps must be in (0, 1)")
    if not 0.0 < delta < 0.5:
        raise ContractError("delta must be in (0, 1/2)")
    if Delta <= 0.0:
        raise ContractError("sensitivity must be positive")
    return 1.0 / (1.0 + (Delta * Delta / (eps * eps))
                  * (eps - 2.0 * math.log(2.0 * delta)))


def empirical_sensitivity(model, X) -> float:
    """Max pairwise expansion of the inverse map over the dataset.

    Empirical proxy only, not a certified bound: it lower-bounds the
    true Lipschitz constant of f^{-1} on the data's support.
    """
    X = _matrix(X, "dataset")
    if X.shape[0] < 2:
        raise ContractError("need at least two rows")
    Z, _ = maf.inverse(model, X)
    best = 0.0
    for lo in range(0, X.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, X.shape[0])
        dx = cdist(X[lo:hi], X)
        dz = cdist(Z[lo:hi], Z)
        mask = dx > 0
        ratios = np.where(mask, dz / np.where(mask, dx, 1.0), 0.0)
        best = max(best, float(ratios.max()))
    return best


def _row(rep: PrivacyReport):
    def fmt(v):
        return "" if isinstance(v, float) and math.isnan(v) else f"{v:.17g}"

    return [fmt(rep.w), fmt(rep.auc), fmt(rep.closer_prob),
            fmt(float(rep.median_rank)), str(rep.n)]


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["w", "auc", "closer_prob", "median_rank", "n"])
        for rep in reports:
            writer.writerow(_row(rep))


def write_report_json(reports, path) -> None:
    def clean(rep):
        d = asdict(rep)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in d.items()}

    with open(path, "w", encoding="utf-8") as fh:
        json.dump([clean(r) for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
