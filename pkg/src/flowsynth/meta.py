"""Fixed-effects and DerSimonian-Laird random-effects pooling.

Studies enter as (theta_hat, var_hat) pairs; the random-effects path
estimates the between-study variance by the method of moments with
truncation at zero and reports a Wald interval. The normal quantile
comes from a rational approximation so the module has no statistics
dependency.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict

from .numerics import ContractError

__all__ = [
    "StudySummary",
    "MetaResult",
    "DegenerateDesignError",
    "fixed_effects",
    "dl_tau2",
    "random_effects",
    "forest_export",
    "write_forest_csv",
    "read_studies_csv",
    "normal_quantile",
]


class DegenerateDesignError(ValueError):
    """The heterogeneity denominator vanished; inputs cannot be pooled."""


@dataclass
class StudySummary:
    label: str
    theta_hat: float
    var_hat: float

    def __post_init__(self):
        if not self.var_hat > 0:
            raise ContractError(
                f"study {self.label!r}: variance must be positive, got {self.var_hat}"
            )


@dataclass
class MetaResult:
    theta_F: float
    var_F: float
    tau2_hat: float
    theta_R: float
    var_R: float
    ci_low: float
    ci_high: float
    alpha: float
    K: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def fixed_effects(studies) -> tuple[float, float]:
    """Inverse-variance pooled estimate and its variance."""
    studies = list(studies)
    if not studies:
        raise ContractError("need at least one study")
    wsum = sum(1.0 / s.var_hat for s in studies)
    theta = sum(s.theta_hat / s.var_hat for s in studies) / wsum
    return theta, 1.0 / wsum


def dl_tau2(studies) -> float:
    """Method-of-moments between-study variance, truncated at zero."""
    studies = list(studies)
    if len(studies) < 2:
        raise ContractError("need at least two studies")
    theta_f, _ = fixed_effects(studies)
    q = sum((s.theta_hat - theta_f) ** 2 / s.var_hat for s in studies)
    s1 = sum(1.0 / s.var_hat for s in studies)
    s2 = sum(1.0 / s.var_hat ** 2 for s in studies)
    denom = s1 - s2 / s1
    if denom <= 0.0:
        raise DegenerateDesignError(
            "heterogeneity denominator is non-positive; study variances are "
            "too extreme to pool"
        )
    return max(0.0, (q - (len(studies) - 1)) / denom)


def random_effects(studies, alpha: float = 0.05) -> MetaResult:
    """DerSimonian-Laird pooled estimate with a Wald interval."""
    studies = list(studies)
    if len(studies) < 2:
        raise ContractError("need at least two studies for random effects")
    if not 0.0 < alpha < 1.0:
        raise ContractError("alpha must be in (0, 1)")
    theta_f, var_f = fixed_effects(studies)
    tau2 = dl_tau2(studies)
    wsum = sum(1.0 / (s.var_hat + tau2) for s in studies)
    theta_r = sum(s.theta_hat / (s.var_hat + tau2) for s in studies) / wsum
    var_r = 1.0 / wsum
    z = normal_quantile(1.0 - alpha / 2.0)
    half = z * math.sqrt(var_r)
    return MetaResult(
        theta_F=theta_f,
        var_F=var_f,
        tau2_hat=tau2,
        theta_R=theta_r,
        var_R=var_r,
        ci_low=theta_r - half,
        ci_high=theta_r + half,
        alpha=alpha,
        K=len(studies),
    )


def forest_export(studies, result: MetaResult):
    """Rows for a forest plot: one per study plus the pooled row.

    Study intervals use the same normal quantile as the pooled interval.
    Ordering follows the input; the aggregate row comes last.
    """
    z = normal_quantile(1.0 - result.alpha / 2.0)
    rows = []
    for s in studies:
        half = z * math.sqrt(s.var_hat)
        rows.append({
            "label": s.label,
            "kind": "study",
            "theta": s.theta_hat,
            "ci_low": s.theta_hat - half,
            "ci_high": s.theta_hat + half,
        })
    rows.append({
        "label": "pooled (random effects)",
        "kind": "aggregate",
        "theta": result.theta_R,
        "ci_low": result.ci_low,
        "ci_high": result.ci_high,
    })
    return rows


def write_forest_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "kind", "theta", "ci_low", "ci_high"])
        for r in rows:
            writer.writerow([
                r["label"], r["kind"],
                f"{r['theta']:.17g}", f"{r['ci_low']:.17g}", f"{r['ci_high']:.17g}",
            ])


def read_studies_csv(path):
    """Load label,theta_hat,var_hat rows (header required)."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ContractError(f"{path}: empty studies file")
    header = [h.strip() for h in rows[0]]
    if header != ["label", "theta_hat", "var_hat"]:
        raise ContractError(
            f"{path}: expected header label,theta_hat,var_hat, got {','.join(header)}"
        )
    studies = []
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != 3:
            raise ContractError(f"{path}: row {i} has {len(row)} cells, expected 3")
        try:
            studies.append(StudySummary(row[0], float(row[1]), float(row[2])))
        except ValueError as exc:
            raise ContractError(f"{path}: row {i}: {exc}") from None
    if not studies:
        raise ContractError(f"{path}: no study rows")
    return studies


# Wichura's AS 241 rational approximation (double precision branch).
# Far more accurate than the 1e-8 this module needs.
def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF for p in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ContractError("quantile argument must be in (0, 1)")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    val = num / den
    return -val if q < 0 else val
