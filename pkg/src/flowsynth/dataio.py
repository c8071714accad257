"""CSV ingestion, per-column transforms and their inverses, splits.

Columns are encoded for flow training by one of four kinds: z-score,
scaled min-max logit (for bounded variables such as event times),
dequantized binary (bit + U(0,1) noise), or identity. The fitted
parameters ride along with the dataset and with saved models so
synthesis can round-trip back to original units.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError

__all__ = [
    "DataError",
    "ColumnTransform",
    "Dataset",
    "TRANSFORM_KINDS",
    "load_csv",
    "fit_apply_transforms",
    "apply_transforms",
    "invert_transforms",
    "split",
    "write_csv",
]

TRANSFORM_KINDS = ("zscore", "minmax-logit", "dequantize-binary", "identity")

DEFAULT_LOGIT_PADDING = 0.01


class DataError(ValueError):
    """Malformed input data or an invalid transform request."""


@dataclass
class ColumnTransform:
    """One column's encoding; ``params`` is empty until fitted."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise DataError(f"unknown transform kind {self.kind!r}")

    @property
    def fitted(self) -> bool:
        return self.kind == "identity" or bool(self.params)

    def fit(self, col: np.ndarray) -> None:
        if self.kind == "zscore":
            mean = float(np.mean(col))
            sd = float(np.std(col))
            if sd == 0.0:
                raise DataError("z-score transform needs a non-constant column")
            self.params = {"mean": mean, "sd": sd}
        elif self.kind == "minmax-logit":
            lo, hi = float(np.min(col)), float(np.max(col))
            if lo == hi:
                raise DataError("min-max logit transform needs lo < hi")
            self.params = {"lo": lo, "hi": hi, "padding": DEFAULT_LOGIT_PADDING}
        elif self.kind == "dequantize-binary":
            vals = np.unique(col)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise DataError("binary column must contain only 0 and 1")
            self.params = {"threshold": 1.0}
        # identity: nothing to fit

    def apply(self, col: np.ndarray, rng: np.random.Generator | None = None):
        if not self.fitted:
            raise ContractError("transform not fitted")
        if self.kind == "zscore":
            return (col - self.params["mean"]) / self.params["sd"]
        if self.kind == "minmax-logit":
            lo, hi = self.params["lo"], self.params["hi"]
            eps = self.params["padding"] * (hi - lo)
            p = (col - lo + eps) / (hi - lo + 2.0 * eps)
            if np.any(p <= 0.0) or np.any(p >= 1.0):
                raise DataError("value outside the fitted min-max range")
            return np.log(p / (1.0 - p))
        if self.kind == "dequantize-binary":
            if rng is None:
                raise ContractError("dequantization needs a random generator")
            return col + rng.uniform(0.0, 1.0, size=col.shape)
        return col.copy()

    def invert(self, col: np.ndarray):
        if not self.fitted:
            raise ContractError("transform not fitted")
        if self.kind == "zscore":
            return col * self.params["sd"] + self.params["mean"]
        if self.kind == "minmax-logit":
            lo, hi = self.params["lo"], self.params["hi"]
            eps = self.params["padding"] * (hi - lo)
            p = 1.0 / (1.0 + np.exp(-col))
            return p * (hi - lo + 2.0 * eps) + lo - eps
        if self.kind == "dequantize-binary":
            # continuous synthetic values: below the dequantization
            # midpoint decode to 0, at or above it to 1
            return (col >= self.params["threshold"]).astype(np.float64)
        return col.copy()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnTransform":
        return cls(kind=d["kind"], params=dict(d["params"]))


@dataclass
class Dataset:
    """n x d value matrix with column names and transform metadata."""

    columns: list[str]
    values: np.ndarray
    transforms: list[ColumnTransform]
    units: str = "original"  # "original" | "model"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("values must be a 2-d matrix")
        if len(self.columns) != self.values.shape[1]:
            raise DataError("one column name per value column required")
        if len(self.transforms) != self.values.shape[1]:
            raise DataError("one transform per column required")
        if self.units not in ("original", "model"):
            raise DataError(f"unknown units flag {self.units!r}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def replace_values(self, values: np.ndarray, units: str | None = None):
        return Dataset(
            columns=list(self.columns),
            values=values,
            transforms=list(self.transforms),
            units=self.units if units is None else units,
        )


def load_csv(path, schema: dict) -> Dataset:
    """Read a headered numeric CSV; schema maps column name -> kind.

    Transforms are constructed but not fitted. Parse errors name the
    offending (row, column) pair, both 1-based over data rows.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: empty input, expected a header row")
    header = [h.strip() for h in rows[0]]
    if any(not h for h in header):
        raise DataError(f"{path}: header row has an empty column name")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    for col in header:
        if col not in schema:
            raise DataError(f"{path}: schema does not cover column {col!r}")
    transforms = []
    for col in header:
        kind = schema[col]
        if kind not in TRANSFORM_KINDS:
            raise DataError(f"{path}: unknown schema kind {kind!r} for {col!r}")
        transforms.append(ColumnTransform(kind=kind))

    data = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DataError(
                f"{path}: row {r} has {len(row)} cells, expected {len(header)}"
            )
        for c, cell in enumerate(row, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: unparseable cell at (row {r}, col {c}): {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(
                    f"{path}: non-finite cell at (row {r}, col {c})"
                )
            data[r - 1, c - 1] = v
    return Dataset(columns=header, values=data, transforms=transforms,
                   units="original")


def fit_apply_transforms(ds: Dataset, seed: int) -> Dataset:
    """Fit each column's transform on this dataset and apply it."""
    if ds.units != "original":
        raise ContractError("dataset already in model units")
    rng = np.random.default_rng(seed)
    out = np.empty_like(ds.values)
    fitted = []
    for j, tr in enumerate(ds.transforms):
        t = ColumnTransform(kind=tr.kind, params=dict(tr.params))
        if not t.fitted:
            t.fit(ds.values[:, j])
        out[:, j] = t.apply(ds.values[:, j], rng=rng)
        fitted.append(t)
    return Dataset(columns=list(ds.columns), values=out, transforms=fitted,
                   units="model")


def apply_transforms(ds: Dataset, transforms, seed: int) -> Dataset:
    """Apply already-fitted transforms (e.g. from a saved model)."""
    if ds.units != "original":
        raise ContractError("dataset already in model units")
    if len(transforms) != ds.d:
        raise DataError("transform count does not match column count")
    rng = np.random.default_rng(seed)
    out = np.empty_like(ds.values)
    for j, t in enumerate(transforms):
        out[:, j] = t.apply(ds.values[:, j], rng=rng)
    return Dataset(columns=list(ds.columns), values=out,
                   transforms=list(transforms), units="model")


def invert_transforms(ds: Dataset) -> Dataset:
    """Exact inverse per kind; binary columns decode by threshold."""
    if ds.units != "model":
        raise ContractError("dataset already in original units")
    out = np.empty_like(ds.values)
    for j, t in enumerate(ds.transforms):
        out[:, j] = t.invert(ds.values[:, j])
    return Dataset(columns=list(ds.columns), values=out,
                   transforms=list(ds.transforms), units="original")


def split(ds: Dataset, fraction: float, seed: int):
    """Seeded shuffle then prefix split; returns (D1, D0)."""
    if not 0.0 < fraction < 1.0:
        raise ContractError("fraction must be in (0, 1)")
    if ds.n < 2:
        raise ContractError("need at least two rows to split")
    n1 = math.ceil(fraction * ds.n)
    if n1 == 0 or n1 == ds.n:
        raise ContractError(
            f"fraction {fraction} leaves an empty side for n={ds.n}"
        )
    idx = np.random.default_rng(seed).permutation(ds.n)
    d1 = ds.replace_values(ds.values[idx[:n1]].copy())
    d0 = ds.replace_values(ds.values[idx[n1:]].copy())
    return d1, d0


def write_csv(ds: Dataset, path) -> None:
    """Write header + rows at 17 significant digits (reload-exact)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ds.columns)
        for row in ds.values:
            writer.writerow([f"{v:.17g}" for v in row])
