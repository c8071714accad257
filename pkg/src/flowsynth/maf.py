"""Autoregressive flow stack: exact density, sampling, training, persistence.

A model is an ordered list of (permutation, masked block) layers over a
standard Gaussian base. The x -> z direction is a single vectorized
pass per layer; the z -> x direction generates coordinates sequentially.
Training maximizes the exact change-of-variables likelihood with
full-batch Adam and optional validation-based early stopping.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import dataio
from .made import (
    LOG_SIGMA_CLAMP,
    MadeParams,
    init_made,
    made_forward,
    _power_iteration,
)
from .numerics import (
    ContractError,
    DomainError,
    GradTape,
    NumericError,
    adam_init,
    adam_step,
)

__all__ = [
    "FlowLayer",
    "MafModel",
    "TrainConfig",
    "TrainHistory",
    "TrainingError",
    "ModelFormatError",
    "ModelVersionError",
    "ChecksumError",
    "build_model",
    "inverse",
    "forward",
    "log_prob",
    "negative_log_likelihood",
    "nll_gradients",
    "train",
    "sample",
    "save",
    "load",
    "transform_meta_hash",
]

_LOG_2PI = float(np.log(2.0 * np.pi))

MODEL_MAGIC = b"FSYNMAF\x00"
MODEL_VERSION = 1


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or an unusable dataset)."""


class ModelFormatError(ValueError):
    """Model file is not in the expected container format."""


class ModelVersionError(ModelFormatError):
    """Model file uses an unsupported format version."""


class ChecksumError(ModelFormatError):
    """Model file content does not match its checksum."""


@dataclass
class FlowLayer:
    perm: np.ndarray
    made: MadeParams

    @property
    def inv_perm(self) -> np.ndarray:
        return np.argsort(self.perm)


@dataclass
class MafModel:
    d: int
    layers: list[FlowLayer]
    hidden_sizes: list[int]
    seed: int
    spectral_norm: bool = True
    columns: list[str] | None = None
    transforms: list[dataio.ColumnTransform] | None = None
    train_data_hash: str | None = None  # original-units digest, for the
    # perturb-own-training-data warning

    @property
    def n_flows(self) -> int:
        return len(self.layers)

    def copy(self) -> "MafModel":
        return MafModel(
            d=self.d,
            layers=[FlowLayer(l.perm.copy(), l.made.copy()) for l in self.layers],
            hidden_sizes=list(self.hidden_sizes),
            seed=self.seed,
            spectral_norm=self.spectral_norm,
            columns=list(self.columns) if self.columns is not None else None,
            transforms=list(self.transforms) if self.transforms is not None else None,
            train_data_hash=self.train_data_hash,
        )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    max_iters: int = 500
    patience: int = 100
    validation_fraction: float = 0.0
    seed: int = 0
    spectral_norm: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ContractError("validation_fraction must be in [0, 1)")
        if self.max_iters < 0 or self.patience < 0:
            raise ContractError("max_iters and patience must be non-negative")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_step: int | None = None


def build_model(d: int, hidden_sizes, n_flows: int, seed: int,
                spectral_norm: bool = True) -> MafModel:
    """Initialize a flow stack.

    Layer l permutes coordinates by a rotation of l positions when
    d <= 3 (so the first layer reads the natural order) and by a fixed
    seed-derived permutation otherwise; permutations are stored in the
    model so both directions are reproducible.
    """
    if d < 1:
        raise ContractError("d must be >= 1")
    if n_flows < 1:
        raise ContractError("n_flows must be >= 1")
    ss = np.random.SeedSequence(seed)
    layer_seeds = ss.generate_state(2 * n_flows, dtype=np.uint64)
    layers = []
    for l in range(n_flows):
        if d <= 3:
            perm = np.roll(np.arange(d), l)
        else:
            perm_rng = np.random.default_rng(int(layer_seeds[2 * l]))
            perm = perm_rng.permutation(d)
        made = init_made(d, hidden_sizes, seed=int(layer_seeds[2 * l + 1]),
                         spectral_norm=spectral_norm)
        layers.append(FlowLayer(perm=perm, made=made))
    return MafModel(d=d, layers=layers, hidden_sizes=list(hidden_sizes),
                    seed=seed, spectral_norm=spectral_norm)


# ---------------------------------------------------------------------------
# density and sampling


def _as_batch(x, d):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("input contains non-finite entries")
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != d:
        raise ContractError(f"expected vectors of length {d}, got shape {x.shape}")
    return xb, single


def inverse(model: MafModel, x):
    """Map data to latent space; returns (z, logdet of dz/dx).

    All coordinates of each layer are computed in one pass; the log
    determinant is the negated sum of (clamped) log sigmas.
    """
    u, single = _as_batch(x, model.d)
    logdet = np.zeros(u.shape[0])
    for li, layer in enumerate(model.layers):
        u = u[:, layer.perm]
        mu, ls = made_forward(layer.made, u)
        lsc = np.clip(ls, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
        u = (u - mu) * np.exp(-lsc)
        logdet -= lsc.sum(axis=1)
        if not np.all(np.isfinite(u)):
            raise NumericError(f"non-finite values after flow layer {li}")
    if single:
        return u[0], float(logdet[0])
    return u, logdet


def forward(model: MafModel, z):
    """Map latent draws to data space, one coordinate at a time."""
    u, single = _as_batch(z, model.d)
    for li in reversed(range(len(model.layers))):
        layer = model.layers[li]
        x = np.zeros_like(u)
        for i in range(model.d):
            mu, ls = made_forward(layer.made, x)
            lsc = np.clip(ls, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
            x[:, i] = mu[:, i] + u[:, i] * np.exp(lsc[:, i])
        u = x[:, layer.inv_perm]
        if not np.all(np.isfinite(u)):
            raise NumericError(f"non-finite values after flow layer {li}")
    if single:
        return u[0]
    return u


def log_prob(model: MafModel, x):
    """Exact log density via the change of variables formula."""
    z, logdet = inverse(model, x)
    zb = np.atleast_2d(z)
    base = -0.5 * np.sum(zb * zb, axis=1) - 0.5 * model.d * _LOG_2PI
    out = base + np.atleast_1d(logdet)
    if np.isscalar(logdet) or np.ndim(logdet) == 0:
        return float(out[0])
    return out


def negative_log_likelihood(model: MafModel, X) -> float:
    """Mean NLL of a batch, the training objective."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return float(-np.mean(log_prob(model, X)))


def sample(model: MafModel, m: int, seed: int):
    """m independent draws, deterministic given the seed."""
    if m < 1:
        raise ContractError("m must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((m, model.d))
    return forward(model, z)


# ---------------------------------------------------------------------------
# training


def _flat_params(model: MafModel) -> list[np.ndarray]:
    flat = []
    for layer in model.layers:
        p = layer.made
        flat.extend(p.weights)
        flat.append(p.w_mu)
        flat.append(p.w_ls)
        flat.extend(p.biases)
        flat.append(p.b_mu)
        flat.append(p.b_ls)
    return flat


def _set_flat(model: MafModel, flat) -> None:
    i = 0
    for layer in model.layers:
        p = layer.made
        nh = len(p.weights)
        p.weights = [np.asarray(flat[i + j]) for j in range(nh)]
        i += nh
        p.w_mu = np.asarray(flat[i]); i += 1
        p.w_ls = np.asarray(flat[i]); i += 1
        p.biases = [np.asarray(flat[i + j]) for j in range(nh)]
        i += nh
        p.b_mu = np.asarray(flat[i]); i += 1
        p.b_ls = np.asarray(flat[i]); i += 1


def _weight_slots(model: MafModel):
    """Indices of weight matrices in the flat order plus their masks."""
    slots = []
    i = 0
    for layer in model.layers:
        p = layer.made
        nh = len(p.weights)
        for j in range(nh):
            slots.append((i + j, p.mask_set.masks[j]))
        slots.append((i + nh, p.mask_set.masks[-1]))
        slots.append((i + nh + 1, p.mask_set.masks[-1]))
        i += 2 * nh + 4
    return slots


def _build_nll_tape(model: MafModel, flat, X):
    """Tape for the mean NLL of X at the given flat parameters."""
    n, d = X.shape
    tape = GradTape()
    param_ids = [tape.parameter(p) for p in flat]
    xc = tape.constant(X)

    u = xc
    ls_total = None
    i = 0
    for layer in model.layers:
        p = layer.made
        nh = len(p.weights)
        w_ids = param_ids[i:i + nh]
        wmu_id = param_ids[i + nh]
        wls_id = param_ids[i + nh + 1]
        b_ids = param_ids[i + nh + 2:i + 2 * nh + 2]
        bmu_id = param_ids[i + 2 * nh + 2]
        bls_id = param_ids[i + 2 * nh + 3]
        i += 2 * nh + 4

        u = tape.gather_cols(u, layer.perm)
        h = u
        for j in range(nh):
            mask_id = tape.constant(p.mask_set.masks[j])
            wm = tape.mul(w_ids[j], mask_id)
            h = tape.tanh(tape.bias_add(tape.matmul(h, wm), b_ids[j]))
        out_mask_id = tape.constant(p.mask_set.masks[-1])
        mu = tape.bias_add(tape.matmul(h, tape.mul(wmu_id, out_mask_id)), bmu_id)
        ls = tape.bias_add(tape.matmul(h, tape.mul(wls_id, out_mask_id)), bls_id)
        lsc = tape.clip(ls, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
        z = tape.mul(tape.sub(u, mu), tape.exp(tape.neg(lsc)))
        s = tape.sum(lsc)
        ls_total = s if ls_total is None else tape.add(ls_total, s)
        u = z

    sq_sum = tape.sum(tape.mul(u, u))
    inv_n = tape.constant(1.0 / n)
    loss = tape.add(
        tape.mul(sq_sum, tape.constant(0.5 / n)),
        tape.mul(ls_total, inv_n),
    )
    loss = tape.add(loss, tape.constant(0.5 * d * _LOG_2PI))
    return tape, loss, param_ids


def nll_gradients(model: MafModel, X):
    """Mean NLL and its gradient w.r.t. every parameter (flat order)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    flat = _flat_params(model)
    tape, loss, param_ids = _build_nll_tape(model, flat, X)
    grads = tape.backward(loss)
    flat_grads = [grads.get(pid, np.zeros_like(flat[k]))
                  for k, pid in enumerate(param_ids)]
    return float(tape.value(loss)), flat_grads


def _resolve_training_matrix(data) -> np.ndarray:
    if isinstance(data, dataio.Dataset):
        if data.units != "model":
            raise ContractError(
                "dataset is in original units; apply the transform pipeline first"
            )
        return np.asarray(data.values, dtype=np.float64)
    return np.atleast_2d(np.asarray(data, dtype=np.float64))


def train(data, arch, config: TrainConfig):
    """Fit a flow by full-batch Adam on the mean NLL.

    ``arch`` is a mapping with ``hidden_sizes`` and ``n_flows``. With a
    validation fraction, the best-validation snapshot is kept and
    training continues ``patience`` extra steps past the best step
    before stopping. Returns (model, TrainHistory).
    """
    X = _resolve_training_matrix(data)
    n, d = X.shape
    if n < 2 * d:
        raise ContractError(f"need at least {2 * d} rows for d={d}, got {n}")
    if not np.all(np.isfinite(X)):
        raise DomainError("training data contains non-finite entries")
    sds = X.std(axis=0)
    if np.any(sds == 0.0):
        col = int(np.argmin(sds))
        raise ContractError(
            f"column {col} is constant; route it through the transform "
            "pipeline (dequantize or drop) before training"
        )

    hidden_sizes = list(arch["hidden_sizes"])
    n_flows = int(arch["n_flows"])
    model = build_model(d, hidden_sizes, n_flows, seed=config.seed,
                        spectral_norm=config.spectral_norm)
    if isinstance(data, dataio.Dataset):
        model.columns = list(data.columns)
        model.transforms = list(data.transforms)

    rng = np.random.default_rng(config.seed)
    if config.validation_fraction > 0.0:
        idx = rng.permutation(n)
        n_val = max(1, int(round(config.validation_fraction * n)))
        if n_val >= n:
            raise ContractError("validation split leaves no training rows")
        val_idx, tr_idx = idx[:n_val], idx[n_val:]
        X_tr, X_val = X[tr_idx], X[val_idx]
    else:
        X_tr, X_val = X, None

    flat = _flat_params(model)
    state = adam_init(flat)
    slots = _weight_slots(model)
    warm_u = {k: None for k, _ in slots}
    history = TrainHistory()
    best_val = np.inf
    best_flat = None
    best_step = None

    for step in range(config.max_iters):
        # overflow surfaces as the explicit non-finite-loss abort below
        with np.errstate(over="ignore", invalid="ignore"):
            tape, loss_id, param_ids = _build_nll_tape(model, flat, X_tr)
        loss = float(tape.value(loss_id))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite training loss at step {step}")
        grads = tape.backward(loss_id)
        flat_grads = [grads[pid] for pid in param_ids]
        flat, state = adam_step(flat, flat_grads, state, lr=config.learning_rate)
        if config.spectral_norm:
            for k, _mask in slots:
                w = flat[k]
                if not np.any(w):
                    continue
                # exploded parameters are caught by the loss check above
                with np.errstate(all="ignore"):
                    sigma, u = _power_iteration(w, iters=20, seed=config.seed,
                                                u=warm_u[k])
                if np.isfinite(sigma) and sigma > 0.0:
                    warm_u[k] = u
                    flat[k] = w / sigma
        history.train_loss.append(loss)

        if X_val is not None:
            _set_flat(model, flat)
            val = negative_log_likelihood(model, X_val)
            history.val_loss.append(val)
            if val < best_val:
                best_val = val
                best_flat = [p.copy() for p in flat]
                best_step = step
            elif step - best_step >= config.patience:
                break

    if best_flat is not None:
        flat = best_flat
        history.best_step = best_step
    _set_flat(model, flat)
    return model, history


# ---------------------------------------------------------------------------
# persistence


def transform_meta_hash(columns, transforms) -> str:
    """Stable digest of the column/transform metadata carried by a model."""
    doc = {
        "columns": list(columns) if columns is not None else None,
        "transforms": [t.to_dict() for t in transforms]
        if transforms is not None
        else None,
    }
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def save(model: MafModel, path) -> None:
    """Write the model container: header, raw float64 payload, checksum."""
    header = {
        "d": model.d,
        "hidden_sizes": model.hidden_sizes,
        "n_flows": model.n_flows,
        "perms": [layer.perm.tolist() for layer in model.layers],
        "seed": model.seed,
        "spectral_norm": model.spectral_norm,
        "columns": model.columns,
        "transforms": [t.to_dict() for t in model.transforms]
        if model.transforms is not None
        else None,
        "meta_hash": transform_meta_hash(model.columns, model.transforms),
        "train_data_hash": model.train_data_hash,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes()
                       for p in _flat_params(model))
    body = (
        MODEL_MAGIC
        + struct.pack("<H", MODEL_VERSION)
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + struct.pack("<Q", len(payload))
        + payload
    )
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)


def load(path) -> MafModel:
    """Read a model container; any corruption raises before a model exists."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MODEL_MAGIC) + 2 + 4 + 8 + 32:
        raise ModelFormatError("file too short to be a model container")
    if blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError("bad magic tag; not a model file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("model file checksum mismatch")
    off = len(MODEL_MAGIC)
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != MODEL_VERSION:
        raise ModelVersionError(f"unsupported model format version {version}")
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    header = json.loads(body[off:off + hlen].decode())
    off += hlen
    (plen,) = struct.unpack_from("<Q", body, off)
    off += 8
    payload = body[off:off + plen]
    if len(payload) != plen:
        raise ModelFormatError("truncated parameter payload")

    model = build_model(header["d"], header["hidden_sizes"], header["n_flows"],
                        seed=header["seed"],
                        spectral_norm=header["spectral_norm"])
    for layer, perm in zip(model.layers, header["perms"]):
        layer.perm = np.asarray(perm, dtype=np.intp)
    flat = _flat_params(model)
    want = sum(p.size for p in flat) * 8
    if want != plen:
        raise ModelFormatError(
            f"parameter payload holds {plen} bytes, expected {want}"
        )
    off2 = 0
    new_flat = []
    for p in flat:
        nbytes = p.size * 8
        arr = np.frombuffer(payload[off2:off2 + nbytes], dtype="<f8").reshape(p.shape)
        new_flat.append(arr.astype(np.float64))
        off2 += nbytes
    _set_flat(model, new_flat)
    model.columns = header["columns"]
    if header["transforms"] is not None:
        model.transforms = [dataio.ColumnTransform.from_dict(t)
                            for t in header["transforms"]]
    model.train_data_hash = header.get("train_data_hash")
    return model
