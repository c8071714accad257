"""Seeded reproduction harness for the two simulation studies.

The correlation study measures how well a compound-symmetry correlation
estimate survives each synthesis mechanism across sample sizes; the
meta study measures how well pooled regression estimates from K
synthetic studies track the real-data pooled estimate. Replications run
in a worker pool with per-replication seed streams and are reduced in
replication order, so results do not depend on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field, asdict
from multiprocessing import get_context

import numpy as np

from . import __version__, dataio, maf, meta, stats, synth
from .ioutil import atomic_write_text
from .maf import TrainConfig, TrainingError
from .numerics import ContractError

__all__ = [
    "CorrStudyConfig",
    "MetaStudyConfig",
    "CorrStudyResult",
    "MetaStudyResult",
    "run_correlation_study",
    "run_meta_study",
    "fit_power_law",
    "default_beta_cov",
    "corr_config_from_dict",
    "meta_config_from_dict",
]

_FAILURE_BUDGET = 0.2

_blas_controller = None


def _limit_blas_threads():
    # worker processes each own one replication; nested BLAS threading
    # only adds contention on small kernels. The controller must stay
    # referenced or the limit is restored on garbage collection.
    global _blas_controller
    if _blas_controller is not None:
        return
    try:
        from threadpoolctl import threadpool_limits

        _blas_controller = threadpool_limits(1)
    except Exception:
        pass


def _derived_seeds(parts, k):
    ss = np.random.SeedSequence([int(p) for p in parts])
    return [int(s) for s in ss.generate_state(k, dtype=np.uint64)]


def compound_symmetry_sample(n, d, rho, seed):
    """Draws from N(0, (1-rho) I + rho 11')."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, 1))
    e = rng.standard_normal((n, d))
    return np.sqrt(rho) * g + np.sqrt(1.0 - rho) * e


# ---------------------------------------------------------------------------
# correlation study (three mechanisms across a sample-size grid)


@dataclass
class CorrStudyConfig:
    seed: int
    d: int = 5
    rho: float = 0.9
    ns: tuple = (2500, 5000, 10000, 20000)
    ws: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    replications: int = 25
    mechanisms: tuple = ("flow-sample", "latent-noise", "direct-noise")
    hidden_sizes: tuple = (50,)
    n_flows: int = 5
    train_steps: int = 500
    learning_rate: float = 1e-2
    spectral_norm: bool = True
    flow_sample_m: int = 50000
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ContractError("rho must be in (0, 1)")
        if not self.ns or not self.ws:
            raise ContractError("sample-size and weight grids must be non-empty")
        if self.replications < 1:
            raise ContractError("replications must be >= 1")
        for m in self.mechanisms:
            if m not in synth.MECHANISMS:
                raise ContractError(f"unknown mechanism {m!r}")

    @classmethod
    def full_scale(cls, seed: int, **overrides):
        """The full-size design: B=100 over n = 2500, 5000, ..., 50000."""
        base = dict(
            seed=seed,
            ns=tuple(2500 * k for k in range(1, 21)),
            replications=100,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class CorrStudyResult:
    rows: list          # dicts: mechanism, w, n, mad, bias, reps_ok
    failures: list      # dicts: replication, n, error
    manifest: dict

    def cell(self, mechanism, w, n):
        for r in self.rows:
            if (r["mechanism"] == mechanism and r["n"] == n
                    and (r["w"] == w or (w is None and r["w"] is None))):
                return r
        raise KeyError((mechanism, w, n))


def _corr_task(args):
    cfg, b, n = args
    seeds = _derived_seeds([cfg.seed, b, n], 5)
    data_seed, train_seed, latent_seed, direct_seed, fs_seed = seeds
    try:
        X = compound_symmetry_sample(n, cfg.d, cfg.rho, data_seed)
        out = {}
        needs_flow = ("flow-sample" in cfg.mechanisms
                      or "latent-noise" in cfg.mechanisms)
        model = None
        if needs_flow:
            cfg_train = TrainConfig(
                learning_rate=cfg.learning_rate,
                max_iters=cfg.train_steps,
                validation_fraction=0.0,
                seed=train_seed,
                spectral_norm=cfg.spectral_norm,
            )
            model, _ = maf.train(
                X, {"hidden_sizes": list(cfg.hidden_sizes),
                    "n_flows": cfg.n_flows}, cfg_train)
        if "flow-sample" in cfg.mechanisms:
            S = synth.flow_sample(model, cfg.flow_sample_m, fs_seed)
            out[("flow-sample", None)] = stats.cs_corr_mle(S)
        if "latent-noise" in cfg.mechanisms:
            bank = synth.noise_bank(n, cfg.d, latent_seed)
            for w in cfg.ws:
                Xt = synth.latent_noise_inject(model, X, w, noise=bank)
                out[("latent-noise", w)] = stats.cs_corr_mle(Xt)
        if "direct-noise" in cfg.mechanisms:
            bank = synth.noise_bank(n, cfg.d, direct_seed)
            for w in cfg.ws:
                Xt = synth.direct_noise_inject(X, w, noise=bank)
                out[("direct-noise", w)] = stats.cs_corr_mle(Xt)
        return ("ok", b, n, out)
    except Exception as exc:  # recorded; the run continues
        return ("fail", b, n, f"{type(exc).__name__}: {exc}")


def _run_tasks(task_fn, tasks, workers):
    if workers <= 1:
        return [task_fn(t) for t in tasks]
    ctx = get_context()
    with ctx.Pool(processes=workers,
                  initializer=_limit_blas_threads) as pool:
        return pool.map(task_fn, tasks, chunksize=1)


def run_correlation_study(cfg: CorrStudyConfig, out_dir=None) -> CorrStudyResult:
    """MAD and bias of the correlation estimate per mechanism, weight,
    and sample size; optionally writes mad.csv, bias.csv, manifest.json."""
    t0 = time.perf_counter()
    tasks = [(cfg, b, n) for b in range(cfg.replications) for n in cfg.ns]
    raw = _run_tasks(_corr_task, tasks, cfg.workers)

    failures = [{"replication": b, "n": n, "error": err}
                for status, b, n, err in raw if status == "fail"]
    if len(failures) > _FAILURE_BUDGET * len(tasks):
        raise TrainingError(
            f"{len(failures)}/{len(tasks)} replication tasks failed; aborting"
        )
    estimates = {}
    for status, b, n, out in raw:
        if status != "ok":
            continue
        for (mech, w), rho_hat in out.items():
            estimates.setdefault((mech, w, n), []).append(rho_hat)

    rows = []
    for mech in cfg.mechanisms:
        wlist = [None] if mech == "flow-sample" else list(cfg.ws)
        for w in wlist:
            for n in cfg.ns:
                vals = np.asarray(estimates.get((mech, w, n), []))
                if vals.size == 0:
                    rows.append({"mechanism": mech, "w": w, "n": n,
                                 "mad": float("nan"), "bias": float("nan"),
                                 "reps_ok": 0})
                    continue
                err = vals - cfg.rho
                rows.append({
                    "mechanism": mech, "w": w, "n": n,
                    "mad": float(np.mean(np.abs(err))),
                    "bias": float(np.mean(err)),
                    "reps_ok": int(vals.size),
                })

    manifest = _manifest(cfg, t0, failures)
    result = CorrStudyResult(rows=rows, failures=failures, manifest=manifest)
    if out_dir is not None:
        _write_corr_outputs(result, out_dir)
    return result


def _write_corr_outputs(result: CorrStudyResult, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for metric in ("mad", "bias"):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["mechanism", "w", "n", metric, "reps_ok"])
        for r in result.rows:
            writer.writerow([
                r["mechanism"],
                "" if r["w"] is None else f"{r['w']:.17g}",
                r["n"], f"{r[metric]:.17g}", r["reps_ok"],
            ])
        atomic_write_text(os.path.join(out_dir, f"{metric}.csv"), buf.getvalue())
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")


def fit_power_law(ns, mads) -> float:
    """Exponent alpha of MAD ~ c n^-alpha by least squares on logs."""
    ns = np.asarray(ns, dtype=np.float64)
    mads = np.asarray(mads, dtype=np.float64)
    if ns.shape != mads.shape or ns.size < 3:
        raise ContractError("need at least three (n, MAD) pairs")
    if np.any(ns <= 0) or np.any(mads <= 0):
        raise ContractError("sample sizes and MADs must be positive")
    x = np.log(ns)
    y = np.log(mads)
    xc = x - x.mean()
    slope = float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))
    return -slope


# ---------------------------------------------------------------------------
# meta-analysis study (K studies, pooled slope fidelity)


def default_beta_cov() -> np.ndarray:
    """Coefficient covariance of the linear-model design: diagonal 1e-4
    except var(beta_1) = 5e-3, all off-diagonals 5e-5."""
    cov = np.full((5, 5), 5e-5)
    np.fill_diagonal(cov, 1e-4)
    cov[1, 1] = 5e-3
    return cov


@dataclass
class MetaStudyConfig:
    seed: int
    K: int = 10
    n_range: tuple = (750, 1000)
    beta: tuple = (0.0, 1.0, 1.0, 1.0, 1.0)
    beta_cov: np.ndarray = field(default_factory=default_beta_cov)
    sigma2_eps: float = 0.5
    ws: tuple = (0.0, 0.8, 1.0)
    replications: int = 50
    target_coef: int = 2  # slope of X2, beta_2
    hidden_sizes: tuple = (32,)
    n_flows: int = 2
    max_iters: int = 1000
    patience: int = 100
    validation_fraction: float = 0.3
    learning_rate: float = 1e-2
    spectral_norm: bool = True
    alpha: float = 0.05
    workers: int = 1

    def __post_init__(self):
        self.beta_cov = np.asarray(self.beta_cov, dtype=np.float64)
        if self.K < 2:
            raise ContractError("K must be >= 2")
        if not (len(self.n_range) == 2 and 0 < self.n_range[0] <= self.n_range[1]):
            raise ContractError("n_range must be a valid (low, high) pair")
        if self.beta_cov.shape != (len(self.beta), len(self.beta)):
            raise ContractError("beta_cov shape must match beta length")
        if not self.ws:
            raise ContractError("weight grid must be non-empty")

    @classmethod
    def full_scale(cls, seed: int, **overrides):
        base = dict(seed=seed, replications=500,
                    ws=tuple(round(0.1 * k, 1) for k in range(11)))
        base.update(overrides)
        return cls(**base)


@dataclass
class MetaStudyResult:
    rows: list          # per-replication dicts
    summary: list       # per-w dicts: mad_vs_real, coverage, mad_vs_truth
    forest: list        # forest rows for replication 0
    failures: list
    manifest: dict

    def summary_for(self, w):
        for s in self.summary:
            if s["w"] == w:
                return s
        raise KeyError(w)


def _meta_task(args):
    cfg, b = args
    root = np.random.SeedSequence([int(cfg.seed), int(b)])
    draw_seed, *study_entropy = [int(s) for s in
                                 root.generate_state(1 + cfg.K, dtype=np.uint64)]
    try:
        rng = np.random.default_rng(draw_seed)
        p = len(cfg.beta) - 1
        chol = np.linalg.cholesky(cfg.beta_cov)
        betas = np.asarray(cfg.beta) + rng.standard_normal((cfg.K, p + 1)) @ chol.T
        n_ks = rng.integers(cfg.n_range[0], cfg.n_range[1] + 1, size=cfg.K)

        real_studies = []
        synth_studies = {w: [] for w in cfg.ws}
        forest_sources = {}
        for k in range(cfg.K):
            sk = _derived_seeds([study_entropy[k]], 4)
            srng = np.random.default_rng(sk[0])
            n_k = int(n_ks[k])
            X = srng.standard_normal((n_k, p))
            eps = srng.standard_normal(n_k) * np.sqrt(cfg.sigma2_eps)
            y = betas[k, 0] + X @ betas[k, 1:] + eps
            fit = stats.ols_fit(X, y)
            real_studies.append(meta.StudySummary(
                f"study-{k + 1}",
                float(fit.coefficients[cfg.target_coef]),
                float(fit.variances[cfg.target_coef]),
            ))

            table = np.column_stack([X, y])
            columns = [f"x{j + 1}" for j in range(p)] + ["y"]
            ds = dataio.Dataset(
                columns=columns, values=table,
                transforms=[dataio.ColumnTransform("zscore") for _ in columns],
            )
            ds_model = dataio.fit_apply_transforms(ds, seed=sk[1])
            cfg_train = TrainConfig(
                learning_rate=cfg.learning_rate,
                max_iters=cfg.max_iters,
                patience=cfg.patience,
                validation_fraction=cfg.validation_fraction,
                seed=sk[2],
                spectral_norm=cfg.spectral_norm,
            )
            model, _ = maf.train(
                ds_model, {"hidden_sizes": list(cfg.hidden_sizes),
                           "n_flows": cfg.n_flows}, cfg_train)
            bank = synth.noise_bank(n_k, p + 1, sk[3])
            for w in cfg.ws:
                if w == 1.0:
                    # identity mechanism: skip the vacuous encode/decode
                    # round-trip so the real estimate is reproduced bitwise
                    synth_studies[w].append(real_studies[-1])
                    continue
                xt_model = synth.latent_noise_inject(
                    model, ds_model.values, w, noise=bank)
                ds_t = dataio.invert_transforms(
                    ds_model.replace_values(xt_model))
                vt = ds_t.values
                fit_w = stats.ols_fit(vt[:, :p], vt[:, p])
                synth_studies[w].append(meta.StudySummary(
                    f"study-{k + 1}",
                    float(fit_w.coefficients[cfg.target_coef]),
                    float(fit_w.variances[cfg.target_coef]),
                ))

        real_result = meta.random_effects(real_studies, alpha=cfg.alpha)
        row = {
            "replication": b,
            "real": (real_result.theta_R, real_result.ci_low,
                     real_result.ci_high),
        }
        forest_sources["real"] = (real_studies, real_result)
        for w in cfg.ws:
            res_w = meta.random_effects(synth_studies[w], alpha=cfg.alpha)
            row[w] = (res_w.theta_R, res_w.ci_low, res_w.ci_high)
            forest_sources[w] = (synth_studies[w], res_w)
        forest = _forest_rows(forest_sources) if b == 0 else None
        return ("ok", b, row, forest)
    except Exception as exc:
        return ("fail", b, f"{type(exc).__name__}: {exc}", None)


def _forest_rows(sources):
    rows = []
    for key, (studies, result) in sources.items():
        label = "real" if key == "real" else f"w={key:g}"
        for r in meta.forest_export(studies, result):
            rows.append({"source": label, **r})
    return rows


def run_meta_study(cfg: MetaStudyConfig, out_dir=None) -> MetaStudyResult:
    """Paired real/synthetic pooled estimates per replication, plus a
    per-weight summary (MAD to the real estimate, CI coverage of the
    true slope) and a forest table for the first replication."""
    t0 = time.perf_counter()
    tasks = [(cfg, b) for b in range(cfg.replications)]
    raw = _run_tasks(_meta_task, tasks, cfg.workers)

    failures = [{"replication": b, "error": err}
                for status, b, err, _ in raw if status == "fail"]
    if len(failures) > _FAILURE_BUDGET * len(tasks):
        raise TrainingError(
            f"{len(failures)}/{len(tasks)} replications failed; aborting"
        )
    rows = []
    forest = []
    for status, b, row, f in raw:
        if status != "ok":
            continue
        rows.append(row)
        if f is not None:
            forest = f

    truth = float(cfg.beta[cfg.target_coef])
    real_theta = np.array([r["real"][0] for r in rows])
    real_cover = np.array([r["real"][1] <= truth <= r["real"][2]
                           for r in rows], dtype=float)
    summary = [{
        "w": None,
        "mad_vs_real": 0.0,
        "mad_vs_truth": float(np.mean(np.abs(real_theta - truth))),
        "coverage": float(np.mean(real_cover)),
    }]
    for w in cfg.ws:
        theta_w = np.array([r[w][0] for r in rows])
        cover_w = np.array([r[w][1] <= truth <= r[w][2] for r in rows],
                           dtype=float)
        summary.append({
            "w": w,
            "mad_vs_real": float(np.mean(np.abs(theta_w - real_theta))),
            "mad_vs_truth": float(np.mean(np.abs(theta_w - truth))),
            "coverage": float(np.mean(cover_w)),
        })

    manifest = _manifest(cfg, t0, failures)
    result = MetaStudyResult(rows=rows, summary=summary, forest=forest,
                             failures=failures, manifest=manifest)
    if out_dir is not None:
        _write_meta_outputs(result, cfg, out_dir)
    return result


def _write_meta_outputs(result: MetaStudyResult, cfg: MetaStudyConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)

    buf = io.StringIO()
    writer = csv.writer(buf)
    header = ["replication", "theta_real", "ci_low_real", "ci_high_real"]
    for w in cfg.ws:
        tag = f"{w:g}"
        header += [f"theta_w{tag}", f"ci_low_w{tag}", f"ci_high_w{tag}"]
    writer.writerow(header)
    for r in result.rows:
        row = [r["replication"]] + [f"{v:.17g}" for v in r["real"]]
        for w in cfg.ws:
            row += [f"{v:.17g}" for v in r[w]]
        writer.writerow(row)
    atomic_write_text(os.path.join(out_dir, "paired_estimates.csv"),
                      buf.getvalue())

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["w", "mad_vs_real", "mad_vs_truth", "coverage"])
    for s in result.summary:
        writer.writerow([
            "real" if s["w"] is None else f"{s['w']:.17g}",
            f"{s['mad_vs_real']:.17g}", f"{s['mad_vs_truth']:.17g}",
            f"{s['coverage']:.17g}",
        ])
    atomic_write_text(os.path.join(out_dir, "summary.csv"), buf.getvalue())

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["source", "label", "kind", "theta", "ci_low", "ci_high"])
    for r in result.forest:
        writer.writerow([r["source"], r["label"], r["kind"],
                         f"{r['theta']:.17g}", f"{r['ci_low']:.17g}",
                         f"{r['ci_high']:.17g}"])
    atomic_write_text(os.path.join(out_dir, "forest_rep0.csv"), buf.getvalue())

    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared plumbing


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (list, tuple)):
        return [_jsonable(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def _manifest(cfg, t0, failures):
    import scipy

    return {
        "config": _jsonable(asdict(cfg)),
        "seed": cfg.seed,
        "versions": {
            "flowsynth": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "wall_time_seconds": round(time.perf_counter() - t0, 3),
        "n_failures": len(failures),
        "failures": failures,
    }


def _config_from_dict(cls, doc: dict, name: str):
    import dataclasses

    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ContractError(
            f"unknown {name} config field(s): {', '.join(sorted(unknown))}"
        )
    if "seed" not in doc:
        raise ContractError(f"{name} config must set a seed")
    kwargs = dict(doc)
    for key in ("ns", "ws", "mechanisms", "hidden_sizes", "n_range", "beta"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def corr_config_from_dict(doc: dict) -> CorrStudyConfig:
    return _config_from_dict(CorrStudyConfig, doc, "correlation-study")


def meta_config_from_dict(doc: dict) -> MetaStudyConfig:
    return _config_from_dict(MetaStudyConfig, doc, "meta-study")
