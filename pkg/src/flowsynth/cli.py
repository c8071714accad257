"""Command-line front door.

Subcommands: train, synthesize, audit, calibrate, meta, simulate.
Exit codes: 0 success, 2 input or contract error, 3 numeric or training
failure, 4 calibration threshold unmet. Every output file is written to
a temp file and renamed, so failures never leave partial output. All
randomness flows from explicit seeds; there is no clock fallback.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import dataio, experiments, maf, meta, privacy, synth
from .ioutil import atomic_path, atomic_write_text
from .maf import TrainingError
from .numerics import ContractError, DomainError, NumericError, ShapeError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_THRESHOLD = 4

_INPUT_ERRORS = (
    ContractError,
    DomainError,
    ShapeError,
    dataio.DataError,
    maf.ModelFormatError,
    FileNotFoundError,
    IsADirectoryError,
    json.JSONDecodeError,
    KeyError,
    ValueError,
)
_NUMERIC_ERRORS = (TrainingError, NumericError)


def _load_json(path, what):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON in {what}: {exc}") from None


def _train_config_from(doc: dict, path: str) -> maf.TrainConfig:
    known = {"learning_rate", "max_iters", "patience",
             "validation_fraction", "seed", "spectral_norm"}
    unknown = set(doc) - known
    if unknown:
        raise ContractError(
            f"{path}: unknown training config field(s): {', '.join(sorted(unknown))}"
        )
    if "seed" not in doc:
        raise ContractError(f"{path}: training config must set a seed")
    return maf.TrainConfig(**doc)


def _arch_from(doc: dict, path: str) -> dict:
    if set(doc) - {"hidden_sizes", "n_flows"}:
        raise ContractError(f"{path}: architecture takes hidden_sizes and n_flows")
    if "hidden_sizes" not in doc or "n_flows" not in doc:
        raise ContractError(f"{path}: architecture needs hidden_sizes and n_flows")
    return {"hidden_sizes": list(doc["hidden_sizes"]),
            "n_flows": int(doc["n_flows"])}


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    schema = _load_json(args.schema, "schema")
    arch = _arch_from(_load_json(args.arch, "architecture"), args.arch)
    config = _train_config_from(_load_json(args.config, "training config"),
                                args.config)
    ds = dataio.load_csv(args.data, schema)
    ds_model = dataio.fit_apply_transforms(ds, seed=config.seed)
    model, history = maf.train(ds_model, arch, config)
    model.train_data_hash = _data_digest(ds)
    with atomic_path(args.out) as tmp:
        maf.save(model, tmp)
    final_train = history.train_loss[-1] if history.train_loss else float("nan")
    line = f"final train NLL {final_train:.6f}"
    if history.val_loss:
        best = min(history.val_loss)
        line += f", best validation NLL {best:.6f}"
    print(f"trained {arch['n_flows']} flow(s) on {ds.n} rows; {line}")
    print(f"model written to {args.out}")
    return EXIT_OK


def _data_digest(ds: dataio.Dataset) -> str:
    return hashlib.sha256(
        np.ascontiguousarray(ds.values).tobytes()).hexdigest()


def _check_model_compat(model: maf.MafModel, ds: dataio.Dataset):
    if model.columns is None or model.transforms is None:
        raise ContractError("model carries no transform metadata")
    if list(ds.columns) != list(model.columns):
        got = maf.transform_meta_hash(ds.columns, ds.transforms)
        want = maf.transform_meta_hash(model.columns, model.transforms)
        raise ContractError(
            "data is incompatible with the model's transform metadata "
            f"(hash {got[:12]} != {want[:12]}): columns "
            f"{list(ds.columns)} vs {list(model.columns)}"
        )


def cmd_synthesize(args) -> int:
    model = maf.load(args.model)
    if args.mechanism not in synth.MECHANISMS:
        raise ContractError(f"unknown mechanism {args.mechanism!r}")
    spec = synth.SynthesisSpec(mechanism=args.mechanism, w=args.w,
                               seed=args.seed, m=args.m)
    seeds = np.random.SeedSequence(args.seed).generate_state(2, dtype=np.uint64)
    dequant_seed, mech_seed = int(seeds[0]), int(seeds[1])

    if args.mechanism == "flow-sample":
        values = synth.flow_sample(model, spec.m, mech_seed)
        out_model_units = dataio.Dataset(
            columns=list(model.columns or
                         [f"c{i + 1}" for i in range(model.d)]),
            values=values,
            transforms=list(model.transforms) if model.transforms else
            [dataio.ColumnTransform("identity") for _ in range(model.d)],
            units="model",
        )
    else:
        if model.columns is None:
            raise ContractError("model carries no transform metadata")
        schema = {c: t.kind for c, t in zip(model.columns, model.transforms)}
        ds = dataio.load_csv(args.data, schema)
        _check_model_compat(model, ds)
        if (model.train_data_hash is not None
                and _data_digest(ds) == model.train_data_hash):
            print("warning: perturbing the model's own training data; the "
                  "perturbation and the fitted flow are correlated",
                  file=sys.stderr)
        ds_model = dataio.apply_transforms(ds, model.transforms,
                                           seed=dequant_seed)
        if args.mechanism == "latent-noise":
            out_model_units = synth.latent_noise_inject(
                model, ds_model, spec.w, seed=mech_seed)
        else:
            out_model_units = synth.direct_noise_inject(
                ds_model, spec.w, seed=mech_seed)
    out = dataio.invert_transforms(out_model_units)
    with atomic_path(args.out) as tmp:
        dataio.write_csv(out, tmp)
    print(f"wrote {out.n} synthetic rows to {args.out}")
    return EXIT_OK


def _standardized_pair(real: dataio.Dataset, other: dataio.Dataset, what):
    if list(real.columns) != list(other.columns):
        raise ContractError(
            f"{what} columns {list(other.columns)} do not match data columns "
            f"{list(real.columns)}"
        )
    mean = real.values.mean(axis=0)
    sd = real.values.std(axis=0)
    if np.any(sd == 0.0):
        col = real.columns[int(np.argmin(sd))]
        raise ContractError(f"data column {col!r} is constant; cannot scale")
    return (real.values - mean) / sd, (other.values - mean) / sd, (mean, sd)


def cmd_audit(args) -> int:
    schema_free = lambda ds_path: dataio.load_csv(
        ds_path, _identity_schema(ds_path))
    real = schema_free(args.data)
    synthetic = schema_free(args.synthetic)
    x, xt, scale = _standardized_pair(real, synthetic, "synthetic")

    matched = real.n == synthetic.n
    auc = float("nan")
    closer = float("nan")
    med = float("nan")
    if args.fresh is not None:
        fresh = schema_free(args.fresh)
        xf = (fresh.values - scale[0]) / scale[1]
        auc = privacy.mia_auc(privacy.membership_scores(x, xt),
                              privacy.membership_scores(xf, xt))
    if matched:
        closer = privacy.closer_real_probability(x, xt)
        med = privacy.median_rank(privacy.perturbation_ranks(x, xt))
    elif args.fresh is None:
        raise ContractError(
            f"row counts differ ({real.n} vs {synthetic.n}); matched metrics "
            "need paired rows. For flow-sampled data, pass --fresh to run the "
            "AUC-only audit mode."
        )
    report = privacy.PrivacyReport(
        w=args.w if args.w is not None else float("nan"),
        auc=auc, closer_prob=closer, median_rank=med, n=real.n,
    ).validate()
    _write_reports([report], args.out)
    bits = []
    if not math.isnan(auc):
        bits.append(f"AUC {auc:.4f}")
    if matched:
        bits.append(f"closer-real probability {closer:.4f}")
        bits.append(f"median rank {int(med)}")
    print(f"audited {real.n} rows: " + ", ".join(bits))
    return EXIT_OK


def _identity_schema(path):
    import csv as _csv

    with open(path, "r", newline="", encoding="utf-8") as fh:
        first = next(_csv.reader(fh), None)
    if first is None:
        raise dataio.DataError(f"{path}: empty input, expected a header row")
    return {c.strip(): "identity" for c in first}


def _write_reports(reports, stem):
    with atomic_path(f"{stem}.csv") as tmp:
        privacy.write_report_csv(reports, tmp)
    with atomic_path(f"{stem}.json") as tmp:
        privacy.write_report_json(reports, tmp)


def cmd_calibrate(args) -> int:
    schema = _load_json(args.schema, "schema")
    ds = dataio.load_csv(args.data, schema)
    grid = [float(tok) for tok in args.grid.split(",")] if args.grid else \
        [round(0.05 * k, 2) for k in range(1, 20)]
    arch = (_arch_from(_load_json(args.arch, "architecture"), args.arch)
            if args.arch else {"hidden_sizes": [32], "n_flows": 2})
    base_cfg = (_load_json(args.train_config, "training config")
                if args.train_config else {})
    base_cfg.setdefault("learning_rate", 1e-2)
    base_cfg.setdefault("max_iters", 300)
    base_cfg.pop("seed", None)

    def train_fn(d1_model, train_seed):
        cfg = maf.TrainConfig(seed=train_seed, **base_cfg)
        model, _ = maf.train(d1_model, arch, cfg)
        return model

    w_star, reports, met = privacy.calibrate_w(
        ds, train_fn, grid, auc_threshold=args.threshold,
        split_fraction=args.split, seed=args.seed,
        min_closer_prob=args.min_closer_prob)
    _write_reports(reports, args.out)
    if met:
        print(f"selected w* = {w_star:g} (AUC threshold {args.threshold:g})")
        return EXIT_OK
    print(f"threshold unmet: no grid weight keeps AUC below "
          f"{args.threshold:g}; smallest grid weight is {w_star:g}")
    return EXIT_THRESHOLD


def cmd_meta(args) -> int:
    studies = meta.read_studies_csv(args.studies)
    if len(studies) < 2:
        print("warning: a single study cannot support random effects; "
              "falling back to fixed effects", file=sys.stderr)
        theta_f, var_f = meta.fixed_effects(studies)
        z = meta.normal_quantile(1.0 - args.alpha / 2.0)
        half = z * math.sqrt(var_f)
        result = meta.MetaResult(
            theta_F=theta_f, var_F=var_f, tau2_hat=0.0,
            theta_R=theta_f, var_R=var_f,
            ci_low=theta_f - half, ci_high=theta_f + half,
            alpha=args.alpha, K=len(studies),
        )
        rows = meta.forest_export(studies, result)
        rows[-1]["label"] = "pooled (fixed effects; K < 2 warning)"
    else:
        result = meta.random_effects(studies, alpha=args.alpha)
        rows = meta.forest_export(studies, result)
    with atomic_path(args.out) as tmp:
        meta.write_forest_csv(rows, tmp)
    json_path = os.path.splitext(args.out)[0] + ".json"
    atomic_write_text(json_path, result.to_json() + "\n")
    print(f"pooled estimate {result.theta_R:.6g} "
          f"[{result.ci_low:.6g}, {result.ci_high:.6g}], "
          f"tau2 {result.tau2_hat:.6g} over K={result.K}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    doc = _load_json(args.config, "simulation config")
    os.makedirs(args.out, exist_ok=True)
    if args.study == "correlation":
        cfg = experiments.corr_config_from_dict(doc)
        result = experiments.run_correlation_study(cfg, out_dir=args.out)
        print(f"correlation study: {len(result.rows)} cells, "
              f"{len(result.failures)} failures; tables in {args.out}")
    else:
        cfg = experiments.meta_config_from_dict(doc)
        result = experiments.run_meta_study(cfg, out_dir=args.out)
        print(f"meta study: {len(result.rows)} replications, "
              f"{len(result.failures)} failures; tables in {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowsynth",
        description="Train flows, synthesize privacy-preserving data, "
                    "audit leakage, calibrate w, pool study estimates.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit transforms and train a flow")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True,
                   help="JSON: column name -> transform kind")
    p.add_argument("--arch", required=True,
                   help="JSON: {hidden_sizes, n_flows}")
    p.add_argument("--config", required=True,
                   help="JSON training config; must set a seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="generate a synthetic dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="input CSV (latent-noise and direct-noise)")
    p.add_argument("--mechanism", required=True,
                   choices=list(synth.MECHANISMS))
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--m", type=int, default=None,
                   help="sample count (flow-sample only)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("audit", help="privacy metrics for a synthetic set")
    p.add_argument("--data", required=True)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--fresh", default=None,
                   help="held-out CSV enabling the attack AUC")
    p.add_argument("--w", type=float, default=None,
                   help="weight label recorded in the report")
    p.add_argument("--out", required=True,
                   help="report stem; writes <out>.csv and <out>.json")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("calibrate", help="pick w by the attack-AUC rule")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--grid", default=None,
                   help="comma list of weights (default 0.05..0.95)")
    p.add_argument("--threshold", type=float, default=0.55)
    p.add_argument("--min-closer-prob", dest="min_closer_prob", type=float,
                   default=None,
                   help="also require the closer-real probability to "
                        "reach this floor")
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--arch", default=None)
    p.add_argument("--train-config", dest="train_config", default=None)
    p.add_argument("--out", required=True,
                   help="report stem; writes <out>.csv and <out>.json")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("meta", help="pool study estimates")
    p.add_argument("--studies", required=True,
                   help="CSV with header label,theta_hat,var_hat")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True,
                   help="forest CSV path; the result JSON lands beside it")
    p.set_defaults(func=cmd_meta)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--study", required=True, choices=["correlation", "meta"])
    p.add_argument("--config", required=True,
                   help="JSON config; must set a seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synthesize" and args.mechanism != "flow-sample" \
            and not args.data:
        parser.error("--data is required for latent-noise and direct-noise")
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
