"""Command-line entry points.

    mtparafac2 synth --k 50 --j 20 --rank 5 --seed 7 --out data/
    mtparafac2 fit --tensor data/tensor.jsonl --labels data/labels.csv --out run/
    mtparafac2 export-phenotypes --checkpoint run/checkpoint.json --tensor data/tensor.jsonl --top-n 5
    mtparafac2 export-trajectories --checkpoint run/checkpoint.json --tensor data/tensor.jsonl \\
        --feature feature_0 --length 10
    mtparafac2 compare --config compare.json
    mtparafac2 scaling --out scaling/

Exit status: 0 success, 2 config error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, DegenerateInputError, DivergenceError, Parafac2Error
from .model import FactorModel
from .tensor import (
    SynthSpec,
    load_labels,
    load_tensor,
    save_labels,
    save_tensor,
    split_tensor,
    synth_generate,
)
from .trainer import SdwConfig, TrainConfig, evaluate, fit, fit_heads, scaling_probe

log = logging.getLogger("mtparafac2")

PATH_KEYS = ("tensor", "labels", "out_dir")
# run-level keys understood by fit and compare
RUN_KEYS = ("train_fraction", "ranks", "seeds")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


# -- configuration --------------------------------------------------------------


@dataclasses.dataclass
class CliConfig:
    train: TrainConfig
    tensor: str | None = None
    labels: str | None = None
    out_dir: str | None = None
    train_fraction: float = 0.8
    ranks: list | None = None
    seeds: list | None = None


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def build_config(doc: dict, args=None) -> CliConfig:
    """Merge a config document with flag overrides; unknown keys are rejected."""
    doc = dict(doc)
    unknown = set(doc) - set(TRAIN_KEYS) - set(PATH_KEYS) - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    run = {k: doc.pop(k) for k in PATH_KEYS + RUN_KEYS if k in doc}
    try:
        train = TrainConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc
    if args is not None:
        flag_map = {
            "tensor": "tensor", "labels": "labels", "out": "out_dir",
        }
        for flag, key in flag_map.items():
            if getattr(args, flag, None) is not None:
                run[key] = getattr(args, flag)
        if getattr(args, "rank", None) is not None:
            train.R = args.rank
        if getattr(args, "epochs", None) is not None:
            train.epochs_max = args.epochs
        if getattr(args, "mode", None) is not None:
            train.mode = args.mode
        if getattr(args, "task", None) is not None:
            train.task = args.task
        if getattr(args, "seed", None) is not None:
            train.seed = args.seed
        if getattr(args, "sdw_c", None) is not None:
            train.sdw.C = args.sdw_c
        if getattr(args, "sdw_m", None) is not None:
            train.sdw.m = args.sdw_m
        if getattr(args, "deterministic", False):
            train.deterministic = True
    train.validate()
    cfg = CliConfig(train=train, **run)
    if not 0.0 < float(cfg.train_fraction) < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)")
    return cfg


def _require(value, what):
    if value is None:
        raise ConfigError(f"{what} is required")
    return value


def _out_dir(path) -> Path:
    out = Path(_require(path, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _nan_to_none(x):
    if isinstance(x, dict):
        return {k: _nan_to_none(v) for k, v in x.items()}
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def _file_hash(*paths):
    h = hashlib.sha256()
    for p in paths:
        if p is not None:
            h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> dict:
    """Write tensor.jsonl, labels.csv, truth.json and manifest.json."""
    spec = SynthSpec(
        K=args.k, J=args.j, R_true=args.rank, I_min=args.i_min, I_max=args.i_max,
        noise_sd=args.noise, missing_rate=args.missing_rate, label_noise=args.label_noise,
        seed=args.seed, n_static=args.n_static, n_dynamic=args.n_dynamic,
        decay=args.decay, signal_rank=args.signal_rank,
    )
    spec.validate()
    out = _out_dir(args.out)
    tensor, labels, truth = synth_generate(spec)
    paths = {
        "tensor": out / "tensor.jsonl",
        "labels": out / "labels.csv",
        "truth": out / "truth.json",
    }
    save_tensor(tensor, paths["tensor"])
    save_labels(labels, paths["labels"])
    save_checkpoint(paths["truth"], truth, tensor.slice_ids)
    manifest = {
        "seed": spec.seed,
        "spec": dataclasses.asdict(spec),
        "files": {k: p.name for k, p in paths.items()},
    }
    _write_json(out / "manifest.json", manifest)
    return {k: str(p) for k, p in paths.items()} | {"manifest": str(out / "manifest.json")}


LOG_FIELDS = ["epoch", "task", "loss", "weight", "fit", "wall_ms"]


def _write_log(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _load_inputs(cfg: CliConfig):
    tensor = load_tensor(_require(cfg.tensor, "tensor path"))
    if cfg.train.mode == "unsupervised":
        labels = load_labels(cfg.labels, tensor) if cfg.labels else None
    else:
        labels = load_labels(_require(cfg.labels, f"labels for mode {cfg.train.mode}"), tensor)
        cfg.train.tasks_for(labels)
    return tensor, labels


def cmd_fit(args) -> dict:
    """Fit on an 8:2 split; write checkpoint.json, log.csv and summary.json."""
    cfg = build_config(read_config(args.config), args)
    tcfg = cfg.train
    if tcfg.mode != "unsupervised" and cfg.labels is None:
        raise ConfigError(f"mode {tcfg.mode} needs a labels file")
    out = _out_dir(cfg.out_dir)
    tensor, labels = _load_inputs(cfg)
    (tr, ltr), (te, lte) = split_tensor(tensor, labels, cfg.train_fraction, tcfg.seed)
    ckpt_path = out / "checkpoint.json"

    def checkpoint(model, heads, epoch):
        save_checkpoint(ckpt_path, model, tr.slice_ids, heads)

    try:
        result = fit(tr, ltr, tcfg, checkpoint=checkpoint)
    except DivergenceError as exc:
        log.error("diverged: %s; last finite checkpoint kept at %s", exc, ckpt_path)
        raise
    _write_log(out / "log.csv", result.log)
    report = evaluate(result.model, result.heads, te, lte, tcfg, tr, result.convergence_epoch)
    summary = {
        "fit": report["fit_train"],
        "fit_test": report["fit_test"],
        "pr_auc": report["pr_auc"],
        "convergence_epoch": result.convergence_epoch,
        "converged": result.converged,
        "config": tcfg.to_dict(),
    }
    _write_json(out / "summary.json", _nan_to_none(summary))
    return summary


def _model_for_tensor(checkpoint, tensor_path):
    model, ids, _ = load_checkpoint(checkpoint)
    tensor = load_tensor(tensor_path)
    missing = [s for s in ids if s not in set(tensor.slice_ids)]
    if missing:
        raise DataError(f"{len(missing)} checkpoint slice(s) absent from tensor, e.g. {missing[0]!r}")
    tensor = tensor.subset([tensor.index_of(s) for s in ids])
    if tensor.J != model.V.shape[0]:
        raise DataError(f"checkpoint has J={model.V.shape[0]}, tensor has J={tensor.J}")
    return model, tensor


def subgroups(model: FactorModel) -> np.ndarray:
    """Phenotype index of each slice: argmax of s_k, ties to the lowest index."""
    return np.array([int(np.argmax(s)) for s in model.s], dtype=np.int64)


def phenotype_rows(model: FactorModel, tensor, top_n):
    if top_n < 1:
        raise ConfigError("top_n must be >= 1")
    J = model.V.shape[0]
    if top_n > J:
        warnings.warn(f"top_n={top_n} exceeds J={J}; clipped", stacklevel=2)
        top_n = J
    group = subgroups(model)
    rows = []
    for r in range(model.R):
        members = np.flatnonzero(group == r)
        order = np.argsort(-np.abs(model.V[:, r]), kind="stable")[:top_n]
        for rank, j in enumerate(order, start=1):
            avg = None
            if members.size:
                num = sum(float(np.sum(tensor.slices[k][:, j] * tensor.masks[k][:, j])) for k in members)
                den = sum(float(np.sum(tensor.masks[k][:, j])) for k in members)
                avg = num / den if den else None
            rows.append({
                "phenotype": r + 1,
                "rank": rank,
                "feature": tensor.feature_names[j],
                "weight": float(model.V[j, r]),
                "subgroup_size": int(members.size),
                "average": avg,
            })
    return rows


def trajectory_rows(model: FactorModel, tensor, feature, length):
    if feature not in tensor.feature_names:
        raise ConfigError(f"unknown feature {feature!r}")
    j = list(tensor.feature_names).index(feature)
    picked = [k for k, x in enumerate(tensor.slices) if x.shape[0] == length]
    if not picked:
        raise DegenerateInputError(f"no slice has exactly {length} timesteps")
    group = subgroups(model)
    rows = []
    for r in sorted({int(group[k]) for k in picked}):
        members = [k for k in picked if group[k] == r]
        vals = np.stack([tensor.slices[k][:, j] for k in members])
        mask = np.stack([tensor.masks[k][:, j] for k in members])
        for t in range(length):
            n = float(mask[:, t].sum())
            rows.append({
                "phenotype": r + 1,
                "n_slices": len(members),
                "t": t,
                "mean": float(np.sum(vals[:, t] * mask[:, t]) / n) if n else None,
            })
    return rows


def _write_rows(rows, fields, out):
    fh = sys.stdout if out in (None, "-") else open(out, "w", encoding="utf-8", newline="")
    try:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_export_phenotypes(args):
    model, tensor = _model_for_tensor(args.checkpoint, args.tensor)
    rows = phenotype_rows(model, tensor, args.top_n)
    _write_rows(rows, ["phenotype", "rank", "feature", "weight", "subgroup_size", "average"], args.out)
    return rows


def cmd_export_trajectories(args):
    model, tensor = _model_for_tensor(args.checkpoint, args.tensor)
    rows = trajectory_rows(model, tensor, args.feature, args.length)
    _write_rows(rows, ["phenotype", "n_slices", "t", "mean"], args.out)
    return rows


COMPARE_METHODS = ("unsupervised", "single_task", "multi_task")


def _compare_cell(method, tensor, labels, tcfg, cfg):
    """Mean FIT and per-task PR-AUC over seeds for one method at one rank."""
    fits, aucs = [], {}
    tasks = labels.task_names
    for seed in cfg.seeds or [tcfg.seed]:
        run = dataclasses.replace(tcfg, seed=seed, penalties=dataclasses.replace(tcfg.penalties),
                                  sdw=dataclasses.replace(tcfg.sdw))
        (tr, ltr), (te, lte) = split_tensor(tensor, labels, cfg.train_fraction, seed)
        if method == "unsupervised":
            run.mode = "unsupervised"
            res = fit(tr, ltr, run)
            heads = fit_heads(res.model, tr, ltr, run)
            rep = evaluate(res.model, heads, te, lte, run, tr)
            fits.append(rep["fit_train"])
            for t in tasks:
                aucs.setdefault(t, []).append(rep["pr_auc"][t])
        elif method == "single_task":
            seed_fits = []
            for t in tasks:
                run.mode, run.task = "single_task", t
                res = fit(tr, ltr, run)
                rep = evaluate(res.model, res.heads, te, lte, run, tr)
                seed_fits.append(rep["fit_train"])
                aucs.setdefault(t, []).append(rep["pr_auc"][t])
            fits.append(float(np.mean(seed_fits)))
        else:
            run.mode, run.task = "multi_task", None
            res = fit(tr, ltr, run)
            rep = evaluate(res.model, res.heads, te, lte, run, tr)
            fits.append(rep["fit_train"])
            for t in tasks:
                aucs.setdefault(t, []).append(rep["pr_auc"][t])
    row = {"fit": float(np.mean(fits))}
    row.update({f"pr_auc_{t}": float(np.nanmean(v)) if np.any(np.isfinite(v)) else None
                for t, v in aucs.items()})
    return row


def cmd_compare(args) -> list:
    """Unsupervised (post-hoc heads), single-task and multi-task per rank."""
    cfg = build_config(read_config(args.config), args)
    tensor = load_tensor(_require(cfg.tensor, "tensor path"))
    labels = load_labels(_require(cfg.labels, "labels path"), tensor)
    data_hash = _file_hash(cfg.tensor, cfg.labels)
    rows = []
    for R in cfg.ranks or [cfg.train.R]:
        tcfg = dataclasses.replace(cfg.train, R=int(R))
        for method in COMPARE_METHODS:
            row = {"method": method, "rank": int(R), "data_hash": data_hash, "error": ""}
            try:
                row.update(_compare_cell(method, tensor, labels, tcfg, cfg))
            except Parafac2Error as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    fields = ["method", "rank", "fit"] + [f"pr_auc_{t}" for t in labels.task_names] + ["data_hash", "error"]
    for row in rows:
        for f in fields:
            row.setdefault(f, None)
    out = None
    if cfg.out_dir is not None:
        out = _out_dir(cfg.out_dir) / "compare.csv"
    _write_rows(rows, fields, out)
    return rows


def cmd_scaling(args) -> dict:
    """Per-epoch time against K and J; writes scaling.json."""
    spec = SynthSpec(K=args.k_values[0], J=args.j, R_true=args.rank, seed=args.seed or 0,
                     I_min=max(5, args.rank), I_max=max(15, args.rank))
    tcfg = TrainConfig(R=args.rank, seed=args.seed or 0, mode="unsupervised", deterministic=True)
    tcfg.sdw = SdwConfig(enabled=False)
    out = scaling_probe(spec, tcfg, K_values=args.k_values, J_values=args.j_values,
                        epochs=args.epochs, repeats=args.repeats)
    doc = {
        "K": [{"K": v, "seconds_per_epoch": s} for v, s in out["K"]],
        "J": [{"J": v, "seconds_per_epoch": s} for v, s in out.get("J", [])],
        "fits": {k: {"slope": f[0], "intercept": f[1], "r2": f[2]} for k, f in out["fits"].items()},
    }
    if args.out:
        _write_json(_out_dir(args.out) / "scaling.json", doc)
    else:
        json.dump(doc, sys.stdout, indent=2)
        sys.stdout.write("\n")
    return doc


# -- argument parsing -----------------------------------------------------------


def _train_flags(p):
    p.add_argument("--config", help="JSON config mirroring TrainConfig plus paths")
    p.add_argument("--tensor")
    p.add_argument("--labels")
    p.add_argument("--out")
    p.add_argument("--rank", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=["multi_task", "single_task", "unsupervised"])
    p.add_argument("--task")
    p.add_argument("--sdw-c", type=float)
    p.add_argument("--sdw-m", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtparafac2", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic tensor, labels and ground truth")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--j", type=int, default=20)
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--i-min", type=int, default=5)
    p.add_argument("--i-max", type=int, default=15)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--label-noise", type=float, default=0.1)
    p.add_argument("--n-static", type=int, default=2)
    p.add_argument("--n-dynamic", type=int, default=1)
    p.add_argument("--decay", type=float, default=1.0)
    p.add_argument("--signal-rank", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="train on an 8:2 split and report held-out metrics")
    _train_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("export-phenotypes", help="top features per phenotype with subgroup averages")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tensor", required=True)
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--out", help="CSV path; stdout when omitted")
    p.set_defaults(func=cmd_export_phenotypes)

    p = sub.add_parser("export-trajectories", help="subgroup mean trajectories of one feature")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tensor", required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--out", help="CSV path; stdout when omitted")
    p.set_defaults(func=cmd_export_trajectories)

    p = sub.add_parser("compare", help="unsupervised vs single-task vs multi-task table")
    _train_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("scaling", help="per-epoch time against K and J")
    p.add_argument("--k-values", type=_ints, default=[100, 200, 400, 800])
    p.add_argument("--j-values", type=_ints, default=[40, 80, 160, 320])
    p.add_argument("--j", type=int, default=20)
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_scaling)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Parafac2Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
