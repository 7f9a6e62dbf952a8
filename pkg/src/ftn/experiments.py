"""Experiment drivers: recovery benchmark, image classification, grid search.

Each run writes, under its output directory:

``config_resolved.ini``
    Every setting after defaults and overrides, re-loadable as a config file.
``trace_<method>[_<basis>].csv``
    One row per iteration: ``iter,seconds,train_loss,step_size,test_accuracy,
    method`` (accuracy empty when not evaluated).
``model_<method>[_<basis>].ftnc``
    Final parameters as a binary checkpoint.
``summary.csv``
    Final losses/accuracies per run.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, replace

from .data import (
    Dataset,
    downscale,
    gen_recovery,
    load_csv,
    load_idx,
    morton_order,
    split,
)
from .errors import DegenerateStepError, LineSearchError, NumericalError
from .features import FeatureFamily, basis_transform, eval_features
from .model import change_of_basis, random_init, save_checkpoint
from .optimizers import METHODS, OptimizerConfig, TraceRecord, TrainingData, run
from .topology import build_balanced, clamp_bond_dims

__all__ = [
    "RecoveryConfig",
    "ClassifyConfig",
    "BASES",
    "run_recovery",
    "run_classify",
    "run_grid_search",
    "write_trace",
    "read_trace",
    "iterations_to_threshold",
    "config_sections",
    "coerce_field",
]

log = logging.getLogger(__name__)

BASES = ("monomial", "legendre", "hermite")


@dataclass
class RecoveryConfig:
    """Noisy tree-network recovery benchmark under a change of basis."""

    outdir: str = "runs/recovery"
    seed: int = 0
    num_samples: int = 256
    dims: int = 4
    noise_var: float = 2.5e-3
    leaf_dim: int = 3
    bond_dim: int = 5
    output_dim: int = 3
    bases: tuple = BASES
    methods: tuple = ("grad", "ngrad")
    max_iters: int = 500
    step_rule: str = "armijo"
    gamma0: float = 1.0
    gamma: float = 0.1
    armijo_c: float = 1e-4
    regularization: float = 5e-3
    cg_tol: float = 1e-6
    cg_max_iter: int = 250
    eval_every: int = 10

    def optimizer_config(self, method: str) -> OptimizerConfig:
        return OptimizerConfig(
            method=method,
            step_rule=self.step_rule,
            gamma0=self.gamma0,
            gamma=self.gamma,
            armijo_c=self.armijo_c,
            regularization=self.regularization,
            max_iters=self.max_iters,
            seed=self.seed,
            cg_tol=self.cg_tol,
            cg_max_iter=self.cg_max_iter,
            eval_every=self.eval_every,
        )

    @property
    def loss_floor(self) -> float:
        """Expected training loss at exact recovery: one noise variance per output."""
        return self.output_dim * self.noise_var


@dataclass
class ClassifyConfig:
    """Image classification with the normalized-affine feature map."""

    outdir: str = "runs/classify"
    seed: int = 0
    source: str = "csv"  # or "idx"
    csv_path: str = ""
    label_column: int = -1
    feature_max: float = 16.0
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    height: int = 28
    width: int = 28
    downscale_to: int = 0  # 0 = keep original resolution
    train_fraction: float = 0.8
    split_seed: int = 0
    num_classes: int = 10
    bond_dim: int = 8
    feature: str = "normalized-affine"
    degree: int = 1
    pixel_order: str = "morton"  # or "row-major"
    init_scale: float = 0.05
    methods: tuple = ("bd-ngrad",)
    step_rule: str = "armijo"
    gamma0: float = 1.0
    gamma: float = 0.1
    armijo_c: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.0
    regularization: float = 0.05
    batch_size: int = 0
    max_iters: int = 500
    cg_tol: float = 1e-6
    cg_max_iter: int = 250
    eval_every: int = 10
    power_iters: int = 0

    def optimizer_config(self, method: str) -> OptimizerConfig:
        return OptimizerConfig(
            method=method,
            step_rule=self.step_rule,
            gamma0=self.gamma0,
            gamma=self.gamma,
            armijo_c=self.armijo_c,
            beta1=self.beta1,
            beta2=self.beta2,
            regularization=self.regularization,
            batch_size=self.batch_size,
            max_iters=self.max_iters,
            seed=self.seed,
            cg_tol=self.cg_tol,
            cg_max_iter=self.cg_max_iter,
            eval_every=self.eval_every,
            power_iters=self.power_iters,
        )


# INI layout shared by the drivers (echo) and the CLI (parsing): maps each
# section to the config fields it carries.
_RECOVERY_SECTIONS = {
    "experiment": ("outdir", "seed"),
    "data": ("num_samples", "dims", "noise_var"),
    "model": ("leaf_dim", "bond_dim", "output_dim", "bases"),
    "optimizer": (
        "methods", "max_iters", "step_rule", "gamma0", "gamma", "armijo_c",
        "regularization", "cg_tol", "cg_max_iter", "eval_every",
    ),
}
_CLASSIFY_SECTIONS = {
    "experiment": ("outdir", "seed"),
    "data": (
        "source", "csv_path", "label_column", "feature_max", "images",
        "labels", "test_images", "test_labels", "height", "width",
        "downscale_to", "train_fraction", "split_seed", "num_classes",
    ),
    "model": ("bond_dim", "feature", "degree", "pixel_order", "init_scale"),
    "optimizer": (
        "methods", "step_rule", "gamma0", "gamma", "armijo_c", "beta1",
        "beta2", "regularization", "batch_size", "max_iters", "cg_tol",
        "cg_max_iter", "eval_every", "power_iters",
    ),
}


def config_sections(kind: str) -> dict:
    if kind == "recovery":
        return _RECOVERY_SECTIONS
    if kind == "classify":
        return _CLASSIFY_SECTIONS
    raise ValueError(f"unknown experiment kind {kind!r}")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_config(cfg, kind: str) -> None:
    parser = configparser.ConfigParser()
    parser["experiment"] = {"kind": kind}
    for section, keys in config_sections(kind).items():
        parser.setdefault(section, {})
        for key in keys:
            parser[section][key] = _format_value(getattr(cfg, key))
    with open(os.path.join(cfg.outdir, "config_resolved.ini"), "w") as fh:
        parser.write(fh)


def write_trace(path, records: list[TraceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iter", "seconds", "train_loss", "step_size", "test_accuracy", "method"]
        )
        for rec in records:
            writer.writerow(
                [
                    rec.iteration,
                    f"{rec.seconds:.3f}",
                    repr(rec.train_loss),
                    repr(rec.step_size),
                    "" if rec.test_accuracy is None else repr(rec.test_accuracy),
                    rec.method,
                ]
            )


def read_trace(path) -> list[TraceRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(
                TraceRecord(
                    iteration=int(row["iter"]),
                    seconds=float(row["seconds"]),
                    train_loss=float(row["train_loss"]),
                    step_size=float(row["step_size"]),
                    test_accuracy=(
                        float(row["test_accuracy"]) if row["test_accuracy"] else None
                    ),
                    method=row["method"],
                )
            )
    return records


def iterations_to_threshold(trace: list[TraceRecord], threshold: float):
    """First iteration whose training loss is at or below the threshold."""
    for rec in trace:
        if rec.train_loss <= threshold:
            return rec.iteration
    return None


def _feature_family(name: str, degree: int) -> FeatureFamily:
    return FeatureFamily(name, degree=degree)


def run_recovery(cfg: RecoveryConfig, progress=None) -> dict:
    """Run every (method, basis) pair on one shared recovery instance.

    The initial point is drawn once in the monomial basis and re-expressed
    exactly under each other basis, so all runs start from the same function.
    Returns a summary dict keyed by (method, basis).
    """
    for basis in cfg.bases:
        if basis not in BASES:
            raise ValueError(f"unknown basis {basis!r}")
    for method in cfg.methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
    os.makedirs(cfg.outdir, exist_ok=True)
    echo_config(cfg, "recovery")

    dataset, _ = gen_recovery(
        cfg.seed,
        m=cfg.num_samples,
        d=cfg.dims,
        leaf_dim=cfg.leaf_dim,
        bond_dim=cfg.bond_dim,
        output_dim=cfg.output_dim,
        noise_var=cfg.noise_var,
    )
    topology = build_balanced(
        [cfg.leaf_dim] * cfg.dims, cfg.output_dim, cfg.bond_dim
    )
    base_params = random_init(topology, seed=cfg.seed + 1)
    monomial = _feature_family("monomial", cfg.leaf_dim - 1)

    threshold = 1.1 * cfg.loss_floor
    runs: dict = {}
    for basis in cfg.bases:
        family = _feature_family(basis, cfg.leaf_dim - 1)
        feats = eval_features(family, dataset.inputs)
        if basis == "monomial":
            params0 = base_params
        else:
            mats = [basis_transform(monomial, family)] * cfg.dims
            params0 = change_of_basis(base_params, mats)
        data = TrainingData("least-squares", feats, dataset.targets)
        for method in cfg.methods:
            final, trace = run(cfg.optimizer_config(method), params0, data)
            tag = f"{method}_{basis}"
            write_trace(os.path.join(cfg.outdir, f"trace_{tag}.csv"), trace)
            save_checkpoint(final, os.path.join(cfg.outdir, f"model_{tag}.ftnc"))
            runs[(method, basis)] = {
                "trace": trace,
                "final_loss": trace[-1].train_loss,
                "iterations_to_threshold": iterations_to_threshold(trace, threshold),
            }
            if progress is not None:
                progress(tag, runs[(method, basis)])
            log.info(
                "%s: final loss %.3e (floor %.3e)",
                tag, trace[-1].train_loss, cfg.loss_floor,
            )

    with open(os.path.join(cfg.outdir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "basis", "final_loss", "iterations_to_threshold", "threshold"]
        )
        for (method, basis), info in runs.items():
            reached = info["iterations_to_threshold"]
            writer.writerow(
                [
                    method,
                    basis,
                    repr(info["final_loss"]),
                    "" if reached is None else reached,
                    repr(threshold),
                ]
            )
    return {"floor": cfg.loss_floor, "threshold": threshold, "runs": runs}


def _load_classify_data(cfg: ClassifyConfig) -> tuple[Dataset, Dataset]:
    def maybe_downscale(ds: Dataset) -> Dataset:
        if not cfg.downscale_to:
            return ds
        shrunk = downscale(ds.inputs, cfg.height, cfg.width, cfg.downscale_to)
        return replace(ds, inputs=shrunk)

    if cfg.source == "csv":
        full = load_csv(
            cfg.csv_path, cfg.label_column, cfg.feature_max, cfg.num_classes
        )
        return split(full, cfg.train_fraction, cfg.split_seed)
    if cfg.source != "idx":
        raise ValueError(f"unknown data source {cfg.source!r}")
    train = maybe_downscale(load_idx(cfg.images, cfg.labels, cfg.num_classes))
    if cfg.test_images:
        test = maybe_downscale(
            load_idx(cfg.test_images, cfg.test_labels, cfg.num_classes)
        )
        return train, test
    return split(train, cfg.train_fraction, cfg.split_seed)


def run_classify(cfg: ClassifyConfig, progress=None) -> dict:
    """Train the configured methods from one shared random initial point.

    Returns per-method summaries with final training loss and test accuracy.
    """
    for method in cfg.methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
    os.makedirs(cfg.outdir, exist_ok=True)
    echo_config(cfg, "classify")

    train, test = _load_classify_data(cfg)
    d = train.num_features
    if d < 2 or d & (d - 1):
        raise ValueError(f"feature count {d} is not a power of two")
    if cfg.pixel_order == "morton":
        side = math.isqrt(d)
        if side * side != d:
            raise ValueError(f"morton ordering needs square images, got d={d}")
        perm = morton_order(side)
        train = replace(train, inputs=train.inputs[:, perm])
        test = replace(test, inputs=test.inputs[:, perm])
    elif cfg.pixel_order != "row-major":
        raise ValueError(f"unknown pixel order {cfg.pixel_order!r}")
    family = _feature_family(cfg.feature, cfg.degree)
    topology = clamp_bond_dims(
        build_balanced([family.dim] * d, cfg.num_classes, cfg.bond_dim, validate=False)
    )
    train_feats = eval_features(family, train.inputs)
    test_feats = eval_features(family, test.inputs)
    params0 = random_init(
        topology,
        cfg.seed,
        probe=train_feats.take(slice(0, min(64, train.num_samples))),
        scale=cfg.init_scale,
    )
    data = TrainingData(
        "logistic", train_feats, train.targets, test_feats, test.targets
    )

    runs: dict = {}
    for method in cfg.methods:
        final, trace = run(cfg.optimizer_config(method), params0, data)
        write_trace(os.path.join(cfg.outdir, f"trace_{method}.csv"), trace)
        save_checkpoint(final, os.path.join(cfg.outdir, f"model_{method}.ftnc"))
        accuracies = [
            (rec.iteration, rec.test_accuracy)
            for rec in trace
            if rec.test_accuracy is not None
        ]
        runs[method] = {
            "trace": trace,
            "final_loss": trace[-1].train_loss,
            "final_accuracy": accuracies[-1][1] if accuracies else None,
            "accuracies": accuracies,
        }
        if progress is not None:
            progress(method, runs[method])
        log.info(
            "%s: final loss %.4f, test accuracy %s",
            method, trace[-1].train_loss, runs[method]["final_accuracy"],
        )

    with open(os.path.join(cfg.outdir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "final_loss", "final_test_accuracy"])
        for method, info in runs.items():
            writer.writerow(
                [
                    method,
                    repr(info["final_loss"]),
                    "" if info["final_accuracy"] is None else repr(info["final_accuracy"]),
                ]
            )
    return {"runs": runs, "num_features": d}


def run_grid_search(cfg: ClassifyConfig, param: str, values: list[str]) -> dict:
    """Re-run the classify experiment for each value of one config field.

    Values arrive as strings and are coerced to the field's type.  Each value
    trains in its own subdirectory; a ``grid_search.csv`` at the top level
    collects final accuracies and the best value per method.
    """
    field_types = {f.name: f.type for f in dataclasses.fields(ClassifyConfig)}
    if param not in field_types:
        raise ValueError(f"unknown config field {param!r}")
    os.makedirs(cfg.outdir, exist_ok=True)

    rows = []
    results = {}
    for raw in values:
        value = coerce_field(ClassifyConfig, param, raw)
        sub = replace(
            cfg,
            outdir=os.path.join(cfg.outdir, f"{param}={raw}"),
            **{param: value},
        )
        try:
            outcome = run_classify(sub)
        except (DegenerateStepError, LineSearchError, NumericalError) as exc:
            # A grid point that diverges is a result, not a crash.
            log.warning("grid value %s=%s failed: %s", param, raw, exc)
            results[raw] = {"error": str(exc)}
            for method in cfg.methods:
                rows.append((param, raw, method, None))
            continue
        results[raw] = outcome
        for method, info in outcome["runs"].items():
            rows.append((param, raw, method, info["final_accuracy"]))

    with open(os.path.join(cfg.outdir, "grid_search.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "method", "final_test_accuracy"])
        for row in rows:
            writer.writerow(row)

    best: dict = {}
    for param_name, raw, method, acc in rows:
        if acc is not None and (method not in best or acc > best[method][1]):
            best[method] = (raw, acc)
    return {"results": results, "best": best}


def coerce_field(cls, name: str, raw: str):
    for f in dataclasses.fields(cls):
        if f.name == name:
            default = f.default
            if isinstance(default, bool):
                return raw.lower() in ("1", "true", "yes", "on")
            if isinstance(default, int):
                return int(raw)
            if isinstance(default, float):
                return float(raw)
            if isinstance(default, tuple):
                return tuple(s.strip() for s in raw.split(",") if s.strip())
            return raw
    raise ValueError(f"unknown config field {name!r}")
