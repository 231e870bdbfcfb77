"""Experiment configuration, per-seed runs, sweeps, budget tables and reports."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import bounds, kernels
from . import diffmath as dm
from . import optimizer as opt
from . import tasks
from .conformal import (CLASSIFICATION, REGRESSION, Dataset, ScoreModel, evaluate,
                        save_predictor)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PACCONFORMAL_OUTPUT_ROOT"
METHODS = ("standard", "learned_2a", "learned_2b", "pacbayes")
TASKS = ("regression", "classification")
SWEEP_KEYS = ("method", "n_cal", "data_split")

RESULT_COLUMNS = [
    "config_hash", "cell", "task", "method", "n_cal", "data_split", "seed", "status",
    "alpha", "delta", "run_delta", "alpha_hat", "n_tune", "n_calibrate", "n_test",
    "coverage", "mean_efficiency", "kl_qp", "kl_budget", "coverage_bound",
    "efficiency_bound", "posterior_source", "fallback", "message",
]

U_NET_ARCH = dm.MLPArch((1, 128, 128, 1), "tanh")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "regression"
    method: object = "standard"
    n_cal: object = 1000
    data_split: object = 0.5
    seeds: tuple = (0, 1, 2)
    alpha: float = 0.1
    delta: float = 0.05
    output_dir: str = ""
    standard_bound: str = "vovk2a"
    n_train: int = 100
    n_test: int = 10000
    base_steps: int = 3000
    base_lr: float = 0.05
    base_optimizer: str = "sgd"
    base_seed: int = 0
    # classification data
    digits: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    pool_size: int = 10000
    corruption_seed: int = 0
    frozen_layers: int = 1
    # posterior optimization (mirrors OptimConfig)
    alpha_hat_grid: tuple = (0.8,)
    inner_steps: int = 2000
    outer_iterations: int = 7
    prior_steps: int = 2000
    learned_steps: int = 2000
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    minibatch_size: int = 100
    theta_samples: int = 8
    rho_init: float = 1.0
    rho_growth: float = 2.0
    set_size_temperature: float = 0.1
    soft_sort_temperature: float = 0.01
    prior_mode: str = "tune_mean"
    prior_var_scale: float = 0.02
    n_pairs: int = 10
    eff_loss: str = "log_radius"
    eval_theta_samples: int = 8
    restore_feasibility: bool = True
    efficiency_scale: float = 4.0
    cert_beta: float = 0.0
    log_every: int = 0
    save_predictors: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in _as_list(self.seeds)))
        object.__setattr__(self, "alpha_hat_grid", tuple(float(a) for a in _as_list(self.alpha_hat_grid)))
        for m in _as_list(self.method):
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
        for n in _as_list(self.n_cal):
            if int(n) < 2:
                raise ValueError("n_cal must be at least 2")
        for s in _as_list(self.data_split):
            if not 0.0 <= float(s) < 1.0:
                raise ValueError("data_split must lie in [0, 1)")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.standard_bound not in opt.BOUNDS:
            raise ValueError(f"standard_bound must be one of {opt.BOUNDS}")
        if self.digits not in ("synthetic", "idx"):
            raise ValueError("digits must be 'synthetic' or 'idx'")
        if self.n_test < 1 or self.n_train < 1:
            raise ValueError("n_train and n_test must be positive")
        self.optim_config()  # validates the shared fields

    def optim_config(self, **overrides) -> opt.OptimConfig:
        names = {f.name for f in fields(opt.OptimConfig)}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        kw["data_split"] = float(_as_list(self.data_split)[0])
        kw.update(overrides)
        return opt.OptimConfig(**kw)

    def is_sweep(self) -> bool:
        return any(isinstance(getattr(self, k), (list, tuple)) for k in SWEEP_KEYS)

    def cells(self) -> list:
        """(method, n_cal, data_split, seed) for every run of the sweep."""
        grid = [[str(m) for m in _as_list(self.method)], [int(n) for n in _as_list(self.n_cal)],
                [float(s) for s in _as_list(self.data_split)], list(self.seeds)]
        return list(itertools.product(*grid))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("save_predictors")
        return tasks.config_hash(d)


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def config_keys() -> list:
    return [f.name for f in fields(ExperimentConfig)]


def parse_config(raw: dict, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from a mapping, rejecting unknown keys."""
    raw = dict(raw or {})
    raw.update(overrides or {})
    unknown = sorted(set(raw) - set(config_keys()))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**raw)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping of keys to values")
    return parse_config(raw, overrides)


def parse_override(text: str) -> tuple:
    """``key=value`` with the value parsed as YAML (numbers, lists, booleans)."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def output_root(cfg: ExperimentConfig) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "results")) / f"{cfg.task}-{cfg.hash()}"


# --- data and models --------------------------------------------------------

def _cache_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "results")) / "cache"


def regression_setup(cfg: ExperimentConfig, n_cal: int, seed: int):
    task = tasks.gen_regression(cfg.n_train, n_cal, cfg.n_test, seed)
    base = tasks.train_base_regressor(task.train, steps=cfg.base_steps, lr=cfg.base_lr,
                                      seed=seed, optimizer=cfg.base_optimizer)
    model = ScoreModel(REGRESSION, tasks.REGRESSION_BASE_ARCH, base, U_NET_ARCH)
    theta0 = model.init_theta(np.random.default_rng([seed, 0x7E7A]))
    return model, theta0, task.cal, task.test


def classification_data(cfg: ExperimentConfig) -> dict:
    key = {"kind": "digits", "digits": cfg.digits, "n_train": cfg.n_train, "pool_size": cfg.pool_size,
           "base_steps": cfg.base_steps, "base_lr": cfg.base_lr, "base_seed": cfg.base_seed,
           "base_optimizer": cfg.base_optimizer, "corruption_seed": cfg.corruption_seed,
           "paths": [cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels]}

    def build():
        if cfg.digits == "idx":
            train = tasks.load_idx(cfg.train_images, cfg.train_labels)
            raw = tasks.load_idx(cfg.test_images, cfg.test_labels)
        else:
            train = tasks.synthetic_digits(cfg.n_train, cfg.base_seed)
            raw = tasks.synthetic_digits(cfg.pool_size, cfg.base_seed + 1)
        train = train.subset(slice(0, cfg.n_train))
        raw = raw.subset(slice(0, cfg.pool_size))
        params = tasks.train_base_classifier(train, steps=cfg.base_steps, lr=cfg.base_lr,
                                             seed=cfg.base_seed, optimizer=cfg.base_optimizer)
        pool_x = tasks.corrupt(raw.x, cfg.corruption_seed).reshape(len(raw), -1)
        acc = tasks.accuracy(params, tasks.CLASSIFIER_ARCH, tasks.flatten(train))
        return {"params": params.values, "pool_x": pool_x, "pool_y": raw.y,
                "train_accuracy": np.array(acc)}

    return tasks.cached_arrays(_cache_dir(cfg), key, build)


def classification_setup(cfg: ExperimentConfig, n_cal: int, seed: int):
    data = classification_data(cfg)
    params = dm.ParamVector(data["params"], tasks.CLASSIFIER_ARCH.layout("net."))
    pool = Dataset(data["pool_x"], data["pool_y"])
    task = tasks.ClassificationTask(train=pool.subset(slice(0, 0)), pool=pool)
    n_test = min(cfg.n_test, len(pool) - n_cal)
    cal, test = task.split(seed, n_cal, n_test)
    base_arch, base, head_arch, theta0 = tasks.split_network(params, tasks.CLASSIFIER_ARCH, cfg.frozen_layers)
    model = ScoreModel(CLASSIFICATION, base_arch, base, head_arch)
    return model, theta0, cal, test


# --- one run ----------------------------------------------------------------

def cell_id(method: str, n_cal: int, split: float, seed: int) -> str:
    return f"{method}-n{n_cal}-s{split:g}-seed{seed}"


def _certificates(pred, cal: Dataset, cfg: opt.OptimConfig, kl_qp: float, delta: float):
    cov = bounds.coverage_upper_bound(bounds.BoundInputs(cfg.alpha, pred.alpha_hat, delta, len(cal), kl_qp))
    emp, beta, l_tau = opt.normalized_efficiency(pred, cal, cfg)
    beta = cfg.cert_beta or beta
    eff = bounds.efficiency_upper_bound(emp, kl_qp, max(beta, 1e-12), l_tau, len(cal), delta)
    return cov, eff, {"empirical_efficiency": emp, "beta": beta, "l_tau": l_tau, "gamma": delta}


def run_cell(cfg: ExperimentConfig, method: str, n_cal: int, split: float, seed: int,
             out_dir: Path | None = None) -> dict:
    """Run one (method, n_cal, split, seed) cell and return its result row."""
    row = {c: "" for c in RESULT_COLUMNS}
    row.update(config_hash=cfg.hash(), cell=cell_id(method, n_cal, split, seed), task=cfg.task,
               method=method, n_cal=n_cal, data_split=split, seed=seed, alpha=cfg.alpha,
               delta=cfg.delta, status="ok", fallback=False)
    t0 = time.perf_counter()
    try:
        setup = regression_setup if cfg.task == "regression" else classification_setup
        model, theta0, cal_all, test = setup(cfg, n_cal, seed)
        ocfg = cfg.optim_config(data_split=split)
        if cfg.task == "classification":
            ocfg = replace(ocfg, eff_loss="soft_set_size")
        split_rng = np.random.default_rng([seed, 1])
        fit_rng = np.random.default_rng([seed, 2])
        run_delta = cfg.delta
        kl_qp, budget, curve, source = 0.0, math.nan, [], ""
        if method == "standard":
            tune, cal = cal_all.subset(slice(0, 0)), cal_all
            pred = opt.standard_baseline(model, theta0, cal, ocfg, cfg.standard_bound)
        elif method in ("learned_2a", "learned_2b"):
            tune, cal = opt.split_data(cal_all, split, split_rng)
            bound = "vovk2a" if method == "learned_2a" else "vovk2b"
            pred = opt.learned_baseline(model, theta0, tune, cal, ocfg, bound, fit_rng)
        else:
            tune, cal = opt.split_data(cal_all, split, split_rng)
            prior = opt.initial_prior(model, theta0, ocfg.prior_var_scale)
            gs = opt.alpha_hat_grid_search(prior, model, tune, cal, ocfg, fit_rng, pair_seed=seed,
                                           fallback_theta=theta0)
            pred = gs.predictor
            row["fallback"] = gs.fallback
            if not gs.fallback:
                win = next(r for r in gs.runs if r.predictor is pred)
                run_delta = ocfg.run_delta
                kl_qp, budget, curve, source = win.result.kl, win.result.budget, win.result.curve, win.result.source
                if kl_qp > budget + 1e-6:
                    raise AssertionError(f"posterior KL {kl_qp} exceeds budget {budget}")
        metrics = evaluate(pred, test, rng_seed=seed)
        cov, eff, extra = _certificates(pred, cal, ocfg, kl_qp, run_delta)
        row.update(run_delta=run_delta, alpha_hat=pred.alpha_hat, n_tune=len(tune), n_calibrate=len(cal),
                   n_test=metrics.n_test, coverage=metrics.coverage_rate,
                   mean_efficiency=metrics.mean_efficiency, kl_qp=kl_qp, kl_budget=budget,
                   coverage_bound=cov.upper_bound, efficiency_bound=eff.upper_bound,
                   posterior_source=source)
        if out_dir is not None:
            if cfg.save_predictors:
                meta = dict(pred.meta, alpha=cfg.alpha, delta=run_delta, n_cal=len(cal), kl_qp=kl_qp,
                            config_hash=row["config_hash"], cell=row["cell"], **extra)
                save_predictor(out_dir / "predictors" / f"{row['cell']}.npz", replace(pred, meta=meta))
            if curve:
                write_csv(out_dir / "curves" / f"{row['cell']}.csv", curve,
                          ["outer", "step", "loss", "kl", "lambda", "rho", "slack"])
    except bounds.InfeasibleGuarantee as exc:
        row.update(status="infeasible", message=str(exc))
    except Exception as exc:  # reported per row; the sweep carries on
        log.exception("run %s failed", row["cell"])
        row.update(status="error", message=f"{type(exc).__name__}: {exc}")
    row["_wall_seconds"] = time.perf_counter() - t0
    return row


# --- sweeps -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list, columns: list) -> Path:
    """Write rows atomically with a fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_fmt))
    tmp.replace(path)


def _job(args):
    cfg, cell, out_dir = args
    row = run_cell(cfg, *cell, out_dir=out_dir)
    _write_json(out_dir / "runs" / f"{row['cell']}.json", row)
    return row


@dataclass(frozen=True, eq=False)
class ExperimentRun:
    config: ExperimentConfig
    rows: list
    results_path: Path
    manifest_path: Path

    @property
    def failed(self) -> bool:
        return any(r["status"] == "error" for r in self.rows)


def run_experiment(cfg: ExperimentConfig, workers: int = 1, resume: bool = True) -> ExperimentRun:
    """Run every cell, one JSON file per finished cell, then the CSV and manifest."""
    out = output_root(cfg)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    todo, rows = [], {}
    for cell in cfg.cells():
        path = out / "runs" / f"{cell_id(*cell)}.json"
        if resume and path.exists():
            rows[cell] = json.loads(path.read_text())
        else:
            todo.append(cell)
    if todo and cfg.task == "classification":
        classification_data(cfg)  # build the shared cache once, before any worker starts
    jobs = [(cfg, cell, out) for cell in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cell, row in zip(todo, pool.map(_job, jobs)):
                rows[cell] = row
    else:
        for job in jobs:
            rows[job[1]] = _job(job)
    ordered = [rows[c] for c in cfg.cells()]
    results = write_csv(out / "results.csv", ordered, RESULT_COLUMNS)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "cells": [r["cell"] for r in ordered],
        "wall_seconds": {r["cell"]: r.get("_wall_seconds") for r in ordered},
        "started": started,
        "finished": time.time(),
        "resumed": sorted(cell_id(*c) for c in cfg.cells() if c not in todo),
        "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    _write_json(out / "manifest.json", manifest)
    return ExperimentRun(cfg, ordered, results, out / "manifest.json")


# --- budget table -----------------------------------------------------------

BUDGET_COLUMNS = ["n", "alpha", "delta", "alpha_hat", "k", "kl_budget", "vovk_2a_alpha_hat",
                  "vovk_2b_alpha_hat", "budget_root_alpha_hat", "below_2a", "below_2b"]


def _maybe(fn, *args):
    try:
        return fn(*args)
    except bounds.InfeasibleGuarantee:
        return ""


def emit_budget_table(alpha: float, delta: float, n_list, alpha_hat_grid=None) -> list:
    """KL budget per (N, alpha_hat) with the Vovk 2a/2b levels and the budget root.

    The default grid is 60 log-spaced levels in [1e-4, alpha]; levels leaving
    no calibration point above tau (k < 1) are skipped.
    """
    if alpha_hat_grid is None:
        alpha_hat_grid = np.geomspace(1e-4, alpha, 60)
    rows = []
    for n in n_list:
        n = int(n)
        a2 = _maybe(bounds.vovk_2a_alpha_hat, alpha, delta, n)
        b2 = _maybe(bounds.vovk_2b_alpha_hat, alpha, delta, n)
        root = _maybe(bounds.max_certified_alpha_hat, alpha, delta, n)
        for ah in alpha_hat_grid:
            ah = float(ah)
            k = bounds.calibration_count(ah, n)
            if k < 1 or ah > alpha:
                continue
            rows.append({"n": n, "alpha": alpha, "delta": delta, "alpha_hat": ah, "k": k,
                         "kl_budget": bounds.kl_budget(alpha, ah, delta, n),
                         "vovk_2a_alpha_hat": a2, "vovk_2b_alpha_hat": b2,
                         "budget_root_alpha_hat": root,
                         "below_2a": a2 != "" and ah <= a2, "below_2b": b2 != "" and ah <= b2})
    return rows


# --- reports ----------------------------------------------------------------

SUMMARY_COLUMNS = ["task", "method", "n_cal", "data_split", "runs", "failed", "coverage_mean",
                   "coverage_std", "efficiency_mean", "efficiency_std", "coverage_ci_lower",
                   "violations", "relative_efficiency_seedwise", "relative_efficiency_pooled"]


def coverage_ci_lower(alpha: float, n_test: int, z: float = 1.959963984540054) -> float:
    """Lower end of the 95% normal interval for the mean of n_test Bernoulli(1 - alpha)."""
    return (1.0 - alpha) - z * math.sqrt(alpha * (1.0 - alpha) / n_test)


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def _std(xs):
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def emit_report(rows: list) -> dict:
    """Aggregate result rows per (task, method, n_cal, data_split).

    Each row is flagged when its coverage falls below the 95% binomial
    interval of 1 - alpha at its test size.  Efficiency relative to the
    standard method is reported two ways: mean over seeds of per-seed ratios,
    and ratio of pooled means.
    """
    if not rows:
        raise ValueError("no runs to report")
    ok = [r for r in rows if r.get("status") == "ok"]
    flagged = []
    for r in ok:
        lower = coverage_ci_lower(_num(r["alpha"]), int(_num(r["n_test"])))
        flagged.append(dict(r, coverage_ci_lower=lower, violation=_num(r["coverage"]) < lower))
    std_eff = {}
    for r in flagged:
        if r["method"] == "standard":
            std_eff[(r["task"], int(_num(r["n_cal"])), int(_num(r["seed"])))] = _num(r["mean_efficiency"])
    groups = {}
    for r in flagged:
        key = (r["task"], r["method"], int(_num(r["n_cal"])), _num(r["data_split"]))
        groups.setdefault(key, []).append(r)
    failed = {}
    for r in rows:
        if r.get("status") != "ok":
            key = (r["task"], r["method"], int(_num(r["n_cal"])), _num(r["data_split"]))
            failed[key] = failed.get(key, 0) + 1
    summary = []
    for key in sorted(set(groups) | set(failed)):
        rs = sorted(groups.get(key, []), key=lambda r: int(_num(r["seed"])))
        cov = [_num(r["coverage"]) for r in rs]
        eff = [_num(r["mean_efficiency"]) for r in rs]
        ratios, pooled_std = [], []
        for r in rs:
            s = std_eff.get((key[0], key[2], int(_num(r["seed"]))))
            if s is not None:
                ratios.append(_num(r["mean_efficiency"]) / s)
                pooled_std.append(s)
        summary.append({
            "task": key[0], "method": key[1], "n_cal": key[2], "data_split": key[3],
            "runs": len(rs), "failed": failed.get(key, 0),
            "coverage_mean": float(np.mean(cov)) if cov else math.nan,
            "coverage_std": _std(cov),
            "efficiency_mean": float(np.mean(eff)) if eff else math.nan,
            "efficiency_std": _std(eff),
            "coverage_ci_lower": min((r["coverage_ci_lower"] for r in rs), default=math.nan),
            "violations": sum(r["violation"] for r in rs),
            "relative_efficiency_seedwise": float(np.mean(ratios)) if ratios else math.nan,
            "relative_efficiency_pooled": (float(np.mean([_num(r["mean_efficiency"]) for r in rs if
                                                          (key[0], key[2], int(_num(r["seed"]))) in std_eff])
                                                 / np.mean(pooled_std)) if pooled_std else math.nan),
        })
    return {"summary": summary, "runs": flagged}


def read_results(paths) -> list:
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


# --- certify ----------------------------------------------------------------

def certify(path, delta: float | None = None, gamma: float | None = None) -> dict:
    """Recompute both certificates from a saved predictor's stored statistics."""
    from .conformal import load_predictor

    pred = load_predictor(path)
    m = pred.meta
    missing = [k for k in ("alpha", "delta", "n_cal", "kl_qp", "empirical_efficiency", "beta", "l_tau")
               if k not in m]
    if missing:
        raise ValueError(f"{path}: predictor lacks {', '.join(missing)}")
    delta = m["delta"] if delta is None else delta
    gamma = m.get("gamma", delta) if gamma is None else gamma
    cov = bounds.coverage_upper_bound(bounds.BoundInputs(m["alpha"], pred.alpha_hat, delta, int(m["n_cal"]), m["kl_qp"]))
    eff = bounds.efficiency_upper_bound(m["empirical_efficiency"], m["kl_qp"], m["beta"], m["l_tau"],
                                        int(m["n_cal"]), gamma)
    return {"alpha": m["alpha"], "alpha_hat": pred.alpha_hat, "delta": delta, "gamma": gamma,
            "n_cal": int(m["n_cal"]), "kl_qp": m["kl_qp"], "pairs": pred.m,
            "coverage": asdict(cov), "efficiency": asdict(eff)}
