"""Score functions, calibration, prediction sets and the randomized predictor."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import diffmath as dm
from .diffmath import DiagGaussian, MLPArch, ParamLayout, ParamVector

REGRESSION = "regression_scaled"
CLASSIFICATION = "classification_logprob"

PREDICTOR_FORMAT = "pacconformal-predictor"
PREDICTOR_VERSION = 1

# u(x) = -1 + softplus(FF(x) + 0.6)
U_OFFSET = 0.6


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


@dataclass(frozen=True, eq=False)
class ScoreModel:
    """Parametric nonconformity score s(x, y; theta).

    ``regression_scaled``: s = |f(x) - y| / (1 + sigmoid(theta_g) u(x; theta_u)),
    where f is the frozen base regressor and u a learned network.  Without an
    ``aux_arch`` the score is the plain residual |f(x) - y| and theta is empty.

    ``classification_logprob``: s = -log softmax(g(h(x); theta))[y], where h is
    the frozen feature stack ``base_arch`` (may be None) and g the trainable
    head ``aux_arch``.
    """

    kind: str
    base_arch: MLPArch | None
    base_params: ParamVector | None
    aux_arch: MLPArch | None = None

    def __post_init__(self):
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown score kind {self.kind!r}")
        if self.kind == CLASSIFICATION and self.aux_arch is None:
            raise ValueError("classification scores need a trainable head")
        if (self.base_arch is None) != (self.base_params is None):
            raise ValueError("base_arch and base_params go together")
        if self.base_arch is not None and self.base_params.layout != self.base_arch.layout("base."):
            raise ValueError("base parameters do not match the base architecture")

    # -- layout ------------------------------------------------------------

    @property
    def layout(self) -> ParamLayout:
        if self.aux_arch is None:
            return ParamLayout(())
        if self.kind == REGRESSION:
            return ParamLayout(self.aux_arch.layout("u.").segments + (("gate", (1,)),))
        return self.aux_arch.layout("head.")

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def n_labels(self) -> int:
        if self.kind != CLASSIFICATION:
            raise AttributeError("regression scores have no label alphabet")
        return self.aux_arch.sizes[-1]

    def fan_in(self) -> np.ndarray:
        if self.aux_arch is None:
            return np.zeros(0)
        fi = self.aux_arch.fan_in()
        if self.kind == REGRESSION:
            fi = np.concatenate([fi, [1.0]])
        return fi

    def init_theta(self, rng: np.random.Generator, gate: float = -2.0) -> np.ndarray:
        """Random initial parameters.

        For regression the output layer of u starts at zero weights with the
        bias that makes u vanish, so the initial score is the plain residual.
        """
        if self.aux_arch is None:
            return np.zeros(0)
        theta = self.aux_arch.init(rng)
        if self.kind == REGRESSION:
            fi = self.aux_arch.sizes[-2]
            theta[-(fi + 1):-1] = 0.0
            theta[-1] = math.log(math.e - 1.0) - U_OFFSET
            theta = np.concatenate([theta, [gate]])
        return theta

    # -- evaluation --------------------------------------------------------

    def prepare(self, x) -> np.ndarray:
        """Theta-independent part of the computation for inputs ``x``.

        Regression: columns (f(x), x).  Classification: the frozen features.
        """
        x = np.asarray(x, dtype=np.float64)
        if self.kind == REGRESSION:
            x2 = x.reshape(-1, 1)
            f = dm.forward_mlp(self.base_params.values, self.base_arch, x2)[:, 0]
            return np.column_stack([f, x2[:, 0]])
        x2 = x.reshape(len(x), -1)
        if self.base_arch is None:
            return x2
        return np.asarray(dm.forward_mlp(self.base_params.values, self.base_arch, x2))

    def radius(self, theta, feats):
        """Regression interval half-width per unit tau: 1 + sigmoid(theta_g) u(x)."""
        if self.kind != REGRESSION:
            raise AttributeError("radius is defined for regression scores only")
        tv = dm._val(theta)
        lead = tv.shape[:-1]
        if self.aux_arch is None:
            return np.ones(lead + (len(feats),))
        ff = dm.forward_mlp(theta, self.aux_arch, feats[:, 1:2])
        ff = dm.reshape(ff, dm._val(ff).shape[:-1])
        u = dm.sub(dm.softplus(dm.add(ff, U_OFFSET)), 1.0)
        gate = dm.sigmoid(dm.getitem(theta, (Ellipsis, slice(-1, None))))
        return dm.add(1.0, dm.mul(gate, u))

    def label_scores(self, theta, feats):
        """Scores of every label, shape ``lead + (J, K_labels)``."""
        if self.kind != CLASSIFICATION:
            raise AttributeError("label scores are defined for classification only")
        return dm.neg(dm.forward_mlp(theta, self._head(), feats))

    def _head(self) -> MLPArch:
        a = self.aux_arch
        return a if a.head == "log_softmax" else MLPArch(a.sizes, a.activation, "log_softmax")

    def scores(self, theta, feats, y):
        """Scores of the true labels, shape ``lead + (J,)``; differentiable in theta."""
        if self.kind == REGRESSION:
            resid = np.abs(feats[:, 0] - np.asarray(y, dtype=np.float64))
            return dm.div(resid, self.radius(theta, feats))
        ls = self.label_scores(theta, feats)
        lead = dm._val(ls).shape[:-1]
        idx = np.broadcast_to(np.asarray(y, dtype=np.int64)[:, None], lead + (1,))
        out = dm.take_along_last(ls, np.ascontiguousarray(idx))
        return dm.reshape(out, lead)

    def to_dict(self):
        return {
            "kind": self.kind,
            "base_arch": None if self.base_arch is None else self.base_arch.to_dict(),
            "aux_arch": None if self.aux_arch is None else self.aux_arch.to_dict(),
        }


def score(model: ScoreModel, theta, x, y) -> float:
    """s(x, y; theta) for a single example."""
    feats = model.prepare(np.asarray([x]) if model.kind == REGRESSION else np.asarray(x)[None])
    return float(np.asarray(model.scores(_theta_values(theta), feats, np.asarray([y])))[0])


def _theta_values(theta) -> np.ndarray:
    return theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)


# --- prediction sets --------------------------------------------------------

@dataclass(frozen=True)
class PredictionSet:
    labels: frozenset | None = None
    interval: tuple | None = None

    def __contains__(self, y):
        if self.labels is not None:
            return y in self.labels
        lo, hi = self.interval
        return lo <= y <= hi

    @property
    def size(self) -> float:
        if self.labels is not None:
            return float(len(self.labels))
        lo, hi = self.interval
        return hi - lo


def predict_set(model: ScoreModel, theta, x, tau: float) -> PredictionSet:
    """{y : s(x, y; theta) <= tau}: a label subset or a closed interval."""
    t = _theta_values(theta)
    if model.kind == CLASSIFICATION:
        feats = model.prepare(np.asarray(x)[None])
        ls = np.asarray(model.label_scores(t, feats))[0]
        return PredictionSet(labels=frozenset(int(i) for i in np.flatnonzero(ls <= tau)))
    if tau < 0:
        raise ValueError("regression thresholds are nonnegative")
    feats = model.prepare(np.asarray([x]))
    f = float(feats[0, 0])
    if math.isinf(tau):
        return PredictionSet(interval=(-math.inf, math.inf))
    r = tau * float(np.asarray(model.radius(t, feats))[0])
    return PredictionSet(interval=(f - r, f + r))


def calibrate(model: ScoreModel, theta, data: Dataset, alpha_hat: float) -> float:
    """Conformal threshold: the ceil((n+1)(1-alpha_hat))-th smallest calibration score."""
    if len(data) == 0:
        raise ValueError("calibration data is empty")
    s = np.asarray(model.scores(_theta_values(theta), model.prepare(data.x), data.y))
    return dm.hard_quantile_threshold(s, alpha_hat)


# --- randomized predictor ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class CalibratedPredictor:
    """Pre-sampled (theta, tau) pairs; each test input uses one uniformly drawn pair."""

    thetas: np.ndarray
    taus: np.ndarray
    model: ScoreModel
    alpha_hat: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        th = np.array(self.thetas, dtype=np.float64).reshape(len(self.taus), -1)
        ta = np.array(self.taus, dtype=np.float64)
        if th.shape[0] < 1:
            raise ValueError("a predictor needs at least one (theta, tau) pair")
        th.flags.writeable = False
        ta.flags.writeable = False
        object.__setattr__(self, "thetas", th)
        object.__setattr__(self, "taus", ta)

    @property
    def m(self) -> int:
        return len(self.taus)


def _calibrate_many(model: ScoreModel, thetas: np.ndarray, data: Dataset, alpha_hat: float) -> np.ndarray:
    feats = model.prepare(data.x)
    s = np.asarray(model.scores(thetas, feats, data.y)).reshape(len(thetas), -1)
    return np.array([dm.hard_quantile_threshold(row, alpha_hat) for row in s])


def build_randomized_predictor(q: DiagGaussian, model: ScoreModel, data: Dataset, alpha_hat: float,
                               m: int = 10, rng_seed=0, meta: dict | None = None) -> CalibratedPredictor:
    """Draw ``m`` parameter samples from ``q`` and calibrate each on ``data``."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if len(data) == 0:
        raise ValueError("calibration data is empty")
    noise = np.random.default_rng(rng_seed).standard_normal((m, q.layout.size))
    thetas = np.asarray(dm.reparam_sample(q.mu.values, q.log_sigma.values, noise))
    taus = _calibrate_many(model, thetas, data, alpha_hat)
    return CalibratedPredictor(thetas, taus, model, alpha_hat, dict(meta or {}))


def point_predictor(model: ScoreModel, theta, data: Dataset, alpha_hat: float,
                    meta: dict | None = None) -> CalibratedPredictor:
    t = _theta_values(theta)
    tau = calibrate(model, t, data, alpha_hat)
    return CalibratedPredictor(t[None], np.array([tau]), model, alpha_hat, dict(meta or {}))


@dataclass(frozen=True)
class EvalMetrics:
    coverage_rate: float
    mean_efficiency: float
    n_test: int


_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def pair_assignment(seed: int, n: int, m: int) -> np.ndarray:
    """Pair index for each test point, a pure function of (seed, point index)."""
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
    with np.errstate(over="ignore"):
        h = _splitmix64(key + np.arange(n, dtype=np.uint64))
    return (h % np.uint64(m)).astype(np.int64)


def _pair_outcomes(pred: CalibratedPredictor, feats, y, j: int):
    """Coverage indicators and efficiencies of pair ``j`` on prepared inputs."""
    model, theta, tau = pred.model, pred.thetas[j], pred.taus[j]
    if model.kind == CLASSIFICATION:
        ls = np.asarray(model.label_scores(theta, feats))
        mask = ls <= tau
        covered = mask[np.arange(len(y)), np.asarray(y, dtype=np.int64)]
        return covered, mask.sum(axis=1).astype(np.float64)
    s = np.asarray(model.scores(theta, feats, y))
    covered = s <= tau
    if math.isinf(tau):
        return covered, np.full(len(y), math.inf)
    width = 2.0 * tau * np.asarray(model.radius(theta, feats))
    return covered, width


def evaluate(pred: CalibratedPredictor, test: Dataset, rng_seed=0) -> EvalMetrics:
    """Coverage rate and mean efficiency (set size or interval width) on ``test``."""
    if len(test) == 0:
        raise ValueError("test data is empty")
    feats = pred.model.prepare(test.x)
    assign = pair_assignment(int(rng_seed), len(test), pred.m)
    covered = np.zeros(len(test), dtype=bool)
    eff = np.zeros(len(test))
    for j in np.unique(assign):
        sel = assign == j
        c, e = _pair_outcomes(pred, feats[sel], test.y[sel], int(j))
        covered[sel] = c
        eff[sel] = e
    return EvalMetrics(float(covered.mean()), float(eff.mean()), len(test))


def pair_metrics(pred: CalibratedPredictor, test: Dataset, chunk: int = 20000):
    """Per-pair coverage rates and mean efficiencies over the whole test set."""
    cov = np.zeros(pred.m)
    eff = np.zeros(pred.m)
    for start in range(0, len(test), chunk):
        part = test.subset(slice(start, start + chunk))
        feats = pred.model.prepare(part.x)
        for j in range(pred.m):
            c, e = _pair_outcomes(pred, feats, part.y, j)
            cov[j] += c.sum()
            eff[j] += e.sum()
    return cov / len(test), eff / len(test)


# --- persistence ------------------------------------------------------------

def save_predictor(path: Union[str, Path], pred: CalibratedPredictor) -> Path:
    path = Path(path)
    model = pred.model
    header = {
        "format": PREDICTOR_FORMAT,
        "version": PREDICTOR_VERSION,
        "model": model.to_dict(),
        "theta_layout": model.layout.to_list(),
        "base_layout": None if model.base_params is None else model.base_params.layout.to_list(),
        "alpha_hat": pred.alpha_hat,
        "meta": pred.meta,
    }
    arrays = {"thetas": pred.thetas, "taus": pred.taus}
    if model.base_params is not None:
        arrays["base_params"] = model.base_params.values
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    tmp.replace(path)
    return path


def load_predictor(path: Union[str, Path]) -> CalibratedPredictor:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != PREDICTOR_FORMAT:
            raise ValueError(f"{path} is not a saved predictor")
        if header.get("version") != PREDICTOR_VERSION:
            raise ValueError(f"unsupported predictor version {header.get('version')}")
        md = header["model"]
        base_arch = None if md["base_arch"] is None else MLPArch.from_dict(md["base_arch"])
        base = None
        if base_arch is not None:
            base = ParamVector(z["base_params"], ParamLayout.from_list(header["base_layout"]))
        aux = None if md["aux_arch"] is None else MLPArch.from_dict(md["aux_arch"])
        model = ScoreModel(md["kind"], base_arch, base, aux)
        if model.layout.to_list() != header["theta_layout"]:
            raise ValueError("stored parameter layout does not match the architecture")
        return CalibratedPredictor(z["thetas"], z["taus"], model, header["alpha_hat"], header["meta"])
