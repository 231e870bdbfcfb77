"""KL-constrained posterior optimization for learned conformal scores.

The posterior Q = N(mu, diag(sigma^2)) over score parameters is trained to
minimize a smoothed efficiency loss subject to KL(Q || P) staying inside the
budget that keeps test miscoverage certified at alpha.  The constraint is
handled with an augmented Lagrangian: inner rounds of stochastic descent on

    L_eff + lambda * c + rho / 2 * c^2,   c = KL(Q || P) - budget + s,   s >= 0,

followed by lambda <- max(0, lambda + rho * c).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import bounds
from . import diffmath as dm
from .conformal import (CLASSIFICATION, CalibratedPredictor, Dataset, ScoreModel,
                        build_randomized_predictor, point_predictor)
from .diffmath import DiagGaussian, Tape
from .optim import make_optimizer

log = logging.getLogger(__name__)

PRIOR_MODES = ("fixed", "tune_mean", "tune_mean_var")
EFF_LOSSES = ("log_radius", "log_u_tau", "soft_set_size")
BOUNDS = ("vovk2a", "vovk2b")


@dataclass(frozen=True)
class OptimConfig:
    alpha: float = 0.1
    delta: float = 0.05
    # fractions of the largest certifiable alpha_hat at the per-run delta
    alpha_hat_grid: tuple = (0.2, 0.35, 0.5, 0.65, 0.8)
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
    data_split: float = 0.5
    n_pairs: int = 10
    eff_loss: str = "log_radius"
    eval_theta_samples: int = 8
    restore_feasibility: bool = True
    efficiency_scale: float = 4.0
    cert_beta: float = 0.0  # 0 selects the largest calibration score
    log_every: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0 or not 0.0 < self.delta < 1.0:
            raise ValueError("alpha and delta must lie in (0, 1)")
        object.__setattr__(self, "alpha_hat_grid", tuple(float(a) for a in self.alpha_hat_grid))
        if not self.alpha_hat_grid or any(not 0.0 < a <= 1.0 for a in self.alpha_hat_grid):
            raise ValueError("alpha_hat_grid entries must lie in (0, 1]")
        for name in ("inner_steps", "outer_iterations", "prior_steps", "learned_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("minibatch_size", "theta_samples", "n_pairs", "eval_theta_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("learning_rate", "rho_init", "set_size_temperature",
                     "soft_sort_temperature", "prior_var_scale", "efficiency_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cert_beta < 0:
            raise ValueError("cert_beta must be nonnegative")
        if self.rho_growth < 1.0:
            raise ValueError("rho_growth must be at least 1")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.eff_loss not in EFF_LOSSES:
            raise ValueError(f"eff_loss must be one of {EFF_LOSSES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if not 0.0 <= self.data_split < 1.0:
            raise ValueError("data_split must lie in [0, 1)")

    @property
    def run_delta(self) -> float:
        """Failure probability of each grid run (union bound over the grid)."""
        return self.delta / len(self.alpha_hat_grid)


# --- priors -----------------------------------------------------------------

def initial_prior(model: ScoreModel, mean: np.ndarray, var_scale: float) -> DiagGaussian:
    """N(mean, var_scale / sqrt(fan_in)) per coordinate."""
    var = var_scale / np.sqrt(model.fan_in())
    return DiagGaussian.from_arrays(mean, 0.5 * np.log(var), model.layout)


# --- loss -------------------------------------------------------------------

def soft_quantile_level(alpha_hat: float, j: int) -> float:
    """ceil((J+1)(1-alpha_hat))/J, the minibatch analogue of the calibration rank."""
    return bounds.ceil_count((j + 1) * (1.0 - alpha_hat)) / j


def efficiency_terms(model: ScoreModel, theta, feats, tau, cfg: OptimConfig):
    """Per-point smoothed efficiency, shape (K, J), for thresholds ``tau`` of shape (K,)."""
    tau_col = dm.reshape(tau, (dm._val(tau).shape[0], 1))
    if model.kind == CLASSIFICATION:
        ls = model.label_scores(theta, feats)
        t3 = dm.reshape(tau, (dm._val(tau).shape[0], 1, 1))
        return dm.soft_set_size(ls, t3, cfg.set_size_temperature)
    if cfg.eff_loss == "log_u_tau":
        ff = dm.forward_mlp(theta, model.aux_arch, feats[:, 1:2])
        ff = dm.reshape(ff, dm._val(ff).shape[:-1])
        width = dm.softplus(dm.add(ff, 0.6))
    else:
        width = model.radius(theta, feats)
    return dm.add(dm.log(width), dm.log(tau_col))


def differentiable_loss(mu, log_sigma, model: ScoreModel, feats, y, alpha_hat: float,
                        cfg: OptimConfig, noise: np.ndarray):
    """Mean smoothed efficiency over J points and K parameter samples.

    ``noise`` holds the K standard-normal draws, shape (K, d).  Each sample's
    threshold is the soft quantile of its J scores.
    """
    j = len(y)
    if j < 2:
        raise ValueError("minibatch needs at least two points")
    theta = dm.reparam_sample(mu, log_sigma, noise)
    s = model.scores(theta, feats, y)
    tau = dm.soft_quantile(s, soft_quantile_level(alpha_hat, j), cfg.soft_sort_temperature)
    return dm.mean(efficiency_terms(model, theta, feats, tau, cfg))


def hard_loss(q: DiagGaussian, model: ScoreModel, feats, y, alpha_hat: float,
              cfg: OptimConfig, noise: np.ndarray) -> float:
    """Efficiency loss with exact calibration thresholds over the whole set."""
    theta = np.asarray(dm.reparam_sample(q.mu.values, q.log_sigma.values, noise))
    s = np.asarray(model.scores(theta, feats, y))
    tau = np.array([dm.hard_quantile_threshold(row, alpha_hat) for row in s])
    if not np.all(np.isfinite(tau)):
        return math.inf
    return float(np.mean(np.asarray(efficiency_terms(model, theta, feats, tau, cfg))))


# --- optimization -----------------------------------------------------------

@dataclass
class AugLagState:
    lam: float = 0.0
    rho: float = 1.0
    slack: float = 0.0


@dataclass(frozen=True, eq=False)
class PosteriorResult:
    posterior: DiagGaussian
    prior: DiagGaussian
    alpha_hat: float
    budget: float
    kl: float
    eval_loss: float
    feasible: bool
    source: str  # "prior", "iterate" or "restored"
    curve: list = field(default_factory=list)


def _minibatches(rng: np.random.Generator, n: int, size: int):
    size = min(size, n)
    while True:
        yield rng.choice(n, size=size, replace=False)


def _descend(step_fn, params: list, steps: int, cfg: OptimConfig, clamp=None):
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    for _ in range(steps):
        grads = step_fn(params)
        params = opt.step(params, grads)
        if clamp is not None:
            params = clamp(params)
    return params


def tune_prior(init: DiagGaussian, model: ScoreModel, data: Dataset, cfg: OptimConfig,
               alpha_hat: float, rng: np.random.Generator) -> DiagGaussian:
    """Unconstrained descent of the efficiency loss on held-out tuning data."""
    if cfg.prior_mode == "fixed" or cfg.prior_steps == 0:
        return init
    if len(data) < 2:
        raise ValueError("prior tuning needs at least two points")
    feats = model.prepare(data.x)
    batches = _minibatches(rng, len(data), cfg.minibatch_size)
    tune_var = cfg.prior_mode == "tune_mean_var"
    ls0 = init.log_sigma.values

    def step(params):
        idx = next(batches)
        noise = rng.standard_normal((cfg.theta_samples, init.layout.size))
        tape = Tape()
        mu = tape.variable(params[0])
        ls = tape.variable(params[1]) if tune_var else ls0
        loss = differentiable_loss(mu, ls, model, feats[idx], data.y[idx], alpha_hat, cfg, noise)
        wrt = [mu, ls] if tune_var else [mu]
        return tape.backward(loss, wrt)

    start = [init.mu.values.copy(), ls0.copy()] if tune_var else [init.mu.values.copy()]
    out = _descend(step, start, cfg.prior_steps, cfg)
    return DiagGaussian.from_arrays(out[0], out[1] if tune_var else ls0, init.layout)


def _interpolate(p: DiagGaussian, q_mu, q_ls, t: float) -> DiagGaussian:
    mu = p.mu.values + t * (q_mu - p.mu.values)
    ls = p.log_sigma.values + t * (q_ls - p.log_sigma.values)
    return DiagGaussian.from_arrays(mu, ls, p.layout)


def restore_feasibility(prior: DiagGaussian, mu, log_sigma, budget: float, iters: int = 60) -> DiagGaussian:
    """Largest step from the prior toward (mu, log_sigma) whose KL fits the budget."""
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if dm.kl_between(_interpolate(prior, mu, log_sigma, mid), prior) <= budget:
            lo = mid
        else:
            hi = mid
    return _interpolate(prior, mu, log_sigma, lo)


def optimize_posterior(prior: DiagGaussian, model: ScoreModel, data: Dataset, cfg: OptimConfig,
                       alpha_hat: float, rng: np.random.Generator, delta: float | None = None,
                       budget: float | None = None) -> PosteriorResult:
    """Minimize the efficiency loss over Q subject to KL(Q || P) <= budget.

    Returns the feasible candidate with the lowest hard-threshold loss on all
    of ``data``; the prior itself is always a candidate.  ``budget`` defaults
    to the KL budget at (alpha, alpha_hat, delta, |data|).
    """
    n = len(data)
    delta = cfg.delta if delta is None else delta
    if budget is None:
        budget = bounds.kl_budget(cfg.alpha, alpha_hat, delta, n)
    feats = model.prepare(data.x)
    eval_noise = rng.standard_normal((cfg.eval_theta_samples, prior.layout.size))

    def evaluate(q):
        return hard_loss(q, model, feats, data.y, alpha_hat, cfg, eval_noise)

    best = PosteriorResult(prior, prior, alpha_hat, budget, 0.0, evaluate(prior), True, "prior")
    if budget <= 0.0:
        return best

    constrained = math.isfinite(budget)
    mu_p, ls_p = prior.mu.values, prior.log_sigma.values
    state = AugLagState(rho=cfg.rho_init, slack=budget if constrained else 0.0)
    batches = _minibatches(rng, n, cfg.minibatch_size)
    curve = []
    params = [mu_p.copy(), ls_p.copy(), np.array(state.slack)]
    total = 0

    def clamp(ps):
        return [ps[0], ps[1], np.maximum(ps[2], 0.0)]

    for outer in range(cfg.outer_iterations):
        def step(ps):
            nonlocal total
            idx = next(batches)
            noise = rng.standard_normal((cfg.theta_samples, prior.layout.size))
            tape = Tape()
            mu, ls, s = (tape.variable(p) for p in ps)
            loss = differentiable_loss(mu, ls, model, feats[idx], data.y[idx], alpha_hat, cfg, noise)
            obj = loss
            if constrained:
                c = dm.add(dm.sub(dm.gaussian_kl(mu, ls, mu_p, ls_p), budget), s)
                obj = dm.add(obj, dm.add(dm.mul(c, state.lam), dm.mul(dm.square(c), 0.5 * state.rho)))
            total += 1
            if cfg.log_every and total % cfg.log_every == 0:
                kl = float(dm.gaussian_kl(ps[0], ps[1], mu_p, ls_p))
                curve.append({"outer": outer, "step": total, "loss": float(loss.value), "kl": kl,
                              "lambda": state.lam, "rho": state.rho, "slack": float(ps[2])})
            return tape.backward(obj, [mu, ls, s])

        params = _descend(step, params, cfg.inner_steps, cfg, clamp)
        q = DiagGaussian.from_arrays(params[0], params[1], prior.layout)
        kl = dm.kl_between(q, prior)
        if kl <= budget:
            loss = evaluate(q)
            if loss < best.eval_loss:
                best = PosteriorResult(q, prior, alpha_hat, budget, kl, loss, True, "iterate")
        elif constrained and cfg.restore_feasibility:
            r = restore_feasibility(prior, params[0], params[1], budget)
            loss = evaluate(r)
            if loss < best.eval_loss:
                best = PosteriorResult(r, prior, alpha_hat, budget, dm.kl_between(r, prior), loss, True, "restored")
        if constrained:
            c = kl - budget + float(params[2])
            state.lam = max(0.0, state.lam + state.rho * c)
            if kl > budget:
                state.rho *= cfg.rho_growth
        curve.append({"outer": outer, "step": total, "loss": math.nan, "kl": kl,
                      "lambda": state.lam, "rho": state.rho, "slack": float(params[2])})
        log.debug("outer %d: kl=%.4g budget=%.4g lambda=%.4g rho=%.4g", outer, kl, budget, state.lam, state.rho)

    return replace(best, curve=curve)


# --- baselines --------------------------------------------------------------

def bound_alpha_hat(bound: str, alpha: float, delta: float, n: int) -> float:
    if bound == "vovk2a":
        return bounds.vovk_2a_alpha_hat(alpha, delta, n)
    if bound == "vovk2b":
        return bounds.vovk_2b_alpha_hat(alpha, delta, n)
    raise ValueError(f"bound must be one of {BOUNDS}")


def split_data(data: Dataset, split: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Random (D_0, D_N) split with round(split * n) tuning points."""
    n0 = int(round(split * len(data)))
    perm = rng.permutation(len(data))
    return data.subset(np.sort(perm[:n0])), data.subset(np.sort(perm[n0:]))


def fit_point(theta0: np.ndarray, model: ScoreModel, data: Dataset, cfg: OptimConfig,
              alpha_hat: float, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Deterministic-theta descent of the efficiency loss (sigma = 0)."""
    if steps == 0 or len(data) < 2 or model.n_params == 0:
        return np.array(theta0, dtype=np.float64)
    feats = model.prepare(data.x)
    batches = _minibatches(rng, len(data), cfg.minibatch_size)
    zero_ls = np.full(model.n_params, -np.inf)
    noise = np.zeros((1, model.n_params))

    def step(params):
        idx = next(batches)
        tape = Tape()
        th = tape.variable(params[0])
        loss = differentiable_loss(th, zero_ls, model, feats[idx], data.y[idx], alpha_hat, cfg, noise)
        return tape.backward(loss, [th])

    return _descend(step, [np.array(theta0, dtype=np.float64)], steps, cfg)[0]


def learned_baseline(model: ScoreModel, theta0: np.ndarray, tune: Dataset, cal: Dataset,
                     cfg: OptimConfig, bound: str, rng: np.random.Generator,
                     steps: int | None = None) -> CalibratedPredictor:
    """Point estimate fitted on ``tune``, calibrated on ``cal`` at the bound's alpha_hat."""
    if len(cal) < 1:
        raise ValueError("calibration split is empty")
    alpha_hat = bound_alpha_hat(bound, cfg.alpha, cfg.delta, len(cal))
    steps = cfg.learned_steps if steps is None else steps
    theta = fit_point(theta0, model, tune, cfg, alpha_hat, steps, rng)
    meta = {"method": f"learned_{bound}", "alpha": cfg.alpha, "delta": cfg.delta,
            "n_cal": len(cal), "kl_qp": 0.0}
    return point_predictor(model, theta, cal, alpha_hat, meta)


def standard_baseline(model: ScoreModel, theta0: np.ndarray, cal: Dataset, cfg: OptimConfig,
                      bound: str) -> CalibratedPredictor:
    """Fixed score, every calibration point used for the threshold."""
    alpha_hat = bound_alpha_hat(bound, cfg.alpha, cfg.delta, len(cal))
    meta = {"method": "standard", "alpha": cfg.alpha, "delta": cfg.delta,
            "n_cal": len(cal), "kl_qp": 0.0}
    return point_predictor(model, theta0, cal, alpha_hat, meta)


# --- certificates and the alpha_hat grid ------------------------------------

def normalized_efficiency(pred: CalibratedPredictor, data: Dataset, cfg: OptimConfig):
    """Empirical efficiency in [0, 1] on ``data`` and the (beta, L_tau) pair of the bound.

    Classification: smoothed set size divided by the number of labels, whose
    Lipschitz constant in tau is 1/(4T).  Regression: interval width divided by
    ``efficiency_scale`` and clipped to 1, Lipschitz constant 2 max(radius) / scale.
    beta is the largest calibration score of any pair.
    """
    model = pred.model
    feats = model.prepare(data.x)
    s = np.asarray(model.scores(pred.thetas, feats, data.y))
    beta = float(np.max(s))
    if not np.all(np.isfinite(pred.taus)):
        return 1.0, beta, 1.0
    if model.kind == CLASSIFICATION:
        ls = np.asarray(model.label_scores(pred.thetas, feats))
        size = np.asarray(dm.soft_set_size(ls, pred.taus[:, None, None], cfg.set_size_temperature))
        return float(size.mean() / model.n_labels), beta, 1.0 / (4.0 * cfg.set_size_temperature)
    r = np.asarray(model.radius(pred.thetas, feats))
    width = 2.0 * pred.taus[:, None] * r
    emp = float(np.minimum(width / cfg.efficiency_scale, 1.0).mean())
    return emp, beta, 2.0 * float(r.max()) / cfg.efficiency_scale


def efficiency_certificate(pred: CalibratedPredictor, data: Dataset, kl_qp: float,
                           cfg: OptimConfig, gamma: float, beta: float | None = None) -> bounds.EfficiencyCertificate:
    emp, beta_hat, l_tau = normalized_efficiency(pred, data, cfg)
    if beta is None:
        beta = cfg.cert_beta or beta_hat
    return bounds.efficiency_upper_bound(emp, kl_qp, max(beta, 1e-12), l_tau, len(data), gamma)


@dataclass(frozen=True, eq=False)
class GridRun:
    fraction: float
    alpha_hat: float
    result: PosteriorResult | None
    predictor: CalibratedPredictor | None
    certificate: bounds.EfficiencyCertificate | None
    error: str = ""


@dataclass(frozen=True, eq=False)
class GridSearchResult:
    predictor: CalibratedPredictor
    posterior: DiagGaussian | None
    alpha_hat: float
    certificate: bounds.EfficiencyCertificate | None
    runs: list
    fallback: bool


def grid_alpha_hats(cfg: OptimConfig, n: int) -> list:
    """Grid fractions scaled by the largest alpha_hat with a nonnegative budget at delta/|grid|."""
    top = bounds.max_certified_alpha_hat(cfg.alpha, cfg.run_delta, n)
    return [f * top for f in cfg.alpha_hat_grid]


def pacbayes_run(prior_init: DiagGaussian, model: ScoreModel, tune: Dataset, cal: Dataset,
                 cfg: OptimConfig, alpha_hat: float, delta: float, rng: np.random.Generator,
                 pair_seed: int) -> tuple[PosteriorResult, CalibratedPredictor]:
    prior = tune_prior(prior_init, model, tune, cfg, alpha_hat, rng) if len(tune) >= 2 else prior_init
    res = optimize_posterior(prior, model, cal, cfg, alpha_hat, rng, delta=delta)
    meta = {"method": "pacbayes", "alpha": cfg.alpha, "delta": delta, "n_cal": len(cal),
            "kl_qp": res.kl, "kl_budget": res.budget, "source": res.source}
    pred = build_randomized_predictor(res.posterior, model, cal, alpha_hat, cfg.n_pairs, pair_seed, meta)
    return res, pred


def alpha_hat_grid_search(prior_init: DiagGaussian, model: ScoreModel, tune: Dataset, cal: Dataset,
                          cfg: OptimConfig, rng: np.random.Generator, pair_seed: int = 0,
                          fallback_theta: np.ndarray | None = None) -> GridSearchResult:
    """One PAC-Bayes run per grid level at delta/|grid|; keep the best efficiency certificate."""
    delta = cfg.run_delta
    runs = []
    try:
        levels = grid_alpha_hats(cfg, len(cal))
    except bounds.InfeasibleGuarantee as exc:
        levels, err = [], str(exc)
    else:
        err = ""
    done = []
    for frac, ah in zip(cfg.alpha_hat_grid, levels):
        try:
            res, pred = pacbayes_run(prior_init, model, tune, cal, cfg, ah, delta, rng, pair_seed)
        except bounds.InfeasibleGuarantee as exc:
            runs.append(GridRun(frac, ah, None, None, None, str(exc)))
            continue
        done.append((frac, ah, res, pred, normalized_efficiency(pred, cal, cfg)))
    # one score bound for the whole grid so that the Lipschitz term does not
    # decide between runs
    beta = cfg.cert_beta or max((eff[1] for *_, eff in done), default=1.0)
    for frac, ah, res, pred, (emp, _, l_tau) in done:
        cert = bounds.efficiency_upper_bound(emp, res.kl, max(beta, 1e-12), l_tau, len(cal), delta)
        runs.append(GridRun(frac, ah, res, pred, cert))
    runs.sort(key=lambda r: r.fraction)
    ok = [r for r in runs if r.predictor is not None]
    if not ok:
        log.warning("every grid run is infeasible (%s); falling back to standard ICP", err or "no level")
        theta = prior_init.mu.values if fallback_theta is None else fallback_theta
        pred = standard_baseline(model, theta, cal, cfg, "vovk2a")
        return GridSearchResult(pred, None, pred.alpha_hat, None, runs, True)
    win = min(ok, key=lambda r: r.certificate.upper_bound)
    return GridSearchResult(win.predictor, win.result.posterior, win.alpha_hat, win.certificate, runs, False)
