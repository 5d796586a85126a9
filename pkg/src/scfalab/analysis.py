"""Fitting theoretical forms to simulation output, and closed-form bounds."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import models
from .data import gradient_divergence
from .errors import ConfigError
from .rng import stream

ZONES = ("Safe", "Warning", "Danger", "Critical")
ZONE_EDGES = (0.05, 0.10, 0.18)


@dataclass
class FitResult:
    ok: bool
    params: dict = field(default_factory=dict)
    r_squared: float = math.nan
    ci95: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "params": self.params,
            "r_squared": self.r_squared,
            "ci95": {k: list(v) for k, v in self.ci95.items()},
            "residuals": self.residuals,
            "message": self.message,
        }


@dataclass
class TheoryParams:
    L: float = math.nan
    sigma_sq: float = math.nan
    D: float = math.nan
    L_c: float = math.nan
    gamma: float = math.nan
    F0_gap: float = math.nan
    eta: float = math.nan
    E: int = 1
    K: int = 1
    T: int = 1
    delta_max: float = math.nan
    eps_opt: float = math.nan
    missing: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class OperationalZone:
    zone: str
    rho: float


def r_squared(y, fitted) -> float:
    y = np.asarray(y, dtype=float)
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -math.inf
    return 1.0 - ss_res / ss_tot


def levenberg_marquardt(residual, jacobian, x0, tol=1e-10, max_iter=200, damping=1e-3):
    """Minimise ||residual(x)||^2 with an adaptive damped Gauss-Newton step.

    Stops once the parameter step is below ``tol`` (scaled by |x| + tol).
    """
    x = np.asarray(x0, dtype=float).copy()
    r = residual(x)
    cost = float(r @ r)
    lam = damping
    for _ in range(max_iter):
        J = jacobian(x)
        A = J.T @ J
        g = J.T @ r
        step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), -g)
        trial = x + step
        r_trial = residual(trial)
        cost_trial = float(r_trial @ r_trial)
        if cost_trial <= cost:
            x, r, cost = trial, r_trial, cost_trial
            lam = max(lam / 10.0, 1e-15)
            if np.linalg.norm(step) <= tol * (np.linalg.norm(x) + tol):
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    return x


def _fit_rate_once(t, y, rho_bar):
    """(a, b) for y ~ a / sqrt(t) + b * rho_bar; b pinned to 0 if rho_bar == 0."""
    inv = 1.0 / np.sqrt(t)
    if rho_bar == 0.0:
        J = inv[:, None]
        a = levenberg_marquardt(lambda x: x[0] * inv - y, lambda x: J, [0.0])[0]
        return a, 0.0
    J = np.column_stack([inv, np.full_like(inv, rho_bar)])
    a, b = levenberg_marquardt(lambda x: J @ x - y, lambda x: J, [0.0, 0.0])
    return a, b


def fit_convergence_rate(grad_sq, rho_series, n_boot: int = 1000, seed: int = 0, t=None) -> FitResult:
    """Fit ||grad F(w_t)||^2 ~ a / sqrt(t) + b * rho over rounds t = 1..T.

    ``rho`` is the mean of the per-round violation rates.  Confidence
    intervals come from a percentile bootstrap over rounds.
    """
    y = np.asarray(grad_sq, dtype=float)
    rho = np.asarray(rho_series, dtype=float)
    if len(y) < 5:
        raise ConfigError("need at least 5 rounds to fit a convergence rate")
    if rho.shape != y.shape:
        raise ConfigError("gradient and rho series must have equal length")
    t = np.arange(1, len(y) + 1, dtype=float) if t is None else np.asarray(t, dtype=float)
    if np.all(y == y[0]):
        return FitResult(False, message="constant gradient series; no fit")
    rho_bar = float(rho.mean())
    a, b = _fit_rate_once(t, y, rho_bar)
    fitted = a / np.sqrt(t) + b * rho_bar
    res = y - fitted
    rng = stream(seed, "bootstrap")
    boots = np.empty((n_boot, 2))
    for i in range(n_boot):
        idx = rng.integers(0, len(y), len(y))
        boots[i] = _fit_rate_once(t[idx], y[idx], float(rho[idx].mean()))
    ci = {}
    if n_boot:
        for j, name in enumerate(("a", "b")):
            ci[name] = tuple(float(v) for v in np.percentile(boots[:, j], [2.5, 97.5]))
    return FitResult(
        True,
        {"a": float(a), "b": float(b), "rho": rho_bar},
        r_squared(y, fitted),
        ci,
        {"rmse": float(np.sqrt(np.mean(res**2))), "max_abs": float(np.abs(res).max())},
    )


def theorem1_terms(p: TheoryParams, rho: float) -> tuple[float, float, float, float]:
    if p.eta > 1.0 / (p.L * p.E):
        warnings.warn(f"learning rate {p.eta} exceeds 1/(L E) = {1.0 / (p.L * p.E):.4g}", stacklevel=3)
    return (
        2.0 * p.F0_gap / (p.eta * p.T),
        2.0 * p.L * p.eta * p.E**2 * p.sigma_sq / p.K,
        2.0 * p.L**2 * p.eta**2 * p.E**2 * p.D**2,
        rho * p.L_c * p.D,
    )


def theorem1_bound(p: TheoryParams, rho: float) -> float:
    """Upper bound on min_t E||grad F||^2: optimisation, variance, drift and
    violation-penalty terms."""
    return float(sum(theorem1_terms(p, rho)))


def corollary1_speedup(p: TheoryParams, rho: float) -> tuple[bool, float]:
    """(condition holds, speedup lower bound gamma D / (L_c rho))."""
    if not rho > 0:
        raise ConfigError("rho must be > 0")
    applies = rho < p.gamma * p.D / (p.L_c * math.sqrt(p.T))
    return bool(applies), p.gamma * p.D / (p.L_c * rho)


def proposition1_fit(points, threshold: float | None = None, f_star: float | None = None) -> FitResult:
    """OLS of metric on rho: intercept = F* - eps_opt, slope = -Delta_max.

    Points with rho >= ``threshold`` are excluded.  When ``f_star`` (e.g.
    the centralized metric) is given, eps_opt is split out of the intercept.
    """
    pts = np.asarray(list(points), dtype=float).reshape(-1, 2)
    if threshold is not None:
        pts = pts[pts[:, 0] < threshold]
    if len(pts) < 4 or len(np.unique(pts[:, 0])) < 4:
        return FitResult(False, message="need at least 4 distinct rho values")
    x, y = pts[:, 0], pts[:, 1]
    if np.all(y == y[0]):
        slope, intercept, se_s, se_i = 0.0, float(y[0]), 0.0, 0.0
    else:
        lr = stats.linregress(x, y)
        slope, intercept, se_s, se_i = lr.slope, lr.intercept, lr.stderr, lr.intercept_stderr
    q = stats.t.ppf(0.975, len(x) - 2)
    fitted = intercept + slope * x
    params = {"intercept": float(intercept), "slope": float(slope), "delta_max": float(-slope)}
    if f_star is not None:
        params["f_star"] = float(f_star)
        params["eps_opt"] = float(f_star - intercept)
    res = y - fitted
    return FitResult(
        True,
        params,
        r_squared(y, fitted),
        {"intercept": (intercept - q * se_i, intercept + q * se_i), "slope": (slope - q * se_s, slope + q * se_s)},
        {"rmse": float(np.sqrt(np.mean(res**2))), "max_abs": float(np.abs(res).max()), "n": int(len(x))},
    )


def classify_zone(rho: float) -> OperationalZone:
    """Safe < 0.05 <= Warning < 0.10 <= Danger < 0.18 <= Critical."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho {rho} outside [0, 1]")
    for name, edge in zip(ZONES, ZONE_EDGES):
        if rho < edge:
            return OperationalZone(name, rho)
    return OperationalZone("Critical", rho)


def utility_loss(private_metric: float, nonprivate_metric: float) -> float:
    """Percent of the non-private metric lost under privacy."""
    if not nonprivate_metric > 0:
        raise ConfigError("non-private metric must be > 0")
    return 100.0 * (nonprivate_metric - private_metric) / nonprivate_metric


def rounds_to_convergence(metric_series, fraction: float = 0.9) -> int | None:
    """First 1-based round whose metric reaches ``fraction`` of the final one."""
    m = np.asarray(metric_series, dtype=float)
    if len(m) == 0:
        return None
    hit = np.flatnonzero(m >= fraction * m[-1])
    return int(hit[0]) + 1


# ------------------------------------------------------ parameter estimates


def power_iteration(matvec, d: int, iters: int = 500, tol: float = 1e-12, seed: int = 0) -> float:
    v = stream(seed, "power").normal(size=d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        lam_new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return lam


def smoothness_constant(spec: models.ModelSpec, params, X, y) -> float:
    """Top Hessian eigenvalue of the mean loss at ``params``."""
    return power_iteration(lambda v: models.hessian_vector(spec, params, X, y, v), spec.num_params)


def gradient_variance(spec, params, X, y, batch_size: int, draws: int = 50, seed: int = 0) -> float:
    """E ||g_batch - g_full||^2 over random minibatches (0 for full batches)."""
    n = len(y)
    if batch_size >= n:
        return 0.0
    full = models.gradient(spec, params, X, y)
    rng = stream(seed, "variance")
    acc = 0.0
    for _ in range(draws):
        idx = rng.choice(n, batch_size, replace=False)
        diff = models.gradient(spec, params, X[idx], y[idx]) - full
        acc += float(diff @ diff)
    return acc / draws


def estimate_theory_params(fed, constrained, unconstrained, cfg) -> TheoryParams:
    """Empirical stand-ins for the constants appearing in the rate bound.

    ``constrained`` / ``unconstrained`` are :class:`RunResult` objects of the
    constraint-weighted and plain runs (either may be None).
    """
    spec = fed.spec
    X = np.vstack([c.X for c in fed.clients])
    y = np.concatenate([c.y for c in fed.clients])
    p = TheoryParams(eta=cfg.learning_rate, E=cfg.local_epochs, K=fed.K, T=cfg.rounds)
    ref = unconstrained if unconstrained is not None else constrained
    if ref is None:
        p.missing = ["L", "sigma_sq", "D", "gamma", "L_c", "F0_gap"]
        return p
    w = ref.final_params
    p.L = smoothness_constant(spec, w, X, y)
    p.sigma_sq = gradient_variance(spec, w, X, y, cfg.batch_size)
    d_u = gradient_divergence(spec, unconstrained.final_params, fed.clients) if unconstrained else math.nan
    d_c = gradient_divergence(spec, constrained.final_params, fed.clients) if constrained else math.nan
    p.D = d_u if unconstrained else d_c
    if constrained is None or unconstrained is None or d_u == 0:
        p.missing.append("gamma")
    else:
        gamma = 1.0 - (d_c / d_u) ** 2
        if gamma < 0:
            p.missing.append("gamma (constrained divergence exceeded baseline; clamped to 0)")
        p.gamma = min(max(gamma, 0.0), 1.0 - 1e-12)
    w0 = spec.init_params(stream(cfg.master_seed, "init"))
    losses = [r.global_loss for r in ref.records]
    f0 = models.global_objective(spec, w0, fed.clients)
    p.F0_gap = max(f0 - min(losses + [f0]), 0.0)
    if constrained is None:
        p.missing.append("L_c")
        return p
    rho = constrained.series("rho")
    g = constrained.series("grad_norm_sq")
    if len(g) < 5 or not np.any(rho > 0) or not np.isfinite(d_c):
        p.missing.append("L_c")
        return p
    fit = fit_convergence_rate(g, np.zeros_like(g), n_boot=0)
    if not fit.ok:
        p.missing.append("L_c")
        return p
    t = np.arange(1, len(g) + 1)
    resid = g - fit.params["a"] / np.sqrt(t)
    x = rho * d_c
    p.L_c = max(float(x @ resid / (x @ x)), 0.0)
    return p
