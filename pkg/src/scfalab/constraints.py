"""Prediction-level validity predicates over a model's parameters.

A constraint owns a small matrix of probe inputs.  It is evaluated by
running the model on those probes and checking a family-specific rule:

``temporal-monotonicity``
    predictions along the probe order never drop by more than ``tolerance``.
``capacity-bound``
    every prediction lies in ``[lower - tol, upper + tol]``; a missing bound
    (``None``) is unbounded on that side.
``causal-precedence``
    ``pred[antecedent] > pred[consequent] - tolerance``.
``physical-feasibility``
    ``|sum_i coefficients[i] * pred[i] - target| <= tolerance``.

Constraint sets are stored as JSON Lines, one constraint per line::

    {"id": 0, "family": "capacity-bound", "probes": [[...], ...],
     "params": {"lower": 0.0, "upper": 0.6}, "tolerance": 1e-06}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .errors import CalibrationError, ConfigError
from .rng import stream

FAMILIES = (
    "temporal-monotonicity",
    "causal-precedence",
    "capacity-bound",
    "physical-feasibility",
)

DEFAULT_TOLERANCE = {
    "temporal-monotonicity": 0.0,
    "causal-precedence": 0.0,
    "capacity-bound": 1e-6,
    "physical-feasibility": 1e-6,
}


@dataclass
class Constraint:
    id: int
    family: str
    probes: np.ndarray
    params: dict = field(default_factory=dict)
    tolerance: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown constraint family {self.family!r}", f"constraints[{self.id}].family")
        self.probes = np.atleast_2d(np.asarray(self.probes, dtype=float))
        if self.probes.shape[0] == 0:
            raise ConfigError("needs at least one probe", f"constraints[{self.id}].probes")
        if self.tolerance is None:
            self.tolerance = DEFAULT_TOLERANCE[self.family]
        if self.tolerance < 0:
            raise ConfigError("must be >= 0", f"constraints[{self.id}].tolerance")
        m = self.probes.shape[0]
        p = self.params
        if self.family == "capacity-bound":
            lo, hi = p.get("lower"), p.get("upper")
            if lo is not None and hi is not None and lo > hi:
                raise ConfigError("lower > upper", f"constraints[{self.id}].params")
        elif self.family == "causal-precedence":
            for key in ("antecedent", "consequent"):
                if not 0 <= int(p.get(key, -1)) < m:
                    raise ConfigError(f"{key} must index a probe", f"constraints[{self.id}].params.{key}")
        elif self.family == "physical-feasibility":
            if len(p.get("coefficients", ())) != m or "target" not in p:
                raise ConfigError("needs one coefficient per probe and a target", f"constraints[{self.id}].params")

    def to_record(self) -> dict:
        return {
            "id": int(self.id),
            "family": self.family,
            "probes": self.probes.tolist(),
            "params": self.params,
            "tolerance": float(self.tolerance),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Constraint":
        return cls(int(rec["id"]), rec["family"], rec["probes"], dict(rec.get("params", {})), rec.get("tolerance"))


@dataclass
class ConstraintSet:
    constraints: list[Constraint] = field(default_factory=list)

    def __post_init__(self):
        ids = [c.id for c in self.constraints]
        if len(set(ids)) != len(ids):
            raise ConfigError("constraint ids must be unique", "constraints")

    @property
    def M(self) -> int:
        return len(self.constraints)

    def __len__(self):
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    def families(self, names) -> "ConstraintSet":
        """Sub-set restricted to the given families (for ablations)."""
        names = set(names)
        return ConstraintSet([c for c in self.constraints if c.family in names])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for c in self.constraints:
                fh.write(json.dumps(c.to_record()) + "\n")

    @classmethod
    def load(cls, path) -> "ConstraintSet":
        out = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                out.append(Constraint.from_record(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ConfigError(f"bad record: {exc}", f"{path}:{lineno}") from exc
        return cls(out)


@dataclass
class ValidityReport:
    client_id: int
    bits: np.ndarray
    score: float


@dataclass
class HypothesisSpaceEstimate:
    theta: float
    num_samples: int
    ci: tuple[float, float]
    box: tuple[list[float], list[float]]
    no_valid_samples: bool = False


def _batch_predictions(spec: models.ModelSpec, P: np.ndarray, probes: np.ndarray) -> np.ndarray:
    """Predictions of many parameter vectors (rows of P) on the probes, shape (S, m)."""
    if probes.shape[1] != spec.input_dim:
        raise ConfigError(f"probe width {probes.shape[1]} != model input_dim {spec.input_dim}")
    if spec.kind == "mlp-1-hidden":
        return np.array([models.predict(spec, w, probes) for w in P])
    z = P[:, :-1] @ probes.T + P[:, -1:]
    return models.sigmoid(z) if spec.is_classifier else z


def _rule_holds(c: Constraint, pred: np.ndarray) -> np.ndarray:
    tol = c.tolerance
    p = c.params
    if c.family == "temporal-monotonicity":
        if pred.shape[1] < 2:
            return np.ones(len(pred), dtype=bool)
        return np.all(np.diff(pred, axis=1) >= -tol, axis=1)
    if c.family == "capacity-bound":
        ok = np.ones(len(pred), dtype=bool)
        if p.get("lower") is not None:
            ok &= np.all(pred >= p["lower"] - tol, axis=1)
        if p.get("upper") is not None:
            ok &= np.all(pred <= p["upper"] + tol, axis=1)
        return ok
    if c.family == "causal-precedence":
        return pred[:, int(p["antecedent"])] > pred[:, int(p["consequent"])] - tol
    combo = pred @ np.asarray(p["coefficients"], dtype=float)
    return np.abs(combo - p["target"]) <= tol


def satisfied_matrix(cset: ConstraintSet, spec: models.ModelSpec, P: np.ndarray) -> np.ndarray:
    """Boolean (S, M) table: does parameter row s satisfy constraint j."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape[1] != spec.num_params:
        raise ConfigError(f"expected {spec.num_params} parameters, got {P.shape[1]}")
    out = np.ones((len(P), cset.M), dtype=bool)
    for j, c in enumerate(cset.constraints):
        out[:, j] = _rule_holds(c, _batch_predictions(spec, P, c.probes))
    return out


def evaluate_constraint(c: Constraint, spec: models.ModelSpec, params) -> int:
    P = np.asarray(params, dtype=float)[None, :]
    if P.shape[1] != spec.num_params:
        raise ConfigError(f"expected {spec.num_params} parameters, got {P.shape[1]}")
    return int(_rule_holds(c, _batch_predictions(spec, P, c.probes))[0])


def validity_score(cset: ConstraintSet, spec: models.ModelSpec, params, client_id: int = -1) -> ValidityReport:
    """Fraction of satisfied constraints; an empty set scores 1."""
    if cset.M == 0:
        return ValidityReport(client_id, np.zeros(0, dtype=np.int8), 1.0)
    bits = satisfied_matrix(cset, spec, params)[0].astype(np.int8)
    return ValidityReport(client_id, bits, float(bits.sum()) / cset.M)


def violation_rate(reports) -> float:
    scores = [r.score for r in reports]
    if not scores:
        raise ConfigError("violation rate over zero reports")
    return 1.0 - min(scores)


# ---------------------------------------------------------------- builders


def build_constraint_set(
    spec: models.ModelSpec,
    reference_params,
    seed: int,
    per_family: int = 10,
    families=FAMILIES,
    probes_per_constraint: int = 4,
    band: float | tuple[float, float] = 0.15,
    margin: float = 0.05,
    probe_scale: float = 1.5,
    capacity_probes: int | None = None,
) -> ConstraintSet:
    """Rules that ``reference_params`` (e.g. the generator's truth) satisfies.

    * monotonicity: probes step along a random direction oriented so the
      reference prediction increases along it;
    * capacity: a band of half-width ``band`` around the reference
      predictions on random probes;
    * precedence: probe pairs whose reference predictions differ by at least
      ``margin``, ordered accordingly;
    * feasibility: the reference value of a random combination, with
      tolerance ``band`` (equality up to measurement slack).

    A ``(lo, hi)`` pair for ``band`` draws each rule's slack uniformly from
    that range, so the set grades how far a model sits from the reference
    instead of acting as a single pass/fail gate.
    """
    rng = stream(seed, "constraints")
    ref = np.asarray(reference_params, dtype=float)
    p = spec.input_dim
    out: list[Constraint] = []
    m = max(2, probes_per_constraint)

    def pred(X):
        return models.predict(spec, ref, X)

    def slack():
        if np.ndim(band) == 0:
            return float(band)
        return float(rng.uniform(band[0], band[1]))

    for fam in FAMILIES:
        if fam not in families:
            continue
        made = 0
        attempts = 0
        while made < per_family:
            attempts += 1
            if attempts > 200 * per_family:
                raise CalibrationError(f"could not build {per_family} {fam} rules")
            base = rng.normal(0.0, probe_scale, p)
            if fam == "temporal-monotonicity":
                u = rng.normal(0.0, 1.0, p)
                u /= np.linalg.norm(u)
                steps = np.linspace(-1.0, 1.0, m)[:, None]
                probes = base + steps * u
                vals = pred(probes)
                if abs(vals[-1] - vals[0]) < 1e-9:
                    continue
                if vals[-1] < vals[0]:
                    probes = probes[::-1]
                params = {}
                tol = 0.0
            elif fam == "capacity-bound":
                probes = base + rng.normal(0.0, 0.5, (capacity_probes or m, p))
                vals = pred(probes)
                width = slack()
                lo, hi = float(vals.min() - width), float(vals.max() + width)
                if spec.is_classifier:
                    lo, hi = max(lo, 0.0), min(hi, 1.0)
                params = {"lower": lo, "upper": hi}
                tol = DEFAULT_TOLERANCE[fam]
            elif fam == "causal-precedence":
                probes = np.vstack([base, base + rng.normal(0.0, probe_scale, p)])
                vals = pred(probes)
                if abs(vals[0] - vals[1]) < margin:
                    continue
                hi_first = bool(vals[0] > vals[1])
                params = {"antecedent": 0 if hi_first else 1, "consequent": 1 if hi_first else 0}
                tol = 0.0
            else:
                probes = base + rng.normal(0.0, 0.5, (m, p))
                coef = rng.normal(0.0, 1.0, m)
                coef /= np.abs(coef).sum()
                params = {"coefficients": coef.tolist(), "target": float(coef @ pred(probes))}
                tol = slack()
            out.append(Constraint(len(out), fam, probes, params, tol))
            made += 1
    return ConstraintSet(out)


def _tighten(c: Constraint, spec, ref, gap: float, down: bool) -> Constraint | None:
    """A variant of ``c`` that the reference model violates, or None.

    ``down`` picks the side for bound and target shifts, so that every
    injected rule favours models whose predictions sit on that side.
    """
    vals = models.predict(spec, ref, c.probes)
    params = dict(c.params)
    if c.family == "temporal-monotonicity":
        new = Constraint(c.id, c.family, c.probes[::-1].copy(), params, c.tolerance)
    elif c.family == "causal-precedence":
        params["antecedent"], params["consequent"] = c.params["consequent"], c.params["antecedent"]
        new = Constraint(c.id, c.family, c.probes, params, c.tolerance)
    elif c.family == "capacity-bound":
        floor = 0.0 if spec.is_classifier else -math.inf
        ceil = 1.0 if spec.is_classifier else math.inf
        if vals.min() - gap - c.tolerance <= floor and vals.max() + gap + c.tolerance >= ceil:
            return None
        go_down = down
        if go_down and vals.min() - gap - c.tolerance <= floor:
            go_down = False
        if not go_down and vals.max() + gap + c.tolerance >= ceil:
            go_down = True
        if go_down:
            params["upper"] = float(vals.min() - gap)
            params["lower"] = 0.0 if spec.is_classifier else None
        else:
            params["lower"] = float(vals.max() + gap)
            params["upper"] = 1.0 if spec.is_classifier else None
        new = Constraint(c.id, c.family, c.probes, params, c.tolerance)
    else:
        # lowering every prediction moves the combination by the sign of sum(coef)
        sign = np.sign(np.sum(params["coefficients"])) or 1.0
        params["target"] = float(params["target"] + (-sign if down else sign) * (c.tolerance + gap))
        new = Constraint(c.id, c.family, c.probes, params, c.tolerance)
    new.params["injected"] = True
    return new if evaluate_constraint(new, spec, ref) == 0 else None


def inject_violations(
    cset: ConstraintSet,
    target_rho: float,
    seed: int,
    spec: models.ModelSpec,
    reference_params,
    gap: float = 0.05,
    tolerance: float = 0.02,
) -> ConstraintSet:
    """Tighten rules until the reference model's violation rate hits the target.

    With a single reference model the violation rate is ``1 - s``, i.e. the
    fraction of rules it breaks.  Rules are chosen in a seeded random order
    and replaced by a tightened variant that the reference breaks.  Raises
    :class:`CalibrationError` if no count lands within ``tolerance``.
    """
    if not 0.0 <= target_rho <= 1.0:
        raise ConfigError("target_rho must lie in [0, 1]", "constraints.target_rho")
    if target_rho == 0.0:
        return cset
    if cset.M == 0:
        raise CalibrationError("cannot inject violations into an empty set")
    ref = np.asarray(reference_params, dtype=float)
    rng = stream(seed, "inject")
    bits = validity_score(cset, spec, ref).bits
    already = int(cset.M - bits.sum())
    tightened = {}
    down = bool(rng.integers(2))
    for j in rng.permutation(cset.M):
        if bits[j]:
            new = _tighten(cset.constraints[j], spec, ref, gap, down)
            if new is not None:
                tightened[int(j)] = new
    order = list(tightened)
    best = None
    for k in range(len(order) + 1):
        realized = (already + k) / cset.M
        if abs(realized - target_rho) <= tolerance and (best is None or abs(realized - target_rho) < best[1]):
            best = (k, abs(realized - target_rho))
    if best is None:
        raise CalibrationError(
            f"target rho {target_rho} unreachable with M={cset.M} "
            f"({already} violated, {len(order)} tightenable)"
        )
    chosen = set(order[: best[0]])
    return ConstraintSet([tightened[j] if j in chosen else c for j, c in enumerate(cset.constraints)])


# -------------------------------------------------------- hypothesis space


def wilson_interval(successes: int, n: int) -> tuple[float, float]:
    from statsmodels.stats.proportion import proportion_confint

    lo, hi = proportion_confint(successes, n, alpha=0.05, method="wilson")
    return float(lo), float(hi)


def _box_bounds(spec, box):
    d = spec.num_params
    if box is None:
        box = (-5.0, 5.0)
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (d,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (d,)).copy()
    if np.any(hi <= lo):
        raise ConfigError("sampling box must have upper > lower in every dimension")
    return lo, hi


def sample_box(spec, box, num_samples: int, seed: int) -> np.ndarray:
    lo, hi = _box_bounds(spec, box)
    return stream(seed, "theta").uniform(lo, hi, (num_samples, spec.num_params))


def estimate_theta(
    cset: ConstraintSet,
    spec: models.ModelSpec,
    box=None,
    num_samples: int = 10_000,
    seed: int = 0,
) -> HypothesisSpaceEstimate:
    """Fraction of a uniform parameter box that satisfies every constraint."""
    if num_samples < 1000:
        raise ConfigError("num_samples must be >= 1000")
    lo, hi = _box_bounds(spec, box)
    P = sample_box(spec, (lo, hi), num_samples, seed)
    hits = int(np.all(satisfied_matrix(cset, spec, P), axis=1).sum()) if cset.M else num_samples
    ci = wilson_interval(hits, num_samples)
    theta = hits / num_samples
    return HypothesisSpaceEstimate(theta, num_samples, (min(ci[0], theta), max(ci[1], theta)), (lo.tolist(), hi.tolist()), hits == 0)


def calibrate_theta(
    pool: ConstraintSet,
    spec: models.ModelSpec,
    target: float = 0.37,
    box=None,
    num_samples: int = 10_000,
    seed: int = 0,
) -> tuple[ConstraintSet, HypothesisSpaceEstimate]:
    """Shortest prefix of ``pool`` whose estimated theta is closest to ``target``.

    All prefixes are scored on the same parameter draws, so theta is
    non-increasing in the prefix length.
    """
    P = sample_box(spec, box, num_samples, seed)
    alive = np.cumprod(satisfied_matrix(pool, spec, P), axis=1).mean(axis=0)
    thetas = np.concatenate([[1.0], alive])
    k = int(np.argmin(np.abs(thetas - target)))
    chosen = ConstraintSet(pool.constraints[:k])
    return chosen, estimate_theta(chosen, spec, box, num_samples, seed)
