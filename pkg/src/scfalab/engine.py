"""Round-by-round simulation of constraint-weighted federated aggregation
and the baseline optimisers (FedAvg, FedProx, SCAFFOLD, FedAdam, local-only,
centralized).

Random streams are keyed by ``(master_seed, phase, client, round)`` so the
numbers a client sees never depend on which algorithm is running or on the
order clients are visited.  In particular a constraint-weighted run whose
validity scores are all 1 replays the FedAvg run bit for bit.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import constraints as cons
from . import models
from .data import ClientDataset, Dataset
from .errors import ConfigError, DegenerateRoundError, DivergedClientError
from .privacy import DPConfig, clip, gradient_snr, privatize
from .rng import stream

log = logging.getLogger(__name__)

VARIANTS = ("SCFA", "FedAvg", "FedProx", "SCAFFOLD", "FedAdam", "LocalOnly", "Centralized")
_VARIANT_PARAMS = {
    "FedProx": {"mu"},
    "FedAdam": {"server_lr", "beta1", "beta2", "adam_eps"},
}


@dataclass(frozen=True)
class AlgorithmVariant:
    kind: str
    mu: float = 0.01
    server_lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"unknown variant {self.kind!r}", "variants.kind")
        if self.mu < 0:
            raise ConfigError("must be >= 0", "variants.mu")
        if self.server_lr <= 0:
            raise ConfigError("must be > 0", "variants.server_lr")

    @classmethod
    def from_dict(cls, doc: dict, path: str = "variant") -> "AlgorithmVariant":
        doc = dict(doc)
        kind = doc.pop("kind", None)
        if kind is None:
            raise ConfigError("required field missing", f"{path}.kind")
        allowed = _VARIANT_PARAMS.get(kind, set())
        for key in doc:
            if key not in allowed:
                raise ConfigError(f"not a parameter of {kind}", f"{path}.{key}")
        return cls(kind, **doc)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for key in sorted(_VARIANT_PARAMS.get(self.kind, ())):
            out[key] = getattr(self, key)
        return out


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 50
    local_epochs: int = 5
    client_sample_rate: float = 0.6
    learning_rate: float = 0.01
    cosine_decay: bool = True
    batch_size: int = 256
    master_seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("must be >= 0", "training.rounds")
        if self.local_epochs < 1:
            raise ConfigError("must be >= 1", "training.local_epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "training.batch_size")
        if not 0.0 < self.client_sample_rate <= 1.0:
            raise ConfigError("must lie in (0, 1]", "training.client_sample_rate")
        if self.learning_rate < 0:
            raise ConfigError("must be >= 0", "training.learning_rate")

    def lr_at(self, t: int) -> float:
        """Local step size for the zero-based round ``t``."""
        if not self.cosine_decay or self.rounds == 0:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * t / self.rounds))


@dataclass
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    n: int
    local_loss_after: float
    steps: int = 0
    control: np.ndarray | None = None


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    scores: list[float]
    weights: list[float]
    rho: float
    grad_norm_sq: float
    global_loss: float
    metric: float
    degenerate: bool = False
    dropped: list[int] = field(default_factory=list)
    snr: float = math.nan
    wall_time: float = 0.0


@dataclass
class Federation:
    """Everything a run needs besides the algorithm and schedule."""

    spec: models.ModelSpec
    clients: list[ClientDataset]
    test: Dataset
    constraints: cons.ConstraintSet = field(default_factory=cons.ConstraintSet)
    true_params: np.ndarray | None = None

    @property
    def K(self) -> int:
        return len(self.clients)


@dataclass
class RunResult:
    variant: str
    seed: int
    records: list[RoundRecord]
    final_params: np.ndarray
    local_models: list[np.ndarray] | None = None
    events: list[str] = field(default_factory=list)
    controls: tuple | None = None

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


@dataclass
class FedAdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "FedAdamState":
        return cls(np.zeros(d), np.zeros(d))


def sample_clients(K: int, rate: float, t: int, master_seed: int) -> list[int]:
    """floor(rate * K) distinct ids (at least one), ascending."""
    if not 0.0 < rate <= 1.0:
        raise ConfigError("client sample rate must lie in (0, 1]")
    m = max(1, int(math.floor(rate * K + 1e-9)))
    if m >= K:
        return list(range(K))
    picked = stream(master_seed, "sample", t).choice(K, size=m, replace=False)
    return sorted(int(k) for k in picked)


def local_train(
    spec: models.ModelSpec,
    client: ClientDataset,
    start: np.ndarray,
    cfg: TrainConfig,
    variant: AlgorithmVariant,
    rng: np.random.Generator,
    lr: float,
    control_global: np.ndarray | None = None,
    control_local: np.ndarray | None = None,
) -> ClientUpdate:
    """E passes of shuffled minibatch SGD from ``start``.

    FedProx adds mu (w - start) to every gradient; SCAFFOLD adds
    (c - c_k) and returns the refreshed client variate in ``control``.
    """
    w = np.array(start, dtype=float)
    n = client.n
    steps = 0
    scaffold = variant.kind == "SCAFFOLD"
    if scaffold:
        correction = control_global - control_local
    # overflow is detected on the finished delta, so numpy's warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.local_epochs):
            order = rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                g = models.gradient(spec, w, client.X[idx], client.y[idx])
                if variant.kind == "FedProx":
                    g = g + variant.mu * (w - start)
                elif scaffold:
                    g = g + correction
                w -= lr * g
                steps += 1
    delta = w - start
    if not np.all(np.isfinite(delta)):
        raise DivergedClientError(client.client_id)
    control = None
    if scaffold:
        control = control_local - control_global + (-delta) / (steps * lr) if lr > 0 else control_local.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        after = models.loss(spec, w, client.X, client.y)
    return ClientUpdate(client.client_id, delta, n, after, steps, control)


def validate_round(updates, w_t, cset: cons.ConstraintSet, spec: models.ModelSpec, deltas=None):
    """Validity report of each tentative model w_t + delta_k.

    ``deltas`` optionally overrides the update deltas (e.g. pre-noise ones).
    """
    if not updates:
        raise ConfigError("validate_round needs at least one update")
    deltas = deltas if deltas is not None else [u.delta for u in updates]
    return [cons.validity_score(cset, spec, w_t + d, u.client_id) for u, d in zip(updates, deltas)]


def aggregation_weights(updates, reports, variant: AlgorithmVariant) -> np.ndarray:
    sizes = np.array([u.n for u in updates], dtype=float)
    if variant.kind == "SCFA":
        raw = sizes * np.array([r.score for r in reports], dtype=float)
    else:
        raw = sizes * 1.0
    total = raw.sum()
    if total <= 0:
        raise DegenerateRoundError("all participants scored zero validity")
    return raw / total


def aggregate(updates, reports, variant: AlgorithmVariant, adam: FedAdamState | None = None):
    """Weighted model delta and the weights used.

    SCFA weights are n_k s_k / sum_j n_j s_j; the other variants use n_k / n.
    FedAdam then turns the averaged delta into an adaptive server step
    (mutating ``adam``).  Updates are summed in ascending client-id order.
    """
    if not updates:
        raise ConfigError("aggregate needs at least one update")
    order = sorted(range(len(updates)), key=lambda i: updates[i].client_id)
    updates = [updates[i] for i in order]
    reports = [reports[i] for i in order]
    weights = aggregation_weights(updates, reports, variant)
    delta = np.zeros_like(updates[0].delta)
    for a, u in zip(weights, updates):
        delta += a * u.delta
    if variant.kind == "FedAdam":
        if adam is None:
            raise ConfigError("FedAdam aggregation needs server state")
        adam.m = variant.beta1 * adam.m + (1 - variant.beta1) * delta
        adam.v = variant.beta2 * adam.v + (1 - variant.beta2) * delta**2
        delta = variant.server_lr * adam.m / (np.sqrt(adam.v) + variant.adam_eps)
    return delta, weights


def _evaluate(fed: Federation, params) -> tuple[float, float, float]:
    g = models.global_gradient(fed.spec, params, fed.clients)
    return (
        float(g @ g),
        models.global_objective(fed.spec, params, fed.clients),
        models.evaluate_metric(fed.spec, params, fed.test.X, fed.test.y),
    )


def _initial_params(fed: Federation, cfg: TrainConfig) -> np.ndarray:
    return fed.spec.init_params(stream(cfg.master_seed, "init"))


def run_experiment(
    fed: Federation,
    variant: AlgorithmVariant,
    cfg: TrainConfig,
    dp: DPConfig | None = None,
    validate_before_noise: bool = False,
) -> RunResult:
    """Run ``cfg.rounds`` rounds and record one :class:`RoundRecord` per round.

    Record ``t`` (1-based) describes the global model after the t-th
    aggregation.  Degenerate rounds leave the model unchanged.
    """
    if fed.K < 1:
        raise ConfigError("federation has no clients")
    if variant.kind == "LocalOnly":
        return _run_local_only(fed, variant, cfg)
    if variant.kind == "Centralized":
        return _run_centralized(fed, variant, cfg)

    spec = fed.spec
    w = _initial_params(fed, cfg)
    d = spec.num_params
    adam = FedAdamState.zeros(d) if variant.kind == "FedAdam" else None
    c_global = np.zeros(d)
    c_local = [np.zeros(d) for _ in range(fed.K)]
    result = RunResult(variant.kind, cfg.master_seed, [], w)
    private = dp is not None and dp.enabled

    for t in range(cfg.rounds):
        tic = time.perf_counter()
        lr = cfg.lr_at(t)
        chosen = sample_clients(fed.K, cfg.client_sample_rate, t, cfg.master_seed)
        updates, dropped = [], []
        for k in chosen:
            rng = stream(cfg.master_seed, "local", k, t)
            try:
                updates.append(
                    local_train(spec, fed.clients[k], w, cfg, variant, rng, lr, c_global, c_local[k])
                )
            except DivergedClientError as exc:
                dropped.append(k)
                result.events.append(f"round {t + 1}: {exc}")

        clean = [u.delta for u in updates]
        if private:
            for u in updates:
                u.delta = privatize(u.delta, dp, stream(cfg.master_seed, "dp", u.client_id, t))
            clean = [clip(c, dp.clip) for c in clean]

        degenerate = not updates
        reports, weights, snr = [], [], math.nan
        if updates:
            reports = validate_round(updates, w, fed.constraints, spec, clean if validate_before_noise else None)
            try:
                delta, weights = aggregate(updates, reports, variant, adam)
            except DegenerateRoundError as exc:
                degenerate = True
                weights = np.zeros(len(updates))
                result.events.append(f"round {t + 1}: {exc}; model unchanged")
        if not degenerate:
            if private:
                clean_sum = sum(a * c for a, c in zip(weights, clean))
                noisy_sum = sum(a * u.delta for a, u in zip(weights, updates))
                snr = gradient_snr(clean_sum, noisy_sum)
            w = w + delta
            if variant.kind == "SCAFFOLD":
                shift = sum(u.control - c_local[u.client_id] for u in updates) / fed.K
                for u in updates:
                    c_local[u.client_id] = u.control
                c_global = c_global + shift

        gn, gl, metric = _evaluate(fed, w)
        result.records.append(
            RoundRecord(
                round=t + 1,
                participants=[u.client_id for u in updates],
                scores=[r.score for r in reports],
                weights=[float(a) for a in weights],
                rho=cons.violation_rate(reports) if reports else 1.0,
                grad_norm_sq=gn,
                global_loss=gl,
                metric=metric,
                degenerate=degenerate,
                dropped=dropped,
                snr=snr,
                wall_time=time.perf_counter() - tic,
            )
        )
    result.final_params = w
    if variant.kind == "SCAFFOLD":
        result.controls = (c_global, c_local)
    return result


def _run_local_only(fed: Federation, variant: AlgorithmVariant, cfg: TrainConfig) -> RunResult:
    spec = fed.spec
    w0 = _initial_params(fed, cfg)
    local = [w0.copy() for _ in fed.clients]
    result = RunResult(variant.kind, cfg.master_seed, [], w0, local)
    sizes = np.array([c.n for c in fed.clients], dtype=float)
    for t in range(cfg.rounds):
        tic = time.perf_counter()
        lr = cfg.lr_at(t)
        for k, client in enumerate(fed.clients):
            rng = stream(cfg.master_seed, "local", k, t)
            try:
                local[k] = local[k] + local_train(spec, client, local[k], cfg, variant, rng, lr).delta
            except DivergedClientError as exc:
                result.events.append(f"round {t + 1}: {exc}")
        evals = [_evaluate(fed, wk) for wk in local]
        reports = [cons.validity_score(fed.constraints, spec, wk, k) for k, wk in enumerate(local)]
        result.records.append(
            RoundRecord(
                round=t + 1,
                participants=list(range(fed.K)),
                scores=[r.score for r in reports],
                weights=[],
                rho=cons.violation_rate(reports),
                grad_norm_sq=float(np.mean([e[0] for e in evals])),
                global_loss=float(np.mean([e[1] for e in evals])),
                metric=float(np.mean([e[2] for e in evals])),
                wall_time=time.perf_counter() - tic,
            )
        )
    result.local_models = local
    # a single summary vector: the size-weighted mean of the local models
    result.final_params = (sizes / sizes.sum()) @ np.array(local)
    return result


def _run_centralized(fed: Federation, variant: AlgorithmVariant, cfg: TrainConfig) -> RunResult:
    """Pooled SGD taking as many steps per round as the sampled clients would."""
    spec = fed.spec
    X = np.vstack([c.X for c in fed.clients])
    y = np.concatenate([c.y for c in fed.clients])
    w = _initial_params(fed, cfg)
    result = RunResult(variant.kind, cfg.master_seed, [], w)
    B = cfg.batch_size
    for t in range(cfg.rounds):
        tic = time.perf_counter()
        lr = cfg.lr_at(t)
        chosen = sample_clients(fed.K, cfg.client_sample_rate, t, cfg.master_seed)
        budget = sum(cfg.local_epochs * math.ceil(fed.clients[k].n / B) for k in chosen)
        rng = stream(cfg.master_seed, "central", t)
        order = rng.permutation(len(y))
        pos = 0
        for _ in range(budget):
            if pos >= len(y):
                order, pos = rng.permutation(len(y)), 0
            idx = order[pos : pos + B]
            pos += B
            w = w - lr * models.gradient(spec, w, X[idx], y[idx])
        if not np.all(np.isfinite(w)):
            raise ConfigError("centralized training diverged; lower the learning rate")
        gn, gl, metric = _evaluate(fed, w)
        report = cons.validity_score(fed.constraints, spec, w, -1)
        result.records.append(
            RoundRecord(t + 1, [], [report.score], [], 1.0 - report.score, gn, gl, metric,
                        wall_time=time.perf_counter() - tic)
        )
    result.final_params = w
    return result
