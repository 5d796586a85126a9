import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scfalab import constraints as cons
from scfalab import data, engine, models
from scfalab.artifacts import rounds_csv
from scfalab.errors import ConfigError, DegenerateRoundError
from scfalab.privacy import DPConfig, PrivacyBudget


def federation(K=4, n=800, p=5, alpha=1.0, seed=0, cset=None, kind="logistic-regression"):
    spec = models.ModelSpec(kind, p)
    ds = data.generate(data.SynthSpec(n, p), seed=seed, model=spec)
    tr, te = data.train_test_split(ds, 0.2, seed)
    clients = data.dirichlet_partition(tr, data.PartitionSpec(K, alpha, seed))
    if cset is None:
        cset = cons.build_constraint_set(spec, ds.true_params, seed=seed, per_family=5, band=(0.02, 0.2))
    return engine.Federation(spec, clients, te, cset, ds.true_params)


def upd(k, n, d=2):
    return engine.ClientUpdate(k, np.full(d, float(k + 1)), n, 0.0)


def rep(k, s):
    return cons.ValidityReport(k, np.zeros(0), s)


def test_sample_clients():
    assert engine.sample_clients(5, 1.0, 3, 0) == [0, 1, 2, 3, 4]
    picked = engine.sample_clients(5, 0.6, 3, 0)
    assert len(picked) == 3 and picked == sorted(set(picked))
    assert engine.sample_clients(5, 0.6, 3, 0) == picked
    assert engine.sample_clients(5, 0.01, 0, 0).__len__() == 1
    with pytest.raises(ConfigError):
        engine.sample_clients(5, 0.0, 0, 0)


def test_cosine_schedule():
    cfg = engine.TrainConfig(rounds=10, learning_rate=0.2)
    assert cfg.lr_at(0) == pytest.approx(0.2)
    assert cfg.lr_at(5) == pytest.approx(0.1)
    assert engine.TrainConfig(rounds=10, learning_rate=0.2, cosine_decay=False).lr_at(7) == 0.2


def test_local_train_zero_lr_and_prox_reduction():
    fed = federation()
    cfg = engine.TrainConfig(local_epochs=2, batch_size=32)
    start = np.zeros(fed.spec.num_params)
    c = fed.clients[0]
    v = engine.AlgorithmVariant("FedAvg")
    zero = engine.local_train(fed.spec, c, start, cfg, v, np.random.default_rng(0), 0.0)
    assert np.array_equal(zero.delta, np.zeros_like(start))
    a = engine.local_train(fed.spec, c, start, cfg, v, np.random.default_rng(1), 0.1)
    b = engine.local_train(fed.spec, c, start, cfg, engine.AlgorithmVariant("FedProx", mu=0.0), np.random.default_rng(1), 0.1)
    assert np.array_equal(a.delta, b.delta)
    assert a.steps == 2 * math.ceil(c.n / 32)


def test_single_full_batch_step_linear():
    fed = federation(kind="linear-regression")
    c = fed.clients[1]
    cfg = engine.TrainConfig(local_epochs=1, batch_size=10 * c.n)
    start = np.random.default_rng(4).normal(size=fed.spec.num_params)
    u = engine.local_train(fed.spec, c, start, cfg, engine.AlgorithmVariant("FedAvg"), np.random.default_rng(0), 0.05)
    assert np.allclose(u.delta, -0.05 * models.gradient(fed.spec, start, c.X, c.y), rtol=1e-12, atol=1e-15)


def test_validate_round_cases():
    spec = models.ModelSpec("linear-regression", 1)
    w = np.zeros(2)
    ups = [engine.ClientUpdate(0, np.array([0.0, 0.5]), 5, 0.0), engine.ClientUpdate(1, np.array([0.0, 2.0]), 5, 0.0),
           engine.ClientUpdate(2, np.array([0.0, 0.5]), 5, 0.0)]
    assert [r.score for r in engine.validate_round(ups, w, cons.ConstraintSet(), spec)] == [1.0, 1.0, 1.0]
    capped = cons.ConstraintSet([cons.Constraint(0, "capacity-bound", [[0.0]], {"lower": None, "upper": 1.0})])
    reps = engine.validate_round(ups, w, capped, spec)
    # predictions on the probe are the biases 0.5, 2.0, 0.5
    assert [int(r.bits[0]) for r in reps] == [1, 0, 1]
    assert np.array_equal(reps[0].bits, reps[2].bits) and reps[0].score == reps[2].score


def test_weights_hand_example():
    ups = [upd(0, 100), upd(1, 300)]
    delta, a = engine.aggregate(ups, [rep(0, 1.0), rep(1, 0.5)], engine.AlgorithmVariant("SCFA"))
    assert a.tolist() == pytest.approx([0.4, 0.6])
    assert delta == pytest.approx(0.4 * 1 + 0.6 * 2)


def test_all_ones_matches_fedavg_and_single_participant():
    ups = [upd(0, 10), upd(1, 30), upd(2, 60)]
    ones = [rep(k, 1.0) for k in range(3)]
    _, a = engine.aggregate(ups, ones, engine.AlgorithmVariant("SCFA"))
    _, b = engine.aggregate(ups, ones, engine.AlgorithmVariant("FedAvg"))
    assert np.array_equal(a, b)
    _, one = engine.aggregate([upd(0, 10)], [rep(0, 0.2)], engine.AlgorithmVariant("SCFA"))
    assert one.tolist() == [1.0]


def test_all_zero_scores_degenerate():
    with pytest.raises(DegenerateRoundError):
        engine.aggregate([upd(0, 10)], [rep(0, 0.0)], engine.AlgorithmVariant("SCFA"))


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(1, 1000), st.floats(0.01, 1.0)), min_size=2, max_size=8),
       st.integers(0, 7), st.floats(0.05, 0.95))
def test_weight_normalisation_and_downweighting(pairs, k, factor):
    k %= len(pairs)
    ups = [upd(i, n) for i, (n, _) in enumerate(pairs)]
    v = engine.AlgorithmVariant("SCFA")
    a = engine.aggregation_weights(ups, [rep(i, s) for i, (_, s) in enumerate(pairs)], v)
    assert a.sum() == pytest.approx(1.0, abs=1e-12)
    lowered = [rep(i, s * factor if i == k else s) for i, (_, s) in enumerate(pairs)]
    b = engine.aggregation_weights(ups, lowered, v)
    assert b[k] < a[k]
    assert all(b[j] >= a[j] - 1e-15 for j in range(len(pairs)) if j != k)


def test_fedadam_server_step():
    v = engine.AlgorithmVariant("FedAdam")
    state = engine.FedAdamState.zeros(2)
    ups = [engine.ClientUpdate(0, np.array([1.0, -2.0]), 10, 0.0)]
    delta, _ = engine.aggregate(ups, [rep(0, 1.0)], v, state)
    m = 0.1 * np.array([1.0, -2.0])
    s = 0.01 * np.array([1.0, 4.0])
    assert np.allclose(delta, 0.01 * m / (np.sqrt(s) + 1e-8), rtol=1e-14)
    with pytest.raises(ConfigError):
        engine.aggregate(ups, [rep(0, 1.0)], v, None)


def test_variant_dict_validation():
    assert engine.AlgorithmVariant.from_dict({"kind": "FedProx", "mu": 0.1}).mu == 0.1
    with pytest.raises(ConfigError, match="variant.mu"):
        engine.AlgorithmVariant.from_dict({"kind": "FedAvg", "mu": 0.1})
    with pytest.raises(ConfigError):
        engine.AlgorithmVariant("FedSGD")
    assert engine.AlgorithmVariant("FedAdam").to_dict()["server_lr"] == 0.01


def test_zero_rounds():
    fed = federation()
    res = engine.run_experiment(fed, engine.AlgorithmVariant("SCFA"), engine.TrainConfig(rounds=0))
    assert res.records == [] and np.array_equal(res.final_params, np.zeros(fed.spec.num_params))


def strip(records):
    return [{k: v for k, v in r.__dict__.items() if k != "wall_time"} for r in records]


def test_scfa_with_empty_set_replays_fedavg():
    fed = federation(cset=cons.ConstraintSet())
    cfg = engine.TrainConfig(rounds=8, batch_size=64, master_seed=5)
    a = engine.run_experiment(fed, engine.AlgorithmVariant("SCFA"), cfg)
    b = engine.run_experiment(fed, engine.AlgorithmVariant("FedAvg"), cfg)
    assert strip(a.records) == strip(b.records)
    assert a.final_params.tobytes() == b.final_params.tobytes()


def test_runs_are_deterministic():
    fed = federation()
    cfg = engine.TrainConfig(rounds=5, batch_size=64, master_seed=2)
    dp = DPConfig.from_budget(PrivacyBudget(10.0))
    a = engine.run_experiment(fed, engine.AlgorithmVariant("SCFA"), cfg, dp)
    b = engine.run_experiment(fed, engine.AlgorithmVariant("SCFA"), cfg, dp)
    assert rounds_csv([a]) == rounds_csv([b])
    assert a.final_params.tobytes() == b.final_params.tobytes()
    assert all(r.snr > 0 for r in a.records)


def test_degenerate_rounds_leave_model_unchanged():
    spec = models.ModelSpec("logistic-regression", 5)
    never = cons.ConstraintSet([cons.Constraint(0, "capacity-bound", np.zeros((1, 5)), {"lower": 2.0, "upper": 3.0})])
    fed = federation(cset=never)
    res = engine.run_experiment(fed, engine.AlgorithmVariant("SCFA"), engine.TrainConfig(rounds=3, batch_size=64))
    assert all(r.degenerate for r in res.records)
    assert np.array_equal(res.final_params, spec.init_params(None))
    assert len(res.events) == 3 and all(r.rho == 1.0 for r in res.records)
    other = engine.run_experiment(fed, engine.AlgorithmVariant("FedAvg"), engine.TrainConfig(rounds=3, batch_size=64))
    assert not any(r.degenerate for r in other.records)


def test_scaffold_server_variate_is_client_mean():
    fed = federation()
    cfg = engine.TrainConfig(rounds=4, batch_size=64, client_sample_rate=1.0)
    res = engine.run_experiment(fed, engine.AlgorithmVariant("SCAFFOLD"), cfg)
    c_global, c_local = res.controls
    assert np.allclose(c_global, np.mean(c_local, axis=0), atol=1e-13)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_client_dropped():
    fed = federation(kind="linear-regression")
    fed.clients[0].X[0, 0] = 1e200
    cfg = engine.TrainConfig(rounds=2, batch_size=64, client_sample_rate=1.0, learning_rate=1.0)
    res = engine.run_experiment(fed, engine.AlgorithmVariant("FedAvg"), cfg)
    assert 0 in res.records[0].dropped and 0 not in res.records[0].participants
    assert res.events


@pytest.mark.parametrize("kind", ["FedProx", "SCAFFOLD", "FedAdam", "LocalOnly", "Centralized"])
def test_baselines_run_and_improve(kind):
    fed = federation(n=1500)
    cfg = engine.TrainConfig(rounds=10, batch_size=64, learning_rate=0.1)
    res = engine.run_experiment(fed, engine.AlgorithmVariant(kind), cfg)
    loss = res.series("global_loss")
    assert len(res.records) == 10 and np.all(np.isfinite(loss))
    if kind != "FedAdam":
        assert loss[-1] < math.log(2)
