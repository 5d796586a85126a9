"""Experiment configuration: JSON schema, defaults, and object construction.

A config is one JSON document.  Every field has a default except
``model.kind``, ``data`` (its size and width) and ``seeds``; the resolved
document (defaults filled in) is what manifests store, so a manifest alone
replays a run.  Environment variables are never consulted.

Minimal example::

    {
      "model": {"kind": "logistic-regression"},
      "data": {"num_samples": 2000, "feature_dim": 10},
      "partition": {"num_clients": 5, "alpha": 1.0},
      "training": {"rounds": 20},
      "variants": [{"kind": "SCFA"}, {"kind": "FedAvg"}],
      "seeds": [0, 1]
    }

``data.seed`` and ``partition.seed`` default to ``null``, meaning "use the
run seed"; an integer pins the dataset or partition across run seeds.
``constraints`` either builds rules around the generator's ground truth
(``builder``) or loads a JSON Lines file (``path``).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from . import constraints as cons
from . import data, models
from .engine import AlgorithmVariant, Federation, TrainConfig, VARIANTS
from .errors import ConfigError
from .privacy import DPConfig, PrivacyBudget

SCHEMA_VERSION = "1"

_num = {"type": "number"}
_int = {"type": "integer"}
_seed = {"type": ["integer", "null"], "minimum": 0}

VARIANT_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(VARIANTS)},
        "mu": {**_num, "minimum": 0},
        "server_lr": {**_num, "exclusiveMinimum": 0},
        "beta1": {**_num, "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {**_num, "minimum": 0, "exclusiveMaximum": 1},
        "adam_eps": {**_num, "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["model", "data", "seeds"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"type": "string"},
        "model": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(models.KINDS)},
                "hidden_width": {**_int, "minimum": 0},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_samples": {**_int, "minimum": 2},
                "feature_dim": {**_int, "minimum": 1},
                "positive_rate": {**_num, "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "noise_std": {**_num, "minimum": 0},
                "test_fraction": {**_num, "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": _seed,
                "csv": {"type": ["string", "null"]},
            },
            "anyOf": [{"required": ["num_samples", "feature_dim"]}, {"required": ["csv"]}],
        },
        "partition": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_clients": {**_int, "minimum": 1},
                "alpha": {**_num, "exclusiveMinimum": 0},
                "seed": _seed,
            },
        },
        "constraints": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": ["string", "null"]},
                "builder": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "properties": {
                        "per_family": {**_int, "minimum": 1},
                        "probes_per_constraint": {**_int, "minimum": 2},
                        "band": {
                            "oneOf": [
                                {**_num, "minimum": 0},
                                {"type": "array", "items": {**_num, "minimum": 0}, "minItems": 2, "maxItems": 2},
                            ]
                        },
                        "margin": {**_num, "minimum": 0},
                        "probe_scale": {**_num, "exclusiveMinimum": 0},
                    },
                },
                "families": {
                    "type": "array",
                    "items": {"enum": list(cons.FAMILIES)},
                    "minItems": 1,
                    "uniqueItems": True,
                },
                "target_rho": {**_num, "minimum": 0, "maximum": 1},
                "inject_gap": {**_num, "exclusiveMinimum": 0},
            },
        },
        "privacy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "epsilon": {**_num, "exclusiveMinimum": 0},
                "delta": {**_num, "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "clip": {**_num, "exclusiveMinimum": 0},
                "validate_before_noise": {"type": "boolean"},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rounds": {**_int, "minimum": 0},
                "local_epochs": {**_int, "minimum": 1},
                "client_sample_rate": {**_num, "exclusiveMinimum": 0, "maximum": 1},
                "learning_rate": {**_num, "minimum": 0},
                "cosine_decay": {"type": "boolean"},
                "batch_size": {**_int, "minimum": 1},
            },
        },
        "variants": {"type": "array", "items": VARIANT_SCHEMA, "minItems": 1},
        "seeds": {"type": "array", "items": {**_int, "minimum": 0}, "minItems": 1},
    },
}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "model": {"hidden_width": 0},
    "data": {"positive_rate": 0.3, "noise_std": 0.5, "test_fraction": 0.2, "seed": None, "csv": None},
    "partition": {"num_clients": 5, "alpha": 1.0, "seed": None},
    "constraints": {
        "path": None,
        "builder": {"per_family": 10, "probes_per_constraint": 4, "band": 0.15, "margin": 0.05, "probe_scale": 1.5},
        "families": list(cons.FAMILIES),
        "target_rho": 0.0,
        "inject_gap": 0.05,
    },
    "privacy": {"enabled": False, "epsilon": 10.0, "delta": 1e-5, "clip": 1.0, "validate_before_noise": False},
    "training": {
        "rounds": 50,
        "local_epochs": 5,
        "client_sample_rate": 0.6,
        "learning_rate": 0.01,
        "cosine_decay": True,
        "batch_size": 256,
    },
    "variants": [{"kind": "SCFA"}, {"kind": "FedAvg"}],
}


def _json_path(err: jsonschema.ValidationError) -> str:
    parts = []
    for p in err.absolute_path:
        if isinstance(p, int):
            parts.append(f"[{p}]")
        else:
            parts.append(("." if parts else "") + str(p))
    return "".join(parts) or "<root>"


def validate(doc: dict) -> None:
    """Raise :class:`ConfigError` naming the first offending field."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if not errors:
        return
    err = errors[0]
    path = _json_path(err)
    if err.validator == "required":
        missing = [f for f in err.validator_value if f not in err.instance]
        path = (path + "." if path != "<root>" else "") + missing[0]
        raise ConfigError("required field missing", path)
    raise ConfigError(err.message, path)


def _merge(defaults, doc):
    out = copy.deepcopy(defaults)
    for key, value in doc.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(doc: dict) -> dict:
    """Validate ``doc`` and fill in every default."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    validate(doc)
    out = _merge(DEFAULTS, doc)
    if out["constraints"].get("builder") is None and out["constraints"].get("path") is None:
        raise ConfigError("needs a builder or a path", "constraints")
    if out["data"].get("csv") and out["constraints"].get("path") is None:
        raise ConfigError("a CSV dataset has no ground truth to build rules around; give constraints.path",
                          "constraints.path")
    if out["model"]["kind"] == "mlp-1-hidden" and out["model"]["hidden_width"] < 1:
        raise ConfigError("mlp needs hidden_width >= 1", "model.hidden_width")
    for i, v in enumerate(out["variants"]):
        AlgorithmVariant.from_dict(v, f"variants[{i}]")
    out["schema_version"] = SCHEMA_VERSION
    return out


def load(path) -> dict:
    """Read a config or a manifest (whose ``config`` key is used) and resolve it."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError("file not found", str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from exc
    if isinstance(doc, dict) and "config" in doc and "created" in doc:
        doc = doc["config"]
    return resolve(doc)


@dataclass
class RunPlan:
    """A resolved config bound to one run seed."""

    config: dict
    seed: int

    @property
    def spec(self) -> models.ModelSpec:
        m = self.config["model"]
        return models.ModelSpec(m["kind"], self.feature_dim, m["hidden_width"])

    @property
    def feature_dim(self) -> int:
        d = self.config["data"]
        if d.get("csv"):
            return data.read_csv(d["csv"]).X.shape[1]
        return int(d["feature_dim"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(master_seed=self.seed, **self.config["training"])

    def dp_config(self) -> DPConfig | None:
        p = self.config["privacy"]
        if not p["enabled"]:
            return None
        return DPConfig.from_budget(PrivacyBudget(p["epsilon"], p["delta"]), p["clip"])

    def variants(self) -> list[AlgorithmVariant]:
        return [AlgorithmVariant.from_dict(v, f"variants[{i}]") for i, v in enumerate(self.config["variants"])]

    def federation(self) -> Federation:
        cfg = self.config
        d, part, c = cfg["data"], cfg["partition"], cfg["constraints"]
        data_seed = self.seed if d["seed"] is None else d["seed"]
        part_seed = self.seed if part["seed"] is None else part["seed"]
        spec = self.spec
        if d.get("csv"):
            ds = data.read_csv(d["csv"])
        else:
            synth = data.SynthSpec(d["num_samples"], d["feature_dim"], d["positive_rate"], d["noise_std"])
            ds = data.generate(synth, seed=data_seed, model=spec)
        train, test = data.train_test_split(ds, d["test_fraction"], data_seed)
        clients = data.dirichlet_partition(train, data.PartitionSpec(part["num_clients"], part["alpha"], part_seed))
        if c.get("path"):
            cset = cons.ConstraintSet.load(c["path"]).families(c["families"])
        else:
            b = c["builder"]
            band = tuple(b["band"]) if isinstance(b["band"], list) else b["band"]
            cset = cons.build_constraint_set(
                spec, ds.true_params, seed=data_seed, per_family=b["per_family"], families=c["families"],
                probes_per_constraint=b["probes_per_constraint"], band=band, margin=b["margin"],
                probe_scale=b["probe_scale"],
            )
        if c["target_rho"] > 0:
            if ds.true_params is None:
                raise ConfigError("violation injection needs a reference model", "constraints.target_rho")
            cset = cons.inject_violations(cset, c["target_rho"], data_seed, spec, ds.true_params, c["inject_gap"])
        return Federation(spec, clients, test, cset, ds.true_params)


def plans(config: dict) -> list[RunPlan]:
    return [RunPlan(config, int(s)) for s in config["seeds"]]


def override(config: dict, seed: int | None = None, variants=None) -> dict:
    """Apply the CLI's --seed-override and --variant flags to a resolved config."""
    out = copy.deepcopy(config)
    if seed is not None:
        if seed < 0:
            raise ConfigError("must be >= 0", "--seed-override")
        out["seeds"] = [int(seed)]
    if variants:
        kinds = {v["kind"]: v for v in out["variants"]}
        picked = []
        for name in variants:
            if name not in VARIANTS:
                raise ConfigError(f"unknown variant {name!r}", "--variant")
            picked.append(kinds.get(name, {"kind": name}))
        out["variants"] = picked
    return out
