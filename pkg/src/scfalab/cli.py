"""Command-line front end: ``run``, ``sweep``, ``fit`` and ``report``.

Failures exit non-zero after printing one JSON error record to stderr,
e.g. ``{"error": "ConfigError", "path": "training.rounds", "message": ...}``.

A sweep file wraps a base config with grid axes::

    {
      "sweep_id": "hetero",
      "base": {...config without seeds...},
      "grid": {"variant": ["SCFA", "FedAvg"], "alpha": [0.1, 1, 10],
               "epsilon": [null, 10], "target_rho": [0, 0.05], "seeds": [0, 1]},
      "workers": 1
    }

Every axis is optional but must be non-empty when present.  ``epsilon``
``null`` means no privacy.  Each cell is written to
``<out>/<sweep_id>/<cell_id>/`` and the per-cell summary to
``<out>/<sweep_id>/summary.csv``.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import copy
import itertools
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import analysis, artifacts
from . import config as cfgmod
from .engine import VARIANTS, run_experiment
from .errors import ConfigError

log = logging.getLogger("scfalab")

SWEEP_AXES = ("variant", "alpha", "epsilon", "target_rho", "seeds")


# ---------------------------------------------------------------- run


def execute(config: dict):
    """Every (seed, variant) run of a resolved config, in manifest order."""
    results = []
    for plan in cfgmod.plans(config):
        fed = plan.federation()
        tc = plan.train_config()
        dp = plan.dp_config()
        for variant in plan.variants():
            results.append(
                run_experiment(fed, variant, tc, dp, config["privacy"]["validate_before_noise"])
            )
    return results


def cmd_run(config_path, out, seed=None, variants=None) -> int:
    config = cfgmod.override(cfgmod.load(config_path), seed, variants)
    results = execute(config)
    artifacts.write_run(out, config, results)
    for r in results:
        m = r.series("metric")
        log.info("%s seed=%d final metric %.4f", r.variant, r.seed, m[-1] if len(m) else float("nan"))
    return 0


# ---------------------------------------------------------------- sweep


def load_sweep(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError("file not found", str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from exc
    if not isinstance(doc, dict):
        raise ConfigError("sweep must be a JSON object")
    for key in ("sweep_id", "base", "grid"):
        if key not in doc:
            raise ConfigError("required field missing", key)
    sid = str(doc["sweep_id"])
    if not sid or "/" in sid or sid.startswith("."):
        raise ConfigError("must be a plain directory name", "sweep_id")
    grid = doc["grid"]
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("grid needs at least one axis", "grid")
    for key, values in grid.items():
        if key not in SWEEP_AXES:
            raise ConfigError(f"unknown axis; expected one of {', '.join(SWEEP_AXES)}", f"grid.{key}")
        if not isinstance(values, list) or not values:
            raise ConfigError("axis must be a non-empty list", f"grid.{key}")
    for v in grid.get("variant", []):
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}", "grid.variant")
    workers = doc.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("must be an integer >= 1", "workers")
    base = copy.deepcopy(doc["base"])
    base.setdefault("seeds", grid.get("seeds", [0]))
    cfgmod.resolve(base)  # fail early on a bad base
    return {"sweep_id": sid, "base": base, "grid": grid, "workers": workers}


def _label(x) -> str:
    if x is None:
        return "none"
    return format(x, "g") if isinstance(x, float) else str(x)


def expand(sweep: dict, seed=None, variants=None) -> list[dict]:
    """Grid cells in a fixed order, each with its own resolved config."""
    base = sweep["base"]
    grid = dict(sweep["grid"])
    if seed is not None:
        grid["seeds"] = [seed]
    if variants:
        grid["variant"] = list(variants)
    axes = [a for a in SWEEP_AXES if a in grid]
    cells = []
    for combo in itertools.product(*(grid[a] for a in axes)):
        point = dict(zip(axes, combo))
        doc = copy.deepcopy(base)
        parts = []
        if "variant" in point:
            kinds = {v["kind"]: v for v in base.get("variants", [])}
            doc["variants"] = [kinds.get(point["variant"], {"kind": point["variant"]})]
            parts.append(point["variant"])
        if "alpha" in point:
            doc.setdefault("partition", {})["alpha"] = point["alpha"]
            parts.append(f"a{_label(point['alpha'])}")
        if "epsilon" in point:
            priv = doc.setdefault("privacy", {})
            if point["epsilon"] is None:
                priv["enabled"] = False
            else:
                priv.update(enabled=True, epsilon=point["epsilon"])
            parts.append(f"e{_label(point['epsilon'])}")
        if "target_rho" in point:
            doc.setdefault("constraints", {})["target_rho"] = point["target_rho"]
            parts.append(f"r{_label(point['target_rho'])}")
        if "seeds" in point:
            doc["seeds"] = [point["seeds"]]
        else:
            doc["seeds"] = doc["seeds"][:1]
        parts.append(f"s{doc['seeds'][0]}")
        cells.append({"cell_id": "_".join(parts), "point": point, "config": cfgmod.resolve(doc)})
    return cells


def run_cell(cell: dict, out_dir: str) -> dict:
    """Run one grid cell and write its artifacts; returns its summary row."""
    config = cell["config"]
    results = execute(config)
    extra = {"cell_id": cell["cell_id"], "grid_point": cell["point"]}
    artifacts.write_run(Path(out_dir) / cell["cell_id"], config, results, extra)
    res = results[0]
    metric = res.series("metric")
    row = {
        "cell_id": cell["cell_id"],
        "variant": res.variant,
        "alpha": config["partition"]["alpha"],
        "epsilon": config["privacy"]["epsilon"] if config["privacy"]["enabled"] else None,
        "target_rho": config["constraints"]["target_rho"],
        "seed": res.seed,
        "rounds_to_convergence": analysis.rounds_to_convergence(metric),
        "final_metric": float(metric[-1]) if len(metric) else float("nan"),
        "mean_rho": float(np.mean(res.series("rho"))) if len(metric) else float("nan"),
        "utility_loss": None,
    }
    if config["privacy"]["enabled"] and len(metric):
        # the same cell without noise is the utility reference
        twin = copy.deepcopy(config)
        twin["privacy"]["enabled"] = False
        clean = execute(twin)[0].series("metric")[-1]
        if clean > 0:
            row["utility_loss"] = analysis.utility_loss(row["final_metric"], clean)
    return row


def cmd_sweep(sweep_path, out, seed=None, variants=None) -> int:
    sweep = load_sweep(sweep_path)
    cells = expand(sweep, seed, variants)
    root = Path(out) / sweep["sweep_id"]
    root.mkdir(parents=True, exist_ok=True)
    rows, failures = {}, []

    def record(cell, fut_or_row):
        try:
            rows[cell["cell_id"]] = fut_or_row() if callable(fut_or_row) else fut_or_row
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            failures.append({"cell_id": cell["cell_id"], "error": type(exc).__name__, "message": str(exc)})
            log.warning("cell %s failed: %s", cell["cell_id"], exc)

    if sweep["workers"] == 1:
        for cell in cells:
            record(cell, lambda c=cell: run_cell(c, str(root)))
    else:
        with cf.ProcessPoolExecutor(max_workers=sweep["workers"]) as pool:
            futures = [(cell, pool.submit(run_cell, cell, str(root))) for cell in cells]
            for cell, fut in futures:
                record(cell, fut.result)

    ordered = [rows[c["cell_id"]] for c in cells if c["cell_id"] in rows]
    artifacts.write_atomic(root / "summary.csv", artifacts.summary_csv(ordered))
    artifacts.write_json(root / "sweep.json", {
        "sweep_id": sweep["sweep_id"],
        "grid": sweep["grid"],
        "cells": [c["cell_id"] for c in cells],
        "failures": failures,
    })
    return 0 if not failures else 3


# ---------------------------------------------------------------- fit


def _locate(results_dir, name) -> Path:
    p = Path(results_dir)
    if p.is_file():
        return p
    if (p / name).exists():
        return p / name
    raise ConfigError(f"no {name} here", str(p))


def fit_report(results_dir, kind: str, variants=None, n_boot: int = 1000) -> dict:
    if kind == "convergence":
        path = _locate(results_dir, "rounds.csv")
        rows = artifacts.read_table(path, ("variant", "seed", "round", "grad_norm_sq", "rho"))
        groups = {}
        for r in rows:
            groups.setdefault((r["variant"], int(r["seed"])), []).append(r)
        fits = []
        for (variant, seed), rs in groups.items():
            if variants and variant not in variants:
                continue
            rs.sort(key=lambda r: int(r["round"]))
            fit = analysis.fit_convergence_rate(
                artifacts.column(rs, "grad_norm_sq"), artifacts.column(rs, "rho"), n_boot=n_boot, seed=seed,
                t=artifacts.column(rs, "round"),
            )
            fits.append({"variant": variant, "seed": seed, "rounds": len(rs), "fit": fit.to_dict()})
        body = {"fits": fits}
    elif kind == "violation":
        path = _locate(results_dir, "summary.csv")
        rows = artifacts.read_table(path, ("mean_rho", "final_metric"))
        if variants:
            rows = [r for r in rows if r.get("variant") in variants]
        pts = np.column_stack([artifacts.column(rows, "mean_rho"), artifacts.column(rows, "final_metric")])
        pts = pts[np.all(np.isfinite(pts), axis=1)]
        body = {"points": pts.tolist(), "fit": analysis.proposition1_fit(pts).to_dict()}
    elif kind == "zones":
        try:
            path = _locate(results_dir, "rounds.csv")
        except ConfigError:
            path = _locate(results_dir, "summary.csv")
        col = "rho" if path.name != "summary.csv" else "mean_rho"
        rows = artifacts.read_table(path, (col,))
        if variants:
            rows = [r for r in rows if r.get("variant") in variants]
        rho = artifacts.column(rows, col)
        counts = {z: 0 for z in analysis.ZONES}
        for x in rho:
            counts[analysis.classify_zone(float(x)).zone] += 1
        body = {"column": col, "rows": len(rho), "counts": counts}
    else:
        raise ConfigError(f"unknown fit kind {kind!r}", "--kind")
    return {"kind": kind, "input": str(path), "variants": list(variants or []), **body}


def cmd_fit(results_dir, kind, out=None, variants=None, n_boot=1000) -> int:
    report = fit_report(results_dir, kind, variants, n_boot)
    target = Path(out) if out else (Path(results_dir) if Path(results_dir).is_dir() else Path(results_dir).parent) / f"fit_{kind}.json"
    artifacts.write_json(target, report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- report


def cmd_report(results_dir, out=None) -> int:
    from . import plotting

    src = Path(results_dir)
    dest = Path(out) if out else src
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    table = []
    if (src / "rounds.csv").exists():
        rows = artifacts.read_table(src / "rounds.csv", ("variant", "seed", "round", "metric", "rho", "grad_norm_sq"))
        written += plotting.round_figures(rows, dest)
        groups = {}
        for r in rows:
            groups.setdefault((r["variant"], r["seed"]), []).append(r)
        for (variant, seed), rs in groups.items():
            metric = artifacts.column(rs, "metric")
            table.append({
                "variant": variant, "seed": seed,
                "rounds_to_convergence": analysis.rounds_to_convergence(metric),
                "final_metric": metric[-1], "mean_rho": float(np.mean(artifacts.column(rs, "rho"))),
            })
    if (src / "summary.csv").exists():
        rows = artifacts.read_table(src / "summary.csv", ("variant", "mean_rho", "final_metric"))
        written += plotting.summary_figures(rows, dest)
        for r in rows:
            table.append({k: r[k] for k in ("variant", "seed", "rounds_to_convergence", "final_metric", "mean_rho")})
    if not table:
        raise ConfigError("neither rounds.csv nor summary.csv found", str(src))
    cols = ("variant", "seed", "rounds_to_convergence", "final_metric", "mean_rho")
    lines = [",".join(cols)]
    for row in table:
        lines.append(",".join(row[c] if isinstance(row[c], str) else artifacts.fmt(row[c]) for c in cols))
    text = "\n".join(lines) + "\n"
    artifacts.write_atomic(dest / "report.csv", text)
    sys.stdout.write(text)
    for p in written:
        log.info("wrote %s", p)
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scfalab", description="Constraint-weighted federated learning simulator.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, help_ in (("run", "run one config"), ("sweep", "run a grid of configs")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed-override", type=int, default=None)
        p.add_argument("--variant", action="append", choices=VARIANTS)

    p = sub.add_parser("fit", help="fit an analysis form to results")
    p.add_argument("results", help="run or sweep directory, or a CSV file")
    p.add_argument("--kind", required=True, choices=("convergence", "violation", "zones"))
    p.add_argument("--out", default=None)
    p.add_argument("--variant", action="append", choices=VARIANTS)
    p.add_argument("--boot", type=int, default=1000, help="bootstrap resamples for convergence fits")

    p = sub.add_parser("report", help="figures and a summary table")
    p.add_argument("results")
    p.add_argument("--out", default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed_override, args.variant)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.out, args.seed_override, args.variant)
        if args.command == "fit":
            return cmd_fit(args.results, args.kind, args.out, args.variant, args.boot)
        return cmd_report(args.results, args.out)
    except ConfigError as exc:
        _error_record(exc, getattr(exc, "path", None))
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("%s", traceback.format_exc())
        _error_record(exc, None)
        return 1


def _error_record(exc, path):
    rec = {"error": type(exc).__name__, "message": getattr(exc, "message", str(exc))}
    if path:
        rec["path"] = path
    sys.stderr.write(json.dumps(rec) + "\n")


if __name__ == "__main__":
    sys.exit(main())
