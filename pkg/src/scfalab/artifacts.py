"""On-disk artifacts: manifests, per-round CSVs, model binaries, summaries.

All files are written atomically (temporary file in the same directory,
then ``os.replace``) so concurrent sweep cells never interleave output.
Floats are printed with 17 significant digits, which round-trips float64
exactly.  Wall-clock timings are kept out of the CSVs so replaying a
manifest reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import math
import os
import tempfile
from importlib import metadata
from pathlib import Path

import numpy as np

from .engine import RunResult
from .errors import ConfigError

ROUND_COLUMNS = (
    "variant",
    "seed",
    "round",
    "rho",
    "grad_norm_sq",
    "global_loss",
    "metric",
    "snr",
    "degenerate",
    "participants",
    "scores",
    "weights",
    "dropped",
)

SUMMARY_COLUMNS = (
    "cell_id",
    "variant",
    "alpha",
    "epsilon",
    "target_rho",
    "seed",
    "rounds_to_convergence",
    "final_metric",
    "mean_rho",
    "utility_loss",
)


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _join(xs) -> str:
    return ";".join(fmt(x) for x in xs)


def write_atomic(path, payload: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rounds_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_COLUMNS)
    for res in results:
        for r in res.records:
            w.writerow([
                res.variant, res.seed, r.round, fmt(r.rho), fmt(r.grad_norm_sq), fmt(r.global_loss),
                fmt(r.metric), fmt(r.snr), fmt(r.degenerate), _join(r.participants), _join(r.scores),
                _join(r.weights), _join(r.dropped),
            ])
    return buf.getvalue()


def model_bytes(results: list[RunResult]) -> bytes:
    """Final parameters stacked as (runs, d) float64 little-endian, row-major."""
    if not results:
        return b""
    return np.stack([np.asarray(r.final_params, dtype="<f8") for r in results]).tobytes(order="C")


def read_model(path, runs: int) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if runs < 1 or raw.size % runs:
        raise ConfigError(f"{raw.size} values do not split into {runs} runs", str(path))
    return raw.reshape(runs, -1).copy()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def manifest(config: dict, runs: list[dict], extra: dict | None = None) -> dict:
    doc = {
        "schema_version": config.get("schema_version", "1"),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "package_version": _version(),
        "config": config,
        "runs": runs,
    }
    if extra:
        doc.update(extra)
    return doc


def write_json(path, doc) -> None:
    write_atomic(path, json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


def write_run(out_dir, config: dict, results: list[RunResult], extra: dict | None = None) -> dict:
    """manifest.json, rounds.csv and model.bin for one run directory."""
    out_dir = Path(out_dir)
    runs = [
        {"variant": r.variant, "seed": r.seed, "num_params": int(np.size(r.final_params)), "events": r.events}
        for r in results
    ]
    doc = manifest(config, runs, extra)
    write_atomic(out_dir / "rounds.csv", rounds_csv(results))
    write_atomic(out_dir / "model.bin", model_bytes(results))
    write_json(out_dir / "manifest.json", doc)
    return doc


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([fmt(row.get(c)) if not isinstance(row.get(c), str) else row[c] for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def read_table(path, required=()) -> list[dict]:
    """Rows of a CSV as dicts; raises naming the first missing column."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("file not found", str(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise ConfigError(f"missing column {col!r}", str(path))
        return list(reader)


def column(rows, name) -> np.ndarray:
    return np.array([float(r[name]) if r[name] != "" else math.nan for r in rows], dtype=float)
