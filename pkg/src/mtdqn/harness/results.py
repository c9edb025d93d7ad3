"""Run results and their CSV/JSON files.

Floats are written with ``repr`` so every value parses back to the identical
double; metrics that do not apply (value errors of a supervised head) are
written as ``NA``. Wall-clock time is kept in memory only, so re-running the
same inputs rewrites byte-identical files.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mtdqn.errors import FormatError
from mtdqn.harness.evaluation import N_POSITIONS, Metrics

NA = "NA"

METRIC_COLUMNS = (
    "mean_return", "ndcg5", "hit_rate", "precision", "recall", "f1", "threshold",
    "mse", "mae", "ils", "diversity",
)
POSITION_COLUMNS = tuple(f"hit_p{i + 1}" for i in range(N_POSITIONS))
COUNT_COLUMNS = ("n_sessions", "n_steps")
RESULT_HEADER = ("variant", "seed", "config_hash", *METRIC_COLUMNS, *POSITION_COLUMNS, *COUNT_COLUMNS)


@dataclass(frozen=True)
class RunResult:
    variant: str
    seed: int
    config_hash: str
    metrics: Metrics
    epoch_losses: tuple[float | None, ...] = ()
    wall_clock: float = field(default=0.0, compare=False)


def _fmt(x: float | None) -> str:
    return NA if x is None else repr(float(x))


def _parse(s: str, where: str) -> float | None:
    if s == NA:
        return None
    try:
        return float(s)
    except ValueError:
        raise FormatError(f"{where}: {s!r} is not a number") from None


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    try:
        path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def _read_csv(path: Path, header: Sequence[str]) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(header):
            raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def result_row(r: RunResult) -> list[str]:
    m = r.metrics
    return [
        r.variant, str(r.seed), r.config_hash,
        *(_fmt(getattr(m, c)) for c in METRIC_COLUMNS),
        *(_fmt(p) for p in m.hit_positions),
        str(m.n_sessions), str(m.n_steps),
    ]


def summarize(results: Sequence[RunResult]) -> list[list[str]]:
    """One row per variant (first-seen order) with metric means over seeds."""
    order: list[str] = []
    for r in results:
        if r.variant not in order:
            order.append(r.variant)
    rows = []
    for v in order:
        group = [r.metrics for r in results if r.variant == v]
        cells = []
        for c in METRIC_COLUMNS:
            vals = [getattr(m, c) for m in group]
            cells.append(NA if any(x is None for x in vals) else repr(float(np.mean(vals))))
        rows.append([v, str(len(group)), *cells])
    return rows


def emit_results(results: Sequence[RunResult], out_dir: str | Path, manifest: dict | None = None,
                 attention_csv: str | None = None) -> dict[str, Path]:
    """Write every result file into ``out_dir`` and return their paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    paths = {
        "results": out / "results.csv",
        "summary": out / "summary.csv",
        "relevance_diversity": out / "relevance_diversity.csv",
        "hit_positions": out / "hit_positions.csv",
        "loss_curve": out / "loss_curve.csv",
        "manifest": out / "manifest.json",
    }
    _write_csv(paths["results"], RESULT_HEADER, [result_row(r) for r in results])
    _write_csv(paths["summary"], ("variant", "n_seeds", *METRIC_COLUMNS), summarize(results))
    _write_csv(paths["relevance_diversity"], ("variant", "seed", "ndcg5", "diversity"),
               [[r.variant, str(r.seed), _fmt(r.metrics.ndcg5), _fmt(r.metrics.diversity)] for r in results])
    _write_csv(paths["hit_positions"], ("variant", "seed", "position", "proportion"),
               [[r.variant, str(r.seed), str(i + 1), _fmt(p)]
                for r in results for i, p in enumerate(r.metrics.hit_positions)])
    _write_csv(paths["loss_curve"], ("variant", "seed", "epoch", "mean_loss"),
               [[r.variant, str(r.seed), str(e + 1), _fmt(x)] for r in results for e, x in enumerate(r.epoch_losses)])
    if attention_csv is not None:
        paths["attention"] = out / "attention.csv"
        paths["attention"].write_text(attention_csv, encoding="utf-8")
    body = dict(manifest or {})
    body["runs"] = [{"variant": r.variant, "seed": r.seed, "config_hash": r.config_hash} for r in results]
    body["files"] = sorted(p.name for k, p in paths.items() if k != "manifest")
    paths["manifest"].write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_results(out_dir: str | Path) -> list[RunResult]:
    """Parse results.csv and loss_curve.csv back into run results."""
    out = Path(out_dir)
    rows = _read_csv(out / "results.csv", RESULT_HEADER)
    losses: dict[tuple[str, int], list[float | None]] = {}
    for i, row in enumerate(_read_csv(out / "loss_curve.csv", ("variant", "seed", "epoch", "mean_loss")), start=2):
        losses.setdefault((row["variant"], int(row["seed"])), []).append(
            _parse(row["mean_loss"], f"loss_curve.csv line {i}"))
    results = []
    for i, row in enumerate(rows, start=2):
        where = f"results.csv line {i}"
        vals = {c: _parse(row[c], where) for c in METRIC_COLUMNS}
        metrics = Metrics(
            **vals,
            hit_positions=tuple(_parse(row[c], where) for c in POSITION_COLUMNS),
            n_sessions=int(row["n_sessions"]),
            n_steps=int(row["n_steps"]),
        )
        key = (row["variant"], int(row["seed"]))
        results.append(RunResult(key[0], key[1], row["config_hash"], metrics, tuple(losses.get(key, []))))
    return results


def metrics_from_dict(d: dict) -> Metrics:
    d = dict(d)
    d["hit_positions"] = tuple(d["hit_positions"])
    return Metrics(**d)


def metrics_to_dict(m: Metrics) -> dict:
    return dataclasses.asdict(m)
