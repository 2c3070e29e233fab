"""File formats: pattern CSV, K-estimate CSV with JSON sidecar, raw and
summary study CSVs, and fit JSON.

Every file written here starts with a provenance comment line
``# kcontrast: {json}`` carrying the resolved configuration, so any row
is reproducible standalone.  Floats are written with ``repr`` (shortest
round-trip), which makes aggregation byte-recomputable from the raw
table; missing values are empty fields.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import KEstimate, PointPattern, Window
from .study import ReplicateRow, StudyReport

__all__ = [
    "provenance_line",
    "write_pattern_csv",
    "read_pattern_csv",
    "write_kest",
    "write_fit_json",
    "write_raw_csv",
    "read_raw_csv",
    "write_summary_csv",
    "write_study",
]

PROVENANCE_PREFIX = "# kcontrast: "


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "" if math.isnan(v) else repr(v)
    return str(value)


def _parse_float(text: str) -> float:
    return math.nan if text == "" else float(text)


def provenance_line(config: dict) -> str:
    return PROVENANCE_PREFIX + json.dumps(config, sort_keys=True, separators=(",", ":"))


def _read_lines(path) -> tuple[dict | None, list[str]]:
    config = None
    data_lines = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            if line.startswith(PROVENANCE_PREFIX) and config is None:
                config = json.loads(line[len(PROVENANCE_PREFIX):])
            continue
        if line.strip():
            data_lines.append(line)
    return config, data_lines


def window_to_dict(window: Window) -> dict:
    d = {"x_range": list(window.x_range), "y_range": list(window.y_range)}
    if window.t_range is not None:
        d["t_range"] = list(window.t_range)
    return d


def window_from_dict(d: dict) -> Window:
    t = d.get("t_range")
    return Window(tuple(d["x_range"]), tuple(d["y_range"]), None if t is None else tuple(t))


def write_pattern_csv(pattern: PointPattern, path, config: dict | None = None) -> None:
    """Pattern CSV: header ``x,y[,t]``, one point per row, full precision."""
    config = dict(config or {})
    config.setdefault("window", window_to_dict(pattern.window))
    header = "x,y,t" if pattern.is_spatiotemporal else "x,y"
    lines = [provenance_line(config), header]
    lines += [",".join(_fmt(v) for v in row) for row in pattern.coords]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pattern_csv(path, window: Window | None = None) -> PointPattern:
    """Read a pattern CSV; the window comes from the provenance header
    unless given explicitly."""
    config, lines = _read_lines(path)
    if not lines:
        raise ValueError(f"{path} has no header line")
    header = [h.strip() for h in lines[0].split(",")]
    if header not in (["x", "y"], ["x", "y", "t"]):
        raise ValueError(f"unexpected pattern header {header}")
    if window is None:
        if not config or "window" not in config:
            raise ValueError(f"{path} has no window in its provenance header; pass one")
        window = window_from_dict(config["window"])
    rows = [[float(v) for v in line.split(",")] for line in lines[1:]]
    coords = np.asarray(rows, dtype=float) if rows else np.empty((0, len(header)))
    return PointPattern(coords, window)


def write_kest(estimate: KEstimate, path_csv, path_json=None, config: dict | None = None,
               weights_description: str | None = None) -> None:
    """K-estimate CSV (columns ``r[,h],value``) plus a JSON sidecar with
    the kind, grid spec and weighting description."""
    grid = estimate.grid
    lines = [provenance_line(dict(config or {}))]
    if grid.is_spatiotemporal:
        lines.append("r,h,value")
        for a, r in enumerate(grid.r_values):
            for b, h in enumerate(grid.h_values):
                lines.append(f"{_fmt(r)},{_fmt(h)},{_fmt(estimate.values[a, b])}")
    else:
        lines.append("r,value")
        for a, r in enumerate(grid.r_values):
            lines.append(f"{_fmt(r)},{_fmt(estimate.values[a])}")
    Path(path_csv).write_text("\n".join(lines) + "\n")
    sidecar = {
        "kind": estimate.kind,
        "point_index": estimate.point_index,
        "grid": {
            "r_values": [float(v) for v in grid.r_values],
            "h_values": None if grid.h_values is None else [float(v) for v in grid.h_values],
        },
        "weights": weights_description,
        "config": dict(config or {}),
    }
    if path_json is None:
        path_json = Path(path_csv).with_suffix(".json")
    Path(path_json).write_text(json.dumps(sidecar, indent=2) + "\n")


def write_fit_json(fit, path, config: dict | None = None, param_names: Sequence[str] | None = None) -> None:
    doc = fit.to_dict()
    doc["config"] = dict(config or {})
    if param_names is not None:
        doc["param_names"] = list(param_names)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


RAW_HEADER = ["rep", "param", "true", "estimate", "se", "converged", "R_used"]
SUMMARY_HEADER = ["param", "true", "mean", "sqrt_mse", "mean_se"]
SUMMARY_HEADER_LOCAL = SUMMARY_HEADER + ["q25", "q50", "q75"]


def write_raw_csv(rows: Iterable[ReplicateRow], path, config: dict | None = None) -> None:
    lines = [provenance_line(dict(config or {})), ",".join(RAW_HEADER)]
    for r in rows:
        lines.append(
            ",".join(
                [
                    str(r.rep),
                    r.param,
                    _fmt(r.true),
                    _fmt(r.estimate),
                    _fmt(r.se),
                    _fmt(bool(r.converged)),
                    _fmt(r.r_used),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_raw_csv(path) -> tuple[list[ReplicateRow], dict | None]:
    config, lines = _read_lines(path)
    header = lines[0].split(",")
    if header != RAW_HEADER:
        raise ValueError(f"unexpected raw table header {header}")
    rows = []
    for line in lines[1:]:
        rep, param, true, est, se, conv, r_used = line.split(",")
        rows.append(
            ReplicateRow(
                rep=int(rep),
                param=param,
                true=float(true),
                estimate=_parse_float(est),
                se=_parse_float(se),
                converged=conv == "true",
                r_used=None if r_used == "" else float(r_used),
            )
        )
    return rows, config


def write_summary_csv(report: StudyReport, path, config: dict | None = None) -> None:
    local = any(p.q25 is not None for p in report.params)
    header = SUMMARY_HEADER_LOCAL if local else SUMMARY_HEADER
    lines = [provenance_line(dict(config or {})), ",".join(header)]
    for p in report.params:
        row = [p.param, _fmt(p.true), _fmt(p.mean), _fmt(p.sqrt_mse), _fmt(p.mean_se)]
        if local:
            row += [_fmt(p.q25), _fmt(p.q50), _fmt(p.q75)]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_study(report: StudyReport, out_dir, config: dict | None = None) -> dict[str, Path]:
    """Write raw.csv, summary.csv and study.json for a finished study."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = dict(config or (report.config.to_dict() if report.config else {}))
    paths = {
        "raw": out / "raw.csv",
        "summary": out / "summary.csv",
        "study": out / "study.json",
    }
    write_raw_csv(report.rows, paths["raw"], config)
    write_summary_csv(report, paths["summary"], config)
    doc = {
        "config": config,
        "n_replicates": report.n_replicates,
        "n_failed": report.n_failed,
        "n_singular": report.n_singular,
        "mean_r": report.mean_r,
        "params": [
            {k: getattr(p, k) for k in ("param", "true", "mean", "sqrt_mse", "mean_se", "q25", "q50", "q75")}
            for p in report.params
        ],
    }
    paths["study"].write_text(json.dumps(doc, indent=2) + "\n")
    return paths
