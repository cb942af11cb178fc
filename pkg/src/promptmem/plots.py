"""Render already-recorded numbers (metrics, sweep and probe reports) as PNG charts."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError, ParseError  # noqa: E402


class EmptyRecordsError(DataError):
    """The record file parsed but held nothing to draw."""

    kind = "empty"


def read_records(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"record file not found: {path}")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{n}: malformed JSON record") from exc
        if not isinstance(row, dict):
            raise ParseError(f"{path}:{n}: record is not an object")
        rows.append(row)
    if not rows:
        raise EmptyRecordsError(f"{path}: no records")
    return rows


def record_kind(rows: list[dict]) -> str:
    first = rows[0]
    if "histograms" in first:
        return "metrics"
    if "size" in first:
        return "sweep"
    if "strategy" in first:
        return "strategies"
    if "eps_source" in first:
        return "probe"
    if "map" in first and "model" in first:
        return "ablation"
    raise ParseError(f"unrecognized record layout with keys {sorted(first)}")


def _need(row: dict, key: str):
    if key not in row:
        raise ParseError(f"record is missing field {key!r}")
    return row[key]


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_histograms(rows: list[dict], out_dir: Path, stem: str) -> list[Path]:
    """One bar chart per pool from the last epoch that recorded selections."""
    snap = next((r["histograms"] for r in reversed(rows) if r.get("histograms")), None)
    if not snap:
        raise EmptyRecordsError("metrics file holds no selection histograms")
    paths = []
    for pool, counts in sorted(snap.items()):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(range(len(counts)), counts, color="#4477aa")
        ax.set_xlabel("prompt index")
        ax.set_ylabel("selections")
        ax.set_title(pool.replace("_", " "))
        paths.append(_save(fig, out_dir / f"{stem}_hist_{pool}.png"))
    return paths


def plot_sweep(rows: list[dict], out_dir: Path, stem: str) -> list[Path]:
    rows = sorted(rows, key=lambda r: _need(r, "size"))
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot([r["size"] for r in rows], [_need(r, "map") for r in rows], marker="o")
    ax.set_xlabel("memory size N")
    ax.set_ylabel("target mAP@0.5")
    return [_save(fig, out_dir / f"{stem}_memory_size.png")]


def plot_bars(rows: list[dict], out_dir: Path, stem: str, key: str, suffix: str) -> list[Path]:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar([str(_need(r, key)) for r in rows], [_need(r, "map") for r in rows], color="#228833")
    ax.set_ylabel("target mAP@0.5")
    return [_save(fig, out_dir / f"{stem}_{suffix}.png")]


def plot_probe(rows: list[dict], out_dir: Path, stem: str) -> list[Path]:
    names = [str(_need(r, "model")) for r in rows]
    xs = range(len(rows))
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar([x - 0.2 for x in xs], [_need(r, "eps_source") for r in rows], 0.4, label="source error")
    ax.bar([x + 0.2 for x in xs], [_need(r, "eps_target") for r in rows], 0.4, label="target error")
    ax.set_xticks(list(xs), names)
    ax.set_ylabel("domain classification error")
    ax.legend()
    return [_save(fig, out_dir / f"{stem}_probe.png")]


def emit_plots(paths, out_dir: str | Path) -> list[Path]:
    """Render every record file; raises EmptyRecordsError if nothing could be drawn."""
    out_dir = Path(out_dir)
    written: list[Path] = []
    for p in paths:
        rows = read_records(p)
        stem = Path(p).stem
        kind = record_kind(rows)
        if kind == "metrics":
            written += plot_histograms(rows, out_dir, stem)
        elif kind == "sweep":
            written += plot_sweep(rows, out_dir, stem)
        elif kind == "strategies":
            written += plot_bars(rows, out_dir, stem, "strategy", "strategies")
        elif kind == "ablation":
            written += plot_bars(rows, out_dir, stem, "model", "ablation")
        else:
            written += plot_probe(rows, out_dir, stem)
    if not written:
        raise EmptyRecordsError("no record files given")
    return written
