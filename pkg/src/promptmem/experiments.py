"""Seeded multi-run experiments: ablations, the two declared sweeps and the probe report.

Every runner reuses a finished checkpoint when the stored config equals the
requested one, so reruns after an interruption only pay for missing work.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import TrainConfig
from .divergence import dump_to_dataset, probe
from .errors import ConfigError, ParseError
from .prompt_memory import STRATEGIES
from .training import adapt_train, burn_in_train, evaluate_map, export_features

log = logging.getLogger(__name__)

REPORT_VERSION = 1


def _finished(path: Path, cfg: TrainConfig, epochs: int) -> bool:
    if not path.exists():
        return False
    try:
        meta = Checkpoint.load(path).meta
    except Exception:  # unreadable leftovers are simply recomputed
        return False
    return meta.get("config") == cfg.to_flat() and meta.get("epoch") == epochs


def seeded(cfg: TrainConfig, seed: int, out: str | Path) -> TrainConfig:
    c = cfg.copy()
    c.seed = seed
    c.seeds = str(seed)  # a single run does not depend on its siblings
    c.out = str(out)
    return c


def ensure_burn_in(cfg: TrainConfig, seed: int, root: str | Path | None = None, callback=None) -> Path:
    """Burn-in for one seed under ``<root>/burn_in_s<seed>``, reusing a finished run."""
    c = seeded(cfg, seed, Path(root or cfg.out) / f"burn_in_s{seed}")
    last = Path(c.out) / "burn_in" / "last.ckpt"
    if not _finished(last, c, c.burn_in.epochs):
        burn_in_train(c, callback=callback)
    return last


def ensure_adapt(cfg: TrainConfig, burn_in_ckpt: str | Path, callback=None) -> Path:
    last = Path(cfg.out) / "adapt" / "last.ckpt"
    if not _finished(last, cfg, cfg.adapt.epochs):
        adapt_train(cfg, burn_in_ckpt, callback=callback)
    return last


def ablation_config(cfg: TrainConfig) -> TrainConfig:
    """Mean-teacher-only variant: every pool level off and no alignment terms."""
    c = cfg.copy()
    c.update({"pdm.input.enabled": False, "pdm.token.enabled": False, "pdm.query.enabled": False,
              "loss.lambda_epa": 0.0, "loss.lambda_dpa": 0.0})
    return c


def target_map(ckpt: str | Path, cfg: TrainConfig) -> float:
    return evaluate_map(ckpt, cfg.data.root, "target", "val", cfg.eval_iou)["map"]


def _write_report(rows: list[dict], path: str | Path | None) -> None:
    if path is None:
        return
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w") as fh:
        for r in rows:
            fh.write(json.dumps(dict(r, format_version=REPORT_VERSION), sort_keys=True) + "\n")


def _variant_runs(cfg: TrainConfig, tag: str, root: Path, burn_in: dict[int, Path]) -> dict:
    per_seed = {}
    for s in cfg.seed_list():
        c = seeded(cfg, s, root / f"{tag}_s{s}")
        per_seed[s] = target_map(ensure_adapt(c, burn_in[s]), cfg)
    vals = list(per_seed.values())
    return {"map": float(np.mean(vals)), "per_seed": {str(k): v for k, v in per_seed.items()},
            "seeds": cfg.seed_list()}


def ablation_study(cfg: TrainConfig, report: str | Path | None = None) -> list[dict]:
    """Source-only vs mean-teacher-only vs full pipeline, target mAP per seed."""
    root = Path(cfg.out)
    burn_in = {s: ensure_burn_in(cfg, s, root) for s in cfg.seed_list()}
    source_only = {str(s): target_map(p, cfg) for s, p in burn_in.items()}
    rows = [{"model": "source_only", "map": float(np.mean(list(source_only.values()))),
             "per_seed": source_only, "seeds": cfg.seed_list()}]
    rows.append({"model": "mean_teacher_only", **_variant_runs(ablation_config(cfg), "as0", root, burn_in)})
    rows.append({"model": "full", **_variant_runs(cfg, "full", root, burn_in)})
    _write_report(rows, report)
    return rows


def sweep_memory_size(cfg: TrainConfig, sizes=(1, 4, 10, 16), report: str | Path | None = None) -> list[dict]:
    """Adapt once per pool size (same N on every level) under the configured seeds.

    ``M`` is clipped to the pool size, so the size-1 row is the single-prompt case.
    """
    sizes = list(sizes)
    if not sizes:
        raise ConfigError("sweep_memory_size needs at least one size")
    root = Path(cfg.out)
    burn_in = {s: ensure_burn_in(cfg, s, root) for s in cfg.seed_list()}
    rows = []
    for n in sizes:
        c = cfg.copy()
        c.update({"pdm.input.N": n, "pdm.token.N": n, "pdm.query.N": n, "pdm.M": min(cfg.pdm.M, n)})
        tag = "full" if c.to_flat() == cfg.to_flat() else f"size{n}"
        rows.append({"size": n, "M": c.pdm.M, **_variant_runs(c, tag, root, burn_in)})
        log.info("memory size %d -> %.4f", n, rows[-1]["map"])
    _write_report(rows, report)
    return rows


def compare_selection_strategies(cfg: TrainConfig, strategies=STRATEGIES, report: str | Path | None = None) -> list[dict]:
    strategies = list(strategies)
    if not strategies:
        raise ConfigError("compare_selection_strategies needs at least one strategy")
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise ConfigError(f"unknown strategies {sorted(unknown)}")
    root = Path(cfg.out)
    burn_in = {s: ensure_burn_in(cfg, s, root) for s in cfg.seed_list()}
    rows = []
    for name in strategies:
        c = cfg.copy()
        c.update({"pdm.strategy": name})
        # the default strategy shares the plain pipeline's run directory
        tag = "full" if c.to_flat() == cfg.to_flat() else f"strategy_{name}"
        rows.append({"strategy": name, **_variant_runs(c, tag, root, burn_in)})
    _write_report(rows, report)
    return rows


def run_probe(dumps: dict[str, str | Path], seeds=(0,), epochs: int = 200,
              report: str | Path | None = None) -> list[dict]:
    """Probe each named feature dump; one row per model with seed-averaged errors."""
    rows = []
    for name, path in dumps.items():
        if not Path(path).exists():
            raise FileNotFoundError(f"feature dump not found: {path}")
        ds = dump_to_dataset(path)
        src, tgt = ds.features[: ds.p], ds.features[ds.p:]
        ests = [probe(src, tgt, seed=s, epochs=epochs) for s in seeds]
        rows.append({
            "model": name,
            "eps_source": float(np.mean([e.eps_source for e in ests])),
            "eps_target": float(np.mean([e.eps_target for e in ests])),
            "d_h": float(np.mean([e.d_h for e in ests])),
            "accuracy": float(np.mean([e.accuracy for e in ests])),
            "seeds": list(seeds),
            "dump": str(path),
        })
    _write_report(rows, report)
    return rows


def probe_models(cfg: TrainConfig, pairs: dict[int, dict[str, Path]], layer: str = "encoder_mean",
                 epochs: int = 200) -> dict[str, float]:
    """Export features for each (seed, model) checkpoint and probe them with that seed.

    Returns the mean held-out accuracy per model name.
    """
    acc: dict[str, list[float]] = {}
    for seed, models in pairs.items():
        for name, ckpt in models.items():
            dump = Path(ckpt).with_name(f"features_{layer}.jsonl")
            if not dump.exists() or dump.stat().st_mtime < Path(ckpt).stat().st_mtime:
                export_features(ckpt, cfg.data.root, dump, layer)
            row = run_probe({name: dump}, seeds=(seed,), epochs=epochs)[0]
            acc.setdefault(name, []).append(row["accuracy"])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def read_report(path: str | Path) -> list[dict]:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{n}: not a JSON record") from exc
    return rows
