"""End-to-end acceptance suite: one PASS/FAIL line per criterion.

Criteria 7 to 10 train real models at the default desk configuration.  Their
artifacts are cached under ``$PROMPTMEM_ACCEPTANCE_ROOT`` (default
``runs/acceptance`` in the repository) and reused when the stored config
matches, so only the first session pays the full training cost.
"""

import json
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

import conftest
from oracles import brute_force_assignment, brute_force_subset, reference_map
from promptmem import experiments
from promptmem.alignment import dpa_loss, epa_loss
from promptmem.checkpoint import Checkpoint
from promptmem.config import TrainConfig
from promptmem.criterion import LossWeights, assignment_cost, hungarian_match, matching_cost
from promptmem.divergence import h_divergence, probe
from promptmem.metrics import ImageDetections, ImageTruth, mean_average_precision
from promptmem.prompt_memory import STRATEGIES, init_pool, select_top_m
from promptmem.training import adapt_train, burn_in_train, generate_data
from test_alignment import test_alignment_gradients_match_finite_differences as _alignment_fd
from test_alignment import TestReversal
from test_criterion import random_instance
from test_criterion import test_detection_loss_gradient_matches_finite_differences as _detection_fd
from test_mean_teacher import test_ema_elementwise as _ema_case
from test_metrics import random_case

ROOT = Path(os.environ.get("PROMPTMEM_ACCEPTANCE_ROOT", Path(__file__).resolve().parents[1] / "runs" / "acceptance"))


@contextmanager
def criterion(n: int, title: str, limit_s: float):
    t0 = time.time()
    detail: dict = {}
    try:
        yield detail
        elapsed = time.time() - t0
        assert elapsed < limit_s, f"took {elapsed:.1f}s, limit {limit_s:.0f}s"
    except BaseException as exc:
        reason = (str(exc).splitlines() or [type(exc).__name__])[0]
        extra = "  ".join(f"{k}={v}" for k, v in detail.items())
        conftest.ACCEPTANCE.append(f"CRITERION {n}: FAIL  {title}  ({reason:.160}) {extra}".rstrip())
        raise
    extra = "  ".join(f"{k}={v}" for k, v in detail.items())
    conftest.ACCEPTANCE.append(f"CRITERION {n}: PASS  {title}  [{time.time() - t0:.1f}s] {extra}".rstrip())


def test_c01_top_m_oracle():
    with criterion(1, "top-M selection equals exhaustive subset search", 10):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            n = int(rng.integers(1, 13))
            m = int(rng.integers(1, min(n, 5) + 1))
            pool = init_pool("token", "source", n, 1, 6, seed=int(rng.integers(1 << 30)), init_scale=1.0)
            emb = torch.from_numpy(rng.normal(size=(5, 6))).float()
            got = set(select_top_m(pool, emb, m).indices)
            assert got == brute_force_subset(pool.value.detach().double().numpy(), emb.double().mean(0).numpy(), m)


def test_c02_hungarian_oracle():
    with criterion(2, "Hungarian matching equals brute-force minimum", 30):
        rng = np.random.default_rng(2025)
        w = LossWeights()
        for _ in range(200):
            q = int(rng.integers(1, 8))
            g = int(rng.integers(0, min(q, 5) + 1))
            logits, boxes, gt = random_instance(rng, q, g)
            cost = matching_cost(logits, boxes, gt, w).numpy()
            assert abs(assignment_cost(cost, hungarian_match(logits, boxes, gt, w)) - brute_force_assignment(cost)) <= 1e-9


def test_c03_gradient_suite():
    with criterion(3, "analytic gradients match central differences", 120):
        _detection_fd()
        _alignment_fd(epa_loss)
        _alignment_fd(dpa_loss)
        TestReversal().test_square_at_three()


def test_c04_ema_exactness():
    with criterion(4, "EMA update exact element-wise", 5):
        for alpha in (0.0, 0.5, 0.999, 1.0):
            _ema_case(alpha)


def test_c05_map_oracle():
    with criterion(5, "mAP equals reference AP implementation", 30):
        rng = np.random.default_rng(2026)
        cases = 0
        while cases < 100:
            dets, truths, raw_d, raw_g = random_case(rng)
            if not any(len(t.labels) for t in truths):
                continue
            got, _ = mean_average_precision(dets, truths, 3)
            assert abs(got - reference_map(raw_d, raw_g, 3)) < 1e-12
            cases += 1
        box = np.array([[0.4, 0.4, 0.2, 0.2]])
        assert mean_average_precision([ImageDetections(np.array([1]), np.array([0.9]), box)],
                                      [ImageTruth(np.array([1]), box)], 3)[0] == 1.0
        assert mean_average_precision([ImageDetections(np.array([1]), np.array([0.9]), box + [0.5, 0.5, 0, 0])],
                                      [ImageTruth(np.array([1]), box)], 3)[0] == 0.0


def test_c06_divergence_limits():
    with criterion(6, "H-divergence formula and limit cases", 120) as detail:
        for es, et in ((0.1, 0.15), (0.0, 0.0), (0.5, 0.5), (0.25, 0.6)):
            assert h_divergence(es, et) == 2 * (1 - es - et)
        same, apart = [], []
        for seed in range(3):
            rng = np.random.default_rng(300 + seed)
            est = probe(rng.normal(size=(2000, 8)), rng.normal(size=(2000, 8)), seed=seed)
            assert est.d_h == 2 * (1 - est.eps_source - est.eps_target)
            same.append(est.d_h)
            apart.append(probe(rng.normal(size=(300, 8)), rng.normal(size=(300, 8)) + 6.0, seed=seed).d_h)
        detail["identical_max_abs"] = round(max(map(abs, same)), 4)
        detail["disjoint_min"] = round(min(apart), 4)
        assert max(map(abs, same)) < 0.2 and min(apart) > 1.8


# -- desk-scale experiment -------------------------------------------------------


def desk_config() -> TrainConfig:
    return TrainConfig().update({"data.root": str(ROOT / "data"), "out": str(ROOT / "runs")})


@pytest.fixture(scope="module")
def desk():
    cfg = desk_config()
    if not (ROOT / "data" / "target" / "annotations.json").exists():
        generate_data(cfg)
    t0 = time.time()
    rows = experiments.ablation_study(cfg, report=ROOT / "ablation.jsonl")
    return cfg, {r["model"]: r for r in rows}, time.time() - t0


def _checkpoints(cfg: TrainConfig, seed: int) -> tuple[Path, Path]:
    root = Path(cfg.out)
    return (root / f"burn_in_s{seed}" / "burn_in" / "last.ckpt",
            root / f"full_s{seed}" / "adapt" / "last.ckpt")


def _wall(path: Path) -> float:
    return sum(json.loads(ln).get("wall", 0.0) for ln in path.read_text().splitlines() if ln.strip())


@pytest.mark.slow
def test_c07_adaptation_ordering(desk):
    cfg, rows, _ = desk
    with criterion(7, "full > source-only per seed and full > mean-teacher-only on mean", 7200) as detail:
        src, as0, full = rows["source_only"], rows["mean_teacher_only"], rows["full"]
        train_s = 0.0
        for s in cfg.seed_list():
            burn, adapted = _checkpoints(cfg, s)
            train_s += _wall(burn.parent / "metrics.jsonl") + _wall(adapted.parent / "metrics.jsonl")
            train_s += _wall(Path(cfg.out) / f"as0_s{s}" / "adapt" / "metrics.jsonl")
        detail["source_only"] = {k: round(v, 4) for k, v in src["per_seed"].items()}
        detail["full"] = {k: round(v, 4) for k, v in full["per_seed"].items()}
        detail["as0_mean"] = round(as0["map"], 4)
        detail["full_mean"] = round(full["map"], 4)
        detail["train_wall_s"] = round(train_s)
        assert train_s < 7200, f"training wall time {train_s:.0f}s"
        assert all(full["per_seed"][k] > src["per_seed"][k] for k in src["per_seed"]), "full <= source-only on a seed"
        assert as0["map"] < full["map"], "mean-teacher-only >= full on mean"


@pytest.mark.slow
def test_c08_probe_ordering(desk):
    cfg, _, _ = desk
    with criterion(8, "probe accuracy on adapted features <= source-only features", 120) as detail:
        pairs = {}
        for s in cfg.seed_list():
            burn, adapted = _checkpoints(cfg, s)
            pairs[s] = {"source_only": burn, "adapted": adapted}
        acc = experiments.probe_models(cfg, pairs, "encoder_mean")
        detail.update({k: round(v, 4) for k, v in acc.items()})
        assert acc["adapted"] <= acc["source_only"]


def _totals(path: Path, n: int) -> list[float]:
    recs = [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]
    return [r["total"] for r in recs if "error" not in r][:n]


@pytest.mark.slow
def test_c09_persistence_and_determinism(desk, tmp_path):
    cfg, _, _ = desk
    with criterion(9, "checkpoint bytes round-trip; seeded rerun reproduces per-epoch totals", 300) as detail:
        burn, adapted = _checkpoints(cfg, 0)
        for ck in (burn, adapted):
            again = Checkpoint.load(ck).save(tmp_path / ck.parent.name / "copy.ckpt")
            assert again.read_bytes() == ck.read_bytes()
        epochs = 2
        c = experiments.seeded(cfg, 0, tmp_path / "rerun")
        b2 = burn_in_train(c, max_epochs=epochs)
        a2 = adapt_train(c, burn, max_epochs=epochs)
        diffs = []
        for fresh, cached in ((b2, burn), (a2, adapted)):
            x, y = _totals(fresh.parent / "metrics.jsonl", epochs), _totals(cached.parent / "metrics.jsonl", epochs)
            assert len(x) == len(y) == epochs
            diffs += [abs(a - b) for a, b in zip(x, y)]
        detail["max_total_diff"] = f"{max(diffs):.2e}"
        assert max(diffs) < 1e-4


@pytest.mark.slow
def test_c10_harness_completeness(desk):
    cfg, _, _ = desk
    with criterion(10, "memory-size sweep and selection-strategy comparison reports", 7200) as detail:
        c = cfg.copy().update({"seeds": "0"})
        sweep = experiments.sweep_memory_size(c, (1, 4, 10, 16), report=ROOT / "sweep_memory.jsonl")
        strat = experiments.compare_selection_strategies(c, STRATEGIES, report=ROOT / "strategies.jsonl")
        back_sweep = experiments.read_report(ROOT / "sweep_memory.jsonl")
        back_strat = experiments.read_report(ROOT / "strategies.jsonl")
        assert [r["size"] for r in back_sweep] == [1, 4, 10, 16]
        assert [r["strategy"] for r in back_strat] == list(STRATEGIES)
        for r in back_sweep + back_strat:
            assert r["format_version"] == 1 and 0.0 <= r["map"] <= 1.0 and r["seeds"] == [0]
        detail["sweep"] = {r["size"]: round(r["map"], 4) for r in sweep}
        detail["strategies"] = {r["strategy"]: round(r["map"], 4) for r in strat}
