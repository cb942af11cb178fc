import json

import pytest

from conftest import tiny_config
from promptmem import experiments
from promptmem.errors import ConfigError, ParseError
from promptmem.plots import EmptyRecordsError, emit_plots, read_records, record_kind


@pytest.fixture(scope="module")
def cfg(tiny_data, tmp_path_factory):
    return tiny_config(tiny_data, tmp_path_factory.mktemp("exp"))


@pytest.fixture(scope="module")
def ablation(cfg):
    return {r["model"]: r for r in experiments.ablation_study(cfg, report=f"{cfg.out}/ablation.jsonl")}


def test_ablation_rows(cfg, ablation):
    assert set(ablation) == {"source_only", "mean_teacher_only", "full"}
    for r in ablation.values():
        assert r["seeds"] == [0] and 0 <= r["map"] <= 1 and set(r["per_seed"]) == {"0"}
    back = experiments.read_report(f"{cfg.out}/ablation.jsonl")
    assert [r["model"] for r in back] == ["source_only", "mean_teacher_only", "full"]
    assert all(r["format_version"] == experiments.REPORT_VERSION for r in back)


def test_finished_runs_are_reused(cfg, ablation, tmp_path):
    ckpt = experiments.ensure_burn_in(cfg, 0, cfg.out)
    before = ckpt.stat().st_mtime_ns
    experiments.ensure_burn_in(cfg, 0, cfg.out)
    assert ckpt.stat().st_mtime_ns == before


def test_memory_sweep(cfg, ablation, tmp_path):
    rows = experiments.sweep_memory_size(cfg, (1, 4), report=tmp_path / "sweep.jsonl")
    assert [(r["size"], r["M"]) for r in rows] == [(1, 1), (4, cfg.pdm.M)]
    assert all(r["seeds"] == [0] for r in rows)
    # the default size shares the full pipeline's run
    assert rows[1]["map"] == ablation["full"]["map"]
    assert record_kind(read_records(tmp_path / "sweep.jsonl")) == "sweep"


def test_selection_strategies(cfg, ablation, tmp_path):
    rows = experiments.compare_selection_strategies(cfg, report=tmp_path / "s.jsonl")
    by = {r["strategy"]: r for r in rows}
    assert set(by) == {"random", "kmeans", "distribution"}
    assert by["distribution"]["map"] == ablation["full"]["map"]
    again = experiments.compare_selection_strategies(tiny_config(cfg.data.root, tmp_path / "rerun"), ["random"])
    assert again[0]["map"] == by["random"]["map"]


def test_harness_argument_errors(cfg):
    with pytest.raises(ConfigError):
        experiments.sweep_memory_size(cfg, [])
    with pytest.raises(ConfigError):
        experiments.compare_selection_strategies(cfg, ["greedy"])
    with pytest.raises(FileNotFoundError):
        experiments.run_probe({"a": "/nonexistent.jsonl"})


def test_read_report_rejects_garbage(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"size": 1}\nnot json\n')
    with pytest.raises(ParseError):
        experiments.read_report(p)


class TestPlots:
    def test_histograms_one_chart_per_pool(self, tmp_path):
        rec = {"epoch": 1, "histograms": {"source_token": [3, 0, 1], "target_token": [1, 1, 2]}}
        p = tmp_path / "m.jsonl"
        p.write_text(json.dumps(rec) + "\n")
        files = emit_plots([p], tmp_path / "out")
        assert sorted(f.name for f in files) == ["m_hist_source_token.png", "m_hist_target_token.png"]
        assert all(f.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for f in files)

    def test_sweep_single_line_chart(self, tmp_path):
        p = tmp_path / "sweep.jsonl"
        p.write_text("".join(json.dumps({"size": n, "map": 0.1 * n, "seeds": [0]}) + "\n" for n in (1, 4, 10)))
        assert [f.name for f in emit_plots([p], tmp_path)] == ["sweep_memory_size.png"]

    def test_errors(self, tmp_path):
        empty = tmp_path / "e.jsonl"
        empty.write_text("\n")
        with pytest.raises(EmptyRecordsError):
            emit_plots([empty], tmp_path / "o")
        assert not (tmp_path / "o").exists()
        odd = tmp_path / "odd.jsonl"
        odd.write_text('{"foo": 1}\n')
        with pytest.raises(ParseError):
            emit_plots([odd], tmp_path)
        broken = tmp_path / "b.jsonl"
        broken.write_text('{"size": 1, "map": 0.5}\n[1, 2]\n')
        with pytest.raises(ParseError):
            read_records(broken)
        with pytest.raises(FileNotFoundError):
            read_records(tmp_path / "missing.jsonl")
