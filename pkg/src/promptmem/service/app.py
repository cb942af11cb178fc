"""FastAPI service exposing data generation, training, evaluation and reporting."""

from __future__ import annotations

import json
import logging
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import experiments
from ..checkpoint import Checkpoint
from ..config import TrainConfig, load_config
from ..divergence import read_feature_dump
from ..errors import PromptMemError
from ..plots import emit_plots
from ..training import adapt_train, burn_in_train, evaluate_map, export_features, generate_data
from . import schemas

log = logging.getLogger(__name__)

STATUS = {"configuration": 422, "data": 422, "parse": 422, "empty": 422, "state": 409, "numeric": 500}

app = FastAPI(title="promptmem", version="0.1.0")


@app.exception_handler(PromptMemError)
async def _domain_error(request: Request, exc: PromptMemError):
    return JSONResponse(status_code=STATUS.get(exc.kind, 400), content={"error": exc.kind, "message": str(exc)})


@app.exception_handler(FileNotFoundError)
async def _missing(request: Request, exc: FileNotFoundError):
    return JSONResponse(status_code=404, content={"error": "io", "message": str(exc)})


def build_config(req: schemas.ConfiguredRequest) -> TrainConfig:
    return load_config(req.config_file, dict(req.config))


def _last_record(path: Path) -> dict | None:
    if not path.exists():
        return None
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    return json.loads(lines[-1]) if lines else None


def _checkpoint_root(ckpt: str, data_root: str | None) -> str:
    if data_root is not None:
        return data_root
    return str(Checkpoint.load(ckpt).meta["config"]["data.root"])


@app.get("/health")
def health():
    return {"status": "ok"}


@app.post("/generate-data", response_model=schemas.GenerateDataResponse)
def generate(req: schemas.GenerateDataRequest):
    cfg = build_config(req)
    src, tgt = generate_data(cfg)
    return {"root": cfg.data.root, "images": {"source": len(src), "target": len(tgt)},
            "annotations": {"source": len(src.annotations), "target": len(tgt.annotations)}}


@app.post("/burn-in", response_model=schemas.TrainResponse)
def burn_in(req: schemas.BurnInRequest):
    cfg = build_config(req)
    last = burn_in_train(cfg, resume=req.resume, max_epochs=req.max_epochs)
    metrics = Path(cfg.out) / "burn_in" / "metrics.jsonl"
    return {"checkpoint": str(last), "metrics": str(metrics), "last_record": _last_record(metrics)}


@app.post("/adapt", response_model=schemas.TrainResponse)
def adapt(req: schemas.AdaptRequest):
    cfg = build_config(req)
    last = adapt_train(cfg, req.burn_in_checkpoint, resume=req.resume, max_epochs=req.max_epochs)
    metrics = Path(cfg.out) / "adapt" / "metrics.jsonl"
    return {"checkpoint": str(last), "metrics": str(metrics), "last_record": _last_record(metrics)}


@app.post("/eval", response_model=schemas.EvalResponse)
def evaluate(req: schemas.EvalRequest):
    root = _checkpoint_root(req.checkpoint, req.data_root)
    return evaluate_map(req.checkpoint, root, req.domain, req.split, req.iou_threshold, req.which)


@app.post("/export-features", response_model=schemas.ExportResponse)
def export(req: schemas.ExportRequest):
    root = _checkpoint_root(req.checkpoint, req.data_root)
    path = export_features(req.checkpoint, root, req.out, req.layer, req.split, req.which)
    header, _ = read_feature_dump(path)
    return {"path": str(path), "count": header["count"], "dim": header["dim"], "layer": header["layer"]}


@app.post("/probe", response_model=schemas.ReportResponse)
def probe(req: schemas.ProbeRequest):
    rows = experiments.run_probe(req.dumps, seeds=req.seeds, epochs=req.epochs, report=req.out)
    return {"rows": rows, "report": req.out}


@app.post("/sweep-memory", response_model=schemas.ReportResponse)
def sweep_memory(req: schemas.SweepRequest):
    rows = experiments.sweep_memory_size(build_config(req), req.sizes, report=req.out)
    return {"rows": rows, "report": req.out}


@app.post("/compare-selection", response_model=schemas.ReportResponse)
def compare_selection(req: schemas.StrategyRequest):
    rows = experiments.compare_selection_strategies(build_config(req), req.strategies, report=req.out)
    return {"rows": rows, "report": req.out}


@app.post("/ablate", response_model=schemas.ReportResponse)
def ablate(req: schemas.AblationRequest):
    rows = experiments.ablation_study(build_config(req), report=req.out)
    return {"rows": rows, "report": req.out}


@app.post("/plot", response_model=schemas.PlotResponse)
def plot(req: schemas.PlotRequest):
    return {"files": [str(p) for p in emit_plots(req.inputs, req.out_dir)]}
