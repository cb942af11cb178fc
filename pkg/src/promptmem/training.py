"""Two-stage training (source burn-in, then mean-teacher adaptation) and evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .alignment import AlignmentConfig, PromptAlignment
from .checkpoint import (
    Checkpoint,
    histogram_arrays,
    module_arrays,
    optimizer_arrays,
    restore_optimizer,
    restore_rng,
    rng_arrays,
)
from .config import TrainConfig
from .criterion import GroundTruth, LossWeights, batch_detection_loss, detections_to_gt, hungarian_match, postprocess
from .data import ImageCache, Manifest, SceneSpec, batch_iterator, generate_domain_pair, load_domain
from .detector import DetectorConfig
from .errors import ConfigError, NumericError, StateError
from .mean_teacher import MeanTeacher
from .metrics import ImageDetections, ImageTruth, mean_average_precision
from .model import PromptedDetector, build_model
from .prompt_memory import DOMAINS, LEVELS, InjectionPlan

log = logging.getLogger(__name__)

METRICS_VERSION = 1

Callback = Callable[[dict], None]


# -- construction --------------------------------------------------------------


def detector_config(cfg: TrainConfig) -> DetectorConfig:
    m = cfg.model
    return DetectorConfig(dim=m.dim, enc_layers=m.enc_layers, dec_layers=m.dec_layers, heads=m.heads,
                          queries=m.queries, classes=m.classes, stride=m.stride, ffn=m.ffn)


def loss_weights(cfg: TrainConfig) -> LossWeights:
    lc = cfg.loss
    return LossWeights(cls=lc.cls, l1=lc.l1, giou=lc.giou, focal_alpha=lc.focal_alpha, focal_gamma=lc.focal_gamma)


def new_model(cfg: TrainConfig, seed: int | None = None) -> PromptedDetector:
    seed = cfg.seed if seed is None else seed
    sizes = {lv: getattr(cfg.pdm, lv).N for lv in LEVELS}
    return build_model(detector_config(cfg), sizes, cfg.pdm.L, cfg.pdm.border,
                       (cfg.data.canvas, cfg.data.canvas), seed, cfg.pdm.init_scale)


def new_alignment(cfg: TrainConfig) -> PromptAlignment:
    pc = cfg.pma
    return PromptAlignment(cfg.model.dim, config=AlignmentConfig(pc.lambda1, pc.lambda2, pc.reversal_scale))


def injection_plan(cfg: TrainConfig, generator: torch.Generator | None = None, levels=None) -> InjectionPlan:
    return InjectionPlan(levels=cfg.pdm.levels() if levels is None else tuple(levels), m=cfg.pdm.M,
                         strategy=cfg.pdm.strategy, generator=generator)


def generate_data(cfg: TrainConfig) -> tuple[Manifest, Manifest]:
    """Render the source/target pair described by ``cfg.data``."""
    d = cfg.data
    spec = SceneSpec(height=d.canvas, width=d.canvas, min_objects=d.min_objects, max_objects=d.max_objects,
                     corruption=d.corruption, strength=d.strength)
    return generate_domain_pair(d.root, spec, d.n_source, d.n_target, seed=d.seed, n_val=d.n_val)


def step_lr(base: float, epoch: int, decay_epoch: int, factor: float) -> float:
    """Constant rate, multiplied by ``factor`` from ``decay_epoch`` (0-based) on."""
    return base * factor if epoch >= decay_epoch else base


def weighted_total(terms: dict[str, float], cfg: TrainConfig) -> float:
    lc = cfg.loss
    return (lc.lambda_s * terms.get("sup", 0.0) + lc.lambda_us * terms.get("unsup", 0.0)
            + lc.lambda_epa * terms.get("epa", 0.0) + lc.lambda_dpa * terms.get("dpa", 0.0))


def pool_arrays(model: PromptedDetector, prefix: str = "pdm") -> dict[str, torch.Tensor]:
    out = {}
    if model.memory is None:
        return out
    for domain in DOMAINS:
        for level in LEVELS:
            pool = model.memory.pool(domain, level)
            out[f"{prefix}/{domain}/{level}/value"] = pool.value.detach().clone()
            out[f"{prefix}/{domain}/{level}/weight"] = pool.weight.detach().clone()
    return out


def load_pools(model: PromptedDetector, arrays: dict[str, torch.Tensor], prefix: str = "pdm",
               domains=DOMAINS, strict: bool = True) -> None:
    with torch.no_grad():
        for domain in domains:
            for level in LEVELS:
                pool = model.memory.pool(domain, level)
                v = arrays.get(f"{prefix}/{domain}/{level}/value")
                w = arrays.get(f"{prefix}/{domain}/{level}/weight")
                if v is None or v.shape != pool.value.shape or w.shape != pool.weight.shape:
                    if strict:
                        raise StateError(f"pool {domain}/{level} missing or shaped differently in checkpoint")
                    continue
                pool.value.copy_(v)
                pool.weight.copy_(w)


def model_arrays(model: PromptedDetector) -> dict[str, torch.Tensor]:
    arrays = {f"detector/{k}": v for k, v in module_arrays(model.detector).items()}
    arrays.update(pool_arrays(model))
    return arrays


def load_model_arrays(model: PromptedDetector, arrays: dict[str, torch.Tensor], pools: bool = True) -> None:
    det = {k[len("detector/"):]: v for k, v in arrays.items() if k.startswith("detector/")}
    model.detector.load_state_dict(det)
    if pools:
        load_pools(model, arrays)


# -- evaluation ----------------------------------------------------------------


@torch.no_grad()
def predict(model: PromptedDetector, manifest: Manifest, domain: str | None, plan: InjectionPlan | None,
            batch_size: int = 50, cache: ImageCache | None = None):
    """Run inference; returns (detections, truths, image ids)."""
    was_training = model.training
    model.eval()
    dets, truths, ids = [], [], []
    for batch in batch_iterator(manifest, batch_size, cache=cache):
        out = model(batch.images, domain, plan).output
        for i, gt in enumerate(batch.targets):
            found = postprocess(out.class_logits[i], out.boxes[i], 0.0)
            dets.append(ImageDetections(np.array([d.label for d in found], dtype=np.int64),
                                        np.array([d.score for d in found], dtype=np.float64),
                                        np.array([d.box for d in found], dtype=np.float64).reshape(-1, 4)))
            truths.append(ImageTruth(gt.labels.numpy(), gt.boxes.double().numpy()))
        ids.extend(batch.image_ids)
    model.train(was_training)
    return dets, truths, ids


def evaluate_model(model: PromptedDetector, manifest: Manifest, domain: str | None, plan: InjectionPlan | None,
                   num_classes: int, iou: float = 0.5, cache: ImageCache | None = None) -> dict:
    dets, truths, _ = predict(model, manifest, domain, plan, cache=cache)
    m, per_class = mean_average_precision(dets, truths, num_classes, iou)
    return {"map": m, "per_class": {str(k): v for k, v in per_class.items()}, "images": len(truths)}


# -- run state -----------------------------------------------------------------


@dataclass
class RunState:
    cfg: TrainConfig
    stage: str
    model: PromptedDetector
    optimizer: torch.optim.Optimizer
    alignment: PromptAlignment | None = None
    teacher: MeanTeacher | None = None
    epoch: int = 0
    step: int = 0
    generators: dict[str, torch.Generator] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        ck = Checkpoint()
        ck.arrays.update(model_arrays(self.model))
        if self.alignment is not None:
            ck.put_group("pma", module_arrays(self.alignment))
        if self.teacher is not None:
            ck.put_group("teacher", module_arrays(self.teacher.model))
        opt_arrays, opt_desc = optimizer_arrays(self.optimizer)
        ck.put_group("optim", opt_arrays)
        ck.put_group("rng", rng_arrays(self.generators))
        if self.model.memory is not None:
            ck.put_group("hist", histogram_arrays(self.model.memory.histograms))
        ck.meta = {
            "stage": self.stage,
            "epoch": self.epoch,
            "step": self.step,
            "config": self.cfg.to_flat(),
            "optimizer": opt_desc,
            "teacher": None if self.teacher is None else {"alpha": self.teacher.alpha, "step": self.teacher.step},
            "pools": {} if self.model.memory is None else
            {k: p.metadata() for k, p in self.model.memory.pools.items()},
            "history": self.history,
        }
        return ck


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _append_jsonl(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(json.dumps(dict(record, format_version=METRICS_VERSION), sort_keys=True) + "\n")


def _check_finite(value: torch.Tensor, record: dict, metrics_path: Path) -> None:
    if not torch.isfinite(value):
        diag = dict(record, error="non_finite_loss")
        _append_jsonl(metrics_path, diag)
        raise NumericError(f"non-finite loss at epoch {record.get('epoch')} step {record.get('step')}")


def _histogram_snapshot(model: PromptedDetector) -> dict[str, list[int]]:
    if model.memory is None:
        return {}
    return {k: v.tolist() for k, v in model.memory.histograms.items()}


# -- stage 1 -------------------------------------------------------------------


def _burn_in_state(cfg: TrainConfig) -> RunState:
    _seed_everything(cfg.seed)
    model = new_model(cfg)
    params = list(model.detector.parameters())
    if cfg.burn_in.train_pools:
        params += [p for k, p in model.memory.named_parameters() if k.startswith("pools.source_")]
    opt = torch.optim.Adam(params, lr=cfg.burn_in.lr)
    gens = {"select": torch.Generator().manual_seed(cfg.seed + 17)}
    return RunState(cfg, "burn_in", model, opt, generators=gens)


def _restore(state: RunState, ck: Checkpoint) -> None:
    load_model_arrays(state.model, ck.arrays)
    if state.alignment is not None:
        state.alignment.load_state_dict(ck.group("pma"))
    if state.teacher is not None:
        state.teacher.model.load_state_dict(ck.group("teacher"))
        state.teacher.step = ck.meta["teacher"]["step"]
    restore_optimizer(state.optimizer, ck.group("optim"), ck.meta["optimizer"])
    restore_rng(ck.group("rng"), state.generators)
    if state.model.memory is not None:
        for k, v in ck.group("hist").items():
            state.model.memory.histograms[k] = v.numpy().copy()
    state.epoch = ck.meta["epoch"]
    state.step = ck.meta["step"]
    state.history = list(ck.meta.get("history", []))


def burn_in_train(cfg: TrainConfig, resume: str | Path | None = None, callback: Callback | None = None,
                  max_epochs: int | None = None) -> Path:
    """Supervised source-only training; writes ``<out>/burn_in/epoch_XXX.ckpt`` and ``last.ckpt``."""
    out = Path(cfg.out) / "burn_in"
    metrics_path = out / "metrics.jsonl"
    source = load_domain(cfg.data.root, "source")
    target = load_domain(cfg.data.root, "target")
    train, val, tval = source.subset("train"), source.subset("val"), target.subset("val")
    if len(train) == 0:
        raise ConfigError("source training split is empty")
    state = _burn_in_state(cfg)
    if resume is not None:
        ck = Checkpoint.load(resume)
        if ck.meta.get("stage") != "burn_in":
            raise StateError("resume checkpoint is not a burn-in checkpoint")
        _restore(state, ck)
    elif metrics_path.exists():
        metrics_path.unlink()
    weights = loss_weights(cfg)
    plan = injection_plan(cfg, state.generators["select"]) if cfg.burn_in.train_pools else None
    domain = "source" if cfg.burn_in.train_pools else None
    caches = {"train": ImageCache(train), "val": ImageCache(val), "tval": ImageCache(tval)}
    stop = cfg.burn_in.epochs if max_epochs is None else min(cfg.burn_in.epochs, max_epochs)
    last = out / "last.ckpt"
    state.model.train()
    while state.epoch < stop:
        epoch = state.epoch
        t0 = time.time()
        lr = step_lr(cfg.burn_in.lr, epoch, cfg.burn_in.decay_epoch, cfg.burn_in.decay_factor)
        for g in state.optimizer.param_groups:
            g["lr"] = lr
        if state.model.memory is not None:
            state.model.memory.reset_histograms()
        sums, n = 0.0, 0
        for batch in batch_iterator(train, cfg.batch_size, seed=cfg.seed * 1000 + epoch, shuffle=True,
                                    cache=caches["train"]):
            res = state.model(batch.images, domain, plan, record=True)
            loss, _ = batch_detection_loss(res.output.class_logits, res.output.boxes, batch.targets, weights)
            _check_finite(loss, {"stage": "burn_in", "epoch": epoch, "step": state.step}, metrics_path)
            if state.step < cfg.burn_in.warmup_steps:
                for g in state.optimizer.param_groups:
                    g["lr"] = lr * (state.step + 1) / cfg.burn_in.warmup_steps
            elif cfg.burn_in.warmup_steps:
                for g in state.optimizer.param_groups:
                    g["lr"] = lr
            state.optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.burn_in.clip)
            state.optimizer.step()
            sums += float(loss.detach())
            n += 1
            state.step += 1
        state.epoch += 1
        state.model.eval()
        sup = sums / max(n, 1)
        record = {
            "stage": "burn_in", "epoch": state.epoch, "lr": lr,
            "losses": {"sup": sup}, "total": weighted_total({"sup": sup}, cfg),
            "source_val": evaluate_model(state.model, val, domain, plan, cfg.model.classes, cfg.eval_iou, caches["val"]),
            "target_val": evaluate_model(state.model, tval, None, None, cfg.model.classes, cfg.eval_iou, caches["tval"]),
            "histograms": _histogram_snapshot(state.model), "wall": time.time() - t0,
        }
        state.model.train()
        state.history.append({k: record[k] for k in ("epoch", "total")})
        _append_jsonl(metrics_path, record)
        if callback:
            callback(record)
        ck = state.checkpoint()
        ck.save(out / f"epoch_{state.epoch:03d}.ckpt")
        ck.save(last)
    return last


# -- stage 2 -------------------------------------------------------------------


def _adapt_state(cfg: TrainConfig, burn_in: Checkpoint) -> RunState:
    if burn_in.meta.get("stage") != "burn_in":
        raise StateError("adaptation needs a burn-in checkpoint")
    snap = TrainConfig.from_flat(burn_in.meta["config"])
    if detector_config(snap) != detector_config(cfg):
        raise StateError("burn-in checkpoint detector architecture differs from the adaptation config")
    _seed_everything(cfg.seed)
    model = new_model(cfg)
    load_model_arrays(model, burn_in.arrays, pools=False)
    if snap.burn_in.train_pools:
        load_pools(model, burn_in.arrays, domains=("source",), strict=False)
    alignment = new_alignment(cfg)
    teacher = MeanTeacher(model, alpha=cfg.adapt.alpha)
    prompt_params = list(model.memory.parameters()) + list(alignment.parameters())
    opt = torch.optim.Adam([
        {"params": prompt_params, "lr": cfg.adapt.prompt_lr, "name": "prompt"},
        {"params": list(model.detector.parameters()), "lr": cfg.adapt.base_lr, "name": "base"},
    ])
    gens = {"select": torch.Generator().manual_seed(cfg.seed + 29),
            "teacher_select": torch.Generator().manual_seed(cfg.seed + 31)}
    return RunState(cfg, "adapt", model, opt, alignment=alignment, teacher=teacher, generators=gens)


def adapt_train(cfg: TrainConfig, burn_in_ckpt: str | Path, resume: str | Path | None = None,
                callback: Callback | None = None, max_epochs: int | None = None) -> Path:
    """Mean-teacher adaptation with prompt memory and alignment; returns the last checkpoint."""
    out = Path(cfg.out) / "adapt"
    metrics_path = out / "metrics.jsonl"
    source = load_domain(cfg.data.root, "source")
    target = load_domain(cfg.data.root, "target")
    s_train, s_val = source.subset("train"), source.subset("val")
    t_train, t_val = target.subset("train"), target.subset("val")
    state = _adapt_state(cfg, Checkpoint.load(burn_in_ckpt))
    if resume is not None:
        ck = Checkpoint.load(resume)
        if ck.meta.get("stage") != "adapt":
            raise StateError("resume checkpoint is not an adaptation checkpoint")
        _restore(state, ck)
    elif metrics_path.exists():
        metrics_path.unlink()
    weights = loss_weights(cfg)
    lc = cfg.loss
    plan = injection_plan(cfg, state.generators["select"])
    teacher_plan = injection_plan(cfg, state.generators["teacher_select"])
    caches = {k: ImageCache(m) for k, m in (("s", s_train), ("t", t_train), ("sv", s_val), ("tv", t_val))}
    stop = cfg.adapt.epochs if max_epochs is None else min(cfg.adapt.epochs, max_epochs)
    student, teacher, align = state.model, state.teacher, state.alignment
    student.train()
    while state.epoch < stop:
        epoch = state.epoch
        t0 = time.time()
        for g in state.optimizer.param_groups:
            base = cfg.adapt.prompt_lr if g["name"] == "prompt" else cfg.adapt.base_lr
            g["lr"] = step_lr(base, epoch, cfg.adapt.decay_epoch, cfg.adapt.decay_factor)
        student.memory.reset_histograms()
        sums = {"sup": 0.0, "unsup": 0.0, "epa": 0.0, "dpa": 0.0, "total": 0.0}
        n_steps, n_pseudo = 0, 0
        pseudo_cache: dict[int, GroundTruth] = {}
        src_iter = batch_iterator(s_train, cfg.batch_size, seed=cfg.seed * 1000 + epoch, shuffle=True, cache=caches["s"])
        tgt_iter = batch_iterator(t_train, cfg.batch_size, seed=cfg.seed * 1000 + 500 + epoch, shuffle=True,
                                  with_labels=False, cache=caches["t"])
        for sb, tb in zip(src_iter, tgt_iter):
            assert tb.targets is None
            # pseudo-labels from the teacher, target pools
            if cfg.adapt.pseudo_every == "epoch" and all(i in pseudo_cache for i in tb.image_ids):
                pseudo = [pseudo_cache[i] for i in tb.image_ids]
            else:
                pl = teacher.pseudo_labels(tb.images, cfg.adapt.threshold, domain="target", plan=teacher_plan)
                pseudo = [detections_to_gt(d) for d in pl.detections]
                if cfg.adapt.pseudo_every == "epoch":
                    pseudo_cache.update(zip(tb.image_ids, pseudo))
            n_pseudo += sum(len(p) for p in pseudo)

            rs = student(sb.images, "source", plan, record=True)
            rt = student(tb.images, "target", plan, record=True)
            sup, _ = batch_detection_loss(rs.output.class_logits, rs.output.boxes, sb.targets, weights)
            unsup, _ = batch_detection_loss(rt.output.class_logits, rt.output.boxes, pseudo, weights)
            zero = sup * 0.0
            epa = dpa = zero
            if lc.lambda_epa > 0 and rs.enc_boundary > 0:
                epa = align.encoder_loss(rs.enc_seq, "source", rs.enc_boundary) + \
                    align.encoder_loss(rt.enc_seq, "target", rt.enc_boundary)
            if lc.lambda_dpa > 0 and rs.dec_boundary > 0:
                dpa = align.decoder_loss(rs.dec_seq, "source", rs.dec_boundary) + \
                    align.decoder_loss(rt.dec_seq, "target", rt.dec_boundary)
            total = lc.lambda_s * sup + lc.lambda_us * unsup + lc.lambda_epa * epa + lc.lambda_dpa * dpa
            _check_finite(total, {"stage": "adapt", "epoch": epoch, "step": state.step,
                                  "sup": float(sup.detach()), "unsup": float(unsup.detach()),
                                  "epa": float(epa.detach()), "dpa": float(dpa.detach())},
                          metrics_path)
            state.optimizer.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(list(student.parameters()) + list(align.parameters()), cfg.adapt.clip)
            state.optimizer.step()
            teacher.update(student)
            for k, v in (("sup", sup), ("unsup", unsup), ("epa", epa), ("dpa", dpa)):
                sums[k] += float(v.detach())
            n_steps += 1
            state.step += 1
        state.epoch += 1
        losses = {k: sums[k] / max(n_steps, 1) for k in ("sup", "unsup", "epa", "dpa")}
        record = {
            "stage": "adapt", "epoch": state.epoch,
            "lr": {g["name"]: g["lr"] for g in state.optimizer.param_groups},
            "losses": losses, "total": weighted_total(losses, cfg),
            "pseudo_labels_per_image": n_pseudo / max(n_steps * cfg.batch_size, 1),
            "histograms": _histogram_snapshot(student),
        }
        record.update(evaluate_adapted(state, s_val, t_val, caches))
        record["wall"] = time.time() - t0
        state.history.append({k: record[k] for k in ("epoch", "total")})
        _append_jsonl(metrics_path, record)
        if callback:
            callback(record)
        ck = state.checkpoint()
        ck.save(out / f"epoch_{state.epoch:03d}.ckpt")
        ck.save(out / "last.ckpt")
    return out / "last.ckpt"


def evaluate_adapted(state: RunState, s_val: Manifest, t_val: Manifest, caches: dict) -> dict:
    cfg = state.cfg
    net = state.teacher.model if cfg.adapt.eval_model == "teacher" else state.model
    plan = injection_plan(cfg, torch.Generator().manual_seed(cfg.seed + 101))
    return {
        "source_val": evaluate_model(net, s_val, "source", plan, cfg.model.classes, cfg.eval_iou, caches["sv"]),
        "target_val": evaluate_model(net, t_val, "target", plan, cfg.model.classes, cfg.eval_iou, caches["tv"]),
    }


# -- checkpoint consumers --------------------------------------------------------


def inference_model(ck: Checkpoint, which: str | None = None) -> tuple[TrainConfig, PromptedDetector, InjectionPlan | None, bool]:
    """Rebuild the evaluation network stored in a checkpoint.

    Returns ``(config, model, plan, uses_prompts)``.  Burn-in checkpoints
    yield the plain detector unless pools were trained during burn-in.
    """
    cfg = TrainConfig.from_flat(ck.meta["config"])
    model = new_model(cfg)
    stage = ck.meta.get("stage")
    which = which or (cfg.adapt.eval_model if stage == "adapt" else "student")
    if stage == "adapt" and which == "teacher":
        model.load_state_dict(ck.group("teacher"))
    else:
        load_model_arrays(model, ck.arrays)
    model.eval()
    uses_prompts = stage == "adapt" or cfg.burn_in.train_pools
    plan = injection_plan(cfg, torch.Generator().manual_seed(cfg.seed + 101)) if uses_prompts else None
    return cfg, model, plan, uses_prompts


def evaluate_map(ckpt: str | Path, data_root: str | Path, domain: str = "target", split: str = "val",
                 iou_threshold: float = 0.5, which: str | None = None) -> dict:
    ck = Checkpoint.load(ckpt)
    cfg, model, plan, uses = inference_model(ck, which)
    manifest = load_domain(data_root, domain).subset(split)
    res = evaluate_model(model, manifest, domain if uses else None, plan, cfg.model.classes, iou_threshold)
    return {"checkpoint": str(ckpt), "stage": ck.meta.get("stage"), "epoch": ck.meta.get("epoch"),
            "domain": domain, "split": split, "iou_threshold": iou_threshold, **res}


@torch.no_grad()
def export_features(ckpt: str | Path, data_root: str | Path, out_path: str | Path, layer: str = "encoder_mean",
                    split: str = "train", which: str | None = None) -> Path:
    """Dump per-image encoder means or per-matched-query decoder states for both domains."""
    from .divergence import write_feature_dump

    if layer not in ("encoder_mean", "decoder_queries"):
        raise ConfigError(f"unknown feature layer {layer!r}")
    ck = Checkpoint.load(ckpt)
    cfg, model, plan, uses = inference_model(ck, which)
    records = []
    for domain in DOMAINS:
        manifest = load_domain(data_root, domain).subset(split)
        for batch in batch_iterator(manifest, 50):
            res = model(batch.images, domain if uses else None, plan)
            if layer == "encoder_mean":
                feats = res.image_tokens.mean(dim=1)
                for iid, f in zip(batch.image_ids, feats):
                    records.append({"image_id": iid, "domain": domain, "split": split, "feature": f.tolist()})
                continue
            hidden = res.dec_seq[:, res.dec_boundary:]
            for i, (iid, gt) in enumerate(zip(batch.image_ids, batch.targets)):
                for q, g in hungarian_match(res.output.class_logits[i], res.output.boxes[i], gt, loss_weights(cfg)):
                    records.append({"image_id": iid, "domain": domain, "split": split, "query": q,
                                    "class": int(gt.labels[g]), "feature": hidden[i, q].tolist()})
    return write_feature_dump(out_path, records, layer)


def parameter_overhead(cfg: TrainConfig) -> dict:
    model = new_model(cfg)
    det = model.detector.num_parameters()
    pools = model.memory.num_parameters()
    return {"detector_parameters": det, "prompt_parameters": pools, "ratio": pools / det}
