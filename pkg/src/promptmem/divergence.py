"""Empirical H-divergence between two feature sets via a trained domain classifier."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DataError


@dataclass
class UnifiedDataset:
    """Source rows first (label 0), then target rows (label 1)."""

    features: np.ndarray  # (q, D)
    p: int

    @property
    def q(self) -> int:
        return int(self.features.shape[0])

    @property
    def labels(self) -> np.ndarray:
        y = np.ones(self.q, dtype=np.int64)
        y[: self.p] = 0
        return y

    def split(self, seed: int, holdout: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
        """Stratified train/held-out index split.

        Rows with identical features always land on the same side, so a
        duplicated point cannot leak its opposite label into training.
        """
        rng = np.random.default_rng(seed)
        train, test = [], []
        for lo, hi in ((0, self.p), (self.p, self.q)):
            idx = rng.permutation(np.arange(lo, hi))
            n_test = max(1, int(round(holdout * len(idx)))) if len(idx) > 1 else 0
            test.append(idx[:n_test])
            train.append(idx[n_test:])
        train, test = np.concatenate(train), np.concatenate(test)
        held = {self.features[i].tobytes() for i in test}
        moved = np.array([self.features[i].tobytes() in held for i in train], dtype=bool)
        if moved.any():
            test = np.concatenate([test, train[moved]])
            train = train[~moved]
        return np.sort(train), np.sort(test)


@dataclass
class DivergenceEstimate:
    eps_source: float
    eps_target: float
    d_h: float
    accuracy: float
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def h_divergence(eps_source: float, eps_target: float) -> float:
    return 2.0 * (1.0 - eps_source - eps_target)


def _frozen(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.array(x, dtype=np.float64, copy=True)


def build_unified_dataset(source, target) -> UnifiedDataset:
    """Frozen float64 copies: later changes to the inputs never reach the dataset."""
    src = _frozen(source)
    tgt = _frozen(target)
    if src.ndim == 1:
        src = src[:, None]
    if tgt.ndim == 1:
        tgt = tgt[:, None]
    if len(src) == 0 or len(tgt) == 0:
        raise DataError("both domains need at least one sample")
    if src.shape[1] != tgt.shape[1]:
        raise DataError("source and target features differ in dimension")
    return UnifiedDataset(np.concatenate([src, tgt]), len(src))


class DomainClassifier(nn.Module):
    """Three (linear, ReLU) blocks then a logit, on standardized inputs."""

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )
        self.register_buffer("mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("scale", torch.ones(dim, dtype=torch.float64))
        self.train_index: np.ndarray | None = None
        self.test_index: np.ndarray | None = None

    def forward(self, x):
        x = (torch.as_tensor(x, dtype=torch.float64) - self.mean) / self.scale
        return self.net(x.float()).squeeze(-1)

    @torch.no_grad()
    def predict(self, x) -> np.ndarray:
        return (self(x) > 0).long().numpy()


def train_domain_classifier(
    dataset: UnifiedDataset,
    epochs: int = 200,
    seed: int = 0,
    lr: float = 1e-3,
    train_index: np.ndarray | None = None,
    hidden: int = 64,
    weight_decay: float = 1e-4,
) -> DomainClassifier:
    """Full-batch Adam on binary cross-entropy; deterministic given ``seed``."""
    if train_index is None:
        train_index, test_index = dataset.split(seed)
    else:
        test_index = np.setdiff1d(np.arange(dataset.q), train_index)
    x = dataset.features[train_index]
    y = torch.as_tensor(dataset.labels[train_index], dtype=torch.float32)
    torch.manual_seed(seed)
    clf = DomainClassifier(dataset.features.shape[1], hidden)
    clf.mean.copy_(torch.from_numpy(x.mean(0)))
    clf.scale.copy_(torch.from_numpy(np.where(x.std(0) > 1e-8, x.std(0), 1.0)))
    clf.train_index, clf.test_index = train_index, test_index
    opt = torch.optim.Adam(clf.net.parameters(), lr=lr, weight_decay=weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()
    xt = torch.from_numpy(x)
    for _ in range(epochs):
        opt.zero_grad()
        loss = loss_fn(clf(xt), y)
        loss.backward()
        opt.step()
    clf.eval()
    return clf


def estimate_divergence(classifier: DomainClassifier, dataset: UnifiedDataset, index: np.ndarray | None = None,
                        seed: int | None = None) -> DivergenceEstimate:
    """Per-domain error rates on ``index`` (default: the classifier's held-out rows)."""
    if index is None:
        index = classifier.test_index if classifier.test_index is not None else np.arange(dataset.q)
    y = dataset.labels[index]
    pred = classifier.predict(dataset.features[index])
    src, tgt = y == 0, y == 1
    if not src.any() or not tgt.any():
        raise DataError("evaluation rows must include both domains")
    eps_s = float(np.mean(pred[src] != 0))
    eps_t = float(np.mean(pred[tgt] != 1))
    acc = float(np.mean(pred == y))
    return DivergenceEstimate(eps_s, eps_t, h_divergence(eps_s, eps_t), acc, seed)


def probe(source, target, seed: int = 0, epochs: int = 200) -> DivergenceEstimate:
    ds = build_unified_dataset(source, target)
    clf = train_domain_classifier(ds, epochs=epochs, seed=seed)
    return estimate_divergence(clf, ds, seed=seed)


# -- feature dumps -------------------------------------------------------------

DUMP_VERSION = 1


def write_feature_dump(path: str | Path, records: list[dict], layer: str) -> Path:
    """JSON-lines: one header line, then one record per feature row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = len(records[0]["feature"]) if records else 0
    with path.open("w") as fh:
        fh.write(json.dumps({"format_version": DUMP_VERSION, "count": len(records), "dim": dim, "layer": layer}) + "\n")
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return path


def read_feature_dump(path: str | Path) -> tuple[dict, list[dict]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature dump not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise DataError(f"{path}: empty feature dump")
    header = json.loads(lines[0])
    if header.get("format_version") != DUMP_VERSION:
        raise DataError(f"{path}: unsupported dump version {header.get('format_version')!r}")
    records = [json.loads(line) for line in lines[1:] if line.strip()]
    if len(records) != header["count"]:
        raise DataError(f"{path}: header count {header['count']} != {len(records)} records")
    return header, records


def dump_to_dataset(path: str | Path) -> UnifiedDataset:
    _, records = read_feature_dump(path)
    src = [r["feature"] for r in records if r["domain"] == "source"]
    tgt = [r["feature"] for r in records if r["domain"] == "target"]
    return build_unified_dataset(src, tgt)
