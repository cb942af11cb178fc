"""Single-file checkpoints: named arrays plus one JSON metadata block.

The container is safetensors.  Array names are namespaced ``detector/``,
``pdm/<domain>/<level>/{value,weight}``, ``pma/``, ``teacher/``, ``optim/``
and ``rng/``.  All metadata lives under one ``meta`` key as sorted JSON so
that identical contents serialize to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .errors import StateError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    arrays: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}

    def put_group(self, prefix: str, tensors: dict[str, torch.Tensor]) -> None:
        for k, v in tensors.items():
            self.arrays[f"{prefix}/{k}"] = v.detach().cpu().contiguous()

    def to_bytes(self) -> bytes:
        meta = dict(self.meta, format_version=FORMAT_VERSION)
        return st_save(dict(sorted(self.arrays.items())), metadata={"meta": json.dumps(meta, sort_keys=True)})

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        arrays = st_load(data)
        meta = json.loads(_read_metadata(data).get("meta", "{}"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise StateError(f"checkpoint format_version {version!r} != supported {FORMAT_VERSION}")
        return cls(arrays, meta)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def _read_metadata(data: bytes) -> dict[str, str]:
    n = int.from_bytes(data[:8], "little")
    header = json.loads(data[8 : 8 + n])
    return header.get("__metadata__", {}) or {}


def payload_digest(ckpt: Checkpoint) -> dict[str, bytes]:
    """Raw bytes per array, for byte-level comparisons."""
    return {k: v.numpy().tobytes() for k, v in sorted(ckpt.arrays.items())}


def module_arrays(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def optimizer_arrays(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    """Split an optimizer state into tensors and a JSON-able description."""
    sd = opt.state_dict()
    arrays, desc = {}, {"param_groups": sd["param_groups"], "state": {}}
    for pid, st in sd["state"].items():
        keys = []
        for k, v in st.items():
            t = v if torch.is_tensor(v) else torch.tensor(v)
            arrays[f"{pid}/{k}"] = t.detach().clone()
            keys.append(k)
        desc["state"][str(pid)] = keys
    return arrays, desc


def restore_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, torch.Tensor], desc: dict) -> None:
    state = {int(pid): {k: arrays[f"{pid}/{k}"].clone() for k in keys} for pid, keys in desc["state"].items()}
    opt.load_state_dict({"state": state, "param_groups": desc["param_groups"]})


def rng_arrays(generators: dict[str, torch.Generator]) -> dict[str, torch.Tensor]:
    out = {"torch": torch.get_rng_state()}
    out.update({k: g.get_state() for k, g in generators.items()})
    return out


def restore_rng(arrays: dict[str, torch.Tensor], generators: dict[str, torch.Generator]) -> None:
    if "torch" in arrays:
        torch.set_rng_state(arrays["torch"])
    for k, g in generators.items():
        if k in arrays:
            g.set_state(arrays[k])


def histogram_arrays(histograms: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.asarray(v, dtype=np.int64).copy()) for k, v in histograms.items()}
