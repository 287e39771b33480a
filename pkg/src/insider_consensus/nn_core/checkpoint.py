"""JSON checkpoints for named float tensors.

Layout::

    {"format_version": 1,
     "component": "world_model" | "classifier" | "qnet",
     "hyperparameters": {...},
     "tensors": {"<name>": {"shape": [...], "data": [...]}, ...}}

Tensor order is the module's ``named_parameters`` order (attribute definition
order, depth first), which is fixed per architecture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

import numpy as np

from .layers import DimensionError, Module

FORMAT_VERSION = 1
COMPONENTS = ("world_model", "classifier", "qnet")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Immutable snapshot of a module's parameters plus the hyperparameters that shaped it."""

    component: str
    hyperparameters: Mapping[str, Any]
    tensors: Mapping[str, np.ndarray] = field(repr=False)

    @classmethod
    def from_module(cls, component: str, hyperparameters: dict, module: Module) -> "ModelParams":
        if component not in COMPONENTS:
            raise CheckpointError(f"unknown component {component!r}")
        tensors = {}
        for name, p, _ in module.named_parameters():
            arr = np.array(p, dtype=np.float32, copy=True)
            arr.flags.writeable = False
            tensors[name] = arr
        return cls(component, MappingProxyType(dict(hyperparameters)), MappingProxyType(tensors))

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "component": self.component,
            "hyperparameters": dict(self.hyperparameters),
            "tensors": {n: {"shape": list(t.shape), "data": t.reshape(-1).tolist()}
                        for n, t in self.tensors.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelParams":
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
        if doc.get("component") not in COMPONENTS:
            raise CheckpointError(f"unknown component {doc.get('component')!r}")
        tensors = {}
        for name, spec in doc["tensors"].items():
            shape = tuple(spec["shape"])
            data = np.asarray(spec["data"], dtype=np.float32)
            if data.size != int(np.prod(shape)):
                raise CheckpointError(f"tensor {name!r}: {data.size} values for shape {shape}")
            arr = data.reshape(shape)
            arr.flags.writeable = False
            tensors[name] = arr
        return cls(doc["component"], MappingProxyType(dict(doc["hyperparameters"])), MappingProxyType(tensors))

    def load_into(self, module: Module) -> Module:
        try:
            module.load_parameters(dict(self.tensors))
        except (KeyError, DimensionError) as exc:
            raise CheckpointError(f"{self.component} checkpoint does not fit its hyperparameters: {exc}") from exc
        return module


def save_checkpoint(path: str | Path, params: ModelParams) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(params.to_json(), separators=(",", ":")))
    return path


def load_checkpoint(path: str | Path, component: str | None = None) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    params = ModelParams.from_json(json.loads(path.read_text()))
    if component is not None and params.component != component:
        raise CheckpointError(f"{path}: expected a {component} checkpoint, found {params.component}")
    return params
