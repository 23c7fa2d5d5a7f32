"""Low-rank adapters on frozen attention projections.

Each targeted weight ``W`` (d x h) gets ``B`` (d x k) and ``A`` (k x h); the
layer computes ``x (W + B A)^T`` without materialising ``B A``. The update is
applied with scale 1. ``A`` starts as N(0, (1/k)^2) and ``B`` at zero, so a
fresh set leaves the model unchanged.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .core import CompatibilityError, ConfigError, Rng, Tensor, linear, matmul
from .model import ModelParams

DEFAULT_TARGETS = "*attn.to_*.weight"


@dataclass
class LoRAAdapter:
    target_path: str
    A: Tensor
    B: Tensor

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        return self.B.data @ self.A.data

    def trainable_count(self) -> int:
        return self.A.size + self.B.size


@dataclass
class LoRASet:
    adapters: list[LoRAAdapter]
    frozen_base: ModelParams
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {}
        for ad in self.adapters:
            if ad.target_path in self._index:
                raise ConfigError(f"two adapters target {ad.target_path}")
            self._index[ad.target_path] = ad

    def get(self, path: str) -> LoRAAdapter | None:
        return self._index.get(path)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for ad in self.adapters:
            out[f"{ad.target_path}.lora_A"] = ad.A
            out[f"{ad.target_path}.lora_B"] = ad.B
        return out

    def trainable_count(self) -> int:
        return sum(ad.trainable_count() for ad in self.adapters)

    def __len__(self) -> int:
        return len(self.adapters)


def attach(params: ModelParams, rank: int = 4, targets: str = DEFAULT_TARGETS, seed: int = 0) -> LoRASet:
    """Freeze every base parameter and create one adapter per matching 2-D weight."""
    paths = sorted(p for p in params if fnmatch.fnmatchcase(p, targets))
    if not paths:
        raise ConfigError(f"target pattern {targets!r} matches no parameters")
    rng = Rng(seed)
    adapters = []
    for path in paths:
        w = params[path]
        if w.ndim != 2:
            raise ConfigError(f"LoRA target {path} is not a 2-D weight (shape {w.shape})")
        d, h = w.shape
        if not 1 <= rank <= min(d, h):
            raise ConfigError(f"rank {rank} invalid for {path} with shape {w.shape}")
        a = Tensor(rng.normal((rank, h)) * np.float32(1.0 / rank), requires_grad=True)
        b = Tensor(np.zeros((d, rank), dtype=np.float32), requires_grad=True)
        adapters.append(LoRAAdapter(path, a, b))
    for t in params.values():
        t.requires_grad = False
        t.grad = None
    return LoRASet(adapters, params)


def effective_forward(adapter: LoRAAdapter, w: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """x (W + B A)^T + b, computed as x W^T + (x A^T) B^T."""
    base = linear(x, w, b)
    return base + matmul(matmul(x, adapter.A.T), adapter.B.T)


def merge(lora: LoRASet) -> ModelParams:
    """Copy of the base parameters with every target replaced by W + B A."""
    merged = {}
    for name, t in lora.frozen_base.items():
        ad = lora.get(name)
        data = t.data + ad.delta() if ad is not None else t.data.copy()
        merged[name] = Tensor(data.astype(np.float32))
    return merged


def save_adapter(lora: LoRASet, path, extra_tensors: dict | None = None, meta: dict | None = None) -> None:
    tensors = {k: v.data for k, v in lora.parameters().items()}
    if extra_tensors:
        tensors.update(extra_tensors)
    info = dict(meta or {})
    info["adapter_only"] = True
    info["lora"] = {
        "rank": lora.adapters[0].rank if lora.adapters else 0,
        "targets": [ad.target_path for ad in lora.adapters],
    }
    save_checkpoint(tensors, info, path)


def adapters_from_tensors(tensors: dict, meta: dict, params: ModelParams) -> LoRASet:
    adapters = []
    for path in meta["lora"]["targets"]:
        if path not in params:
            raise CompatibilityError(f"adapter target {path} not present in base parameters")
        w = params[path]
        a = tensors.get(f"{path}.lora_A")
        b = tensors.get(f"{path}.lora_B")
        if a is None or b is None:
            raise CompatibilityError(f"adapter factors for {path} missing from checkpoint")
        if a.ndim != 2 or b.ndim != 2 or b.shape[0] != w.shape[0] or a.shape[1] != w.shape[1] or a.shape[0] != b.shape[1]:
            raise CompatibilityError(
                f"adapter for {path} has A{tuple(a.shape)} B{tuple(b.shape)}, incompatible with W{w.shape}"
            )
        adapters.append(LoRAAdapter(path, Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)))
    for t in params.values():
        t.requires_grad = False
    return LoRASet(adapters, params)


def load_adapter(path, params: ModelParams) -> LoRASet:
    tensors, meta = load_checkpoint(path)
    if not meta.get("adapter_only"):
        raise CompatibilityError(f"{path} is not an adapter checkpoint")
    return adapters_from_tensors(tensors, meta, params)
