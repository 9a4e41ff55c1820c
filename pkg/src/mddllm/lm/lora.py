"""Low-rank adapters: ``W x + (alpha / r) * B (A x)`` on selected weight matrices."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import ModelParams


class LoraError(ValueError):
    pass


@dataclass(frozen=True)
class LoraConfig:
    r: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("q", "v")
    init_std: float = 0.02

    def __post_init__(self):
        if not isinstance(self.r, int) or self.r <= 0:
            raise LoraError(f"rank must be a positive integer, got {self.r!r}")
        if not self.targets:
            raise LoraError("at least one target matrix is required")


@dataclass
class LoraAdapter:
    """``A`` is ``(r, d_in)``, ``B`` is ``(d_out, r)``; stored under ``<matrix>.A`` / ``<matrix>.B``."""

    config: LoraConfig
    tensors: dict[str, torch.Tensor]

    @property
    def r(self) -> int:
        return self.config.r

    @property
    def alpha(self) -> float:
        return self.config.alpha

    @property
    def scaling(self) -> float:
        return self.config.alpha / self.config.r

    @property
    def targets_present(self) -> set[str]:
        return {k[: -len(".A")] for k in self.tensors if k.endswith(".A")}

    def pair(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        return self.tensors[f"{name}.A"], self.tensors[f"{name}.B"]

    def parameters(self) -> list[torch.Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def nbytes(self) -> int:
        return sum(t.numel() * t.element_size() for t in self.tensors.values())

    def delta(self, name: str) -> torch.Tensor:
        a, b = self.pair(name)
        return self.scaling * (b @ a)

    def detached(self) -> "LoraAdapter":
        return LoraAdapter(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def to(self, dtype: torch.dtype) -> "LoraAdapter":
        return LoraAdapter(self.config, {k: v.detach().to(dtype) for k, v in self.tensors.items()})


def target_names(params: ModelParams, targets) -> list[str]:
    names = []
    for layer in range(params.config.n_layer):
        for t in targets:
            try:
                name = params.config.matrix_name(layer, t)
            except KeyError as exc:
                raise LoraError(str(exc)) from None
            if name not in params:
                raise LoraError(f"target {name!r} not in model parameters")
            names.append(name)
    return names


def lora_inject(params: ModelParams, config: LoraConfig | None = None, seed: int = 0) -> LoraAdapter:
    """Fresh adapter: ``B = 0`` and ``A ~ N(0, init_std^2)``, so the adapted model equals the base."""
    config = config or LoraConfig()
    gen = torch.Generator().manual_seed(seed)
    dtype = params.dtype
    tensors = {}
    for name in target_names(params, config.targets):
        d_out, d_in = params.config.d_model, params.config.d_model
        if name.endswith("mlp.up"):
            d_out = params.config.d_mlp
        elif name.endswith("mlp.down"):
            d_in = params.config.d_mlp
        a = torch.randn((config.r, d_in), generator=gen, dtype=torch.float64) * config.init_std
        tensors[f"{name}.A"] = a.to(dtype)
        tensors[f"{name}.B"] = torch.zeros((d_out, config.r), dtype=dtype)
    return LoraAdapter(config, tensors)


def trainable_count(adapter: LoraAdapter) -> int:
    return adapter.numel()


def lora_merge(params: ModelParams, adapter: LoraAdapter) -> ModelParams:
    """Fold ``(alpha / r) B A`` into the base weights.

    Not idempotent: merging the same adapter twice adds the delta twice.
    A quantized base is dequantized first.
    """
    out = {k: params[k].clone() for k in params.tensors}
    for name in sorted(adapter.targets_present):
        delta = adapter.delta(name).to(out[name].dtype)
        if delta.shape != out[name].shape:
            raise LoraError(f"{name}: adapter delta {tuple(delta.shape)} does not match weight {tuple(out[name].shape)}")
        out[name] = out[name] + delta
    return ModelParams(params.config, out)
