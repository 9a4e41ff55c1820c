"""Tiny decoder-only transformer, written functionally over a dict of named tensors.

Layout per layer ``h{i}``: RMS-norm -> causal multi-head self-attention
(``attn.q``, ``attn.k``, ``attn.v``, ``attn.o``) -> residual, RMS-norm ->
GELU MLP (``mlp.up``, ``mlp.down``) -> residual.  Learned absolute position
embeddings, a final norm and an untied output head.  Weight matrices are
stored ``(out, in)`` and applied as ``x @ W.T``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Mapping

import torch
import torch.nn.functional as F

from .quant import QuantizedTensor, quantize

ATTN_TARGETS = ("q", "k", "v", "o")
MLP_TARGETS = ("up", "down")
NORM_EPS = 1e-6


class ContextError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layer: int = 4
    n_head: int = 4
    d_model: int = 128
    d_mlp: int = 512
    context_len: int = 512

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_head:
            raise ValueError("d_model must be divisible by n_head")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_head

    def matrix_name(self, layer: int, target: str) -> str:
        if target in ATTN_TARGETS:
            return f"h{layer}.attn.{target}"
        if target in MLP_TARGETS:
            return f"h{layer}.mlp.{target}"
        raise KeyError(f"unknown target {target!r}; choose from {ATTN_TARGETS + MLP_TARGETS}")


@dataclass
class ModelParams:
    """Named weights.  Entries may be ``QuantizedTensor`` for a 4-bit base."""

    config: ModelConfig
    tensors: dict[str, torch.Tensor | QuantizedTensor]

    def __getitem__(self, name: str) -> torch.Tensor:
        t = self.tensors[name]
        if isinstance(t, QuantizedTensor):
            return t.dequantize(self.dtype)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self) -> Iterator[tuple[str, torch.Tensor | QuantizedTensor]]:
        return iter(self.tensors.items())

    @property
    def dtype(self) -> torch.dtype:
        for t in self.tensors.values():
            if isinstance(t, torch.Tensor):
                return t.dtype
        return torch.float32

    @property
    def quantized(self) -> bool:
        return any(isinstance(t, QuantizedTensor) for t in self.tensors.values())

    def nbytes(self) -> int:
        return sum(t.nbytes if isinstance(t, QuantizedTensor) else t.numel() * t.element_size()
                   for t in self.tensors.values())

    def numel(self) -> int:
        return sum(t.numel if isinstance(t, QuantizedTensor) else t.numel() for t in self.tensors.values())

    def dense(self) -> "ModelParams":
        return ModelParams(self.config, {k: self[k] for k in self.tensors})

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams(self.config, {k: self[k].to(dtype) for k in self.tensors})


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m, v = config.d_model, config.d_mlp, config.vocab_size
    shapes = {"tok_emb": (v, d), "pos_emb": (config.context_len, d)}
    for i in range(config.n_layer):
        shapes[f"h{i}.ln1.g"] = (d,)
        for t in ATTN_TARGETS:
            shapes[f"h{i}.attn.{t}"] = (d, d)
        shapes[f"h{i}.ln2.g"] = (d,)
        shapes[f"h{i}.mlp.up"] = (m, d)
        shapes[f"h{i}.mlp.down"] = (d, m)
    shapes["ln_f.g"] = (d,)
    shapes["head"] = (v, d)
    return shapes


def init_params(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> ModelParams:
    """N(0, 0.02) weights, residual output projections scaled by 1/sqrt(2 n_layer), unit gains."""
    gen = torch.Generator().manual_seed(seed)
    tensors = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".g"):
            tensors[name] = torch.ones(shape, dtype=torch.float64)
            continue
        std = 0.02
        if name.endswith("attn.o") or name.endswith("mlp.down"):
            std /= math.sqrt(2 * config.n_layer)
        tensors[name] = torch.randn(shape, generator=gen, dtype=torch.float64) * std
    return ModelParams(config, {k: v.to(dtype) for k, v in tensors.items()})


def quantize_base(params: ModelParams) -> ModelParams:
    """Replace every weight matrix (embeddings, attention, MLP, head) by its 4-bit blockwise form.

    Norm gains stay dense.
    """
    out = {}
    for name, t in params.items():
        is_matrix = isinstance(t, torch.Tensor) and t.dim() == 2
        out[name] = quantize(t) if is_matrix else t
    return ModelParams(params.config, out)


def dequantize(params: ModelParams) -> ModelParams:
    return params.dense()


def _rms_norm(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + NORM_EPS) * g


def _linear(x: torch.Tensor, weights: Mapping[str, torch.Tensor], name: str, adapter) -> torch.Tensor:
    y = x @ weights[name].T
    if adapter is not None and name in adapter.targets_present:
        a, b = adapter.pair(name)
        y = y + adapter.scaling * ((x @ a.T) @ b.T)
    return y


def forward(params: ModelParams | Mapping[str, torch.Tensor], ids, adapter=None,
            config: ModelConfig | None = None) -> torch.Tensor:
    """Logits of shape ``(T, V)`` for a 1-D id sequence or ``(B, T, V)`` for a batch.

    Position ``t`` attends to positions ``<= t`` only, so right padding never
    changes logits of earlier positions.
    """
    config = config or params.config
    ids = torch.as_tensor(ids, dtype=torch.long)
    squeeze = ids.dim() == 1
    if squeeze:
        ids = ids[None]
    bsz, seq = ids.shape
    if seq > config.context_len:
        raise ContextError(f"sequence of {seq} tokens exceeds context length {config.context_len}")
    if isinstance(params, ModelParams):
        weights = {k: params[k] for k in params.tensors}
    else:
        weights = params
    nh, hd = config.n_head, config.head_dim

    x = weights["tok_emb"][ids] + weights["pos_emb"][:seq]
    causal = torch.ones(seq, seq, dtype=torch.bool).triu(1)
    for i in range(config.n_layer):
        h = _rms_norm(x, weights[f"h{i}.ln1.g"])
        q = _linear(h, weights, f"h{i}.attn.q", adapter).view(bsz, seq, nh, hd).transpose(1, 2)
        k = _linear(h, weights, f"h{i}.attn.k", adapter).view(bsz, seq, nh, hd).transpose(1, 2)
        v = _linear(h, weights, f"h{i}.attn.v", adapter).view(bsz, seq, nh, hd).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        scores = scores.masked_fill(causal, float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        att = att.transpose(1, 2).reshape(bsz, seq, config.d_model)
        x = x + _linear(att, weights, f"h{i}.attn.o", adapter)
        h = _rms_norm(x, weights[f"h{i}.ln2.g"])
        h = F.gelu(_linear(h, weights, f"h{i}.mlp.up", adapter))
        x = x + _linear(h, weights, f"h{i}.mlp.down", adapter)
    x = _rms_norm(x, weights["ln_f.g"])
    logits = x @ weights["head"].T
    return logits[0] if squeeze else logits


def lm_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    ``logits[..., t, :]`` predicts ``targets[..., t]``.  ``mask`` selects the
    answer positions; prompt and padding positions carry zero weight.
    """
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        mask = torch.ones_like(nll, dtype=torch.bool)
    mask = mask.to(torch.bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("all positions are masked out of the loss")
    return nll[mask].sum() / count
