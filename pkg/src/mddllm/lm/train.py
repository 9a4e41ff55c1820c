"""Supervised fine-tuning of adapters, gradient computation, scoring and greedy decoding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .lora import LoraAdapter, LoraConfig, lora_inject
from .model import ModelParams, forward, lm_loss
from .tokenizer import Tokenizer

ANSWER_CUE = "answer:"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings.

    AdamW with decoupled weight decay; learning rate rises linearly from 0
    to ``peak_lr`` over the first ``warmup_fraction`` of steps and then falls
    linearly to 0 at the last step.
    """

    peak_lr: float = 3e-4
    warmup_fraction: float = 0.1
    weight_decay: float = 0.1
    batch_size: int = 16
    epochs: int = 5
    seed: int = 0
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    max_steps: int | None = None

    def total_steps(self, n_examples: int) -> int:
        per_epoch = math.ceil(n_examples / self.batch_size)
        total = per_epoch * self.epochs
        return min(total, self.max_steps) if self.max_steps else total


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_fraction: float) -> float:
    warmup = max(1, round(warmup_fraction * total_steps))
    if step < warmup:
        return peak_lr * step / warmup
    if total_steps <= warmup:
        return peak_lr
    return peak_lr * max(0.0, (total_steps - step) / (total_steps - warmup))


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    epoch: list[int] = field(default_factory=list)

    def epoch_mean_loss(self) -> list[float]:
        loss, epoch = np.asarray(self.loss), np.asarray(self.epoch)
        return [float(loss[epoch == e].mean()) for e in sorted(set(self.epoch))]

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------ sequences

def prompt_text(instruction: str, input_text: str) -> str:
    return f"{instruction}\n{input_text}\n{ANSWER_CUE}"


def encode_prompt(tokenizer: Tokenizer, instruction: str, input_text: str) -> list[int]:
    return [tokenizer.bos_id, *tokenizer.encode(prompt_text(instruction, input_text))]


def encode_example(tokenizer: Tokenizer, example) -> tuple[list[int], int]:
    """Token ids of prompt + answer + EOS, and the index where the answer starts."""
    prompt = encode_prompt(tokenizer, example.instruction, example.input)
    answer = tokenizer.encode(example.output) + [tokenizer.eos_id]
    return prompt + answer, len(prompt)


@dataclass(frozen=True)
class Batch:
    inputs: torch.Tensor    # (B, T)
    targets: torch.Tensor   # (B, T)
    mask: torch.Tensor      # (B, T) bool, True on answer positions


def make_batch(encoded: Sequence[tuple[list[int], int]], pad_id: int = 0) -> Batch:
    width = max(len(ids) for ids, _ in encoded) - 1
    inputs = torch.full((len(encoded), width), pad_id, dtype=torch.long)
    targets = torch.full((len(encoded), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(encoded), width), dtype=torch.bool)
    for row, (ids, start) in enumerate(encoded):
        n = len(ids) - 1
        inputs[row, :n] = torch.tensor(ids[:-1])
        targets[row, :n] = torch.tensor(ids[1:])
        mask[row, start - 1:n] = True
    return Batch(inputs, targets, mask)


# ------------------------------------------------------------ gradients

def gradients(params: ModelParams, batch: Batch, adapter: LoraAdapter | None = None):
    """Loss and exact reverse-mode gradients of the trainable tensors.

    With an adapter only its ``A``/``B`` tensors are trainable and the base
    weights get no gradient entry; without one every base tensor does.
    """
    if adapter is not None:
        trainable = {k: v.detach().clone().requires_grad_(True) for k, v in adapter.tensors.items()}
        run_adapter = LoraAdapter(adapter.config, trainable)
        weights = {k: params[k] for k in params.tensors}
    else:
        trainable = {k: params[k].detach().clone().requires_grad_(True) for k in params.tensors}
        run_adapter = None
        weights = trainable
    logits = forward(weights, batch.inputs, run_adapter, params.config)
    loss = lm_loss(logits, batch.targets, batch.mask)
    names = sorted(trainable)
    grads = torch.autograd.grad(loss, [trainable[n] for n in names])
    out = {}
    for name, g in zip(names, grads):
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name}")
        out[name] = g
    return float(loss.detach()), out


# ------------------------------------------------------------ training

def train_sft(base: ModelParams, examples: Sequence, tokenizer: Tokenizer,
              train_config: TrainConfig | None = None, lora_config: LoraConfig | None = None,
              adapter: LoraAdapter | None = None) -> tuple[LoraAdapter, TrainHistory]:
    """Fit a LoRA adapter on ``examples`` (objects with instruction/input/output).

    Base weights are never modified.  Batch order comes from
    ``np.random.default_rng([seed, epoch])`` so a run is fully determined by
    its inputs when torch runs single-threaded.
    """
    cfg = train_config or TrainConfig()
    if not examples:
        raise TrainingError("empty corpus")
    encoded = [encode_example(tokenizer, ex) for ex in examples]
    longest = max(len(ids) for ids, _ in encoded) - 1
    if longest > base.config.context_len:
        raise TrainingError(f"example of {longest} tokens exceeds context length {base.config.context_len}")
    if adapter is None:
        adapter = lora_inject(base, lora_config, seed=cfg.seed)
    trainable = {k: v.detach().clone().requires_grad_(True) for k, v in adapter.tensors.items()}
    run_adapter = LoraAdapter(adapter.config, trainable)
    names = sorted(trainable)
    opt = torch.optim.AdamW([trainable[n] for n in names], lr=0.0, betas=cfg.betas, eps=cfg.eps,
                            weight_decay=cfg.weight_decay, foreach=False)
    total = cfg.total_steps(len(encoded))
    quantized = base.quantized
    dense_weights = None if quantized else {k: base[k] for k in base.tensors}

    history = TrainHistory()
    step, epoch = 0, 0
    while step < total:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(encoded))
        for start in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            batch = make_batch([encoded[i] for i in order[start:start + cfg.batch_size]], tokenizer.pad_id)
            lr = lr_at(step, total, cfg.peak_lr, cfg.warmup_fraction)
            for group in opt.param_groups:
                group["lr"] = lr
            # a quantized base is expanded from its 4-bit codes at every step
            weights = dense_weights if dense_weights is not None else {k: base[k] for k in base.tensors}
            logits = forward(weights, batch.inputs, run_adapter, base.config)
            loss = lm_loss(logits, batch.targets, batch.mask)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_([trainable[n] for n in names], cfg.grad_clip, foreach=False)
            opt.step()
            history.loss.append(float(loss.detach()))
            history.lr.append(lr)
            history.epoch.append(epoch)
            step += 1
        epoch += 1
    return run_adapter.detached(), history


def pretrain_base(params: ModelParams, texts: Sequence[str], tokenizer: Tokenizer,
                  train_config: TrainConfig | None = None) -> tuple[ModelParams, TrainHistory]:
    """Full-parameter causal language modelling on unlabeled text.

    Every token of ``[BOS] text [EOS]`` is a target.  Produces the frozen
    base that adapters are later fitted on; no answers are ever shown.
    """
    cfg = train_config or TrainConfig()
    if not texts:
        raise TrainingError("empty pretraining corpus")
    encoded = []
    for text in texts:
        ids = [tokenizer.bos_id, *tokenizer.encode(text), tokenizer.eos_id]
        if len(ids) - 1 > params.config.context_len:
            raise TrainingError(f"text of {len(ids) - 1} tokens exceeds context length")
        encoded.append((ids, 1))
    weights = {k: params[k].detach().clone().requires_grad_(True) for k in params.tensors}
    names = list(weights)
    decay = [weights[n] for n in names if weights[n].dim() >= 2]
    no_decay = [weights[n] for n in names if weights[n].dim() < 2]
    opt = torch.optim.AdamW([{"params": decay, "weight_decay": cfg.weight_decay},
                             {"params": no_decay, "weight_decay": 0.0}],
                            lr=0.0, betas=cfg.betas, eps=cfg.eps, foreach=False)
    total = cfg.total_steps(len(encoded))
    history = TrainHistory()
    step, epoch = 0, 0
    while step < total:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(encoded))
        for start in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            batch = make_batch([encoded[i] for i in order[start:start + cfg.batch_size]], tokenizer.pad_id)
            lr = lr_at(step, total, cfg.peak_lr, cfg.warmup_fraction)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = lm_loss(forward(weights, batch.inputs, None, params.config), batch.targets, batch.mask)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_([weights[n] for n in names], cfg.grad_clip, foreach=False)
            opt.step()
            history.loss.append(float(loss.detach()))
            history.lr.append(lr)
            history.epoch.append(epoch)
            step += 1
        epoch += 1
    return ModelParams(params.config, {k: v.detach() for k, v in weights.items()}), history


def final_loss(base: ModelParams, adapter: LoraAdapter | None, examples, tokenizer: Tokenizer) -> float:
    """Answer-token loss of ``examples`` under the given weights (no update)."""
    batch = make_batch([encode_example(tokenizer, ex) for ex in examples], tokenizer.pad_id)
    with torch.no_grad():
        return float(lm_loss(forward(base, batch.inputs, adapter), batch.targets, batch.mask))


# ------------------------------------------------------------ inference

def continuation_logliks(params: ModelParams, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                         adapter: LoraAdapter | None = None, batch_size: int = 32) -> np.ndarray:
    """Teacher-forced ``sum_t log p(cont_t | prefix, cont_<t)`` for each (prefix, continuation)."""
    out = np.zeros(len(pairs), dtype=np.float64)
    weights = {k: params[k] for k in params.tensors}
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        width = max(len(p) + len(c) for p, c in chunk)
        ids = torch.zeros((len(chunk), width), dtype=torch.long)
        for row, (p, c) in enumerate(chunk):
            ids[row, : len(p) + len(c)] = torch.tensor([*p, *c])
        with torch.no_grad():
            logp = torch.log_softmax(forward(weights, ids, adapter, params.config), dim=-1)
        for row, (p, c) in enumerate(chunk):
            if not c:
                continue
            pos = torch.arange(len(p) - 1, len(p) + len(c) - 1)
            vals = logp[row, pos, torch.tensor(c)].to(torch.float64).numpy()
            total = 0.0
            for v in vals:
                total += float(v)
            out[start + row] = total
    return out


def decode_greedy(params: ModelParams, prompt_ids: Sequence[int], max_new: int,
                  adapter: LoraAdapter | None = None, stop_ids: Iterable[int] = (2,)) -> list[int]:
    """Argmax continuation (ties go to the lowest id); the stop token is included if produced."""
    ids = list(prompt_ids)
    if len(ids) > params.config.context_len:
        from .model import ContextError
        raise ContextError(f"prompt of {len(ids)} tokens exceeds context length {params.config.context_len}")
    stops = set(stop_ids)
    weights = {k: params[k] for k in params.tensors}
    new: list[int] = []
    for _ in range(max_new):
        if len(ids) >= params.config.context_len:
            break
        with torch.no_grad():
            logits = forward(weights, ids, adapter, params.config)[-1].to(torch.float64).numpy()
        nxt = int(np.argmax(logits))
        new.append(nxt)
        ids.append(nxt)
        if nxt in stops:
            break
    return new
