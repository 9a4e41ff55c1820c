"""Tiny decoder-only language model: tokenizer, transformer, adapters, training."""

from .lora import LoraAdapter, LoraConfig, LoraError, lora_inject, lora_merge, trainable_count
from .model import ContextError, ModelConfig, ModelParams, forward, init_params, lm_loss, quantize_base
from .quant import QuantizedTensor, quantize
from .tokenizer import Tokenizer, build_vocab
from .train import (
    TrainConfig,
    TrainHistory,
    TrainingError,
    continuation_logliks,
    decode_greedy,
    encode_prompt,
    gradients,
    lr_at,
    pretrain_base,
    train_sft,
)
