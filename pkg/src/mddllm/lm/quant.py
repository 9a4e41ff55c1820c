"""4-bit blockwise absmax quantization.

Each block of 64 consecutive elements (row-major, zero padded at the end)
stores one float32 scale ``absmax / 7`` and signed codes in ``[-7, 7]``
packed two per byte.  Reconstruction error per element is at most
``scale / 2 = absmax / 14``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

BLOCK = 64
LEVELS = 7


@dataclass(frozen=True)
class QuantizedTensor:
    packed: np.ndarray      # uint8, two codes per byte (low nibble first)
    scales: np.ndarray      # float32, one per block
    shape: tuple[int, ...]

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nbytes(self) -> int:
        return self.packed.nbytes + self.scales.nbytes

    def codes(self) -> np.ndarray:
        lo = (self.packed & 0x0F).astype(np.int8)
        hi = (self.packed >> 4).astype(np.int8)
        codes = np.empty(self.packed.size * 2, dtype=np.int8)
        codes[0::2], codes[1::2] = lo, hi
        return codes - 8

    def dequantize(self, dtype=torch.float32) -> torch.Tensor:
        codes = self.codes()[: self.scales.size * BLOCK].reshape(-1, BLOCK)
        values = (codes.astype(np.float32) * self.scales[:, None]).reshape(-1)[: self.numel]
        return torch.from_numpy(values.reshape(self.shape)).to(dtype)


def quantize(tensor: torch.Tensor | np.ndarray) -> QuantizedTensor:
    x = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
    shape = tuple(x.shape)
    flat = x.astype(np.float32).reshape(-1)
    n_blocks = -(-flat.size // BLOCK)
    blocks = np.zeros(n_blocks * BLOCK, dtype=np.float32)
    blocks[: flat.size] = flat
    blocks = blocks.reshape(n_blocks, BLOCK)
    scales = (np.abs(blocks).max(axis=1) / LEVELS).astype(np.float32)
    safe = np.where(scales > 0, scales, 1.0)
    codes = np.clip(np.rint(blocks / safe[:, None]), -LEVELS, LEVELS).astype(np.int8).reshape(-1)
    nibbles = (codes + 8).astype(np.uint8)
    packed = (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8)
    return QuantizedTensor(packed, scales, shape)


def dense_nbytes(shape: tuple[int, ...], bytes_per_element: int = 4) -> int:
    return int(np.prod(shape)) * bytes_per_element


def quantized_nbytes(shape: tuple[int, ...]) -> int:
    n = int(np.prod(shape))
    n_blocks = -(-n // BLOCK)
    return n_blocks * BLOCK // 2 + 4 * n_blocks
