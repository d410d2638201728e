"""Conversions between numpy channels-last images and torch NCHW tensors."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x C (or H x W) [0,1] array -> 1 x C x H x W float32 tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0).contiguous()


def batch_to_tensor(batch: np.ndarray) -> torch.Tensor:
    """B x H x W x C array -> B x C x H x W float32 tensor."""
    arr = np.asarray(batch, dtype=np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    """1 x C x H x W (or C x H x W) tensor -> H x W x C float32 array."""
    t = tensor.detach()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    out = t.permute(1, 2, 0).cpu().numpy().astype(np.float32)
    return out[:, :, 0] if out.shape[2] == 1 else out


def tensor_to_batch(tensor: torch.Tensor) -> np.ndarray:
    """B x C x H x W tensor -> B x H x W x C float32 array."""
    return tensor.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def seeded_conv_init(module: nn.Module, seed: int) -> None:
    """Re-initialize every conv in ``module`` with fan-in-scaled uniform noise.

    Deterministic given the seed; iteration follows registration order.
    """
    gen = torch.Generator(device="cpu").manual_seed(int(seed) & 0x7FFFFFFFFFFF)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
