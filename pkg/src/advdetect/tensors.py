"""Small torch helpers shared by detectors and attacks."""

from __future__ import annotations

import random

import numpy as np
import torch

from advdetect.boxes import Image


def to_tensor(image: Image, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(3, H, W) tensor from an Image."""
    return torch.from_numpy(image.pixels.copy()).to(dtype)


def to_image(tensor: torch.Tensor, image_id: str = "") -> Image:
    """Image from a (3, H, W) tensor; values are clamped into [0, 1]."""
    arr = tensor.detach().cpu().clamp(0.0, 1.0).to(torch.float32).numpy()
    return Image(np.ascontiguousarray(arr), id=image_id)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
