"""numpy <-> torch shims so numerical ops accept either and return the same kind."""

from __future__ import annotations

import numpy as np
import torch

DTYPE = torch.float64


def to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def any_tensor(*xs) -> bool:
    return any(isinstance(x, torch.Tensor) for x in xs)


def out_like(y: torch.Tensor, as_tensor: bool):
    if as_tensor:
        return y
    return y.detach().cpu().numpy()
