"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, TapeError, backward, no_grad


def gradient_check(f: Callable[[], Tensor], theta: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` takes no arguments and must read ``theta`` (a leaf) when called.
    The relative error per coordinate is
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    out = f()
    if out.data.size != 1:
        raise TapeError(f"gradient_check needs a scalar function, got dims {out.dims}")
    theta.requires_grad = True
    analytic = backward(f(), [theta])[id(theta)].reshape(-1).copy()
    flat = theta.data.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
    if flat.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
