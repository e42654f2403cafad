"""Sinusoidal temporal embeddings, projected eigenmaps, and their merge."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ParameterError, ShapeError
from .tensor import Tensor

MERGE_MODES = ("add", "concat", "multiply")


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class STEConfig:
    D: int
    k: int
    merge_mode: str
    se_weight: Tensor
    se_bias: Tensor
    ste_weight: Tensor
    ste_bias: Tensor

    @classmethod
    def init(cls, D: int, k: int, merge_mode: str = "add",
             rng: np.random.Generator | None = None) -> STEConfig:
        if merge_mode not in MERGE_MODES:
            raise ParameterError(f"merge_mode must be one of {MERGE_MODES}, got {merge_mode!r}")
        if D <= 0 or k <= 0:
            raise ParameterError("D and k must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        width = 2 * D if merge_mode == "concat" else D
        return cls(D, k, merge_mode,
                   glorot(rng, (k, D), k, D), zeros(D),
                   glorot(rng, (width, D), width, D), zeros(D))

    def parameters(self) -> dict[str, Tensor]:
        return {"se_weight": self.se_weight, "se_bias": self.se_bias,
                "ste_weight": self.ste_weight, "ste_bias": self.ste_bias}


def temporal_embedding(T: int, D: int) -> np.ndarray:
    """TE[t, 2d] = sin(t / 10000^(2d/D)), TE[t, 2d+1] = cos(same), t = 0..T-1."""
    if D % 2:
        raise ParameterError(f"temporal embedding width must be even, got {D}")
    if T < 1:
        raise ParameterError("T must be at least 1")
    t = np.arange(T, dtype=np.float64)[:, None]
    freq = 10000.0 ** (2.0 * np.arange(D // 2) / D)
    te = np.empty((T, D))
    te[:, 0::2] = np.sin(t / freq)
    te[:, 1::2] = np.cos(t / freq)
    return te


def project_spatial(se_raw, config: STEConfig) -> Tensor:
    se_raw = tn.as_tensor(se_raw)
    if se_raw.ndim != 2 or se_raw.shape[1] != config.k:
        raise ShapeError(f"eigenmap matrix must be N x {config.k}, got {se_raw.shape}")
    return se_raw @ config.se_weight + config.se_bias


def merge_ste(te, se, config: STEConfig, use_te: bool = True, use_se: bool = True) -> Tensor:
    """Couple TE (T x D) and SE (N x D) into a T x N x D tensor.

    A component switched off is dropped from the coupling: ``add`` and
    ``multiply`` use the remaining one alone, ``concat`` fills its half with zeros.
    """
    te, se = tn.as_tensor(te), tn.as_tensor(se)
    D = config.D
    if te.ndim != 2 or te.shape[1] != D or se.ndim != 2 or se.shape[1] != D:
        raise ShapeError(f"TE and SE must both have width {D}, got {te.shape} and {se.shape}")
    if not (use_te or use_se):
        raise ParameterError("merge_ste needs at least one of TE and SE")
    T, N = te.shape[0], se.shape[0]
    te_b = tn.broadcast_to(tn.reshape(te, (T, 1, D)), (T, N, D))
    se_b = tn.broadcast_to(tn.reshape(se, (1, N, D)), (T, N, D))
    mode = config.merge_mode
    if mode == "concat":
        left = te_b if use_te else Tensor(np.zeros((T, N, D)))
        right = se_b if use_se else Tensor(np.zeros((T, N, D)))
        coupled = tn.concatenate([left, right], axis=-1)
    elif not use_se:
        coupled = te_b
    elif not use_te:
        coupled = se_b
    elif mode == "add":
        coupled = te_b + se_b
    else:
        coupled = te_b * se_b
    return coupled @ config.ste_weight + config.ste_bias
