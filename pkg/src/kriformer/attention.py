"""Temporal, spatial and spatial-interaction multi-head attention, plus the FFN.

Tensors are laid out ``[..., T, N, D]``. Every block ends with
``LayerNorm(input + dropout(branch))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .embedding import glorot, zeros
from .errors import ParameterError, ShapeError
from .tensor import MASK_VALUE, Tensor


@dataclass
class AttentionBlockParams:
    wq: Tensor  # (n_heads, D, D // n_heads), one projection per head
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (D, D)
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, D: int, n_heads: int, rng: np.random.Generator) -> AttentionBlockParams:
        if n_heads < 1 or D % n_heads:
            raise ParameterError(f"model width {D} is not divisible by {n_heads} heads")
        dh = D // n_heads
        heads = [glorot(rng, (n_heads, D, dh), D, dh) for _ in range(3)]
        return cls(*heads, glorot(rng, (D, D), D, D),
                   Tensor(np.ones(D), requires_grad=True), zeros(D))

    @property
    def n_heads(self) -> int:
        return self.wq.shape[0]

    @property
    def width(self) -> int:
        return self.wo.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
                "gamma": self.gamma, "beta": self.beta}


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, D: int, rng: np.random.Generator) -> FFNParams:
        return cls(glorot(rng, (D, D), D, D), zeros(D), glorot(rng, (D, D), D, D), zeros(D),
                   Tensor(np.ones(D), requires_grad=True), zeros(D))

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "gamma": self.gamma, "beta": self.beta}


def spatial_mask(weights: np.ndarray) -> np.ndarray:
    """Additive mask: 0 where two nodes are linked (or i == j), -1e9 elsewhere."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"adjacency must be square, got {w.shape}")
    mask = np.where(w != 0, 0.0, MASK_VALUE)
    np.fill_diagonal(mask, 0.0)
    return mask


def attention_weights(q, k, mask=None) -> Tensor:
    """softmax(Q K^T / sqrt(d') + mask) over the key axis."""
    q, k = tn.as_tensor(q), tn.as_tensor(k)
    if q.shape[-1] != k.shape[-1] or q.shape[-1] == 0:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    scores = (q @ tn.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    return tn.softmax_lastdim(scores, mask)


def scaled_dot_attention(q, k, v, mask=None) -> Tensor:
    k, v = tn.as_tensor(k), tn.as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys and values differ in length: {k.shape} vs {v.shape}")
    return attention_weights(q, k, mask) @ v


def _heads(x: Tensor, w: Tensor) -> Tensor:
    # Stacking the per-head D x dh maps side by side and splitting the product
    # afterwards gives exactly x @ w[h] for every head h.
    n_heads, D, dh = w.shape
    fused = tn.reshape(tn.transpose(w, (1, 0, 2)), (D, n_heads * dh))
    return tn.split_heads(x @ fused, n_heads)


def multihead(xq: Tensor, xkv: Tensor, params: AttentionBlockParams, mask=None) -> Tensor:
    """Multi-head attention over axis -2; output ``[..., Lq, D]`` before the residual."""
    if xq.shape[-1] != params.width or xkv.shape[-1] != params.width:
        raise ShapeError(f"inputs must have width {params.width}")
    q = _heads(xq, params.wq)
    k = _heads(xkv, params.wk)
    v = _heads(xkv, params.wv)
    return tn.concat_heads(scaled_dot_attention(q, k, v, mask)) @ params.wo


def _residual(h: Tensor, branch: Tensor, params, p: float, rng) -> Tensor:
    return tn.layer_norm(h + tn.dropout(branch, p, rng), params.gamma, params.beta)


def mta(h, params: AttentionBlockParams, dropout: float = 0.0, rng=None) -> Tensor:
    """Self-attention across time steps, separately for every node."""
    h = tn.as_tensor(h)
    if h.ndim < 3:
        raise ShapeError(f"expected [..., T, N, D], got {h.shape}")
    per_node = tn.swapaxes(h, -3, -2)
    out = tn.swapaxes(multihead(per_node, per_node, params), -3, -2)
    return _residual(h, out, params, dropout, rng)


def msa(h, mask, params: AttentionBlockParams, dropout: float = 0.0, rng=None) -> Tensor:
    """Self-attention across nodes at every time step, restricted by ``mask``."""
    h = tn.as_tensor(h)
    n = h.shape[-2]
    if mask is not None and np.shape(mask) != (n, n):
        raise ShapeError(f"spatial mask must be {n} x {n}, got {np.shape(mask)}")
    return _residual(h, multihead(h, h, params, mask), params, dropout, rng)


def msia(h_dec, h_enc, params: AttentionBlockParams, mask=None,
         dropout: float = 0.0, rng=None) -> Tensor:
    """Decoder states query encoder states across nodes at every time step."""
    h_dec, h_enc = tn.as_tensor(h_dec), tn.as_tensor(h_enc)
    if h_dec.shape != h_enc.shape:
        raise ShapeError(f"decoder/encoder shapes differ: {h_dec.shape} vs {h_enc.shape}")
    n = h_dec.shape[-2]
    if mask is not None and np.shape(mask) != (n, n):
        raise ShapeError(f"spatial mask must be {n} x {n}, got {np.shape(mask)}")
    return _residual(h_dec, multihead(h_dec, h_enc, params, mask), params, dropout, rng)


def ffn(h, params: FFNParams, dropout: float = 0.0, rng=None) -> Tensor:
    h = tn.as_tensor(h)
    hidden = tn.dropout(tn.relu(h @ params.w1 + params.b1), dropout, rng)
    out = hidden @ params.w2 + params.b2
    return tn.layer_norm(h + out, params.gamma, params.beta)
