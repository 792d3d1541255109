"""Transformer++ building blocks: rotary causal attention, SwiGLU FFN,
the Pre-norm block and its four-stream decoupled form."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .tensor import Parameter, ShapeError, Tensor


@dataclass
class BlockParams:
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    w_gate: Parameter
    w_up: Parameter
    w_down: Parameter
    attn_norm: Parameter
    ffn_norm: Parameter
    n_heads: int

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def ffn_dim(self) -> int:
        return self.w_gate.shape[1]

    def named(self) -> dict[str, Parameter]:
        return {
            "wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
            "w_gate": self.w_gate, "w_up": self.w_up, "w_down": self.w_down,
            "attn_norm": self.attn_norm, "ffn_norm": self.ffn_norm,
        }


class StreamBundle(NamedTuple):
    """Query, key, value and residual inputs of a decoupled block."""

    xq: Tensor
    xk: Tensor
    xv: Tensor
    xr: Tensor

    @classmethod
    def tied(cls, x: Tensor) -> "StreamBundle":
        return cls(x, x, x, x)

    @property
    def is_tied(self) -> bool:
        return self.xq is self.xk is self.xv is self.xr


class KVCache:
    """Rotated keys and values seen so far, (B, H, t, d) each."""

    def __init__(self) -> None:
        self.k: np.ndarray | None = None
        self.v: np.ndarray | None = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def extend(self, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.k is None:
            self.k, self.v = k.copy(), v.copy()
        else:
            self.k = np.concatenate([self.k, k], axis=2)
            self.v = np.concatenate([self.v, v], axis=2)
        return self.k, self.v


def embed(table: Tensor, tokens) -> Tensor:
    return tn.embedding(table, np.asarray(tokens))


def unembed(x: Tensor, final_norm: Tensor, w_out: Tensor) -> Tensor:
    """Final RMSNorm then an untied, bias-free D x V projection."""
    return tn.rmsnorm(x, final_norm) @ w_out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, D = x.shape
    return x.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * d)


def mha(
    xq: Tensor,
    xk: Tensor,
    xv: Tensor,
    p: BlockParams,
    cache: KVCache | None = None,
    return_probs: bool = False,
):
    """Causal rotary multi-head attention over (B, T, D) inputs.

    With a ``cache`` the new keys/values are appended and queries attend to
    everything cached; positions continue from the cache length.
    """
    if not (xq.shape == xk.shape == xv.shape):
        raise ShapeError(f"mha: stream shapes differ {xq.shape}, {xk.shape}, {xv.shape}")
    B, T, D = xq.shape
    H = p.n_heads
    if D % H:
        raise ShapeError(f"head count {H} does not divide model dim {D}")
    d = D // H
    offset = cache.length if cache is not None else 0
    cos, sin = tn.rope_tables(np.arange(offset, offset + T), d, dtype=xq.dtype)

    q = tn.rope(_split_heads(xq @ p.wq, H), cos, sin)
    k = tn.rope(_split_heads(xk @ p.wk, H), cos, sin)
    v = _split_heads(xv @ p.wv, H)
    if cache is not None:
        kd, vd = cache.extend(k.data, v.data)
        k, v = Tensor(kd), Tensor(vd)
    S = k.shape[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    qpos = np.arange(offset, offset + T)[:, None]
    mask = np.arange(S)[None, :] <= qpos
    probs = tn.softmax(scores, mask)
    out = _merge_heads(probs @ v) @ p.wo
    if return_probs:
        return out, probs
    return out


def ffn_swiglu(x: Tensor, p: BlockParams) -> Tensor:
    return (tn.silu(x @ p.w_gate) * (x @ p.w_up)) @ p.w_down


def block_forward(x: Tensor, p: BlockParams, cache: KVCache | None = None, return_probs: bool = False):
    """Standard Pre-norm block: attention and FFN, each with a residual."""
    h = tn.rmsnorm(x, p.attn_norm)
    attn, probs = mha(h, h, h, p, cache=cache, return_probs=True)
    xa = attn + x
    out = ffn_swiglu(tn.rmsnorm(xa, p.ffn_norm), p) + xa
    return (out, probs) if return_probs else out


def multi_input_block_forward(
    s: StreamBundle, p: BlockParams, cache: KVCache | None = None, return_probs: bool = False
):
    """Decoupled block: attention over separately normalized Q/K/V streams,
    residual taken from the R stream."""
    if not (s.xq.shape == s.xk.shape == s.xv.shape == s.xr.shape):
        raise ShapeError("stream bundle shapes differ")
    attn, probs = mha(
        tn.rmsnorm(s.xq, p.attn_norm),
        tn.rmsnorm(s.xk, p.attn_norm),
        tn.rmsnorm(s.xv, p.attn_norm),
        p,
        cache=cache,
        return_probs=True,
    )
    xa = attn + s.xr
    out = ffn_swiglu(tn.rmsnorm(xa, p.ffn_norm), p) + xa
    return (out, probs) if return_probs else out
