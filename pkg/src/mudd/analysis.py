"""Diagnostics over recorded forward traces.

* adjacent-layer cosine similarity of block inputs (representation collapse)
* attention head activation ratio (heads not parked on a sink)
* rectified DA weights: weights times the mean norm of the layer they read
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import LayerTrace

STREAMS = {"q": 0, "k": 1, "v": 2, "r": 3}
DEFAULT_SINKS = (ord("."), ord("\n"))


@dataclass
class CosineResult:
    layers: list[int]  # layer i compared against layer i-1, i >= 2
    values: np.ndarray
    excluded: list[int]  # positions dropped for a zero vector, per layer


def _stream_index(stream: str) -> int:
    try:
        return STREAMS[stream.lower()]
    except KeyError:
        raise ValueError(f"stream must be one of {sorted(STREAMS)}, got {stream!r}") from None


def adjacent_cosine_similarity(
    trace: LayerTrace, stream: str = "r", mask: np.ndarray | None = None
) -> CosineResult:
    """Mean over positions of cos(input_i[t], input_{i-1}[t]).

    ``mask`` (B, T) marks valid positions; padding is False. Positions
    where either vector is all zeros are excluded and counted.
    """
    s = _stream_index(stream)
    L = len(trace.inputs)
    layers, values, excluded = [], [], []
    for i in range(1, L):
        a = trace.inputs[i][s]
        b = trace.inputs[i - 1][s]
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        valid = np.ones(na.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        nonzero = (na > 0) & (nb > 0)
        keep = valid & nonzero
        cos = np.sum(a * b, axis=-1)[keep] / (na[keep] * nb[keep])
        layers.append(i + 1)
        values.append(float(np.mean(cos)) if cos.size else float("nan"))
        excluded.append(int(np.sum(valid & ~nonzero)))
    return CosineResult(layers, np.asarray(values), excluded)


def head_activation_ratio(
    trace_or_attention,
    token_ids: np.ndarray | None = None,
    sink_tokens: Sequence[int] = DEFAULT_SINKS,
) -> np.ndarray:
    """Per-layer fraction of (head, query position) pairs that are active.

    A pair is active when its argmax key position is not 0 or 1 and the
    token there is not a sink token. Accepts a LayerTrace or a list of
    (B, H, T, S) attention arrays.
    """
    if isinstance(trace_or_attention, LayerTrace):
        attention = trace_or_attention.attention
        if token_ids is None:
            token_ids = trace_or_attention.tokens
    else:
        attention = list(trace_or_attention)
    sinks = np.asarray(sorted(set(int(t) for t in sink_tokens)), dtype=np.int64)
    out = []
    for att in attention:
        att = np.asarray(att)
        if att.ndim == 3:
            att = att[None]
        top = np.argmax(att, axis=-1)  # (B, H, T)
        active = top >= 2
        if token_ids is not None and sinks.size:
            tok = np.asarray(token_ids)
            tok = tok[None] if tok.ndim == 1 else tok
            at_top = np.take_along_axis(tok[:, None, :], top.reshape(top.shape[0], -1)[:, None, :], axis=2)
            active &= ~np.isin(at_top.reshape(top.shape), sinks)
        out.append(float(np.mean(active)))
    return np.asarray(out)


@dataclass
class WeightStats:
    """(C, L, L+1) arrays indexed [way, i-1, j]; NaN where no weight exists."""

    mean: np.ndarray
    std: np.ndarray
    layer_norms: np.ndarray  # mean ||X_j|| per j over the corpus
    count: int


def layer_mean_norms(traces: Sequence[LayerTrace]) -> np.ndarray:
    total = None
    n = 0
    for tr in traces:
        xs = [tr.embedding] + list(tr.outputs)
        norms = np.stack([np.linalg.norm(x, axis=-1).sum() for x in xs])
        total = norms if total is None else total + norms
        n += xs[0].shape[0] * xs[0].shape[1]
    return total / n


def rectified_weight_stats(traces: Sequence[LayerTrace] | LayerTrace) -> WeightStats:
    """Mean and population std over positions and sequences of
    A_ij[t] * mean||X_j||, per way and (i, j)."""
    if isinstance(traces, LayerTrace):
        traces = [traces]
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    L = len(traces[0])
    norms = layer_mean_norms(traces)
    C = max((w.shape[0] for w in traces[0].weights if w is not None), default=0)
    mean = np.full((C, L, L + 1), np.nan)
    std = np.full((C, L, L + 1), np.nan)
    count = 0
    for i in range(L):
        if traces[0].weights[i] is None:
            continue
        idx = np.asarray(traces[0].indices[i])
        # (C, N, J) with N = all positions over the corpus
        ws = np.concatenate([tr.weights[i].reshape(tr.weights[i].shape[0], -1, len(idx)) for tr in traces], axis=1)
        rect = ws * norms[idx][None, None, :]
        mean[: rect.shape[0], i, idx] = rect.mean(axis=1)
        std[: rect.shape[0], i, idx] = rect.std(axis=1)
        count = ws.shape[1]
    return WeightStats(mean, std, norms, count)
