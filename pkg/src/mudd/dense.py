"""Depth-wise aggregation (DA) of layer outputs.

History is the list ``[X_0, ..., X_i]`` of block outputs (``X_0`` is the
embedding), each (B, T, D). Aggregation weights are laid out (B, T, C, J)
with C ways and J aggregated history entries; way order is Q, K, V, R.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as tn
from .blocks import StreamBundle
from .rng import RngState
from .tensor import Parameter, ShapeError, Tensor

WAYS = ("q", "k", "v", "r")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class DAParams:
    layer_index: int
    num_ways: int
    indices: tuple[int, ...]
    a: Parameter
    w1: Parameter | None = None
    w2: Parameter | None = None
    pre_norm: Parameter | None = None
    post_norm: Parameter | None = None

    @property
    def width(self) -> int:
        """Number of aggregated history entries J."""
        return len(self.indices)

    @property
    def hidden_dim(self) -> int:
        return self.num_ways * self.width

    @property
    def dynamic(self) -> bool:
        return self.w1 is not None

    @property
    def prepost(self) -> bool:
        return self.post_norm is not None

    def named(self) -> dict[str, Parameter]:
        out = {"a": self.a}
        for key in ("w1", "w2", "pre_norm", "post_norm"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


def init_da_params(
    D: int,
    i: int,
    C: int,
    mode: str,
    rng: RngState,
    indices: Sequence[int] | None = None,
    dynamic: bool = True,
    dtype=np.float64,
    prefix: str | None = None,
) -> DAParams:
    """Initialize the DA module that follows layer ``i``.

    ``standard``: W1 ~ N(0, 1/D), W2 = 0, prior one-hot on the layer's own
    output. ``prepost``: prior zero, pre-norm scales 1, post-norm scale 1e-3.
    """
    if mode not in ("standard", "prepost"):
        raise ValueError(f"unknown DA init mode {mode!r}")
    indices = tuple(range(i + 1)) if indices is None else tuple(indices)
    if indices[-1] != i:
        raise ValueError("aggregated indices must end with the current layer")
    J = len(indices)
    K = C * J
    prefix = prefix or f"da{i}"
    a = np.zeros((C, J), dtype=dtype)
    if mode == "standard":
        a[:, J - 1] = 1.0
    p = DAParams(i, C, indices, Parameter(a, f"prior_{mode}"))
    if dynamic:
        w1 = rng.stream(f"{prefix}.w1").normal(0.0, 1.0 / np.sqrt(D), size=(D, K))
        p.w1 = Parameter(w1.astype(dtype), "normal_1/D")
        p.w2 = Parameter(np.zeros((K, K), dtype=dtype), "zeros")
    if mode == "prepost":
        p.pre_norm = Parameter(np.ones((J, D), dtype=dtype), "ones")
        p.post_norm = Parameter(np.full((D,), 1e-3, dtype=dtype), "const_1e-3")
    return p


# ---------------------------------------------------------------------------
# aggregation primitives
# ---------------------------------------------------------------------------


def _stack_history(history: Sequence[Tensor]) -> Tensor:
    return tn.stack(list(history), axis=-2)  # (B, T, J, D)


def _check_len(history, n: int, what: str) -> None:
    if len(history) != n:
        raise ShapeError(f"{what}: history has {len(history)} entries, weights cover {n}")


def da_static(history: Sequence[Tensor], a: Tensor) -> Tensor:
    """Scalar-weighted sum of the history entries."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=history[0].dtype))
    if a.ndim != 1:
        raise ShapeError(f"da_static expects a 1-d weight vector, got {a.shape}")
    _check_len(history, a.shape[0], "da_static")
    H = _stack_history(history)
    B, T, J, D = H.shape
    return (a.reshape(1, J) @ H).reshape(B, T, D)


def da_dynamic(history: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Per-position weighted sum; ``weights`` is (B, T, J)."""
    _check_len(history, weights.shape[-1], "da_dynamic")
    H = _stack_history(history)
    B, T, J, D = H.shape
    return (weights.reshape(B, T, 1, J) @ H).reshape(B, T, D)


def aggregate(history: Sequence[Tensor], weights: Tensor) -> Tensor:
    """All ways at once: (B, T, C, J) weights against (B, T, J, D) history."""
    _check_len(history, weights.shape[-1], "aggregate")
    return weights @ _stack_history(history)


def generate_dynamic_weights(x_i: Tensor, p: DAParams) -> Tensor:
    """Position-wise MLP on the normalized hidden state plus the static prior.

    Returns (B, T, C, J). The flat hidden axis is way-major, so column
    ``c * J + j`` belongs to way ``c`` and history entry ``j``.
    """
    B, T, _ = x_i.shape
    C, J = p.num_ways, p.width
    if p.w1 is None:
        return p.a.reshape(1, 1, C, J)
    h = tn.gelu(tn.rmsnorm(x_i) @ p.w1) @ p.w2
    return (h + p.a.reshape(C * J)).reshape(B, T, C, J)


def da_weights(history: Sequence[Tensor], p: DAParams) -> Tensor:
    _check_len(history, p.width, "DA")
    return generate_dynamic_weights(history[-1], p)


def _ways(agg: Tensor, C: int) -> list[Tensor]:
    return [agg[:, :, c, :] for c in range(C)]


def da_multiway(history: Sequence[Tensor], p: DAParams) -> StreamBundle:
    """Four dense aggregations (Q, K, V, R) from one fused weight generator."""
    if p.num_ways != 4:
        raise ValueError("multiway aggregation needs 4 ways")
    agg = aggregate(history, da_weights(history, p))
    return StreamBundle(*_ways(agg, 4))


def _prepost(history: Sequence[Tensor], p: DAParams, w: Tensor) -> list[Tensor]:
    normed = [tn.rmsnorm(x, p.pre_norm[j]) for j, x in enumerate(history)]
    agg = aggregate(normed, w)
    return [tn.rmsnorm(s, p.post_norm) + history[-1] for s in _ways(agg, p.num_ways)]


def prepost_danorm(history: Sequence[Tensor], p: DAParams) -> StreamBundle | Tensor:
    """Normalize each history entry, aggregate, normalize the aggregate and
    add the raw current output back as a residual, for each way."""
    if p.pre_norm is None or p.post_norm is None:
        raise ValueError("prepost aggregation needs pre- and post-norm scales")
    outs = _prepost(history, p, da_weights(history, p))
    return StreamBundle(*outs) if p.num_ways == 4 else outs[0]


def apply_da(history: Sequence[Tensor], p: DAParams):
    """Run a DA module; returns (streams, weights) where streams is a
    StreamBundle for 4 ways or a single tensor for 1 way."""
    w = da_weights(history, p)
    if p.prepost:
        outs = _prepost(history, p, w)
    else:
        outs = _ways(aggregate(history, w), p.num_ways)
    if p.num_ways == 4:
        return StreamBundle(*outs), w
    return outs[0], w


# ---------------------------------------------------------------------------
# FFN re-allocation
# ---------------------------------------------------------------------------


def exact_ffn_ramp(L: int, D_f: int) -> list[Fraction]:
    if L == 1:
        return [Fraction(D_f)]
    return [Fraction(1, 2 * (L - 1)) * ((L - i) + 3 * (i - 1)) * D_f for i in range(1, L + 1)]


def realloc_ffn_dims(L: int, D_f: int, multiple: int = 8) -> list[int]:
    """FFN hidden dims ramping linearly from 0.5*D_f to 1.5*D_f with depth.

    Each is rounded to ``multiple``; the middle layer absorbs the residue so
    the total equals ``L * D_f``.
    """
    if L < 1:
        raise ValueError("need at least one layer")
    if L == 1:
        return [D_f]
    dims = [max(multiple, multiple * round(v / multiple)) for v in exact_ffn_ramp(L, D_f)]
    mid = (L - 1) // 2
    dims[mid] += L * D_f - sum(dims)
    if dims[mid] < 1:
        raise ValueError(f"FFN dim {D_f} is too small to re-allocate over {L} layers")
    return dims


# ---------------------------------------------------------------------------
# sparse connectivity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConnectionSchedule:
    mode: str = "dense"
    k: int = 1
    p: int = 1
    n: int = 0

    def __post_init__(self):
        if self.mode not in ("dense", "dilated", "sliding_window"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "dilated" and (self.k < 1 or self.p < 1):
            raise ValueError("dilated schedule needs k, p >= 1")
        if self.mode == "sliding_window" and self.n < 1:
            raise ValueError("sliding window needs n >= 1")

    @classmethod
    def parse(cls, text: str) -> "ConnectionSchedule":
        s = text.strip().lower().replace(" ", "")
        if s in ("", "dense"):
            return cls()
        m = re.fullmatch(r"(?:dilated\()?(\d+)[x,×](\d+)\)?", s)
        if m:
            return cls("dilated", k=int(m.group(1)), p=int(m.group(2)))
        m = re.fullmatch(r"(?:sw|sliding_window)\(?(\d+)\)?", s)
        if m:
            return cls("sliding_window", n=int(m.group(1)))
        raise ValueError(f"cannot parse connection schedule {text!r}")

    def label(self) -> str:
        if self.mode == "dilated":
            return f"dilated({self.k},{self.p})"
        if self.mode == "sliding_window":
            return f"sw({self.n})"
        return "dense"

    def has_da(self, i: int) -> bool:
        return self.mode != "dilated" or i % self.p == 0

    def indices(self, i: int) -> tuple[int, ...]:
        if self.mode == "dense":
            return tuple(range(i + 1))
        if self.mode == "dilated":
            return tuple(sorted({0} | {j for j in range(i + 1) if (i - j) % self.k == 0}))
        return tuple([0] + list(range(max(1, i - self.n + 1), i + 1)))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "k": self.k, "p": self.p, "n": self.n}


@dataclass
class ScheduleTable:
    schedule: ConnectionSchedule
    L: int
    sets: dict[int, tuple[int, ...] | None] = field(default_factory=dict)

    def __getitem__(self, i: int):
        return self.sets[i]


def schedule_sets(schedule: ConnectionSchedule, L: int) -> ScheduleTable:
    """Per-layer aggregated index sets; ``None`` where no DA follows layer i."""
    table = ScheduleTable(schedule, L)
    for i in range(1, L + 1):
        table.sets[i] = schedule.indices(i) if schedule.has_da(i) else None
    return table
