"""The model family: Transformer++ and its dense-connection variants.

One forward routine serves full-sequence evaluation, tracing and
incremental decoding; decoding is the same computation run on one new
position at a time against per-layer key/value caches. Because DA weights
depend only on the current position, no other state needs caching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .blocks import BlockParams, KVCache, StreamBundle, block_forward, embed, multi_input_block_forward, unembed
from .config import ConfigError, ModelConfig, ModelVariant
from .dense import DAParams, apply_da, init_da_params, realloc_ffn_dims, schedule_sets
from .rng import RngState
from .tensor import Parameter, Tensor


# The output head uses half the Xavier std so step-0 loss sits near ln(V).
HEAD_INIT_GAIN = 0.5


def xavier_normal(rng: RngState, name: str, shape: tuple[int, int], dtype, gain: float = 1.0) -> Parameter:
    fan_in, fan_out = shape
    std = gain * np.sqrt(2.0 / (fan_in + fan_out))
    tag = "xavier_normal" if gain == 1.0 else f"xavier_normal*{gain:g}"
    return Parameter(rng.stream(name).normal(0.0, std, size=shape).astype(dtype), tag)


@dataclass
class Model:
    config: ModelConfig
    embed: Parameter
    blocks: list[BlockParams]
    das: dict[int, DAParams]
    final_norm: Parameter
    w_out: Parameter
    ffn_dims: list[int]

    @property
    def dtype(self):
        return self.embed.dtype

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {"embed": self.embed}
        for i, blk in enumerate(self.blocks, start=1):
            for k, p in blk.named().items():
                out[f"blocks.{i}.{k}"] = p
        for i, da in sorted(self.das.items()):
            for k, p in da.named().items():
                out[f"da.{i}.{k}"] = p
        out["final_norm"] = self.final_norm
        out["unembed"] = self.w_out
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def non_embedding_param_count(self) -> int:
        """Block matrices only (norm scales, embeddings and DA excluded)."""
        return sum(
            p.data.size for blk in self.blocks for k, p in blk.named().items() if not k.endswith("norm")
        )

    def da_param_count(self) -> int:
        return sum(p.data.size for da in self.das.values() for p in da.named().values())


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes ``build_model`` would allocate, without allocating."""
    config.validate()
    L, D, V = config.L, config.D, config.V
    D_f = config.base_ffn_dim
    ffn_dims = realloc_ffn_dims(L, D_f) if (config.realloc and L > 0) else [D_f] * L
    out: dict[str, tuple[int, ...]] = {"embed": (V, D)}
    for i, f in enumerate(ffn_dims, start=1):
        for k in ("wq", "wk", "wv", "wo"):
            out[f"blocks.{i}.{k}"] = (D, D)
        out[f"blocks.{i}.w_gate"] = (D, f)
        out[f"blocks.{i}.w_up"] = (D, f)
        out[f"blocks.{i}.w_down"] = (f, D)
        out[f"blocks.{i}.attn_norm"] = (D,)
        out[f"blocks.{i}.ffn_norm"] = (D,)
    if config.variant.has_da:
        C = config.variant.num_ways
        table = schedule_sets(config.schedule, L)
        for i in range(1, L + 1):
            if table[i] is None:
                continue
            J = len(table[i])
            out[f"da.{i}.a"] = (C, J)
            if config.variant.dynamic:
                out[f"da.{i}.w1"] = (D, C * J)
                out[f"da.{i}.w2"] = (C * J, C * J)
            if config.prepost:
                out[f"da.{i}.pre_norm"] = (J, D)
                out[f"da.{i}.post_norm"] = (D,)
    out["final_norm"] = (D,)
    out["unembed"] = (D, V)
    return out


def build_model(config: ModelConfig, rng: RngState | int = 0) -> Model:
    """Allocate and initialize every parameter for ``config``.

    Parameters are drawn from name-keyed streams, so the blocks of a
    dense-connection model equal those of the baseline built from the same
    seed and FFN dims.
    """
    config.validate()
    if isinstance(rng, int):
        rng = RngState(rng)
    dtype = np.dtype(config.precision)
    L, D, V = config.L, config.D, config.V
    D_f = config.base_ffn_dim
    ffn_dims = realloc_ffn_dims(L, D_f) if (config.realloc and L > 0) else [D_f] * L

    blocks = []
    for i in range(1, L + 1):
        f = ffn_dims[i - 1]
        pre = f"blocks.{i}"
        blocks.append(BlockParams(
            wq=xavier_normal(rng, f"{pre}.wq", (D, D), dtype),
            wk=xavier_normal(rng, f"{pre}.wk", (D, D), dtype),
            wv=xavier_normal(rng, f"{pre}.wv", (D, D), dtype),
            wo=xavier_normal(rng, f"{pre}.wo", (D, D), dtype),
            w_gate=xavier_normal(rng, f"{pre}.w_gate", (D, f), dtype),
            w_up=xavier_normal(rng, f"{pre}.w_up", (D, f), dtype),
            w_down=xavier_normal(rng, f"{pre}.w_down", (f, D), dtype),
            attn_norm=Parameter(np.ones(D, dtype=dtype), "ones"),
            ffn_norm=Parameter(np.ones(D, dtype=dtype), "ones"),
            n_heads=config.H,
        ))

    das: dict[int, DAParams] = {}
    if config.variant.has_da:
        table = schedule_sets(config.schedule, L)
        for i in range(1, L + 1):
            idx = table[i]
            if idx is None:
                continue
            das[i] = init_da_params(
                D, i, config.variant.num_ways, "prepost" if config.prepost else "standard", rng,
                indices=idx, dynamic=config.variant.dynamic, dtype=dtype, prefix=f"da.{i}",
            )

    return Model(
        config=config,
        embed=xavier_normal(rng, "embed", (V, D), dtype),
        blocks=blocks,
        das=das,
        final_norm=Parameter(np.ones(D, dtype=dtype), "ones"),
        w_out=xavier_normal(rng, "unembed", (D, V), dtype, gain=HEAD_INIT_GAIN),
        ffn_dims=ffn_dims,
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class LayerTrace:
    """Per-layer record of one forward pass (numpy arrays, batch leading).

    ``inputs[i]`` holds the (q, k, v, r) inputs of layer i+1, ``outputs[i]``
    its block output, ``attention[i]`` the (B, H, T, T) attention weights and
    ``weights[i]`` the (C, B, T, J) DA weights after the layer (None when no
    DA module follows it); ``indices[i]`` names the aggregated layers.
    """

    embedding: np.ndarray | None = None
    inputs: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)
    weights: list[np.ndarray | None] = field(default_factory=list)
    indices: list[tuple[int, ...] | None] = field(default_factory=list)
    tokens: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.outputs)


def _as_batch(tokens) -> np.ndarray:
    t = np.asarray(tokens)
    if t.dtype.kind not in "iu":
        raise TypeError("tokens must be integers")
    return t[None, :] if t.ndim == 1 else t


def _run(model: Model, tokens: np.ndarray, caches: list[KVCache] | None = None,
         trace: LayerTrace | None = None) -> Tensor:
    cfg = model.config
    x0 = embed(model.embed, tokens)
    history: list[Tensor] = [x0]
    streams = StreamBundle.tied(x0)
    if trace is not None:
        trace.embedding = x0.data
        trace.tokens = tokens
    for i, blk in enumerate(model.blocks, start=1):
        cache = caches[i - 1] if caches is not None else None
        with tn.flop_scope("block"):
            if streams.is_tied:
                x, probs = block_forward(streams.xq, blk, cache=cache, return_probs=True)
            else:
                x, probs = multi_input_block_forward(streams, blk, cache=cache, return_probs=True)
        history.append(x)
        da = model.das.get(i)
        w = None
        if da is None:
            new = StreamBundle.tied(x)
        else:
            with tn.flop_scope("da"):
                out, w = apply_da([history[j] for j in da.indices], da)
            if isinstance(out, StreamBundle):
                new = StreamBundle(*(s if on else x for s, on in zip(out, cfg.ways)))
            else:
                new = StreamBundle.tied(out)
        if trace is not None:
            trace.inputs.append(tuple(s.data for s in streams))
            trace.outputs.append(x.data)
            trace.attention.append(probs.data)
            if w is not None:
                B, T = x.shape[:2]
                wd = np.broadcast_to(w.data, (B, T) + w.shape[2:])
                trace.weights.append(np.ascontiguousarray(np.moveaxis(wd, 2, 0)))
                trace.indices.append(da.indices)
            else:
                trace.weights.append(None)
                trace.indices.append(None)
        streams = new
    with tn.flop_scope("head"):
        return unembed(streams.xr, model.final_norm, model.w_out)


def forward(model: Model, tokens) -> Tensor:
    """Logits (B, T, V) for int tokens (T,) or (B, T)."""
    tokens = _as_batch(tokens)
    if tokens.shape[1] > model.config.T_max:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds T_max={model.config.T_max}")
    return _run(model, tokens)


def forward_with_trace(model: Model, tokens) -> tuple[Tensor, LayerTrace]:
    tokens = _as_batch(tokens)
    if tokens.shape[1] > model.config.T_max:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds T_max={model.config.T_max}")
    trace = LayerTrace()
    logits = _run(model, tokens, trace=trace)
    return logits, trace


def loss_fn(model: Model, batch: np.ndarray) -> Tensor:
    """Next-token cross-entropy on a (B, T+1) batch of token ids."""
    batch = _as_batch(batch)
    logits = forward(model, batch[:, :-1])
    return tn.cross_entropy(logits, batch[:, 1:])


# ---------------------------------------------------------------------------
# incremental decoding
# ---------------------------------------------------------------------------


@dataclass
class DecodeCache:
    layers: list[KVCache]
    n_layers: int
    dim: int
    batch: int | None = None
    position: int = 0

    def kv_lengths(self) -> list[int]:
        return [c.length for c in self.layers]


def new_cache(model: Model) -> DecodeCache:
    cfg = model.config
    return DecodeCache([KVCache() for _ in range(cfg.L)], cfg.L, cfg.D)


def decode_step(model: Model, cache: DecodeCache, token) -> tuple[np.ndarray, DecodeCache]:
    """Feed one token per sequence; return next-token logits (B, V) or (V,)."""
    cfg = model.config
    if cache.n_layers != cfg.L or cache.dim != cfg.D or len(cache.layers) != cfg.L:
        raise ConfigError("decode cache does not match the model configuration")
    tok = np.asarray(token)
    single = tok.ndim == 0
    tok = tok.reshape(-1, 1)
    if cache.batch is not None and tok.shape[0] != cache.batch:
        raise ConfigError(f"cache holds batch {cache.batch}, got {tok.shape[0]} tokens")
    if cache.position >= cfg.T_max:
        raise ValueError(f"decoding past T_max={cfg.T_max}")
    with tn.no_grad():
        logits = _run(model, tok, caches=cache.layers)
    cache.batch = tok.shape[0]
    cache.position += 1
    out = logits.data[:, -1, :]
    return (out[0] if single else out), cache


def prefill(model: Model, cache: DecodeCache, tokens) -> np.ndarray:
    """Feed a whole prompt at once; returns logits for its last position."""
    tokens = _as_batch(tokens)
    if cache.position + tokens.shape[1] > model.config.T_max:
        raise ValueError("prompt exceeds T_max")
    with tn.no_grad():
        logits = _run(model, tokens, caches=cache.layers)
    cache.batch = tokens.shape[0]
    cache.position += tokens.shape[1]
    return logits.data[:, -1, :]
