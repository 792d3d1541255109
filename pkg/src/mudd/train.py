"""Byte-level language-model training, evaluation and sampling."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TABLE6, ConfigError, ModelConfig, ablation_variant
from .model import Model, build_model, decode_step, forward, loss_fn, new_cache, prefill
from .rng import RngState
from .tensor import Parameter

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

METRICS_COLUMNS = ("step", "train_loss", "val_loss", "lr", "tokens_seen", "wall_ms")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(precision="float32"))
    steps: int = 2000
    batch_size: int = 8
    seq_len: int = 64
    peak_lr: float = 3e-3
    warmup_fraction: float = 0.01
    final_lr_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    corpus: str = "data/shakespeare.txt"
    val_corpus: str | None = None
    val_fraction: float = 0.1
    eval_interval: int = 200
    eval_batches: int = 16
    record_wall_time: bool = True
    save_checkpoints: bool = True

    def validate(self) -> None:
        self.model.validate()
        if self.steps < 1 or self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("steps, batch_size and seq_len must be positive")
        if self.seq_len > self.model.T_max:
            raise ConfigError(f"seq_len {self.seq_len} exceeds T_max {self.model.T_max}")
        for k in ("peak_lr", "warmup_fraction", "final_lr_fraction", "eps", "grad_clip"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        if not 0 <= self.weight_decay:
            raise ConfigError("weight_decay must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")

    @property
    def warmup_steps(self) -> int:
        return warmup_steps(self.steps, self.warmup_fraction)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}


def config_from_mapping(d: Mapping) -> TrainConfig:
    """Flat key/value mapping to a TrainConfig. Model keys (L, D, variant,
    ...) sit beside training keys; ``ablation`` names a grid entry applied
    on top of the model keys."""
    d = dict(d)
    ablation = d.pop("ablation", None)
    unknown = set(d) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    model_kw = {k: v for k, v in d.items() if k in _MODEL_KEYS}
    if "ways" in model_kw:
        model_kw["ways"] = tuple(model_kw["ways"])
    model_kw.setdefault("precision", "float32")
    model = ModelConfig(**model_kw)
    if ablation:
        model = ablation_variant(model, ablation)
    return TrainConfig(model=model, **{k: v for k, v in d.items() if k in _TRAIN_KEYS})


def load_config(path: str | Path) -> TrainConfig:
    with open(path, "rb") as f:
        return config_from_mapping(tomllib.load(f))


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def warmup_steps(total_steps: int, fraction: float = 0.01) -> int:
    return max(1, round(fraction * total_steps))


def lr_schedule(step: int, total_steps: int, peak: float, warmup_fraction: float = 0.01,
                final_fraction: float = 0.1) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``final_fraction*peak``
    at step ``total_steps - 1``; constant afterwards."""
    if step < 0:
        raise ValueError("step must be non-negative")
    W = warmup_steps(total_steps, warmup_fraction)
    if step < W:
        return peak * (step + 1) / W
    final = final_fraction * peak
    span = total_steps - 1 - W
    progress = 1.0 if span <= 0 else min(1.0, (step - W) / span)
    return final + (peak - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class StepResult:
    status: str  # "ok" or "rejected_nonfinite"
    grad_norm: float
    clip_scale: float


def decays(name: str, p: Parameter) -> bool:
    """Weight decay applies to matrices, not to norm scales or DA priors."""
    return p.ndim >= 2 and not name.endswith("norm") and not name.endswith(".a")


def adamw_step(
    params: Mapping[str, Parameter],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
    grads: Mapping[str, np.ndarray] | None = None,
) -> StepResult:
    """One AdamW update with global-norm clipping before the moments.

    Non-finite gradients leave parameters and state untouched.
    """
    g = {k: (grads[k] if grads is not None else p.grad) for k, p in params.items()}
    sq = 0.0
    for k, gk in g.items():
        if gk.shape != params[k].shape:
            raise tn.ShapeError(f"gradient shape {gk.shape} does not match parameter {k} {params[k].shape}")
        sq += float(np.sum(np.square(gk, dtype=np.float64)))
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        return StepResult("rejected_nonfinite", norm, 0.0)
    scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in params.items():
        gk = g[k] * scale if scale != 1.0 else g[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * gk
        v *= b2
        v += (1.0 - b2) * gk * gk
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and decays(k, p):
            update = update + cfg.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype)
    return StepResult("ok", norm, scale)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def read_bytes(path: str | Path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)


def split_corpus(data: np.ndarray, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Train on the leading bytes, validate on the trailing ``val_fraction``."""
    cut = int(round(len(data) * (1.0 - val_fraction)))
    return data[:cut], data[cut:]


def chunk_starts(n: int, seq_len: int) -> np.ndarray:
    """Offsets of non-overlapping windows of seq_len+1 tokens."""
    return np.arange(0, n - seq_len, seq_len)


class BatchStream:
    """Fixed-length chunks in seeded random order, reshuffled when exhausted."""

    def __init__(self, data: np.ndarray, seq_len: int, batch_size: int, rng: np.random.Generator):
        self.data = data
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.rng = rng
        self.starts = chunk_starts(len(data), seq_len)
        if len(self.starts) < batch_size:
            raise ValueError(
                f"corpus of {len(data)} tokens is too small for one batch of {batch_size}x{seq_len + 1}"
            )
        self._order = self.rng.permutation(self.starts)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.starts)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return np.stack([self.data[s:s + self.seq_len + 1] for s in idx])


def eval_batches(data: np.ndarray, seq_len: int, batch_size: int, max_batches: int | None = None):
    starts = chunk_starts(len(data), seq_len)
    if len(starts) == 0:
        raise ValueError(f"corpus of {len(data)} tokens is shorter than one sequence of {seq_len + 1}")
    out = []
    for b in range(0, len(starts), batch_size):
        if max_batches is not None and len(out) >= max_batches:
            break
        out.append(np.stack([data[s:s + seq_len + 1] for s in starts[b:b + batch_size]]))
    return out


def mean_loss(model: Model, batches: Sequence[np.ndarray]) -> float:
    """Token-weighted mean next-token cross-entropy."""
    total, count = 0.0, 0
    with tn.no_grad():
        for b in batches:
            n = b.shape[0] * (b.shape[1] - 1)
            total += float(loss_fn(model, b).item()) * n
            count += n
    return total / count


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    rows: list[dict]
    step0_loss: float
    final_val_loss: float
    best_val_loss: float
    rejected_steps: int
    wall_s: float


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def train(cfg: TrainConfig, out_dir: str | Path | None = None, log=None) -> TrainResult:
    """Train from scratch; writes ``metrics.csv`` and checkpoints to ``out_dir``.

    Row ``s`` describes the model after ``s`` updates: ``train_loss`` is its
    loss on batch ``s`` and ``val_loss`` its held-out loss. The last row has
    ``step == steps``.
    """
    cfg.validate()
    data = read_bytes(cfg.corpus)
    if cfg.val_corpus:
        train_data, val_data = data, read_bytes(cfg.val_corpus)
    else:
        train_data, val_data = split_corpus(data, cfg.val_fraction)
    if data.size and data.max() >= cfg.model.V:
        raise ConfigError(f"corpus has token ids >= V={cfg.model.V}")
    rng = RngState(cfg.seed)
    stream = BatchStream(train_data, cfg.seq_len, cfg.batch_size, rng.stream("data"))
    val = eval_batches(val_data, cfg.seq_len, cfg.batch_size, cfg.eval_batches)
    model = build_model(cfg.model, rng)
    params = model.named_parameters()
    state = AdamState()

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)

    rows: list[dict] = []
    t0 = time.perf_counter()
    best = math.inf
    rejected = 0
    step0 = math.nan
    val_loss = math.nan
    try:
        for step in range(cfg.steps + 1):
            batch = stream.next()
            final = step == cfg.steps
            if final:
                with tn.no_grad():
                    loss = loss_fn(model, batch)
            else:
                model.zero_grad()
                loss = loss_fn(model, batch)
                tn.backward(loss)
            train_loss = float(loss.item())
            if step == 0:
                step0 = train_loss
            lr = lr_schedule(min(step, cfg.steps - 1), cfg.steps, cfg.peak_lr,
                             cfg.warmup_fraction, cfg.final_lr_fraction)
            if step % cfg.eval_interval == 0 or final:
                val_loss = mean_loss(model, val)
                wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_wall_time else 0.0
                row = {
                    "step": step, "train_loss": train_loss, "val_loss": val_loss, "lr": lr,
                    "tokens_seen": step * cfg.batch_size * cfg.seq_len, "wall_ms": round(wall, 3),
                }
                rows.append(row)
                if writer is not None:
                    writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
                    fh.flush()
                if log is not None:
                    log(f"step {step:5d}  train {train_loss:.4f}  val {val_loss:.4f}  lr {lr:.2e}")
                meta = {"step": step, "val_loss": val_loss, "train": cfg.to_dict()}
                if out is not None and cfg.save_checkpoints and val_loss < best:
                    save_checkpoint(model, out / "ckpt_best", meta)
                best = min(best, val_loss)
                if final and out is not None and cfg.save_checkpoints:
                    save_checkpoint(model, out / "ckpt_last", meta)
            if final:
                break
            res = adamw_step(params, state, lr, cfg)
            if res.status != "ok":
                rejected += 1
                if log is not None:
                    log(f"step {step}: {res.status} (grad norm {res.grad_norm})")
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, rows, step0, val_loss, best, rejected, time.perf_counter() - t0)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics columns {reader.fieldnames}")
        return [
            {"step": int(r["step"]), "train_loss": float(r["train_loss"]), "val_loss": float(r["val_loss"]),
             "lr": float(r["lr"]), "tokens_seen": int(r["tokens_seen"]), "wall_ms": float(r["wall_ms"])}
            for r in reader
        ]


# ---------------------------------------------------------------------------
# evaluation and generation
# ---------------------------------------------------------------------------


def _model_of(model_or_path) -> Model:
    if isinstance(model_or_path, Model):
        return model_or_path
    return load_checkpoint(model_or_path)[0]


def evaluate(model_or_path, corpus, seq_len: int | None = None, batch_size: int = 8,
             max_batches: int | None = None) -> tuple[float, float]:
    """(mean token cross-entropy, perplexity) over non-overlapping windows."""
    model = _model_of(model_or_path)
    data = read_bytes(corpus) if isinstance(corpus, (str, Path)) else np.asarray(corpus, dtype=np.int64)
    if data.size and (data.max() >= model.config.V or data.min() < 0):
        raise ConfigError(f"corpus token ids fall outside the model vocabulary of {model.config.V}")
    seq_len = seq_len or min(model.config.T_max, max(1, len(data) - 1))
    loss = mean_loss(model, eval_batches(data, seq_len, batch_size, max_batches))
    return loss, math.exp(loss)


def sample_next(logits: np.ndarray, mode: str, rng: np.random.Generator,
                temperature: float = 1.0, top_k: int | None = None) -> int:
    if mode == "greedy" or (mode == "temperature" and temperature == 0):
        return int(np.argmax(logits))
    if mode not in ("temperature", "top_k"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if temperature <= 0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / temperature
    if mode == "top_k":
        k = int(top_k or 1)
        if k < 1:
            raise ValueError("top_k must be >= 1")
        if k < z.size:
            kth = np.partition(z, -k)[-k]
            z = np.where(z >= kth, z, -np.inf)
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(z.size, p=p))


def generate(model_or_path, prompt: bytes | Sequence[int], n: int, mode: str = "greedy",
             temperature: float = 1.0, top_k: int | None = None, seed: int = 0) -> bytes:
    """Extend ``prompt`` by ``n`` tokens with incremental decoding."""
    model = _model_of(model_or_path)
    ids = list(prompt)
    if not ids:
        raise ValueError("prompt must hold at least one token")
    T_max = model.config.T_max
    if len(ids) > T_max:
        raise ValueError(f"prompt of {len(ids)} tokens exceeds T_max={T_max}")
    if len(ids) + n - 1 > T_max:
        raise ValueError(f"prompt plus {n} new tokens exceeds T_max={T_max}")
    rng = np.random.default_rng(seed)
    cache = new_cache(model)
    logits = prefill(model, cache, np.asarray(ids, dtype=np.int64))[0]
    out = []
    for i in range(n):
        tok = sample_next(logits, mode, rng, temperature, top_k)
        out.append(tok)
        if i + 1 < n:
            logits, cache = decode_step(model, cache, np.int64(tok))
    return bytes(out) if model.config.V <= 256 else out


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("name", "variant", "ways", "realloc", "schedule", "params", "steps",
                    "step0_loss", "final_val_loss", "val_ppl", "wall_s")


def run_ablation(base: TrainConfig, names: Sequence[str] = TABLE6, out_dir: str | Path | None = None,
                 log=None) -> list[dict]:
    """Train every named variant from ``base``; writes ``ablation.csv``."""
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for name in names:
        cfg = dataclasses.replace(base, model=ablation_variant(base.model, name))
        sub = out / _slug(name) if out is not None else None
        res = train(cfg, sub, log=log)
        m = cfg.model
        rows.append({
            "name": name,
            "variant": m.variant.value,
            "ways": "".join(c for c, on in zip("QKVR", m.ways) if on),
            "realloc": int(m.realloc),
            "schedule": m.schedule.label(),
            "params": res.model.param_count(),
            "steps": cfg.steps,
            "step0_loss": res.step0_loss,
            "final_val_loss": res.final_val_loss,
            "val_ppl": math.exp(res.final_val_loss),
            "wall_s": round(res.wall_s, 2),
        })
        if log is not None:
            log(f"{name}: val {res.final_val_loss:.4f}")
    if out is not None:
        with open(out / "ablation.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows


def _slug(name: str) -> str:
    s = name.replace("+", "_plus_").replace("-", "_minus_").replace("−", "_minus_")
    s = "".join(c if c.isalnum() else "_" for c in s)
    return "_".join(p for p in s.split("_") if p) or "run"
