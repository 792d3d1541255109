"""Model configuration and the ablation grid."""

from __future__ import annotations

import dataclasses
import enum
import re
from dataclasses import dataclass, field

from .dense import ConnectionSchedule


class ModelVariant(str, enum.Enum):
    BASELINE = "baseline"
    STATIC_DENSE = "static_dense"
    DYNAMIC_DENSE = "dynamic_dense"
    MULTIWAY_STATIC = "multiway_static"
    MULTIWAY_DYNAMIC = "multiway_dynamic"

    @property
    def has_da(self) -> bool:
        return self is not ModelVariant.BASELINE

    @property
    def multiway(self) -> bool:
        return self in (ModelVariant.MULTIWAY_STATIC, ModelVariant.MULTIWAY_DYNAMIC)

    @property
    def dynamic(self) -> bool:
        return self in (ModelVariant.DYNAMIC_DENSE, ModelVariant.MULTIWAY_DYNAMIC)

    @property
    def num_ways(self) -> int:
        return 4 if self.multiway else 1


def default_ffn_dim(D: int) -> int:
    """SwiGLU hidden dim matching a 4D two-matrix FFN, rounded to 8."""
    return max(8, 8 * round(8 * D / 3 / 8))


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    L: int = 6
    D: int = 128
    H: int = 4
    V: int = 256
    T_max: int = 256
    ffn_dim: int | None = None
    variant: ModelVariant = ModelVariant.BASELINE
    ways: tuple[bool, bool, bool, bool] = (True, True, True, True)
    realloc: bool = False
    prepost: bool = False
    schedule: ConnectionSchedule = field(default_factory=ConnectionSchedule)
    precision: str = "float64"

    def __post_init__(self):
        self.variant = ModelVariant(self.variant)
        self.ways = tuple(bool(w) for w in self.ways)
        if isinstance(self.schedule, str):
            self.schedule = ConnectionSchedule.parse(self.schedule)
        elif isinstance(self.schedule, dict):
            self.schedule = ConnectionSchedule(**self.schedule)

    @property
    def base_ffn_dim(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else default_ffn_dim(self.D)

    def validate(self) -> None:
        if self.L < 0 or self.D < 1 or self.H < 1 or self.V < 1 or self.T_max < 1:
            raise ConfigError(f"sizes must be positive: {self}")
        if self.D % self.H:
            raise ConfigError(f"head count H={self.H} does not divide D={self.D}")
        if (self.D // self.H) % 2:
            raise ConfigError(f"head dim {self.D // self.H} must be even for rotary embedding")
        if len(self.ways) != 4:
            raise ConfigError("ways must have four entries (q, k, v, r)")
        if not self.variant.multiway and not all(self.ways):
            raise ConfigError(f"disabling ways needs a multiway variant, got {self.variant.value}")
        if not self.variant.has_da and (self.prepost or self.schedule.mode != "dense"):
            raise ConfigError("prepost norm and sparse schedules need a dense-connection variant")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        d["ways"] = list(self.ways)
        d["schedule"] = self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "ways" in d:
            d["ways"] = tuple(d["ways"])
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


ABLATION_NAMES = (
    "baseline", "+static", "+dynamic", "+mw_static", "+mw_dynamic", "+mw_dynamic+realloc",
    "+realloc", "-Q", "-K", "-V", "-R",
)

# ablation grid in display order
TABLE6 = ABLATION_NAMES


def ablation_variant(base: ModelConfig, name: str) -> ModelConfig:
    """Map an ablation name onto a configuration derived from ``base``.

    The first group adds components to the baseline; ``-Q``..``-R`` and the
    sparse schedules start from the full model (multiway dynamic + realloc).
    """
    n = name.strip().replace("−", "-")
    plain = base.replace(
        variant=ModelVariant.BASELINE, ways=(True,) * 4, realloc=False,
        prepost=False, schedule=ConnectionSchedule(),
    )
    full = plain.replace(variant=ModelVariant.MULTIWAY_DYNAMIC, realloc=True)
    simple = {
        "baseline": plain,
        "+static": plain.replace(variant=ModelVariant.STATIC_DENSE),
        "+dynamic": plain.replace(variant=ModelVariant.DYNAMIC_DENSE),
        "+mw_static": plain.replace(variant=ModelVariant.MULTIWAY_STATIC),
        "+mw_dynamic": plain.replace(variant=ModelVariant.MULTIWAY_DYNAMIC),
        "+mw_dynamic+realloc": full,
        "muddformer": full,
        "+realloc": plain.replace(realloc=True),
    }
    if n in simple:
        return simple[n]
    m = re.fullmatch(r"-([QKVR])", n, flags=re.I)
    if m:
        ways = [True] * 4
        ways["QKVR".index(m.group(1).upper())] = False
        return full.replace(ways=tuple(ways))
    try:
        sched = ConnectionSchedule.parse(n)
    except ValueError:
        raise ConfigError(f"unknown ablation name {name!r}") from None
    if sched.mode == "dense":
        raise ConfigError(f"unknown ablation name {name!r}")
    return full.replace(schedule=sched)
