"""Parameter, FLOP and activation-memory overheads of dense connections.

Closed forms are evaluated in exact rational arithmetic. With C ways and
a DA module after every layer, layer i's module has hidden width
K_i = C(i+1) and costs

    params   D*K_i + K_i^2                   (W1, W2)
    flops    2TDK_i + 2TK_i^2 + 2TDK_i       (W1, W2, aggregation)

against a baseline of 12LD^2 params and 2LDT(12D+T) forward flops. With
D >> K the ratios reduce to eta/6 and eta/(3 + rho/4) where eta = (L+3)/D
and rho = T/D.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from . import tensor as tn

MEMORY_VARIANTS = ("baseline", "static_dense", "muddformer")


@dataclass(frozen=True)
class ArchSpec:
    L: int
    D: int
    T: int = 2048
    N: int = 16
    B: int = 1
    C: int = 4

    def __post_init__(self):
        for k in ("L", "D", "T", "N", "B", "C"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive, got {getattr(self, k)}")

    @property
    def eta(self) -> Fraction:
        return Fraction(self.L + 3, self.D)

    @property
    def rho(self) -> Fraction:
        return Fraction(self.T, self.D)

    def widths(self) -> list[int]:
        return [self.C * (i + 1) for i in range(1, self.L + 1)]


def baseline_params(spec: ArchSpec) -> int:
    return 12 * spec.L * spec.D**2


def baseline_flops(spec: ArchSpec) -> int:
    return 2 * spec.L * spec.D * spec.T * (12 * spec.D + spec.T)


def extra_param_count(spec: ArchSpec) -> int:
    """W1 and W2 entries summed over all DA modules (priors excluded)."""
    return sum(spec.D * K + K * K for K in spec.widths())


def prior_param_count(spec: ArchSpec) -> int:
    return sum(spec.C * (i + 1) for i in range(1, spec.L + 1))


def extra_flop_count(spec: ArchSpec) -> int:
    T, D = spec.T, spec.D
    return sum(2 * T * D * K + 2 * T * K * K + 2 * T * D * K for K in spec.widths())


def extra_params(spec: ArchSpec) -> tuple[Fraction, Fraction]:
    """(exact, approx) ratio of DA parameters to the 12LD^2 baseline."""
    return Fraction(extra_param_count(spec), baseline_params(spec)), spec.eta / 6


def extra_flops(spec: ArchSpec) -> tuple[Fraction, Fraction]:
    """(exact, approx) ratio of DA forward flops to 2LDT(12D+T)."""
    return Fraction(extra_flop_count(spec), baseline_flops(spec)), spec.eta / (3 + spec.rho / 4)


def activation_memory(spec: ArchSpec, variant: str = "baseline") -> tuple[Fraction, Fraction]:
    """Peak training activation bytes (float16) and the ratio of the
    variant's extra bytes to the baseline's.

    baseline: 2LBTD for saved layer inputs plus BTD(34 + 6NT/D) to
    recompute the last layer. static_dense adds 2LBTD of hidden-state
    gradients; muddformer adds a further 6BTD for the recomputed Q/K/V
    streams of the last layer.
    """
    L, B, T, D, N = spec.L, spec.B, spec.T, spec.D, spec.N
    btd = B * T * D
    base = 2 * L * btd + btd * (34 + Fraction(6 * N * T, D))
    if variant == "baseline":
        extra = Fraction(0)
    elif variant in ("static_dense", "denseformer"):
        extra = Fraction(2 * L * btd)
    elif variant in ("muddformer", "mudd"):
        extra = Fraction(6 * btd + 2 * L * btd)
    else:
        raise ValueError(f"unknown memory variant {variant!r}; expected one of {MEMORY_VARIANTS}")
    return base + extra, extra / base


# ---------------------------------------------------------------------------
# measured counts
# ---------------------------------------------------------------------------


@dataclass
class FlopMeasurement:
    total: int
    block: int
    da: int
    head: int


def flop_count_model(model, tokens=None, T: int | None = None) -> FlopMeasurement:
    """Matmul flops (2mnk each) of one forward pass, split by component."""
    from .model import forward

    if tokens is None:
        T = T or model.config.T_max
        tokens = np.zeros((1, T), dtype=np.int64)
    with tn.no_grad(), tn.count_flops() as fc:
        forward(model, tokens)
    s = fc.by_scope
    return FlopMeasurement(fc.total, s.get("block", 0), s.get("da", 0), s.get("head", 0))


def model_extra_params(model) -> int:
    """Count of DA parameters in a built model (W1, W2 and priors)."""
    return model.da_param_count()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

# Reference model shapes for the overhead table.
TABLE1_SPECS = (
    ("1.4B", ArchSpec(L=24, D=2048, T=4096)),
    ("1.34B", ArchSpec(L=42, D=1536, T=4096)),
    ("2.8B", ArchSpec(L=32, D=2560, T=4096)),
    ("6.9B", ArchSpec(L=32, D=4096, T=4096)),
)


def fmt_sig(x, sig: int = 2) -> str:
    """Format to ``sig`` significant figures without trailing zeros."""
    v = float(x)
    if v == 0:
        return "0"
    return f"{v:.{sig}g}" if abs(v) >= 1e-4 else f"{v:.{sig}e}"


def fmt_pct(x, sig: int = 2) -> str:
    return fmt_sig(float(x) * 100, sig) + "%"


def fmt_fixed(x, places: int) -> str:
    s = f"{float(x):.{places}f}"
    return s.rstrip("0").rstrip(".") if "." in s else s


@dataclass
class ComplexityReport:
    name: str
    L: int
    D: int
    T: int
    N: int
    B: int
    baseline_params: int
    baseline_flops: int
    extra_params_exact: int
    extra_flops_exact: int
    ratio_params_exact: float
    ratio_flops_exact: float
    ratio_params_approx: float
    ratio_flops_approx: float
    eta: float
    rho: float
    memory: dict

    def display_row(self) -> dict:
        return {
            "model": self.name,
            "params_ratio": fmt_pct(self.ratio_params_approx),
            "flops_ratio": fmt_pct(self.ratio_flops_approx),
            "L": str(self.L),
            "D": str(self.D),
            "T": str(self.T),
            "eta": fmt_fixed(self.eta, 4),
            "rho": fmt_fixed(self.rho, 2),
        }


def report(spec: ArchSpec, name: str = "", variant: str | None = None) -> ComplexityReport:
    pe, pa = extra_params(spec)
    fe, fa = extra_flops(spec)
    variants = MEMORY_VARIANTS if variant is None else (variant,)
    memory = {}
    for v in variants:
        nbytes, ratio = activation_memory(spec, v)
        memory[v] = {"bytes": float(nbytes), "extra_ratio": float(ratio)}
    return ComplexityReport(
        name=name or f"L{spec.L}-D{spec.D}",
        L=spec.L, D=spec.D, T=spec.T, N=spec.N, B=spec.B,
        baseline_params=baseline_params(spec),
        baseline_flops=baseline_flops(spec),
        extra_params_exact=extra_param_count(spec),
        extra_flops_exact=extra_flop_count(spec),
        ratio_params_exact=float(pe),
        ratio_flops_exact=float(fe),
        ratio_params_approx=float(pa),
        ratio_flops_approx=float(fa),
        eta=float(spec.eta),
        rho=float(spec.rho),
        memory=memory,
    )


def table1() -> list[ComplexityReport]:
    return [report(spec, name) for name, spec in TABLE1_SPECS]


def format_reports(reports: list[ComplexityReport], fmt: str = "table") -> str:
    if fmt == "json":
        return json.dumps([asdict(r) for r in reports], indent=2)
    rows = [r.display_row() for r in reports]
    exact = [
        {"params_exact": fmt_pct(r.ratio_params_exact, 3), "flops_exact": fmt_pct(r.ratio_flops_exact, 3)}
        for r in reports
    ]
    mem = [{f"mem_{k}": fmt_pct(v["extra_ratio"], 3) for k, v in r.memory.items() if k != "baseline"} for r in reports]
    merged = [{**a, **b, **c} for a, b, c in zip(rows, exact, mem)]
    if not merged:
        return ""
    cols = list(merged[0])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(merged)
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    widths = {c: max(len(c), *(len(m[c]) for m in merged)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines.append("  ".join("-" * widths[c] for c in cols))
    for m in merged:
        lines.append("  ".join(m[c].ljust(widths[c]) for c in cols))
    return "\n".join(lines) + "\n"
