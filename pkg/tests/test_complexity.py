import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mudd import complexity as cx
from mudd.config import ModelConfig
from mudd.model import build_model

from oracles import memory_table_oracle

# (L, D, T) -> printed params ratio, FLOPs ratio, eta, rho
TABLE1 = {
    (24, 2048, 4096): ("0.22%", "0.38%", "0.0132", "2"),
    (42, 1536, 4096): ("0.49%", "0.8%", "0.0293", "2.67"),
    (32, 2560, 4096): ("0.23%", "0.4%", "0.0137", "1.6"),
    (32, 4096, 4096): ("0.14%", "0.26%", "0.0085", "1"),
}


@pytest.mark.parametrize("key", list(TABLE1))
def test_overhead_rows(key):
    L, D, T = key
    row = cx.report(cx.ArchSpec(L=L, D=D, T=T)).display_row()
    assert (row["params_ratio"], row["flops_ratio"], row["eta"], row["rho"]) == TABLE1[key]


def test_small_exact_numerator():
    assert cx.extra_param_count(cx.ArchSpec(L=2, D=8)) == 64 + 64 + 96 + 144


def test_numerator_matches_built_model_tensor_sizes():
    cfg = ModelConfig(L=2, D=8, H=2, V=16, variant="multiway_dynamic")
    m = build_model(cfg, 0)
    w = sum(p.data.size for da in m.das.values() for p in (da.w1, da.w2))
    assert w == cx.extra_param_count(cx.ArchSpec(L=2, D=8)) == 368


@pytest.mark.parametrize("key", list(TABLE1))
def test_exact_and_approx_close(key):
    L, D, T = key
    s = cx.ArchSpec(L=L, D=D, T=T)
    for exact, approx in (cx.extra_params(s), cx.extra_flops(s)):
        assert abs(exact - approx) / exact < Fraction(15, 100)
        assert approx <= exact


def test_exact_ratios_are_rational():
    pe, pa = cx.extra_params(cx.ArchSpec(L=3, D=64, T=32))
    assert isinstance(pe, Fraction) and pa == Fraction(6, 64) / 6


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(64, 8192))
def test_ratio_monotone_in_depth(L, D):
    a = cx.extra_params(cx.ArchSpec(L=L, D=D))
    b = cx.extra_params(cx.ArchSpec(L=L + 1, D=D))
    assert b[0] > a[0] and b[1] > a[1]


# --- memory ----------------------------------------------------------------------


def test_memory_ratios_closed_form():
    s = cx.ArchSpec(L=32, D=2560, T=2048, N=32, B=1)
    _, r_mudd = cx.activation_memory(s, "muddformer")
    _, r_dense = cx.activation_memory(s, "static_dense")
    q = Fraction(3 * 32 * 2048, 2560)
    assert r_mudd == Fraction(35) / (32 + 17 + q)
    assert r_dense == Fraction(32) / (32 + 17 + q)
    assert r_mudd < Fraction(3, 10)
    assert cx.activation_memory(s, "baseline")[1] == 0


def test_memory_against_oracle():
    rng = np.random.default_rng(4)
    for _ in range(5):
        L, N, B = (int(x) for x in rng.integers(1, 64, 3))
        D, T = int(rng.integers(1, 64)) * 64, int(rng.integers(1, 64)) * 64
        s = cx.ArchSpec(L=L, D=D, T=T, N=N, B=B)
        ref = memory_table_oracle(L, D, T, N, B)
        for v, r in zip(cx.MEMORY_VARIANTS, ref):
            assert float(cx.activation_memory(s, v)[0]) == pytest.approx(r, rel=1e-12)


def test_memory_rejects_unknown_variant():
    with pytest.raises(ValueError):
        cx.activation_memory(cx.ArchSpec(L=2, D=8), "hyper")


# --- measured flops ------------------------------------------------------------------


def test_measured_baseline_flops_near_formula():
    cfg = ModelConfig(L=2, D=64, H=4, V=16, T_max=16)
    fm = cx.flop_count_model(build_model(cfg, 0), T=16)
    ratio = fm.block / cx.baseline_flops(cx.ArchSpec(L=2, D=64, T=16))
    assert 0.9 <= ratio <= 1.1


def test_measured_da_flops_match_exact_sum():
    cfg = ModelConfig(L=4, D=64, H=4, V=16, T_max=16, variant="multiway_dynamic")
    fm = cx.flop_count_model(build_model(cfg, 0), T=16)
    expect = cx.extra_flop_count(cx.ArchSpec(L=4, D=64, T=16))
    assert abs(fm.da / expect - 1) < 0.05


def test_zero_layer_model_counts_only_head():
    cfg = ModelConfig(L=0, D=16, H=2, V=32, T_max=8)
    fm = cx.flop_count_model(build_model(cfg, 0), T=8)
    assert fm.total == fm.head == 2 * 8 * 16 * 32


def test_formats():
    reps = cx.table1()
    assert len(json.loads(cx.format_reports(reps, "json"))) == 4
    csv_text = cx.format_reports(reps, "csv")
    assert csv_text.splitlines()[0].startswith("model,params_ratio,flops_ratio")
    assert "0.0293" in cx.format_reports(reps, "table")
    with pytest.raises(ValueError):
        cx.format_reports(reps, "xml")
