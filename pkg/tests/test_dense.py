from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mudd import tensor as tn
from mudd.dense import (
    ConnectionSchedule, DAParams, aggregate, apply_da, da_dynamic, da_multiway, da_static,
    exact_ffn_ramp, generate_dynamic_weights, init_da_params, prepost_danorm, realloc_ffn_dims,
    schedule_sets,
)
from mudd.gradcheck import grad_check
from mudd.rng import RngState
from mudd.tensor import Parameter, ShapeError, Tensor

from oracles import da_oracle, dilated_sets_enumerator, generate_dw_oracle, realloc_oracle


def history(n, B=2, T=3, D=8, seed=0):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.standard_normal((B, T, D))) for _ in range(n)]


def live(p: DAParams, seed=1, scale=0.3):
    rng = np.random.default_rng(seed)
    for q in p.named().values():
        q.data = q.data + scale * rng.standard_normal(q.shape)
    return p


def test_da_static_and_dynamic_are_weighted_sums():
    hs = history(3)
    a = np.array([0.5, -1.0, 2.0])
    out = da_static(hs, Tensor(a)).data
    np.testing.assert_allclose(out, sum(a[j] * hs[j].data for j in range(3)), atol=1e-14)
    w = np.random.default_rng(5).standard_normal((2, 3, 3))
    out = da_dynamic(hs, Tensor(w)).data
    ref = sum(w[..., j:j + 1] * hs[j].data for j in range(3))
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_aggregate_all_ways():
    hs = history(4)
    w = np.random.default_rng(5).standard_normal((2, 3, 4, 4))
    out = aggregate(hs, Tensor(w)).data
    for c in range(4):
        ref = sum(w[:, :, c, j:j + 1] * hs[j].data for j in range(4))
        np.testing.assert_allclose(out[:, :, c], ref, atol=1e-14)


def test_length_mismatch_rejected():
    with pytest.raises(ShapeError):
        da_static(history(3), Tensor(np.ones(2)))


def test_weight_generator_matches_pseudocode_layout():
    p = live(init_da_params(8, 3, 4, "standard", RngState(0)))
    x = np.random.default_rng(2).standard_normal((1, 5, 8))
    w = generate_dynamic_weights(Tensor(x), p).data  # (B, T, C, J)
    ref = generate_dw_oracle(x[0], p)  # (C, T, J)
    np.testing.assert_allclose(np.moveaxis(w[0], 1, 0), ref, atol=1e-13)


def test_multiway_matches_oracle():
    p = live(init_da_params(8, 2, 4, "standard", RngState(0)))
    hs = history(3, B=1, T=4)
    out = da_multiway(hs, p)
    ref = da_oracle([h.data[0] for h in hs], p)
    for o, r in zip(out, ref):
        np.testing.assert_allclose(o.data[0], r, atol=1e-13)


def test_prepost_matches_oracle():
    p = live(init_da_params(8, 2, 4, "prepost", RngState(0)))
    hs = history(3, B=1, T=4)
    out = prepost_danorm(hs, p)
    ref = da_oracle([h.data[0] for h in hs], p)
    for o, r in zip(out, ref):
        np.testing.assert_allclose(o.data[0], r, atol=1e-13)


@pytest.mark.parametrize("C,dynamic", [(1, False), (1, True), (4, False), (4, True)])
def test_standard_init_returns_current_output_bitwise(C, dynamic):
    p = init_da_params(8, 3, C, "standard", RngState(0), dynamic=dynamic)
    hs = history(4)
    out, w = apply_da(hs, p)
    for o in (out if C == 4 else [out]):
        np.testing.assert_array_equal(o.data, hs[-1].data)


def test_prepost_init_returns_current_output_bitwise():
    p = init_da_params(8, 3, 4, "prepost", RngState(0))
    hs = history(4)
    out, _ = apply_da(hs, p)
    for o in out:
        np.testing.assert_array_equal(o.data, hs[-1].data)


def test_init_distributions():
    D = 256
    p = init_da_params(D, 5, 4, "standard", RngState(0))
    assert p.w1.shape == (D, 24) and p.w2.shape == (24, 24) and p.a.shape == (4, 6)
    assert np.all(p.w2.data == 0)
    np.testing.assert_array_equal(p.a.data, np.eye(6)[[5] * 4])
    assert abs(p.w1.data.var() * D - 1.0) < 0.1
    q = init_da_params(D, 5, 4, "prepost", RngState(0))
    assert np.all(q.a.data == 0) and np.all(q.pre_norm.data == 1) and np.all(q.post_norm.data == 1e-3)


def test_da_gradients():
    p = live(init_da_params(6, 2, 4, "standard", RngState(0)))
    hs = [Parameter(h.data) for h in history(3, B=1, T=3, D=6)]
    ws = [Tensor(np.random.default_rng(s).standard_normal((1, 3, 6))) for s in range(4)]

    def loss():
        out, _ = apply_da(hs, p)
        return tn.tsum(tn.add(tn.add(tn.mul(out.xq, ws[0]), tn.mul(out.xk, ws[1])),
                              tn.add(tn.mul(out.xv, ws[2]), tn.mul(out.xr, ws[3]))))

    params = {**{f"h{i}": h for i, h in enumerate(hs)}, **p.named()}
    rep = grad_check(loss, params, tolerance=1e-6)
    assert rep.passed, "\n".join(rep.lines())


def test_prepost_gradients():
    p = live(init_da_params(6, 2, 4, "prepost", RngState(0)))
    hs = [Parameter(h.data) for h in history(3, B=1, T=3, D=6)]
    w = Tensor(np.random.default_rng(9).standard_normal((1, 3, 6)))
    rep = grad_check(lambda: tn.tsum(tn.mul(apply_da(hs, p)[0].xr, w)),
                     {**{f"h{i}": h for i, h in enumerate(hs)}, **p.named()}, tolerance=1e-6)
    assert rep.passed, "\n".join(rep.lines())


# --- FFN re-allocation -------------------------------------------------------


def test_ramp_matches_fraction_oracle():
    for L in (2, 3, 6, 24, 42):
        assert exact_ffn_ramp(L, 5632) == realloc_oracle(L, 5632)


def test_realloc_middle_layer_reference_point():
    dims = realloc_ffn_dims(24, 5632)
    ramp = realloc_oracle(24, 5632)
    assert dims[11] == 5512
    rounded = [max(8, 8 * round(v / 8)) for v in ramp]
    assert sum(rounded) == 24 * 5632  # no correction needed here
    assert dims == rounded


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(2, 512).map(lambda k: 8 * k))
def test_realloc_total_preserved(L, D_f):
    dims = realloc_ffn_dims(L, D_f)
    assert len(dims) == L and sum(dims) == L * D_f
    assert all(d > 0 for d in dims)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 64), st.integers(4, 512).map(lambda k: 8 * k))
def test_realloc_endpoints_within_rounding_unit(L, D_f):
    dims = realloc_ffn_dims(L, D_f)
    assert abs(dims[0] - Fraction(D_f, 2)) <= 8
    assert abs(dims[-1] - Fraction(3 * D_f, 2)) <= 8


def test_realloc_rejects_degenerate_width():
    with pytest.raises(ValueError):
        realloc_ffn_dims(2, 8)


# --- schedules -----------------------------------------------------------------


def test_schedule_parsing():
    assert ConnectionSchedule.parse("dilated(2,2)") == ConnectionSchedule("dilated", k=2, p=2)
    assert ConnectionSchedule.parse("2x2") == ConnectionSchedule("dilated", k=2, p=2)
    assert ConnectionSchedule.parse("sw(4)") == ConnectionSchedule("sliding_window", n=4)
    assert ConnectionSchedule.parse("SW4").label() == "sw(4)"
    assert ConnectionSchedule.parse("dense") == ConnectionSchedule()
    with pytest.raises(ValueError):
        ConnectionSchedule.parse("ring(3)")


def test_dilated_2x2_matches_enumerator():
    table = schedule_sets(ConnectionSchedule("dilated", k=2, p=2), 8)
    assert table.sets == dilated_sets_enumerator(8, 2, 2)
    assert table[1] is None and table[2] == (0, 2) and table[8] == (0, 2, 4, 6, 8)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(1, 4), st.integers(1, 4))
def test_dilated_matches_enumerator_everywhere(L, k, p):
    assert schedule_sets(ConnectionSchedule("dilated", k=k, p=p), L).sets == dilated_sets_enumerator(L, k, p)


def test_sliding_window_sets():
    table = schedule_sets(ConnectionSchedule("sliding_window", n=2), 5)
    assert table[1] == (0, 1) and table[3] == (0, 2, 3) and table[5] == (0, 4, 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(1, 20))
def test_degenerate_schedules_are_dense(L, n):
    dense = schedule_sets(ConnectionSchedule(), L).sets
    assert schedule_sets(ConnectionSchedule("dilated", k=1, p=1), L).sets == dense
    if n >= L:
        assert schedule_sets(ConnectionSchedule("sliding_window", n=n), L).sets == dense
