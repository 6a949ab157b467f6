from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cpnet import complexity as C
from cpnet.models import ModelGraph, Node, UNetConfig, build_cpnet, variant_config

import oracles

CFG = UNetConfig()


def report(variant, shift=False, base=CFG):
    return C.count_model(build_cpnet(variant_config(variant, base, shift)))


def test_conv_cost_examples():
    assert C.conv_cost(12, 64, 3, 256, 256) == 452_984_832
    assert C.conv_cost(3, 16, 3, 256, 256) == 28_311_552 == 452_984_832 // 16
    assert C.conv_cost(1, 1, 1, 1, 1) == 1


def test_conv_cost_is_exact_beyond_32_bits():
    assert C.conv_cost(1024, 1024, 3, 512, 512) == 1024 * 1024 * 9 * 512 * 512
    assert C.conv_cost(1024, 1024, 3, 512, 512) > 2**32


@pytest.mark.parametrize("bad", [(0, 1, 1, 1, 1), (1, 1, 1, -2, 1), (1.5, 1, 1, 1, 1)])
def test_conv_cost_rejects_bad_sizes(bad):
    with pytest.raises(ValueError):
        C.conv_cost(*bad)


@given(st.integers(1, 64), st.integers(1, 64), st.sampled_from([1, 3, 5]), st.integers(1, 64),
       st.integers(1, 64), st.integers(1, 8))
def test_splitting_divides_by_n_squared(cin, cout, k, w, h, n):
    assert C.conv_cost(cin * n, cout * n, k, w, h) == n * n * C.conv_cost(cin, cout, k, w, h)


def test_empty_model_costs_nothing():
    m = ModelGraph(variant_config("baseline", CFG), [], {}, output="out")
    rep = C.count_model(m)
    assert rep.total_macs == 0 and rep.total_params == 0


def test_unknown_kind_is_an_error():
    m = ModelGraph(variant_config("baseline", CFG), [Node("x", "lstm", (), ())], {}, output="x")
    with pytest.raises(ValueError, match="lstm"):
        C.count_model(m)


@pytest.mark.parametrize("variant", ["cpnet075", "cpnet037"])
def test_shift_adds_no_macs(variant):
    off, on = report(variant), report(variant, True)
    assert on.total_macs == off.total_macs
    assert on.total_params == off.total_params
    assert any(l.kind == "shift" for l in on.layers)


@pytest.mark.parametrize("variant", ["cpnet075", "cpnet037"])
def test_each_interior_path_is_one_sixteenth(variant):
    checks = C.split_law(report(variant), report("baseline"))
    assert checks and all(c.holds for c in checks)
    for c in checks:
        assert len(c.path_macs) == 4 and all(16 * m == c.unsplit_macs for m in c.path_macs)


def test_full_split_interior_ratio_is_exactly_quarter():
    r = C.compare(report("cpnet037"), report("baseline"))
    assert r.interior_macs == Fraction(1, 4)


def test_full_split_lands_in_band():
    r = C.compare(report("cpnet037", True), report("baseline"))
    assert Fraction(30, 100) <= r.macs <= Fraction(45, 100)
    assert Fraction(20, 100) <= r.params <= Fraction(35, 100)


def test_encoder_split_sits_between():
    base, enc, full = report("baseline"), report("cpnet075"), report("cpnet037")
    assert full.total_macs < enc.total_macs < base.total_macs


def test_identical_reports_are_100_percent():
    r = C.compare(report("baseline"), report("baseline"))
    assert r.macs == 1 and r.params == 1
    assert C.Ratio.pct(r.macs) == "100.0%"


def test_zero_reference_rejected():
    empty = C.ComplexityReport("empty")
    with pytest.raises(ValueError):
        C.compare(report("baseline"), empty)


def test_params_match_checkpoint_values():
    for variant in ("baseline", "cpnet075", "cpnet037"):
        m = build_cpnet(variant_config(variant, CFG, variant != "baseline"))
        assert C.count_model(m).total_params == sum(v.size for v in m.state_dict().values())


def test_baseline_params_match_independent_calculator():
    assert report("baseline").total_params == oracles.unet_param_closed_form(12, 32, 3, 3)


def test_transpose_conv_priced_on_output_size():
    up = next(l for l in report("baseline").layers if l.kind == "upconv")
    assert up.macs == up.cin * up.cout * up.k**2 * up.width * up.height
    assert up.k == 2


def test_reports_are_reproducible():
    a, b = report("cpnet037", True), report("cpnet037", True)
    assert a.layers == b.layers


def test_keyvalue_round_trip(tmp_path):
    kv = C.report_keyvalues(report("cpnet037"), report("baseline"))
    C.write_keyvalues(kv, tmp_path / "r.kv")
    assert C.read_keyvalues(tmp_path / "r.kv") == kv
    assert kv["interior_macs_ratio"] == "1/4" and kv["interior_macs_pct"] == "25.0%"


def test_tables_render_every_conv():
    rep = report("cpnet075")
    table = C.render_table(rep)
    assert table.count("\n") == len(rep.conv_layers()) + 3  # title, header, rows, total
    assert f"{2 * rep.total_macs:,}" in C.render_table(rep, flops=True)
    ratios = C.ratio_table([report("baseline"), rep], report("baseline"))
    assert "cpnet075" in ratios and "100.0%" in ratios


def test_other_scales_keep_the_law():
    base = UNetConfig(base_channels=64, depth=2, height=32, width=32)
    r = C.compare(report("cpnet037", base=base), report("baseline", base=base))
    assert r.interior_macs == Fraction(1, 4)
    assert np.isfinite(float(r.macs))
