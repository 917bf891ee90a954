"""Cost accounting: preset tables, instrumented cross-check, comparisons."""

import numpy as np
import pytest

from lmlt.analysis import (
    acts_count,
    compare_wsa_lmlt,
    cost_report,
    flops_input_res,
    flops_model,
    layer_table,
    param_count,
    verify_flops,
)
from lmlt.errors import ConfigError, VerificationError
from lmlt.model import ModelConfig, init_weights, preset

TOY = dict(channels=8, blocks=1, heads=2, window=4, scale=2)

# Reference totals for the preset family (rounded thousands / 1e9 MACs).
PARAM_TARGETS_K = {
    ("tiny", 2): 239, ("tiny", 3): 244, ("tiny", 4): 251,
    ("small", 2): 357, ("small", 3): 361, ("small", 4): 368,
    ("base", 2): 652, ("base", 3): 660, ("base", 4): 672,
    ("large", 2): 1270, ("large", 3): 1279, ("large", 4): 1295,
}
FLOPS_TARGETS_G = {
    ("tiny", 2): 59, ("tiny", 3): 28, ("tiny", 4): 15,
    ("small", 2): 88, ("base", 2): 158, ("base", 3): 75, ("base", 4): 41,
    ("large", 2): 306, ("large", 3): 144, ("large", 4): 78,
}


class TestParamCount:
    @pytest.mark.parametrize(("name", "scale"), sorted(PARAM_TARGETS_K))
    def test_preset_targets(self, name, scale):
        got = param_count(preset(name, scale))
        target = PARAM_TARGETS_K[(name, scale)] * 1000
        assert abs(got - target) / target <= 0.005

    def test_closure_with_materialized(self):
        for name in ("tiny", "small", "base", "large"):
            for scale in (2, 3, 4):
                cfg = preset(name, scale)
                assert param_count(cfg) == init_weights(cfg, 0).total_params()

    def test_closure_under_flags(self):
        for kw in (
            dict(aggregation=False),
            dict(pe_mode="rpe"),
            dict(pe_mode="none"),
            dict(depth=3),
            dict(heads=2),
            dict(attn_bias=False),
            dict(pooling=False),
        ):
            cfg = preset("tiny", 2, **kw)
            assert param_count(cfg) == init_weights(cfg, 0).total_params(), kw

    def test_merge_drop(self):
        full = param_count(preset("tiny", 2))
        dropped = param_count(preset("tiny", 2, aggregation=False))
        assert full - dropped == 8 * (36 * 36 + 36)

    def test_rpe_adds_about_5k(self):
        full = param_count(preset("tiny", 2))
        rpe = param_count(preset("tiny", 2, pe_mode="rpe"))
        assert 3000 < rpe - full < 7000


class TestFlops:
    @pytest.mark.parametrize(("name", "scale"), sorted(FLOPS_TARGETS_G))
    def test_preset_targets(self, name, scale):
        got = flops_model(preset(name, scale))
        target = FLOPS_TARGETS_G[(name, scale)] * 10**9
        assert abs(got - target) / target <= 0.10

    def test_input_res_matches_convention(self):
        assert flops_input_res(2) == (360, 640)
        assert flops_input_res(3) == (240, 427)
        assert flops_input_res(4) == (180, 320)

    def test_no_pool_raises_toward_67g(self):
        got = flops_model(preset("tiny", 2, pooling=False, low_to_high=False))
        assert abs(got - 67e9) / 67e9 <= 0.10
        assert got > flops_model(preset("tiny", 2))

    def test_resolution_linearity(self):
        cfg = preset("tiny", 2)
        a = layer_table(cfg, (128, 128)).total_macs
        b = layer_table(cfg, (256, 128)).total_macs
        assert abs(b - 2 * a) / (2 * a) < 0.01


class TestActs:
    def test_tiny_targets(self):
        for scale, target in ((2, 603e6), (3, 283e6), (4, 152e6)):
            got = acts_count(preset("tiny", scale))
            assert abs(got - target) / target <= 0.15, (scale, got)

    def test_zero_blocks_would_count_only_head_tail(self):
        # blocks >= 1 is enforced; emulate by comparing one- and two-block tables
        cfg1 = ModelConfig(**dict(TOY, blocks=1))
        cfg2 = ModelConfig(**dict(TOY, blocks=2))
        t1 = layer_table(cfg1, (16, 16))
        t2 = layer_table(cfg2, (16, 16))
        per_block = t2.total_acts - t1.total_acts
        head_tail = t1.total_acts - per_block
        expect = (8 + 3 * 4) * 16 * 16  # head conv D + tail conv 3*s^2 outputs
        assert head_tail == expect

    def test_acts_scale_linearly(self):
        cfg = preset("tiny", 2)
        a = layer_table(cfg, (64, 64)).total_acts
        b = layer_table(cfg, (128, 64)).total_acts
        assert b == 2 * a


class TestVerifyFlops:
    def test_toy_pass(self):
        rep = verify_flops(ModelConfig(**TOY), (16, 16))
        assert rep.total_delta == 0.0
        assert all(r.measured == r.analytic for r in rep.rows)

    def test_all_presets_within_1pct(self):
        for name in ("tiny", "small", "base", "large"):
            rep = verify_flops(preset(name, 2), (16, 16))
            assert abs(rep.total_delta) <= 0.01

    def test_doubling_h_doubles_macs(self):
        cfg = ModelConfig(**TOY)
        a = layer_table(cfg, (16, 16)).total_macs
        b = layer_table(cfg, (32, 16)).total_macs
        assert abs(b - 2 * a) / (2 * a) < 0.01

    def test_too_large_resolution(self):
        with pytest.raises(ConfigError):
            verify_flops(ModelConfig(**TOY), (128, 128))


class TestCompare:
    def test_ratio_one_at_single_head(self):
        rows = compare_wsa_lmlt(64, 64, 36, 8, [1])
        assert rows[0].ratio == 1.0

    def test_ratio_below_one(self):
        for row in compare_wsa_lmlt(64, 64, 36, 8, [2, 3, 4, 6]):
            assert row.ratio < 1.0

    def test_ratio_monotone(self):
        rows = compare_wsa_lmlt(64, 64, 36, 8, [1, 2, 3, 4, 6])
        ratios = [r.ratio for r in rows]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_indivisible_heads(self):
        with pytest.raises(ConfigError):
            compare_wsa_lmlt(64, 64, 16, 8, [3])


class TestCsv:
    def test_csv_shape(self):
        rep = cost_report(preset("tiny", 2))
        text = rep.to_csv()
        lines = text.strip().splitlines()
        assert lines[0] == "layer,params,macs,acts"
        assert lines[-1].startswith("total,")
        total = lines[-1].split(",")
        assert int(total[1]) == rep.total_params
        assert int(total[2]) == rep.total_macs
        body = lines[1:-1]
        assert sum(int(row.split(",")[1]) for row in body) == rep.total_params
