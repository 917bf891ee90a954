"""Window attention, the multi-level cascade, and the analytic cost forms."""

import math

import numpy as np
import pytest

from lmlt.attention import (
    AblationFlags,
    AttnParams,
    HeadPlan,
    flops_lmlt_head,
    flops_wsa,
    lmlt_forward,
    window_self_attention,
)
from lmlt.errors import ConfigError, ShapeError
from lmlt.rng import Rng
from lmlt.tensor import Tensor, fd_gradcheck, mul, sum_all
from tests.conftest import rand_tensor


def make_params(rng, d, pe="lepe", window=4, scale=0.5, bias=True):
    def t(shape):
        return rand_tensor(rng, shape, -scale, scale)

    return AttnParams(
        wq=t((d, d)),
        wk=t((d, d)),
        wv=t((d, d)),
        wo=t((d, d)),
        bq=t((d,)) if bias else None,
        bk=t((d,)) if bias else None,
        bv=t((d,)) if bias else None,
        bo=t((d,)) if bias else None,
        lepe_w=t((d, 1, 3, 3)) if pe == "lepe" else None,
        lepe_b=t((d,)) if pe == "lepe" else None,
        rpe_table=t(((2 * window - 1) ** 2, 1)) if pe == "rpe" else None,
    )


def global_attention_oracle(xd, p, scale_logits=True):
    """Naive per-token loop over the whole feature as one window."""
    n, d, h, w = xd.shape
    assert n == 1
    toks = xd[0].reshape(d, h * w).T
    q = toks @ p.wq.data + (p.bq.data if p.bq is not None else 0.0)
    k = toks @ p.wk.data + (p.bk.data if p.bk is not None else 0.0)
    v = toks @ p.wv.data + (p.bv.data if p.bv is not None else 0.0)
    scale = 1.0 / math.sqrt(d) if scale_logits else 1.0
    out = np.zeros_like(q)
    for i in range(q.shape[0]):
        logits = np.array([scale * float(q[i] @ k[j]) for j in range(k.shape[0])])
        e = np.exp(logits - logits.max())
        a = e / e.sum()
        out[i] = sum(a[j] * v[j] for j in range(v.shape[0]))
    out = out @ p.wo.data + (p.bo.data if p.bo is not None else 0.0)
    return out.T.reshape(1, d, h, w)


class TestWindowSelfAttention:
    def test_uniform_attention_is_window_mean(self, rng):
        d = 4
        z = Tensor(np.zeros((d, d)))
        eye = Tensor(np.eye(d))
        p = AttnParams(wq=z, wk=z, wv=eye, wo=eye)
        x = rand_tensor(rng, (1, d, 8, 8))
        out = window_self_attention(x, p, 4, pe_mode="none")
        for wi in range(2):
            for wj in range(2):
                blk = x.data[0][:, wi * 4 : wi * 4 + 4, wj * 4 : wj * 4 + 4]
                got = out.data[0][:, wi * 4 : wi * 4 + 4, wj * 4 : wj * 4 + 4]
                np.testing.assert_allclose(got, np.broadcast_to(blk.mean(axis=(1, 2))[:, None, None], got.shape), atol=1e-9)

    def test_single_window_matches_global_oracle(self, rng):
        d = 6
        p = make_params(rng, d, pe="none")
        x = rand_tensor(rng, (1, d, 8, 8))
        out = window_self_attention(x, p, 8, pe_mode="none")
        ref = global_attention_oracle(x.data, p)
        assert np.abs(out.data - ref).max() / np.abs(ref).max() < 1e-6

    def test_window_locality_under_permutation(self, rng):
        # swapping two windows of the input swaps the corresponding outputs
        d = 4
        p = make_params(rng, d)
        x = rand_tensor(rng, (1, d, 4, 8))
        out = window_self_attention(x, p, 4).data
        swapped = x.data.copy()
        swapped[:, :, :, :4], swapped[:, :, :, 4:] = x.data[:, :, :, 4:], x.data[:, :, :, :4]
        out_swapped = window_self_attention(Tensor(swapped), p, 4).data
        np.testing.assert_array_equal(out_swapped[:, :, :, :4], out[:, :, :, 4:])
        np.testing.assert_array_equal(out_swapped[:, :, :, 4:], out[:, :, :, :4])

    def test_divisibility_error(self, rng):
        with pytest.raises(ShapeError):
            window_self_attention(rand_tensor(rng, (1, 4, 6, 6)), make_params(rng, 4), 4)

    def test_rpe_bias_changes_output(self, rng):
        d = 4
        p_rpe = make_params(rng, d, pe="rpe")
        p_none = AttnParams(wq=p_rpe.wq, wk=p_rpe.wk, wv=p_rpe.wv, wo=p_rpe.wo,
                            bq=p_rpe.bq, bk=p_rpe.bk, bv=p_rpe.bv, bo=p_rpe.bo)
        x = rand_tensor(rng, (1, d, 4, 4))
        a = window_self_attention(x, p_rpe, 4, pe_mode="rpe")
        b = window_self_attention(x, p_none, 4, pe_mode="none")
        assert np.abs(a.data - b.data).max() > 0

    def test_missing_pe_params(self, rng):
        p = AttnParams(wq=rand_tensor(rng, (4, 4)), wk=rand_tensor(rng, (4, 4)),
                       wv=rand_tensor(rng, (4, 4)), wo=rand_tensor(rng, (4, 4)))
        with pytest.raises(ConfigError):
            window_self_attention(rand_tensor(rng, (1, 4, 4, 4)), p, 4, pe_mode="lepe")

    @pytest.mark.parametrize("pe", ["none", "lepe", "rpe"])
    def test_grad(self, rng, pe):
        d = 4
        p = make_params(rng, d, pe=pe)
        wgt = rand_tensor(rng, (1, d, 4, 4))

        def f(t):
            return sum_all(mul(window_self_attention(t, p, 4, pe_mode=pe), wgt))

        report = fd_gradcheck(f, rand_tensor(rng, (1, d, 4, 4)), eps=1e-5, tol=1e-4)
        assert report.passed, f"{pe}: {report}"


def _cascade(rng, cfg_kwargs, x, heads_out=False, weight_scale=0.5):
    """Build a random cascade and run it."""
    from lmlt.model import ModelConfig

    cfg = ModelConfig(**cfg_kwargs)
    plan = cfg.head_plan()
    d = cfg.per_head_ch
    params = [
        [make_params(rng, d, pe=cfg.pe_mode, window=cfg.window, scale=weight_scale) for _ in range(cfg.depth)]
        for _ in range(cfg.heads)
    ]
    merge_w = rand_tensor(rng, (cfg.channels, cfg.channels, 1, 1), -weight_scale, weight_scale)
    merge_b = rand_tensor(rng, (cfg.channels,), -weight_scale, weight_scale)
    out = lmlt_forward(
        x, plan, params,
        merge_w if cfg.aggregation else None,
        merge_b if cfg.aggregation else None,
        cfg.ablation_flags(), cfg.window,
        return_head_outputs=heads_out,
    )
    return out, params


class TestCascade:
    BASE = dict(channels=8, blocks=1, heads=2, window=4, scale=2)

    def test_degenerate_equals_wsa(self, rng):
        kw = dict(channels=8, blocks=1, heads=1, window=4, scale=2,
                  pooling=False, aggregation=False, gelu=False, modulate=False)
        x = rand_tensor(rng, (1, 8, 8, 8))
        state = Rng(500)
        out, params = _cascade(state, kw, x)
        ref = window_self_attention(x, params[0][0], 4, pe_mode="lepe")
        np.testing.assert_array_equal(out.data, ref.data)

    def test_low_to_high_changes_output(self):
        x = rand_tensor(Rng(7), (1, 8, 16, 16))
        on, _ = _cascade(Rng(21), self.BASE, x)
        off, _ = _cascade(Rng(21), dict(self.BASE, low_to_high=False), x)
        assert np.abs(on.data - off.data).max() > 0

    def test_constant_input_stays_constant(self):
        d = 4
        z = Tensor(np.zeros((d, d)))
        eye = Tensor(np.eye(d))
        params = [[AttnParams(wq=z, wk=z, wv=eye, wo=eye)] for _ in range(2)]
        merge = Tensor(np.eye(8).reshape(8, 8, 1, 1))
        x = Tensor(np.ones((1, 8, 16, 16)) * np.arange(1, 9)[None, :, None, None])
        plan = HeadPlan.from_config(8, 2)
        flags = AblationFlags(gelu=False, modulate=False, pe_mode="none")
        out = lmlt_forward(x, plan, params, merge, None, flags, 4)
        spread = out.data.max(axis=(2, 3)) - out.data.min(axis=(2, 3))
        assert np.abs(spread).max() < 1e-6

    def test_window_independence_when_disabled(self):
        # no pooling, no low-to-high: a perturbation never leaves its window
        kw = dict(self.BASE, pooling=False, low_to_high=False)
        base = rand_tensor(Rng(31), (1, 8, 16, 16))
        pert = base.data.copy()
        pert[0, :, 1, 2] += 0.25
        y0, _ = _cascade(Rng(77), kw, base)
        y1, _ = _cascade(Rng(77), kw, Tensor(pert, dtype=np.float64))
        diff = np.abs(y1.data - y0.data)[0]
        outside = diff.copy()
        outside[:, 0:4, 0:4] = 0.0
        assert outside.max() == 0.0
        assert diff[:, 0:4, 0:4].max() > 0.0

    def test_cross_window_flow_when_enabled(self):
        # perturb a bottom-head channel: the top head output moves in other windows
        base = rand_tensor(Rng(31), (1, 8, 16, 16))
        pert = base.data.copy()
        pert[0, 5, 0, 0] += 0.25  # channel 5 belongs to the pooled bottom head
        (_, heads0), _ = _cascade(Rng(77), self.BASE, base, heads_out=True)
        (_, heads1), _ = _cascade(Rng(77), self.BASE, Tensor(pert, dtype=np.float64), heads_out=True)
        top_diff = np.abs(heads1[0].data - heads0[0].data)[0]
        outside = top_diff.copy()
        outside[:, 0:4, 0:4] = 0.0
        assert outside.max() > 0.0

    def test_misaligned_input(self):
        with pytest.raises(ShapeError):
            _cascade(Rng(3), self.BASE, rand_tensor(Rng(4), (1, 8, 12, 12)))

    def test_depth_layers_independent(self):
        x = rand_tensor(Rng(8), (1, 8, 16, 16))
        d2, _ = _cascade(Rng(9), dict(self.BASE, depth=2), x)
        d1, _ = _cascade(Rng(9), self.BASE, x)
        assert np.abs(d2.data - d1.data).max() > 0

    def test_grad_through_cascade(self):
        kw = dict(self.BASE, channels=4, heads=2, window=2)
        wgt = rand_tensor(Rng(87), (1, 4, 8, 8))

        def f(t):
            out, _ = _cascade(Rng(55), kw, t)
            return sum_all(mul(out, wgt))

        report = fd_gradcheck(f, rand_tensor(Rng(88), (1, 4, 8, 8)), eps=1e-5, tol=1e-4)
        assert report.passed, str(report)


class TestCostForms:
    def test_head_formula_reference_point(self):
        assert flops_lmlt_head(64, 64, 36, 4, 8, 0) == 6_045_696
        assert flops_lmlt_head(64, 64, 36, 4, 8, 1) == 6_045_696 // 4

    def test_single_head_equals_wsa(self):
        assert flops_lmlt_head(64, 64, 36, 1, 8, 0) == flops_wsa(64, 64, 36, 8)

    def test_wsa_reference_point(self):
        assert flops_wsa(64, 64, 36, 8) == 21_233_664 + 18_874_368

    def test_wsa_zero_channels(self):
        assert flops_wsa(64, 64, 0, 8) == 0

    def test_padded_when_indivisible(self):
        # 60x60 at level 1 pads to 64x64 before the exact division
        padded = flops_lmlt_head(60, 60, 36, 4, 8, 1)
        exact = flops_lmlt_head(64, 64, 36, 4, 8, 1)
        assert padded == exact

    def test_dominance_grid(self):
        for hw in (32, 64):
            for d in (16, 36, 60):
                for heads in (2, 3, 4):
                    if d % heads:
                        continue
                    total = sum(flops_lmlt_head(hw, hw, d, heads, 8, i) for i in range(heads))
                    assert total < flops_wsa(hw, hw, d, 8)

    def test_monotone_in_heads(self):
        totals = []
        for heads in (1, 2, 3, 4, 6):
            totals.append(sum(flops_lmlt_head(64, 64, 36, heads, 8, i) for i in range(heads)))
        assert all(a > b for a, b in zip(totals, totals[1:]))

    def test_indivisible_heads_error(self):
        with pytest.raises(ConfigError):
            flops_lmlt_head(64, 64, 16, 3, 8, 0)
