"""Invariant suite behind the `selftest` command.

Each invariant is a short self-contained check returning (ok, detail);
`run_selftest` prints one verdict line per invariant.  The `fault`
argument forces the named invariant to report failure (negative-control
test hook).
"""

from __future__ import annotations

import math

import numpy as np

from . import analysis, train
from .attention import flops_lmlt_head, flops_wsa
from .image import PlanarImage, bicubic_weights, psnr_y, ssim_y
from .model import ModelConfig, init_weights, model_forward, preset
from .ops import pad_to_grid, crop, pool_half, upsample2x, pixel_shuffle, pixel_unshuffle, window_partition, window_reverse
from .rng import Rng
from .tensor import Tensor, matmul, no_grad, softmax_rows


def _rng_determinism():
    a, b = Rng(123), Rng(123)
    same = np.array_equal(a.uniforms(1_000_000), b.uniforms(1_000_000))
    return same, "two equal-seed streams agree on 1e6 draws"


def _rng_scalar_vector():
    r1, r2 = Rng(9), Rng(9)
    vec = r1.uniforms(257)
    sca = np.array([r2.next_f64() for _ in range(257)])
    return np.array_equal(vec, sca), "vectorized stream equals scalar stream"


def _softmax_rows_sum():
    rng = Rng(2)
    for scale in (1.0, 0.125):
        a = Tensor(rng.uniforms(40 * 17, -1e3, 1e3).reshape(40, 17))
        s = softmax_rows(a, scale)
        if not np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-6):
            return False, "a softmax row failed to sum to 1"
        if not np.isfinite(s.data).all():
            return False, "softmax emitted a non-finite value"
    return True, "rows sum to 1 within 1e-6 for |a| <= 1e3"


def _matmul_oracle():
    rng = Rng(4)
    a = Tensor(rng.uniforms(13 * 16, -1, 1).reshape(13, 16), dtype=np.float64)
    b = Tensor(rng.uniforms(16 * 9, -1, 1).reshape(16, 9), dtype=np.float64)
    got = matmul(a, b).data
    ref = np.zeros((13, 9))
    for i in range(13):
        for j in range(9):
            acc = 0.0
            for k in range(16):
                acc += a.data[i, k] * b.data[k, j]
            ref[i, j] = acc
    err = np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-30)
    return err < 1e-10, f"triple-loop oracle rel err {err:.2e}"


def _roundtrips():
    rng = Rng(5)
    x = Tensor(rng.uniforms(2 * 8 * 12 * 20).reshape(2, 8, 12, 20))
    back = window_reverse(window_partition(x, 4), 4, 12, 20)
    if not np.array_equal(back.data, x.data):
        return False, "window partition/reverse roundtrip broke"
    y = Tensor(rng.uniforms(1 * 16 * 5 * 7).reshape(1, 16, 5, 7))
    if not np.array_equal(pixel_unshuffle(pixel_shuffle(y, 2), 2).data, y.data):
        return False, "pixel shuffle/unshuffle roundtrip broke"
    for size in (1, 3, 17, 64, 65):
        z = Tensor(rng.uniforms(3 * size * size).reshape(1, 3, size, size))
        padded, grid = pad_to_grid(z, 8, 3)
        if not np.array_equal(crop(padded, size, size).data, z.data):
            return False, f"pad/crop roundtrip broke at size {size}"
    return True, "window, shuffle and pad/crop roundtrips exact"


def _constant_preservation():
    x = Tensor(np.full((1, 2, 8, 8), 0.7, dtype=np.float32))
    p = pool_half(x, "avg")
    u = upsample2x(p, "nearest")
    ok = np.allclose(p.data, 0.7) and np.array_equal(u.data, x.data)
    return ok, "avg-pool then nearest-upsample preserves constants"


def _eq_dominance():
    for h in (64, 32):
        for d in (16, 36, 60):
            for heads in (2, 3, 4):
                if d % heads:
                    continue
                total = sum(flops_lmlt_head(h, h, d, heads, 8, i) for i in range(heads))
                if total >= flops_wsa(h, h, d, 8):
                    return False, f"cascade cost not below WSA at D={d} H={heads}"
    one = flops_lmlt_head(64, 64, 36, 1, 8, 0)
    if one != flops_wsa(64, 64, 36, 8):
        return False, "single-head cascade does not equal WSA"
    return True, "cascade MACs < WSA for H >= 2, equal at H = 1"


def _param_closure():
    for name in ("tiny", "base"):
        cfg = preset(name, 2)
        if analysis.param_count(cfg) != init_weights(cfg, 0).total_params():
            return False, f"analytic and materialized params differ for {name}"
    return True, "analytic parameter count equals materialized weights"


def _flops_instrumented():
    cfg = ModelConfig(channels=8, blocks=1, heads=2, window=4, scale=2)
    rep = analysis.verify_flops(cfg, (16, 16))
    return abs(rep.total_delta) <= 0.01, f"analytic vs measured MACs delta {rep.total_delta:.2%}"


def _residual_identity():
    cfg = ModelConfig(channels=8, blocks=1, heads=2, window=4, scale=2, modulate=False, gelu=False)
    store = init_weights(cfg, 0)
    for name, t in store.items():
        if "ln" not in name:
            t.data[...] = 0.0
    rng = Rng(6)
    x = Tensor(rng.uniforms(3 * 16 * 16).reshape(1, 3, 16, 16).astype(np.float32))
    from .model import lhs_block_forward
    from .ops import conv2d, ConvSpec

    with no_grad():
        feat = conv2d(x, store["head_conv.weight"], store["head_conv.bias"], ConvSpec(3, 8, 3))
        out = lhs_block_forward(feat, store, cfg, 0)
    same = np.array_equal(out.data, feat.data)
    return same, "zero-weight block is the exact identity"


def _forward_determinism():
    cfg = ModelConfig(channels=8, blocks=1, heads=2, window=4, scale=2)
    store = init_weights(cfg, 1)
    rng = Rng(7)
    x = Tensor(rng.uniforms(2 * 3 * 16 * 16).reshape(2, 3, 16, 16).astype(np.float32))
    with no_grad():
        serial = model_forward(x, store, cfg, parallel=False)
        threaded = model_forward(x, store, cfg, parallel=True)
        again = model_forward(x, store, cfg, parallel=False)
    ok = np.array_equal(serial.data, threaded.data) and np.array_equal(serial.data, again.data)
    return ok, "serial, parallel and repeated forwards bit-identical"


def _metric_cases():
    gray = np.full((16, 16, 1), 100, dtype=np.uint8)
    a = PlanarImage.from_array(gray)
    b = PlanarImage.from_array(gray + 1)
    p = psnr_y(a, b)
    if abs(p - 20 * math.log10(255)) > 1e-3:
        return False, f"uniform-error PSNR {p:.4f} != 48.1308"
    if psnr_y(a, a) != math.inf:
        return False, "identical-image PSNR not +inf"
    rng = Rng(8)
    img = PlanarImage.from_array((rng.uniforms(32 * 32) * 255).astype(np.uint8).reshape(32, 32, 1))
    if ssim_y(img, img) != 1.0:
        return False, "SSIM of an image with itself is not exactly 1"
    phases = np.linspace(0, 1, 11, endpoint=False)
    for ph in phases:
        w = bicubic_weights(ph - np.arange(-1, 3))
        if abs(w.sum() - 1.0) > 1e-9:
            return False, f"bicubic weights at phase {ph} sum to {w.sum()}"
    return True, "PSNR/SSIM closed forms and bicubic partition of unity hold"


def _gradcheck_smoke():
    rep = train.gradcheck_model(max_params_per_tensor=2)
    return rep.max_rel_err < 1e-3, f"sampled FD gradcheck max rel err {rep.max_rel_err:.2e}"


INVARIANTS = [
    ("rng-determinism", _rng_determinism),
    ("rng-scalar-vector", _rng_scalar_vector),
    ("softmax-row-sums", _softmax_rows_sum),
    ("matmul-oracle", _matmul_oracle),
    ("roundtrips", _roundtrips),
    ("constant-preservation", _constant_preservation),
    ("cost-dominance", _eq_dominance),
    ("param-closure", _param_closure),
    ("flops-instrumented", _flops_instrumented),
    ("residual-identity", _residual_identity),
    ("forward-determinism", _forward_determinism),
    ("metric-cases", _metric_cases),
    ("gradcheck-smoke", _gradcheck_smoke),
]


def run_selftest(fault: str | None = None) -> bool:
    """Run every invariant; returns True iff all pass."""
    all_ok = True
    for name, fn in INVARIANTS:
        try:
            ok, detail = fn()
        except Exception as exc:  # an invariant crashing is a failure
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        if fault == name:
            ok, detail = False, "fault injected (test hook)"
        all_ok &= ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    print(f"selftest: {'PASS' if all_ok else 'FAIL'}")
    return all_ok
