"""Command-line surface: upscale, count, gradcheck, bench, train-toy, selftest.

Every command echoes its effective configuration as `config key=value`
lines; feeding those pairs back through a config file reproduces
byte-identical outputs.  Exit codes: 0 success, 1 assertion/usage
failure, 2 numeric divergence, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from fractions import Fraction

import numpy as np

from . import analysis, train
from .errors import ConfigError, EngineError, ImageFormatError, TrainingError, WeightFormatError
from .image import PlanarImage, bicubic_resize, png_load, png_save, psnr_y, ssim_y
from .model import ModelConfig, init_weights, load_weights, model_forward, preset, save_weights
from .rng import Rng
from .tensor import Tensor, no_grad

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_DIVERGED = 2
EXIT_IO = 3

_CONFIG_KEYS = (
    "channels", "blocks", "heads", "window", "growth", "scale", "depth", "pe_mode",
    "low_to_high", "pooling", "aggregation", "gelu", "modulate", "long_skip",
    "attn_bias", "scale_logits", "pool_mode", "upsample_mode",
)
_BOOL_KEYS = {
    "low_to_high", "pooling", "aggregation", "gelu", "modulate", "long_skip",
    "attn_bias", "scale_logits",
}
_INT_KEYS = {"channels", "blocks", "heads", "window", "growth", "scale", "depth", "seed", "steps"}
# accepted alias: "merge" mirrors the aggregation flag
_ALIASES = {"merge": "aggregation", "pe": "pe_mode"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_value(key: str, raw: str):
    if key in _BOOL_KEYS:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise _UsageError(f"bad boolean for {key}: {raw!r}")
    if key in _INT_KEYS:
        return int(raw)
    if key in ("lr",):
        return float(raw)
    return raw.strip()


def read_config_file(path) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise _UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, raw = line.partition("=")
                key = key.strip()
                key = _ALIASES.get(key, key)
                values[key] = _parse_value(key, raw)
    except OSError as exc:
        raise _UsageError(f"cannot read config file {path}: {exc}") from exc
    return values


def build_config(args, file_values: dict | None = None) -> tuple[ModelConfig, dict]:
    """Merge preset < config file < explicit flags into a ModelConfig."""
    values: dict = {}
    preset_name = getattr(args, "preset", None)
    if preset_name:
        values.update(preset(preset_name).__dict__)
    if file_values:
        values.update({k: v for k, v in file_values.items() if k in _CONFIG_KEYS})
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    # ablation toggle flags (store_true style: only override when set)
    for flag, key, val in (
        ("no_pool", "pooling", False),
        ("no_sum", "low_to_high", False),
        ("no_aggregation", "aggregation", False),
        ("no_gelu", "gelu", False),
        ("no_modulate", "modulate", False),
        ("no_long_skip", "long_skip", False),
    ):
        if getattr(args, flag, False):
            values[key] = val
    cfg = ModelConfig(**{k: v for k, v in values.items() if k in _CONFIG_KEYS})
    extras = {}
    if file_values:
        extras = {k: v for k, v in file_values.items() if k not in _CONFIG_KEYS}
    return cfg, extras


def echo_config(cfg: ModelConfig, extra: dict | None = None, out=sys.stdout) -> None:
    pairs = {k: getattr(cfg, k) for k in _CONFIG_KEYS}
    if extra:
        pairs.update(extra)
    for key in sorted(pairs):
        val = pairs[key]
        if isinstance(val, bool):
            val = "true" if val else "false"
        print(f"config {key}={val}", file=out)


# ---------------------------------------------------------------------------
# Commands


def cmd_upscale(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    cfg, _ = build_config(args, file_values)
    try:
        store = load_weights(args.weights)
    except OSError as exc:
        print(f"error: cannot read weights: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        from .model import check_weights

        check_weights(store, cfg)
    except ConfigError as exc:
        print(f"error: weights do not match the requested config/scale: {exc}", file=sys.stderr)
        return EXIT_FAIL
    try:
        img = png_load(args.infile)
    except ImageFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if img.channels != 3:
        print("error: upscale needs an RGB input image", file=sys.stderr)
        return EXIT_FAIL
    echo_config(cfg, {"seed": args.seed})
    x = img.to_tensor()
    t0 = time.perf_counter()
    with no_grad():
        y = model_forward(x, store, cfg)
    elapsed = time.perf_counter() - t0
    out_img = PlanarImage.from_tensor(y)
    try:
        png_save(out_img, args.outfile)
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"upscaled {img.width}x{img.height} -> {out_img.width}x{out_img.height} in {elapsed:.3f}s")
    if args.ref:
        try:
            ref = png_load(args.ref)
        except ImageFormatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        p = psnr_y(out_img, ref, shave=cfg.scale)
        s = ssim_y(out_img, ref, shave=cfg.scale)
        print(f"psnr_y {'inf' if p == float('inf') else f'{p:.4f}'} dB  ssim_y {s:.6f}")
    return EXIT_OK


def cmd_count(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    cfg, _ = build_config(args, file_values)
    echo_config(cfg)
    report = analysis.cost_report(cfg)
    print(f"params {report.total_params}")
    print(f"flops {report.total_macs}  ({report.total_macs / 1e9:.2f}G MACs at {analysis.FLOPS_OUT_RES[0]}x{analysis.FLOPS_OUT_RES[1]} output)")
    print(f"acts {report.total_acts}  ({report.total_acts / 1e6:.1f}M elements)")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    if not file_values and not getattr(args, "preset", None) and args.channels is None:
        cfg = ModelConfig(channels=8, blocks=1, heads=2, window=4, scale=2)
    else:
        cfg, _ = build_config(args, file_values)
    echo_config(cfg, {"size": args.size, "seed": args.seed})
    report = train.gradcheck_model(cfg, size=args.size, seed=args.seed, corrupt=args.corrupt_grad)
    print(f"gradcheck max rel err {report.max_rel_err:.3e} (worst {report.worst})")
    if report.max_rel_err < 1e-3:
        print("gradcheck: PASS")
        return EXIT_OK
    print(f"gradcheck: FAIL worst parameter {report.worst}", file=sys.stderr)
    return EXIT_FAIL


def cmd_bench(args) -> int:
    heads = [int(h) for h in args.heads.split(",")]
    print(f"analytic window-attention comparison at {args.size}x{args.size}, D={args.channels}, M={args.window}")
    print("heads,lmlt_macs,wsa_macs,ratio")
    rows = analysis.compare_wsa_lmlt(args.size, args.size, args.channels, args.window, heads)
    for r in rows:
        print(f"{r.heads},{r.lmlt_macs},{r.wsa_macs},{r.ratio:.4f}")

    # measured wall clock: cascade vs stacking the same attention serially
    from .attention import window_self_attention
    from .model import _attn_params

    cfg = ModelConfig(
        channels=args.channels, blocks=1, heads=max(heads), window=args.window, scale=2
    )
    store = init_weights(cfg, seed=0)
    rng = Rng(1)
    x = Tensor(rng.uniforms(args.size * args.size * 3).reshape(1, 3, args.size, args.size).astype(np.float32))

    def timed(fn):
        samples = []
        for _ in range(5):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        return sorted(samples)[2]  # median of 5 warm runs

    with no_grad():
        cascade_t = timed(lambda: model_forward(x, store, cfg))
        full_params = _attn_params(init_weights(
            ModelConfig(channels=args.channels, blocks=1, heads=1, window=args.window, scale=2),
            0), "block0.lmlt.head0.layer0", cfg)
        feat = Tensor(rng.uniforms(args.channels * args.size * args.size).reshape(
            1, args.channels, args.size, args.size).astype(np.float32))

        def serial_wsa():
            f = feat
            for _ in range(max(heads)):
                f = window_self_attention(f, full_params, args.window, "lepe")
            return f

        wsa_t = timed(serial_wsa)
    print(f"measured median-of-5: cascade-block {cascade_t * 1e3:.1f} ms, serial-wsa {wsa_t * 1e3:.1f} ms "
          f"(informational; hardware-dependent)")
    return EXIT_OK


def _synthetic_patch(seed: int, size: int = 32) -> PlanarImage:
    """Deterministic smooth RGB patch: low-res noise upsampled by bicubic."""
    rng = Rng(seed)
    small = (rng.uniforms(size // 4 * size // 4 * 3) * 255).astype(np.uint8)
    img = PlanarImage.from_array(small.reshape(size // 4, size // 4, 3))
    return bicubic_resize(img, 4)


def cmd_train_toy(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    if not file_values and not getattr(args, "preset", None) and args.channels is None:
        cfg = ModelConfig(channels=16, blocks=2, heads=2, window=4, scale=2)
    else:
        cfg, _ = build_config(args, file_values)
    echo_config(cfg, {"seed": args.seed, "steps": args.steps, "lr": args.lr})
    if args.patch:
        try:
            hr = png_load(args.patch)
        except ImageFormatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
    else:
        hr = _synthetic_patch(args.seed)
    lr_img = bicubic_resize(hr, Fraction(1, cfg.scale))
    data = [(lr_img.to_tensor(), hr.to_tensor())]
    try:
        store, losses = train.train_toy(cfg, data, steps=args.steps, lr=args.lr, seed=args.seed)
    except TrainingError as exc:
        print(f"error: training diverged at step {exc.step}", file=sys.stderr)
        return EXIT_DIVERGED
    save_weights(store, args.out_weights)
    csv_path = args.loss_csv or (str(args.out_weights) + ".loss.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("step,lr,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{train.cosine_lr(i, args.steps, args.lr):.9e},{loss:.9e}\n")
    print(f"wrote {args.out_weights} and {csv_path}")
    if not losses:
        print("no training steps run")
        return EXIT_OK
    final = train.smoothed(losses)
    print(f"loss start {losses[0]:.6f}  smoothed end {final:.6f}")
    if final < 0.1 * losses[0]:
        print("train-toy: PASS (>=90% loss reduction)")
        return EXIT_OK
    print("train-toy: FAIL (loss reduction below 90%)", file=sys.stderr)
    return EXIT_FAIL


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(fault=args.inject_fault)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------


def _add_config_flags(p: _Parser, with_preset=True):
    if with_preset:
        p.add_argument("--preset", choices=("tiny", "small", "base", "large"))
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--growth", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--pe", dest="pe_mode", choices=("lepe", "rpe", "none"), default=None)
    p.add_argument("--no-pool", dest="no_pool", action="store_true")
    p.add_argument("--no-sum", dest="no_sum", action="store_true")
    p.add_argument("--no-aggregation", dest="no_aggregation", action="store_true")
    p.add_argument("--no-gelu", dest="no_gelu", action="store_true")
    p.add_argument("--no-modulate", dest="no_modulate", action="store_true")
    p.add_argument("--no-long-skip", dest="no_long_skip", action="store_true")


def make_parser() -> _Parser:
    parser = _Parser(prog="lmlt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("upscale", help="upscale a PNG with trained weights")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--ref", help="reference PNG for PSNR/SSIM")
    p.add_argument("--seed", type=int, default=0)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_upscale)

    p = sub.add_parser("count", help="print params / FLOPs / acts for a config")
    p.add_argument("--csv", help="write the per-layer cost table as CSV")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-grad", dest="corrupt_grad", action="store_true",
                   help="test hook: deliberately corrupt one gradient")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="analytic and measured attention cost comparison")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--channels", type=int, default=36)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--heads", default="1,2,3,4", help="comma list of head counts")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("train-toy", help="overfit one patch with Adam + cosine lr")
    p.add_argument("--patch", help="HR patch PNG; synthetic when omitted")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-weights", dest="out_weights", required=True)
    p.add_argument("--loss-csv", dest="loss_csv")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("selftest", help="run every module's invariant suite")
    p.add_argument("--inject-fault", dest="inject_fault",
                   help="test hook: force the named invariant to fail")
    p.set_defaults(fn=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except TrainingError as exc:
        print(f"error: diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ImageFormatError, WeightFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
