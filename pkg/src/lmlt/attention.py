"""Windowed self-attention and the low-to-high multi-level head cascade.

Channels are split into heads, head i is pooled i times, each head runs
window self-attention, and each head's output is upsampled and added
into the next head's input before that head attends (the low-to-high
connection).  Restored head outputs are concatenated, merged by a 1x1
convolution, passed through GELU, and multiplied with the module input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import instrument
from .errors import ConfigError, ShapeError
from .ops import ConvSpec, conv2d, gelu, pool_half, upsample2x, window_partition, window_reverse
from .tensor import (
    Tensor,
    add,
    bmm,
    concat_channels,
    matmul,
    mul,
    narrow_channels,
    reshape,
    scalar_mul,
    softmax_rows,
    take_rows,
    transpose,
)

PE_MODES = ("lepe", "rpe", "none")


@dataclass(frozen=True)
class HeadPlan:
    """Mapping from head index to channel slice and pooling level."""

    head_count: int
    per_head_ch: int
    pool_levels: tuple[int, ...]
    depth: int = 1

    def __post_init__(self):
        if self.depth not in (1, 2, 3):
            raise ConfigError(f"depth must be 1..3, got {self.depth}")
        if len(self.pool_levels) != self.head_count:
            raise ConfigError("pool_levels length must equal head_count")

    @classmethod
    def from_config(cls, channels: int, heads: int, depth: int = 1, pooling: bool = True) -> "HeadPlan":
        if heads < 1 or channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by {heads} heads")
        levels = tuple(range(heads)) if pooling else (0,) * heads
        return cls(heads, channels // heads, levels, depth)

    @property
    def max_level(self) -> int:
        return max(self.pool_levels)


@dataclass
class AttnParams:
    """Per-head projection weights and positional-encoding parameters."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor | None = None
    bk: Tensor | None = None
    bv: Tensor | None = None
    bo: Tensor | None = None
    lepe_w: Tensor | None = None
    lepe_b: Tensor | None = None
    rpe_table: Tensor | None = None


@dataclass
class AblationFlags:
    """Structural switches of the cascade; defaults are the full model."""

    low_to_high: bool = True
    pooling: bool = True
    aggregation: bool = True
    gelu: bool = True
    modulate: bool = True
    pe_mode: str = "lepe"
    scale_logits: bool = True
    pool_mode: str = "avg"
    upsample_mode: str = "nearest"

    def __post_init__(self):
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"pe_mode must be one of {PE_MODES}")


def relative_index_table(window: int) -> np.ndarray:
    """(T, T) index into a (2M-1)^2 bias table by relative token coordinates."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"), axis=-1)
    flat = coords.reshape(-1, 2)
    rel = flat[:, None, :] - flat[None, :, :]
    return (rel[..., 0] + window - 1) * (2 * window - 1) + (rel[..., 1] + window - 1)


def _project(tokens_2d: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = matmul(tokens_2d, w)
    if b is not None:
        y = add(y, reshape(b, (1, b.shape[0])))
    return y


def window_self_attention(
    x: Tensor,
    p: AttnParams,
    window: int,
    pe_mode: str = "lepe",
    scale_logits: bool = True,
) -> Tensor:
    """Self-attention inside non-overlapping windows of one head's feature."""
    if pe_mode not in PE_MODES:
        raise ConfigError(f"pe_mode must be one of {PE_MODES}")
    if pe_mode == "lepe" and p.lepe_w is None:
        raise ConfigError("lepe mode requires a lepe kernel")
    if pe_mode == "rpe" and p.rpe_table is None:
        raise ConfigError("rpe mode requires an rpe table")
    n, d, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"feature {h}x{w} not divisible by window {window}")
    t = window * window
    wins = window_partition(x, window)  # (B, T, d)
    nb = wins.shape[0]
    flat = reshape(wins, (nb * t, d))

    with instrument.scope("attn"):
        q = reshape(_project(flat, p.wq, p.bq), (nb, t, d))
        k = reshape(_project(flat, p.wk, p.bk), (nb, t, d))
        v2 = _project(flat, p.wv, p.bv)
        v = reshape(v2, (nb, t, d))
        logits = bmm(q, transpose(k, (0, 2, 1)))
        scale = 1.0 / math.sqrt(d) if scale_logits else 1.0
        if pe_mode == "rpe":
            bias = take_rows(p.rpe_table, relative_index_table(window))
            logits = add(scalar_mul(logits, scale), reshape(bias, (1, t, t)))
            attn = softmax_rows(logits, 1.0)
        else:
            attn = softmax_rows(logits, scale)
        out = bmm(attn, v)

    if pe_mode == "lepe":
        # Depthwise 3x3 over each window's own M x M layout of V, added to
        # the attention output before the final projection.
        with instrument.scope("lepe"):
            v_img = transpose(reshape(v, (nb, window, window, d)), (0, 3, 1, 2))
            spec = ConvSpec(d, d, 3, groups=d, bias=p.lepe_b is not None)
            lepe = conv2d(v_img, p.lepe_w, p.lepe_b, spec)
            lepe_tok = reshape(transpose(lepe, (0, 2, 3, 1)), (nb, t, d))
        out = add(out, lepe_tok)

    with instrument.scope("attn"):
        out = reshape(_project(reshape(out, (nb * t, d)), p.wo, p.bo), (nb, t, d))
    return window_reverse(out, window, h, w)


def lmlt_forward(
    x: Tensor,
    plan: HeadPlan,
    params: list[list[AttnParams]],
    merge_w: Tensor | None,
    merge_b: Tensor | None,
    flags: AblationFlags,
    window: int,
    return_head_outputs: bool = False,
):
    """Multi-level cascade over one block's feature (n, D, h, w)."""
    n, ch, h, w = x.shape
    hh = plan.head_count
    d = plan.per_head_ch
    if ch != hh * d:
        raise ConfigError(f"feature has {ch} channels, plan expects {hh * d}")
    align = window << plan.max_level
    if h % align or w % align:
        raise ShapeError(f"feature {h}x{w} not aligned to {align}")
    if len(params) != hh or any(len(layers) != plan.depth for layers in params):
        raise ConfigError("params must hold depth layers for each head")

    pooled = []
    for i in range(hh):
        f = narrow_channels(x, i * d, d)
        for _ in range(plan.pool_levels[i]):
            f = pool_half(f, flags.pool_mode)
        pooled.append(f)

    outs: list[Tensor | None] = [None] * hh
    carry: Tensor | None = None
    carry_level = 0
    for i in reversed(range(hh)):
        f = pooled[i]
        if carry is not None and flags.low_to_high:
            add_in = carry
            for _ in range(carry_level - plan.pool_levels[i]):
                add_in = upsample2x(add_in, flags.upsample_mode)
            f = add(f, add_in)
        for layer in range(plan.depth):
            with instrument.scope(f"head{i}.layer{layer}"):
                f = window_self_attention(f, params[i][layer], window, flags.pe_mode, flags.scale_logits)
        outs[i] = f
        carry = f
        carry_level = plan.pool_levels[i]

    restored = []
    for i in range(hh):
        r = outs[i]
        for _ in range(plan.pool_levels[i]):
            r = upsample2x(r, flags.upsample_mode)
        restored.append(r)

    y = restored[0] if hh == 1 else concat_channels(restored)
    if flags.aggregation:
        if merge_w is None:
            raise ConfigError("aggregation enabled but no merge weights given")
        with instrument.scope("merge"):
            y = conv2d(y, merge_w, merge_b, ConvSpec(ch, ch, 1, bias=merge_b is not None))
    if flags.gelu:
        y = gelu(y)
    if flags.modulate:
        y = mul(y, x)
    if return_head_outputs:
        return y, restored
    return y


# ---------------------------------------------------------------------------
# Analytic MAC counts


def _pad_up(v: int, m: int) -> int:
    return -(-v // m) * m


def flops_lmlt_head(h: int, w: int, channels: int, head: int, window: int, i: int) -> int:
    """MACs of one cascade head at pooling level i.

    4 * [hw/4^i * (D/head)^2] for the q/k/v/output projections plus
    2 * [M^2 * hw/4^i * (D/head)] for the two attention products.  When
    h*w does not divide 4^i the dims are first padded up to window*2^i.
    """
    if i < 0 or head < 1:
        raise ConfigError("head must be >= 1 and i >= 0")
    if channels % head:
        raise ConfigError(f"channels {channels} not divisible by {head} heads")
    m = window << i
    hp, wp = _pad_up(h, m), _pad_up(w, m)
    hw_i = (hp * wp) >> (2 * i)
    d = channels // head
    return 4 * hw_i * d * d + 2 * window * window * hw_i * d


def flops_wsa(h: int, w: int, channels: int, window: int) -> int:
    """MACs of plain window self-attention on the full feature."""
    return 4 * h * w * channels * channels + 2 * window * window * h * w * channels
