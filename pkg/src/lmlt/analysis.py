"""Analytic cost accounting: parameters, MACs, activation elements.

MAC totals follow the 1-MAC-per-multiply-accumulate convention behind
the preset family's published "FLOPs" figures: convolutions contribute
k^2 * Cin/groups * Cout * H * W, attention contributes the per-head
closed form, and elementwise ops, normalization, softmax and pooling are
excluded.  Activation counts cover outputs of convolutions, token
projections, and attention probability maps.  All spatial terms are
evaluated on the input padded to the model's grid alignment, matching
what the engine actually executes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import instrument
from .attention import flops_lmlt_head, flops_wsa
from .errors import ConfigError, VerificationError
from .model import ModelConfig, model_forward
from .tensor import Tensor, no_grad

FLOPS_OUT_RES = (1280, 720)


@dataclass(frozen=True)
class CostRow:
    name: str
    params: int
    macs: int
    acts: int


@dataclass
class CostReport:
    rows: list[CostRow]
    resolution: tuple[int, int]  # padded (h, w) the MAC/act terms use
    config: dict

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_acts(self) -> int:
        return sum(r.acts for r in self.rows)

    def to_csv(self) -> str:
        lines = ["layer,params,macs,acts"]
        for r in self.rows:
            lines.append(f"{r.name},{r.params},{r.macs},{r.acts}")
        lines.append(f"total,{self.total_params},{self.total_macs},{self.total_acts}")
        return "\n".join(lines) + "\n"


def _pad_up(v: int, m: int) -> int:
    return -(-v // m) * m


def layer_table(cfg: ModelConfig, in_res: tuple[int, int]) -> CostReport:
    """Per-layer closed-form costs at the given input resolution."""
    h, w = in_res
    align = cfg.alignment
    hp, wp = _pad_up(h, align), _pad_up(w, align)
    hw = hp * wp
    ch = cfg.channels
    d = cfg.per_head_ch
    g = cfg.growth
    m = cfg.window
    plan = cfg.head_plan()
    rows: list[CostRow] = []

    rows.append(CostRow("head_conv", 3 * ch * 9 + ch, 3 * ch * 9 * hw, ch * hw))
    for b in range(cfg.blocks):
        pre = f"block{b}"
        rows.append(CostRow(f"{pre}.ln1", 2 * ch, 0, 0))
        for head in range(cfg.heads):
            level = plan.pool_levels[head]
            hw_i = hw >> (2 * level)
            for layer in range(cfg.depth):
                hp_name = f"{pre}.lmlt.head{head}.layer{layer}"
                attn_params = 4 * d * d + (4 * d if cfg.attn_bias else 0)
                attn_macs = flops_lmlt_head(hp, wp, ch, cfg.heads, m, level)
                attn_acts = (4 * d + m * m) * hw_i
                rows.append(CostRow(f"{hp_name}.attn", attn_params, attn_macs, attn_acts))
                if cfg.pe_mode == "lepe":
                    rows.append(CostRow(f"{hp_name}.lepe", d * 9 + d, 9 * d * hw_i, d * hw_i))
                elif cfg.pe_mode == "rpe":
                    rows.append(CostRow(f"{hp_name}.rpe", (2 * m - 1) ** 2, 0, 0))
        if cfg.aggregation:
            rows.append(CostRow(f"{pre}.lmlt.merge", ch * ch + ch, ch * ch * hw, ch * hw))
        rows.append(CostRow(f"{pre}.ln2", 2 * ch, 0, 0))
        rows.append(CostRow(f"{pre}.ccm.conv1", ch * g * ch * 9 + g * ch, ch * g * ch * 9 * hw, g * ch * hw))
        rows.append(CostRow(f"{pre}.ccm.conv2", g * ch * ch + ch, g * ch * ch * hw, ch * hw))
    out_ch = 3 * cfg.scale * cfg.scale
    rows.append(CostRow("tail_conv", ch * out_ch * 9 + out_ch, ch * out_ch * 9 * hw, out_ch * hw))

    config_echo = {k: getattr(cfg, k) for k in (
        "channels", "blocks", "heads", "window", "growth", "scale", "depth",
        "pe_mode", "low_to_high", "pooling", "aggregation", "gelu", "modulate",
        "long_skip", "attn_bias",
    )}
    return CostReport(rows, (hp, wp), config_echo)


def flops_input_res(scale: int, out_res: tuple[int, int] = FLOPS_OUT_RES) -> tuple[int, int]:
    """Input resolution whose scale-x output covers out_res (ceil per axis)."""
    ow, oh = out_res
    return (-(-oh // scale), -(-ow // scale))


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter total implied by the config."""
    return layer_table(cfg, (64, 64)).total_params


def flops_model(cfg: ModelConfig, out_res: tuple[int, int] = FLOPS_OUT_RES) -> int:
    """MAC total for producing an out_res image at cfg.scale."""
    return layer_table(cfg, flops_input_res(cfg.scale, out_res)).total_macs


def acts_count(cfg: ModelConfig, out_res: tuple[int, int] = FLOPS_OUT_RES) -> int:
    """Activation-element total for producing an out_res image."""
    return layer_table(cfg, flops_input_res(cfg.scale, out_res)).total_acts


def cost_report(cfg: ModelConfig, out_res: tuple[int, int] = FLOPS_OUT_RES) -> CostReport:
    return layer_table(cfg, flops_input_res(cfg.scale, out_res))


# ---------------------------------------------------------------------------
# Instrumented cross-check


@dataclass
class VerifyRow:
    name: str
    analytic: int
    measured: int

    @property
    def delta(self) -> float:
        base = max(self.analytic, 1)
        return (self.measured - self.analytic) / base


@dataclass
class VerifyReport:
    rows: list[VerifyRow]
    total_analytic: int
    total_measured: int

    @property
    def total_delta(self) -> float:
        return (self.total_measured - self.total_analytic) / max(self.total_analytic, 1)


def verify_flops(cfg: ModelConfig, small_res: tuple[int, int] = (16, 16), tol: float = 0.01) -> VerifyReport:
    """Run an instrumented forward and compare against the analytic table.

    Raises VerificationError naming the first layer whose measured MACs
    deviate by more than `tol` relative, checked in table order.
    """
    h, w = small_res
    if h > 64 or w > 64:
        raise ConfigError("verify_flops is meant for resolutions up to 64x64")
    from .model import init_weights

    table = layer_table(cfg, small_res)
    store = init_weights(cfg, seed=0)
    x = Tensor(np.zeros((1, 3, h, w), dtype=np.float32))
    counter = instrument.MacCounter()
    with no_grad(), instrument.counting(counter):
        model_forward(x, store, cfg)

    rows = []
    for row in table.rows:
        if row.macs == 0:
            continue
        measured = counter.by_scope.get(row.name, 0)
        vr = VerifyRow(row.name, row.macs, measured)
        if abs(vr.delta) > tol:
            raise VerificationError(
                f"layer {row.name}: analytic {row.macs} vs measured {measured} MACs", row.name
            )
        rows.append(vr)
    report = VerifyReport(rows, table.total_macs, counter.total)
    if abs(report.total_delta) > tol:
        raise VerificationError(
            f"total MACs: analytic {table.total_macs} vs measured {counter.total}", "total"
        )
    return report


# ---------------------------------------------------------------------------
# Attention cost comparison


@dataclass(frozen=True)
class CompareRow:
    heads: int
    lmlt_macs: int
    wsa_macs: int

    @property
    def ratio(self) -> float:
        return self.lmlt_macs / self.wsa_macs


def compare_wsa_lmlt(h: int, w: int, channels: int, window: int, head_list) -> list[CompareRow]:
    """Per-head-count cascade MACs against the plain windowed-attention cost."""
    wsa = flops_wsa(h, w, channels, window)
    rows = []
    for heads in head_list:
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by {heads} heads")
        total = sum(flops_lmlt_head(h, w, channels, heads, window, i) for i in range(heads))
        rows.append(CompareRow(heads, total, wsa))
    return rows
