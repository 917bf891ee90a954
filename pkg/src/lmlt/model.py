"""Network assembly: configuration presets, weight store, blocks, forward.

The network is a 3x3 head convolution, a stack of blocks (each block is
LN -> multi-level attention -> residual, then LN -> convolutional
channel mixer -> residual), an optional long skip from the shallow
feature, and a 3x3 tail convolution followed by pixel shuffle.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import instrument
from .attention import AblationFlags, AttnParams, HeadPlan, lmlt_forward
from .errors import (
    BadMagicError,
    ConfigError,
    ManifestError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from .ops import ConvSpec, conv2d, crop, gelu, layer_norm, pad_to_grid, pixel_shuffle
from .rng import Rng
from .tensor import Tensor, add, concat_batch, narrow_batch

MAGIC = b"LMLTW001"
_ALIGN = 64


@dataclass(frozen=True)
class ModelConfig:
    """All architecture hyperparameters plus ablation flags."""

    channels: int = 36
    blocks: int = 8
    heads: int = 4
    window: int = 8
    growth: int = 2
    scale: int = 2
    depth: int = 1
    pe_mode: str = "lepe"
    low_to_high: bool = True
    pooling: bool = True
    aggregation: bool = True
    gelu: bool = True
    modulate: bool = True
    long_skip: bool = True
    attn_bias: bool = True
    scale_logits: bool = True
    pool_mode: str = "avg"
    upsample_mode: str = "nearest"

    def __post_init__(self):
        if self.channels < 1 or self.blocks < 1 or self.growth < 1:
            raise ConfigError("channels, blocks and growth must be >= 1")
        if self.heads < 1 or self.channels % self.heads != 0:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.depth not in (1, 2, 3):
            raise ConfigError(f"depth must be 1..3, got {self.depth}")
        if self.pe_mode not in ("lepe", "rpe", "none"):
            raise ConfigError(f"unknown pe_mode {self.pe_mode!r}")
        if self.pool_mode not in ("avg", "max"):
            raise ConfigError(f"unknown pool_mode {self.pool_mode!r}")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")

    @property
    def per_head_ch(self) -> int:
        return self.channels // self.heads

    @property
    def alignment(self) -> int:
        """Spatial multiple both input dims are padded to."""
        levels = self.heads if self.pooling else 1
        return self.window << (levels - 1)

    def head_plan(self) -> HeadPlan:
        return HeadPlan.from_config(self.channels, self.heads, self.depth, self.pooling)

    def ablation_flags(self) -> AblationFlags:
        return AblationFlags(
            low_to_high=self.low_to_high,
            pooling=self.pooling,
            aggregation=self.aggregation,
            gelu=self.gelu,
            modulate=self.modulate,
            pe_mode=self.pe_mode,
            scale_logits=self.scale_logits,
            pool_mode=self.pool_mode,
            upsample_mode=self.upsample_mode,
        )


PRESETS = {
    "tiny": dict(channels=36, blocks=8),
    "small": dict(channels=36, blocks=12),
    "base": dict(channels=60, blocks=8),
    "large": dict(channels=84, blocks=8),
}


def preset(name: str, scale: int = 2, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(scale=scale)
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# Parameter manifest


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "he" | "pe02" | "zero" | "one"


def parameter_shapes(cfg: ModelConfig) -> list[ParamSpec]:
    """Every parameter implied by the config, with its init family."""
    d = cfg.per_head_ch
    g = cfg.growth
    ch = cfg.channels
    specs: list[ParamSpec] = [
        ParamSpec("head_conv.weight", (ch, 3, 3, 3), "he"),
        ParamSpec("head_conv.bias", (ch,), "zero"),
    ]
    for b in range(cfg.blocks):
        pre = f"block{b}"
        specs += [
            ParamSpec(f"{pre}.ln1.gamma", (ch,), "one"),
            ParamSpec(f"{pre}.ln1.beta", (ch,), "zero"),
            ParamSpec(f"{pre}.ln2.gamma", (ch,), "one"),
            ParamSpec(f"{pre}.ln2.beta", (ch,), "zero"),
        ]
        for h in range(cfg.heads):
            for l in range(cfg.depth):
                hp = f"{pre}.lmlt.head{h}.layer{l}"
                for proj in ("wq", "wk", "wv", "wo"):
                    specs.append(ParamSpec(f"{hp}.{proj}", (d, d), "pe02"))
                if cfg.attn_bias:
                    for proj in ("bq", "bk", "bv", "bo"):
                        specs.append(ParamSpec(f"{hp}.{proj}", (d,), "zero"))
                if cfg.pe_mode == "lepe":
                    specs.append(ParamSpec(f"{hp}.lepe.weight", (d, 1, 3, 3), "pe02"))
                    specs.append(ParamSpec(f"{hp}.lepe.bias", (d,), "zero"))
                elif cfg.pe_mode == "rpe":
                    side = 2 * cfg.window - 1
                    specs.append(ParamSpec(f"{hp}.rpe", (side * side, 1), "pe02"))
        if cfg.aggregation:
            specs.append(ParamSpec(f"{pre}.lmlt.merge.weight", (ch, ch, 1, 1), "he"))
            specs.append(ParamSpec(f"{pre}.lmlt.merge.bias", (ch,), "zero"))
        specs += [
            ParamSpec(f"{pre}.ccm.conv1.weight", (g * ch, ch, 3, 3), "he"),
            ParamSpec(f"{pre}.ccm.conv1.bias", (g * ch,), "zero"),
            ParamSpec(f"{pre}.ccm.conv2.weight", (ch, g * ch, 1, 1), "he"),
            ParamSpec(f"{pre}.ccm.conv2.bias", (ch,), "zero"),
        ]
    out_ch = 3 * cfg.scale * cfg.scale
    specs += [
        ParamSpec("tail_conv.weight", (out_ch, ch, 3, 3), "he"),
        ParamSpec("tail_conv.bias", (out_ch,), "zero"),
    ]
    return specs


class WeightStore:
    """Named parameter collection; iteration is lexicographic by name."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def __setitem__(self, name: str, t: Tensor) -> None:
        self._params[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def total_params(self) -> int:
        return sum(t.size for _, t in self.items())

    def astype(self, dtype) -> "WeightStore":
        out = WeightStore()
        for name, t in self.items():
            out[name] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.items():
            t.requires_grad = flag

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.grad = None


def init_weights(cfg: ModelConfig, seed: int, dtype=np.float32) -> WeightStore:
    """Deterministic init: He-normal convs, 0.02-normal attention/PE params.

    A single splitmix64 stream seeded with `seed` is consumed in
    lexicographic parameter order; zero/one fills draw nothing.
    """
    rng = Rng(seed)
    store = WeightStore()
    for spec in sorted(parameter_shapes(cfg), key=lambda s: s.name):
        n = int(np.prod(spec.shape)) if spec.shape else 1
        if spec.init == "zero":
            data = np.zeros(spec.shape)
        elif spec.init == "one":
            data = np.ones(spec.shape)
        elif spec.init == "he":
            fan_in = int(np.prod(spec.shape[1:]))
            data = rng.normals(n, 0.0, math.sqrt(2.0 / fan_in)).reshape(spec.shape)
        elif spec.init == "pe02":
            data = rng.normals(n, 0.0, 0.02).reshape(spec.shape)
        else:
            raise ConfigError(f"unknown init kind {spec.init!r}")
        store[spec.name] = Tensor(data.astype(dtype))
    return store


# ---------------------------------------------------------------------------
# Serialization

_FORMAT_DOC = """Weight file layout (all integers little-endian):
  bytes 0..7   magic "LMLTW001"
  bytes 8..11  u32 manifest byte length
  manifest     UTF-8 text, one line per parameter:
               name=<str> dtype=f32 shape=<d0,d1,...> offset=<u> length=<u>
               offset is the absolute file offset of the blob, always a
               multiple of 64; length is the blob byte length
  blobs        raw little-endian float32 data, zero-padded to alignment
"""


def save_weights(store: WeightStore, path) -> None:
    entries = []
    blobs = []
    for name, t in store.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append((name, t.shape, len(blob)))
        blobs.append(blob)

    def manifest_text(offsets):
        lines = []
        for (name, shape, length), off in zip(entries, offsets):
            shape_s = ",".join(str(d) for d in shape) if shape else ""
            lines.append(f"name={name} dtype=f32 shape={shape_s} offset={off} length={length}")
        return ("\n".join(lines) + "\n" if lines else "").encode("utf-8")

    # Manifest length depends on offset digits; iterate to a fixed point.
    offsets = [0] * len(entries)
    for _ in range(4):
        mbytes = manifest_text(offsets)
        pos = len(MAGIC) + 4 + len(mbytes)
        new_offsets = []
        for _, _, length in entries:
            pos = -(-pos // _ALIGN) * _ALIGN
            new_offsets.append(pos)
            pos += length
        if new_offsets == offsets:
            break
        offsets = new_offsets
    mbytes = manifest_text(offsets)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        pos = len(MAGIC) + 4 + len(mbytes)
        for blob, off in zip(blobs, offsets):
            fh.write(b"\0" * (off - pos))
            fh.write(blob)
            pos = off + len(blob)


def load_weights(path) -> WeightStore:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4:
        raise TruncatedError("file shorter than header")
    magic = raw[: len(MAGIC)]
    if magic != MAGIC:
        if magic[:5] == MAGIC[:5]:
            raise VersionError(f"unsupported weight format version {magic[5:].decode('ascii', 'replace')}")
        raise BadMagicError("not a weight file (bad magic)")
    (mlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    mstart = len(MAGIC) + 4
    if len(raw) < mstart + mlen:
        raise TruncatedError("manifest truncated")
    manifest = raw[mstart : mstart + mlen].decode("utf-8")

    store = WeightStore()
    for line in manifest.splitlines():
        if not line.strip():
            continue
        fields = {}
        for tok in line.split():
            if "=" not in tok:
                raise ManifestError(f"malformed manifest token {tok!r}")
            key, _, val = tok.partition("=")
            fields[key] = val
        try:
            name = fields["name"]
            dtype = fields["dtype"]
            shape = tuple(int(d) for d in fields["shape"].split(",") if d != "")
            offset = int(fields["offset"])
            length = int(fields["length"])
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"bad manifest line {line!r}") from exc
        if dtype != "f32":
            raise ManifestError(f"unsupported dtype {dtype!r} for {name}")
        expect = int(np.prod(shape)) * 4 if shape else 4
        if expect != length:
            raise ManifestError(f"shape {shape} disagrees with length {length} for {name}")
        if offset % _ALIGN:
            raise ManifestError(f"blob for {name} not {_ALIGN}-byte aligned")
        if offset + length > len(raw):
            raise TruncatedError(f"blob for {name} truncated")
        data = np.frombuffer(raw, dtype="<f4", count=length // 4, offset=offset).reshape(shape)
        store[name] = Tensor(data.copy())
    return store


# ---------------------------------------------------------------------------
# Blocks


def ccm_forward(x: Tensor, w1: Tensor, b1: Tensor | None, w2: Tensor, b2: Tensor | None) -> Tensor:
    """Channel mixer: 3x3 expanding conv, GELU, 1x1 restoring conv."""
    cin = x.shape[1]
    mid = w1.shape[0]
    if w1.shape[1] != cin or w2.shape != (cin, mid, 1, 1):
        raise ShapeError(f"ccm weights {w1.shape}/{w2.shape} do not match {cin} channels")
    with instrument.scope("conv1"):
        y = conv2d(x, w1, b1, ConvSpec(cin, mid, 3, bias=b1 is not None))
    y = gelu(y)
    with instrument.scope("conv2"):
        return conv2d(y, w2, b2, ConvSpec(mid, cin, 1, bias=b2 is not None))


def _attn_params(store: WeightStore, prefix: str, cfg: ModelConfig) -> AttnParams:
    def opt(name):
        return store[name] if name in store else None

    return AttnParams(
        wq=store[f"{prefix}.wq"],
        wk=store[f"{prefix}.wk"],
        wv=store[f"{prefix}.wv"],
        wo=store[f"{prefix}.wo"],
        bq=opt(f"{prefix}.bq"),
        bk=opt(f"{prefix}.bk"),
        bv=opt(f"{prefix}.bv"),
        bo=opt(f"{prefix}.bo"),
        lepe_w=opt(f"{prefix}.lepe.weight"),
        lepe_b=opt(f"{prefix}.lepe.bias"),
        rpe_table=opt(f"{prefix}.rpe"),
    )


def lhs_block_forward(x: Tensor, store: WeightStore, cfg: ModelConfig, block: int) -> Tensor:
    """One block: y = x + cascade(LN1(x)); z = y + mixer(LN2(y))."""
    pre = f"block{block}"
    plan = cfg.head_plan()
    params = [
        [_attn_params(store, f"{pre}.lmlt.head{h}.layer{l}", cfg) for l in range(cfg.depth)]
        for h in range(cfg.heads)
    ]
    merge_w = store[f"{pre}.lmlt.merge.weight"] if cfg.aggregation else None
    merge_b = store[f"{pre}.lmlt.merge.bias"] if cfg.aggregation else None

    normed = layer_norm(x, store[f"{pre}.ln1.gamma"], store[f"{pre}.ln1.beta"])
    with instrument.scope("lmlt"):
        att = lmlt_forward(normed, plan, params, merge_w, merge_b, cfg.ablation_flags(), cfg.window)
    y = add(x, att)

    normed2 = layer_norm(y, store[f"{pre}.ln2.gamma"], store[f"{pre}.ln2.beta"])
    with instrument.scope("ccm"):
        mixed = ccm_forward(
            normed2,
            store[f"{pre}.ccm.conv1.weight"],
            store[f"{pre}.ccm.conv1.bias"],
            store[f"{pre}.ccm.conv2.weight"],
            store[f"{pre}.ccm.conv2.bias"],
        )
    return add(y, mixed)


def check_weights(store: WeightStore, cfg: ModelConfig) -> None:
    """Raise ConfigError if the store does not match the config's manifest."""
    expect = {s.name: s.shape for s in parameter_shapes(cfg)}
    got = {name: t.shape for name, t in store.items()}
    if expect != got:
        missing = sorted(set(expect) - set(got))
        extra = sorted(set(got) - set(expect))
        wrong = sorted(n for n in set(expect) & set(got) if expect[n] != got[n])
        raise ConfigError(
            f"weights do not match config (missing={missing[:3]}, extra={extra[:3]}, shape-mismatch={wrong[:3]})"
        )


def _forward_single(img: Tensor, store: WeightStore, cfg: ModelConfig) -> Tensor:
    n, c, h, w = img.shape
    if c != 3:
        raise ConfigError(f"expected a 3-channel image, got {c} channels")
    levels = cfg.heads if cfg.pooling else 1
    x, grid = pad_to_grid(img, cfg.window, levels)
    with instrument.scope("head_conv"):
        shallow = conv2d(x, store["head_conv.weight"], store["head_conv.bias"], ConvSpec(3, cfg.channels, 3))
    f = shallow
    for b in range(cfg.blocks):
        with instrument.scope(f"block{b}"):
            f = lhs_block_forward(f, store, cfg, b)
    if cfg.long_skip:
        f = add(f, shallow)
    out_ch = 3 * cfg.scale * cfg.scale
    with instrument.scope("tail_conv"):
        t = conv2d(f, store["tail_conv.weight"], store["tail_conv.bias"], ConvSpec(cfg.channels, out_ch, 3))
    up = pixel_shuffle(t, cfg.scale)
    return crop(up, cfg.scale * h, cfg.scale * w)


def model_forward(img: Tensor, store: WeightStore, cfg: ModelConfig, parallel: bool = False) -> Tensor:
    """Upscale a normalized (n, 3, h, w) image batch by cfg.scale.

    Batch items are processed independently and concatenated in index
    order, so serial and parallel execution are bit-identical.  Values
    are not clamped inside the graph.
    """
    check_weights(store, cfg)
    n = img.shape[0]
    if n == 1:
        return _forward_single(img, store, cfg)
    items = [narrow_batch(img, i, 1) for i in range(n)]
    if parallel:
        # Tape recording is not thread-safe; parallel mode is inference-only.
        with ThreadPoolExecutor() as pool:
            outs = list(pool.map(lambda t: _forward_single(t, store, cfg), items))
    else:
        outs = [_forward_single(t, store, cfg) for t in items]
    return concat_batch(outs)
