"""4-stage U-shaped encoder-decoder assembled from mixer blocks.

Layout: 7x7 stride-2 stem, four encoder stages of `blocks_per_stage` mixer
blocks each followed by a 2x2 stride-2 downsampling conv, a two-block
bottleneck, four decoder stages (2x2 stride-2 transposed conv, skip
concatenation, 1x1 fuse, blocks), a 2x2 transposed-conv decoder stem and a
1x1 prediction head. Channel schedule {C, 2C, 4C, 8C, 16C}.

Deep supervision attaches 1x1 heads to the two highest-resolution decoder
stages (H/2 and H/4); their losses are weighted 0.5 and 0.25 against
nearest-neighbour-downsampled labels, main head 1.0, sum normalized.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .ddm import ChannelMixerParams, DDMParams, channel_mixer, ddm_forward, he_uniform
from .ops import BNState
from .tensor import ShapeError, Tensor, read_d2t, write_d2t

__all__ = [
    "CM_EXPANSION", "TINY_REDUCTION",
    "NetworkConfig", "BlockParams", "NetworkParams",
    "channel_mlp", "mixer_block", "build_network", "forward",
    "forward_trace", "parameter_manifest", "param_count",
    "save_checkpoint", "load_checkpoint",
]

# Mixer-internal hyperparameters (hidden widths the architecture fixes):
# channel-mixer expansion and the bottleneck reduction of the tiny MLPs.
CM_EXPANSION = 2
TINY_REDUCTION = 4

_STAGES = 4
_D2C_MAGIC = b"D2C\0"
_D2C_VERSION = 1


@dataclass
class NetworkConfig:
    """Everything parameter shapes depend on; serialized into checkpoints."""

    base_channels: int = 48
    patch_count: int = 4
    blocks_per_stage: int = 2
    channel_mlp_expansion: int = 4
    num_classes: int = 2
    in_channels: int = 1
    input_size: int = 512
    variant: str = "ddm"
    deep_supervision: bool = True

    def __post_init__(self):
        if self.input_size % 32:
            raise ShapeError(
                f"input_size {self.input_size} must be divisible by 32"
            )
        if self.base_channels % self.patch_count:
            raise ShapeError(
                f"base_channels {self.base_channels} not divisible by patch count {self.patch_count}"
            )
        if self.variant not in ("ddm", "basic_mixer"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if min(self.base_channels, self.patch_count, self.blocks_per_stage,
               self.channel_mlp_expansion, self.in_channels) < 1:
            raise ValueError("config extents must be positive")

    @property
    def channels(self) -> tuple:
        """Per-stage widths (C, 2C, 4C, 8C, 16C)."""
        return tuple(self.base_channels * (1 << i) for i in range(_STAGES + 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def _stage_specs(cfg: NetworkConfig) -> list:
    """Block-bearing stages in canonical order: (name, channels, spatial)."""
    c = cfg.channels
    s = cfg.input_size
    specs = [(f"enc{i+1}", c[i], s >> (i + 1)) for i in range(_STAGES)]
    specs.append(("bottleneck", c[_STAGES], s >> 5))
    specs += [(f"dec{i+1}", c[i], s >> (i + 1)) for i in reversed(range(_STAGES))]
    return specs


@dataclass
class BlockParams:
    """One mixer block: pre-norm mixer and pre-norm channel MLP, both residual."""

    bn1: BNState
    mixer: object  # DDMParams, or ChannelMixerParams for the basic variant
    bn2: BNState
    mlp_lin1_w: Tensor
    mlp_lin1_b: Tensor
    mlp_lin2_w: Tensor
    mlp_lin2_b: Tensor


@dataclass
class NetworkParams:
    cfg: NetworkConfig
    stem_w: Tensor
    stem_b: Tensor
    enc_blocks: list
    down_w: list
    down_b: list
    bott_blocks: list
    up_w: list
    up_b: list
    fuse_w: list
    fuse_b: list
    dec_blocks: list
    decstem_w: Tensor
    decstem_b: Tensor
    head_w: Tensor
    head_b: Tensor
    aux_w: list = field(default_factory=list)
    aux_b: list = field(default_factory=list)

    def _stage_blocks(self):
        specs = _stage_specs(self.cfg)
        blocks = (
            self.enc_blocks
            + [self.bott_blocks]
            + [self.dec_blocks[i] for i in reversed(range(_STAGES))]
        )
        return [(specs[i][0], blocks[i]) for i in range(len(specs))]

    def _entries(self):
        """Canonical walk over every stored array, matching parameter_manifest.

        Yields (name, kind, holder) where kind is "param" (holder is the
        Tensor) or "buffer" (holder is (BNState, attr) for running stats).
        """
        entries = []

        def tensor_entry(name, t):
            entries.append((name, "param", t))

        def bn_entries(prefix, bn):
            tensor_entry(f"{prefix}.gamma", bn.gamma)
            tensor_entry(f"{prefix}.beta", bn.beta)
            entries.append((f"{prefix}.running_mean", "buffer", (bn, "running_mean")))
            entries.append((f"{prefix}.running_var", "buffer", (bn, "running_var")))

        def block_entries(stage, k, bp):
            bn_entries(f"block.{stage}.{k}.bn1", bp.bn1)
            for name, t in bp.mixer.named_tensors(f"ddm.{stage}.{k}"):
                tensor_entry(name, t)
            bn_entries(f"block.{stage}.{k}.bn2", bp.bn2)
            tensor_entry(f"block.{stage}.{k}.mlp.lin1.weight", bp.mlp_lin1_w)
            tensor_entry(f"block.{stage}.{k}.mlp.lin1.bias", bp.mlp_lin1_b)
            tensor_entry(f"block.{stage}.{k}.mlp.lin2.weight", bp.mlp_lin2_w)
            tensor_entry(f"block.{stage}.{k}.mlp.lin2.bias", bp.mlp_lin2_b)

        tensor_entry("stem.weight", self.stem_w)
        tensor_entry("stem.bias", self.stem_b)
        stage_blocks = dict(self._stage_blocks())
        for i in range(_STAGES):
            for k, bp in enumerate(stage_blocks[f"enc{i+1}"]):
                block_entries(f"enc{i+1}", k, bp)
            tensor_entry(f"down{i+1}.weight", self.down_w[i])
            tensor_entry(f"down{i+1}.bias", self.down_b[i])
        for k, bp in enumerate(stage_blocks["bottleneck"]):
            block_entries("bottleneck", k, bp)
        for i in reversed(range(_STAGES)):
            tensor_entry(f"up{i+1}.weight", self.up_w[i])
            tensor_entry(f"up{i+1}.bias", self.up_b[i])
            tensor_entry(f"fuse{i+1}.weight", self.fuse_w[i])
            tensor_entry(f"fuse{i+1}.bias", self.fuse_b[i])
            for k, bp in enumerate(stage_blocks[f"dec{i+1}"]):
                block_entries(f"dec{i+1}", k, bp)
        tensor_entry("decstem.weight", self.decstem_w)
        tensor_entry("decstem.bias", self.decstem_b)
        tensor_entry("head.weight", self.head_w)
        tensor_entry("head.bias", self.head_b)
        for j in range(len(self.aux_w)):
            tensor_entry(f"aux{j+1}.weight", self.aux_w[j])
            tensor_entry(f"aux{j+1}.bias", self.aux_b[j])
        return entries

    def named_parameters(self) -> dict:
        """name -> Tensor for every learnable, in canonical order."""
        return {n: h for n, kind, h in self._entries() if kind == "param"}

    def named_state(self) -> dict:
        """name -> ndarray for every stored array, params and buffers."""
        out = {}
        for name, kind, holder in self._entries():
            out[name] = holder.data if kind == "param" else getattr(*holder)
        return out

    def load_state(self, arrays: dict) -> None:
        for name, kind, holder in self._entries():
            if kind == "param":
                holder.data = arrays[name]
            else:
                setattr(holder[0], holder[1], arrays[name])


def parameter_manifest(cfg: NetworkConfig) -> dict:
    """Every stored array's name -> {"shape": tuple, "param": bool}, derived
    purely from the layout rules; no allocation."""
    manifest: dict = {}

    def put(name, shape, param=True):
        manifest[name] = {"shape": tuple(int(e) for e in shape), "param": param}

    def bn(prefix, c):
        put(f"{prefix}.gamma", (c,))
        put(f"{prefix}.beta", (c,))
        put(f"{prefix}.running_mean", (c,), param=False)
        put(f"{prefix}.running_var", (c,), param=False)

    def sdm(prefix, folded):
        put(f"{prefix}.lin1.weight", (folded, folded))
        put(f"{prefix}.lin1.bias", (folded,))
        put(f"{prefix}.dw.weight", (folded, 1, 3))
        put(f"{prefix}.dw.bias", (folded,))
        put(f"{prefix}.lin2.weight", (folded, folded))
        put(f"{prefix}.lin2.bias", (folded,))

    def channel_mixer_entries(prefix, c):
        ec = CM_EXPANSION * c
        put(f"{prefix}.lin1.weight", (ec, c))
        put(f"{prefix}.lin1.bias", (ec,))
        put(f"{prefix}.dw.weight", (ec, 3, 3))
        put(f"{prefix}.dw.bias", (ec,))
        put(f"{prefix}.lin2.weight", (c, ec))
        put(f"{prefix}.lin2.bias", (c,))

    def tiny(prefix, c, out):
        hid = max(c // TINY_REDUCTION, 1)
        put(f"{prefix}.lin1.weight", (hid, c))
        put(f"{prefix}.lin1.bias", (hid,))
        put(f"{prefix}.lin2.weight", (out, hid))
        put(f"{prefix}.lin2.bias", (out,))

    def block(stage, k, c, spatial):
        bn(f"block.{stage}.{k}.bn1", c)
        mixer_prefix = f"ddm.{stage}.{k}"
        if cfg.variant == "ddm":
            folded = (c // cfg.patch_count) * spatial
            sdm(f"{mixer_prefix}.sdm_h", folded)
            sdm(f"{mixer_prefix}.sdm_w", folded)
            channel_mixer_entries(f"{mixer_prefix}.cm", c)
            tiny(f"{mixer_prefix}.smix.h", c, c)
            tiny(f"{mixer_prefix}.smix.w", c, c)
            tiny(f"{mixer_prefix}.cmix", c, 3 * c)
        else:
            channel_mixer_entries(f"{mixer_prefix}.cm", c)
        bn(f"block.{stage}.{k}.bn2", c)
        ec = cfg.channel_mlp_expansion * c
        put(f"block.{stage}.{k}.mlp.lin1.weight", (ec, c))
        put(f"block.{stage}.{k}.mlp.lin1.bias", (ec,))
        put(f"block.{stage}.{k}.mlp.lin2.weight", (c, ec))
        put(f"block.{stage}.{k}.mlp.lin2.bias", (c,))

    chans = cfg.channels
    specs = {name: (c, s) for name, c, s in _stage_specs(cfg)}
    put("stem.weight", (chans[0], cfg.in_channels, 7, 7))
    put("stem.bias", (chans[0],))
    for i in range(_STAGES):
        c, s = specs[f"enc{i+1}"]
        for k in range(cfg.blocks_per_stage):
            block(f"enc{i+1}", k, c, s)
        put(f"down{i+1}.weight", (chans[i + 1], chans[i], 2, 2))
        put(f"down{i+1}.bias", (chans[i + 1],))
    c, s = specs["bottleneck"]
    for k in range(cfg.blocks_per_stage):
        block("bottleneck", k, c, s)
    for i in reversed(range(_STAGES)):
        put(f"up{i+1}.weight", (chans[i + 1], chans[i], 2, 2))
        put(f"up{i+1}.bias", (chans[i],))
        put(f"fuse{i+1}.weight", (chans[i], 2 * chans[i], 1, 1))
        put(f"fuse{i+1}.bias", (chans[i],))
        c, s = specs[f"dec{i+1}"]
        for k in range(cfg.blocks_per_stage):
            block(f"dec{i+1}", k, c, s)
    put("decstem.weight", (chans[0], chans[0], 2, 2))
    put("decstem.bias", (chans[0],))
    put("head.weight", (cfg.num_classes, chans[0], 1, 1))
    put("head.bias", (cfg.num_classes,))
    if cfg.deep_supervision:
        put("aux1.weight", (cfg.num_classes, chans[0], 1, 1))
        put("aux1.bias", (cfg.num_classes,))
        put("aux2.weight", (cfg.num_classes, chans[1], 1, 1))
        put("aux2.bias", (cfg.num_classes,))
    return manifest


def param_count(cfg: NetworkConfig) -> int:
    """Number of learnable scalars, a pure function of the config."""
    return sum(
        int(np.prod(e["shape"]))
        for e in parameter_manifest(cfg).values()
        if e["param"]
    )


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Allocate and initialize all parameters, deterministically per seed."""
    rng = np.random.default_rng(seed)
    chans = cfg.channels

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def make_block(c, spatial):
        if cfg.variant == "ddm":
            mixer = DDMParams.create(
                c, cfg.patch_count, spatial, spatial, rng, dtype,
                cm_expansion=CM_EXPANSION, reduction=TINY_REDUCTION,
            )
        else:
            mixer = ChannelMixerParams.create(c, CM_EXPANSION, rng, dtype)
        ec = cfg.channel_mlp_expansion * c
        return BlockParams(
            bn1=BNState.create(c, dtype),
            mixer=mixer,
            bn2=BNState.create(c, dtype),
            mlp_lin1_w=he_uniform(rng, (ec, c), c, dtype),
            mlp_lin1_b=zeros((ec,)),
            mlp_lin2_w=he_uniform(rng, (c, ec), ec, dtype),
            mlp_lin2_b=zeros((c,)),
        )

    specs = {name: (c, s) for name, c, s in _stage_specs(cfg)}
    stem_w = he_uniform(rng, (chans[0], cfg.in_channels, 7, 7), cfg.in_channels * 49, dtype)
    stem_b = zeros((chans[0],))
    enc_blocks, down_w, down_b = [], [], []
    for i in range(_STAGES):
        c, s = specs[f"enc{i+1}"]
        enc_blocks.append([make_block(c, s) for _ in range(cfg.blocks_per_stage)])
        down_w.append(he_uniform(rng, (chans[i + 1], chans[i], 2, 2), chans[i] * 4, dtype))
        down_b.append(zeros((chans[i + 1],)))
    c, s = specs["bottleneck"]
    bott_blocks = [make_block(c, s) for _ in range(cfg.blocks_per_stage)]
    up_w = [None] * _STAGES
    up_b = [None] * _STAGES
    fuse_w = [None] * _STAGES
    fuse_b = [None] * _STAGES
    dec_blocks = [None] * _STAGES
    for i in reversed(range(_STAGES)):
        up_w[i] = he_uniform(rng, (chans[i + 1], chans[i], 2, 2), chans[i + 1] * 4, dtype)
        up_b[i] = zeros((chans[i],))
        fuse_w[i] = he_uniform(rng, (chans[i], 2 * chans[i], 1, 1), 2 * chans[i], dtype)
        fuse_b[i] = zeros((chans[i],))
        c, s = specs[f"dec{i+1}"]
        dec_blocks[i] = [make_block(c, s) for _ in range(cfg.blocks_per_stage)]
    decstem_w = he_uniform(rng, (chans[0], chans[0], 2, 2), chans[0] * 4, dtype)
    decstem_b = zeros((chans[0],))
    head_w = he_uniform(rng, (cfg.num_classes, chans[0], 1, 1), chans[0], dtype)
    head_b = zeros((cfg.num_classes,))
    aux_w, aux_b = [], []
    if cfg.deep_supervision:
        aux_w.append(he_uniform(rng, (cfg.num_classes, chans[0], 1, 1), chans[0], dtype))
        aux_b.append(zeros((cfg.num_classes,)))
        aux_w.append(he_uniform(rng, (cfg.num_classes, chans[1], 1, 1), chans[1], dtype))
        aux_b.append(zeros((cfg.num_classes,)))

    return NetworkParams(
        cfg=cfg, stem_w=stem_w, stem_b=stem_b,
        enc_blocks=enc_blocks, down_w=down_w, down_b=down_b,
        bott_blocks=bott_blocks, up_w=up_w, up_b=up_b,
        fuse_w=fuse_w, fuse_b=fuse_b, dec_blocks=dec_blocks,
        decstem_w=decstem_w, decstem_b=decstem_b,
        head_w=head_w, head_b=head_b, aux_w=aux_w, aux_b=aux_b,
    )


def channel_mlp(x: Tensor, bp: BlockParams) -> Tensor:
    """Pointwise expand, GELU, pointwise project (the block's second half)."""
    y = ops.linear(x, bp.mlp_lin1_w, bp.mlp_lin1_b, axis=-3)
    y = ops.gelu(y)
    return ops.linear(y, bp.mlp_lin2_w, bp.mlp_lin2_b, axis=-3)


def mixer_block(x: Tensor, bp: BlockParams, bn_mode: str = "train",
                variant: str = "ddm") -> Tensor:
    """Two pre-norm residual sub-layers: mixer then channel MLP."""
    normed = ops.batchnorm2d(x, bp.bn1, bn_mode)
    if variant == "ddm":
        mixed = ddm_forward(normed, bp.mixer)
    else:
        mixed = channel_mixer(normed, bp.mixer)
    x = ops.add(mixed, x)
    y = channel_mlp(ops.batchnorm2d(x, bp.bn2, bn_mode), bp)
    return ops.add(y, x)


def _trace_put(trace, name, t):
    if trace is not None:
        b_off = 1 if t.ndim == 4 else 0
        trace.append((name, t.shape[b_off], t.shape[b_off + 1], t.shape[b_off + 2]))


def forward(params: NetworkParams, x: Tensor, bn_mode: str = "train",
            trace: list | None = None):
    """Dense logits at input resolution; with deep supervision also returns
    [aux at H/2, aux at H/4]."""
    cfg = params.cfg
    if x.ndim != 4:
        raise ShapeError(f"forward expects (B,C,H,W), got shape {x.shape}")
    b, cin, h, w = x.shape
    if cin != cfg.in_channels:
        raise ShapeError(f"input channels {cin} != configured {cfg.in_channels}")
    if h % 32 or w % 32:
        raise ShapeError(
            f"input extents ({h}, {w}) must be divisible by 32"
        )
    if h != cfg.input_size or w != cfg.input_size:
        raise ShapeError(
            f"input extents ({h}, {w}) != configured input_size {cfg.input_size}"
        )

    t = ops.conv2d(x, params.stem_w, params.stem_b, stride=2, padding=3)
    _trace_put(trace, "stem", t)
    skips = []
    for i in range(_STAGES):
        for bp in params.enc_blocks[i]:
            t = mixer_block(t, bp, bn_mode, cfg.variant)
        _trace_put(trace, f"enc{i+1}", t)
        skips.append(t)
        t = ops.conv2d(t, params.down_w[i], params.down_b[i], stride=2, padding=0)
        _trace_put(trace, f"down{i+1}", t)
    for bp in params.bott_blocks:
        t = mixer_block(t, bp, bn_mode, cfg.variant)
    _trace_put(trace, "bottleneck", t)
    dec_out = {}
    for i in reversed(range(_STAGES)):
        t = ops.tconv2d(t, params.up_w[i], params.up_b[i], stride=2)
        t = ops.concat([t, skips[i]], axis=1)
        t = ops.conv2d(t, params.fuse_w[i], params.fuse_b[i], stride=1, padding=0)
        for bp in params.dec_blocks[i]:
            t = mixer_block(t, bp, bn_mode, cfg.variant)
        _trace_put(trace, f"dec{i+1}", t)
        dec_out[i] = t
    full = ops.tconv2d(t, params.decstem_w, params.decstem_b, stride=2)
    _trace_put(trace, "decstem", full)
    logits = ops.conv2d(full, params.head_w, params.head_b, stride=1, padding=0)
    _trace_put(trace, "logits", logits)
    if cfg.deep_supervision:
        aux = [
            ops.conv2d(dec_out[0], params.aux_w[0], params.aux_b[0], 1, 0),
            ops.conv2d(dec_out[1], params.aux_w[1], params.aux_b[1], 1, 0),
        ]
        return logits, aux
    return logits


def forward_trace(cfg: NetworkConfig) -> list:
    """Analytic (name, channels, h, w) trace of the layout; no computation."""
    s = cfg.input_size
    chans = cfg.channels
    trace = [("stem", chans[0], s // 2, s // 2)]
    for i in range(_STAGES):
        r = s >> (i + 1)
        trace.append((f"enc{i+1}", chans[i], r, r))
        trace.append((f"down{i+1}", chans[i + 1], r // 2, r // 2))
    r = s >> 5
    trace.append(("bottleneck", chans[_STAGES], r, r))
    for i in reversed(range(_STAGES)):
        r = s >> (i + 1)
        trace.append((f"dec{i+1}", chans[i], r, r))
    trace.append(("decstem", chans[0], s, s))
    trace.append(("logits", cfg.num_classes, s, s))
    return trace


# -- .d2c checkpoint format -----------------------------------------------------
#
# magic "D2C\0", u32 version, u32 config-JSON length, config JSON with sorted
# keys, u32 tensor count, then per tensor: u16 name length, name bytes, the
# tensor in .d2t format. Tensors appear in canonical manifest order.


def _config_json(cfg: NetworkConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, params: NetworkParams) -> None:
    state = params.named_state()
    blob = io.BytesIO()
    blob.write(_D2C_MAGIC)
    cfg_bytes = _config_json(params.cfg)
    blob.write(struct.pack("<II", _D2C_VERSION, len(cfg_bytes)))
    blob.write(cfg_bytes)
    blob.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        encoded = name.encode()
        blob.write(struct.pack("<H", len(encoded)))
        blob.write(encoded)
        write_d2t(blob, Tensor(arr))
    with open(path, "wb") as fh:
        fh.write(blob.getvalue())


def load_checkpoint(path) -> NetworkParams:
    """Read a checkpoint, validating every tensor against the config manifest."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _D2C_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, cfg_len = struct.unpack("<II", fh.read(8))
        if version != _D2C_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = NetworkConfig.from_dict(json.loads(fh.read(cfg_len).decode()))
        (count,) = struct.unpack("<I", fh.read(4))
        manifest = parameter_manifest(cfg)
        if count != len(manifest):
            raise ValueError(
                f"checkpoint has {count} tensors, manifest expects {len(manifest)}"
            )
        loaded = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            t = read_d2t(fh)
            if name not in manifest:
                raise ValueError(f"unexpected tensor {name!r} in checkpoint")
            want = manifest[name]["shape"]
            if t.shape != want:
                raise ValueError(
                    f"tensor {name!r} has shape {t.shape}, manifest expects {want}"
                )
            loaded[name] = t.data
    missing = set(manifest) - set(loaded)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:4]}...")

    dtype = loaded["stem.weight"].dtype
    params = build_network(cfg, seed=0, dtype=dtype)
    params.load_state(loaded)
    return params
