"""The recognition network: patch embedding, a hierarchy of attention levels
joined by adaptive downsampling, and a linear classification head.

Each level stacks pre-normalized residual blocks of three sub-modules:
channel attention (gating from pooled per-channel statistics), multi-head
spatial attention over the patch grid, and a position-wise feed-forward pair
of 1x1 convolutions.  Between levels, a 3x3 convolution + layer norm +
adaptive max pooling halve the grid until a single patch remains, which the
head maps to class logits.

No positional encoding is used, so every block is equivariant under
permutations of grid positions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError
from .tensor import (
    LayerNormParams,
    Tensor,
    adaptive_pool,
    conv2d,
    layer_norm,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
    xavier_uniform,
)

CHECKPOINT_MAGIC = b"AHMC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults give the 28x28x3 -> 3-class network."""

    h_flow: int = 28
    w_flow: int = 28
    patch_size: int = 7
    embed_channels: int = 96
    heads: int = 3
    n_layers: int = 3
    downsample_factor: int = 2
    blocks_per_layer: tuple[int, ...] = (2, 2, 8)
    n_classes: int = 3
    channel_reduction: int = 4
    ffn_expansion: int = 4

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_layer", tuple(self.blocks_per_layer))

    @property
    def grid(self) -> int:
        return self.h_flow // self.patch_size

    def grid_at(self, level: int) -> int:
        return self.grid // self.downsample_factor ** level

    def validate(self) -> None:
        """Raise ConfigError listing every violated invariant."""
        problems = []
        for name in ("h_flow", "w_flow", "patch_size", "embed_channels", "heads",
                     "n_layers", "downsample_factor", "n_classes",
                     "channel_reduction", "ffn_expansion"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.n_classes < 2:
            problems.append("n_classes must be at least 2")
        if self.h_flow != self.w_flow:
            problems.append("h_flow and w_flow must match (square patch grid)")
        if self.heads >= 1 and self.embed_channels % self.heads != 0:
            problems.append(
                f"embed_channels={self.embed_channels} not divisible by heads={self.heads}")
        if self.channel_reduction >= 1 and \
                self.embed_channels % self.channel_reduction != 0:
            problems.append(
                f"embed_channels={self.embed_channels} not divisible by "
                f"channel_reduction={self.channel_reduction}")
        if self.patch_size >= 1 and (
                self.h_flow % self.patch_size != 0 or self.w_flow % self.patch_size != 0):
            problems.append(
                f"input dims {self.h_flow}x{self.w_flow} not divisible by "
                f"patch_size={self.patch_size}")
        elif self.patch_size >= 1 and self.downsample_factor >= 1:
            top = self.downsample_factor ** (self.n_layers - 1)
            if self.grid != top:
                problems.append(
                    f"patch grid {self.grid} must equal "
                    f"downsample_factor^(n_layers-1) = {top} so the top level is 1x1")
        if len(self.blocks_per_layer) != self.n_layers:
            problems.append(
                f"blocks_per_layer has {len(self.blocks_per_layer)} entries "
                f"for n_layers={self.n_layers}")
        if any(b < 1 for b in self.blocks_per_layer):
            problems.append("every blocks_per_layer entry must be positive")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class BlockParams:
    """One attention block: three pre-norms plus its conv weights."""

    ln_ca: LayerNormParams
    ca_w1: Tensor
    ca_b1: Tensor
    ca_w2: Tensor
    ca_b2: Tensor
    ln_sa: LayerNormParams
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor
    ln_ff: LayerNormParams
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor


@dataclass
class TransitionParams:
    """Between-level downsampling: 3x3 conv then layer norm (pooling is fixed)."""

    conv_w: Tensor
    conv_b: Tensor
    ln: LayerNormParams


@dataclass
class ModelParams:
    """Every learnable tensor, structured by pipeline stage."""

    config: ModelConfig
    patch_w: Tensor
    patch_b: Tensor
    levels: list[list[BlockParams]]
    transitions: list[TransitionParams]
    head_w: Tensor
    head_b: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        """Flat name -> tensor map in the canonical serialization order."""
        out: dict[str, Tensor] = {
            "patch_embed.weight": self.patch_w,
            "patch_embed.bias": self.patch_b,
        }
        for li, blocks in enumerate(self.levels):
            for bi, blk in enumerate(blocks):
                prefix = f"level{li}.block{bi}"
                out[f"{prefix}.ln_ca.gamma"] = blk.ln_ca.gamma
                out[f"{prefix}.ln_ca.beta"] = blk.ln_ca.beta
                out[f"{prefix}.ca.w1"] = blk.ca_w1
                out[f"{prefix}.ca.b1"] = blk.ca_b1
                out[f"{prefix}.ca.w2"] = blk.ca_w2
                out[f"{prefix}.ca.b2"] = blk.ca_b2
                out[f"{prefix}.ln_sa.gamma"] = blk.ln_sa.gamma
                out[f"{prefix}.ln_sa.beta"] = blk.ln_sa.beta
                out[f"{prefix}.sa.q_w"] = blk.q_w
                out[f"{prefix}.sa.q_b"] = blk.q_b
                out[f"{prefix}.sa.k_w"] = blk.k_w
                out[f"{prefix}.sa.k_b"] = blk.k_b
                out[f"{prefix}.sa.v_w"] = blk.v_w
                out[f"{prefix}.sa.v_b"] = blk.v_b
                out[f"{prefix}.sa.o_w"] = blk.o_w
                out[f"{prefix}.sa.o_b"] = blk.o_b
                out[f"{prefix}.ln_ff.gamma"] = blk.ln_ff.gamma
                out[f"{prefix}.ln_ff.beta"] = blk.ln_ff.beta
                out[f"{prefix}.ff.w1"] = blk.ff_w1
                out[f"{prefix}.ff.b1"] = blk.ff_b1
                out[f"{prefix}.ff.w2"] = blk.ff_w2
                out[f"{prefix}.ff.b2"] = blk.ff_b2
        for ti, tr in enumerate(self.transitions):
            out[f"transition{ti}.conv.weight"] = tr.conv_w
            out[f"transition{ti}.conv.bias"] = tr.conv_b
            out[f"transition{ti}.ln.gamma"] = tr.ln.gamma
            out[f"transition{ti}.ln.beta"] = tr.ln.beta
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Xavier-uniform weights, zero biases, unit layer-norm scales.

    The draw sequence is fixed by the parameter order, so a seed fully
    determines every weight.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    c = config.embed_channels
    p = config.patch_size

    def conv_weight(c_out, c_in, k):
        return xavier_uniform(rng, (c_out, c_in, k, k),
                              fan_in=c_in * k * k, fan_out=c_out * k * k,
                              dtype=dtype)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    def ln():
        return LayerNormParams(gamma=ones(c), beta=zeros(c))

    def block():
        hidden = c // config.channel_reduction
        ffn = c * config.ffn_expansion
        return BlockParams(
            ln_ca=ln(),
            ca_w1=conv_weight(hidden, c, 1), ca_b1=zeros(hidden),
            ca_w2=conv_weight(c, hidden, 1), ca_b2=zeros(c),
            ln_sa=ln(),
            q_w=conv_weight(c, c, 1), q_b=zeros(c),
            k_w=conv_weight(c, c, 1), k_b=zeros(c),
            v_w=conv_weight(c, c, 1), v_b=zeros(c),
            o_w=conv_weight(c, c, 1), o_b=zeros(c),
            ln_ff=ln(),
            ff_w1=conv_weight(ffn, c, 1), ff_b1=zeros(ffn),
            ff_w2=conv_weight(c, ffn, 1), ff_b2=zeros(c),
        )

    patch_w = conv_weight(c, 3, p)
    patch_b = zeros(c)
    levels = [[block() for _ in range(n)] for n in config.blocks_per_layer]
    transitions = [
        TransitionParams(conv_w=conv_weight(c, c, 3), conv_b=zeros(c), ln=ln())
        for _ in range(config.n_layers - 1)
    ]
    head_w = xavier_uniform(rng, (c, config.n_classes),
                            fan_in=c, fan_out=config.n_classes, dtype=dtype)
    head_b = zeros(config.n_classes)
    return ModelParams(config=config, patch_w=patch_w, patch_b=patch_b,
                       levels=levels, transitions=transitions,
                       head_w=head_w, head_b=head_b)


# -- forward pieces -----------------------------------------------------------


def patch_embed(x: Tensor, params: ModelParams) -> Tensor:
    """Strided PxP convolution turning [B,3,H,W] into the patch grid [B,C,H/P,W/P]."""
    cfg = params.config
    if x.shape[1:] != (3, cfg.h_flow, cfg.w_flow):
        raise ValidationError(
            f"expected input [B, 3, {cfg.h_flow}, {cfg.w_flow}], got {x.shape}"
        )
    return conv2d(x, params.patch_w, params.patch_b, stride=cfg.patch_size)


def channel_attention(x: Tensor, blk: BlockParams) -> Tensor:
    """Gate channels by sigmoid(MLP(avgpool) + MLP(maxpool)), weights shared."""

    def squeeze_mlp(pooled: Tensor) -> Tensor:
        hidden = relu(conv2d(pooled, blk.ca_w1, blk.ca_b1))
        return conv2d(hidden, blk.ca_w2, blk.ca_b2)

    avg = adaptive_pool(x, 1, 1, "avg")
    mx = adaptive_pool(x, 1, 1, "max")
    weights = sigmoid(squeeze_mlp(avg) + squeeze_mlp(mx))  # [B,C,1,1]
    return x * weights


def spatial_attention(x: Tensor, blk: BlockParams, heads: int,
                      return_weights: bool = False):
    """Multi-head scaled dot-product attention over the N = H*W grid positions."""
    b, c, h, w = x.shape
    if c % heads != 0:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    d = c // heads
    n = h * w

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, heads, d, n)), (0, 1, 3, 2))  # [B,h,N,D]

    q = split_heads(conv2d(x, blk.q_w, blk.q_b))
    k = split_heads(conv2d(x, blk.k_w, blk.k_b))
    v = split_heads(conv2d(x, blk.v_w, blk.v_b))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
    weights = softmax(scores, axis=-1)  # [B,h,N,N]
    z = matmul(weights, v)  # [B,h,N,D]
    z = reshape(transpose(z, (0, 1, 3, 2)), (b, c, h, w))
    out = conv2d(z, blk.o_w, blk.o_b)
    if return_weights:
        return out, weights
    return out


def feed_forward(x: Tensor, blk: BlockParams) -> Tensor:
    """Position-wise expand/contract pair of 1x1 convolutions."""
    return conv2d(relu(conv2d(x, blk.ff_w1, blk.ff_b1)), blk.ff_w2, blk.ff_b2)


def msa_block(x: Tensor, blk: BlockParams, heads: int) -> Tensor:
    """Pre-norm residual composition of the three sub-modules."""
    x = x + channel_attention(layer_norm(x, blk.ln_ca, axis=1), blk)
    x = x + spatial_attention(layer_norm(x, blk.ln_sa, axis=1), blk, heads)
    return x + feed_forward(layer_norm(x, blk.ln_ff, axis=1), blk)


def downsample(x: Tensor, tr: TransitionParams, factor: int) -> Tensor:
    """3x3 conv -> layer norm -> adaptive max pool shrinking the grid by `factor`."""
    _, _, h, w = x.shape
    if h % factor != 0 or w % factor != 0:
        raise ConfigError(
            f"grid {h}x{w} not divisible by downsample factor {factor}"
        )
    y = conv2d(x, tr.conv_w, tr.conv_b, stride=1, padding=1)
    y = layer_norm(y, tr.ln, axis=1)
    return adaptive_pool(y, h // factor, w // factor, "max")


def _as_input_tensor(maps, config: ModelConfig, dtype) -> Tensor:
    """Accept a [B,H,W,3] channel-last batch (array) or a ready [B,3,H,W] Tensor."""
    if isinstance(maps, Tensor):
        return maps
    arr = np.asarray(maps)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValidationError(
            f"expected a [B, {config.h_flow}, {config.w_flow}, 3] batch, got {arr.shape}"
        )
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def forward(maps, params: ModelParams, trace: list | None = None) -> Tensor:
    """Run the full network on a batch of feature maps, returning [B, n_classes] logits.

    ``trace``, when given, collects the shape after every pipeline stage.
    """
    cfg = params.config
    x = _as_input_tensor(maps, cfg, params.patch_w.dtype)
    if x.shape[0] < 1:
        raise ValidationError("batch must be non-empty")
    if trace is not None:
        trace.append(tuple(x.shape))
    x = patch_embed(x, params)
    expected = (x.shape[0], cfg.embed_channels, cfg.grid, cfg.grid)
    if x.shape != expected:
        raise DimensionError(f"patch embedding produced {x.shape}, expected {expected}")
    if trace is not None:
        trace.append(tuple(x.shape))
    for level, blocks in enumerate(params.levels):
        side = cfg.grid_at(level)
        if x.shape[2:] != (side, side):
            raise DimensionError(
                f"level {level} expected a {side}x{side} grid, got {x.shape[2:]}"
            )
        for blk in blocks:
            x = msa_block(x, blk, cfg.heads)
        if level < cfg.n_layers - 1:
            x = downsample(x, params.transitions[level], cfg.downsample_factor)
            if trace is not None:
                trace.append(tuple(x.shape))
    if x.shape[2:] != (1, 1):
        raise DimensionError(f"top level must be 1x1, got grid {x.shape[2:]}")
    feats = reshape(x, (x.shape[0], cfg.embed_channels))
    logits = matmul(feats, params.head_w) + params.head_b
    if trace is not None:
        trace.append(tuple(logits.shape))
    return logits


# -- checkpoint serialization -----------------------------------------------------


def _config_to_json(config: ModelConfig) -> bytes:
    payload = {f.name: getattr(config, f.name) for f in fields(config)}
    payload["blocks_per_layer"] = list(payload["blocks_per_layer"])
    return json.dumps(payload, sort_keys=True).encode("utf-8")


def save_checkpoint(path, params: ModelParams) -> None:
    """Magic + version + length-prefixed config JSON + f32 LE tensors in order."""
    cfg_json = _config_to_json(params.config)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        for tensor in params.named_parameters().values():
            f.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    from pathlib import Path

    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version = data[4]
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, 5)
    cfg_raw = data[9:9 + cfg_len]
    try:
        cfg_dict = json.loads(cfg_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt config block: {exc}") from exc
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(cfg_dict) - known
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
    config = ModelConfig(**cfg_dict)
    params = init_model(config, seed=0)
    offset = 9 + cfg_len
    for name, tensor in params.named_parameters().items():
        nbytes = tensor.data.size * 4
        if offset + nbytes > len(data):
            raise ValidationError(f"{path}: truncated at parameter {name!r}")
        flat = np.frombuffer(data, dtype="<f4", count=tensor.data.size,
                             offset=offset)
        tensor.data = flat.reshape(tensor.data.shape).copy()
        tensor.grad = np.zeros_like(tensor.data)
        offset += nbytes
    if offset != len(data):
        raise ValidationError(
            f"{path}: {len(data) - offset} trailing bytes after parameters"
        )
    return params


def tiny_config() -> ModelConfig:
    """Smallest config exercising every code path; used by gradient checks."""
    return replace(ModelConfig(), embed_channels=6, heads=3,
                   blocks_per_layer=(1, 1, 1), channel_reduction=2,
                   ffn_expansion=2)
