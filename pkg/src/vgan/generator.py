"""U-shaped segmentation generator.

Strided-conv encoder, transformer bottleneck over flattened voxel tokens
with an outer residual shortcut, transpose-conv decoder with skip
concatenation, and three sigmoid supervision heads at the finest three
decoder resolutions.

Parameters live in a flat ``{name: Tensor}`` dict so the checkpoint and
optimizer layers can treat them uniformly. `parameter_shapes` walks the
same structure without allocating, which is also how full-scale shape
checks stay cheap.
"""

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ConfigError, ContractViolation, Tensor
from .layers import (
    AttentionSpec,
    Conv3dSpec,
    concat_channels,
    conv3d,
    conv_transpose3d,
    instance_norm,
    layer_norm,
    leaky_relu,
    linear,
    multi_head_attention,
    sigmoid,
)

_AXES = "DHW"


@dataclass
class GeneratorConfig:
    in_channels: int = 4
    base_channels: int = 16
    num_down: int = 5
    num_transformer_layers: int = 2
    embed_dim: int = 256
    num_heads: int = 8
    ffn_hidden: int = 0  # 0 means 4 * embed_dim
    patch_extents: tuple = (160, 192, 160)
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_hidden == 0:
            self.ffn_hidden = 4 * self.embed_dim
        if self.num_down < 3:
            raise ConfigError(
                "num_down must be >= 3: the three supervision heads sit at the "
                "last three decoder levels"
            )
        if len(self.patch_extents) != 3:
            raise ConfigError("patch_extents must have three entries (D, H, W)")
        scale = 1 << self.num_down
        for axis, ext in zip(_AXES, self.patch_extents):
            if ext <= 0 or ext % scale != 0:
                raise ConfigError(
                    f"patch extent {axis}={ext} is not divisible by 2^{self.num_down}"
                )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.base_channels << (self.num_down - 1) < self.embed_dim:
            raise ConfigError(
                "channel schedule never reaches embed_dim: "
                f"base_channels {self.base_channels} doubled over {self.num_down} "
                f"levels tops out below {self.embed_dim}"
            )
        # deepest encoder stage still runs instance_norm, which needs at
        # least two voxels to have a variance
        if self.bottleneck_voxels() < 2:
            raise ConfigError(
                f"bottleneck collapses to {self.bottleneck_extents()} "
                "(< 2 voxels); reduce num_down or enlarge the patch"
            )

    def stage_channels(self):
        """Encoder channel count per level, doubling from base, capped at embed_dim."""
        return tuple(
            min(self.base_channels << i, self.embed_dim) for i in range(self.num_down)
        )

    def bottleneck_extents(self):
        return tuple(e >> self.num_down for e in self.patch_extents)

    def bottleneck_voxels(self):
        d, h, w = self.bottleneck_extents()
        return d * h * w

    def decoder_channels(self):
        sc = self.stage_channels()
        out = [sc[self.num_down - 2 - j] for j in range(self.num_down - 1)]
        out.append(self.base_channels)  # full-resolution level, no skip to mirror
        return tuple(out)


def _walk(cfg):
    """Yield (name, shape, init_kind) for every parameter, in a fixed order."""
    sc = cfg.stage_channels()
    prev = cfg.in_channels
    for i in range(cfg.num_down):
        yield f"enc{i}.conv.w", (sc[i], prev, 3, 3, 3), "conv"
        yield f"enc{i}.conv.b", (sc[i],), "zeros"
        yield f"enc{i}.norm.g", (sc[i],), "ones"
        yield f"enc{i}.norm.b", (sc[i],), "zeros"
        prev = sc[i]

    d = cfg.embed_dim
    yield "pos_embed", (1, cfg.bottleneck_voxels(), d), "pos"
    for i in range(cfg.num_transformer_layers):
        p = f"tr{i}."
        yield p + "ln1.g", (d,), "ones"
        yield p + "ln1.b", (d,), "zeros"
        for proj in ("wq", "wk", "wv", "wo"):
            yield p + "attn." + proj, (d, d), "linear"
        for b in ("bq", "bk", "bv", "bo"):
            yield p + "attn." + b, (d,), "zeros"
        yield p + "ln2.g", (d,), "ones"
        yield p + "ln2.b", (d,), "zeros"
        yield p + "ffn.w1", (d, cfg.ffn_hidden), "linear"
        yield p + "ffn.b1", (cfg.ffn_hidden,), "zeros"
        yield p + "ffn.w2", (cfg.ffn_hidden, d), "linear"
        yield p + "ffn.b2", (d,), "zeros"

    dc = cfg.decoder_channels()
    cin = d
    for j in range(cfg.num_down):
        cout = dc[j]
        p = f"dec{j}."
        yield p + "up.w", (cin, cout, 2, 2, 2), "convt"
        yield p + "up.b", (cout,), "zeros"
        cat = 2 * cout if j <= cfg.num_down - 2 else cout
        yield p + "conv1.w", (cout, cat, 3, 3, 3), "conv"
        yield p + "conv1.b", (cout,), "zeros"
        yield p + "norm1.g", (cout,), "ones"
        yield p + "norm1.b", (cout,), "zeros"
        yield p + "conv2.w", (cout, cout, 3, 3, 3), "conv"
        yield p + "conv2.b", (cout,), "zeros"
        yield p + "norm2.g", (cout,), "ones"
        yield p + "norm2.b", (cout,), "zeros"
        cin = cout

    # heads at the last three decoder levels: full, half, quarter resolution;
    # biases start at a negative prior since foreground is always sparse
    for k, j in enumerate(range(cfg.num_down - 1, cfg.num_down - 4, -1)):
        yield f"head{k}.w", (3, dc[j], 1, 1, 1), "conv"
        yield f"head{k}.b", (3,), "prior"


def parameter_shapes(cfg):
    return {name: shape for name, shape, _ in _walk(cfg)}


def parameter_count(cfg):
    """Total scalar parameter count; a pure function of the config."""
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def _init_array(shape, kind, slope, rng):
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "conv":
        fan_in = shape[1] * int(np.prod(shape[2:]))
        std = np.sqrt(2.0 / (fan_in * (1.0 + slope * slope)))
        return rng.standard_normal(shape) * std
    if kind == "convt":
        fan_in = shape[0] * int(np.prod(shape[2:]))
        std = np.sqrt(2.0 / (fan_in * (1.0 + slope * slope)))
        return rng.standard_normal(shape) * std
    if kind == "linear":
        std = np.sqrt(2.0 / (shape[0] + shape[1]))
        return rng.standard_normal(shape) * std
    if kind == "pos":
        return rng.standard_normal(shape) * 0.02
    if kind == "prior":
        return np.full(shape, -2.0)
    raise ValueError(f"unknown init kind {kind!r}")


def init_params(cfg, rng, dtype=np.float32):
    params = {}
    for name, shape, kind in _walk(cfg):
        arr = _init_array(shape, kind, cfg.leaky_slope, rng).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def encode(x, params, cfg):
    """Run the strided encoder; returns per-level features, shallowest first."""
    sc = cfg.stage_channels()
    prev = cfg.in_channels
    feats = []
    h = x
    for i in range(cfg.num_down):
        spec = Conv3dSpec(
            prev, sc[i], (3, 3, 3), (2, 2, 2), (1, 1, 1),
            params[f"enc{i}.conv.w"], params[f"enc{i}.conv.b"],
        )
        h = conv3d(h, spec)
        h = instance_norm(h, params[f"enc{i}.norm.g"], params[f"enc{i}.norm.b"],
                          cfg.norm_eps)
        h = leaky_relu(h, cfg.leaky_slope)
        feats.append(h)
        prev = sc[i]
    return feats


def sequence_and_embed(bottleneck, pos_embed):
    """Flatten [N,d,D,H,W] voxels to row-major tokens [N,T,d] and add positions."""
    n, d = bottleneck.shape[0], bottleneck.shape[1]
    t = int(np.prod(bottleneck.shape[2:]))
    tok = engine.reshape(bottleneck, (n, d, t))
    tok = engine.transpose(tok, (0, 2, 1))
    return engine.add(tok, pos_embed)


def desequence(tokens, extents):
    """Inverse of the flatten step (position embedding aside)."""
    n, t, d = tokens.shape
    if t != int(np.prod(extents)):
        raise ContractViolation(
            f"token count {t} does not match extents {tuple(extents)}"
        )
    vol = engine.transpose(tokens, (0, 2, 1))
    return engine.reshape(vol, (n, d) + tuple(extents))


def transformer_bottleneck(tokens, params, cfg):
    """Pre-norm transformer layers wrapped in an outer additive shortcut.

    y_0 = tokens; each layer applies attention then a feed-forward block,
    both residual; the return value is tokens + y_L, so with zeroed output
    projections the whole block is exactly a doubling.
    """
    d = cfg.embed_dim
    y = tokens
    for i in range(cfg.num_transformer_layers):
        p = f"tr{i}."
        normed = layer_norm(y, params[p + "ln1.g"], params[p + "ln1.b"], cfg.norm_eps)
        spec = AttentionSpec(
            d, cfg.num_heads,
            params[p + "attn.wq"], params[p + "attn.wk"],
            params[p + "attn.wv"], params[p + "attn.wo"],
            params[p + "attn.bq"], params[p + "attn.bk"],
            params[p + "attn.bv"], params[p + "attn.bo"],
        )
        y = engine.add(multi_head_attention(normed, spec), y)
        normed = layer_norm(y, params[p + "ln2.g"], params[p + "ln2.b"], cfg.norm_eps)
        mid = leaky_relu(linear(normed, params[p + "ffn.w1"], params[p + "ffn.b1"]),
                         cfg.leaky_slope)
        y = engine.add(linear(mid, params[p + "ffn.w2"], params[p + "ffn.b2"]), y)
    return engine.add(tokens, y)


def _decoder_block(h, skip, j, params, cfg, cin, cout):
    p = f"dec{j}."
    up = Conv3dSpec(cin, cout, (2, 2, 2), (2, 2, 2), (0, 0, 0),
                    params[p + "up.w"], params[p + "up.b"])
    h = conv_transpose3d(h, up)
    if skip is not None:
        if h.shape[2:] != skip.shape[2:]:
            raise ContractViolation(
                f"decoder level {j}: upsampled extents {h.shape[2:]} do not "
                f"match skip extents {skip.shape[2:]}"
            )
        h = concat_channels([h, skip])
    cat = h.shape[1]
    c1 = Conv3dSpec(cat, cout, (3, 3, 3), (1, 1, 1), (1, 1, 1),
                    params[p + "conv1.w"], params[p + "conv1.b"])
    h = conv3d(h, c1)
    h = instance_norm(h, params[p + "norm1.g"], params[p + "norm1.b"], cfg.norm_eps)
    h = leaky_relu(h, cfg.leaky_slope)
    c2 = Conv3dSpec(cout, cout, (3, 3, 3), (1, 1, 1), (1, 1, 1),
                    params[p + "conv2.w"], params[p + "conv2.b"])
    h = conv3d(h, c2)
    h = instance_norm(h, params[p + "norm2.g"], params[p + "norm2.b"], cfg.norm_eps)
    return leaky_relu(h, cfg.leaky_slope)


def _head(h, k, params):
    spec = Conv3dSpec(h.shape[1], 3, (1, 1, 1), (1, 1, 1), (0, 0, 0),
                      params[f"head{k}.w"], params[f"head{k}.b"])
    return sigmoid(conv3d(h, spec))


def decode(pyramid, bottleneck_out, params, cfg):
    """Decode to three probability maps at full, half, and quarter resolution."""
    dc = cfg.decoder_channels()
    nd = cfg.num_down
    h = bottleneck_out
    cin = cfg.embed_dim
    heads = {}
    for j in range(nd):
        skip = pyramid[nd - 2 - j] if j <= nd - 2 else None
        h = _decoder_block(h, skip, j, params, cfg, cin, dc[j])
        cin = dc[j]
        if j == nd - 3:
            heads["quarter"] = _head(h, 2, params)
        elif j == nd - 2:
            heads["half"] = _head(h, 1, params)
        elif j == nd - 1:
            heads["full"] = _head(h, 0, params)
    return heads["full"], heads["half"], heads["quarter"]


def generator_forward(x, params, cfg):
    """Full forward pass; returns (full, half, quarter) region probability maps."""
    if x.shape[1] != cfg.in_channels:
        raise ContractViolation(
            f"input has {x.shape[1]} channels, config expects {cfg.in_channels}"
        )
    if tuple(x.shape[2:]) != tuple(cfg.patch_extents):
        raise ContractViolation(
            f"input extents {tuple(x.shape[2:])} do not match patch_extents "
            f"{tuple(cfg.patch_extents)}"
        )
    pyramid = encode(x, params, cfg)
    tokens = sequence_and_embed(pyramid[-1], params["pos_embed"])
    y = transformer_bottleneck(tokens, params, cfg)
    vol = desequence(y, cfg.bottleneck_extents())
    return decode(pyramid, vol, params, cfg)


def shape_report(cfg):
    """Arithmetic-only shape summary; never allocates activation memory."""
    pe = cfg.patch_extents
    heads = [
        tuple(e >> k for e in pe) for k in range(3)
    ]
    return {
        "patch_extents": tuple(pe),
        "stage_extents": [tuple(e >> (i + 1) for e in pe) for i in range(cfg.num_down)],
        "stage_channels": list(cfg.stage_channels()),
        "bottleneck_extents": cfg.bottleneck_extents(),
        "token_count": cfg.bottleneck_voxels(),
        "embed_dim": cfg.embed_dim,
        "head_extents": heads,
        "parameter_count": parameter_count(cfg),
    }
