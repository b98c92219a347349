"""Transformer variants over multi-channel images.

Five variants share one pre-norm encoder:

* ``channelvit_tied``    — one token per (channel, patch); projection shared
  across channels; learnable channel embeddings added per token.
* ``channelvit_untied``  — same token layout, per-channel projections.
* ``channelvit_shared_chn`` — tied structure; meant to be evaluated after
  replacing each channel embedding by the mean (see
  :func:`shared_channel_embedding_eval`).
* ``vit``                — one token per patch; per-channel projections summed,
  masked channels compensated by a C/|S| rescale.
* ``multivit``           — one single-channel backbone per channel, CLS outputs
  averaged into an MLP head.

Token sequences are batched as [B, L, D] with the CLS token at position 0.
"""

from dataclasses import dataclass, field, replace
import struct

import numpy as np

from . import tensor as T
from .errors import (ConfigurationError, FormatError, InputError,
                     UnsupportedVariantError)
from .sampling import ChannelCombination, full_combination

VARIANTS = ("channelvit_tied", "channelvit_untied", "channelvit_shared_chn",
            "vit", "multivit")
_CHANNELVIT_VARIANTS = ("channelvit_tied", "channelvit_untied", "channelvit_shared_chn")

LN_EPS = 1e-6

CHECKPOINT_MAGIC = b"CHVT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 32
    image_w: int = 32
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_hidden: int = 1536
    num_classes: int = 4
    variant: str = "channelvit_tied"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigurationError(
                f"image {self.image_h}x{self.image_w} not divisible by patch "
                f"size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigurationError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        for name in ("channels", "embed_dim", "depth", "heads", "mlp_hidden",
                     "num_classes"):
            if getattr(self, name) < (0 if name == "depth" else 1):
                raise ConfigurationError(f"{name} must be positive")

    @property
    def num_patches(self):
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def tokens_per_image(self):
        if self.variant in _CHANNELVIT_VARIANTS:
            return 1 + self.num_patches * self.channels
        return 1 + self.num_patches


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict

    def node(self, name):
        return self.params[name]

    def named(self):
        return sorted(self.params.items())

    def count(self):
        return sum(node.value.size for _, node in self.params.items())

    def copy(self):
        return ModelParams(self.config,
                           {k: T.param(v.value.copy()) for k, v in self.params.items()})

    def zero_grads(self):
        for node in self.params.values():
            node.grad = None


@dataclass
class TokenSequence:
    """Encoder input: CLS + embedded tokens, with index maps back to the image."""

    tokens: T.Node                 # [B, 1 + n_tokens, D]
    channel_of_token: np.ndarray   # [n_tokens], CLS excluded
    patch_of_token: np.ndarray     # [n_tokens], CLS excluded
    combination: ChannelCombination

    @property
    def length(self):
        return self.tokens.value.shape[1]


@dataclass
class ForwardResult:
    logits: T.Node                 # [B, K]
    attentions: list               # softmax nodes, one per block, if recorded


def _trunc_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def _init_encoder(rng, cfg, params, prefix=""):
    d, hdim = cfg.embed_dim, cfg.mlp_hidden
    for i in range(cfg.depth):
        b = f"{prefix}blocks.{i}."
        params[b + "ln1.gamma"] = T.param(np.ones(d))
        params[b + "ln1.beta"] = T.param(np.zeros(d))
        for w in ("wq", "wk", "wv", "wo"):
            params[b + "attn." + w] = T.param(_trunc_normal(rng, (d, d)))
        params[b + "ln2.gamma"] = T.param(np.ones(d))
        params[b + "ln2.beta"] = T.param(np.zeros(d))
        params[b + "mlp.w1"] = T.param(_trunc_normal(rng, (d, hdim)))
        params[b + "mlp.b1"] = T.param(np.zeros(hdim))
        params[b + "mlp.w2"] = T.param(_trunc_normal(rng, (hdim, d)))
        params[b + "mlp.b2"] = T.param(np.zeros(d))
    if cfg.depth > 0:
        params[f"{prefix}final_ln.gamma"] = T.param(np.ones(d))
        params[f"{prefix}final_ln.beta"] = T.param(np.zeros(d))


def init_params(cfg, seed=0):
    """Fresh parameters: truncated-normal (std 0.02) embeddings/projections,
    zeros for biases and the classifier head."""
    rng = np.random.default_rng(seed)
    d, p2, n = cfg.embed_dim, cfg.patch_size ** 2, cfg.num_patches
    params = {}

    if cfg.variant in _CHANNELVIT_VARIANTS:
        if cfg.variant == "channelvit_untied":
            for c in range(cfg.channels):
                params[f"proj_c{c}"] = T.param(_trunc_normal(rng, (p2, d)))
        else:
            params["proj"] = T.param(_trunc_normal(rng, (p2, d)))
        params["chn"] = T.param(_trunc_normal(rng, (cfg.channels, d)))
        params["pos"] = T.param(_trunc_normal(rng, (n, d)))
        params["cls"] = T.param(_trunc_normal(rng, (1, d)))
        _init_encoder(rng, cfg, params)
        params["head.w"] = T.param(np.zeros((d, cfg.num_classes)))
        params["head.b"] = T.param(np.zeros(cfg.num_classes))
    elif cfg.variant == "vit":
        for c in range(cfg.channels):
            params[f"proj_c{c}"] = T.param(_trunc_normal(rng, (p2, d)))
        params["bias"] = T.param(np.zeros(d))
        params["pos"] = T.param(_trunc_normal(rng, (n, d)))
        params["cls"] = T.param(_trunc_normal(rng, (1, d)))
        _init_encoder(rng, cfg, params)
        params["head.w"] = T.param(np.zeros((d, cfg.num_classes)))
        params["head.b"] = T.param(np.zeros(cfg.num_classes))
    elif cfg.variant == "multivit":
        for c in range(cfg.channels):
            pre = f"vit{c}."
            params[pre + "proj"] = T.param(_trunc_normal(rng, (p2, d)))
            params[pre + "bias"] = T.param(np.zeros(d))
            params[pre + "pos"] = T.param(_trunc_normal(rng, (n, d)))
            params[pre + "cls"] = T.param(_trunc_normal(rng, (1, d)))
            _init_encoder(rng, cfg, params, prefix=pre)
        params["head.w1"] = T.param(_trunc_normal(rng, (d, d)))
        params["head.b1"] = T.param(np.zeros(d))
        params["head.w2"] = T.param(np.zeros((d, cfg.num_classes)))
        params["head.b2"] = T.param(np.zeros(cfg.num_classes))
    return ModelParams(cfg, params)


def patchify(img, patch_size):
    """[C, H, W] image -> [C, N, P*P] patches, row-major patches and pixels."""
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    if h % patch_size or w % patch_size:
        raise ConfigurationError(
            f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = img.reshape(c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 1, 3, 2, 4)
    return x.reshape(c, gh * gw, patch_size * patch_size)


def patchify_batch(images, patch_size):
    """[B, C, H, W] -> [B, C, N, P*P]; same ordering as :func:`patchify`."""
    images = np.asarray(images, dtype=np.float64)
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigurationError(
            f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 1, 2, 4, 3, 5)
    return x.reshape(b, c, gh * gw, patch_size * patch_size)


def _check_combination(cfg, combination):
    comb = full_combination(cfg.channels) if combination is None else combination
    if comb.source_channels != cfg.channels:
        raise InputError(
            f"combination is over {comb.source_channels} channels, model has "
            f"{cfg.channels}")
    return comb


def _proj_node(params, channel):
    if params.config.variant == "channelvit_untied":
        return params.node(f"proj_c{channel}")
    return params.node("proj")


def embed_channelvit_batch(patches, params, combination=None):
    """Embed [B, C, N, P*P] patches into a channel-token sequence.

    Tokens are ordered (channel, patch), channel-major, matching the order of
    the combination's indices; CLS is prepended. Dropping channels only
    shortens the sequence; surviving tokens are untouched.
    """
    cfg = params.config
    if cfg.variant not in _CHANNELVIT_VARIANTS:
        raise UnsupportedVariantError(
            f"channel-token embedding undefined for variant {cfg.variant!r}")
    comb = _check_combination(cfg, combination)
    b, _, n, p2 = patches.shape
    d = cfg.embed_dim

    per_channel = []
    for c in comb.indices:
        flat = T.constant(patches[:, c].reshape(b * n, p2))
        proj = T.matmul(flat, _proj_node(params, c))
        per_channel.append(T.reshape(proj, (b, n, d)))
    content = per_channel[0] if len(per_channel) == 1 else T.concat(per_channel, axis=1)

    pos_idx = np.tile(np.arange(n), len(comb))
    chn_idx = np.repeat(np.asarray(comb.indices), n)
    pos_part = T.reshape(T.gather_rows(params.node("pos"), pos_idx), (1, len(comb) * n, d))
    chn_part = T.reshape(T.gather_rows(params.node("chn"), chn_idx), (1, len(comb) * n, d))
    content = T.add(T.add(content, pos_part), chn_part)

    cls = T.repeat_leading(params.node("cls"), b)
    tokens = T.concat([cls, content], axis=1)
    return TokenSequence(tokens, chn_idx.copy(), pos_idx.copy(), comb)


def embed_vit_batch(patches, params, combination=None):
    """Embed [B, C, N, P*P] patches into a per-patch sequence.

    Channels outside the combination contribute nothing; surviving channel
    contributions are rescaled by C/|S| so patch activations keep their scale.
    """
    cfg = params.config
    if cfg.variant != "vit":
        raise UnsupportedVariantError(
            f"per-patch embedding undefined for variant {cfg.variant!r}")
    comb = _check_combination(cfg, combination)
    b, _, n, p2 = patches.shape
    d = cfg.embed_dim
    factor = cfg.channels / len(comb)

    acc = None
    for c in comb.indices:
        flat = T.constant(patches[:, c].reshape(b * n, p2))
        term = T.matmul(flat, params.node(f"proj_c{c}"))
        if factor != 1.0:
            term = T.scale(term, factor)
        acc = term if acc is None else T.add(acc, term)
    content = T.reshape(acc, (b, n, d))
    pos_part = T.reshape(params.node("pos"), (1, n, d))
    content = T.add(T.add(content, pos_part), params.node("bias"))

    cls = T.repeat_leading(params.node("cls"), b)
    tokens = T.concat([cls, content], axis=1)
    return TokenSequence(tokens, np.full(n, -1), np.arange(n), comb)


def embed_channelvit(img, params, combination=None):
    """Single-image wrapper around :func:`embed_channelvit_batch` (B = 1)."""
    patches = patchify(img, params.config.patch_size)[None]
    return embed_channelvit_batch(patches, params, combination)


def embed_vit(img, params, combination=None):
    """Single-image wrapper around :func:`embed_vit_batch` (B = 1)."""
    patches = patchify(img, params.config.patch_size)[None]
    return embed_vit_batch(patches, params, combination)


def embed_batch(patches, params, combination=None):
    if params.config.variant == "vit":
        return embed_vit_batch(patches, params, combination)
    return embed_channelvit_batch(patches, params, combination)


def _encode(params, h, prefix="", attn_sink=None):
    cfg = params.config
    for i in range(cfg.depth):
        b = f"{prefix}blocks.{i}."
        pre = T.layer_norm(h, params.node(b + "ln1.gamma"), params.node(b + "ln1.beta"),
                           eps=LN_EPS)
        att = T.multihead_attention(pre, params.node(b + "attn.wq"),
                                    params.node(b + "attn.wk"),
                                    params.node(b + "attn.wv"),
                                    params.node(b + "attn.wo"),
                                    cfg.heads, attn_sink=attn_sink)
        h = T.add(h, att)
        pre = T.layer_norm(h, params.node(b + "ln2.gamma"), params.node(b + "ln2.beta"),
                           eps=LN_EPS)
        mid = T.gelu(T.add(T.matmul(pre, params.node(b + "mlp.w1")),
                           params.node(b + "mlp.b1")))
        out = T.add(T.matmul(mid, params.node(b + "mlp.w2")), params.node(b + "mlp.b2"))
        h = T.add(h, out)
    if cfg.depth > 0:
        h = T.layer_norm(h, params.node(f"{prefix}final_ln.gamma"),
                         params.node(f"{prefix}final_ln.beta"), eps=LN_EPS)
    return h


def forward(params, tokens, record_attention=False):
    """Run the encoder and classify the final CLS representation.

    `tokens` is a TokenSequence (or a raw [B, L, D] node). Returns logits
    [B, K] plus the per-block attention nodes when recording.
    """
    h = tokens.tokens if isinstance(tokens, TokenSequence) else tokens
    sink = [] if record_attention else None
    h = _encode(params, h, attn_sink=sink)
    batch, _, d = h.value.shape
    cls = T.reshape(T.slice_axis(h, axis=1, start=0, stop=1), (batch, d))
    logits = T.add(T.matmul(cls, params.node("head.w")), params.node("head.b"))
    return ForwardResult(logits, sink or [])


def forward_multivit_batch(patches, params, combination=None):
    """One single-channel backbone per channel in the combination; CLS outputs
    averaged, then a one-hidden-layer MLP head."""
    cfg = params.config
    if cfg.variant != "multivit":
        raise UnsupportedVariantError(f"forward_multivit needs variant 'multivit'")
    comb = _check_combination(cfg, combination)
    b, _, n, p2 = patches.shape
    d = cfg.embed_dim

    cls_sum = None
    for c in comb.indices:
        pre = f"vit{c}."
        flat = T.constant(patches[:, c].reshape(b * n, p2))
        content = T.reshape(T.matmul(flat, params.node(pre + "proj")), (b, n, d))
        content = T.add(T.add(content, T.reshape(params.node(pre + "pos"), (1, n, d))),
                        params.node(pre + "bias"))
        cls = T.repeat_leading(params.node(pre + "cls"), b)
        h = T.concat([cls, content], axis=1)
        h = _encode(params, h, prefix=pre)
        cls_out = T.reshape(T.slice_axis(h, axis=1, start=0, stop=1), (b, d))
        cls_sum = cls_out if cls_sum is None else T.add(cls_sum, cls_out)
    agg = T.scale(cls_sum, 1.0 / len(comb))

    hid = T.gelu(T.add(T.matmul(agg, params.node("head.w1")), params.node("head.b1")))
    logits = T.add(T.matmul(hid, params.node("head.w2")), params.node("head.b2"))
    return ForwardResult(logits, [])


def forward_multivit(per_image, params, combination=None):
    patches = patchify(per_image, params.config.patch_size)[None]
    return forward_multivit_batch(patches, params, combination)


def logits_for_patches(params, patches, combination=None, record_attention=False):
    """Embed + forward in one call; returns a ForwardResult."""
    if params.config.variant == "multivit":
        return forward_multivit_batch(patches, params, combination)
    tokens = embed_batch(patches, params, combination)
    return forward(params, tokens, record_attention=record_attention)


def shared_channel_embedding_eval(params):
    """Copy of `params` with every channel embedding replaced by the mean.

    Evaluation-time ablation for channel-token variants; the input is left
    untouched.
    """
    if params.config.variant not in _CHANNELVIT_VARIANTS:
        raise UnsupportedVariantError(
            f"variant {params.config.variant!r} has no channel embeddings")
    out = params.copy()
    chn = params.node("chn").value
    out.params["chn"] = T.param(np.tile(chn.mean(axis=0), (chn.shape[0], 1)))
    return out


_VARIANT_TAG = {name: i for i, name in enumerate(VARIANTS)}


def save_checkpoint(params, path):
    """Binary checkpoint: magic CHVT, u16 version, config block, then each
    parameter as (u16 name len, name, u8 rank, u32 dims, f32 LE payload)."""
    cfg = params.config
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<9I", cfg.image_h, cfg.image_w, cfg.patch_size,
                            cfg.channels, cfg.embed_dim, cfg.depth, cfg.heads,
                            cfg.mlp_hidden, cfg.num_classes))
        f.write(struct.pack("<B", _VARIANT_TAG[cfg.variant]))
        f.write(struct.pack("<I", len(params.params)))
        for name, node in params.named():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(node.value, dtype="<f4")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated reading {what}: "
                          f"wanted {n} bytes, got {len(data)}")
    return data


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        fields = struct.unpack("<9I", _read_exact(f, 36, "config"))
        (tag,) = struct.unpack("<B", _read_exact(f, 1, "variant"))
        if tag >= len(VARIANTS):
            raise FormatError(f"unknown variant tag {tag}")
        cfg = ModelConfig(image_h=fields[0], image_w=fields[1], patch_size=fields[2],
                          channels=fields[3], embed_dim=fields[4], depth=fields[5],
                          heads=fields[6], mlp_hidden=fields[7], num_classes=fields[8],
                          variant=VARIANTS[tag])
        (count,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            size = int(np.prod(dims)) if rank else 1
            payload = _read_exact(f, 4 * size, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
            params[name] = T.param(arr)
    return ModelParams(cfg, params)
