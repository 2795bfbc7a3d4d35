"""Encoder/decoder transformer stacks and their parameter store.

Everything is float64 NumPy. Each layer is a pair of pure functions,
``*_fwd(...) -> (out, cache)`` and ``*_bwd(dout, cache) -> grads``, so the
whole model has an explicit, finite-difference-checkable backward pass
without an autograd framework.

Weight sharing is structural: the sketch branch runs the same encoder
tensors as the image branch (same dict entries, no copies), and the image
and sketch branches share one patch projection, so single-channel sketch
maps are replicated to three channels before embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterator

import numpy as np
from scipy.special import erf, ndtr, ndtri

from .errors import ConfigError, NumericError, StructuralError
from .seeding import derive_rng
from .tokenizer import MaskPlan, TokenEmbeddings

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))
_TRUNC_LO = float(ndtr(-2.0))
_TRUNC_HI = float(ndtr(2.0))
_LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-scale model."""

    image_size: int = 224
    patch_size: int = 16
    d_enc: int = 768
    d_dec: int = 512
    enc_depth: int = 12
    dec_depth: int = 8
    enc_heads: int = 12
    dec_heads: int = 16
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    distill_dim: int = 256
    sem_dim: int = 512
    temperature: float = 1.0

    def __post_init__(self) -> None:
        for name in ("image_size", "patch_size", "d_enc", "d_dec", "enc_heads", "dec_heads",
                     "distill_dim", "sem_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.enc_depth < 0 or self.dec_depth < 0:
            raise ConfigError("depths must be >= 0")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_enc % self.enc_heads:
            raise ConfigError(f"d_enc {self.d_enc} not divisible by enc_heads {self.enc_heads}")
        if self.d_dec % self.dec_heads:
            raise ConfigError(f"d_dec {self.d_dec} not divisible by dec_heads {self.dec_heads}")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if int(self.d_enc * self.mlp_ratio) < 1 or int(self.d_dec * self.mlp_ratio) < 1:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} yields an empty hidden layer")

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return (side, side)

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def _block_shapes(d: int, mlp_ratio: float) -> list[tuple[str, tuple[int, ...]]]:
    hidden = int(d * mlp_ratio)
    return [
        ("norm1.scale", (d,)),
        ("norm1.shift", (d,)),
        ("attn.qkv_weight", (d, 3 * d)),
        ("attn.qkv_bias", (3 * d,)),
        ("attn.out_weight", (d, d)),
        ("attn.out_bias", (d,)),
        ("norm2.scale", (d,)),
        ("norm2.shift", (d,)),
        ("mlp.fc1_weight", (d, hidden)),
        ("mlp.fc1_bias", (hidden,)),
        ("mlp.fc2_weight", (hidden, d)),
        ("mlp.fc2_bias", (d,)),
    ]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical (name -> shape) map; iteration order is the storage order."""
    n, de, dd, k = config.n_patches, config.d_enc, config.d_dec, config.distill_dim
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["patch_embed.weight"] = (config.patch_dim, de)
    shapes["patch_embed.bias"] = (de,)
    shapes["cls_token"] = (de,)
    shapes["pos_image"] = (1 + n, de)
    shapes["pos_sketch"] = (1 + n, de)
    for i in range(config.enc_depth):
        for name, shape in _block_shapes(de, config.mlp_ratio):
            shapes[f"encoder.{i}.{name}"] = shape
    shapes["decoder_embed.weight"] = (de, dd)
    shapes["decoder_embed.bias"] = (dd,)
    shapes["mask_token"] = (dd,)
    shapes["pos_decoder"] = (1 + n, dd)
    for i in range(config.dec_depth):
        for name, shape in _block_shapes(dd, config.mlp_ratio):
            shapes[f"decoder.{i}.{name}"] = shape
    shapes["pixel_head.weight"] = (dd, config.patch_dim)
    shapes["pixel_head.bias"] = (config.patch_dim,)
    shapes["distill_patch.teacher"] = (de, k)
    shapes["distill_patch.student"] = (dd, k)
    shapes["distill_cls.teacher"] = (de, k)
    shapes["distill_cls.student"] = (dd, k)
    shapes["semantic_head.weight"] = (dd, config.sem_dim)
    return shapes


@dataclass
class ModelParams:
    """Flat named tensor store plus the config that fixes every shape."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def names(self) -> Iterator[str]:
        return iter(self.tensors)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def validate(self) -> None:
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise StructuralError(f"missing parameter tensor {name!r}")
            got = self.tensors[name].shape
            if got != shape:
                raise StructuralError(f"tensor {name!r} has shape {got}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise NumericError(f"tensor {name!r} contains non-finite values")
        extra = set(self.tensors) - set(expected)
        if extra:
            raise StructuralError(f"unexpected parameter tensors: {sorted(extra)}")


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    u = rng.uniform(_TRUNC_LO, _TRUNC_HI, size=shape)
    return ndtri(u) * std


def init_params(config: ModelConfig, seed: int, std: float = 0.02) -> ModelParams:
    """Fresh parameters: truncated N(0, std^2) weights and embeddings
    (clipped at two sigma), zero biases and shifts, unit norm scales.
    Bit-identical for identical (config, seed)."""
    rng = derive_rng(seed, "init")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "shift"):
            tensors[name] = np.zeros(shape, dtype=np.float64)
        elif leaf == "scale":
            tensors[name] = np.ones(shape, dtype=np.float64)
        else:
            tensors[name] = _trunc_normal(rng, shape, std)
    return ModelParams(config=config, tensors=tensors)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# layer kernels
# ---------------------------------------------------------------------------


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_bwd(dout: np.ndarray, cache):
    x, w, has_bias = cache
    dx = dout @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x2.T @ d2
    db = d2.sum(axis=0) if has_bias else None
    return dx, dw, db


def layernorm_fwd(x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float = _LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    return xhat * scale + shift, (xhat, inv, scale)


def layernorm_bwd(dout: np.ndarray, cache):
    xhat, inv, scale = cache
    d = xhat.shape[-1]
    flat_dout = dout.reshape(-1, d)
    flat_xhat = xhat.reshape(-1, d)
    dscale = (flat_dout * flat_xhat).sum(axis=0)
    dshift = flat_dout.sum(axis=0)
    dxhat = dout * scale
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dscale, dshift


def gelu_fwd(x: np.ndarray):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_bwd(dout: np.ndarray, cache):
    x, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dout * (cdf + x * pdf)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(dout: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


def attention_fwd(x: np.ndarray, t: dict, prefix: str, heads: int):
    """Multi-head self-attention on x [B, n, d]."""
    B, n, d = x.shape
    hd = d // heads
    scale = 1.0 / np.sqrt(hd)
    qkv_lin, c_qkv = linear_fwd(x, t[f"{prefix}.attn.qkv_weight"], t[f"{prefix}.attn.qkv_bias"])
    qkv = qkv_lin.reshape(B, n, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    attn = softmax(scores)
    ctx = attn @ v
    merged = ctx.transpose(0, 2, 1, 3).reshape(B, n, d)
    out, c_out = linear_fwd(merged, t[f"{prefix}.attn.out_weight"], t[f"{prefix}.attn.out_bias"])
    return out, (c_qkv, q, k, v, attn, c_out, heads, scale)


def attention_bwd(dout: np.ndarray, cache, grads: dict, prefix: str):
    c_qkv, q, k, v, attn, c_out, heads, scale = cache
    B, h, n, hd = q.shape
    d = h * hd
    dmerged, dwo, dbo = linear_bwd(dout, c_out)
    grads[f"{prefix}.attn.out_weight"] += dwo
    grads[f"{prefix}.attn.out_bias"] += dbo
    dctx = dmerged.reshape(B, n, h, hd).transpose(0, 2, 1, 3)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = softmax_bwd(dattn, attn) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv], axis=0).transpose(1, 3, 0, 2, 4).reshape(B, n, 3 * d)
    dx, dwqkv, dbqkv = linear_bwd(dqkv, c_qkv)
    grads[f"{prefix}.attn.qkv_weight"] += dwqkv
    grads[f"{prefix}.attn.qkv_bias"] += dbqkv
    return dx


def block_fwd(x: np.ndarray, t: dict, prefix: str, heads: int):
    """Pre-norm transformer block: x + MSA(LN(x)), then + MLP(LN(.))."""
    a, c_ln1 = layernorm_fwd(x, t[f"{prefix}.norm1.scale"], t[f"{prefix}.norm1.shift"])
    attn_out, c_attn = attention_fwd(a, t, prefix, heads)
    x1 = x + attn_out
    m, c_ln2 = layernorm_fwd(x1, t[f"{prefix}.norm2.scale"], t[f"{prefix}.norm2.shift"])
    h1, c_fc1 = linear_fwd(m, t[f"{prefix}.mlp.fc1_weight"], t[f"{prefix}.mlp.fc1_bias"])
    g, c_gelu = gelu_fwd(h1)
    mlp_out, c_fc2 = linear_fwd(g, t[f"{prefix}.mlp.fc2_weight"], t[f"{prefix}.mlp.fc2_bias"])
    return x1 + mlp_out, (c_ln1, c_attn, c_ln2, c_fc1, c_gelu, c_fc2)


def block_bwd(dout: np.ndarray, cache, grads: dict, prefix: str):
    c_ln1, c_attn, c_ln2, c_fc1, c_gelu, c_fc2 = cache
    dg, dw2, db2 = linear_bwd(dout, c_fc2)
    grads[f"{prefix}.mlp.fc2_weight"] += dw2
    grads[f"{prefix}.mlp.fc2_bias"] += db2
    dh1 = gelu_bwd(dg, c_gelu)
    dm, dw1, db1 = linear_bwd(dh1, c_fc1)
    grads[f"{prefix}.mlp.fc1_weight"] += dw1
    grads[f"{prefix}.mlp.fc1_bias"] += db1
    dx1, dsc2, dsh2 = layernorm_bwd(dm, c_ln2)
    dx1 = dx1 + dout
    da = attention_bwd(dx1, c_attn, grads, prefix)
    dx, dsc1, dsh1 = layernorm_bwd(da, c_ln1)
    grads[f"{prefix}.norm2.scale"] += dsc2
    grads[f"{prefix}.norm2.shift"] += dsh2
    grads[f"{prefix}.norm1.scale"] += dsc1
    grads[f"{prefix}.norm1.shift"] += dsh1
    return dx + dx1


def blocks_fwd(x: np.ndarray, t: dict, stack: str, depth: int, heads: int, keep_cache: bool):
    caches = [] if keep_cache else None
    for i in range(depth):
        x, cache = block_fwd(x, t, f"{stack}.{i}", heads)
        if keep_cache:
            caches.append(cache)
    return x, caches


def blocks_bwd(dout: np.ndarray, caches, grads: dict, stack: str):
    for i in reversed(range(len(caches))):
        dout = block_bwd(dout, caches[i], grads, f"{stack}.{i}")
    return dout


# ---------------------------------------------------------------------------
# public single-sample ops
# ---------------------------------------------------------------------------


@dataclass
class FeatureBundle:
    """Everything the decoder pass produces for one sample."""

    enc_tokens: np.ndarray  # [1 + n_visible, d_enc]
    dec_tokens: np.ndarray  # [1 + n_patches, d_dec]
    cls_feature: np.ndarray  # [d_dec], row 0 of dec_tokens
    pixel_pred: np.ndarray  # [n_masked, patch_dim]
    mask: MaskPlan


def _check_finite_tokens(tokens: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(tokens)
    if bad.any():
        row = int(np.argwhere(bad.any(axis=tuple(range(1, tokens.ndim))))[0][0])
        raise NumericError(f"{what} contains non-finite values (first bad token row {row})")


def encode(tokens: TokenEmbeddings, params: ModelParams) -> np.ndarray:
    """Run the encoder stack over an embedded token sequence."""
    x = np.asarray(tokens.tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.config.d_enc:
        raise StructuralError(
            f"encoder expects [n, {params.config.d_enc}] tokens, got shape {x.shape}"
        )
    _check_finite_tokens(x, "encoder input")
    cfg = params.config
    out, _ = blocks_fwd(x[None], params.tensors, "encoder", cfg.enc_depth, cfg.enc_heads, False)
    return out[0]


def forward_sketch(sketch_tokens: TokenEmbeddings, params: ModelParams) -> np.ndarray:
    """Encode a full (unmasked) sketch token sequence with the shared encoder.

    This is the teacher pass of the structural prior: it reads the very same
    encoder tensors as `encode`, by construction rather than by copying.
    """
    expected = 1 + params.config.n_patches
    if sketch_tokens.tokens.shape[0] != expected:
        raise StructuralError(
            f"sketch pass needs the full grid: {expected} tokens, got "
            f"{sketch_tokens.tokens.shape[0]}"
        )
    return encode(sketch_tokens, params)


def decode(
    encoded: np.ndarray,
    mask: MaskPlan,
    params: ModelParams,
    visible_order: np.ndarray | None = None,
) -> FeatureBundle:
    """Decode an encoded visible sequence back to the full patch grid.

    The encoded rows are projected to decoder width, scattered to their
    original grid slots, and every masked slot is filled with the shared
    mask token before decoder position encodings are added. `visible_order`
    states which patch index each encoded row (after CLS) belongs to; by
    default rows follow mask.visible_idx in sorted order.
    """
    cfg = params.config
    encoded = np.asarray(encoded, dtype=np.float64)
    if encoded.ndim != 2 or encoded.shape[1] != cfg.d_enc:
        raise StructuralError(f"encoded tokens must be [n, {cfg.d_enc}], got {encoded.shape}")
    if mask.n_tokens != cfg.n_patches:
        raise StructuralError(
            f"mask covers {mask.n_tokens} tokens but the model grid has {cfg.n_patches}"
        )
    if encoded.shape[0] != 1 + mask.n_visible:
        raise StructuralError(
            f"encoded sequence has {encoded.shape[0]} rows, expected {1 + mask.n_visible} "
            "(CLS + visible)"
        )
    if visible_order is None:
        order = mask.visible_idx
    else:
        order = np.asarray(visible_order, dtype=np.int64)
        if not np.array_equal(np.sort(order), mask.visible_idx):
            raise StructuralError("visible_order must be a permutation of mask.visible_idx")
    t = params.tensors
    proj, _ = linear_fwd(encoded, t["decoder_embed.weight"], t["decoder_embed.bias"])
    full = np.empty((1 + cfg.n_patches, cfg.d_dec), dtype=np.float64)
    full[0] = proj[0]
    full[1 + order] = proj[1:]
    full[1 + mask.masked_idx] = t["mask_token"]
    full = full + t["pos_decoder"]
    dec, _ = blocks_fwd(full[None], t, "decoder", cfg.dec_depth, cfg.dec_heads, False)
    dec = dec[0]
    pix, _ = linear_fwd(dec[1 + mask.masked_idx], t["pixel_head.weight"], t["pixel_head.bias"])
    return FeatureBundle(
        enc_tokens=encoded, dec_tokens=dec, cls_feature=dec[0], pixel_pred=pix, mask=mask
    )


# ---------------------------------------------------------------------------
# batched branch forward/backward used by the trainer
# ---------------------------------------------------------------------------


def image_branch_fwd(flat_patches: np.ndarray, vis_idx: np.ndarray, masked_idx: np.ndarray,
                     params: ModelParams, keep_cache: bool):
    """Masked-image branch over a batch.

    flat_patches [B, N, patch_dim], vis_idx [B, n_vis], masked_idx [B, n_m].
    Returns (enc_out, dec_out, pixel_pred, cache).
    """
    cfg = params.config
    t = params.tensors
    B = flat_patches.shape[0]
    rows = np.arange(B)[:, None]
    vis_flat = flat_patches[rows, vis_idx]
    emb, c_emb = linear_fwd(vis_flat, t["patch_embed.weight"], t["patch_embed.bias"])
    x = np.empty((B, 1 + vis_idx.shape[1], cfg.d_enc), dtype=np.float64)
    x[:, 0] = t["cls_token"] + t["pos_image"][0]
    x[:, 1:] = emb + t["pos_image"][1 + vis_idx]
    enc_out, c_enc = blocks_fwd(x, t, "encoder", cfg.enc_depth, cfg.enc_heads, keep_cache)
    proj, c_proj = linear_fwd(enc_out, t["decoder_embed.weight"], t["decoder_embed.bias"])
    full = np.empty((B, 1 + cfg.n_patches, cfg.d_dec), dtype=np.float64)
    full[:, 0] = proj[:, 0]
    full[rows, 1 + vis_idx] = proj[:, 1:]
    full[rows, 1 + masked_idx] = t["mask_token"]
    full = full + t["pos_decoder"]
    dec_out, c_dec = blocks_fwd(full, t, "decoder", cfg.dec_depth, cfg.dec_heads, keep_cache)
    masked_feats = dec_out[rows, 1 + masked_idx]
    pix, c_pix = linear_fwd(masked_feats, t["pixel_head.weight"], t["pixel_head.bias"])
    cache = (c_emb, c_enc, c_proj, c_dec, c_pix, vis_idx, masked_idx) if keep_cache else None
    return enc_out, dec_out, pix, cache


def image_branch_bwd(dpix: np.ndarray, ddec_out: np.ndarray, cache, params: ModelParams,
                     grads: dict) -> None:
    """Backward for image_branch_fwd.

    dpix is the gradient on pixel predictions, ddec_out the gradient arriving
    directly on decoder output tokens (distillation, semantic head). Both may
    be zero arrays. Accumulates into `grads` in place.
    """
    c_emb, c_enc, c_proj, c_dec, c_pix, vis_idx, masked_idx = cache
    B = vis_idx.shape[0]
    rows = np.arange(B)[:, None]
    ddec = ddec_out.copy()
    dfeats, dwpix, dbpix = linear_bwd(dpix, c_pix)
    grads["pixel_head.weight"] += dwpix
    grads["pixel_head.bias"] += dbpix
    np.add.at(ddec, (rows, 1 + masked_idx), dfeats)
    dfull = blocks_bwd(ddec, c_dec, grads, "decoder")
    grads["pos_decoder"] += dfull.sum(axis=0)
    grads["mask_token"] += dfull[rows, 1 + masked_idx].sum(axis=(0, 1))
    dproj = np.empty((B, 1 + vis_idx.shape[1], params.config.d_dec), dtype=np.float64)
    dproj[:, 0] = dfull[:, 0]
    dproj[:, 1:] = dfull[rows, 1 + vis_idx]
    denc, dwproj, dbproj = linear_bwd(dproj, c_proj)
    grads["decoder_embed.weight"] += dwproj
    grads["decoder_embed.bias"] += dbproj
    dtok = blocks_bwd(denc, c_enc, grads, "encoder")
    grads["cls_token"] += dtok[:, 0].sum(axis=0)
    grads["pos_image"][0] += dtok[:, 0].sum(axis=0)
    np.add.at(grads["pos_image"], 1 + vis_idx, dtok[:, 1:])
    _, dwemb, dbemb = linear_bwd(dtok[:, 1:], c_emb)
    grads["patch_embed.weight"] += dwemb
    grads["patch_embed.bias"] += dbemb


def sketch_branch_fwd(flat_patches: np.ndarray, params: ModelParams, keep_cache: bool):
    """Unmasked sketch branch: full grid through the shared encoder.

    flat_patches [B, N, patch_dim] (sketch replicated to 3 channels).
    Returns (enc_out [B, 1+N, d_enc], cache).
    """
    cfg = params.config
    t = params.tensors
    B = flat_patches.shape[0]
    emb, c_emb = linear_fwd(flat_patches, t["patch_embed.weight"], t["patch_embed.bias"])
    x = np.empty((B, 1 + cfg.n_patches, cfg.d_enc), dtype=np.float64)
    x[:, 0] = t["cls_token"] + t["pos_sketch"][0]
    x[:, 1:] = emb + t["pos_sketch"][1:]
    out, c_enc = blocks_fwd(x, t, "encoder", cfg.enc_depth, cfg.enc_heads, keep_cache)
    return out, ((c_emb, c_enc) if keep_cache else None)


def sketch_branch_bwd(dout: np.ndarray, cache, grads: dict) -> None:
    c_emb, c_enc = cache
    dtok = blocks_bwd(dout, c_enc, grads, "encoder")
    grads["cls_token"] += dtok[:, 0].sum(axis=0)
    grads["pos_sketch"] += dtok.sum(axis=0)
    _, dwemb, dbemb = linear_bwd(dtok[:, 1:], c_emb)
    grads["patch_embed.weight"] += dwemb
    grads["patch_embed.bias"] += dbemb
