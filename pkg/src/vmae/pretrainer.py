"""Pre-training: loss composition, optimizer, loop, and persistence.

The total objective is a weighted sum of five parts: masked-pixel
reconstruction, patch-level and CLS-level sketch distillation, global
feature alignment to a frozen embedder, and similarity-distribution
consistency against that embedder. Every part is always computed and
reported; a disabled toggle forces its weight (and therefore its gradient)
to zero without hiding the value.

Checkpoint layout (little endian throughout)::

    VMAE1 1\\n
    <header byte length>\\n
    <JSON header: config, counters, tensor index (name, dtype, shape, offset)>
    <raw tensor bytes, concatenated in index order>
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .backbone import (
    ModelConfig,
    ModelParams,
    image_branch_bwd,
    image_branch_fwd,
    init_params,
    param_shapes,
    sketch_branch_bwd,
    sketch_branch_fwd,
    softmax,
    zero_grads,
)
from .dataio import Batch, DatasetManifest, make_batches
from .errors import (
    CheckpointError,
    ConfigError,
    NumericError,
    ParameterError,
    ParseError,
    StructuralError,
)
from .seeding import derive_seed
from .semantic_prior import StubEmbedder
from .structural_prior import cls_heads, patch_heads, soft_ce_rows_bwd, soft_ce_rows_fwd
from .tokenizer import flatten_patches, sample_mask

_CKPT_MAGIC = "VMAE1"
_CKPT_VERSION = 1
METRICS_HEADER = "step, l_r, l_mim, l_cls, l_cf, l_cs, total, lr"


@dataclass(frozen=True)
class LossWeights:
    """Weights on the five loss components, in reporting order."""

    reconstruction: float = 4.0
    patch_distill: float = 0.02
    cls_distill: float = 0.02
    feature_align: float = 2.0
    consistency: float = 0.1

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (
            self.reconstruction,
            self.patch_distill,
            self.cls_distill,
            self.feature_align,
            self.consistency,
        )


@dataclass(frozen=True)
class LossToggles:
    """Independent on/off switches; off forces the effective weight to zero."""

    reconstruction: bool = True
    patch_distill: bool = True
    cls_distill: bool = True
    feature_align: bool = True
    consistency: bool = True


@dataclass
class LossBreakdown:
    """All five component values, their effective weights, and the total."""

    reconstruction: float
    patch_distill: float
    cls_distill: float
    feature_align: float
    consistency: float
    weights: LossWeights
    total: float
    n_captioned: int = 0
    n_masked_pixels: int = 0
    fault: bool = False

    def component_tuple(self) -> tuple[float, float, float, float, float]:
        return (
            self.reconstruction,
            self.patch_distill,
            self.cls_distill,
            self.feature_align,
            self.consistency,
        )


def effective_weights(weights: LossWeights, toggles: LossToggles) -> LossWeights:
    return LossWeights(
        reconstruction=weights.reconstruction if toggles.reconstruction else 0.0,
        patch_distill=weights.patch_distill if toggles.patch_distill else 0.0,
        cls_distill=weights.cls_distill if toggles.cls_distill else 0.0,
        feature_align=weights.feature_align if toggles.feature_align else 0.0,
        consistency=weights.consistency if toggles.consistency else 0.0,
    )


def reconstruction_loss(
    targets: np.ndarray, preds: np.ndarray, n_masked_pixels: int | None = None
) -> float:
    """Mean squared error over masked pixels: sum((pred - target)^2) / N_m.

    N_m defaults to the element count of targets. Zero masked pixels yield
    0.0 with a RuntimeWarning rather than a division by zero.
    """
    targets = np.asarray(targets, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if targets.shape != preds.shape:
        raise StructuralError(
            f"target shape {targets.shape} does not match prediction shape {preds.shape}"
        )
    if n_masked_pixels is None:
        n_masked_pixels = targets.size
    if n_masked_pixels == 0:
        warnings.warn("reconstruction loss over zero masked pixels", RuntimeWarning)
        return 0.0
    diff = preds - targets
    return float((diff * diff).sum() / n_masked_pixels)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def total_loss(
    batch: Batch,
    params: ModelParams,
    weights: LossWeights | None = None,
    toggles: LossToggles | None = None,
    embedder=None,
    with_grads: bool = False,
    mim_normalize: bool = True,
    stop_teacher_grad: bool = False,
):
    """Forward (and optionally backward) pass of the full objective.

    Masks are drawn per sample from the batch seed, so the value is a pure
    function of (batch, params, flags). With with_grads the return value is
    (breakdown, grads) where grads has one entry per parameter tensor;
    toggled-off components contribute exactly zero gradient.
    """
    cfg = params.config
    weights = weights or LossWeights()
    toggles = toggles or LossToggles()
    eff = effective_weights(weights, toggles)

    images = np.asarray(batch.images, dtype=np.float64)
    if images.ndim != 4 or images.shape[3] != 3:
        raise StructuralError(f"batch images must be [B, H, W, 3], got {images.shape}")
    if images.shape[1] != cfg.image_size or images.shape[2] != cfg.image_size:
        raise StructuralError(
            f"batch images are {images.shape[1]}x{images.shape[2]}, model expects "
            f"{cfg.image_size}x{cfg.image_size}"
        )
    if not np.all(np.isfinite(images)):
        raise NumericError("batch images contain non-finite values")
    sketches = np.asarray(batch.sketches, dtype=np.float64)
    if sketches.shape != images.shape[:3] + (1,):
        raise StructuralError(
            f"batch sketches must be [B, H, W, 1] matching images, got {sketches.shape}"
        )
    bsz = images.shape[0]

    plans = [
        sample_mask(cfg.n_patches, cfg.mask_ratio, derive_seed(batch.seed, "sample-mask", i))
        for i in range(bsz)
    ]
    vis_idx = np.stack([p.visible_idx for p in plans])
    masked_idx = np.stack([p.masked_idx for p in plans])
    n_masked = masked_idx.shape[1]

    flat = flatten_patches(images, cfg.patch_size)
    rows = np.arange(bsz)[:, None]
    targets = flat[rows, masked_idx]

    _, dec_out, pix, cache_img = image_branch_fwd(
        flat, vis_idx, masked_idx, params, keep_cache=with_grads
    )
    n_masked_pixels = targets.size
    if n_masked_pixels:
        diff = pix - targets
        l_r = float((diff * diff).sum() / n_masked_pixels)
    else:
        l_r = 0.0

    sk_flat = flatten_patches(np.repeat(sketches, 3, axis=3), cfg.patch_size)
    need_sketch_grad = with_grads and not stop_teacher_grad and (
        eff.patch_distill != 0.0 or eff.cls_distill != 0.0
    )
    sketch_out, cache_sk = sketch_branch_fwd(sk_flat, params, keep_cache=need_sketch_grad)

    p_heads = patch_heads(params)
    c_heads = cls_heads(params)
    if n_masked:
        fs_rows = sketch_out[rows, 1 + masked_idx].reshape(bsz * n_masked, cfg.d_enc)
        ft_rows = dec_out[rows, 1 + masked_idx].reshape(bsz * n_masked, cfg.d_dec)
        mim_rows, mim_cache = soft_ce_rows_fwd(fs_rows, ft_rows, p_heads)
        denom = bsz * n_masked if mim_normalize else bsz
        l_mim = float(mim_rows.sum() / denom)
    else:
        mim_cache = None
        denom = 1
        l_mim = 0.0
    cls_rows, cls_cache = soft_ce_rows_fwd(sketch_out[:, 0], dec_out[:, 0], c_heads)
    l_cls = float(cls_rows.sum() / bsz)

    cap_idx = [i for i, c in enumerate(batch.captions) if c is not None]
    m_cap = len(cap_idx)
    sem_cache = None
    if m_cap:
        if embedder is None:
            raise ParameterError("an embedder is required when the batch carries captions")
        if embedder.dim != cfg.sem_dim:
            raise ConfigError(
                f"embedder dim {embedder.dim} does not match model sem_dim {cfg.sem_dim}"
            )
        v_hat = np.stack([embedder.embed_image(images[i]) for i in cap_idx])
        w_hat = np.stack([embedder.embed_text(batch.captions[i]) for i in cap_idx])
        g_raw = dec_out[cap_idx, 0] @ params.tensors["semantic_head.weight"]
        norms = np.linalg.norm(g_raw, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise NumericError("semantic projection produced a zero vector")
        g_hat = g_raw / norms
        diff_sem = g_hat - v_hat
        l_cf = float((diff_sem * diff_sem).sum() / m_cap)
        z_model = (g_hat @ w_hat.T) / cfg.temperature
        z_ref = (v_hat @ w_hat.T) / cfg.temperature
        logp_model = _log_softmax_rows(z_model)
        p_model = np.exp(logp_model)
        p_ref = softmax(z_ref)
        ent = -(p_model * logp_model).sum(axis=1)
        logp_ref = _log_softmax_rows(z_ref)
        kl = (p_ref * (logp_ref - logp_model)).sum(axis=1)
        l_cs = float((kl + ent).sum() / m_cap)
        sem_cache = (v_hat, w_hat, g_raw, g_hat, norms, p_model, logp_model, p_ref, ent)
    else:
        l_cf = 0.0
        l_cs = 0.0

    total = (
        eff.reconstruction * l_r
        + eff.patch_distill * l_mim
        + eff.cls_distill * l_cls
        + eff.feature_align * l_cf
        + eff.consistency * l_cs
    )
    breakdown = LossBreakdown(
        reconstruction=l_r,
        patch_distill=l_mim,
        cls_distill=l_cls,
        feature_align=l_cf,
        consistency=l_cs,
        weights=eff,
        total=float(total),
        n_captioned=m_cap,
        n_masked_pixels=n_masked_pixels,
    )
    if not with_grads:
        return breakdown

    grads = zero_grads(params)
    ddec = np.zeros_like(dec_out)
    if eff.reconstruction != 0.0 and n_masked_pixels:
        dpix = (2.0 * eff.reconstruction / n_masked_pixels) * (pix - targets)
    else:
        dpix = np.zeros_like(pix)

    dsketch = np.zeros_like(sketch_out) if need_sketch_grad else None
    if eff.patch_distill != 0.0 and n_masked:
        drows = np.full(bsz * n_masked, eff.patch_distill / denom)
        d_t, d_s, dh_t, dh_s = soft_ce_rows_bwd(drows, mim_cache)
        ddec[rows, 1 + masked_idx] += d_s.reshape(bsz, n_masked, cfg.d_dec)
        grads["distill_patch.student"] += dh_s
        if not stop_teacher_grad:
            dsketch[rows, 1 + masked_idx] += d_t.reshape(bsz, n_masked, cfg.d_enc)
            grads["distill_patch.teacher"] += dh_t
    if eff.cls_distill != 0.0:
        drows = np.full(bsz, eff.cls_distill / bsz)
        d_t, d_s, dh_t, dh_s = soft_ce_rows_bwd(drows, cls_cache)
        ddec[:, 0] += d_s
        grads["distill_cls.student"] += dh_s
        if not stop_teacher_grad:
            dsketch[:, 0] += d_t
            grads["distill_cls.teacher"] += dh_t

    if m_cap and (eff.feature_align != 0.0 or eff.consistency != 0.0):
        v_hat, w_hat, g_raw, g_hat, norms, p_model, logp_model, p_ref, ent = sem_cache
        dg_hat = np.zeros_like(g_hat)
        if eff.feature_align != 0.0:
            dg_hat += (2.0 * eff.feature_align / m_cap) * (g_hat - v_hat)
        if eff.consistency != 0.0:
            dz = (p_model - p_ref) - p_model * (logp_model + ent[:, None])
            dg_hat += (eff.consistency / m_cap) * (dz @ w_hat) / cfg.temperature
        # through row normalization: dg = (dg_hat - (g_hat . dg_hat) g_hat) / ||g||
        proj = (g_hat * dg_hat).sum(axis=1, keepdims=True)
        dg = (dg_hat - proj * g_hat) / norms
        grads["semantic_head.weight"] += dec_out[cap_idx, 0].T @ dg
        ddec[cap_idx, 0] += dg @ params.tensors["semantic_head.weight"].T

    image_branch_bwd(dpix, ddec, cache_img, params, grads)
    if need_sketch_grad and np.any(dsketch):
        sketch_branch_bwd(dsketch, cache_sk, grads)
    return breakdown, grads


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def default_decay_mask(params: ModelParams) -> dict[str, bool]:
    """Weight decay applies to matrices only; biases, norms, tokens, and
    position tables are excluded."""
    return {
        name: (t.ndim >= 2 and not name.startswith("pos_"))
        for name, t in params.tensors.items()
    }


def adamw_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    m: dict[str, np.ndarray],
    v: dict[str, np.ndarray],
    step: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
    weight_decay: float = 0.04,
    decay_mask: dict[str, bool] | None = None,
):
    """One decoupled-weight-decay Adam update; step is 1-based.

    Pure function: returns (new_tensors, new_m, new_v) without mutating the
    inputs. decay_mask limits weight decay to the tensors it marks True;
    None decays everything.
    """
    if step < 1:
        raise ParameterError(f"adam step must be >= 1, got {step}")
    b1, b2 = betas
    if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
        raise ParameterError(f"betas must lie in [0, 1), got {betas}")
    if eps <= 0.0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    new_t, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for name, theta in tensors.items():
        g = grads[name]
        m_t = b1 * m[name] + (1.0 - b1) * g
        v_t = b2 * v[name] + (1.0 - b2) * g * g
        update = (m_t / bc1) / (np.sqrt(v_t / bc2) + eps)
        if decay_mask is None or decay_mask.get(name, False):
            update = update + weight_decay * theta
        new_t[name] = theta - lr * update
        new_m[name] = m_t
        new_v[name] = v_t
    return new_t, new_m, new_v


def cosine_warmup_lr(
    step: int,
    total_steps: int,
    base_lr: float,
    warmup_frac: float = 0.05,
    min_lr: float = 0.0,
) -> float:
    """Linear warmup to base_lr, then cosine decay toward min_lr.

    step is 0-based. The peak value is reached on the last warmup step and
    the schedule never drops below min_lr.
    """
    if total_steps < 1:
        raise ParameterError(f"total_steps must be >= 1, got {total_steps}")
    if not (0.0 <= warmup_frac <= 1.0):
        raise ParameterError(f"warmup_frac must lie in [0, 1], got {warmup_frac}")
    if base_lr < 0.0 or min_lr < 0.0 or min_lr > base_lr:
        raise ParameterError(f"need 0 <= min_lr <= base_lr, got {min_lr}, {base_lr}")
    warmup = int(round(warmup_frac * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total_steps - warmup, 1)
    progress = min(max((step - warmup) / span, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training state and steps
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: ModelParams
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0  # steps consumed, including faulted ones
    adam_t: int = 0  # updates actually applied (Adam bias correction)
    epoch: int = 0  # completed epochs
    faults: int = 0
    seed: int = 0


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 2.5e-4
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup_frac: float = 0.05
    grad_clip: float | None = None
    epochs: int = 1
    batch_size: int = 16

    def __post_init__(self) -> None:
        if self.lr < 0.0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if not (0.0 <= self.warmup_frac <= 1.0):
            raise ConfigError(f"warmup_frac must lie in [0, 1], got {self.warmup_frac}")
        if self.grad_clip is not None and self.grad_clip <= 0.0:
            raise ConfigError(f"grad_clip must be > 0 when set, got {self.grad_clip}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def init_train_state(config: ModelConfig, seed: int) -> TrainState:
    params = init_params(config, seed)
    return TrainState(
        params=params,
        adam_m=zero_grads(params),
        adam_v=zero_grads(params),
        seed=seed,
    )


def _global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def train_step(
    state: TrainState,
    batch: Batch,
    lr: float,
    settings: TrainSettings,
    weights: LossWeights | None = None,
    toggles: LossToggles | None = None,
    embedder=None,
    mim_normalize: bool = True,
    stop_teacher_grad: bool = False,
) -> tuple[TrainState, LossBreakdown]:
    """One optimization step. Non-finite losses or gradients abort the
    update: parameters and moments stay untouched, the step still counts,
    and the fault counter increments."""
    breakdown, grads = total_loss(
        batch,
        state.params,
        weights=weights,
        toggles=toggles,
        embedder=embedder,
        with_grads=True,
        mim_normalize=mim_normalize,
        stop_teacher_grad=stop_teacher_grad,
    )
    finite = math.isfinite(breakdown.total) and all(
        np.all(np.isfinite(g)) for g in grads.values()
    )
    if not finite:
        breakdown.fault = True
        new_state = replace(state, step=state.step + 1, faults=state.faults + 1)
        return new_state, breakdown
    if settings.grad_clip is not None:
        norm = _global_grad_norm(grads)
        if norm > settings.grad_clip:
            scale = settings.grad_clip / norm
            grads = {k: g * scale for k, g in grads.items()}
    new_t, new_m, new_v = adamw_step(
        state.params.tensors,
        grads,
        state.adam_m,
        state.adam_v,
        step=state.adam_t + 1,
        lr=lr,
        betas=(settings.beta1, settings.beta2),
        eps=settings.eps,
        weight_decay=settings.weight_decay,
        decay_mask=default_decay_mask(state.params),
    )
    new_state = TrainState(
        params=ModelParams(config=state.params.config, tensors=new_t),
        adam_m=new_m,
        adam_v=new_v,
        step=state.step + 1,
        adam_t=state.adam_t + 1,
        epoch=state.epoch,
        faults=state.faults,
        seed=state.seed,
    )
    return new_state, breakdown


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, state: TrainState) -> None:
    """Atomic write: serialize to a sibling temp file, then rename."""
    path = Path(path)
    index = []
    blobs = []
    offset = 0
    for group, store in (
        ("param", state.params.tensors),
        ("adam_m", state.adam_m),
        ("adam_v", state.adam_v),
    ):
        for name, arr in store.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            index.append(
                {
                    "name": f"{group}.{name}",
                    "dtype": "<f8",
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            blobs.append(raw)
            offset += len(raw)
    header = {
        "config": state.params.config.to_dict(),
        "step": state.step,
        "adam_t": state.adam_t,
        "epoch": state.epoch,
        "faults": state.faults,
        "seed": state.seed,
        "tensors": index,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{_CKPT_MAGIC} {_CKPT_VERSION}\n".encode("ascii"))
        fh.write(f"{len(header_bytes)}\n".encode("ascii"))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> TrainState:
    """Read a checkpoint; corruption and mismatches raise CheckpointError
    naming the first offending tensor or config field."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic_line = fh.readline().decode("ascii", errors="replace").strip()
        parts = magic_line.split()
        if len(parts) != 2 or parts[0] != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic_line!r}")
        if parts[1] != str(_CKPT_VERSION):
            raise CheckpointError(f"{path}: unsupported format version {parts[1]}")
        try:
            header_len = int(fh.readline().decode("ascii").strip())
        except ValueError:
            raise CheckpointError(f"{path}: malformed header length") from None
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: header is not valid JSON: {exc}") from None
        data = fh.read()
    try:
        config = ModelConfig.from_dict(header["config"])
        index = header["tensors"]
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from None
    if expected_config is not None and config != expected_config:
        diffs = [
            f.name
            for f in fields(ModelConfig)
            if getattr(config, f.name) != getattr(expected_config, f.name)
        ]
        raise CheckpointError(f"{path}: config mismatch on fields {diffs}")
    stores: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in index:
        name = entry["name"]
        end = entry["offset"] + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path}: truncated data for tensor {name!r}")
        arr = np.frombuffer(
            data, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1, offset=entry["offset"]
        ).reshape(entry["shape"]).astype(np.float64)
        group, _, key = name.partition(".")
        if group not in stores:
            raise CheckpointError(f"{path}: unknown tensor group in {name!r}")
        stores[group][key] = arr
    expected_shapes = param_shapes(config)
    for group, store in stores.items():
        for key, shape in expected_shapes.items():
            if key not in store:
                raise CheckpointError(f"{path}: missing tensor {group}.{key}")
            if store[key].shape != shape:
                raise CheckpointError(
                    f"{path}: tensor {group}.{key} has shape {store[key].shape}, "
                    f"config implies {shape}"
                )
    params = ModelParams(config=config, tensors=stores["param"])
    return TrainState(
        params=params,
        adam_m=stores["adam_m"],
        adam_v=stores["adam_v"],
        step=int(header["step"]),
        adam_t=int(header.get("adam_t", header["step"])),
        epoch=int(header["epoch"]),
        faults=int(header["faults"]),
        seed=int(header["seed"]),
    )


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------


def append_metrics_line(path, step: int, breakdown: LossBreakdown, lr: float) -> None:
    path = Path(path)
    line = ", ".join(
        [str(step)]
        + [f"{v:.10g}" for v in breakdown.component_tuple()]
        + [f"{breakdown.total:.10g}", f"{lr:.10g}"]
    )
    with open(path, "a", encoding="utf-8") as fh:
        if fh.tell() == 0:
            fh.write(METRICS_HEADER + "\n")
        fh.write(line + "\n")


def read_metrics_log(path) -> list[dict[str, float]]:
    names = [c.strip() for c in METRICS_HEADER.split(",")]
    out = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ParseError(f"{path}: missing metrics header")
    for line in lines[1:]:
        vals = [float(x) for x in line.split(",")]
        out.append(dict(zip(names, vals)))
    return out


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "stub"
    dim: int | None = None  # defaults to the model sem_dim
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind != "stub":
            raise ConfigError(f"unknown embedder kind {self.kind!r} (supported: stub)")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainSettings
    weights: LossWeights
    toggles: LossToggles
    embedder: EmbedderSpec
    seed: int = 0
    mim_normalize: bool = True
    stop_teacher_grad: bool = False

    def __post_init__(self) -> None:
        if self.embedder.dim is not None and self.embedder.dim != self.model.sem_dim:
            raise ConfigError(
                f"embedder dim {self.embedder.dim} must match model sem_dim "
                f"{self.model.sem_dim}"
            )

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a mapping")
        known = {
            "model",
            "train",
            "weights",
            "toggles",
            "embedder",
            "seed",
            "mim_normalize",
            "stop_teacher_grad",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")

        def section(name, dc):
            sub = raw.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            names = {f.name for f in fields(dc)}
            bad = set(sub) - names
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            if dc is TrainSettings and "grad_clip" in sub and sub["grad_clip"] is not None:
                sub = dict(sub, grad_clip=float(sub["grad_clip"]))
            return dc(**sub)

        return cls(
            model=ModelConfig.from_dict(raw.get("model", {})),
            train=section("train", TrainSettings),
            weights=section("weights", LossWeights),
            toggles=section("toggles", LossToggles),
            embedder=section("embedder", EmbedderSpec),
            seed=int(raw.get("seed", 0)),
            mim_normalize=bool(raw.get("mim_normalize", True)),
            stop_teacher_grad=bool(raw.get("stop_teacher_grad", False)),
        )

    @classmethod
    def from_yaml(cls, path, env: dict | None = None) -> "RunConfig":
        """Load a YAML run config; the VMAE_SEED environment variable, when
        set, overrides the file's seed."""
        env = os.environ if env is None else env
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if raw is None:
            raw = {}
        cfg = cls.from_dict(raw)
        if "VMAE_SEED" in env:
            try:
                seed = int(env["VMAE_SEED"])
            except ValueError:
                raise ConfigError(
                    f"VMAE_SEED must be an integer, got {env['VMAE_SEED']!r}"
                ) from None
            cfg = replace(cfg, seed=seed)
        return cfg

    def make_embedder(self) -> StubEmbedder:
        dim = self.embedder.dim if self.embedder.dim is not None else self.model.sem_dim
        return StubEmbedder(dim=dim, seed=self.embedder.seed)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch{epoch:04d}.vmae"


def latest_checkpoint(out_dir) -> Path | None:
    paths = sorted(Path(out_dir).glob("ckpt_epoch*.vmae"))
    return paths[-1] if paths else None


def pretrain(run: RunConfig, manifest: DatasetManifest, out_dir) -> Path:
    """Run (or resume) pre-training, returning the final checkpoint path.

    The output directory holds one checkpoint per epoch, an append-only
    metrics log, and a run.lock guard file for the duration of the run. An
    existing epoch checkpoint resumes the trajectory exactly: batch order,
    masks, and optimizer state are all derived from serialized counters.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise FileExistsError(
            f"{lock} exists: another run owns this directory (delete the lock if stale)"
        ) from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"pid={os.getpid()}\n")
    try:
        embedder = run.make_embedder()
        settings = run.train
        n_batches = math.ceil(len(manifest) / settings.batch_size)
        total_steps = settings.epochs * n_batches
        resume = latest_checkpoint(out)
        if resume is not None:
            state = load_checkpoint(resume, expected_config=run.model)
        else:
            state = init_train_state(run.model, run.seed)
        metrics_path = out / "metrics.log"
        final = resume if resume is not None else out / _checkpoint_name(0)
        if resume is None and state.epoch == 0:
            save_checkpoint(final, state)
        for epoch in range(state.epoch, settings.epochs):
            for batch in make_batches(manifest, settings.batch_size, run.seed, epoch):
                lr = cosine_warmup_lr(
                    state.step, total_steps, settings.lr, settings.warmup_frac
                )
                state, breakdown = train_step(
                    state,
                    batch,
                    lr=lr,
                    settings=settings,
                    weights=run.weights,
                    toggles=run.toggles,
                    embedder=embedder,
                    mim_normalize=run.mim_normalize,
                    stop_teacher_grad=run.stop_teacher_grad,
                )
                append_metrics_line(metrics_path, state.step, breakdown, lr)
            state = replace(state, epoch=epoch + 1)
            final = out / _checkpoint_name(epoch + 1)
            save_checkpoint(final, state)
    finally:
        lock.unlink(missing_ok=True)
    return final
