"""Structural guidance: sketch maps and distillation losses.

The teacher signal is an edge ("sketch") map pushed through the shared
encoder; the student is the decoder output at masked positions. Both are
projected to a shared vocabulary of `distill_dim` logits and compared with a
soft cross-entropy, so the loss is a distribution match, not a regression.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .backbone import ModelParams, softmax
from .errors import InputError, StructuralError
from .tokenizer import MaskPlan, TokenEmbeddings, embed_patches, full_visible_mask, patchify


def extract_edges(image: np.ndarray) -> np.ndarray:
    """Gradient-magnitude sketch map in [0, 1], shaped [H, W, 1].

    Sobel responses are computed per channel and combined by maximum, so an
    edge visible in any channel survives. A constant image maps to all zeros.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise InputError(f"expected [H, W, 1|3] image, got shape {arr.shape}")
    mags = []
    for ch in range(arr.shape[2]):
        gy = ndimage.sobel(arr[:, :, ch], axis=0, mode="reflect")
        gx = ndimage.sobel(arr[:, :, ch], axis=1, mode="reflect")
        mags.append(np.hypot(gx, gy))
    mag = np.max(mags, axis=0)
    peak = mag.max()
    if peak > 0.0:
        mag = mag / peak
    return mag[:, :, None]


def sketch_to_rgb(sketch: np.ndarray) -> np.ndarray:
    """Replicate a single-channel sketch to 3 channels.

    The image and sketch branches share one patch projection, which expects
    3-channel input; replication keeps that sharing literal.
    """
    arr = np.asarray(sketch, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 1:
        raise InputError(f"sketch must be [H, W, 1], got shape {arr.shape}")
    return np.repeat(arr, 3, axis=2)


def build_sketch_tokens(sketch: np.ndarray, params: ModelParams) -> TokenEmbeddings:
    """Embed a full sketch grid (no masking) with the sketch position table."""
    patches = patchify(sketch_to_rgb(sketch), params.config.patch_size)
    if patches.n_patches != params.config.n_patches:
        raise StructuralError(
            f"sketch yields {patches.n_patches} patches, model grid has "
            f"{params.config.n_patches}"
        )
    return embed_patches(
        patches, full_visible_mask(patches.n_patches), params, pos_table="sketch"
    )


@dataclass(frozen=True)
class DistillHeads:
    """Paired projections onto the shared distillation vocabulary.

    teacher: [d_enc, K] applied to encoder (sketch) features
    student: [d_dec, K] applied to decoder features
    """

    teacher: np.ndarray
    student: np.ndarray

    def __post_init__(self) -> None:
        if self.teacher.ndim != 2 or self.student.ndim != 2:
            raise StructuralError("distillation heads must be 2-D projections")
        if self.teacher.shape[1] != self.student.shape[1]:
            raise StructuralError(
                f"head vocabulary sizes differ: {self.teacher.shape[1]} vs "
                f"{self.student.shape[1]}"
            )


def patch_heads(params: ModelParams) -> DistillHeads:
    return DistillHeads(
        teacher=params.tensors["distill_patch.teacher"],
        student=params.tensors["distill_patch.student"],
    )


def cls_heads(params: ModelParams) -> DistillHeads:
    return DistillHeads(
        teacher=params.tensors["distill_cls.teacher"],
        student=params.tensors["distill_cls.student"],
    )


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def soft_ce_rows_fwd(teacher_feats: np.ndarray, student_feats: np.ndarray, heads: DistillHeads):
    """Row-wise soft cross-entropy between projected feature rows.

    teacher_feats [R, d_t], student_feats [R, d_s]. Returns per-row losses
    -sum_k softmax(teacher)_k * log softmax(student)_k and a backward cache.
    """
    if teacher_feats.shape[1] != heads.teacher.shape[0]:
        raise StructuralError(
            f"teacher feature dim {teacher_feats.shape[1]} does not match head input "
            f"{heads.teacher.shape[0]}"
        )
    if student_feats.shape[1] != heads.student.shape[0]:
        raise StructuralError(
            f"student feature dim {student_feats.shape[1]} does not match head input "
            f"{heads.student.shape[0]}"
        )
    if teacher_feats.shape[0] != student_feats.shape[0]:
        raise StructuralError("teacher and student must have the same number of rows")
    t_prob = softmax(teacher_feats @ heads.teacher)
    s_logp = _log_softmax(student_feats @ heads.student)
    rows = -(t_prob * s_logp).sum(axis=-1)
    return rows, (teacher_feats, student_feats, heads, t_prob, s_logp)


def soft_ce_rows_bwd(drows: np.ndarray, cache):
    """Backward for soft_ce_rows_fwd given per-row loss weights drows [R].

    Returns (d_teacher_feats, d_student_feats, d_teacher_head, d_student_head).
    """
    teacher_feats, student_feats, heads, t_prob, s_logp = cache
    w = drows[:, None]
    s_prob = np.exp(s_logp)
    db = (s_prob - t_prob) * w
    dot = (t_prob * s_logp).sum(axis=-1, keepdims=True)
    da = t_prob * (dot - s_logp) * w
    d_teacher = da @ heads.teacher.T
    d_student = db @ heads.student.T
    dh_teacher = teacher_feats.T @ da
    dh_student = student_feats.T @ db
    return d_teacher, d_student, dh_teacher, dh_student


def patch_distill_loss(
    teacher_tokens: np.ndarray,
    student_tokens: np.ndarray,
    mask: MaskPlan,
    heads: DistillHeads,
    normalize: bool = True,
) -> float:
    """Soft cross-entropy between sketch and decoder tokens at masked slots.

    teacher_tokens [1 + N, d_enc] from the sketch pass, student_tokens
    [1 + N, d_dec] from the decoder; row 0 (CLS) and every visible row are
    ignored, so perturbing them cannot change the value. With normalize the
    sum over masked rows is divided by the masked count; zero masked rows
    give 0.0.
    """
    _check_full_grid(teacher_tokens, student_tokens, mask)
    if mask.n_masked == 0:
        return 0.0
    rows, _ = soft_ce_rows_fwd(
        teacher_tokens[1 + mask.masked_idx], student_tokens[1 + mask.masked_idx], heads
    )
    total = float(rows.sum())
    return total / mask.n_masked if normalize else total


def cls_distill_loss(
    teacher_tokens: np.ndarray, student_tokens: np.ndarray, heads: DistillHeads
) -> float:
    """Soft cross-entropy between the sketch CLS row and the decoder CLS row."""
    if teacher_tokens.ndim != 2 or student_tokens.ndim != 2:
        raise StructuralError("token stacks must be 2-D [n, d]")
    rows, _ = soft_ce_rows_fwd(teacher_tokens[:1], student_tokens[:1], heads)
    return float(rows[0])


def _check_full_grid(
    teacher_tokens: np.ndarray, student_tokens: np.ndarray, mask: MaskPlan
) -> None:
    expected = 1 + mask.n_tokens
    if teacher_tokens.shape[0] != expected:
        raise StructuralError(
            f"teacher tokens have {teacher_tokens.shape[0]} rows, expected {expected}"
        )
    if student_tokens.shape[0] != expected:
        raise StructuralError(
            f"student tokens have {student_tokens.shape[0]} rows, expected {expected}"
        )
