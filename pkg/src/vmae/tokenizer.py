"""Patch grids, random masking, and token embedding.

Images are float64 arrays shaped [H, W, C] with values in [0, 1]. A patch
grid flattens row-major: patch index i covers grid cell (i // cols, i % cols).
All masking randomness is derived from an explicit seed, never from global
state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import InputError, ParameterError, StructuralError
from .seeding import derive_rng

if TYPE_CHECKING:  # pragma: no cover
    from .backbone import ModelParams


def validate_image(image: np.ndarray, patch_size: int | None = None) -> None:
    """Check the ImageTensor contract, raising InputError naming the offence."""
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise InputError(f"image must have 3 axes [H, W, C], got shape {arr.shape}")
    h, w, c = arr.shape
    if c not in (1, 3):
        raise InputError(f"channel axis must be 1 or 3, got {c}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise InputError(f"image dtype must be floating, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise InputError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError(
            f"image values must lie in [0, 1], got range [{arr.min():.4g}, {arr.max():.4g}]"
        )
    if patch_size is not None:
        if h % patch_size:
            raise InputError(f"height {h} is not divisible by patch_size {patch_size}")
        if w % patch_size:
            raise InputError(f"width {w} is not divisible by patch_size {patch_size}")


@dataclass
class PatchSequence:
    """A row-major sequence of image patches.

    patches: [N, p, p, C] float64
    grid:    (rows, cols) with rows * cols == N
    """

    patches: np.ndarray
    grid: tuple[int, int]
    patch_size: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    def flat(self) -> np.ndarray:
        """Patches flattened to [N, p*p*C] in (row, col, channel) element order."""
        return self.patches.reshape(self.n_patches, -1)


@dataclass
class MaskPlan:
    """A masked/visible split of n_tokens patch indices.

    masked_idx and visible_idx are sorted, disjoint, and together cover
    range(n_tokens). Counts satisfy len(masked_idx) == round(ratio * n_tokens)
    with ties rounded to even.
    """

    n_tokens: int
    ratio: float
    seed: int
    masked_idx: np.ndarray
    visible_idx: np.ndarray

    @property
    def n_masked(self) -> int:
        return len(self.masked_idx)

    @property
    def n_visible(self) -> int:
        return len(self.visible_idx)

    def validate(self) -> None:
        union = np.union1d(self.masked_idx, self.visible_idx)
        if len(self.masked_idx) + len(self.visible_idx) != self.n_tokens or len(
            union
        ) != self.n_tokens:
            raise StructuralError("masked and visible indices must partition range(n_tokens)")
        if self.n_tokens and (union[0] != 0 or union[-1] != self.n_tokens - 1):
            raise StructuralError("mask indices must cover exactly range(n_tokens)")


@dataclass
class TokenEmbeddings:
    """Embedded token sequence; row 0 is the CLS token when includes_cls."""

    tokens: np.ndarray
    includes_cls: bool

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Cut an image into non-overlapping patches, row-major.

    Raises InputError when an axis is not divisible by patch_size.
    """
    if patch_size < 1:
        raise ParameterError(f"patch_size must be >= 1, got {patch_size}")
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise InputError(f"image must have 3 axes [H, W, C], got shape {arr.shape}")
    h, w, c = arr.shape
    if h % patch_size:
        raise InputError(f"height {h} is not divisible by patch_size {patch_size}")
    if w % patch_size:
        raise InputError(f"width {w} is not divisible by patch_size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    patches = (
        arr.reshape(rows, patch_size, cols, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, patch_size, patch_size, c)
    )
    return PatchSequence(patches=patches, grid=(rows, cols), patch_size=patch_size)


def unpatchify(patches: PatchSequence) -> np.ndarray:
    """Reassemble the original image; exact inverse of patchify."""
    rows, cols = patches.grid
    p = patches.patch_size
    arr = patches.patches
    if arr.shape[0] != rows * cols:
        raise StructuralError(
            f"patch count {arr.shape[0]} does not match grid {rows}x{cols}"
        )
    if arr.shape[1] != p or arr.shape[2] != p:
        raise StructuralError(f"patch shape {arr.shape[1:3]} does not match patch_size {p}")
    c = arr.shape[3]
    return (
        arr.reshape(rows, cols, p, p, c).transpose(0, 2, 1, 3, 4).reshape(rows * p, cols * p, c)
    )


def flatten_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Batched patchify-and-flatten: [B, H, W, C] -> [B, N, p*p*C].

    Row-major patch order and (row, col, channel) element order, exactly as
    patchify(...).flat() produces per sample.
    """
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 4:
        raise InputError(f"expected [B, H, W, C], got shape {arr.shape}")
    b, h, w, c = arr.shape
    if h % patch_size:
        raise InputError(f"height {h} is not divisible by patch_size {patch_size}")
    if w % patch_size:
        raise InputError(f"width {w} is not divisible by patch_size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    return (
        arr.reshape(b, rows, patch_size, cols, patch_size, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, rows * cols, patch_size * patch_size * c)
    )


def masked_count(n_tokens: int, ratio: float) -> int:
    """Number of masked tokens: round(ratio * n_tokens), ties to even."""
    return int(round(ratio * n_tokens))


def sample_mask(n_tokens: int, ratio: float, seed: int) -> MaskPlan:
    """Draw a uniform random mask over n_tokens patch indices.

    ratio must lie in [0, 1). The draw is without replacement and fully
    determined by seed.
    """
    if n_tokens < 1:
        raise ParameterError(f"n_tokens must be >= 1, got {n_tokens}")
    if not (0.0 <= ratio < 1.0):
        raise ParameterError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_masked = masked_count(n_tokens, ratio)
    perm = derive_rng(seed, "mask").permutation(n_tokens)
    masked = np.sort(perm[:n_masked]).astype(np.int64)
    visible = np.sort(perm[n_masked:]).astype(np.int64)
    return MaskPlan(
        n_tokens=n_tokens, ratio=ratio, seed=seed, masked_idx=masked, visible_idx=visible
    )


def full_visible_mask(n_tokens: int) -> MaskPlan:
    """A MaskPlan with every token visible (used for sketch and probe passes)."""
    return MaskPlan(
        n_tokens=n_tokens,
        ratio=0.0,
        seed=0,
        masked_idx=np.empty(0, dtype=np.int64),
        visible_idx=np.arange(n_tokens, dtype=np.int64),
    )


def embed_patches(
    patches: PatchSequence,
    mask: MaskPlan,
    params: "ModelParams",
    pos_table: str = "image",
) -> TokenEmbeddings:
    """Project visible patches to tokens and prepend the CLS token.

    Every retained token receives its position row from the chosen table
    ("image" or "sketch"); the CLS token receives row 0. Masked patches are
    dropped entirely, so the output has 1 + n_visible rows.
    """
    if pos_table not in ("image", "sketch"):
        raise ParameterError(f"pos_table must be 'image' or 'sketch', got {pos_table!r}")
    if mask.n_tokens != patches.n_patches:
        raise StructuralError(
            f"mask covers {mask.n_tokens} tokens but sequence has {patches.n_patches} patches"
        )
    weight = params.tensors["patch_embed.weight"]
    bias = params.tensors["patch_embed.bias"]
    flat = patches.flat()
    if flat.shape[1] != weight.shape[0]:
        raise StructuralError(
            f"patch dim {flat.shape[1]} does not match projection input dim {weight.shape[0]}"
        )
    pos = params.tensors["pos_image" if pos_table == "image" else "pos_sketch"]
    if pos.shape[0] != 1 + patches.n_patches:
        raise StructuralError(
            f"position table has {pos.shape[0]} rows, expected {1 + patches.n_patches}"
        )
    vis = flat[mask.visible_idx] @ weight + bias
    tokens = np.empty((1 + mask.n_visible, weight.shape[1]), dtype=np.float64)
    tokens[0] = params.tensors["cls_token"] + pos[0]
    tokens[1:] = vis + pos[1 + mask.visible_idx]
    return TokenEmbeddings(tokens=tokens, includes_cls=True)
