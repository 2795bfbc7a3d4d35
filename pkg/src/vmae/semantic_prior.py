"""Semantic guidance from a frozen external embedder.

The embedder is pluggable: anything exposing ``embed_image``, ``embed_text``
and ``dim`` works. The built-in stub is a deterministic, training-free stand
in (pooled pixel statistics for images, hashed bag of words for text) whose
only job is to give both modalities a shared space with the right algebra.
Precomputed embedding banks can be saved and loaded so real model vectors can
be dropped in from files.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError, ParameterError, ParseError, StructuralError
from .seeding import derive_rng

_BANK_MAGIC = "VMAE-EMB"
_BANK_VERSION = "v1"
_BINARY_SUFFIXES = (".bin", ".veb")
_POOL_GRID = 8


def l2_normalize(vec: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalize to unit length; zero-norm rows raise NumericError."""
    arr = np.asarray(vec, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=axis, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("cannot normalize a zero vector")
    if not np.all(np.isfinite(norms)):
        raise NumericError("cannot normalize a non-finite vector")
    return arr / norms


class StubEmbedder:
    """Frozen deterministic embedder used in place of a pretrained model.

    Images: grayscale 8x8 block means plus channel means plus a constant,
    sent through a fixed random projection and L2-normalized. Text: signed
    feature hashing of lowercased alphanumeric tokens, L2-normalized. Both
    are pure functions of (seed, input); there is nothing to train and no
    state to drift.
    """

    def __init__(self, dim: int, seed: int = 0):
        if dim < 2:
            raise ParameterError(f"embedder dim must be >= 2, got {dim}")
        self._dim = dim
        self._seed = seed
        n_feats = _POOL_GRID * _POOL_GRID + 3 + 1
        self._proj = derive_rng(seed, "stub-image-proj").standard_normal((n_feats, dim))

    @property
    def dim(self) -> int:
        return self._dim

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InputError(f"embed_image expects [H, W, 3], got shape {arr.shape}")
        h, w = arr.shape[:2]
        if h < _POOL_GRID or w < _POOL_GRID:
            raise InputError(f"image must be at least {_POOL_GRID}x{_POOL_GRID}, got {h}x{w}")
        gray = arr @ np.array([0.299, 0.587, 0.114])
        pooled = np.array(
            [
                [cell.mean() for cell in np.array_split(band, _POOL_GRID, axis=1)]
                for band in np.array_split(gray, _POOL_GRID, axis=0)
            ]
        )
        feats = np.concatenate([pooled.ravel(), arr.mean(axis=(0, 1)), [1.0]])
        return l2_normalize(feats @ self._proj)

    def embed_text(self, caption: str) -> np.ndarray:
        tokens = [t for t in "".join(c if c.isalnum() else " " for c in caption.lower()).split()]
        if not tokens:
            raise InputError("caption has no alphanumeric tokens")
        vec = np.zeros(self._dim, dtype=np.float64)
        for tok in tokens:
            h1 = zlib.crc32(f"{self._seed}:idx:{tok}".encode("utf-8"))
            h2 = zlib.crc32(f"{self._seed}:sgn:{tok}".encode("utf-8"))
            vec[h1 % self._dim] += 1.0 if h2 & 1 else -1.0
        if not vec.any():
            # signs cancelled exactly; fall back to a token-count component
            vec[len(tokens) % self._dim] = 1.0
        return l2_normalize(vec)


@dataclass
class TextEmbeddingBank:
    """Named embedding rows, optionally paired to images by id."""

    ids: list[str]
    embeddings: np.ndarray  # [M, dim] float64
    pairing: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.embeddings.ndim != 2:
            raise StructuralError("bank embeddings must be [M, dim]")
        if len(self.ids) != self.embeddings.shape[0]:
            raise StructuralError(
                f"bank has {len(self.ids)} ids but {self.embeddings.shape[0]} embedding rows"
            )
        for key, idx in self.pairing.items():
            if not (0 <= idx < len(self.ids)):
                raise StructuralError(f"pairing for {key!r} points at missing row {idx}")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


def save_embedding_bank(path, bank: TextEmbeddingBank) -> None:
    """Write a bank; ``.bin``/``.veb`` paths use the binary float32 layout."""
    import os

    path = os.fspath(path)
    header = f"{_BANK_MAGIC} {_BANK_VERSION} {len(bank)} {bank.dim}\n"
    for rid in bank.ids:
        if "\n" in rid or "\t" in rid:
            raise InputError(f"bank id {rid!r} contains a tab or newline")
    if path.endswith(_BINARY_SUFFIXES):
        with open(path, "wb") as fh:
            fh.write(header.encode("utf-8"))
            for rid, row in zip(bank.ids, bank.embeddings):
                fh.write((rid + "\n").encode("utf-8"))
                fh.write(np.asarray(row, dtype="<f4").tobytes())
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header)
            for rid, row in zip(bank.ids, bank.embeddings):
                fh.write(rid + "\t" + ",".join(f"{x:.9g}" for x in row) + "\n")


def load_embedding_bank(path) -> TextEmbeddingBank:
    """Read a bank written by save_embedding_bank; malformed files raise
    ParseError naming the offending record."""
    import os

    path = os.fspath(path)
    binary = path.endswith(_BINARY_SUFFIXES)
    mode = "rb" if binary else "r"
    with open(path, mode, **({} if binary else {"encoding": "utf-8"})) as fh:
        header = fh.readline()
        if binary:
            header = header.decode("utf-8", errors="replace")
        parts = header.split()
        if len(parts) != 4 or parts[0] != _BANK_MAGIC or parts[1] != _BANK_VERSION:
            raise ParseError(f"{path}: bad bank header {header.strip()!r}")
        try:
            count, dim = int(parts[2]), int(parts[3])
        except ValueError:
            raise ParseError(f"{path}: non-integer count/dim in header") from None
        ids: list[str] = []
        rows = np.empty((count, dim), dtype=np.float64)
        for i in range(count):
            if binary:
                raw = fh.readline()
                if not raw:
                    raise ParseError(f"{path}: truncated at record {i}")
                ids.append(raw.decode("utf-8").rstrip("\n"))
                blob = fh.read(4 * dim)
                if len(blob) != 4 * dim:
                    raise ParseError(f"{path}: truncated embedding for record {i}")
                rows[i] = np.frombuffer(blob, dtype="<f4").astype(np.float64)
            else:
                line = fh.readline()
                if not line:
                    raise ParseError(f"{path}: truncated at record {i}")
                fields = line.rstrip("\n").split("\t")
                if len(fields) != 2:
                    raise ParseError(f"{path}: record {i} must be '<id>\\t<floats>'")
                ids.append(fields[0])
                try:
                    vals = np.array([float(x) for x in fields[1].split(",")], dtype=np.float64)
                except ValueError:
                    raise ParseError(f"{path}: record {i} has a non-numeric value") from None
                if vals.shape[0] != dim:
                    raise ParseError(
                        f"{path}: record {i} has {vals.shape[0]} values, expected {dim}"
                    )
                rows[i] = vals
    return TextEmbeddingBank(ids=ids, embeddings=rows)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def feature_align_loss(
    student_feat: np.ndarray, target_vec: np.ndarray, head: np.ndarray
) -> float:
    """Squared distance between unit-normalized projected student feature and
    unit-normalized target vector. Equals 2 - 2 cos(angle), so it lives in
    [0, 4]."""
    f = np.asarray(student_feat, dtype=np.float64)
    if f.ndim != 1 or head.ndim != 2 or f.shape[0] != head.shape[0]:
        raise StructuralError(
            f"student feature {f.shape} does not match head input {head.shape}"
        )
    g_hat = l2_normalize(f @ head)
    v_hat = l2_normalize(np.asarray(target_vec, dtype=np.float64))
    if g_hat.shape != v_hat.shape:
        raise StructuralError(
            f"projected feature dim {g_hat.shape} differs from target {v_hat.shape}"
        )
    diff = g_hat - v_hat
    return float(diff @ diff)


def similarity_distribution(
    feat: np.ndarray, bank: "TextEmbeddingBank | np.ndarray", temperature: float = 1.0
) -> np.ndarray:
    """Softmax over normalized dot products between feat and every bank row."""
    if temperature <= 0.0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    rows = bank.embeddings if isinstance(bank, TextEmbeddingBank) else np.asarray(bank)
    if rows.ndim != 2:
        raise StructuralError("bank rows must be [M, dim]")
    f_hat = l2_normalize(np.asarray(feat, dtype=np.float64))
    w_hat = l2_normalize(rows, axis=1)
    logits = (w_hat @ f_hat) / temperature
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be a 1-D distribution")
    if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
        raise InputError(f"{name} has negative or non-finite entries")
    if abs(arr.sum() - 1.0) > 1e-6:
        raise InputError(f"{name} sums to {arr.sum():.9f}, expected 1 within 1e-6")
    return arr


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with 0 log 0 = 0; infinite when q is 0 where p is not."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise StructuralError(f"distributions differ in length: {p.shape} vs {q.shape}")
    support = p > 0.0
    if np.any(q[support] == 0.0):
        return float("inf")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats; bounded by [0, ln(len(p))]."""
    p = _check_distribution(p, "p")
    support = p > 0.0
    return float(-np.sum(p[support] * np.log(p[support])))


def consistency_loss(reference: np.ndarray, model: np.ndarray) -> float:
    """KL(reference || model) plus the entropy of the model distribution."""
    return kl_divergence(reference, model) + entropy(model)
