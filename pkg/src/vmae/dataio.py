"""Synthetic vehicle data, manifest files, and batch assembly.

The generator draws parametric vehicle silhouettes (body, cabin, wheels)
over cluttered backgrounds. Records cluster into identities: one identity is
one sampled prototype (type, color, shape parameters), re-rendered with
per-record orientation, placement jitter, clutter, and noise. Every image is
written as an 8-bit PNG together with a ``<stem>.outline.png`` silhouette
boundary mask that downstream checks can use as edge ground truth.

Manifest format (tab separated): a header line with the attribute names,
then one line per record::

    <image_path> <sketch_path|-> <caption|-> <attr_bits> <identity> <fine_label>
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InputError, ParameterError, ParseError
from .seeding import derive_rng, derive_seed
from .structural_prior import extract_edges

COLOR_NAMES = ["red", "green", "blue", "black", "yellow", "cyan", "magenta", "orange"]
TYPE_NAMES = ["sedan", "suv", "truck", "bus"]
ATTRIBUTE_NAMES = [f"color:{c}" for c in COLOR_NAMES] + [f"type:{t}" for t in TYPE_NAMES]

_PALETTE = {
    "red": (0.80, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.12, 0.25, 0.80),
    "black": (0.05, 0.05, 0.05),
    "yellow": (0.92, 0.85, 0.10),
    "cyan": (0.05, 0.75, 0.80),
    "magenta": (0.80, 0.10, 0.75),
    "orange": (0.95, 0.55, 0.05),
}
_BACKGROUND = 0.62
_WHEEL_GRAY = 0.15


@dataclass
class ManifestRecord:
    image_path: str
    sketch_path: str | None
    caption: str | None
    attributes: np.ndarray  # [A] int8 bits
    identity: int
    fine_label: int


@dataclass
class DatasetManifest:
    root: Path
    attribute_names: list[str]
    records: list[ManifestRecord]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_names)


@dataclass
class Batch:
    """One training batch; sketches are always materialized."""

    images: np.ndarray  # [B, H, W, 3] float64 in [0, 1]
    sketches: np.ndarray  # [B, H, W, 1] float64 in [0, 1]
    captions: list[str | None]
    attributes: np.ndarray  # [B, A] int8
    identities: np.ndarray  # [B] int64
    fine_labels: np.ndarray  # [B] int64
    record_ids: np.ndarray  # [B] int64
    seed: int

    @property
    def size(self) -> int:
        return self.images.shape[0]


def encode_attributes(color_idx: int, type_idx: int) -> np.ndarray:
    bits = np.zeros(len(ATTRIBUTE_NAMES), dtype=np.int8)
    bits[color_idx] = 1
    bits[len(COLOR_NAMES) + type_idx] = 1
    return bits


def decode_attributes(bits: np.ndarray) -> tuple[str, str]:
    """Inverse of encode_attributes; exactly one bit per group must be set."""
    bits = np.asarray(bits)
    if bits.shape != (len(ATTRIBUTE_NAMES),):
        raise InputError(
            f"attribute bits must have length {len(ATTRIBUTE_NAMES)}, got {bits.shape}"
        )
    color_part = bits[: len(COLOR_NAMES)]
    type_part = bits[len(COLOR_NAMES):]
    if color_part.sum() != 1 or type_part.sum() != 1:
        raise InputError("attribute bits must set exactly one color and one type")
    return COLOR_NAMES[int(np.argmax(color_part))], TYPE_NAMES[int(np.argmax(type_part))]


def fine_label_of(color_idx: int, type_idx: int) -> int:
    return type_idx * len(COLOR_NAMES) + color_idx


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _trapezoid_mask(xx, yy, y_top, y_base, cx_top, cx_base, hw_top, hw_base):
    inside_y = (yy >= y_top) & (yy <= y_base)
    t = np.clip((yy - y_top) / max(y_base - y_top, 1e-9), 0.0, 1.0)
    centers = cx_top + (cx_base - cx_top) * t
    halves = hw_top + (hw_base - hw_top) * t
    return inside_y & (np.abs(xx - centers) <= halves)


def _disc_mask(xx, yy, cx, cy, r):
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _sample_prototype(seed: int, identity: int) -> dict:
    rng = derive_rng(seed, "prototype", identity)
    type_idx = identity % len(TYPE_NAMES)
    color_idx = (identity // len(TYPE_NAMES) + identity) % len(COLOR_NAMES)
    base = {
        "sedan": dict(body_w=0.62, body_h=0.16, cabin_w=0.34, cabin_h=0.11),
        "suv": dict(body_w=0.60, body_h=0.20, cabin_w=0.44, cabin_h=0.15),
        "truck": dict(body_w=0.70, body_h=0.18, cabin_w=0.20, cabin_h=0.16),
        "bus": dict(body_w=0.72, body_h=0.34, cabin_w=0.0, cabin_h=0.0),
    }[TYPE_NAMES[type_idx]]
    shape = {k: v * float(rng.uniform(0.92, 1.08)) for k, v in base.items()}
    shape["wheel_r"] = 0.055 * float(rng.uniform(0.9, 1.15))
    return {"type_idx": type_idx, "color_idx": color_idx, "shape": shape}


def _render_record(size: int, proto: dict, rng: np.random.Generator):
    """Returns (image [S, S, 3], vehicle silhouette mask [S, S] bool)."""
    coords = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(coords, coords)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = _BACKGROUND + rng.uniform(-0.03, 0.03, size=3)

    for _ in range(int(rng.integers(2, 6))):  # background clutter
        shade = np.clip(_BACKGROUND + rng.uniform(-0.18, 0.18, size=3), 0.0, 1.0)
        cx, cy = rng.uniform(0.05, 0.95, size=2)
        if rng.random() < 0.5:
            m = _disc_mask(xx, yy, cx, cy, rng.uniform(0.04, 0.12))
        else:
            hw, hh = rng.uniform(0.04, 0.14, size=2)
            m = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
        img[m] = shade

    shape = proto["shape"]
    facing = 1.0 if rng.random() < 0.5 else -1.0
    scale = float(rng.uniform(0.9, 1.1))
    cx = 0.5 + float(rng.uniform(-0.07, 0.07))
    ground = 0.80 + float(rng.uniform(-0.05, 0.05))
    bw = shape["body_w"] * scale
    bh = shape["body_h"] * scale
    body_top = ground - bh
    body = _trapezoid_mask(xx, yy, body_top, ground, cx, cx, bw / 2, bw / 2)

    vtype = TYPE_NAMES[proto["type_idx"]]
    cabin = np.zeros_like(body)
    if vtype != "bus":
        cw = shape["cabin_w"] * scale
        ch = shape["cabin_h"] * scale
        if vtype == "truck":
            cab_cx = cx + facing * (bw / 2 - cw / 2)
            cabin = _trapezoid_mask(
                xx, yy, body_top - ch, body_top, cab_cx, cab_cx, cw / 2, cw / 2
            )
        else:
            shift = -facing * 0.05 * bw
            cabin = _trapezoid_mask(
                xx, yy, body_top - ch, body_top,
                cx + shift, cx + shift * 0.4, cw * 0.32, cw / 2,
            )

    wheel_r = shape["wheel_r"] * scale
    wx1 = cx - bw / 2 + 0.22 * bw
    wx2 = cx + bw / 2 - 0.22 * bw
    wheels = _disc_mask(xx, yy, wx1, ground, wheel_r) | _disc_mask(xx, yy, wx2, ground, wheel_r)

    color = np.array(_PALETTE[COLOR_NAMES[proto["color_idx"]]])
    img[body | cabin] = color
    if vtype == "bus":  # window strip so buses are not plain boxes
        wins = _trapezoid_mask(
            xx, yy, body_top + 0.15 * bh, body_top + 0.45 * bh, cx, cx, bw * 0.42, bw * 0.42
        )
        img[wins & body] = np.clip(color + 0.35, 0.0, 1.0)
    img[wheels] = _WHEEL_GRAY

    img = np.clip(img + rng.uniform(-0.01, 0.01, size=img.shape), 0.0, 1.0)
    return img, (body | cabin | wheels)


def _outline_of(mask: np.ndarray) -> np.ndarray:
    return mask & ~ndimage.binary_erosion(mask)


def save_png(path, arr: np.ndarray) -> None:
    """Save a float [H, W, 3] or [H, W] array in [0, 1] as 8-bit PNG."""
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "RGB" if data.ndim == 3 else "L"
    Image.fromarray(data, mode).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_sketch(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr[:, :, None]


def generate_synthetic(
    n: int,
    out_dir,
    image_size: int = 32,
    seed: int = 0,
    caption_fraction: float = 0.3,
    n_identities: int | None = None,
) -> DatasetManifest:
    """Render n records into out_dir and write manifest.tsv.

    Captions follow the template "a <color> <type> facing <left|right>" and
    are attached to a caption_fraction subset chosen per record.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if image_size < 16 or image_size % 8:
        raise ParameterError(
            f"image_size must be >= 16 and divisible by 8, got {image_size}"
        )
    if not (0.0 <= caption_fraction <= 1.0):
        raise ParameterError(f"caption_fraction must lie in [0, 1], got {caption_fraction}")
    if n_identities is None:
        n_identities = max(1, n // 4)
    if n_identities < 1:
        raise ParameterError(f"n_identities must be >= 1, got {n_identities}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    protos = [_sample_prototype(seed, pid) for pid in range(n_identities)]
    records: list[ManifestRecord] = []
    for i in range(n):
        identity = i % n_identities
        proto = protos[identity]
        rng = derive_rng(seed, "record", i)
        img, mask = _render_record(image_size, proto, rng)
        stem = f"img_{i:05d}"
        save_png(out / f"{stem}.png", img)
        save_png(out / f"{stem}.outline.png", _outline_of(mask).astype(np.float64))
        caption = None
        if derive_rng(seed, "caption", i).random() < caption_fraction:
            facing_word = "left" if derive_rng(seed, "facing-word", i).random() < 0.5 else "right"
            caption = (
                f"a {COLOR_NAMES[proto['color_idx']]} {TYPE_NAMES[proto['type_idx']]} "
                f"facing {facing_word}"
            )
        records.append(
            ManifestRecord(
                image_path=f"{stem}.png",
                sketch_path=None,
                caption=caption,
                attributes=encode_attributes(proto["color_idx"], proto["type_idx"]),
                identity=identity,
                fine_label=fine_label_of(proto["color_idx"], proto["type_idx"]),
            )
        )
    manifest = DatasetManifest(root=out, attribute_names=list(ATTRIBUTE_NAMES), records=records)
    save_manifest(manifest, out / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# manifest io
# ---------------------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = ["\t".join(manifest.attribute_names)]
    for i, rec in enumerate(manifest.records):
        if rec.caption is not None and ("\t" in rec.caption or "\n" in rec.caption):
            raise InputError(f"record {i}: caption contains a tab or newline")
        bits = np.asarray(rec.attributes)
        if bits.shape != (manifest.n_attributes,) or not np.isin(bits, (0, 1)).all():
            raise InputError(f"record {i}: attribute bits must be 0/1 of header width")
        lines.append(
            "\t".join(
                [
                    rec.image_path,
                    rec.sketch_path if rec.sketch_path else "-",
                    rec.caption if rec.caption else "-",
                    "".join(str(int(b)) for b in bits),
                    str(int(rec.identity)),
                    str(int(rec.fine_label)),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest; errors name the offending record."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: empty manifest")
    names = lines[0].split("\t")
    if not all(names):
        raise ParseError(f"{path}: header has an empty attribute name")
    width = len(names)
    root = path.parent
    records: list[ManifestRecord] = []
    for i, line in enumerate(lines[1:]):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ParseError(f"{path}: record {i} has {len(fields)} fields, expected 6")
        img_rel, sketch_rel, caption, bits_str, ident_str, fine_str = fields
        if not (root / img_rel).exists():
            raise ParseError(f"{path}: record {i} image file not found: {img_rel}")
        sketch = None if sketch_rel == "-" else sketch_rel
        if sketch is not None and not (root / sketch).exists():
            raise ParseError(f"{path}: record {i} sketch file not found: {sketch}")
        if len(bits_str) != width or any(c not in "01" for c in bits_str):
            raise ParseError(
                f"{path}: record {i} attribute bits {bits_str!r} must be 0/1 of width {width}"
            )
        try:
            identity, fine = int(ident_str), int(fine_str)
        except ValueError:
            raise ParseError(f"{path}: record {i} has non-integer labels") from None
        if identity < 0 or fine < 0:
            raise ParseError(f"{path}: record {i} labels must be non-negative")
        records.append(
            ManifestRecord(
                image_path=img_rel,
                sketch_path=sketch,
                caption=None if caption == "-" else caption,
                attributes=np.array([int(c) for c in bits_str], dtype=np.int8),
                identity=identity,
                fine_label=fine,
            )
        )
    return DatasetManifest(root=root, attribute_names=names, records=records)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _sketch_for(manifest: DatasetManifest, rec: ManifestRecord, image: np.ndarray) -> np.ndarray:
    if rec.sketch_path is not None:
        return load_sketch(manifest.root / rec.sketch_path)
    sibling = manifest.root / (Path(rec.image_path).stem + ".sketch.png")
    if sibling.exists():
        return load_sketch(sibling)
    return extract_edges(image)


def make_batches(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    shuffle: bool = True,
    drop_last: bool = False,
) -> list[Batch]:
    """Split the manifest into batches for one epoch.

    Sketches come from the manifest column, then a ``<stem>.sketch.png``
    sibling, then on-the-fly edge extraction, in that order. Batch seeds are
    derived from (seed, epoch, batch index) so any batch can be rebuilt in
    isolation.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    n = len(manifest)
    order = (
        derive_rng(seed, "shuffle", epoch).permutation(n) if shuffle else np.arange(n)
    )
    batches: list[Batch] = []
    for b, start in enumerate(range(0, n, batch_size)):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        images, sketches, captions = [], [], []
        for rid in idx:
            rec = manifest.records[rid]
            img = load_image(manifest.root / rec.image_path)
            if images and img.shape != images[0].shape:
                raise InputError(
                    f"record {rid}: image shape {img.shape} differs from batch {images[0].shape}"
                )
            images.append(img)
            sketches.append(_sketch_for(manifest, rec, img))
            captions.append(rec.caption)
        batches.append(
            Batch(
                images=np.stack(images),
                sketches=np.stack(sketches),
                captions=captions,
                attributes=np.stack([manifest.records[r].attributes for r in idx]).astype(
                    np.int8
                ),
                identities=np.array([manifest.records[r].identity for r in idx], dtype=np.int64),
                fine_labels=np.array(
                    [manifest.records[r].fine_label for r in idx], dtype=np.int64
                ),
                record_ids=idx.astype(np.int64),
                seed=derive_seed(seed, "batch", epoch, b),
            )
        )
    return batches
