"""Downstream evaluation: metric suite, feature extraction, probes.

Metric conventions, chosen so brute-force oracles are unambiguous:

* label-based mean accuracy averages, per attribute, the positive and
  negative recall; any zero-denominator term contributes 0;
* example-based accuracy/precision/recall are averaged per sample with
  zero-denominator samples contributing 0, and F1 combines the aggregated
  precision and recall;
* retrieval ranks galleries by cosine similarity (stable sort, ties to the
  lower gallery index), average precision is the mean of k / rank_k over the
  k-th positives, and queries without any positive are skipped and counted;
* segmentation IoU excludes classes absent from both prediction and truth,
  and mean class accuracy excludes classes absent from the truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import ModelParams, blocks_bwd, blocks_fwd, linear_bwd, linear_fwd
from .dataio import DatasetManifest, load_image
from .errors import InputError, ParameterError, StructuralError
from .pretrainer import adamw_step
from .seeding import derive_rng
from .semantic_prior import l2_normalize
from .tokenizer import flatten_patches


@dataclass
class MetricReport:
    """Named metric values for one task, plus bookkeeping extras."""

    task: str
    values: dict[str, float]
    extras: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"task = {self.task}"]
        lines += [f"{k} = {v:.6f}" for k, v in self.values.items()]
        lines += [f"{k} = {v}" for k, v in self.extras.items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _check_binary(gt: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(gt)
    if not np.isin(arr, (0, 1)).all():
        raise InputError(f"{name} must contain only 0/1 values")
    return arr.astype(bool)


def attribute_metrics(
    scores: np.ndarray, gt: np.ndarray, threshold: float = 0.5
) -> dict[str, float]:
    """Multi-label metrics from scores in [0, 1]-ish space against 0/1 truth."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = _check_binary(gt, "ground truth")
    if scores.shape != truth.shape or scores.ndim != 2:
        raise StructuralError(
            f"scores {scores.shape} and ground truth {truth.shape} must both be [n, A]"
        )
    if not np.all(np.isfinite(scores)):
        raise InputError("scores contain non-finite values")
    preds = scores >= threshold
    n, n_attr = truth.shape

    ma_terms = []
    for j in range(n_attr):
        pos = truth[:, j].sum()
        neg = n - pos
        tp = (preds[:, j] & truth[:, j]).sum()
        tn = (~preds[:, j] & ~truth[:, j]).sum()
        term_pos = tp / pos if pos else 0.0
        term_neg = tn / neg if neg else 0.0
        ma_terms.append(0.5 * (term_pos + term_neg))
    mean_accuracy = float(np.mean(ma_terms))

    inter = (preds & truth).sum(axis=1).astype(np.float64)
    union = (preds | truth).sum(axis=1).astype(np.float64)
    n_pred = preds.sum(axis=1).astype(np.float64)
    n_true = truth.sum(axis=1).astype(np.float64)
    acc = float(np.mean(np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)))
    prec = float(np.mean(np.divide(inter, n_pred, out=np.zeros_like(inter), where=n_pred > 0)))
    rec = float(np.mean(np.divide(inter, n_true, out=np.zeros_like(inter), where=n_true > 0)))
    f1 = 2.0 * prec * rec / (prec + rec) if (prec + rec) > 0 else 0.0
    return {
        "mA": mean_accuracy,
        "accuracy": acc,
        "precision": prec,
        "recall": rec,
        "f1": f1,
    }


def retrieval_metrics(
    query_emb: np.ndarray,
    gallery_emb: np.ndarray,
    query_ids: np.ndarray,
    gallery_ids: np.ndarray,
    junk_mask: np.ndarray | None = None,
    ranks: tuple[int, ...] = (1, 5, 10),
) -> tuple[dict[str, float], dict[str, int]]:
    """Cosine-similarity retrieval: mAP and CMC rank-k accuracies.

    junk_mask [Q, G] marks gallery entries to drop per query (typically the
    self match). Queries left without any positive are excluded from the
    averages and reported in the extras.
    """
    q = l2_normalize(np.asarray(query_emb, dtype=np.float64), axis=1)
    g = l2_normalize(np.asarray(gallery_emb, dtype=np.float64), axis=1)
    q_ids = np.asarray(query_ids)
    g_ids = np.asarray(gallery_ids)
    if q.shape[0] != q_ids.shape[0] or g.shape[0] != g_ids.shape[0]:
        raise StructuralError("embeddings and ids disagree in length")
    if q.shape[1] != g.shape[1]:
        raise StructuralError(
            f"embedding dims differ: query {q.shape[1]} vs gallery {g.shape[1]}"
        )
    if junk_mask is not None and junk_mask.shape != (q.shape[0], g.shape[0]):
        raise StructuralError("junk_mask must be [n_query, n_gallery]")
    sims = q @ g.T
    aps = []
    hits = {k: [] for k in ranks}
    skipped = 0
    for i in range(q.shape[0]):
        order = np.argsort(-sims[i], kind="stable")
        if junk_mask is not None:
            order = order[~junk_mask[i][order]]
        rel = g_ids[order] == q_ids[i]
        n_pos = int(rel.sum())
        if n_pos == 0:
            skipped += 1
            continue
        pos_ranks = np.nonzero(rel)[0] + 1
        aps.append(float(np.mean(np.arange(1, n_pos + 1) / pos_ranks)))
        first = pos_ranks[0]
        for k in ranks:
            hits[k].append(1.0 if first <= k else 0.0)
    n_valid = len(aps)
    values = {"mAP": float(np.mean(aps)) if aps else 0.0}
    for k in ranks:
        values[f"rank{k}"] = float(np.mean(hits[k])) if hits[k] else 0.0
    extras = {"n_queries": int(q.shape[0]), "n_valid": n_valid, "n_skipped": skipped}
    return values, extras


def segmentation_metrics(
    pred_maps: np.ndarray, gt_maps: np.ndarray, n_classes: int
) -> tuple[dict[str, float], dict]:
    """Confusion-matrix mIoU / mAcc over integer label maps."""
    if n_classes < 1:
        raise ParameterError(f"n_classes must be >= 1, got {n_classes}")
    pred = np.asarray(pred_maps)
    gt = np.asarray(gt_maps)
    if pred.shape != gt.shape:
        raise StructuralError(f"prediction shape {pred.shape} != truth shape {gt.shape}")
    if not (np.issubdtype(pred.dtype, np.integer) and np.issubdtype(gt.dtype, np.integer)):
        raise InputError("label maps must be integer typed")
    if pred.min() < 0 or pred.max() >= n_classes or gt.min() < 0 or gt.max() >= n_classes:
        raise InputError(f"labels must lie in [0, {n_classes})")
    conf = np.bincount(
        (gt.ravel() * n_classes + pred.ravel()).astype(np.int64),
        minlength=n_classes * n_classes,
    ).reshape(n_classes, n_classes)
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1).astype(np.float64)
    pred_count = conf.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - tp
    present = union > 0
    iou = np.divide(tp, union, out=np.full(n_classes, np.nan), where=present)
    acc_present = gt_count > 0
    cls_acc = np.divide(tp, gt_count, out=np.full(n_classes, np.nan), where=acc_present)
    values = {
        "mIoU": float(np.nanmean(iou)) if present.any() else 0.0,
        "mAcc": float(np.nanmean(cls_acc)) if acc_present.any() else 0.0,
        "pixel_accuracy": float(tp.sum() / conf.sum()) if conf.sum() else 0.0,
    }
    extras = {"per_class_iou": iou.tolist(), "confusion": conf}
    return values, extras


def multiclass_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise StructuralError(f"prediction shape {pred.shape} != truth shape {gt.shape}")
    return float(np.mean(pred == gt))


# ---------------------------------------------------------------------------
# feature extraction and probes
# ---------------------------------------------------------------------------


def _encoder_pass_fwd(flat: np.ndarray, params: ModelParams, keep_cache: bool):
    """Full-grid (unmasked) encoder pass; returns mean-pooled patch features."""
    cfg = params.config
    t = params.tensors
    b = flat.shape[0]
    emb, c_emb = linear_fwd(flat, t["patch_embed.weight"], t["patch_embed.bias"])
    x = np.empty((b, 1 + cfg.n_patches, cfg.d_enc), dtype=np.float64)
    x[:, 0] = t["cls_token"] + t["pos_image"][0]
    x[:, 1:] = emb + t["pos_image"][1:]
    out, c_enc = blocks_fwd(x, t, "encoder", cfg.enc_depth, cfg.enc_heads, keep_cache)
    pooled = out[:, 1:].mean(axis=1)
    return pooled, ((c_emb, c_enc) if keep_cache else None)


def _encoder_pass_bwd(dpooled: np.ndarray, cache, params: ModelParams, grads: dict) -> None:
    c_emb, c_enc = cache
    cfg = params.config
    b = dpooled.shape[0]
    dout = np.zeros((b, 1 + cfg.n_patches, cfg.d_enc), dtype=np.float64)
    dout[:, 1:] = dpooled[:, None, :] / cfg.n_patches
    dtok = blocks_bwd(dout, c_enc, grads, "encoder")
    grads["cls_token"] += dtok[:, 0].sum(axis=0)
    grads["pos_image"] += dtok.sum(axis=0)
    _, dwemb, dbemb = linear_bwd(dtok[:, 1:], c_emb)
    grads["patch_embed.weight"] += dwemb
    grads["patch_embed.bias"] += dbemb


def extract_features(
    params: ModelParams, images: np.ndarray, batch_size: int = 64
) -> np.ndarray:
    """Mean-pooled patch-token features of unmasked images, [n, d_enc]."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[3] != 3:
        raise StructuralError(f"images must be [n, H, W, 3], got {images.shape}")
    cfg = params.config
    if images.shape[1] != cfg.image_size or images.shape[2] != cfg.image_size:
        raise StructuralError(
            f"images are {images.shape[1]}x{images.shape[2]}, model expects "
            f"{cfg.image_size}x{cfg.image_size}"
        )
    feats = []
    for start in range(0, images.shape[0], batch_size):
        flat = flatten_patches(images[start : start + batch_size], cfg.patch_size)
        pooled, _ = _encoder_pass_fwd(flat, params, keep_cache=False)
        feats.append(pooled)
    return np.concatenate(feats, axis=0)


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 4e-4
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    train_fraction: float = 0.7
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.lr < 0 or self.weight_decay < 0:
            raise ParameterError("lr and weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if not (0.0 < self.train_fraction < 1.0):
            raise ParameterError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}"
            )


def _split_indices(n: int, cfg: ProbeConfig) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise ParameterError(f"need at least 2 records to split, got {n}")
    perm = derive_rng(cfg.seed, "probe-split").permutation(n)
    n_train = int(round(cfg.train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    return perm[:n_train], perm[n_train:]


def _probe_targets(manifest: DatasetManifest, task: str):
    if task == "attribute":
        y = np.stack([r.attributes for r in manifest.records]).astype(np.float64)
        return y, y.shape[1]
    if task == "fine_grained":
        y = np.array([r.fine_label for r in manifest.records], dtype=np.int64)
        return y, int(y.max()) + 1
    raise ParameterError(f"unknown probe task {task!r} (use attribute or fine_grained)")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _head_loss_grad(z: np.ndarray, y: np.ndarray, task: str):
    n = z.shape[0]
    if task == "attribute":
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        dz = (_sigmoid(z) - y) / z.size
    else:
        zs = z - z.max(axis=1, keepdims=True)
        logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(n), y].mean())
        dz = np.exp(logp)
        dz[np.arange(n), y] -= 1.0
        dz /= n
    return loss, dz


def _train_head(feats: np.ndarray, targets, task: str, out_dim: int, cfg: ProbeConfig):
    d = feats.shape[1]
    head = {
        "w": np.zeros((d, out_dim), dtype=np.float64),
        "b": np.zeros(out_dim, dtype=np.float64),
    }
    m = {k: np.zeros_like(v) for k, v in head.items()}
    v = {k: np.zeros_like(vv) for k, vv in head.items()}
    t = 0
    n = feats.shape[0]
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "probe-shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = feats[idx]
            z = x @ head["w"] + head["b"]
            _, dz = _head_loss_grad(z, targets[idx], task)
            grads = {"w": x.T @ dz, "b": dz.sum(axis=0)}
            t += 1
            head, m, v = adamw_step(
                head, grads, m, v, step=t, lr=cfg.lr,
                betas=(0.9, 0.999), eps=1e-8,
                weight_decay=cfg.weight_decay,
                decay_mask={"w": True, "b": False},
            )
    return head


def _evaluate_head(head, feats, targets, task: str, cfg: ProbeConfig) -> dict[str, float]:
    z = feats @ head["w"] + head["b"]
    if task == "attribute":
        return attribute_metrics(_sigmoid(z), targets.astype(np.int8), cfg.threshold)
    pred = z.argmax(axis=1)
    return {"accuracy": multiclass_accuracy(pred, targets)}


def _manifest_images(manifest: DatasetManifest) -> np.ndarray:
    return np.stack([load_image(manifest.root / r.image_path) for r in manifest.records])


def linear_probe(
    params: ModelParams,
    manifest: DatasetManifest,
    task: str,
    cfg: ProbeConfig | None = None,
) -> MetricReport:
    """Freeze the encoder, fit a linear head on a train split, and report
    metrics on the held-out split."""
    cfg = cfg or ProbeConfig()
    targets, out_dim = _probe_targets(manifest, task)
    images = _manifest_images(manifest)
    feats = extract_features(params, images)
    train_idx, test_idx = _split_indices(len(manifest), cfg)
    head = _train_head(feats[train_idx], targets[train_idx], task, out_dim, cfg)
    values = _evaluate_head(head, feats[test_idx], targets[test_idx], task, cfg)
    return MetricReport(
        task=task,
        values=values,
        extras={"n_train": len(train_idx), "n_test": len(test_idx), "mode": "probe"},
    )


_FINETUNE_PREFIXES = ("encoder.", "patch_embed.", "cls_token", "pos_image")


def finetune(
    params: ModelParams,
    manifest: DatasetManifest,
    task: str,
    cfg: ProbeConfig | None = None,
) -> tuple[ModelParams, MetricReport]:
    """Like linear_probe, but gradients also flow into the encoder branch.

    Returns the adapted parameters alongside the held-out metric report; the
    input params are not modified.
    """
    cfg = cfg or ProbeConfig()
    targets, out_dim = _probe_targets(manifest, task)
    images = _manifest_images(manifest)
    train_idx, test_idx = _split_indices(len(manifest), cfg)
    work = params.copy()
    tunable = [
        name for name in work.tensors if name.startswith(_FINETUNE_PREFIXES)
    ]
    head = {
        "head.w": np.zeros((work.config.d_enc, out_dim), dtype=np.float64),
        "head.b": np.zeros(out_dim, dtype=np.float64),
    }
    store = {**{k: work.tensors[k] for k in tunable}, **head}
    m = {k: np.zeros_like(v) for k, v in store.items()}
    v = {k: np.zeros_like(vv) for k, vv in store.items()}
    decay = {k: (vv.ndim >= 2 and not k.startswith("pos_")) for k, vv in store.items()}
    t = 0
    n = len(train_idx)
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "finetune-shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = train_idx[order[start : start + cfg.batch_size]]
            flat = flatten_patches(images[idx], work.config.patch_size)
            pooled, cache = _encoder_pass_fwd(flat, work, keep_cache=True)
            z = pooled @ store["head.w"] + store["head.b"]
            _, dz = _head_loss_grad(z, targets[idx], task)
            grads = {k: np.zeros_like(vv) for k, vv in store.items()}
            grads["head.w"] = pooled.T @ dz
            grads["head.b"] = dz.sum(axis=0)
            dpooled = dz @ store["head.w"].T
            full_grads = {k: grads[k] for k in tunable}
            _encoder_pass_bwd(dpooled, cache, work, full_grads)
            grads.update(full_grads)
            t += 1
            store, m, v = adamw_step(
                store, grads, m, v, step=t, lr=cfg.lr,
                betas=(0.9, 0.999), eps=1e-8,
                weight_decay=cfg.weight_decay, decay_mask=decay,
            )
            for k in tunable:
                work.tensors[k] = store[k]
    feats_test = extract_features(work, images[test_idx])
    head_final = {"w": store["head.w"], "b": store["head.b"]}
    values = _evaluate_head(head_final, feats_test, targets[test_idx], task, cfg)
    report = MetricReport(
        task=task,
        values=values,
        extras={"n_train": len(train_idx), "n_test": len(test_idx), "mode": "finetune"},
    )
    return work, report


def reid_report(params: ModelParams, manifest: DatasetManifest) -> MetricReport:
    """Identity retrieval over raw pooled features; every record queries all
    others (self matches are junk)."""
    images = _manifest_images(manifest)
    feats = extract_features(params, images)
    ids = np.array([r.identity for r in manifest.records], dtype=np.int64)
    junk = np.eye(len(ids), dtype=bool)
    values, extras = retrieval_metrics(feats, feats, ids, ids, junk_mask=junk)
    return MetricReport(task="reid", values=values, extras=extras)
