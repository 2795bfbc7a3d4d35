import numpy as np
import pytest

from conftest import generic_params
from vmae.backbone import encode
from vmae.dataio import generate_synthetic
from vmae.downstream import (
    MetricReport,
    ProbeConfig,
    _encoder_pass_bwd,
    _encoder_pass_fwd,
    _evaluate_head,
    _split_indices,
    _train_head,
    attribute_metrics,
    extract_features,
    finetune,
    linear_probe,
    multiclass_accuracy,
    reid_report,
    retrieval_metrics,
    segmentation_metrics,
)
from vmae.backbone import zero_grads
from vmae.errors import InputError, ParameterError, StructuralError
from vmae.gradcheck import fd_gradient, relative_error
from vmae.tokenizer import embed_patches, flatten_patches, full_visible_mask, patchify


def slow_attribute_metrics(scores, gt, thr):
    """Loop reference for the multi-label metric conventions."""
    n, n_attr = gt.shape
    preds = scores >= thr
    terms = []
    for j in range(n_attr):
        pos = [i for i in range(n) if gt[i, j]]
        neg = [i for i in range(n) if not gt[i, j]]
        tp = sum(1 for i in pos if preds[i, j])
        tn = sum(1 for i in neg if not preds[i, j])
        t_pos = tp / len(pos) if pos else 0.0
        t_neg = tn / len(neg) if neg else 0.0
        terms.append(0.5 * (t_pos + t_neg))
    accs, precs, recs = [], [], []
    for i in range(n):
        p = {j for j in range(n_attr) if preds[i, j]}
        t = {j for j in range(n_attr) if gt[i, j]}
        inter, union = p & t, p | t
        accs.append(len(inter) / len(union) if union else 0.0)
        precs.append(len(inter) / len(p) if p else 0.0)
        recs.append(len(inter) / len(t) if t else 0.0)
    prec, rec = float(np.mean(precs)), float(np.mean(recs))
    return {
        "mA": float(np.mean(terms)),
        "accuracy": float(np.mean(accs)),
        "precision": prec,
        "recall": rec,
        "f1": 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0,
    }


def slow_retrieval(sims, q_ids, g_ids, junk):
    """Loop reference: stable descending sort, ties to the lower index."""
    aps, firsts = [], []
    skipped = 0
    for i in range(sims.shape[0]):
        order = sorted(range(sims.shape[1]), key=lambda j: (-sims[i, j], j))
        if junk is not None:
            order = [j for j in order if not junk[i, j]]
        rel = [g_ids[j] == q_ids[i] for j in order]
        if not any(rel):
            skipped += 1
            continue
        precisions, seen = [], 0
        for pos, r in enumerate(rel, start=1):
            if r:
                seen += 1
                precisions.append(seen / pos)
        aps.append(float(np.mean(precisions)))
        firsts.append(rel.index(True) + 1)
    return aps, firsts, skipped


class TestAttributeMetrics:
    def test_matches_loop_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            n = int(rng.integers(1, 30))
            a = int(rng.integers(1, 8))
            scores = rng.uniform(size=(n, a))
            gt = rng.integers(0, 2, size=(n, a))
            got = attribute_metrics(scores, gt, threshold=0.5)
            want = slow_attribute_metrics(scores, gt.astype(bool), 0.5)
            for k in want:
                assert got[k] == pytest.approx(want[k], abs=1e-12), k

    def test_perfect_predictions(self):
        gt = np.array([[1, 0, 1], [0, 1, 0]])
        got = attribute_metrics(gt.astype(float), gt)
        assert all(v == pytest.approx(1.0) for v in got.values())

    def test_hand_example(self):
        # single attribute, 2 of 3 positives found, 1 false positive on the negative
        scores = np.array([[0.9], [0.2], [0.8], [0.7]])
        gt = np.array([[1], [1], [1], [0]])
        got = attribute_metrics(scores, gt)
        assert got["mA"] == pytest.approx(0.5 * (2 / 3 + 0.0))
        # per-sample means: hits on samples 0 and 2, zero-denominator sample 3
        assert got["recall"] == pytest.approx(0.5)
        assert got["precision"] == pytest.approx(0.5)
        assert got["accuracy"] == pytest.approx(0.5)
        assert got["f1"] == pytest.approx(0.5)

    def test_zero_denominators_contribute_zero(self):
        # all-negative truth and empty predictions
        got = attribute_metrics(np.zeros((2, 2)), np.zeros((2, 2), dtype=int))
        assert got["mA"] == pytest.approx(0.5)  # pos recall term 0, neg recall 1
        assert got["accuracy"] == 0.0
        assert got["f1"] == 0.0

    def test_validation(self):
        with pytest.raises(InputError):
            attribute_metrics(np.zeros((2, 2)), np.full((2, 2), 2))
        with pytest.raises(StructuralError):
            attribute_metrics(np.zeros((2, 3)), np.zeros((2, 2), dtype=int))
        with pytest.raises(InputError):
            attribute_metrics(np.full((2, 2), np.nan), np.zeros((2, 2), dtype=int))


class TestRetrievalMetrics:
    def test_matches_loop_reference(self):
        rng = np.random.default_rng(1)
        for trial in range(40):
            nq = int(rng.integers(2, 10))
            ng = int(rng.integers(2, 15))
            d = int(rng.integers(2, 6))
            # quantized embeddings force exact similarity ties
            q = rng.integers(-2, 3, size=(nq, d)).astype(float)
            g = rng.integers(-2, 3, size=(ng, d)).astype(float)
            q[np.linalg.norm(q, axis=1) == 0] = 1.0
            g[np.linalg.norm(g, axis=1) == 0] = 1.0
            q_ids = rng.integers(0, 4, nq)
            g_ids = rng.integers(0, 4, ng)
            junk = rng.random((nq, ng)) < 0.2 if trial % 2 else None
            values, extras = retrieval_metrics(q, g, q_ids, g_ids, junk_mask=junk)
            qn = q / np.linalg.norm(q, axis=1, keepdims=True)
            gn = g / np.linalg.norm(g, axis=1, keepdims=True)
            aps, firsts, skipped = slow_retrieval(qn @ gn.T, q_ids, g_ids, junk)
            assert extras["n_skipped"] == skipped
            assert extras["n_valid"] == len(aps)
            if aps:
                assert values["mAP"] == pytest.approx(np.mean(aps), abs=1e-9)
                for k in (1, 5, 10):
                    want = np.mean([1.0 if f <= k else 0.0 for f in firsts])
                    assert values[f"rank{k}"] == pytest.approx(want, abs=1e-12)
            else:
                assert values["mAP"] == 0.0

    def test_rank_monotonicity(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((20, 8))
        g = rng.standard_normal((50, 8))
        values, _ = retrieval_metrics(q, g, rng.integers(0, 5, 20), rng.integers(0, 5, 50))
        assert values["rank1"] <= values["rank5"] <= values["rank10"]

    def test_perfect_retrieval(self):
        emb = np.eye(4)
        ids = np.arange(4)
        values, extras = retrieval_metrics(emb, emb, ids, ids)
        assert values["mAP"] == pytest.approx(1.0)
        assert values["rank1"] == pytest.approx(1.0)
        assert extras["n_skipped"] == 0

    def test_tie_goes_to_lower_gallery_index(self):
        # two identical gallery rows, only the second is a true match: the
        # stable order places index 0 first so the match sits at rank 2
        q = np.array([[1.0, 0.0]])
        g = np.array([[1.0, 0.0], [1.0, 0.0]])
        values, _ = retrieval_metrics(q, g, np.array([7]), np.array([5, 7]))
        assert values["mAP"] == pytest.approx(0.5)
        assert values["rank1"] == 0.0

    def test_junk_removes_self_match(self):
        emb = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        ids = np.array([0, 0, 1])
        junk = np.eye(3, dtype=bool)
        values, extras = retrieval_metrics(emb, emb, ids, ids, junk_mask=junk)
        # the identity-1 query has no other positive: skipped
        assert extras["n_skipped"] == 1
        assert extras["n_valid"] == 2
        assert values["mAP"] == pytest.approx(1.0)

    def test_shape_validation(self):
        with pytest.raises(StructuralError):
            retrieval_metrics(np.ones((2, 3)), np.ones((2, 4)), np.arange(2), np.arange(2))
        with pytest.raises(StructuralError):
            retrieval_metrics(np.ones((2, 3)), np.ones((2, 3)), np.arange(3), np.arange(2))


class TestSegmentationMetrics:
    def test_matches_loop_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            n_cls = int(rng.integers(2, 6))
            pred = rng.integers(0, n_cls, size=(2, 7, 7))
            gt = rng.integers(0, n_cls, size=(2, 7, 7))
            values, extras = segmentation_metrics(pred, gt, n_cls)
            ious, accs = [], []
            for c in range(n_cls):
                tp = int(((pred == c) & (gt == c)).sum())
                union = int(((pred == c) | (gt == c)).sum())
                gt_c = int((gt == c).sum())
                if union:
                    ious.append(tp / union)
                if gt_c:
                    accs.append(tp / gt_c)
            assert values["mIoU"] == pytest.approx(np.mean(ious), abs=1e-12)
            assert values["mAcc"] == pytest.approx(np.mean(accs), abs=1e-12)
            assert values["pixel_accuracy"] == pytest.approx((pred == gt).mean(), abs=1e-12)

    def test_absent_class_excluded(self):
        pred = np.zeros((4, 4), dtype=np.int64)
        gt = np.zeros((4, 4), dtype=np.int64)
        gt[0, :2] = 1
        values, extras = segmentation_metrics(pred, gt, n_classes=3)
        # class 2 never appears: excluded from mIoU; class 1 has IoU 0
        assert values["mIoU"] == pytest.approx(0.5 * (14 / 16 + 0.0))
        assert np.isnan(extras["per_class_iou"][2])

    def test_perfect_maps(self):
        gt = np.random.default_rng(4).integers(0, 3, size=(8, 8))
        values, _ = segmentation_metrics(gt, gt, 3)
        assert values == {"mIoU": 1.0, "mAcc": 1.0, "pixel_accuracy": 1.0}

    def test_validation(self):
        with pytest.raises(InputError):
            segmentation_metrics(np.zeros((2, 2)), np.zeros((2, 2), dtype=int), 2)
        with pytest.raises(InputError):
            segmentation_metrics(
                np.full((2, 2), 5, dtype=int), np.zeros((2, 2), dtype=int), 2
            )
        with pytest.raises(StructuralError):
            segmentation_metrics(
                np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int), 2
            )
        with pytest.raises(ParameterError):
            segmentation_metrics(np.zeros((2,), dtype=int), np.zeros((2,), dtype=int), 0)

    def test_multiclass_accuracy(self):
        assert multiclass_accuracy(np.array([1, 2, 3]), np.array([1, 0, 3])) == pytest.approx(
            2 / 3
        )


class TestFeatureExtraction:
    def test_matches_single_sample_encode(self, tiny_config):
        params = generic_params(tiny_config)
        images = np.random.default_rng(5).uniform(size=(3, 32, 32, 3))
        feats = extract_features(params, images)
        assert feats.shape == (3, tiny_config.d_enc)
        for i in range(3):
            tokens = embed_patches(
                patchify(images[i], 8), full_visible_mask(16), params, pos_table="image"
            )
            enc = encode(tokens, params)
            np.testing.assert_allclose(feats[i], enc[1:].mean(axis=0), atol=1e-12)

    def test_batch_size_invariance(self, tiny_config):
        params = generic_params(tiny_config)
        images = np.random.default_rng(6).uniform(size=(7, 32, 32, 3))
        a = extract_features(params, images, batch_size=2)
        b = extract_features(params, images, batch_size=64)
        np.testing.assert_array_equal(a, b)

    def test_shape_validation(self, tiny_config):
        params = generic_params(tiny_config)
        with pytest.raises(StructuralError):
            extract_features(params, np.zeros((2, 16, 16, 3)))

    def test_encoder_pass_backward_matches_fd(self, tiny_config):
        params = generic_params(tiny_config)
        images = np.random.default_rng(7).uniform(size=(2, 32, 32, 3))
        flat = flatten_patches(images, 8)
        r = np.random.default_rng(8).standard_normal((2, tiny_config.d_enc))

        def f():
            pooled, _ = _encoder_pass_fwd(flat, params, keep_cache=False)
            return float(np.sum(pooled * r))

        _, cache = _encoder_pass_fwd(flat, params, keep_cache=True)
        grads = zero_grads(params)
        _encoder_pass_bwd(r, cache, params, grads)
        for name in ("cls_token", "pos_image", "patch_embed.bias",
                     "encoder.0.norm1.scale"):
            fd = fd_gradient(f, params.tensors[name])
            assert relative_error(fd, grads[name]) < 1e-6, name


class TestProbeHeads:
    def test_attribute_head_fits_separable_features(self):
        rng = np.random.default_rng(9)
        n, a = 64, 12
        y = np.zeros((n, a))
        colors = rng.integers(0, 8, n)
        types_ = rng.integers(0, 4, n)
        y[np.arange(n), colors] = 1
        y[np.arange(n), 8 + types_] = 1
        feats = y + 0.1 * rng.standard_normal((n, a))
        cfg = ProbeConfig(lr=0.05, epochs=100, batch_size=16, seed=0)
        head = _train_head(feats, y, "attribute", a, cfg)
        values = _evaluate_head(head, feats, y.astype(np.int8), "attribute", cfg)
        assert values["mA"] > 0.95
        assert values["f1"] > 0.95

    def test_fine_grained_head_fits_separable_features(self):
        rng = np.random.default_rng(10)
        n, k = 64, 32
        labels = rng.integers(0, k, n).astype(np.int64)
        feats = np.zeros((n, k))
        feats[np.arange(n), labels] = 1.0
        feats += 0.1 * rng.standard_normal((n, k))
        cfg = ProbeConfig(lr=0.05, epochs=100, batch_size=16, seed=0)
        head = _train_head(feats, labels, "fine_grained", k, cfg)
        values = _evaluate_head(head, feats, labels, "fine_grained", cfg)
        assert values["accuracy"] > 0.95

    def test_split_disjoint_and_deterministic(self):
        cfg = ProbeConfig(seed=3)
        a_train, a_test = _split_indices(10, cfg)
        b_train, b_test = _split_indices(10, cfg)
        assert np.array_equal(a_train, b_train)
        assert len(a_train) == 7 and len(a_test) == 3
        assert not set(a_train) & set(a_test)
        with pytest.raises(ParameterError):
            _split_indices(1, cfg)

    def test_probe_config_validation(self):
        with pytest.raises(ParameterError):
            ProbeConfig(train_fraction=1.0)
        with pytest.raises(ParameterError):
            ProbeConfig(epochs=0)
        with pytest.raises(ParameterError):
            ProbeConfig(lr=-1.0)


class TestProbePipelines:
    @pytest.fixture
    def small_data(self, tmp_path):
        return generate_synthetic(12, tmp_path, image_size=32, seed=2, n_identities=4)

    def test_linear_probe_report(self, tiny_config, small_data):
        params = generic_params(tiny_config)
        cfg = ProbeConfig(epochs=3, batch_size=4, seed=1)
        rep = linear_probe(params, small_data, "attribute", cfg)
        assert rep.task == "attribute"
        assert set(rep.values) == {"mA", "accuracy", "precision", "recall", "f1"}
        assert rep.extras["n_train"] + rep.extras["n_test"] == 12
        assert rep.extras["mode"] == "probe"
        again = linear_probe(params, small_data, "attribute", cfg)
        assert rep.values == again.values

    def test_linear_probe_fine_grained(self, tiny_config, small_data):
        params = generic_params(tiny_config)
        rep = linear_probe(
            params, small_data, "fine_grained", ProbeConfig(epochs=3, batch_size=4)
        )
        assert set(rep.values) == {"accuracy"}
        assert 0.0 <= rep.values["accuracy"] <= 1.0

    def test_unknown_task(self, tiny_config, small_data):
        with pytest.raises(ParameterError, match="task"):
            linear_probe(generic_params(tiny_config), small_data, "depth")

    def test_finetune_moves_encoder_only(self, tiny_config, small_data):
        params = generic_params(tiny_config)
        before = {k: v.copy() for k, v in params.tensors.items()}
        work, rep = finetune(
            params, small_data, "attribute", ProbeConfig(epochs=2, batch_size=4)
        )
        assert rep.extras["mode"] == "finetune"
        # the input is untouched
        for k, v in params.tensors.items():
            assert np.array_equal(v, before[k])
        # encoder-side tensors move, decoder-side tensors do not
        assert not np.array_equal(work.tensors["encoder.0.attn.qkv_weight"],
                                  params.tensors["encoder.0.attn.qkv_weight"])
        assert not np.array_equal(work.tensors["patch_embed.weight"],
                                  params.tensors["patch_embed.weight"])
        for name in ("decoder.0.attn.qkv_weight", "mask_token", "pos_decoder",
                     "pixel_head.weight", "semantic_head.weight", "pos_sketch"):
            assert np.array_equal(work.tensors[name], params.tensors[name])

    def test_reid_report(self, tiny_config, small_data):
        params = generic_params(tiny_config)
        rep = reid_report(params, small_data)
        assert rep.task == "reid"
        assert set(rep.values) == {"mAP", "rank1", "rank5", "rank10"}
        assert rep.extras["n_queries"] == 12
        assert rep.extras["n_skipped"] == 0

    def test_reid_all_singletons_skipped(self, tiny_config, tmp_path):
        man = generate_synthetic(4, tmp_path, image_size=32, seed=3, n_identities=4)
        rep = reid_report(generic_params(tiny_config), man)
        assert rep.extras["n_skipped"] == 4
        assert rep.values["mAP"] == 0.0


class TestMetricReport:
    def test_text_format(self, tmp_path):
        rep = MetricReport(task="attribute", values={"mA": 0.75}, extras={"n_test": 3})
        text = rep.to_text()
        assert "task = attribute" in text
        assert "mA = 0.750000" in text
        assert "n_test = 3" in text
        path = tmp_path / "report.txt"
        rep.save(path)
        assert path.read_text() == text
