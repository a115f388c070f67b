import numpy as np
import numpy.testing as npt
import pytest

from srinet.data import make_synth_dataset, synth_shape
from srinet.errors import InvalidInputError, TrainingDivergedError
from srinet.geom import PointCloud, random_rotation
from srinet.net import (
    ModelConfig,
    TrainConfig,
    build_model,
    classify_forward,
    evaluate,
    gradient_check,
    learning_rate,
    load_checkpoint,
    save_checkpoint,
    segment_forward,
    shared_mlp_backward,
    shared_mlp_forward,
    softmax_cross_entropy,
    train,
)
from srinet.net.layers import global_max_pool_backward, global_max_pool_forward
from srinet.net.training import _shape_iou, init_adam
from tests.reference import reference_classify_logits

TOY = dict(task="classify", num_classes=5, backbone=(16, 24, 48), side=(16, 24),
           dense=(32, 16), k_neighbors=6, response_k=8)


def toy_model(seed=0, **overrides):
    cfg = ModelConfig(**{**TOY, **overrides})
    return build_model(cfg, seed=seed)


def toy_dataset(per_class=4, n_points=64, seed=1):
    return make_synth_dataset(per_class=per_class, n_points=n_points,
                              seed=seed, noise=0.01)


class TestSharedMlp:
    def test_identity_weights(self):
        x = np.abs(np.random.default_rng(0).normal(size=(10, 4)))
        out, _ = shared_mlp_forward(x, np.eye(4), np.zeros(4))
        npt.assert_array_equal(out, x)

    def test_row_permutation_equivariant(self):
        rng = np.random.Generator(np.random.PCG64(1))
        x = rng.standard_normal((12, 5))
        w = rng.standard_normal((5, 7))
        b = rng.standard_normal(7)
        out, _ = shared_mlp_forward(x, w, b)
        perm = rng.permutation(12)
        out_p, _ = shared_mlp_forward(x[perm], w, b)
        npt.assert_array_equal(out_p, out[perm])

    def test_finite_differences(self):
        rng = np.random.Generator(np.random.PCG64(2))
        x = rng.standard_normal((6, 4))
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(3)
        out, cache = shared_mlp_forward(x, w, b)
        grad = rng.standard_normal(out.shape)
        g_x, g_w, g_b = shared_mlp_backward(grad, cache)
        h = 1e-5
        for arr, g in ((x, g_x), (w, g_w), (b, g_b)):
            flat = arr.reshape(-1)
            for idx in rng.choice(flat.size, size=3, replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                up = float((shared_mlp_forward(x, w, b)[0] * grad).sum())
                flat[idx] = orig - h
                down = float((shared_mlp_forward(x, w, b)[0] * grad).sum())
                flat[idx] = orig
                numeric = (up - down) / (2 * h)
                analytic = g.reshape(-1)[idx]
                assert abs(analytic - numeric) / max(abs(analytic),
                                                     abs(numeric), 1e-6) < 1e-4


class TestGlobalMaxPool:
    def test_single_point(self):
        x = np.array([[[1.0, -2.0, 3.0]]])
        out, _ = global_max_pool_forward(x, axis=1)
        npt.assert_array_equal(out, [[1.0, -2.0, 3.0]])

    def test_permutation_invariant(self):
        rng = np.random.Generator(np.random.PCG64(3))
        x = rng.standard_normal((2, 20, 6))
        out, _ = global_max_pool_forward(x, axis=1)
        out_p, _ = global_max_pool_forward(x[:, rng.permutation(20)], axis=1)
        npt.assert_array_equal(out_p, out)

    def test_gradient_routes_to_first_argmax(self):
        x = np.array([[[1.0, 5.0], [7.0, 5.0], [7.0, 2.0]]])
        out, cache = global_max_pool_forward(x, axis=1)
        g = global_max_pool_backward(np.ones((1, 2)), cache)
        npt.assert_array_equal(g, [[[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]]])

    def test_matches_finite_differences(self):
        rng = np.random.Generator(np.random.PCG64(4))
        x = rng.standard_normal((3, 7, 5))
        out, cache = global_max_pool_forward(x, axis=1)
        grad = rng.standard_normal(out.shape)
        g = global_max_pool_backward(grad, cache)
        h = 1e-6
        flat = x.reshape(-1)
        for idx in rng.choice(flat.size, size=8, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            up = float((global_max_pool_forward(x, axis=1)[0] * grad).sum())
            flat[idx] = orig - h
            down = float((global_max_pool_forward(x, axis=1)[0] * grad).sum())
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            assert abs(g.reshape(-1)[idx] - numeric) < 1e-6


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((3, 7)), np.array([1, 2, 3]))
        npt.assert_allclose(loss, np.log(7), atol=1e-12)

    def test_confident_correct(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 50.0
        loss, _ = softmax_cross_entropy(logits, np.array([2]))
        assert loss < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.Generator(np.random.PCG64(5))
        logits = rng.standard_normal((4, 6))
        labels = rng.integers(0, 6, size=4)
        _, grad = softmax_cross_entropy(logits, labels)
        h = 1e-5
        flat = logits.reshape(-1)
        for idx in rng.choice(flat.size, size=6, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            up = softmax_cross_entropy(logits, labels)[0]
            flat[idx] = orig - h
            down = softmax_cross_entropy(logits, labels)[0]
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = grad.reshape(-1)[idx]
            assert abs(analytic - numeric) / max(abs(analytic),
                                                 abs(numeric), 1e-6) < 1e-4

    def test_out_of_range_label(self):
        with pytest.raises(InvalidInputError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestClassifyForward:
    def test_rotation_invariance(self):
        model = toy_model()
        for seed in range(5):
            sample = synth_shape("box", 64, seed=seed, noise=0.01)
            rot = random_rotation(seed + 3000)
            base = classify_forward(model, sample.cloud)
            moved = classify_forward(model, rot.apply_cloud(sample.cloud))
            assert np.max(np.abs(moved - base)) < 1e-5

    def test_point_permutation_invariance(self):
        model = toy_model()
        sample = synth_shape("cone", 64, seed=3, noise=0.01)
        perm = np.random.default_rng(0).permutation(64)
        permuted = PointCloud(sample.cloud.points[perm],
                              sample.cloud.normals[perm])
        base = classify_forward(model, sample.cloud)
        moved = classify_forward(model, permuted)
        assert np.max(np.abs(moved - base)) < 1e-6

    def test_ablated_pipeline_runs(self):
        model = toy_model(use_graph_agg=False, use_keypoint=False)
        sample = synth_shape("torus", 64, seed=4, noise=0.01)
        logits = classify_forward(model, sample.cloud)
        assert logits.shape == (5,)
        # still invariant without the side branch and responses
        rot = random_rotation(41)
        moved = classify_forward(model, rot.apply_cloud(sample.cloud))
        assert np.max(np.abs(moved - logits)) < 1e-5

    def test_matches_reference_reimplementation(self):
        # train briefly so the learned transform is no longer the identity
        model = toy_model(seed=9)
        ds = toy_dataset(per_class=4)
        train(model, ds, TrainConfig(epochs=3, batch_size=8, seed=2))
        wt2 = model.params["ga.wt2"]
        assert np.abs(wt2).max() > 0
        for seed in range(3):
            sample = synth_shape("cylinder", 64, seed=seed, noise=0.01)
            got = classify_forward(model, sample.cloud)
            want = reference_classify_logits(model, sample.cloud)
            npt.assert_allclose(got, want, atol=1e-8)
            assert got.argmax() == want.argmax()

    def test_wrong_task_rejected(self):
        model = toy_model(task="segment", num_parts=2)
        sample = synth_shape("cylinder", 64, seed=0)
        with pytest.raises(InvalidInputError):
            classify_forward(model, sample.cloud)


class TestSegmentForward:
    def test_output_shape_and_invariance(self):
        model = toy_model(task="segment", num_parts=2)
        for n in (64, 80):
            sample = synth_shape("cylinder", n, seed=2, noise=0.01)
            logits = segment_forward(model, sample.cloud)
            assert logits.shape == (n, 2)
        rot = random_rotation(17)
        sample = synth_shape("cylinder", 64, seed=5, noise=0.01)
        base = segment_forward(model, sample.cloud)
        moved = segment_forward(model, rot.apply_cloud(sample.cloud))
        assert np.max(np.abs(moved - base)) < 1e-5

    def test_training_improves_cylinder_iou(self):
        cfg = ModelConfig(task="segment", num_parts=2, dense=(48, 24),
                          response_k=12, k_neighbors=8,
                          backbone=(16, 24, 48, 96), side=(16, 32),
                          transform_hidden=16)
        ds = [synth_shape("cylinder", 96, seed=1000 + i, noise=0.01)
              for i in range(60)]
        tr, te = ds[:48], ds[48:]
        model = build_model(cfg, seed=0)
        before = evaluate(model, te)["iou"]
        train(model, tr, TrainConfig(epochs=12, batch_size=8, seed=0))
        after = evaluate(model, te)
        assert after["iou"] > before
        rotated = evaluate(model, te, rotate=True, seed=3)
        assert abs(rotated["iou"] - after["iou"]) < 1e-9


class TestTraining:
    def test_learning_rate_schedule(self):
        cfg = TrainConfig(epochs=60, seed=0)
        for epoch in range(0, 20):
            assert learning_rate(cfg, epoch) == 1e-3
        for epoch in range(20, 40):
            npt.assert_allclose(learning_rate(cfg, epoch), 3e-4)
        npt.assert_allclose(learning_rate(cfg, 40), 9e-5)
        assert learning_rate(cfg, 200) == 1e-5

    def test_zero_lr_leaves_params_bit_identical(self):
        model = toy_model()
        before = {k: v.copy() for k, v in model.params.items()}
        ds = toy_dataset(per_class=2)
        train(model, ds, TrainConfig(epochs=1, batch_size=8, lr0=0.0, seed=0))
        for k in before:
            npt.assert_array_equal(model.params[k], before[k])

    def test_loss_decreases(self):
        model = toy_model()
        ds = toy_dataset(per_class=6)
        metrics, _ = train(model, ds, TrainConfig(epochs=6, batch_size=8, seed=0))
        assert metrics[-1]["loss"] < metrics[0]["loss"]

    def test_deterministic_per_seed(self):
        ds = toy_dataset(per_class=3)
        runs = []
        for _ in range(2):
            model = toy_model(seed=4)
            metrics, _ = train(model, ds,
                               TrainConfig(epochs=3, batch_size=8, seed=11))
            runs.append((metrics, {k: v.copy() for k, v in model.params.items()}))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            npt.assert_array_equal(runs[0][1][k], runs[1][1][k])

    def test_divergence_reported_with_epoch(self):
        model = toy_model()
        model.params["fuse.w"][:] = np.inf
        ds = toy_dataset(per_class=2)
        with pytest.raises(TrainingDivergedError) as err:
            train(model, ds, TrainConfig(epochs=2, batch_size=8, seed=0))
        assert err.value.epoch == 0

    def test_empty_dataset_rejected(self):
        with pytest.raises(InvalidInputError):
            train(toy_model(), [], TrainConfig(epochs=1, seed=0))


class TestEvaluate:
    def test_shape_iou_conventions(self):
        pred = np.array([0, 0, 1, 1])
        gt = np.array([0, 0, 1, 1])
        assert _shape_iou(pred, gt, {0, 1}) == 1.0
        # part 2 absent from both prediction and ground truth counts as 1
        assert _shape_iou(pred, gt, {0, 1, 2}) == 1.0
        # disjoint part predictions score 0 for that part
        assert _shape_iou(np.array([0, 0]), np.array([1, 1]), {0, 1}) == 0.0

    def test_rotate_protocol_agreement(self):
        model = toy_model()
        ds = toy_dataset(per_class=3)
        plain = evaluate(model, ds)
        rotated = evaluate(model, ds, rotate=True, seed=7)
        assert np.mean(plain["predictions"] == rotated["predictions"]) == 1.0
        assert abs(plain["accuracy"] - rotated["accuracy"]) < 1e-12

    def test_segmentation_metrics_present(self):
        model = toy_model(task="segment", num_parts=2)
        ds = [synth_shape("cylinder", 64, seed=i, noise=0.01) for i in range(4)]
        out = evaluate(model, ds)
        assert 0.0 <= out["accuracy"] <= 1.0
        assert 0.0 <= out["iou"] <= 1.0


class TestGradientCheckOp:
    def test_fresh_model_passes(self):
        model = toy_model(seed=2)
        ds = toy_dataset(per_class=2)[:3]
        report = gradient_check(model, ds, per_layer=6, seed=0)
        assert report["max"] < 1e-4

    def test_covers_transform_parameters(self):
        model = toy_model(seed=2)
        ds = toy_dataset(per_class=2)[:2]
        report = gradient_check(model, ds, per_layer=3, seed=0)
        assert {"ga.wt1", "ga.wt2", "ga.w0", "ga.w1"} <= set(report)

    def test_segment_model_passes(self):
        model = toy_model(task="segment", num_parts=2, seed=3)
        ds = [synth_shape("cylinder", 64, seed=i, noise=0.01) for i in range(2)]
        report = gradient_check(model, ds, per_layer=6, seed=1)
        assert report["max"] < 1e-4

    def test_dead_network_errors_finite(self):
        # a flat plane has zero responses everywhere; with mul fusion the
        # whole head goes dark, and the report must still be finite
        model = toy_model(seed=5, fusion="mul")
        xs, ys = np.meshgrid(np.linspace(0, 1, 8), np.linspace(0, 1, 8))
        pts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(64)])
        pts[0] = (3.0, 0.0, 0.0)  # break norm ties for axis selection
        normals = np.tile([0.0, 0.0, 1.0], (64, 1))
        from srinet.data import DatasetSample
        batch = [DatasetSample(PointCloud(pts, normals, 0), 0)]
        report = gradient_check(model, batch, per_layer=4, seed=0)
        assert np.isfinite(report["max"])


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        model = toy_model(seed=6)
        opt = init_adam(model.params)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, opt, epoch=3)
        loaded, opt2, epoch = load_checkpoint(path)
        assert epoch == 3
        assert loaded.config == model.config
        for k in model.params:
            npt.assert_array_equal(loaded.params[k], model.params[k])
        assert opt2["t"] == opt["t"]

    def test_resume_reproduces_run(self, tmp_path):
        ds = toy_dataset(per_class=3)
        straight = toy_model(seed=8)
        train(straight, ds, TrainConfig(epochs=5, batch_size=8, seed=21))

        resumed = toy_model(seed=8)
        _, opt = train(resumed, ds, TrainConfig(epochs=3, batch_size=8, seed=21))
        path = tmp_path / "mid.ckpt"
        save_checkpoint(path, resumed, opt, epoch=3)
        loaded, opt2, epoch = load_checkpoint(path)
        train(loaded, ds, TrainConfig(epochs=5, batch_size=8, seed=21),
              start_epoch=epoch, opt_state=opt2)
        for k in straight.params:
            npt.assert_array_equal(loaded.params[k], straight.params[k])

    def test_bad_file_rejected(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(InvalidInputError):
            load_checkpoint(path)
