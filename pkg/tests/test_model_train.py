import numpy as np
import pytest

import oracles
from carseg.centers import LabelMask
from carseg.gradcheck import numeric_grad
from carseg.losses import CenterTracker, cross_entropy_loss
from carseg.model import Model, ModelConfig, build_model, load_checkpoint, save_checkpoint
from carseg.synth import SceneSpec, generate
from carseg.tensor import Tensor
from carseg.train import (
    SGD,
    TrainConfig,
    batch_order,
    confusion_matrix,
    evaluate_miou,
    miou_from_confusion,
    poly_lr,
    read_log,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def small_data():
    return generate(SceneSpec(height=16, width=16), 24, "train")


class TestModel:
    def test_logit_shape(self):
        m = build_model(ModelConfig(channels=(4, 4, 4), feature_dim=6))
        feats, logits = m.forward(np.zeros((2, 7, 5, 3)))
        assert feats.shape == (2, 7, 5, 6)
        assert logits.shape == (2, 7, 5, 4)

    def test_same_seed_same_weights(self):
        a, b = build_model(ModelConfig(seed=3)), build_model(ModelConfig(seed=3))
        c = build_model(ModelConfig(seed=4))
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
        assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="head_kernel"):
            ModelConfig(head_kernel=5)
        with pytest.raises(ValueError, match="backbone"):
            ModelConfig(channels=(8, 8))

    @pytest.mark.parametrize("head", [1, 3])
    def test_forward_matches_loop_oracle(self, head):
        cfg = ModelConfig(channels=(3, 4, 2), head_kernel=head, feature_dim=3, num_classes=2, seed=head)
        m = build_model(cfg, dtype=np.float64)
        # nonzero biases so they are exercised too
        rng = np.random.default_rng(0)
        for name, p in m.params:
            if name.endswith(".b"):
                p.data[:] = rng.normal(size=p.shape) * 0.1
        img = rng.random((5, 5, 3))
        feats, logits = m.forward(img[None])

        x = (img - 0.5).tolist()
        p = dict(m.params)
        for i in range(3):
            x = oracles.relu3(oracles.conv2d_same(x, p[f"conv{i}.w"].data.tolist(), p[f"conv{i}.b"].data.tolist()))
        f = oracles.relu3(oracles.conv2d_same(x, p["head.w"].data.tolist(), p["head.b"].data.tolist()))
        z = oracles.conv2d_same(f, p["cls.w"].data.tolist(), p["cls.b"].data.tolist())
        assert np.max(np.abs(feats.data[0] - np.array(f))) <= 1e-10
        assert np.max(np.abs(logits.data[0] - np.array(z))) <= 1e-10

    def test_checkpoint_round_trip(self, tmp_path):
        m = build_model(ModelConfig(channels=(4, 4, 4, 4), head_kernel=3, feature_dim=5))
        save_checkpoint(m, tmp_path / "m.carm")
        raw = (tmp_path / "m.carm").read_bytes()
        assert raw[:5] == b"CARM\x01"
        back = load_checkpoint(tmp_path / "m.carm")
        assert [n for n, _ in back.params] == [n for n, _ in m.params]
        assert all(np.array_equal(p.data, q.data) for p, q in zip(m.parameters(), back.parameters()))
        assert back.head_kernel == 3 and back.n_backbone == 4

    def test_checkpoint_errors(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"XXXX\x01")
        with pytest.raises(ValueError, match="CARM"):
            load_checkpoint(tmp_path / "bad")
        m = build_model(ModelConfig())
        save_checkpoint(m, tmp_path / "m.carm")
        (tmp_path / "cut").write_bytes((tmp_path / "m.carm").read_bytes()[:-10])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(tmp_path / "cut")


class TestPolyLr:
    def test_endpoints(self):
        assert poly_lr(0, 100, 0.01) == 0.01
        assert poly_lr(100, 100, 0.01) == 0.0

    def test_midpoint(self):
        assert abs(poly_lr(50, 100, 0.01, 0.9) - 0.01 * 0.5 ** 0.9) <= 1e-18

    def test_errors(self):
        with pytest.raises(ValueError):
            poly_lr(0, 0, 0.01)
        with pytest.raises(ValueError):
            poly_lr(5, 4, 0.01)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError, match="scope"):
        TrainConfig(center_scope="dataset")
    assert not TrainConfig(w_intra=0, w_c2c=0, w_c2p=0).uses_car


def test_sgd_step_matches_hand_computation():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(1, 1, 3, 2))
    b0 = rng.normal(size=2)
    # classifier directly on the image: one 1x1 conv layer
    model = Model([
        ("head.w", Tensor(np.eye(3)[None, None], requires_grad=False)),
        ("head.b", Tensor(np.full(3, 0.5))),
        ("cls.w", Tensor(w0.copy(), requires_grad=True)),
        ("cls.b", Tensor(b0.copy(), requires_grad=True)),
    ])
    images = rng.random((2, 3, 3, 3))
    labels = rng.integers(0, 2, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    masks = [LabelMask(lab, 2) for lab in labels]
    tc = TrainConfig(w_intra=0, w_c2c=0, w_c2p=0)
    train_step(model, images, masks, tc, CenterTracker())
    opt = SGD([model.params[2][1], model.params[3][1]], momentum=0.9, weight_decay=1e-3)
    opt.step(0.1)

    feats = images  # relu(eye conv(x - 0.5) + 0.5) == x for x in [0, 1]
    stacked = LabelMask.stack(masks)

    def loss_w(w):
        z = feats.reshape(-1, 3) @ w.reshape(3, 2) + b0
        return cross_entropy_loss(Tensor(z), stacked).item()

    def loss_b(b):
        z = feats.reshape(-1, 3) @ w0.reshape(3, 2) + b
        return cross_entropy_loss(Tensor(z), stacked).item()

    gw = numeric_grad(loss_w, w0)
    gb = numeric_grad(loss_b, b0)
    np.testing.assert_allclose(model.params[2][1].data, w0 - 0.1 * (gw + 1e-3 * w0), rtol=0, atol=1e-9)
    np.testing.assert_allclose(model.params[3][1].data, b0 - 0.1 * (gb + 1e-3 * b0), rtol=0, atol=1e-9)


def test_momentum_accumulates():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], momentum=0.5)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step(0.1)
    assert abs(p.data[0] - (1.0 - 0.1 - 0.1 * 1.5)) <= 1e-15


def test_batch_order_covers_epochs():
    batches = batch_order(10, 5, 4, seed=0)
    flat = np.concatenate(batches)
    assert len(flat) == 20
    assert sorted(flat[:10]) == list(range(10))
    assert all(np.array_equal(a, b) for a, b in zip(batches, batch_order(10, 5, 4, seed=0)))


class TestTrain:
    def test_byte_identical_runs(self, small_data, tmp_path):
        outs = []
        for k in range(2):
            m = build_model(ModelConfig(channels=(8, 8, 8), feature_dim=8, seed=1))
            train(m, small_data, TrainConfig(iterations=12, batch_size=4, seed=1), tmp_path / f"log{k}.csv")
            save_checkpoint(m, tmp_path / f"m{k}.carm")
            outs.append(((tmp_path / f"log{k}.csv").read_bytes(), (tmp_path / f"m{k}.carm").read_bytes()))
        assert outs[0] == outs[1]

    def test_log_format(self, small_data, tmp_path):
        m = build_model(ModelConfig(channels=(4, 4, 4), feature_dim=4))
        train(m, small_data, TrainConfig(iterations=3, batch_size=2), tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "step,lr,ce,intra,inter_c2c,inter_c2p,total"
        rows = read_log(tmp_path / "log.csv")
        assert [r["step"] for r in rows] == [0, 1, 2]
        assert all(abs(r["total"] - (r["ce"] + r["intra"] + r["inter_c2c"] + r["inter_c2p"])) <= 1e-6 for r in rows)

    def test_baseline_logs_car_terms_without_using_them(self, small_data):
        cfg = ModelConfig(channels=(4, 4, 4), feature_dim=4)
        m = build_model(cfg)
        res = train(m, small_data, TrainConfig(iterations=2, batch_size=2, w_intra=0, w_c2c=0, w_c2p=0))
        step0 = res.log[0]
        assert step0[3] > 0 and step0[6] == step0[2]

    @pytest.mark.parametrize("scope", ["image", "moving"])
    def test_other_scopes_run(self, small_data, scope):
        m = build_model(ModelConfig(channels=(4, 4, 4), feature_dim=4, head_kernel=3))
        res = train(m, small_data, TrainConfig(iterations=3, batch_size=3, center_scope=scope,
                                               replacement="literal"))
        assert len(res.log) == 3 and all(np.isfinite(res.log[-1]))

    def test_all_ignored_batch_skipped(self):
        s = generate(SceneSpec(height=8, width=8), 2)
        for x in s:
            x.mask = LabelMask(np.full((8, 8), 255), 4)
        m = build_model(ModelConfig(channels=(4, 4, 4), feature_dim=4))
        before = [p.data.copy() for p in m.parameters()]
        res = train(m, s, TrainConfig(iterations=2, batch_size=2))
        assert res.log[0][2:] == (0.0,) * 5
        assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))

    def test_loss_decreases_over_window(self):
        data = generate(SceneSpec(), 64, "train")
        m = build_model(ModelConfig())
        res = train(m, data, TrainConfig(iterations=200))
        total = np.array([r[6] for r in res.log])
        assert total[-50:].mean() < total[:50].mean()


class TestMiou:
    def test_perfect(self):
        gt = np.array([[0, 1], [2, 255]])
        assert miou_from_confusion(confusion_matrix(np.array([[0, 1], [2, 0]]), gt, 3)).miou == 1.0

    def test_constant_prediction(self):
        gt = np.array([0, 0, 1, 1])
        res = miou_from_confusion(confusion_matrix(np.zeros(4, dtype=int), gt, 2))
        np.testing.assert_array_equal(res.iou, [0.5, 0.0])
        assert res.miou == 0.25

    def test_absent_class_not_averaged(self):
        res = miou_from_confusion(confusion_matrix(np.array([0, 2]), np.array([0, 0]), 3))
        assert np.isnan(res.iou[1]) and np.isnan(res.iou[2])
        assert res.miou == 0.5

    @pytest.mark.parametrize("seed", range(5))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 4, size=200)
        gt[rng.random(200) < 0.1] = 255
        pred = rng.integers(0, 4, size=200)
        cm = confusion_matrix(pred, gt, 4)
        ref = oracles.confusion(pred.tolist(), gt.tolist(), 4)
        assert cm.tolist() == ref
        assert abs(miou_from_confusion(cm).miou - oracles.miou(ref)) <= 1e-12

    def test_untrained_model_reported(self):
        samples = generate(SceneSpec(), 16, "test_common")
        res = evaluate_miou(build_model(ModelConfig()), samples)
        assert 0.0 <= res.miou <= 1.0
        assert res.confusion.sum() == sum(s.mask.valid_index.size for s in samples)
