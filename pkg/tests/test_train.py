import json
import math

import numpy as np
import pytest

from spacap.autodiff import Adam, Tensor, smooth_l1
from spacap.inference import evaluate_model
from spacap.model import CaptionNet, ModelConfig
from spacap.scenegen import SceneConfig, Vocabulary, make_record
from spacap.train import (LossWeights, TrainConfig, compute_losses, detection_loss, detection_targets,
                          fit, load_model, model_config_for, prepare_batch, relation_loss, save_model,
                          total_loss)

TINY = ModelConfig(c_model=16, n_blocks=1, n_heads=2, ffn_width=32, m_proposals=8)


def tiny_net(**kw):
    from dataclasses import replace
    return CaptionNet(model_config_for(replace(TINY, **kw), Vocabulary.build()))


def tiny_batch(n=2, seed=0, m=8):
    recs = [make_record([9, k], scene_id=f"b{k}") for k in range(n)]
    rng = np.random.default_rng(seed)
    return prepare_batch(recs, [rng] * n, m, 0.05, Vocabulary.build(), do_augment=False)


class TestLosses:
    def test_total_weights(self):
        out = total_loss(Tensor(0.1), Tensor(1.0), Tensor(2.0))
        assert out.item() == pytest.approx(2.2, abs=1e-12)

    def test_total_without_t2t_ignores_relation(self):
        assert total_loss(Tensor(0.1), Tensor(1.0), Tensor(2.0), use_t2t=False).item() == pytest.approx(2.0)
        assert total_loss(Tensor(0.1), Tensor(1.0), None, use_t2t=False).item() == pytest.approx(2.0)
        zero = total_loss(Tensor(0.1), Tensor(1.0), Tensor(2.0), LossWeights(zeta=0.0))
        assert zero.item() == pytest.approx(2.0)

    def test_non_finite_named(self):
        with pytest.raises(ValueError, match="relation"):
            total_loss(Tensor(0.1), Tensor(1.0), Tensor(float("nan")))

    def test_smooth_l1_quadratic_branch(self):
        assert smooth_l1(Tensor(np.full(6, 0.5)), np.zeros(6)).data.tolist() == [0.125] * 6

    def test_relation_loss_uniform(self):
        lg = Tensor(np.zeros((1, 4, 4, 9)))
        labels = np.random.default_rng(0).integers(-1, 2, (1, 4, 4, 3))
        assert relation_loss(lg, labels, ~np.eye(4, dtype=bool)[None]).item() == pytest.approx(3 * math.log(3))

    def test_relation_diagonal_gets_no_gradient(self):
        rng = np.random.default_rng(1)
        lg = Tensor(rng.normal(size=(2, 5, 5, 9)), requires_grad=True)
        labels = rng.integers(-1, 2, (2, 5, 5, 3))
        mask = np.broadcast_to(~np.eye(5, dtype=bool), (2, 5, 5))
        relation_loss(lg, labels, mask).backward()
        idx = np.arange(5)
        assert (lg.grad[:, idx, idx] == 0).all()
        assert np.abs(lg.grad[:, 0, 1]).sum() > 0

    def test_relation_loss_needs_pairs(self):
        with pytest.raises(ValueError):
            relation_loss(Tensor(np.zeros((1, 1, 1, 9))), np.zeros((1, 1, 1, 3), int), np.zeros((1, 1, 1), bool))

    def test_detection_regression_zero_for_perfect_predictions(self):
        batch = prepare_batch([make_record(3)], [np.random.default_rng(0)], 8, 0.0, Vocabulary.build(), False)
        tg = batch.det_targets
        assert tg.positive.all() and np.abs(tg.residuals).max() < 1e-12
        from spacap.model.network import Detections
        big = 50.0
        obj = np.where(tg.objectness[..., None] == np.arange(2), big, -big)
        cls = np.where(tg.classes[..., None] == np.arange(len(SceneConfig().classes)), big, -big)
        det = Detections(None, Tensor(obj), Tensor(cls), Tensor(np.zeros(tg.residuals.shape)))
        assert detection_loss(det, tg).item() < 1e-30

    def test_detection_targets_positive_threshold(self):
        batch = tiny_batch()
        t = detection_targets(batch.proposals[0], batch.scenes[0])
        assert t.objectness.dtype.kind == "i" and set(np.unique(t.objectness)) <= {0, 1}


class TestBatches:
    def test_relation_labels_follow_assignment(self):
        from spacap.geom3d import relation_maps
        batch = tiny_batch()
        for s in range(2):
            obj = relation_maps(batch.scenes[s].objects).labels
            a = batch.proposals[s].gt_assignment
            np.testing.assert_array_equal(batch.rel_labels[s], obj[a[:, None], a[None, :]])
        assert not batch.rel_mask[:, np.arange(8), np.arange(8)].any()

    def test_relation_mask_covers_all_off_diagonal_pairs(self):
        recs = [make_record([9, k]) for k in range(4)]
        batch = prepare_batch(recs, [np.random.default_rng(2)] * 4, 8, 0.3, Vocabulary.build(), False)
        assert not batch.det_targets.positive.all()
        np.testing.assert_array_equal(batch.rel_mask, np.broadcast_to(~np.eye(8, dtype=bool), (4, 8, 8)))

    def test_caption_targets_shifted(self):
        b = tiny_batch()
        keep = ~b.cap_pad[:, 1:]
        np.testing.assert_array_equal(b.cap_in[:, 1:][keep], b.cap_out[:, :-1][keep])
        assert (b.cap_in[:, 0] == Vocabulary.build().sos_id).all()


class TestOptimisation:
    def test_loss_halves_in_200_steps(self):
        net = tiny_net()
        batch = tiny_batch(n=2)
        opt = Adam(net.parameters(), lr=3e-3)
        w = LossWeights()
        first = None
        for _ in range(200):
            out = compute_losses(net, batch, w)
            first = first if first is not None else out["total"].item()
            opt.zero_grad()
            out["total"].backward()
            opt.step()
        assert compute_losses(net, batch, w)["total"].item() <= 0.5 * first

    def test_checkpoint_round_trip_bitwise(self, tmp_path):
        net = tiny_net()
        batch = tiny_batch()
        save_model(tmp_path / "m.ckpt", net, {"note": "x"})
        net.eval()
        back, meta = load_model(tmp_path / "m.ckpt")
        a = compute_losses(net, batch, LossWeights())
        b = compute_losses(back, batch, LossWeights())
        assert meta["note"] == "x"
        np.testing.assert_array_equal(a["logits"].data, b["logits"].data)
        np.testing.assert_array_equal(a["enc"].relation_logits.data, b["enc"].relation_logits.data)

    def test_encoder_free_checkpoint(self, tmp_path):
        net = tiny_net(use_encoder=False, use_t2t=False)
        save_model(tmp_path / "b.ckpt", net, {})
        back, _ = load_model(tmp_path / "b.ckpt")
        names = [n for n, _ in back.named_parameters()]
        assert not any(n.startswith(("encoder", "posenc", "rph")) for n in names)


class TestFit:
    def records(self):
        return [make_record([1, k], scene_id=f"t{k}") for k in range(4)], \
               [make_record([2, k], scene_id=f"v{k}") for k in range(2)]

    def test_eval_interval_too_large(self, tmp_path):
        tr, va = self.records()
        with pytest.raises(ValueError, match="eval_interval"):
            fit(tr, va, TrainConfig(epochs=1, batch_size=2, eval_interval=5), TINY, tmp_path)

    def test_empty_split(self, tmp_path):
        with pytest.raises(ValueError):
            fit([], [make_record(0)], TrainConfig(), TINY, tmp_path)

    def test_deterministic_history_and_best_checkpoint(self, tmp_path):
        tr, va = self.records()
        cfg = TrainConfig(epochs=3, batch_size=2, eval_interval=3)
        ck1, h1 = fit(tr, va, cfg, TINY, tmp_path / "a")
        ck2, h2 = fit(tr, va, cfg, TINY, tmp_path / "b")
        assert h1 == h2 and len(h1) == 2
        assert ck1.read_bytes() == ck2.read_bytes()
        logged = [json.loads(x) for x in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
        assert logged == h1 and {"iter", "loss", "val_cider_0.5"} <= set(logged[0])
        net, meta = load_model(ck1)
        report, _ = evaluate_model(net, va, cfg.noise_sigma, cfg.eval_seed, Vocabulary.build())
        assert report.cider_0_5 == meta["val"]["cider_0_5"] == max(h["val_cider_0.5"] for h in h1)
