import math

import numpy as np
import pytest

from nirfuse.checkpoint import load_checkpoint, save_checkpoint
from nirfuse.data import NoiseSpec, SceneImages
from nirfuse.errors import ConfigError, NumericalError
from nirfuse.net import NetConfig, net_init
from nirfuse.tensor import Tensor4
from nirfuse.toy import make_triples
from nirfuse.trainer import (
    CosineSchedule,
    OptimState,
    SceneDataset,
    StepHalfSchedule,
    TrainConfig,
    TripleDataset,
    adam_step,
    batch_seed,
    clip_grad_norm,
    evaluate,
    load_training_checkpoint,
    lr_at,
    train,
)


def tiny_net(mode="sfm", seed=0):
    return net_init(NetConfig(scales=2, base_channels=4, blocks_per_scale=1, fusion_mode=mode,
                              seed=seed))


def tiny_data(n=4, size=16, seed=0):
    t = make_triples(n, size, NoiseSpec(8.0, seed=seed), seed=seed)
    return TripleDataset(t.noisy, t.clean, t.nir)


def scalar_param(value):
    return Tensor4(np.full((1, 1, 1, 1), float(value)), requires_grad=True)


class TestSchedules:
    def test_cosine_endpoints(self):
        s = CosineSchedule()
        assert abs(lr_at(s, 0) - 2e-4) < 1e-12
        assert abs(lr_at(s, s.total_steps) - 1e-6) < 1e-12

    def test_cosine_midpoint(self):
        s = CosineSchedule(2e-4, 1e-6, 1000)
        assert abs(lr_at(s, 500) - (2e-4 + 1e-6) / 2) < 1e-12

    def test_cosine_clamps_past_end(self):
        s = CosineSchedule(2e-4, 1e-6, 100)
        assert lr_at(s, 1000) == 1e-6

    def test_step_half(self):
        s = StepHalfSchedule(3e-4, 20000)
        assert lr_at(s, 19999) == 3e-4
        assert lr_at(s, 20000) == 1.5e-4
        assert lr_at(s, 40000) == 3e-4 / 4 == 7.5e-5

    def test_positive_everywhere(self):
        s = CosineSchedule(1e-3, 1e-6, 50)
        assert all(lr_at(s, i) > 0 for i in range(60))

    def test_invalid_rejected(self):
        with pytest.raises(ConfigError):
            CosineSchedule(0.0, 1e-6, 10)
        with pytest.raises(ConfigError):
            TrainConfig(schedule="linear").make_schedule()


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = scalar_param(0.3)
        p.grad = np.zeros_like(p.data)
        adam_step([("p", p)], OptimState(), lr=0.1)
        assert p.data.item() == 0.3

    def test_first_step_size(self):
        p = scalar_param(1.0)
        p.grad = np.ones_like(p.data)
        adam_step([("p", p)], OptimState(), lr=0.1)
        assert p.data.item() == pytest.approx(0.9, abs=1e-8)

    def test_quadratic_bowl(self):
        p = scalar_param(1.0)
        state = OptimState()
        for _ in range(500):
            p.grad = 2 * p.data
            adam_step([("p", p)], state, lr=0.1)
        assert abs(p.data.item()) < 1e-3
        assert state.step == 500

    def test_missing_gradient_rejected(self):
        with pytest.raises(NumericalError, match="'p'"):
            adam_step([("p", scalar_param(1.0))], OptimState())

    def test_clip_grad_norm(self):
        a, b = scalar_param(0), scalar_param(0)
        a.grad, b.grad = np.full_like(a.data, 3.0), np.full_like(b.data, 4.0)
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        assert math.hypot(a.grad.item(), b.grad.item()) == pytest.approx(1.0)


class TestTraining:
    def test_identical_seeds_identical_curves(self):
        cfg = TrainConfig(steps=6, batch=2, patch=16, log_every=0)
        a = train(tiny_net(), tiny_data(), cfg).losses
        b = train(tiny_net(), tiny_data(), cfg).losses
        np.testing.assert_array_equal(a, b)

    def test_batches_depend_on_seed_and_step(self):
        assert batch_seed(0, 1) == batch_seed(0, 1)
        assert len({batch_seed(0, 1), batch_seed(0, 2), batch_seed(1, 1)}) == 3

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = TrainConfig(steps=10, batch=2, patch=16, log_every=0)
        full = train(tiny_net(), tiny_data(), cfg)
        train(tiny_net(), tiny_data(), cfg, out_dir=tmp_path, until=5)
        net, state, _ = load_training_checkpoint(tmp_path / "checkpoint.bin")
        assert state.step == 5
        rest = train(net, tiny_data(), cfg, state)
        assert np.abs(rest.losses - full.losses[5:]).max() < 1e-6

    def test_outputs_written(self, tmp_path):
        cfg = TrainConfig(steps=4, batch=2, patch=16, log_every=0, checkpoint_every=2)
        train(tiny_net("single"), tiny_data(), cfg, out_dir=tmp_path)
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,lr,loss" and len(lines) == 5
        assert (tmp_path / "checkpoint_0000002.bin").exists()
        assert (tmp_path / "checkpoint.bin").exists()

    def test_loss_decreases(self):
        cfg = TrainConfig(steps=60, batch=4, patch=16, lr_start=2e-3, log_every=0)
        losses = train(tiny_net(), tiny_data(n=2), cfg).losses
        assert losses[-10:].mean() < 0.6 * losses[0]

    def test_non_finite_loss_names_batch(self):
        net = tiny_net("single")
        net.rgb_encoder.stem.weight.data[...] = np.nan
        with pytest.raises(NumericalError, match="batch id 7:0"):
            train(net, tiny_data(), TrainConfig(steps=2, batch=2, patch=16, seed=7, log_every=0))

    def test_scene_dataset_synthesizes_noise(self):
        t = make_triples(3, 16, NoiseSpec(0.0))
        scenes = [SceneImages(s.scene_id, s.clean, s.nir) for s in t.scenes()]
        b = SceneDataset(scenes, NoiseSpec(8.0)).batch(2, 8, seed=0)
        assert not np.array_equal(b.noisy_rgb.data, b.clean_rgb.data)


class TestEvaluate:
    def scenes(self, n=3):
        t = make_triples(n, 16, NoiseSpec(8.0), seed=1)
        return t.scenes()

    def test_identity_model_reports_input_psnr(self):
        from nirfuse.losses import psnr
        net = tiny_net()
        for h in net.decoder.heads:
            h.weight.data[...] = 0.0
            h.bias.data[...] = 0.0
        scenes = self.scenes()
        table = evaluate(net, scenes)
        assert len(table.rows) == 3
        for row, s in zip(table.rows, scenes):
            assert row.psnr == pytest.approx(psnr(np.clip(s.noisy, 0, 1), s.clean), abs=1e-12)

    def test_clean_input_scores_perfectly(self):
        net = tiny_net()
        for h in net.decoder.heads:
            h.weight.data[...] = 0.0
            h.bias.data[...] = 0.0
        scenes = [SceneImages(s.scene_id, s.clean, s.nir, s.clean) for s in self.scenes(2)]
        table = evaluate(net, scenes)
        assert all(r.psnr == math.inf and r.ssim == pytest.approx(1.0, abs=1e-9) for r in table.rows)

    def test_table_format(self):
        table = evaluate(tiny_net(), self.scenes(2))
        lines = table.lines()
        assert lines[0] == "image_id,psnr,ssim" and lines[-1].startswith("mean,")
        assert len(lines) == 4

    def test_odd_size_is_center_cropped(self, caplog):
        t = make_triples(1, 18, NoiseSpec(8.0), seed=2)
        s = t.scenes()[0]
        s = SceneImages(s.scene_id, s.clean[:, :, :17], s.nir[:, :, :17], s.noisy[:, :, :17])
        table = evaluate(tiny_net(), [s])
        assert len(table.rows) == 1 and "center-cropping" in caplog.text

    def test_checkpoint_round_trip_is_exact(self, tmp_path):
        net = tiny_net()
        train(net, tiny_data(), TrainConfig(steps=3, batch=2, patch=16, log_every=0))
        before = evaluate(net, self.scenes())
        save_checkpoint(tmp_path / "c.bin", net)
        loaded, _, _ = load_checkpoint(tmp_path / "c.bin")
        after = evaluate(loaded, self.scenes())
        assert [(r.psnr, r.ssim) for r in before.rows] == [(r.psnr, r.ssim) for r in after.rows]
