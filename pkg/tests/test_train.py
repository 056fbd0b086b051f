import csv
import math

import pytest
import torch

from sapgan.data import make_toy_dataset
from sapgan.networks import NetworkSpec
from sapgan.schedule import TrainConfig
from sapgan.train import METRIC_FIELDS, Trainer, TrainingDiverged, spec_from_meta, _spec_meta


def tiny_setup(tmp_path, seed=0, **cfg_kw):
    ds = make_toy_dataset(counts=(3,) * 7, resolution=8, seed=0)
    spec = NetworkSpec.build(
        max_resolution=8, latent_dim=8, n_classes=7, base_channels=8, channel_floor=4
    )
    cfg_kw.setdefault("total_images", 10_000)
    cfg_kw.setdefault("images_per_phase", 64)
    cfg_kw.setdefault("batch_by_resolution", {4: 4, 8: 4})
    cfg_kw.setdefault("seed", seed)
    cfg = TrainConfig(**cfg_kw)
    return Trainer(spec, cfg, ds, tmp_path / "run"), ds, spec, cfg


def params_vector(module):
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


class TestStep:
    def test_metrics_and_image_accounting(self, tmp_path):
        tr, *_ = tiny_setup(tmp_path)
        row = tr.step()
        assert set(row) == set(METRIC_FIELDS)
        assert row["step"] == 1
        assert row["images_shown"] == 4  # one critic update of batch 4
        assert math.isfinite(row["d_loss"]) and math.isfinite(row["g_loss"])
        assert row["resolution"] == 4 and row["alpha"] == 1.0

    def test_step_ratio_multiplies_critic_updates(self, tmp_path):
        tr, *_ = tiny_setup(tmp_path, d_g_step_ratio=3)
        row = tr.step()
        assert row["images_shown"] == 12

    def test_losses_move_weights(self, tmp_path):
        tr, *_ = tiny_setup(tmp_path)
        g0 = params_vector(tr.g).clone()
        d0 = params_vector(tr.d).clone()
        tr.step()
        assert not torch.equal(params_vector(tr.g), g0)
        assert not torch.equal(params_vector(tr.d), d0)

    def test_schedule_advances_through_stages(self, tmp_path):
        tr, *_ = tiny_setup(tmp_path)
        seen = set()
        for _ in range(50):
            row = tr.step()
            seen.add((row["stage"], row["resolution"]))
            if row["stage"] == 1 and row["alpha"] == 1.0:
                break
        assert (0, 4) in seen and (1, 8) in seen

    def test_divergence_raises_with_checkpoint_name(self, tmp_path):
        tr, *_ = tiny_setup(tmp_path)
        tr.step()
        ckpt = tr.save()
        with torch.no_grad():
            tr.d.score.bias.fill_(float("nan"))
        with pytest.raises(TrainingDiverged, match=str(ckpt)):
            tr.step()

    def test_two_timescales_reach_optimizers(self, tmp_path):
        tr, *_ = tiny_setup(tmp_path, lr_g=1e-3, lr_d=4e-3)
        assert tr.opt_g.param_groups[0]["lr"] == 1e-3
        assert tr.opt_d.param_groups[0]["lr"] == 4e-3

    def test_ratio_mode_scales_critic_lr(self, tmp_path):
        tr, *_ = tiny_setup(tmp_path, lr_g=2e-3, lr_ratio=5.0)
        assert tr.opt_d.param_groups[0]["lr"] == pytest.approx(0.01)


class TestValidation:
    def test_rejects_low_resolution_dataset(self, tmp_path):
        ds = make_toy_dataset(counts=(2,) * 7, resolution=4, seed=0)
        spec = NetworkSpec.build(max_resolution=8, base_channels=8, channel_floor=4, latent_dim=8)
        with pytest.raises(ValueError, match="below the network"):
            Trainer(spec, TrainConfig(batch_by_resolution={4: 2, 8: 2}), ds, tmp_path)

    def test_rejects_class_mismatch(self, tmp_path):
        ds = make_toy_dataset(counts=(2, 2), resolution=8, seed=0)
        spec = NetworkSpec.build(max_resolution=8, base_channels=8, channel_floor=4, latent_dim=8)
        with pytest.raises(ValueError, match="classes"):
            Trainer(spec, TrainConfig(batch_by_resolution={4: 2, 8: 2}), ds, tmp_path)

    def test_small_dataset_warns(self, tmp_path):
        ds = make_toy_dataset(counts=(1, 1, 1, 1, 1, 1, 1), resolution=8, seed=0)
        spec = NetworkSpec.build(
            max_resolution=8, base_channels=8, channel_floor=4, latent_dim=8
        )
        with pytest.warns(UserWarning, match="replacement"):
            Trainer(
                spec,
                TrainConfig(batch_by_resolution={4: 16, 8: 16}),
                ds,
                tmp_path,
            )


class TestPersistence:
    def test_resume_matches_uninterrupted_run(self, tmp_path):
        # Save mid-fade so the stage-1 parameters carry fewer optimizer steps
        # than the trunk; resume must replay the remaining steps exactly.
        tr_a, ds, spec, cfg = tiny_setup(tmp_path, seed=3)
        for _ in range(20):
            tr_a.step()
        ckpt = tr_a.save(tmp_path / "mid.ckpt")
        rows_a = [tr_a.step() for _ in range(6)]

        tr_b = Trainer.load(ckpt, cfg, ds, tmp_path / "resumed")
        rows_b = [tr_b.step() for _ in range(6)]

        assert tr_b.images_shown == tr_a.images_shown
        for ra, rb in zip(rows_a, rows_b):
            assert ra["d_loss"] == rb["d_loss"] and ra["g_loss"] == rb["g_loss"]
        assert torch.equal(params_vector(tr_a.g), params_vector(tr_b.g))
        assert torch.equal(params_vector(tr_a.d), params_vector(tr_b.d))

    def test_resume_restores_counters_and_spec(self, tmp_path):
        tr, ds, spec, cfg = tiny_setup(tmp_path)
        tr.step()
        tr.step()
        ckpt = tr.save()
        tr2 = Trainer.load(ckpt, cfg, ds, tmp_path / "r2")
        assert tr2.images_shown == tr.images_shown
        assert tr2.step_count == 2
        assert tr2.spec == spec

    def test_resume_rejects_changed_hyperparameters(self, tmp_path):
        tr, ds, spec, cfg = tiny_setup(tmp_path)
        tr.step()
        ckpt = tr.save()
        other = TrainConfig(
            total_images=cfg.total_images,
            images_per_phase=cfg.images_per_phase,
            batch_by_resolution=cfg.batch_by_resolution,
            seed=cfg.seed,
            lr_g=9e-3,
        )
        with pytest.raises(ValueError, match="lr_g"):
            Trainer.load(ckpt, other, ds, tmp_path / "bad")

    def test_spec_meta_round_trip(self):
        spec = NetworkSpec.build(max_resolution=16, attention_stages=(8,), latent_dim=8)
        assert spec_from_meta(_spec_meta(spec)) == spec


class TestDriver:
    def test_train_writes_metrics_and_final_checkpoint(self, tmp_path):
        tr, *_ = tiny_setup(tmp_path)
        history = tr.train(max_steps=4, log_every=2)
        assert len(history) == 4
        with open(tr.out_dir / "metrics.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        assert tuple(rows[0]) == METRIC_FIELDS
        assert tr.last_checkpoint is not None and tr.last_checkpoint.exists()

    def test_periodic_checkpoints(self, tmp_path):
        tr, *_ = tiny_setup(tmp_path, checkpoint_every_images=8)
        tr.train(max_steps=5)
        ckpts = sorted(tr.out_dir.glob("ckpt_*.ckpt"))
        assert len(ckpts) >= 2

    def test_budget_stops_run(self, tmp_path):
        tr, *_ = tiny_setup(tmp_path, total_images=12)
        history = tr.train()
        assert tr.images_shown >= 12
        assert len(history) == 3  # 4 images per step

    def test_augmented_training_is_deterministic(self, tmp_path):
        tr1, *_ = tiny_setup(tmp_path / "a", seed=5, augment_reals=True)
        tr2, *_ = tiny_setup(tmp_path / "b", seed=5, augment_reals=True)
        for _ in range(2):
            tr1.step()
            tr2.step()
        assert torch.equal(params_vector(tr1.g), params_vector(tr2.g))
        assert torch.equal(params_vector(tr1.d), params_vector(tr2.d))
