import hashlib
import json
from collections import Counter

import numpy as np
import pytest
import torch

from lineagegan import (
    GeneratorConfig,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    gan_losses,
    load_checkpoint,
    load_generator,
    make_sample,
    random_adjacency,
    save_checkpoint,
    train,
)
from lineagegan.training import load_image

from conftest import tiny_train_config


def param_hash(module):
    digest = hashlib.sha256()
    for p in module.parameters():
        digest.update(p.detach().numpy().tobytes())
    return digest.hexdigest()


class TestLoadImage:
    def test_range_and_shape(self, corpus_graph):
        node = next(iter(corpus_graph.nodes.values()))
        img = load_image(node.image_path, 32)
        assert img.shape == (3, 32, 32)
        assert img.min() >= -1.0 and img.max() <= 1.0

    def test_resize_on_load(self, corpus_graph):
        node = next(iter(corpus_graph.nodes.values()))
        assert load_image(node.image_path, 16).shape == (3, 16, 16)

    def test_rejects_non_square(self, tmp_path):
        from PIL import Image

        path = tmp_path / "wide.png"
        Image.new("RGB", (16, 8)).save(path)
        with pytest.raises(ValueError, match="square"):
            load_image(path, 16)


class TestMakeSample:
    def test_zero_probability_always_targets_child(self, corpus_templates):
        cfg = tiny_train_config(p_random_target=0.0)
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert make_sample(corpus_templates[0], rng, cfg).target_index == 0

    def test_random_target_frequencies(self, corpus_templates):
        # 10k draws at p=1: each non-child slot should come up ~1/6 of the time
        cfg = tiny_train_config(p_random_target=1.0)
        rng = np.random.default_rng(1)
        counts = Counter(
            make_sample(corpus_templates[0], rng, cfg).target_index for _ in range(10_000)
        )
        assert counts[0] == 0
        for slot in range(1, 7):
            assert abs(counts[slot] / 10_000 - 1 / 6) < 0.02

    def test_noised_slot_and_clean_original(self, corpus_templates):
        cfg = tiny_train_config(p_random_target=0.0)
        template = corpus_templates[0]
        sample = make_sample(template, np.random.default_rng(2), cfg)
        clean = load_image(template.slot_image_paths[0], cfg.image_size)
        np.testing.assert_array_equal(sample.target_original, clean)
        assert np.abs(sample.images[0] - clean).max() > 0.1  # noise replaced it
        for slot in range(1, 7):
            np.testing.assert_array_equal(
                sample.images[slot], load_image(template.slot_image_paths[slot], cfg.image_size)
            )
        assert sample.images.min() >= -1.0 and sample.images.max() <= 1.0

    def test_lineage_adjacency_by_default(self, corpus_templates):
        from lineagegan import build_adjacency

        cfg = tiny_train_config()
        sample = make_sample(corpus_templates[0], np.random.default_rng(3), cfg)
        np.testing.assert_array_equal(
            sample.adjacency.a_hat, build_adjacency(corpus_templates[0]).a_hat
        )

    def test_ablation_adjacency_differs_but_valid(self, corpus_templates):
        from lineagegan import build_adjacency

        cfg = tiny_train_config(ablation_random_adjacency=True)
        lineage = build_adjacency(corpus_templates[0])
        sample = make_sample(corpus_templates[0], np.random.default_rng(4), cfg)
        adj = sample.adjacency
        assert not np.array_equal(adj.a_tilde, lineage.a_tilde)
        assert np.array_equal(adj.a_tilde, adj.a_tilde.T)
        assert (np.diag(adj.a_tilde) == 1).all()
        d_inv = np.diag(1.0 / np.sqrt(adj.degrees))
        np.testing.assert_allclose(adj.a_hat, d_inv @ adj.a_tilde @ d_inv, atol=1e-12)


class TestRandomAdjacency:
    def test_invariants(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            adj = random_adjacency(7, rng)
            assert np.array_equal(adj.a_tilde, adj.a_tilde.T)
            assert (np.diag(adj.a_tilde) == 1).all()
            assert np.abs(np.linalg.eigvalsh(adj.a_hat)).max() <= 1 + 1e-6


def fake_scale_outputs(patch, features):
    return [(patch, features)]


class TestGanLosses:
    def test_perfect_discriminator_gives_zero_d_loss(self):
        real = fake_scale_outputs(torch.ones(1, 1, 4, 4), [])
        fake = fake_scale_outputs(torch.zeros(1, 1, 4, 4), [])
        loss_d, _, _ = gan_losses(real, fake, lambda_fm=10.0)
        assert float(loss_d) == 0.0

    def test_fooled_discriminator_gives_zero_g_adv(self):
        real = fake_scale_outputs(torch.zeros(1, 1, 4, 4), [])
        fake = fake_scale_outputs(torch.ones(1, 1, 4, 4), [])
        _, loss_g_adv, _ = gan_losses(real, fake, lambda_fm=10.0)
        assert float(loss_g_adv) == 0.0

    def test_identical_features_give_zero_fm(self):
        feats = [torch.randn(1, 8, 4, 4)]
        real = fake_scale_outputs(torch.randn(1, 1, 4, 4), feats)
        fake = fake_scale_outputs(torch.randn(1, 1, 4, 4), [feats[0].clone()])
        _, _, loss_fm = gan_losses(real, fake, lambda_fm=10.0)
        assert float(loss_fm) == 0.0

    def test_formulas_match_hand_computation(self):
        pr = torch.tensor([[0.5, 1.5]])
        pf = torch.tensor([[0.25, -0.25]])
        fr = [torch.tensor([1.0, 3.0])]
        ff = [torch.tensor([2.0, 2.0])]
        loss_d, loss_g_adv, loss_fm = gan_losses([(pr, fr)], [(pf, ff)], lambda_fm=2.0)
        assert float(loss_d) == pytest.approx(0.5 * (0.25 + 0.0625))
        assert float(loss_g_adv) == pytest.approx(((0.75) ** 2 + (1.25) ** 2) / 2)
        assert float(loss_fm) == pytest.approx(2.0 * 1.0)

    def test_fm_real_features_detached(self):
        fr = [torch.randn(2, 3, requires_grad=True)]
        ff = [torch.randn(2, 3, requires_grad=True)]
        patch = torch.zeros(1, 1, 2, 2)
        _, _, loss_fm = gan_losses([(patch, fr)], [(patch, ff)], lambda_fm=1.0)
        loss_fm.backward()
        assert fr[0].grad is None
        assert ff[0].grad is not None

    def test_scale_count_mismatch(self):
        out = fake_scale_outputs(torch.zeros(1, 1, 2, 2), [])
        with pytest.raises(ValueError, match="same scales"):
            gan_losses(out, out + out)


class TestTrainer:
    def test_requires_templates(self):
        with pytest.raises(ValueError, match="no eligible families"):
            Trainer(tiny_train_config(), [])

    def test_steps_are_finite_and_logged(self, corpus_templates, tmp_path):
        cfg = tiny_train_config(max_steps=3)
        trainer = Trainer(cfg, corpus_templates)
        trainer.run(metrics_path=tmp_path / "m.jsonl", checkpoint_path=tmp_path / "c.ckpt")
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == 3
        for line in lines:
            stats = json.loads(line)
            assert set(stats) == {"step", "loss_d", "loss_g_adv", "loss_g_fm"}
            assert all(np.isfinite(v) for v in stats.values())
        assert (tmp_path / "c.ckpt").exists()

    def test_epoch_advances_with_partial_batches(self, corpus_templates):
        cfg = tiny_train_config(batch_size=3, max_steps=6)  # 8 templates -> 3+3+2
        trainer = Trainer(cfg, corpus_templates)
        sizes = []
        for _ in range(3):
            sizes.append(trainer.next_batch().images.shape[0])
        assert sizes == [3, 3, 2]
        assert trainer.epoch == 1 and trainer.index_in_epoch == 0

    def test_deterministic_metrics_log(self, corpus_manifest, tmp_path):
        cfg = tiny_train_config(max_steps=4)
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            train(cfg, corpus_manifest, d / "c.ckpt", metrics_path=d / "m.jsonl")
        assert (tmp_path / "a/m.jsonl").read_bytes() == (tmp_path / "b/m.jsonl").read_bytes()

    def test_worker_parallel_batches_identical(self, corpus_templates, monkeypatch):
        cfg = tiny_train_config(batch_size=4)
        sequential = Trainer(cfg, corpus_templates).next_batch()
        monkeypatch.setenv("G2P_NUM_WORKERS", "2")
        parallel = Trainer(cfg, corpus_templates).next_batch()
        assert torch.equal(sequential.images, parallel.images)
        assert torch.equal(sequential.a_hat, parallel.a_hat)
        assert torch.equal(sequential.target_index, parallel.target_index)

    def test_ablation_training_smoke(self, corpus_manifest, tmp_path):
        cfg = tiny_train_config(max_steps=2, ablation_random_adjacency=True)
        state = train(cfg, corpus_manifest, tmp_path / "c.ckpt")
        assert state.step == 2

    def test_divergence_guard_snapshots_and_raises(self, corpus_templates, tmp_path):
        cfg = tiny_train_config(max_steps=5, lr=1e12)
        trainer = Trainer(cfg, corpus_templates)
        with pytest.raises(TrainingDiverged, match="non-finite loss"):
            trainer.run(metrics_path=tmp_path / "m.jsonl", checkpoint_path=tmp_path / "c.ckpt")
        assert (tmp_path / "c.ckpt.diverged").exists()

    def test_generator_step_never_touches_discriminator(self, corpus_templates):
        cfg = tiny_train_config()
        trainer = Trainer(cfg, corpus_templates)
        batch = trainer.next_batch()
        fake = trainer.generator(batch.images, batch.a_hat, batch.target_index)

        g_before = param_hash(trainer.generator)
        loss_d, d_real = trainer.discriminator_step(batch, fake.detach())
        assert param_hash(trainer.generator) == g_before  # D step leaves G alone

        d_after_dstep = param_hash(trainer.discriminator)
        trainer.generator_step(batch, fake, d_real)
        assert param_hash(trainer.discriminator) == d_after_dstep  # G step leaves D alone
        assert param_hash(trainer.generator) != g_before


class TestCheckpoint:
    def test_format_tag_rejected_on_garbage(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        torch.save({"format": "other"}, bad)
        with pytest.raises(ValueError, match="G2P-CKPT-1"):
            load_checkpoint(bad)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ValueError, match="not found"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_roundtrip_resume_is_bit_exact(self, corpus_templates, tmp_path):
        cfg = tiny_train_config(max_steps=10)
        trainer_a = Trainer(cfg, corpus_templates)
        for _ in range(3):
            trainer_a.train_step()
        ckpt = tmp_path / "mid.ckpt"
        save_checkpoint(trainer_a.state(), ckpt)

        stats_a = trainer_a.train_step()
        trainer_b = Trainer.from_checkpoint(ckpt, corpus_templates)
        stats_b = trainer_b.train_step()

        assert stats_a == stats_b
        for key, tensor in trainer_a.generator.state_dict().items():
            assert torch.equal(tensor, trainer_b.generator.state_dict()[key])
        for key, tensor in trainer_a.discriminator.state_dict().items():
            assert torch.equal(tensor, trainer_b.discriminator.state_dict()[key])

    def test_load_generator_runs_inference(self, corpus_manifest, corpus_templates, tmp_path):
        cfg = tiny_train_config(max_steps=1)
        train(cfg, corpus_manifest, tmp_path / "c.ckpt")
        generator, loaded_cfg = load_generator(tmp_path / "c.ckpt")
        assert loaded_cfg == cfg
        sample = make_sample(corpus_templates[0], np.random.default_rng(0), cfg)
        out = generator.generate(sample.images, sample.adjacency, sample.target_index)
        assert out.shape == (3, 32, 32)


class TestTrainConfig:
    def test_dict_roundtrip(self):
        cfg = tiny_train_config(max_steps=5, lambda_l1=0.5)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown train config keys"):
            TrainConfig.from_dict({"learning_rate": 1e-4})

    def test_validation(self):
        with pytest.raises(ValueError, match="p_random_target"):
            TrainConfig(p_random_target=1.5)
        with pytest.raises(ValueError, match="seed"):
            TrainConfig(seed=-1)
        with pytest.raises(ValueError, match="nonnegative"):
            TrainConfig(lambda_fm=-1.0)

    def test_resolved_generator_config_syncs_image_size(self):
        cfg = TrainConfig(image_size=128, generator=GeneratorConfig(image_size=64))
        resolved = cfg.resolved_generator_config()
        assert resolved.image_size == 128
        assert resolved.family_size == 7
