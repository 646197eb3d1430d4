import math

import numpy as np
import pytest

from idevc import models, synthdata as sd, trainer
from idevc.errors import PreconditionError, ValidationError


def tiny_dataset(seed=0, groups=4, per_group=6):
    spec = sd.SyntheticSpec(
        groups=groups,
        samples_per_group=per_group,
        style_dim=2,
        content_dim=3,
        obs_dim=8,
        noise_sigma=0.02,
        seed=seed,
    )
    dataset, _ = sd.generate(spec)
    return dataset


def tiny_configs(**overrides):
    cfg = trainer.TrainConfig(
        batch_groups=2,
        batch_per_group=3,
        total_steps=5,
        approx_steps=2,
        holdout_fraction=0.0,
        checkpoint_every=100,
        seed=1,
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    model_cfg = trainer.ModelConfig(style_dim=3, content_dim=4, hidden_width=8, approx_hidden=8)
    return cfg, model_cfg


def fresh_state(dataset, cfg, model_cfg):
    dims = models.Dims(dataset.obs_dim, model_cfg.style_dim, model_cfg.content_dim)
    bundle = models.init_bundle(
        dims, cfg.seed, hidden_width=model_cfg.hidden_width, approx_hidden=model_cfg.approx_hidden
    )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 13))))
    return trainer.TrainState(bundle=bundle, rng=rng)


class TestSampleBatch:
    def test_exhaustive_batch_is_whole_dataset(self):
        dataset = tiny_dataset()
        rng = np.random.default_rng(0)
        batch = trainer.sample_batch(dataset, dataset.group_ids, 4, 6, rng)
        assert sorted(batch.sample_indices.tolist()) == list(range(len(dataset.samples)))

    def test_same_rng_state_identical_batch(self):
        dataset = tiny_dataset()
        a = trainer.sample_batch(dataset, dataset.group_ids, 2, 3, np.random.default_rng(5))
        b = trainer.sample_batch(dataset, dataset.group_ids, 2, 3, np.random.default_rng(5))
        np.testing.assert_array_equal(a.sample_indices, b.sample_indices)
        assert a.x.tobytes() == b.x.tobytes()

    def test_group_frequencies_uniform(self):
        dataset = tiny_dataset(groups=10, per_group=2)
        rng = np.random.default_rng(7)
        counts = {int(g): 0 for g in dataset.group_ids}
        draws = 10_000
        for _ in range(draws):
            batch = trainer.sample_batch(dataset, dataset.group_ids, 2, 2, rng)
            for g in batch.group_ids:
                counts[int(g)] += 1
        for g, c in counts.items():
            assert abs(c / draws - 0.2) < 0.02

    def test_insufficient_groups_rejected(self):
        dataset = tiny_dataset()
        with pytest.raises(PreconditionError):
            trainer.sample_batch(dataset, dataset.group_ids, 9, 2, np.random.default_rng(0))


class TestSplit:
    def test_deterministic_and_sized(self):
        groups = np.arange(1, 11)
        train_a, held_a = trainer.split_groups(groups, 0.2, seed=3)
        train_b, held_b = trainer.split_groups(groups, 0.2, seed=3)
        np.testing.assert_array_equal(held_a, held_b)
        assert held_a.size == 2 and train_a.size == 8
        assert not set(held_a) & set(train_a)

    def test_zero_fraction_keeps_everything(self):
        groups = np.arange(1, 5)
        train, held = trainer.split_groups(groups, 0.0, seed=0)
        np.testing.assert_array_equal(train, groups)
        assert held.size == 0

    def test_round_trip_file(self, tmp_path):
        path = tmp_path / "split.txt"
        trainer._write_split(path, np.array([1, 2, 3]), np.array([4]))
        train, held = trainer.read_split(path)
        assert train.tolist() == [1, 2, 3] and held.tolist() == [4]


class TestSteps:
    def test_zero_learning_rate_keeps_parameters(self):
        dataset = tiny_dataset()
        cfg, model_cfg = tiny_configs()
        state = fresh_state(dataset, cfg, model_cfg)
        before = models.bundle_checksum(state.bundle)
        batch = trainer.sample_batch(dataset, dataset.group_ids, 2, 3, state.rng)
        frozen = trainer.TrainConfig(**{**cfg.__dict__, "main_lr": 1e-300})
        metrics = trainer.main_step(state, batch, frozen)
        after = models.bundle_checksum(state.bundle)
        for comp in ("approx_mean", "approx_var"):
            assert before[comp] == after[comp]
        assert np.isfinite(metrics["main_loss"])

    def test_main_step_never_touches_approximator(self):
        dataset = tiny_dataset()
        cfg, model_cfg = tiny_configs()
        state = fresh_state(dataset, cfg, model_cfg)
        batch = trainer.sample_batch(dataset, dataset.group_ids, 2, 3, state.rng)
        before = models.bundle_checksum(state.bundle)
        trainer.main_step(state, batch, cfg)
        after = models.bundle_checksum(state.bundle)
        assert before["approx_mean"] == after["approx_mean"]
        assert before["approx_var"] == after["approx_var"]
        assert before["style_encoder"] != after["style_encoder"]

    def test_approx_step_never_touches_encoders(self):
        dataset = tiny_dataset()
        cfg, model_cfg = tiny_configs()
        state = fresh_state(dataset, cfg, model_cfg)
        batch = trainer.sample_batch(dataset, dataset.group_ids, 2, 3, state.rng)
        before = models.bundle_checksum(state.bundle)
        trainer.approx_step(state, batch, cfg)
        after = models.bundle_checksum(state.bundle)
        for comp in ("style_encoder", "content_encoder", "decoder"):
            assert before[comp] == after[comp]
        assert before["approx_mean"] != after["approx_mean"]

    def test_beta_zero_freezes_approximator(self):
        dataset = tiny_dataset()
        cfg, model_cfg = tiny_configs(beta=0.0)
        state = fresh_state(dataset, cfg, model_cfg)
        batch = trainer.sample_batch(dataset, dataset.group_ids, 2, 3, state.rng)
        before = models.bundle_checksum(state.bundle)
        metrics = trainer.approx_step(state, batch, cfg)
        after = models.bundle_checksum(state.bundle)
        assert before == after
        assert np.isfinite(metrics["F"])

    def test_descent_property(self):
        dataset = tiny_dataset()
        cfg, model_cfg = tiny_configs(main_lr=1e-3)
        probe = trainer.TrainConfig(**{**cfg.__dict__, "main_lr": 1e-300})
        wins = 0
        trials = 100
        for seed in range(trials):
            cfg.seed = seed
            state = fresh_state(dataset, cfg, model_cfg)
            batch = trainer.sample_batch(dataset, dataset.group_ids, 2, 3, state.rng)
            before = trainer.main_step(state, batch, probe)["main_loss"]
            trainer.main_step(state, batch, cfg)
            after = trainer.main_step(state, batch, probe)["main_loss"]
            if after < before:
                wins += 1
        assert wins >= 95

    def test_approx_ascent_property(self):
        dataset = tiny_dataset()
        trials = 40
        wins = 0
        for seed in range(trials):
            cfg, model_cfg = tiny_configs(beta=1.0, approx_lr=3e-3, approx_steps=1, seed=seed)
            state = fresh_state(dataset, cfg, model_cfg)
            batch = trainer.sample_batch(dataset, dataset.group_ids, 2, 3, state.rng)
            values = [trainer.approx_step(state, batch, cfg)["F"] for _ in range(30)]
            if all(b >= a - 1e-6 for a, b in zip(values, values[1:])):
                wins += 1
        assert wins >= math.ceil(0.95 * trials)


class TestTrain:
    def test_zero_steps_returns_initial_bundle(self):
        dataset = tiny_dataset()
        cfg, model_cfg = tiny_configs(total_steps=0)
        state = trainer.train(dataset, cfg, model_cfg)
        dims = models.Dims(dataset.obs_dim, model_cfg.style_dim, model_cfg.content_dim)
        reference = models.init_bundle(
            dims, cfg.seed, hidden_width=model_cfg.hidden_width,
            approx_hidden=model_cfg.approx_hidden,
        )
        assert models.bundle_checksum(state.bundle) == models.bundle_checksum(reference)
        assert state.history == []

    def test_full_run_determinism(self, tmp_path):
        dataset = tiny_dataset()
        outputs = []
        for sub in ("a", "b"):
            cfg, model_cfg = tiny_configs(total_steps=8)
            state = trainer.train(dataset, cfg, model_cfg, out_dir=str(tmp_path / sub))
            outputs.append(state)
        ck_a = (tmp_path / "a" / "checkpoint.txt").read_bytes()
        ck_b = (tmp_path / "b" / "checkpoint.txt").read_bytes()
        assert ck_a == ck_b
        log_a = (tmp_path / "a" / "metrics.csv").read_bytes()
        log_b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert log_a == log_b

    def test_logged_component_invariants(self):
        dataset = tiny_dataset()
        cfg, model_cfg = tiny_configs(total_steps=20)
        state = trainer.train(dataset, cfg, model_cfg)
        for row in state.history:
            assert row["I1"] < 0.0
            assert row["I2"] <= math.log(cfg.batch_per_group) + 1e-9
            assert np.isfinite(row["I3"])

    def test_metrics_header(self, tmp_path):
        dataset = tiny_dataset()
        cfg, model_cfg = tiny_configs(total_steps=2)
        trainer.train(dataset, cfg, model_cfg, out_dir=str(tmp_path))
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,I1,I2,I3,F,loss"

    def test_gate_check_blocks_noise(self):
        spec = sd.SyntheticSpec(groups=4, samples_per_group=6, style_dim=2, content_dim=3,
                                obs_dim=8, noise_sigma=10.0, seed=0)
        dataset, _ = sd.generate(spec)
        cfg, model_cfg = tiny_configs()
        with pytest.raises(PreconditionError, match="gate"):
            trainer.train(dataset, cfg, model_cfg)

    def test_rejects_sequence_datasets(self):
        spec = sd.SyntheticSpec(groups=3, samples_per_group=3, style_dim=2, content_dim=3,
                                obs_dim=8, regime="sequence", frames=4, noise_sigma=0.0, seed=0)
        dataset, _ = sd.generate(spec)
        cfg, model_cfg = tiny_configs()
        with pytest.raises(PreconditionError, match="vector"):
            trainer.train(dataset, cfg, model_cfg)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            trainer.TrainConfig(batch_per_group=1).validate()
        with pytest.raises(ValidationError):
            trainer.TrainConfig(ablate="i2").validate()


class TestTransfer:
    def test_self_transfer_is_reconstruction(self):
        dataset = tiny_dataset()
        cfg, model_cfg = tiny_configs()
        state = fresh_state(dataset, cfg, model_cfg)
        x = dataset.samples[0]
        via_transfer = trainer.transfer(state.bundle, x, x)
        direct = models.decode(
            state.bundle,
            models.encode_style(state.bundle, x),
            models.encode_content(state.bundle, x),
        )
        assert via_transfer.tobytes() == direct.tobytes()

    def test_repeated_calls_bit_identical(self):
        dataset = tiny_dataset()
        cfg, model_cfg = tiny_configs()
        state = fresh_state(dataset, cfg, model_cfg)
        a = trainer.transfer(state.bundle, dataset.samples[0], dataset.samples[1])
        b = trainer.transfer(state.bundle, dataset.samples[0], dataset.samples[1])
        assert a.tobytes() == b.tobytes()
