import numpy as np
import pytest

from idevc import synthdata as sd
from idevc.errors import PreconditionError, UnsupportedRegimeError, ValidationError


def small_spec(**overrides):
    base = dict(
        groups=4,
        samples_per_group=6,
        style_dim=3,
        content_dim=4,
        obs_dim=10,
        noise_sigma=0.0,
        seed=7,
    )
    base.update(overrides)
    return sd.SyntheticSpec(**base)


class TestSpecValidation:
    def test_collects_every_problem(self):
        spec = sd.SyntheticSpec(groups=1, samples_per_group=0, obs_dim=2, noise_sigma=-1.0)
        with pytest.raises(ValidationError) as err:
            spec.validate()
        message = str(err.value)
        for fragment in ("groups", "samples_per_group", "obs_dim", "noise_sigma"):
            assert fragment in message

    def test_default_spec_is_valid(self):
        sd.SyntheticSpec().validate()


class TestGenerate:
    def test_same_seed_bit_identical(self):
        a, _ = sd.generate(small_spec())
        b, _ = sd.generate(small_spec())
        for sa, sb in zip(a.samples, b.samples):
            assert sa.tobytes() == sb.tobytes()

    def test_noiseless_linear_factorization(self):
        dataset, truth = sd.generate(small_spec())
        for i, (x, label) in enumerate(zip(dataset.samples, dataset.labels)):
            style_part = truth.style_of(label) @ truth.mix_style.T
            content_part = truth.contents[i] @ truth.mix_content.T
            np.testing.assert_allclose(x - style_part, content_part, atol=1e-12)
            np.testing.assert_allclose(x, style_part + content_part, atol=1e-12)

    def test_style_separation_enforced(self):
        _, truth = sd.generate(small_spec(style_separation=3.0))
        styles = truth.styles
        d = np.sqrt(((styles[:, None] - styles[None, :]) ** 2).sum(-1))
        off = d[np.triu_indices(styles.shape[0], k=1)]
        assert abs(off.min() - 3.0) < 1e-9

    def test_identifiability_regression(self):
        dataset, truth = sd.generate(
            small_spec(groups=10, samples_per_group=50, style_dim=4, content_dim=8,
                       obs_dim=24, noise_sigma=0.05)
        )
        x = dataset.as_matrix()
        targets = np.vstack([truth.style_of(g) for g in dataset.labels])
        design = np.hstack([x, np.ones((x.shape[0], 1))])
        coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
        residual = targets - design @ coef
        r2 = 1.0 - (residual**2).sum() / ((targets - targets.mean(axis=0)) ** 2).sum()
        assert r2 > 0.95

    def test_quality_gate_default_spec(self):
        dataset, _ = sd.generate(sd.SyntheticSpec(seed=3))
        ok, accuracy = sd.quality_gate(dataset)
        assert ok and accuracy > 0.99

    def test_quality_gate_fails_with_huge_noise(self):
        dataset, _ = sd.generate(small_spec(noise_sigma=10.0))
        ok, accuracy = sd.quality_gate(dataset)
        assert not ok

    def test_sequence_regime_shapes(self):
        dataset, truth = sd.generate(small_spec(regime="sequence", frames=12))
        assert all(s.shape == (12, 10) for s in dataset.samples)
        assert all(c.shape == (12, 4) for c in truth.contents)

    def test_sequence_warp_lengths_recorded(self):
        dataset, truth = sd.generate(small_spec(regime="sequence", frames=10, warp=True))
        assert len(truth.warp_paths) == len(dataset.samples)
        for idx, sample in enumerate(dataset.samples):
            assert 11 <= sample.shape[0] <= 20
            np.testing.assert_array_equal(
                sample, sd.apply_warp(
                    sd._mix(truth.spec, truth.mix_style, truth.mix_content, None,
                            truth.style_of(dataset.labels[idx]), truth.contents[idx]),
                    truth.warp_paths[idx],
                ),
            )


class TestOracleTransfer:
    def test_identity_transfer_recovers_noiseless_source(self):
        dataset, truth = sd.generate(small_spec())
        for i, label in enumerate(dataset.labels):
            target = sd.oracle_transfer_target(truth, i, label)
            np.testing.assert_allclose(target, dataset.samples[i], atol=1e-12)

    def test_zero_content_gives_pure_style(self):
        dataset, truth = sd.generate(small_spec())
        truth.contents = [np.zeros_like(c) for c in truth.contents]
        expected = truth.style_of(2) @ truth.mix_style.T
        for i in range(len(dataset.samples)):
            np.testing.assert_allclose(
                sd.oracle_transfer_target(truth, i, 2), expected.reshape(1, -1), atol=0
            )

    def test_two_route_algebraic_identity(self):
        dataset, truth = sd.generate(small_spec())
        for i, label in enumerate(dataset.labels):
            direct = sd.oracle_transfer_target(truth, i, 3)
            via_subtraction = (
                dataset.samples[i]
                - truth.style_of(label) @ truth.mix_style.T
                + truth.style_of(3) @ truth.mix_style.T
            )
            np.testing.assert_allclose(direct, via_subtraction, atol=1e-12)

    def test_rejects_mlp_mixing(self):
        _, truth = sd.generate(small_spec(mixing="random-mlp"))
        with pytest.raises(UnsupportedRegimeError):
            sd.oracle_transfer_target(truth, 0, 1)


class TestRandomWarp:
    def test_identity_path_returns_input(self):
        rng = np.random.default_rng(0)
        frames = rng.normal(size=(6, 3))
        out = sd.apply_warp(frames, np.arange(6))
        np.testing.assert_array_equal(out, frames)

    def test_full_duplication_path(self):
        rng = np.random.default_rng(1)
        frames = rng.normal(size=(5, 2))
        path = np.repeat(np.arange(5), 2)
        out = sd.apply_warp(frames, path)
        assert out.shape == (10, 2)
        np.testing.assert_array_equal(out[0::2], out[1::2])

    def test_boundaries_and_length_bounds(self):
        rng = np.random.default_rng(2)
        for seed in range(30):
            t = int(rng.integers(2, 12))
            frames = rng.normal(size=(t, 3))
            out = sd.random_warp(frames, seed)
            assert t < out.shape[0] <= 2 * t
            np.testing.assert_array_equal(out[0], frames[0])
            np.testing.assert_array_equal(out[-1], frames[-1])

    def test_rejects_short_sequences(self):
        with pytest.raises(PreconditionError):
            sd.random_warp(np.zeros((1, 3)), 0)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        dataset, truth = sd.generate(small_spec())
        sd.save_dataset(tmp_path, dataset, truth)
        loaded = sd.load_dataset(tmp_path)
        assert loaded.labels.tolist() == dataset.labels.tolist()
        for a, b in zip(loaded.samples, dataset.samples):
            assert a.tobytes() == b.tobytes()
        back = sd.load_truth(tmp_path / "truth", loaded)
        assert back.styles.tobytes() == truth.styles.tobytes()
        assert back.mix_style.tobytes() == truth.mix_style.tobytes()
        for a, b in zip(back.contents, truth.contents):
            assert a.tobytes() == b.tobytes()
        assert back.spec == truth.spec

    def test_manifest_line_count(self, tmp_path):
        dataset, truth = sd.generate(small_spec())
        sd.save_dataset(tmp_path, dataset, truth)
        lines = (tmp_path / "manifest.tsv").read_text().strip().splitlines()
        assert len(lines) == 4 * 6
        group, rel = lines[0].split("\t")
        assert group == "1" and rel.startswith("samples/")

    def test_byte_identical_directories(self, tmp_path):
        for sub in ("a", "b"):
            dataset, truth = sd.generate(small_spec())
            sd.save_dataset(tmp_path / sub, dataset, truth)
        files_a = sorted((tmp_path / "a").rglob("*.txt"))
        files_b = sorted((tmp_path / "b").rglob("*.txt"))
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            assert fa.read_bytes() == fb.read_bytes()
