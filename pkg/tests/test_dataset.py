"""Split protocol, normalization contracts, alignment, synthesis, CSV round trips."""

import numpy as np
import pytest

from dpars.dataset import (
    SyntheticConfig,
    TEST,
    TRAIN,
    VAL,
    apply_normalization,
    assemble_dataset,
    build_dataset,
    clamp_targets,
    fit_normalization,
    load_dataset,
    read_angles_csv,
    read_emg_csv,
    split_by_repetition,
    synthesize,
    write_angles_csv,
    write_emg_csv,
)
from dpars.errors import AlignmentError, ConfigError, DataFormatError, ProtocolError
from dpars.sigproc import EnvelopeStream, PreprocessConfig

SMALL_SYNTH = SyntheticConfig(seed=7, duration_s=3.0, n_channels=8, dwell_s=(0.6, 1.0))


def toy_stream(n_frames=240, channels=3, n_reps=6, seed=0):
    rng = np.random.default_rng(seed)
    frames = np.abs(rng.standard_normal((n_frames, channels)))
    rep = np.repeat(np.arange(1, n_reps + 1), n_frames // n_reps)
    return EnvelopeStream(100.0, frames, rep_ids=rep)


def toy_angles(n_frames=240, seed=1):
    rng = np.random.default_rng(seed)
    return rng.uniform(90, 180, (n_frames, 6))


class TestSplitProtocol:
    def test_rep_five_is_val(self):
        assert split_by_repetition(np.array([5]))[0] == VAL

    def test_rep_one_is_train(self):
        assert split_by_repetition(np.array([1]))[0] == TRAIN

    def test_rep_six_is_test(self):
        assert split_by_repetition(np.array([6]))[0] == TEST

    def test_reps_one_to_four_train(self):
        tags = split_by_repetition(np.array([1, 2, 3, 4]))
        assert np.all(tags == TRAIN)

    def test_rep_seven_errors(self):
        with pytest.raises(ProtocolError):
            split_by_repetition(np.array([1, 7]))

    def test_rep_zero_errors(self):
        with pytest.raises(ProtocolError):
            split_by_repetition(np.array([0]))

    def test_equal_reps_split_ratio(self):
        ds = assemble_dataset(toy_stream(), toy_angles(), t_seq=20, hop=1)
        n_train = len(ds.split_indices(TRAIN))
        n_val = len(ds.split_indices(VAL))
        n_test = len(ds.split_indices(TEST))
        # 40 frames per rep -> 21 windows per rep after boundary drops
        assert n_val == n_test
        assert n_train == 4 * n_val


class TestNormalization:
    def test_train_split_is_standardized(self):
        ds = assemble_dataset(toy_stream(seed=3), toy_angles(), t_seq=20)
        flat = ds.normalized_windows(TRAIN).reshape(-1, ds.env_frames.shape[1])
        assert np.abs(flat.mean(axis=0)).max() < 1e-6
        assert np.abs(flat.std(axis=0) - 1).max() < 1e-3

    def test_constant_channel_floors_std(self):
        windows = np.full((4, 5, 2), 3.0)
        stats = fit_normalization(windows)
        assert np.all(stats.std == 1e-8)
        assert np.all(apply_normalization(stats, windows[0]) == 0.0)

    def test_already_standardized(self):
        rng = np.random.default_rng(4)
        data = rng.standard_normal((2000, 3))
        data -= data.mean(axis=0)
        data /= data.std(axis=0)
        stats = fit_normalization(data[None])
        assert np.abs(stats.mean).max() < 1e-12
        assert np.abs(stats.std - 1).max() < 1e-12

    def test_val_uses_train_statistics(self):
        ds = assemble_dataset(toy_stream(seed=5), toy_angles(), t_seq=20)
        val = ds.normalized_windows(VAL)
        manual = apply_normalization(ds.stats, ds.gather_normalized(ds.split_indices(VAL)) * 0 + 1)
        # the same stats object transforms any data; spot-check one window
        w = ds.windows(VAL)[0]
        assert np.allclose(val[0], apply_normalization(ds.stats, w.data))
        assert manual.shape == val.shape

    def test_stats_independent_of_val_test(self):
        stream = toy_stream(seed=6)
        angles = toy_angles()
        ds = assemble_dataset(stream, angles, t_seq=20)
        # recompute stats from the train windows alone
        train_stack = np.stack([w.data for w in ds.windows(TRAIN)])
        again = fit_normalization(train_stack)
        assert np.array_equal(again.mean, ds.stats.mean)
        assert np.array_equal(again.std, ds.stats.std)

    def test_empty_train_split_errors(self):
        with pytest.raises(ConfigError):
            fit_normalization([])


class TestClampAndAlignment:
    def test_clamp_counts(self):
        angles = np.full((5, 6), 135.0)
        angles[0, 0] = 200.0
        angles[1, 2] = 50.0
        clamped, n = clamp_targets(angles)
        assert n == 2
        assert clamped[0, 0] == 180.0 and clamped[1, 2] == 90.0

    def test_misalignment_beyond_one_frame(self):
        with pytest.raises(AlignmentError):
            assemble_dataset(toy_stream(240), toy_angles(238), t_seq=20)

    def test_one_frame_tolerated(self):
        ds = assemble_dataset(toy_stream(240), toy_angles(239), t_seq=20)
        assert ds.env_frames.shape[0] == 239

    def test_target_pairing_shifts_with_angle_stream(self):
        stream = toy_stream(240, seed=8)
        angles = toy_angles(240, seed=9)
        ds = assemble_dataset(stream, angles, t_seq=20)
        k = 1
        shifted = np.roll(angles, k, axis=0)
        ds2 = assemble_dataset(stream, shifted, t_seq=20)
        ends = ds.split_indices()
        assert np.allclose(ds2.frame_targets[ends[5]], ds.frame_targets[ends[5] - k])

    def test_window_targets_use_end_index(self):
        stream = toy_stream(240)
        angles = toy_angles(240)
        ds = assemble_dataset(stream, angles, t_seq=20)
        clamped, _ = clamp_targets(angles)
        for w, t in zip(ds.windows()[:5], ds.targets()[:5]):
            assert np.array_equal(t, clamped[w.end_index])


class TestSynthesize:
    def test_same_seed_bit_identical(self):
        rec1, ang1 = synthesize(SMALL_SYNTH)
        rec2, ang2 = synthesize(SMALL_SYNTH)
        assert np.array_equal(rec1.samples, rec2.samples)
        assert np.array_equal(ang1, ang2)
        assert np.array_equal(rec1.rep_ids, rec2.rep_ids)

    def test_different_seed_differs(self):
        rec1, _ = synthesize(SMALL_SYNTH)
        rec2, _ = synthesize(SyntheticConfig(seed=8, duration_s=3.0, n_channels=8))
        assert not np.array_equal(rec1.samples, rec2.samples)

    def test_angles_in_range(self):
        _, angles = synthesize(SMALL_SYNTH)
        assert angles.min() >= 90.0 and angles.max() <= 180.0

    def test_shapes_and_rates(self):
        rec, angles = synthesize(SMALL_SYNTH)
        assert rec.sample_rate_hz == 2400.0
        assert rec.samples.shape == (int(3.0 * 2400) * 6, 8)
        assert angles.shape == (int(3.0 * 100) * 6, 6)

    def test_frozen_plateau_envelope_steady(self):
        # one repetition, a single level, no sensor noise or drift: after
        # settling, the decoded channel-average envelope (residual carrier
        # ripple averaged over 2 s blocks) is constant within 1%
        cfg = SyntheticConfig(
            seed=3, duration_s=10.0, n_repetitions=1, n_channels=64,
            finger_levels=((135.0,),) * 6, noise_std_uv=0.0, drift_std=0.0,
        )
        rec, _ = synthesize(cfg)
        ds = build_dataset(rec, np.full((1000, 6), 135.0), PreprocessConfig(), t_seq=20)
        mean_env = ds.env_frames.mean(axis=1)
        blocks = [mean_env[lo : lo + 200].mean() for lo in (300, 500, 700)]
        spread = (max(blocks) - min(blocks)) / np.mean(blocks)
        assert spread < 0.01

    def test_kv_roundtrip(self):
        raw = {"seed": "9", "duration_s": "2.5", "noise_std_uv": "7.5",
               "finger_levels": "90,180;90,135;135,180;90,180;90,135;135,180"}
        cfg = SyntheticConfig.from_kv(raw)
        assert cfg.seed == 9 and cfg.duration_s == 2.5
        assert cfg.finger_level_sets()[0].tolist() == [90.0, 180.0]

    def test_kv_unknown_key(self):
        with pytest.raises(ConfigError):
            SyntheticConfig.from_kv({"bogus": "1"})


class TestCsvRoundTrip:
    def test_emg_roundtrip(self, tmp_path):
        rec, _ = synthesize(SyntheticConfig(seed=5, duration_s=0.5, n_repetitions=2, n_channels=3))
        path = tmp_path / "emg.csv"
        write_emg_csv(path, rec, manifest=["manifest command = test"])
        back = read_emg_csv(path)
        assert back.sample_rate_hz == pytest.approx(2400.0)
        assert back.samples.shape == rec.samples.shape
        assert np.array_equal(back.rep_ids, rec.rep_ids)
        # 6 significant digits survive the trip
        assert np.allclose(back.samples, rec.samples, rtol=1e-5, atol=1e-4)

    def test_angles_roundtrip(self, tmp_path):
        _, angles = synthesize(SyntheticConfig(seed=5, duration_s=0.5, n_repetitions=2, n_channels=3))
        path = tmp_path / "angles.csv"
        write_angles_csv(path, angles)
        t, back = read_angles_csv(path)
        assert np.array_equal(back, angles)  # repr round-trips exactly
        assert t[1] - t[0] == pytest.approx(0.01)

    def test_empty_angle_file_errors(self, tmp_path):
        path = tmp_path / "angles.csv"
        path.write_text("t,f0,f1,f2,f3,f4,f5\n")
        with pytest.raises(DataFormatError):
            read_angles_csv(path)

    def test_missing_columns_error(self, tmp_path):
        path = tmp_path / "angles.csv"
        path.write_text("t,f0,f1\n0.0,100,100\n")
        with pytest.raises(DataFormatError):
            read_angles_csv(path)

    def test_bad_emg_header_errors(self, tmp_path):
        path = tmp_path / "emg.csv"
        path.write_text("time,ch0,rep\n0.0,1.0,1\n")
        with pytest.raises(DataFormatError):
            read_emg_csv(path)

    def test_load_dataset_end_to_end(self, tmp_path):
        rec, angles = synthesize(SMALL_SYNTH)
        write_emg_csv(tmp_path / "emg.csv", rec)
        write_angles_csv(tmp_path / "angles.csv", angles)
        ds = load_dataset(tmp_path / "emg.csv", tmp_path / "angles.csv", PreprocessConfig())
        direct = build_dataset(rec, angles, PreprocessConfig())
        assert ds.n_windows == direct.n_windows
        assert np.array_equal(ds.tags, direct.tags)
        # CSV quantization at 6 significant digits barely moves the envelope
        assert np.allclose(ds.env_frames, direct.env_frames, rtol=1e-4, atol=1e-3)

    def test_load_dataset_resamples_slow_angles(self, tmp_path):
        rec, angles = synthesize(SMALL_SYNTH)
        write_emg_csv(tmp_path / "emg.csv", rec)
        # write angles at 50 Hz; loader must nearest-resample onto 100 Hz
        path = tmp_path / "angles50.csv"
        with path.open("w") as fh:
            fh.write("t," + ",".join(f"f{i}" for i in range(6)) + "\n")
            for i in range(0, angles.shape[0], 2):
                vals = ",".join(repr(float(v)) for v in angles[i])
                fh.write(f"{i / 100.0:.2f},{vals}\n")
        ds = load_dataset(tmp_path / "emg.csv", path, PreprocessConfig())
        assert ds.env_frames.shape[0] == 1800
