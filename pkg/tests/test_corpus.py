import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionlang import corpus
from motionlang.corpus import (Dataset, FeatureStats, MissingMotionFileError,
                               MotionSizeError, NonFiniteMotionError, Sample, SynthConfig,
                               Vocab, attribute_key, attribute_trajectory, attribute_words,
                               compute_stats, denormalize, load_dataset, normalize,
                               synth_generate, write_dataset)


def small_config(**kw):
    defaults = dict(num_samples=8, dim=16, length_range=(16, 24), seed=7)
    defaults.update(kw)
    return SynthConfig(**defaults)


def test_load_dataset_echoes_metadata(tmp_path):
    ds = synth_generate(small_config(num_samples=2))
    write_dataset(ds, tmp_path)
    loaded = load_dataset(tmp_path / "manifest.json")
    assert len(loaded) == 2
    assert loaded.dim == 16


def test_load_dataset_accepts_directory(tmp_path):
    write_dataset(synth_generate(small_config(num_samples=1)), tmp_path)
    assert len(load_dataset(tmp_path)) == 1


def test_wrong_byte_length_is_size_error(tmp_path):
    ds = synth_generate(small_config(num_samples=1))
    write_dataset(ds, tmp_path)
    f = tmp_path / f"{ds.samples[0].id}.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(MotionSizeError):
        load_dataset(tmp_path)


def test_missing_file_error(tmp_path):
    ds = synth_generate(small_config(num_samples=1))
    write_dataset(ds, tmp_path)
    (tmp_path / f"{ds.samples[0].id}.f32").unlink()
    with pytest.raises(MissingMotionFileError):
        load_dataset(tmp_path)


def test_non_finite_error_names_sample(tmp_path):
    ds = synth_generate(small_config(num_samples=1))
    write_dataset(ds, tmp_path)
    sid = ds.samples[0].id
    f = tmp_path / f"{sid}.f32"
    data = np.frombuffer(f.read_bytes(), dtype="<f4").copy()
    data[3] = np.nan
    f.write_bytes(data.tobytes())
    with pytest.raises(NonFiniteMotionError, match=sid):
        load_dataset(tmp_path)


def test_duplicate_ids_rejected(tmp_path):
    ds = synth_generate(small_config(num_samples=2))
    write_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["samples"][1]["id"] = manifest["samples"][0]["id"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(corpus.DatasetError, match="duplicate"):
        load_dataset(tmp_path)


def test_roundtrip_bytes_identical(tmp_path):
    ds = synth_generate(small_config())
    write_dataset(ds, tmp_path)
    loaded = load_dataset(tmp_path)
    for a, b in zip(ds.samples, loaded.samples):
        assert np.array_equal(a.motion, b.motion)
        assert a.texts == b.texts
        assert a.attributes == b.attributes


def test_stats_two_point_oracle():
    # two sequences, one all-zeros and one all-twos: mean 1, population std 1
    zeros = Sample(id="a", motion=np.zeros((5, 3), np.float32), texts=["x"])
    twos = Sample(id="b", motion=np.full((5, 3), 2.0, np.float32), texts=["y"])
    stats = compute_stats(Dataset(dim=3, samples=[zeros, twos]))
    assert np.allclose(stats.mean, 1.0)
    assert np.allclose(stats.std, 1.0)


def test_constant_dimension_floored():
    const = Sample(id="a", motion=np.full((6, 2), 3.5, np.float32), texts=["t"])
    stats = compute_stats(Dataset(dim=2, samples=[const]))
    assert np.allclose(stats.std, corpus.STD_FLOOR)
    assert np.allclose(normalize(const.motion, stats), 0.0)


def test_empty_dataset_stats_error():
    with pytest.raises(corpus.DatasetError):
        compute_stats(Dataset(dim=4, samples=[]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalize_denormalize_inverse(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.normal(0, 3, size=(12, 5)).astype(np.float32)
    stats = FeatureStats(mean=rng.normal(size=5), std=rng.uniform(0.5, 2.0, size=5))
    back = denormalize(normalize(x, stats), stats)
    assert np.abs(back - x).max() <= 1e-5 * max(1.0, float(np.abs(x).max()))


def test_synth_deterministic():
    cfg = small_config()
    a, b = synth_generate(cfg), synth_generate(cfg)
    for sa, sb in zip(a.samples, b.samples):
        assert np.array_equal(sa.motion, sb.motion)
        assert sa.texts == sb.texts


def test_synth_zero_samples():
    assert len(synth_generate(small_config(num_samples=0))) == 0


@pytest.mark.parametrize("reps", [2, 3, 4, 5])
def test_oscillatory_channel_cycles(reps):
    # the closed-form trajectory's channel 0 crosses zero exactly twice per cycle
    attrs = {"shape": "wave", "amplitude": "moderately", "speed": "steadily",
             "direction": "left", "repetitions": reps}
    traj = attribute_trajectory(attrs, frames=96, dim=16)
    ch = traj[:, corpus.OSC_CHANNEL]
    crossings = int(np.sum(np.signbit(ch[1:]) != np.signbit(ch[:-1])))
    assert crossings == 2 * reps


def test_generated_motion_matches_trajectory_up_to_noise():
    cfg = small_config(num_samples=4, noise_std=0.01)
    ds = synth_generate(cfg)
    mixing = corpus._mixing_matrix(cfg.dim)
    for s in ds.samples:
        clean = attribute_trajectory(s.attributes, s.motion.shape[0], cfg.dim, mixing)
        assert np.abs(s.motion - clean).max() < 6 * cfg.noise_std


def test_texts_name_all_attribute_words():
    ds = synth_generate(small_config(num_samples=16))
    for s in ds.samples:
        words = attribute_words(s.attributes)
        for t in s.texts:
            assert words.issubset(set(t.split())), (t, words)


def test_attribute_key_groups_same_tuple():
    a = {"shape": "wave", "amplitude": "widely", "speed": "quickly",
         "direction": "left", "repetitions": 2}
    assert attribute_key(a) == attribute_key(dict(a))


def test_vocab_roundtrip_whitespace_normalization():
    texts = ["A figure  Waves quickly", "someone spins twice"]
    vocab = Vocab.from_texts(texts)
    for t in texts:
        assert vocab.decode(vocab.encode(t)) == corpus.normalize_text(t)


def test_vocab_unknown_word_maps_to_unk():
    vocab = Vocab.from_texts(["known words"])
    assert vocab.encode("unknown")[0] == Vocab.UNK


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        SynthConfig(num_samples=1, dim=16, length_range=(10, 5))
    with pytest.raises(ValueError):
        SynthConfig(num_samples=1, dim=4)
