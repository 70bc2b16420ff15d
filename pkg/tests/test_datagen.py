import numpy as np
import pytest

from bsrnn.audio import Stem
from bsrnn.bandscheme import SOURCES
from bsrnn.datagen import (
    ActivityIndex,
    DataConfig,
    MixingDataset,
    SadParams,
    Song,
    TrackSet,
    apply_gain_db,
    build_activity_index,
    canonical_valid_songs,
    detect_active_segments,
    example_rng,
    load_trackset,
    make_epoch,
    sample_training_example,
    swap_channels,
    synthetic_stems,
    umx_augment,
)

SR = 8000


def memory_tracks(n=5, seconds=8.0, seed=0):
    rng = np.random.default_rng(seed)
    songs = []
    for i in range(n):
        stems = {k: Stem(v, sample_rate=SR) for k, v in synthetic_stems(rng, seconds, SR).items()}
        songs.append(Song(f"s{i}", stems, None, SR))
    return TrackSet("train", songs)


def full_index(tracks):
    return ActivityIndex({s.name: {k: [(0, len(s))] for k in SOURCES} for s in tracks.songs})


def cfg(**kw):
    base = dict(sample_rate=SR, chunk_seconds=1.0, epoch_size=16)
    base.update(kw)
    return DataConfig(**base)


# --- SAD -----------------------------------------------------------------------


def tone(seconds, amp=1.0, f=440.0):
    t = np.arange(int(seconds * SR)) / SR
    return amp * np.sin(2 * np.pi * f * t)


def test_sad_silence_and_tone():
    assert detect_active_segments(np.zeros((2, 10 * SR)), SR) == []
    x = np.stack([tone(10)] * 2)
    assert detect_active_segments(x, SR) == [(0, 10 * SR)]


def test_sad_tone_silence_tone():
    x = np.concatenate([tone(5), np.zeros(5 * SR), tone(5)])[None]
    segs = detect_active_segments(x, SR)
    assert len(segs) == 2
    truth = [(0, 5 * SR), (10 * SR, 15 * SR)]
    for (a, b), (ta, tb) in zip(segs, truth):
        assert abs(a - ta) <= SR and abs(b - tb) <= SR


def test_sad_drops_short_and_quiet_regions():
    x = np.concatenate([tone(5), np.zeros(3 * SR), tone(1.5), np.zeros(3 * SR), tone(5, amp=1e-4)])[None]
    segs = detect_active_segments(x, SR)
    assert len(segs) == 1 and segs[0][0] == 0
    p = SadParams()
    assert all(b - a >= p.min_segment_s * SR for a, b in segs)


def test_activity_index_cache(tmp_path):
    tracks = memory_tracks(2)
    idx = build_activity_index(tracks, cache_dir=tmp_path)
    files = list(tmp_path.glob("sad-train-*.json"))
    assert len(files) == 1
    assert build_activity_index(tracks, cache_dir=tmp_path).segments == idx.segments
    assert ActivityIndex.load(files[0]).params == idx.params
    build_activity_index(tracks, SadParams(rel_db=20.0), cache_dir=tmp_path)
    assert len(list(tmp_path.glob("sad-train-*.json"))) == 2
    for song in idx.segments.values():
        for segs in song.values():
            assert segs == sorted(segs)
            assert all(b1 <= a2 for (_, b1), (a2, _) in zip(segs, segs[1:]))


# --- gains and swaps -----------------------------------------------------------


def test_apply_gain_db():
    x = np.random.default_rng(0).standard_normal((2, 100))
    assert np.array_equal(apply_gain_db(x, 0.0), x)
    assert apply_gain_db(np.ones(1), -10.0)[0] == pytest.approx(0.31622776601683794, abs=1e-15)
    for u in (-10.0, -3.3, 7.0):
        ratio = 10 * np.log10(np.sum(apply_gain_db(x, u) ** 2) / np.sum(x**2))
        assert abs(ratio - u) < 1e-9


def test_swap_involution():
    x = np.random.default_rng(0).standard_normal((2, 50))
    assert np.array_equal(swap_channels(swap_channels(x)), x)
    assert np.array_equal(swap_channels(x)[0], x[1])


def test_umx_gain_bounds():
    tracks = memory_tracks(4)
    c = cfg(regime="umx")
    for i in range(200):
        ex = sample_training_example(example_rng(0, 0, i), tracks, None, c)
        gains = ex.metadata["linear_gains"].values()
        assert all(0.25 <= g <= 1.25 for g in gains)
        assert np.array_equal(ex.mixture, ex.sources["vocals"] + ex.sources["bass"] + ex.sources["drums"] + ex.sources["other"])


def test_umx_augment_resums():
    tracks = memory_tracks(4)
    ex = sample_training_example(example_rng(0, 0, 0), tracks, full_index(tracks), cfg(drop_prob=0.0, gain_db=(0, 0)))
    out = umx_augment(ex, np.random.default_rng(3))
    total = out.sources["vocals"] + out.sources["bass"] + out.sources["drums"] + out.sources["other"]
    assert np.array_equal(out.mixture, total)


# --- examples ------------------------------------------------------------------


def test_mixture_is_exact_sum():
    tracks = memory_tracks(5)
    idx = build_activity_index(tracks)
    for ex in make_epoch(tracks, idx, cfg(epoch_size=200), seed=1, epoch=0):
        total = ex.sources["vocals"] + ex.sources["bass"] + ex.sources["drums"] + ex.sources["other"]
        assert np.array_equal(ex.mixture, total)
        assert ex.mixture.shape == (2, SR)
        assert np.array_equal(ex.target, ex.sources["vocals"])


def test_drop_all_is_silent():
    tracks = memory_tracks(4)
    ex = sample_training_example(example_rng(0, 0, 0), tracks, full_index(tracks), cfg(drop_prob=1.0))
    assert not ex.mixture.any() and not ex.target.any()


def test_no_drop_no_gain_is_raw_sum():
    tracks = memory_tracks(4)
    ex = sample_training_example(example_rng(0, 0, 5), tracks, full_index(tracks), cfg(drop_prob=0.0, gain_db=(0.0, 0.0)))
    raw = []
    for name in SOURCES:
        song = next(s for s in tracks.songs if s.name == ex.metadata["songs"][name])
        off = ex.metadata["offsets"][name]
        raw.append(song.stems[name].read(off, off + SR))
    assert np.array_equal(ex.mixture, raw[0] + raw[1] + raw[2] + raw[3])


def test_target_only_drop_mode():
    tracks = memory_tracks(4)
    c = cfg(drop_prob=1.0, drop_mode="target-only", target="bass")
    ex = sample_training_example(example_rng(0, 0, 0), tracks, full_index(tracks), c)
    assert ex.metadata["dropped"] == {"vocals": False, "bass": True, "drums": False, "other": False}
    assert not ex.target.any() and ex.mixture.any()


def test_distinct_songs():
    tracks = memory_tracks(5)
    for i in range(100):
        ex = sample_training_example(example_rng(2, 0, i), tracks, full_index(tracks), cfg())
        assert len(set(ex.metadata["songs"].values())) == 4


def test_songs_repeat_when_fewer_than_four():
    tracks = memory_tracks(2)
    ex = sample_training_example(example_rng(0, 0, 0), tracks, full_index(tracks), cfg())
    assert set(ex.metadata["songs"].values()) <= {"s0", "s1"}


def test_no_active_segment_raises():
    tracks = memory_tracks(2)
    empty = ActivityIndex({s.name: {k: [] for k in SOURCES} for s in tracks.songs})
    with pytest.raises(RuntimeError):
        sample_training_example(example_rng(0, 0, 0), tracks, empty, cfg(max_retries=5))


def test_determinism_and_order_independence():
    tracks = memory_tracks(5)
    idx = full_index(tracks)
    c = cfg(epoch_size=20)
    a = list(make_epoch(tracks, idx, c, seed=4, epoch=2))
    b = list(make_epoch(tracks, idx, c, seed=4, epoch=2))
    assert len(a) == 20
    assert all(np.array_equal(x.mixture, y.mixture) for x, y in zip(a, b))
    ds = MixingDataset(tracks, idx, c, seed=4)
    ds.set_epoch(2)
    for i in np.random.default_rng(0).permutation(20):
        mix, tgt = ds[int(i)]
        assert np.array_equal(mix.numpy(), a[i].mixture)
        assert np.array_equal(tgt.numpy(), a[i].target)
    other = list(make_epoch(tracks, idx, c, seed=4, epoch=3))
    assert not np.array_equal(other[0].mixture, a[0].mixture)


def test_config_validation():
    with pytest.raises(ValueError):
        DataConfig(target="piano")
    with pytest.raises(ValueError):
        DataConfig(drop_prob=1.5)
    with pytest.raises(ValueError):
        DataConfig(regime="other")
    assert DataConfig().epoch_size == 20000 and DataConfig().chunk_len == 3 * 44100


def test_load_trackset_layout(toy_dataset):
    train = load_trackset(toy_dataset, "train")
    assert len(train) == 4 and all(len(s.stems) == 4 for s in train.songs)
    assert len(load_trackset(toy_dataset, "test")) == 2
    assert len(load_trackset(toy_dataset, "valid")) == 1
    song = train.songs[0]
    mix = song.load_mixture()
    total = sum(song.stems[k].read() for k in SOURCES)
    assert np.abs(mix - total).max() < 4 / 32768  # 16-bit rounding of each file
    with pytest.raises(ValueError):
        load_trackset(toy_dataset, "dev")


def test_valid_split_from_train_by_name(tmp_path):
    from bsrnn.audio import write_wav

    for name in ("Alpha", "Beta", "Gamma"):
        for k in (*SOURCES, "mixture"):
            write_wav(tmp_path / "train" / name / f"{k}.wav", np.zeros((2, 100)), SR)
    assert load_trackset(tmp_path, "valid", valid_songs=["Beta"]).names() == ["Beta"]
    assert load_trackset(tmp_path, "train", valid_songs=["Beta"]).names() == ["Alpha", "Gamma"]


def test_canonical_valid_list():
    names = canonical_valid_songs()
    assert len(names) == 14 and len(set(names)) == 14
