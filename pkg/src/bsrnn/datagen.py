"""Dataset ingestion, source activity detection and on-the-fly random mixing.

Every training example is a pure function of ``(seed, epoch, index)``: its random
stream comes from :func:`example_rng`, so generation order and worker count do
not matter.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .audio import Stem, write_wav
from .bandscheme import SOURCES

log = logging.getLogger(__name__)


def canonical_valid_songs() -> list[str]:
    text = resources.files("bsrnn.data").joinpath("musdb_valid.txt").read_text()
    return [line.strip() for line in text.splitlines() if line.strip()]


@dataclass
class Song:
    name: str
    stems: dict[str, Stem]
    mixture: Stem | None = None
    sample_rate: int = 44100

    def __len__(self) -> int:
        return min(len(s) for s in self.stems.values())

    def load_mixture(self) -> np.ndarray:
        if self.mixture is not None:
            return self.mixture.read()
        return sum_sources(self.stems[s].read() for s in self.stems)


@dataclass
class TrackSet:
    split: str
    songs: list[Song]

    def __len__(self) -> int:
        return len(self.songs)

    def names(self) -> list[str]:
        return [s.name for s in self.songs]

    def shuffled(self, seed: int) -> "TrackSet":
        order = np.random.default_rng(seed).permutation(len(self.songs))
        return TrackSet(self.split, [self.songs[i] for i in order])


def sum_sources(chunks) -> np.ndarray:
    """Sum in iteration order; used for every mixture so sums are reproducible bit for bit."""
    total = None
    for c in chunks:
        total = c.copy() if total is None else total + c
    return total


def load_trackset(root, split: str, valid_songs=None, mmap: bool = True) -> TrackSet:
    """Read ``<root>/{train,test}/<song>/{vocals,bass,drums,other,mixture}.wav``.

    ``valid`` songs are taken from ``train/`` by name (the canonical 14-song list
    unless ``valid_songs`` is given), or from ``<root>/valid`` when that exists.
    """
    root = Path(root)
    if split not in ("train", "valid", "test"):
        raise ValueError(f"unknown split {split!r}")
    valid = set(valid_songs if valid_songs is not None else canonical_valid_songs())
    if split == "test":
        folder, keep = root / "test", None
    elif (root / "valid").is_dir():
        folder, keep = root / split, None
    else:
        folder = root / "train"
        keep = (lambda n: n in valid) if split == "valid" else (lambda n: n not in valid)
    if not folder.is_dir():
        raise FileNotFoundError(f"dataset folder {folder} does not exist")
    songs = []
    for d in sorted(p for p in folder.iterdir() if p.is_dir()):
        if keep is not None and not keep(d.name):
            continue
        stems = {s: Stem.from_wav(d / f"{s}.wav", mmap=mmap) for s in SOURCES if (d / f"{s}.wav").exists()}
        if len(stems) != len(SOURCES):
            log.warning("skipping %s: missing stems", d)
            continue
        mix = Stem.from_wav(d / "mixture.wav", mmap=mmap) if (d / "mixture.wav").exists() else None
        songs.append(Song(d.name, stems, mix, stems["vocals"].sample_rate))
    return TrackSet(split, songs)


# --- source activity detection ---------------------------------------------


@dataclass(frozen=True)
class SadParams:
    window_s: float = 1.0
    hop_s: float = 0.5
    rel_db: float = 40.0
    floor_dbfs: float = -60.0
    percentile: float = 90.0
    min_segment_s: float = 3.0

    def key(self) -> str:
        return hashlib.sha1(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


def _window_starts(length: int, win: int, hop: int) -> np.ndarray:
    if length <= win:
        return np.array([0])
    starts = np.arange(0, length - win + 1, hop)
    if starts[-1] + win < length:
        starts = np.append(starts, length - win)
    return starts


def window_rms(x: np.ndarray, win: int, hop: int) -> tuple[np.ndarray, np.ndarray]:
    """RMS of ``[channels, length]`` over windows (channels pooled); returns ``(starts, rms)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    energy = np.concatenate([[0.0], np.cumsum(np.sum(x**2, axis=0))])
    starts = _window_starts(x.shape[1], win, hop)
    stops = np.minimum(starts + win, x.shape[1])
    mean_sq = (energy[stops] - energy[starts]) / ((stops - starts) * x.shape[0])
    return starts, np.sqrt(np.maximum(mean_sq, 0.0))


def detect_active_segments(x, sample_rate: int = 44100, params: SadParams = SadParams()) -> list[tuple[int, int]]:
    """Sorted, disjoint ``(start, end)`` sample ranges where the stem is active."""
    if isinstance(x, Stem):
        x = x.read()
    win = int(round(params.window_s * sample_rate))
    hop = int(round(params.hop_s * sample_rate))
    length = np.asarray(x).shape[-1]
    starts, rms = window_rms(x, win, hop)
    ref = np.percentile(rms, params.percentile)
    floor = 10 ** (params.floor_dbfs / 20)
    threshold = max(ref * 10 ** (-params.rel_db / 20), floor)
    active = (rms >= threshold) & (rms > 0)
    segments: list[list[int]] = []
    for s, on in zip(starts, active):
        if not on:
            continue
        e = min(int(s) + win, length)
        if segments and s <= segments[-1][1]:
            segments[-1][1] = max(segments[-1][1], e)
        else:
            segments.append([int(s), e])
    min_len = int(round(params.min_segment_s * sample_rate))
    return [(a, b) for a, b in segments if b - a >= min_len]


@dataclass
class ActivityIndex:
    """Active segments per song and stem."""

    segments: dict[str, dict[str, list[tuple[int, int]]]] = field(default_factory=dict)
    params: SadParams = SadParams()

    def get(self, song: str, stem: str) -> list[tuple[int, int]]:
        return self.segments.get(song, {}).get(stem, [])

    def save(self, path) -> None:
        data = {"params": asdict(self.params), "segments": self.segments}
        Path(path).write_text(json.dumps(data))

    @classmethod
    def load(cls, path) -> "ActivityIndex":
        data = json.loads(Path(path).read_text())
        segs = {song: {st: [tuple(s) for s in v] for st, v in d.items()} for song, d in data["segments"].items()}
        return cls(segs, SadParams(**data["params"]))


def build_activity_index(tracks: TrackSet, params: SadParams = SadParams(), cache_dir=None) -> ActivityIndex:
    """Run the detector over every stem, reusing ``sad-<hash>.json`` in ``cache_dir`` when present."""
    cache = None
    if cache_dir is not None:
        digest = hashlib.sha1(("|".join(tracks.names()) + params.key()).encode()).hexdigest()[:12]
        cache = Path(cache_dir) / f"sad-{tracks.split}-{digest}.json"
        if cache.exists():
            return ActivityIndex.load(cache)
    index = ActivityIndex(params=params)
    for song in tracks.songs:
        index.segments[song.name] = {
            stem: detect_active_segments(song.stems[stem], song.sample_rate, params) for stem in SOURCES
        }
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        index.save(cache)
    return index


# --- random mixing ------------------------------------------------------------


@dataclass
class DataConfig:
    target: str = "vocals"
    sample_rate: int = 44100
    chunk_seconds: float = 3.0
    epoch_size: int = 20000
    regime: str = "sad"
    drop_mode: str = "each-chunk"
    drop_prob: float = 0.1
    gain_db: tuple[float, float] = (-10.0, 10.0)
    umx_gain: tuple[float, float] = (0.25, 1.25)
    swap_prob: float = 0.5
    max_retries: int = 50
    sad: SadParams = SadParams()

    def __post_init__(self):
        if isinstance(self.sad, dict):
            self.sad = SadParams(**self.sad)
        self.gain_db = tuple(self.gain_db)
        self.umx_gain = tuple(self.umx_gain)
        if self.target not in SOURCES:
            raise ValueError(f"unknown target source {self.target!r}")
        if self.regime not in ("sad", "umx"):
            raise ValueError("regime must be 'sad' or 'umx'")
        if self.drop_mode not in ("each-chunk", "target-only"):
            raise ValueError("drop_mode must be 'each-chunk' or 'target-only'")
        if not 0 <= self.drop_prob <= 1 or not 0 <= self.swap_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.epoch_size < 1:
            raise ValueError("epoch_size must be >= 1")

    @property
    def chunk_len(self) -> int:
        return int(round(self.chunk_seconds * self.sample_rate))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingExample:
    mixture: np.ndarray
    sources: dict[str, np.ndarray]
    target_name: str
    metadata: dict = field(default_factory=dict)

    @property
    def target(self) -> np.ndarray:
        return self.sources[self.target_name]


def example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def apply_gain_db(chunk: np.ndarray, gain_db: float) -> np.ndarray:
    """Scale amplitude by ``10 ** (gain_db / 20)``, i.e. change energy by ``gain_db`` dB."""
    return chunk * 10.0 ** (gain_db / 20.0)


def swap_channels(chunk: np.ndarray) -> np.ndarray:
    return chunk[::-1].copy()


def umx_augment(example: TrainingExample, rng: np.random.Generator, cfg: DataConfig | None = None) -> TrainingExample:
    """Per-stem random channel swap and linear gain, then re-sum the mixture."""
    cfg = cfg or DataConfig()
    sources, swaps, gains = {}, {}, {}
    for name, chunk in example.sources.items():
        swap = bool(rng.random() < cfg.swap_prob)
        gain = float(rng.uniform(*cfg.umx_gain))
        if swap:
            chunk = swap_channels(chunk)
        sources[name] = chunk * gain
        swaps[name], gains[name] = swap, gain
    meta = dict(example.metadata, swaps=swaps, linear_gains=gains)
    return TrainingExample(sum_sources(sources.values()), sources, example.target_name, meta)


def _pick_offset(rng, segments, chunk_len: int) -> int | None:
    usable = [(a, b) for a, b in segments if b - a >= chunk_len]
    if not usable:
        return None
    room = np.array([b - a - chunk_len + 1 for a, b in usable], dtype=np.float64)
    k = rng.choice(len(usable), p=room / room.sum())
    return int(usable[k][0] + rng.integers(0, room[k]))


def sample_training_example(
    rng: np.random.Generator, tracks: TrackSet, index: ActivityIndex | None, cfg: DataConfig
) -> TrainingExample:
    """One random mixture: a chunk per source from distinct songs, scaled, possibly dropped, summed.

    With ``cfg.regime == "sad"`` chunks come from active segments, get a uniform
    dB gain and are dropped with ``cfg.drop_prob``; with ``"umx"`` chunks come from
    anywhere and go through :func:`umx_augment` instead.
    """
    if not tracks.songs:
        raise ValueError("empty track set")
    chunk_len = cfg.chunk_len
    used: set[int] = set()
    picks = {}
    for name in SOURCES:
        for _ in range(cfg.max_retries):
            pool = [i for i in range(len(tracks)) if i not in used] or list(range(len(tracks)))
            i = int(pool[rng.integers(len(pool))])
            song = tracks.songs[i]
            if cfg.regime == "sad":
                if index is None:
                    raise ValueError("the sad regime needs an activity index")
                offset = _pick_offset(rng, index.get(song.name, name), chunk_len)
            else:
                offset = _pick_offset(rng, [(0, len(song.stems[name]))], chunk_len)
            if offset is not None:
                break
        else:
            raise RuntimeError(f"no song offers an active {cfg.chunk_seconds} s chunk of {name!r}")
        used.add(i)
        picks[name] = (song, offset)

    sources = {name: song.stems[name].read(off, off + chunk_len) for name, (song, off) in picks.items()}
    meta = {
        "songs": {n: s.name for n, (s, _) in picks.items()},
        "offsets": {n: o for n, (_, o) in picks.items()},
    }
    if cfg.regime == "umx":
        example = TrainingExample(sum_sources(sources.values()), sources, cfg.target, meta)
        return umx_augment(example, rng, cfg)

    gains = {n: float(rng.uniform(*cfg.gain_db)) for n in SOURCES}
    draws = rng.random(len(SOURCES))
    dropped = {}
    for k, n in enumerate(SOURCES):
        eligible = cfg.drop_mode == "each-chunk" or n == cfg.target
        dropped[n] = bool(eligible and draws[k] < cfg.drop_prob)
        sources[n] = np.zeros_like(sources[n]) if dropped[n] else apply_gain_db(sources[n], gains[n])
    meta.update(gains_db=gains, dropped=dropped)
    return TrainingExample(sum_sources(sources.values()), sources, cfg.target, meta)


def make_epoch(tracks: TrackSet, index: ActivityIndex | None, cfg: DataConfig, seed: int, epoch: int):
    """Yield the ``cfg.epoch_size`` examples of one epoch."""
    for i in range(cfg.epoch_size):
        ex = sample_training_example(example_rng(seed, epoch, i), tracks, index, cfg)
        ex.metadata["seed"] = (seed, epoch, i)
        yield ex


class MixingDataset(torch.utils.data.Dataset):
    """Indexable view of one epoch of :func:`make_epoch` returning ``(mixture, target)`` tensors."""

    def __init__(self, tracks: TrackSet, index: ActivityIndex | None, cfg: DataConfig, seed: int = 0):
        self.tracks, self.index, self.cfg, self.seed = tracks, index, cfg, seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return self.cfg.epoch_size

    def example(self, i: int) -> TrainingExample:
        return sample_training_example(example_rng(self.seed, self.epoch, i), self.tracks, self.index, self.cfg)

    def __getitem__(self, i: int):
        ex = self.example(i)
        return torch.from_numpy(ex.mixture), torch.from_numpy(np.ascontiguousarray(ex.target))


# --- synthetic data -----------------------------------------------------------


def synthetic_stems(rng: np.random.Generator, seconds: float, sample_rate: int = 44100) -> dict[str, np.ndarray]:
    """Four spectrally distinct stereo stems with gaps, standing in for real recordings."""
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    pan = rng.uniform(0.3, 0.7, size=4)

    def stereo(x, p):
        return np.stack([x * (1 - p), x * p]).astype(np.float32)

    f0 = rng.uniform(220, 440)
    vib = 1 + 0.01 * np.sin(2 * np.pi * 5 * t)
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sample_rate
    voice = sum(np.sin(k * phase) / k for k in range(1, 6))
    gate = (np.sin(2 * np.pi * t / rng.uniform(8, 12) + rng.uniform(0, 6)) > -0.6).astype(float)
    vocals = 0.3 * voice * gate

    fb = rng.uniform(40, 90)
    bass = 0.4 * np.sin(2 * np.pi * fb * t) * (0.6 + 0.4 * np.sin(2 * np.pi * 0.5 * t))

    beat = sample_rate // 2
    env = np.exp(-(np.arange(n) % beat) / (0.03 * sample_rate))
    drums = 0.5 * rng.standard_normal(n) * env

    chord = rng.uniform(500, 1500) * np.array([1.0, 1.25, 1.5])
    other = 0.1 * sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) for f in chord)
    return {
        "vocals": stereo(vocals, pan[0]),
        "bass": stereo(bass, pan[1]),
        "drums": stereo(drums, pan[2]),
        "other": stereo(other, pan[3]),
    }


def write_synthetic_dataset(root, n_train: int = 4, n_test: int = 2, seconds: float = 8.0, sample_rate: int = 44100, seed: int = 0, n_valid: int = 0):
    """Write a small MUSDB-shaped dataset of synthetic songs (16-bit PCM)."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    layout = [("train", f"song{i:02d}") for i in range(n_train)] + [("test", f"test{i:02d}") for i in range(n_test)]
    layout += [("valid", f"valid{i:02d}") for i in range(n_valid)]
    for split, name in layout:
        stems = synthetic_stems(rng, seconds, sample_rate)
        peak = max(np.abs(sum_sources(stems.values())).max(), *(np.abs(v).max() for v in stems.values()))
        if peak > 0.9:  # keep stems and mixture clear of 16-bit clipping
            stems = {k: (v * (0.9 / peak)).astype(np.float32) for k, v in stems.items()}
        for s, x in stems.items():
            write_wav(root / split / name / f"{s}.wav", x, sample_rate)
        write_wav(root / split / name / "mixture.wav", sum_sources(stems.values()), sample_rate)
    return root
