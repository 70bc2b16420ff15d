"""Whole-song separation by segmenting, separating each segment, and reassembling.

``separate_fn`` arguments map a batch of waveform segments ``[S, C, L]`` to the
estimated source ``[S, C, L]``; :class:`Separator` wraps a trained network that way.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .spectral import istft, stft


@dataclass
class InferenceConfig:
    method: str = "fader"
    ola_segment: float = 3.0
    ola_hop: float = 0.5
    fader_segment: float = 10.0
    fader_overlap: float = 0.1
    batch_size: int = 4

    def __post_init__(self):
        if self.method not in ("ola", "fader"):
            raise ValueError(f"method must be 'ola' or 'fader', got {self.method!r}")
        if not 0 < self.ola_hop <= self.ola_segment:
            raise ValueError("OLA hop must be in (0, segment]")
        if not 0 <= self.fader_overlap < 1:
            raise ValueError("fader overlap must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class Separator:
    """Waveform-to-waveform wrapper around a spectrogram-masking model."""

    def __init__(self, model: torch.nn.Module, n_fft: int | None = None, hop: int | None = None):
        self.model = model
        cfg = getattr(model, "cfg", None)
        self.n_fft = n_fft or cfg.n_fft
        self.hop = hop or cfg.hop

    @torch.no_grad()
    def __call__(self, segments: torch.Tensor) -> torch.Tensor:
        was_training = self.model.training
        self.model.eval()
        try:
            spec = stft(segments, self.n_fft, self.hop)
            return istft(self.model(spec), segments.shape[-1], self.n_fft, self.hop)
        finally:
            self.model.train(was_training)


def _run_batched(separate_fn, segments: list[torch.Tensor], batch_size: int) -> list[torch.Tensor]:
    out = []
    for i in range(0, len(segments), batch_size):
        batch = torch.stack(segments[i : i + batch_size])
        out.extend(separate_fn(batch).unbind(0))
    return out


def _as_signal(song) -> torch.Tensor:
    if isinstance(song, np.ndarray):
        song = torch.from_numpy(np.ascontiguousarray(song))
    if song.dim() != 2:
        raise ValueError(f"expected a [channels, length] waveform, got shape {tuple(song.shape)}")
    return song


def segment_starts(length: int, segment: int, hop: int) -> list[int]:
    """Start offsets of ``segment``-long windows every ``hop`` samples covering ``[0, length)``."""
    if segment >= length:
        return [0]
    n = -(-(length - segment) // hop) + 1
    return [i * hop for i in range(n)]


def coverage_counts(length: int, segment: int, hop: int) -> np.ndarray:
    counts = np.zeros(length, dtype=np.int64)
    for s in segment_starts(length, segment, hop):
        counts[s : s + segment] += 1
    return counts


def separate_ola(song, separate_fn, segment: int, hop: int, batch_size: int = 4) -> torch.Tensor:
    """Overlap-add with a rectangular window, normalized by the per-sample segment count.

    ``segment`` and ``hop`` are in samples. The last segment is zero-padded to
    full length; a song shorter than ``segment`` is processed in one piece.
    """
    x = _as_signal(song)
    c, length = x.shape
    if segment >= length:
        return separate_fn(x.unsqueeze(0))[0]
    starts = segment_starts(length, segment, hop)
    padded_len = starts[-1] + segment
    xp = torch.nn.functional.pad(x, (0, padded_len - length))
    outs = _run_batched(separate_fn, [xp[:, s : s + segment] for s in starts], batch_size)
    acc = torch.zeros(c, padded_len, dtype=outs[0].dtype)
    count = torch.zeros(padded_len, dtype=outs[0].dtype)
    for s, y in zip(starts, outs):
        acc[:, s : s + segment] += y
        count[s : s + segment] += 1
    return (acc / count)[:, :length]


def fade_weights(overlap: int) -> tuple[np.ndarray, np.ndarray]:
    """Complementary linear ramps over ``overlap`` samples, excluding the endpoints 0 and 1."""
    ramp_in = np.arange(1, overlap + 1, dtype=np.float64) / (overlap + 1)
    return 1.0 - ramp_in, ramp_in


def separate_fader(song, separate_fn, segment: int, overlap: int, batch_size: int = 4) -> torch.Tensor:
    """Segments of ``segment`` samples overlapping by ``overlap``, cross-faded with linear ramps."""
    x = _as_signal(song)
    c, length = x.shape
    if segment >= length:
        return separate_fn(x.unsqueeze(0))[0]
    if not 0 <= overlap < segment:
        raise ValueError("overlap must be smaller than the segment")
    starts = segment_starts(length, segment, segment - overlap)
    padded_len = starts[-1] + segment
    xp = torch.nn.functional.pad(x, (0, padded_len - length))
    outs = _run_batched(separate_fn, [xp[:, s : s + segment] for s in starts], batch_size)
    ramp_out, ramp_in = (torch.from_numpy(r).to(outs[0].dtype) for r in fade_weights(overlap))
    acc = torch.zeros(c, padded_len, dtype=outs[0].dtype)
    total = torch.zeros(padded_len, dtype=outs[0].dtype)
    for j, (s, y) in enumerate(zip(starts, outs)):
        w = torch.ones(segment, dtype=y.dtype)
        if overlap:
            if j > 0:
                w[:overlap] = ramp_in
            if j < len(starts) - 1:
                w[segment - overlap :] = ramp_out
        acc[:, s : s + segment] += w * y
        total[s : s + segment] += w
    # total is 1 wherever both ramps of an overlap land; dividing also covers a short tail.
    return (acc / total)[:, :length]


def separate(song, separate_fn, cfg: InferenceConfig, sample_rate: int = 44100) -> torch.Tensor:
    if cfg.method == "ola":
        seg = int(round(cfg.ola_segment * sample_rate))
        return separate_ola(song, separate_fn, seg, int(round(cfg.ola_hop * sample_rate)), cfg.batch_size)
    seg = int(round(cfg.fader_segment * sample_rate))
    return separate_fader(song, separate_fn, seg, int(round(cfg.fader_overlap * seg)), cfg.batch_size)
