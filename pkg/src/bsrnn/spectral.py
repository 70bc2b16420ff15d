"""STFT / iSTFT with centered Hann frames and exact-length reconstruction.

Signals are ``[..., length]`` tensors (typically ``[channels, length]`` or
``[batch, channels, length]``); spectrograms are complex ``[..., F, T]`` with
``F = n_fft // 2 + 1``. Every leading axis is transformed independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from scipy.signal import check_NOLA


@dataclass(frozen=True)
class FrameParams:
    n_fft: int = 2048
    hop: int = 512

    def __post_init__(self):
        if self.n_fft <= 0 or self.n_fft % 2:
            raise ValueError(f"n_fft must be a positive even integer, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in (0, n_fft], got {self.hop}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        return 1 + max(length, self.n_fft) // self.hop


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating) and not np.iscomplexobj(x):
        x = x.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(x))


def _window(n_fft: int, like: torch.Tensor) -> torch.Tensor:
    dtype = like.real.dtype if like.is_complex() else like.dtype
    return torch.hann_window(n_fft, periodic=True, dtype=dtype, device=like.device)


@lru_cache(maxsize=32)
def satisfies_nola(n_fft: int, hop: int) -> bool:
    """Whether Hann(n_fft) frames at ``hop`` can be inverted by weighted overlap-add."""
    window = np.hanning(n_fft + 1)[:-1]
    return bool(check_NOLA(window, n_fft, n_fft - hop))


def stft(x, n_fft: int = 2048, hop: int = 512) -> torch.Tensor:
    """Complex STFT of ``x`` along its last axis.

    Frames are centered with reflection padding, so ``T = 1 + length // hop``.
    Signals shorter than ``n_fft`` are zero-padded at the end up to ``n_fft``
    first; :func:`istft` with the original length trims that padding away.
    """
    params = FrameParams(n_fft, hop)
    x = _as_tensor(x)
    if x.is_complex():
        raise TypeError("stft expects a real-valued signal")
    if not torch.isfinite(x).all():
        raise ValueError("stft input contains NaN or infinite samples")
    length = x.shape[-1]
    if length < params.n_fft:
        x = torch.nn.functional.pad(x, (0, params.n_fft - length))
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    spec = torch.stft(
        flat,
        n_fft=params.n_fft,
        hop_length=params.hop,
        window=_window(params.n_fft, flat),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    return spec.reshape(*lead, *spec.shape[-2:])


def istft(spec: torch.Tensor, length: int, n_fft: int = 2048, hop: int = 512) -> torch.Tensor:
    """Inverse of :func:`stft`, returning exactly ``length`` samples."""
    params = FrameParams(n_fft, hop)
    spec = _as_tensor(spec)
    if not spec.is_complex():
        raise TypeError("istft expects a complex spectrogram")
    if spec.shape[-2] != params.n_bins:
        raise ValueError(f"expected {params.n_bins} frequency bins, got {spec.shape[-2]}")
    if not satisfies_nola(params.n_fft, params.hop):
        raise ValueError(
            f"Hann window of {params.n_fft} samples with hop {params.hop} violates the "
            "overlap-add condition; reconstruction is not possible"
        )
    lead = spec.shape[:-2]
    flat = spec.reshape(-1, *spec.shape[-2:])
    out = torch.istft(
        flat,
        n_fft=params.n_fft,
        hop_length=params.hop,
        window=_window(params.n_fft, flat),
        center=True,
        length=length,
    )
    return out.reshape(*lead, length)


def window_energy_gain(n_fft: int, hop: int) -> float:
    """Constant ``sum_t w[n - t*hop]**2`` of the Hann window at ``hop`` (when it is constant)."""
    window = np.hanning(n_fft + 1)[:-1]
    acc = np.zeros(n_fft)
    for offset in range(0, n_fft, hop):
        acc += np.roll(window**2, offset)
    return float(acc.mean())
