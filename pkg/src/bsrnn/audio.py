"""WAV reading/writing and lazily loaded stems."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

_INT_SCALE = {np.dtype("int16"): 32768.0, np.dtype("int32"): 2147483648.0, np.dtype("uint8"): 128.0}


def _to_float(block: np.ndarray) -> np.ndarray:
    if block.dtype == np.uint8:
        return (block.astype(np.float32) - 128.0) / 128.0
    if block.dtype in _INT_SCALE:
        return block.astype(np.float32) / _INT_SCALE[block.dtype]
    return block.astype(np.float32)


class Stem:
    """A ``[channels, length]`` signal read on demand as float32.

    Backed either by an in-memory array or by a memory-mapped WAV file, so that a
    full dataset can be indexed without loading it.
    """

    def __init__(self, data: np.ndarray, channels_last: bool = False, sample_rate: int = 44100):
        if data.ndim == 1:
            data = data[None, :] if not channels_last else data[:, None]
        self._data = data
        self._channels_last = channels_last
        self.sample_rate = sample_rate

    @classmethod
    def from_wav(cls, path, mmap: bool = True) -> "Stem":
        rate, data = wavfile.read(path, mmap=mmap)
        return cls(data, channels_last=True, sample_rate=rate)

    @property
    def channels(self) -> int:
        return self._data.shape[1] if self._channels_last else self._data.shape[0]

    def __len__(self) -> int:
        return self._data.shape[0] if self._channels_last else self._data.shape[1]

    def read(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = len(self) if stop is None else stop
        if self._channels_last:
            block = np.asarray(self._data[start:stop]).T
        else:
            block = np.asarray(self._data[:, start:stop])
        return np.ascontiguousarray(_to_float(block))


def read_wav(path) -> tuple[np.ndarray, int]:
    """Whole file as float32 ``[channels, length]`` plus its sample rate."""
    stem = Stem.from_wav(path, mmap=False)
    return stem.read(), stem.sample_rate


def write_wav(path, data, sample_rate: int = 44100, pcm16: bool = True) -> None:
    """Write ``[channels, length]`` audio as 16-bit PCM (clipped) or 32-bit float."""
    data = np.asarray(data.detach().cpu() if hasattr(data, "detach") else data, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        out = np.clip(np.round(data.T * 32768.0), -32768, 32767).astype(np.int16)
    else:
        out = data.T.astype(np.float32)
    wavfile.write(path, sample_rate, out)
