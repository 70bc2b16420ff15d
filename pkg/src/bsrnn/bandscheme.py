"""Frequency band partitions and split/merge between fullband and subband tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import torch
import yaml

SOURCES = ("vocals", "bass", "drums", "other")

# Schema of a scheme config file: {source: [[upper_edge_hz, band_width_hz], ...]}
SCHEME_FILE_SCHEMA = {
    "type": "object",
    "additionalProperties": {
        "type": "array",
        "minItems": 1,
        "items": {
            "type": "array",
            "minItems": 2,
            "maxItems": 2,
            "items": {"type": "number", "exclusiveMinimum": 0},
        },
    },
}


@dataclass(frozen=True)
class BandScheme:
    """Contiguous partition of ``n_bins`` frequency bins into ``(start, end)`` bands."""

    source_name: str
    bands: tuple[tuple[int, int], ...]
    n_bins: int

    def __post_init__(self):
        bands = tuple((int(a), int(b)) for a, b in self.bands)
        object.__setattr__(self, "bands", bands)
        if not bands:
            raise ValueError("a band scheme needs at least one band")
        if bands[0][0] != 0 or bands[-1][1] != self.n_bins:
            raise ValueError(f"bands must cover [0, {self.n_bins}), got {bands[0][0]}..{bands[-1][1]}")
        for a, b in bands:
            if b <= a:
                raise ValueError(f"band ({a}, {b}) is empty")
        for (_, b), (c, _) in zip(bands, bands[1:]):
            if c != b:
                raise ValueError(f"bands are not contiguous at bin {b}")

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @property
    def widths(self) -> list[int]:
        return [b - a for a, b in self.bands]

    @classmethod
    def from_widths(cls, widths: Sequence[int], source_name: str = "custom") -> "BandScheme":
        edges = [0]
        for w in widths:
            edges.append(edges[-1] + int(w))
        return cls(source_name, tuple(zip(edges, edges[1:])), edges[-1])

    def to_dict(self) -> dict:
        return {"source_name": self.source_name, "bands": [list(b) for b in self.bands], "n_bins": self.n_bins}

    @classmethod
    def from_dict(cls, d: dict) -> "BandScheme":
        return cls(d["source_name"], tuple(tuple(b) for b in d["bands"]), d["n_bins"])


def ranges_to_bands(ranges, n_fft: int, sample_rate: int, remainder: str = "band") -> list[tuple[int, int]]:
    """Convert ``[(upper_edge_hz, band_width_hz), ...]`` into bin bands.

    Hz edges are rounded down to bins and empty bands are dropped. Bins above the
    last edge become one final band (``remainder="band"``) or widen the last
    band (``remainder="append"``).
    """
    if remainder not in ("band", "append"):
        raise ValueError("remainder must be 'band' or 'append'")
    n_bins = n_fft // 2 + 1
    edges = [0]
    lower = 0.0
    for upper, width in ranges:
        if upper <= lower:
            raise ValueError(f"range edges must increase, got {upper} Hz after {lower} Hz")
        n_steps = int(math.floor((upper - lower) / width + 1e-9))
        for i in range(1, n_steps + 1):
            b = min(int(math.floor((lower + i * width) * n_fft / sample_rate)), n_bins)
            if b > edges[-1]:
                edges.append(b)
        lower = upper
    if edges[-1] < n_bins:
        if remainder == "append" and len(edges) > 1:
            edges[-1] = n_bins
        else:
            edges.append(n_bins)
    return list(zip(edges, edges[1:]))


def load_scheme_file(path: str | Path | None = None) -> dict:
    """Read and validate a scheme config file (the packaged defaults when ``path`` is None)."""
    if path is None:
        text = resources.files("bsrnn.data").joinpath("schemes.yaml").read_text()
    else:
        text = Path(path).read_text()
    ranges = yaml.safe_load(text)
    jsonschema.validate(ranges, SCHEME_FILE_SCHEMA)
    return ranges


def build_scheme(
    source: str, n_fft: int = 2048, sample_rate: int = 44100, scheme_file=None, remainder: str = "band"
) -> BandScheme:
    ranges = load_scheme_file(scheme_file)
    if source not in ranges:
        raise KeyError(f"no band scheme for source {source!r}; known: {sorted(ranges)}")
    bands = ranges_to_bands(ranges[source], n_fft, sample_rate, remainder)
    return BandScheme(source, tuple(bands), n_fft // 2 + 1)


def split(spec: torch.Tensor, scheme: BandScheme) -> list[torch.Tensor]:
    """Cut a complex ``[..., F, T]`` spectrogram into subbands.

    Each subband is returned as a real tensor ``[..., 2, width, T]`` holding the
    real and imaginary parts.
    """
    if spec.shape[-2] != scheme.n_bins:
        raise ValueError(f"spectrogram has {spec.shape[-2]} bins, scheme expects {scheme.n_bins}")
    if not spec.is_complex():
        raise TypeError("split expects a complex spectrogram")
    stacked = torch.stack((spec.real, spec.imag), dim=-3)
    return [stacked[..., a:b, :] for a, b in scheme.bands]


def merge_mask(subbands: Sequence[torch.Tensor], scheme: BandScheme) -> torch.Tensor:
    """Concatenate per-band masks into a fullband complex ``[..., F, T]`` tensor.

    Accepts complex ``[..., width, T]`` pieces or the real ``[..., 2, width, T]``
    layout produced by :func:`split`.
    """
    if len(subbands) != scheme.n_bands:
        raise ValueError(f"expected {scheme.n_bands} subbands, got {len(subbands)}")
    pieces = []
    for piece, width in zip(subbands, scheme.widths):
        if not piece.is_complex():
            if piece.shape[-3] != 2:
                raise ValueError("real subbands must stack real/imaginary parts on axis -3")
            piece = torch.complex(piece.select(-3, 0), piece.select(-3, 1))
        if piece.shape[-2] != width:
            raise ValueError(f"subband width {piece.shape[-2]} does not match scheme width {width}")
        pieces.append(piece)
    return torch.cat(pieces, dim=-2)
