"""Utterance-level (uSDR) and chunk-level (cSDR) signal-to-distortion ratios.

All SDRs are plain energy ratios with channels pooled and values capped to
``[-SDR_CAP, SDR_CAP]`` dB. cSDR is the median over 1 s chunks of that ratio;
it does not apply the BSS-Eval distortion-filter projection, so numbers are
close to but not identical with museval's.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SDR_CAP = 60.0
CSDR_NOTE = (
    "cSDR = median over 1 s chunks of the energy-ratio SDR (no BSS-Eval distortion filters), "
    "median across songs; uSDR = whole-song energy-ratio SDR, mean across songs."
)


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def sdr(ref, est, cap: float = SDR_CAP) -> float:
    """``10 log10(sum ref^2 / sum (ref - est)^2)`` over all channels; NaN for a silent reference."""
    ref, est = _np(ref), _np(est)
    if ref.shape != est.shape:
        raise ValueError(f"reference {ref.shape} and estimate {est.shape} differ in shape")
    num = float(np.sum(ref**2))
    if num == 0.0:
        return math.nan
    den = float(np.sum((ref - est) ** 2))
    if den == 0.0:
        return cap
    return float(np.clip(10.0 * np.log10(num / den), -cap, cap))


def usdr(song_pairs) -> tuple[list[float], float]:
    """Per-song SDR of ``(ref, est)`` pairs and their mean (silent references skipped)."""
    values = [sdr(ref, est) for ref, est in song_pairs]
    valid = [v for v in values if not math.isnan(v)]
    return values, (float(np.mean(valid)) if valid else math.nan)


def csdr_song(ref, est, sample_rate: int = 44100, chunk_seconds: float = 1.0) -> float:
    """Median SDR over consecutive full chunks; a trailing partial chunk is dropped."""
    ref, est = _np(ref), _np(est)
    chunk = int(round(chunk_seconds * sample_rate))
    n_chunks = ref.shape[-1] // chunk
    if n_chunks < 1:
        raise ValueError(f"song of {ref.shape[-1]} samples is shorter than one {chunk}-sample chunk")
    values = []
    for i in range(n_chunks):
        v = sdr(ref[..., i * chunk : (i + 1) * chunk], est[..., i * chunk : (i + 1) * chunk])
        if not math.isnan(v):
            values.append(v)
    return float(np.median(values)) if values else math.nan


def csdr_aggregate(per_song) -> float:
    values = [v for v in per_song if not math.isnan(v)]
    return float(np.median(values)) if values else math.nan


@dataclass
class SongScore:
    song: str
    source: str
    usdr: float
    csdr: float


@dataclass
class EvaluationReport:
    scores: list[SongScore] = field(default_factory=list)
    note: str = CSDR_NOTE

    def add(self, song: str, source: str, ref, est, sample_rate: int = 44100) -> SongScore:
        score = SongScore(song, source, sdr(ref, est), csdr_song(ref, est, sample_rate))
        self.scores.append(score)
        return score

    @property
    def sources(self) -> list[str]:
        return list(dict.fromkeys(s.source for s in self.scores))

    def aggregates(self) -> dict:
        out = {}
        for src in self.sources:
            rows = [s for s in self.scores if s.source == src]
            valid = [s.usdr for s in rows if not math.isnan(s.usdr)]
            out[src] = {
                "usdr": float(np.mean(valid)) if valid else math.nan,
                "csdr": csdr_aggregate([s.csdr for s in rows]),
            }
        if out:
            out["average"] = {
                "usdr": float(np.mean([v["usdr"] for v in out.values()])),
                "csdr": float(np.mean([v["csdr"] for v in out.values()])),
            }
        return out

    def to_dict(self) -> dict:
        return {"note": self.note, "scores": [asdict(s) for s in self.scores], "aggregates": self.aggregates()}

    def to_table(self) -> str:
        agg = self.aggregates()
        lines = [f"# {self.note}", f"{'source':<10} {'uSDR':>8} {'cSDR':>8}"]
        for name, v in agg.items():
            lines.append(f"{name:<10} {v['usdr']:8.2f} {v['csdr']:8.2f}")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        (out_dir / "report.txt").write_text(self.to_table() + "\n")
