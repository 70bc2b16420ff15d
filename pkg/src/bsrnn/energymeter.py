"""Hardware-spec energy estimates for training runs and Pareto selection of variants."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

# Memory draw: 3 W per 8 GB.
MEMORY_W_PER_GB = 3.0 / 8.0


@dataclass
class HardwareSpec:
    n_gpus: int = 1
    gpu_power_w: float = 250.0
    gpu_usage_fraction: float = 1.0
    n_cpu_cores: int = 0
    core_power_w: float = 0.0
    cpu_usage_fraction: float = 1.0
    memory_gb: float = 0.0
    pue: float = 1.5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.pue < 1:
            raise ValueError("pue must be >= 1")

    @property
    def power_w(self) -> float:
        """Facility-level draw in watts (device power times PUE)."""
        devices = (
            self.n_gpus * self.gpu_power_w * self.gpu_usage_fraction
            + self.n_cpu_cores * self.core_power_w * self.cpu_usage_fraction
            + self.memory_gb * MEMORY_W_PER_GB
        )
        return devices * self.pue


def estimate_energy(wall_time_h: float, hw: HardwareSpec) -> float:
    """Energy in kWh of running ``hw`` for ``wall_time_h`` hours."""
    if wall_time_h < 0:
        raise ValueError("wall time must be non-negative")
    return wall_time_h * hw.power_w / 1000.0


def pareto_indices(points) -> list[int]:
    """Indices of the non-dominated ``(metric, energy)`` points, by increasing energy.

    Higher metric and lower energy are better. A point is dominated when another
    one is at least as good on both axes and strictly better on one, so exact
    duplicates of a front point are all kept.
    """
    order = sorted(range(len(points)), key=lambda i: (points[i][1], -points[i][0], i))
    keep = []
    best = None
    for i in order:
        p = tuple(points[i])
        if keep and p == tuple(points[keep[-1]]):
            keep.append(i)
        elif best is None or p[0] > best:
            keep.append(i)
            best = p[0]
    return keep


def pareto_front(points) -> list:
    return [points[i] for i in pareto_indices(points)]


@dataclass
class RunReport:
    run_id: str
    source: str
    model: str = "base"
    seed: int = 0
    epochs: int = 0
    best_epoch: int = -1
    best_metric: float = float("nan")
    monitor: str = "usdr"
    wall_time_h: float = 0.0
    hardware: HardwareSpec = field(default_factory=HardwareSpec)
    energy_kwh: float = 0.0
    measured_energy_kwh: float | None = None
    n_params: int | None = None
    scheme: dict | None = None

    def __post_init__(self):
        if isinstance(self.hardware, dict):
            self.hardware = HardwareSpec(**self.hardware)

    def recompute_energy(self) -> float:
        self.energy_kwh = estimate_energy(self.wall_time_h, self.hardware)
        return self.energy_kwh

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


def append_report(path, report: RunReport) -> None:
    """Append one JSON line; a single ``write`` on an ``O_APPEND`` handle keeps records whole."""
    line = json.dumps(report.to_dict()) + "\n"
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    try:
        os.write(fd, line.encode())
    finally:
        os.close(fd)


def read_reports(path) -> list[RunReport]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(RunReport.from_dict(json.loads(line)))
    return out


def summarize(reports, sources=("vocals", "bass", "drums", "other")) -> list[dict]:
    """Group reports by model label: per-source metric, average, total params and energy."""
    rows = {}
    for r in reports:
        row = rows.setdefault(r.model, {"model": r.model, "metrics": {}, "energy_kwh": 0.0, "measured_kwh": 0.0, "n_params": 0})
        row["metrics"][r.source] = r.best_metric
        row["energy_kwh"] += r.energy_kwh
        row["measured_kwh"] += r.measured_energy_kwh or 0.0
        row["n_params"] += r.n_params or 0
    out = []
    for row in rows.values():
        vals = [row["metrics"][s] for s in sources if s in row["metrics"]]
        row["average"] = sum(vals) / len(vals) if vals else float("nan")
        out.append(row)
    front = set(pareto_indices([(r["average"], r["energy_kwh"]) for r in out]))
    for i, r in enumerate(out):
        r["pareto"] = i in front
    return out


def format_table(rows, sources=("vocals", "bass", "drums", "other")) -> str:
    header = f"{'model':<24}" + "".join(f"{s:>8}" for s in sources) + f"{'avg':>8}{'params(M)':>11}{'kWh':>9}{'pareto':>8}"
    lines = [header]
    for r in rows:
        cells = "".join(f"{r['metrics'].get(s, float('nan')):8.2f}" for s in sources)
        lines.append(
            f"{r['model']:<24}{cells}{r['average']:8.2f}{r['n_params'] / 1e6:11.2f}{r['energy_kwh']:9.2f}"
            f"{'*' if r['pareto'] else '':>8}"
        )
    return "\n".join(lines)
