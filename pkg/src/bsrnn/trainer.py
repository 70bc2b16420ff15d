"""Losses, learning-rate schedule, batch-size adaptation, early stopping, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import ActivityIndex, DataConfig, MixingDataset, TrackSet, build_activity_index
from .energymeter import HardwareSpec, RunReport, append_report, estimate_energy
from .inference import InferenceConfig, Separator, separate
from .metrics import sdr
from .model import ModelConfig, build_model, count_params
from .spectral import istft, stft

log = logging.getLogger(__name__)

LOSS_DOMAINS = ("time", "stft", "time+stft")


class TrainingFault(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint is left in place."""


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    ref_batch: int = 16
    batch_size: int = 16
    batch_adapt: str = "scale-lr"
    decay: float = 0.98
    decay_every: int = 2
    clip_norm: float = 5.0
    max_epochs: int = 200
    patience: int = 10
    monitor: str = "usdr"
    loss_domain: str = "time+stft"
    seed: int = 0
    device: str = "cpu"
    num_workers: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.ref_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")
        if self.base_lr <= 0 or self.clip_norm <= 0 or not 0 < self.decay <= 1:
            raise ValueError("base_lr and clip_norm must be positive, decay in (0, 1]")
        if self.batch_adapt not in ("scale-lr", "accumulate-gradients"):
            raise ValueError("batch_adapt must be 'scale-lr' or 'accumulate-gradients'")
        if self.monitor not in ("usdr", "loss"):
            raise ValueError("monitor must be 'usdr' or 'loss'")
        if self.loss_domain not in LOSS_DOMAINS:
            raise ValueError(f"loss_domain must be one of {LOSS_DOMAINS}")

    @property
    def accumulation_steps(self) -> int:
        if self.batch_adapt == "accumulate-gradients":
            return max(1, -(-self.ref_batch // self.batch_size))
        return 1

    @property
    def initial_lr(self) -> float:
        if self.batch_adapt == "scale-lr":
            return adjusted_lr(self.base_lr, self.batch_size, self.ref_batch)
        return self.base_lr

    def to_dict(self) -> dict:
        return asdict(self)


# --- loss ---------------------------------------------------------------------


def _batch(x: torch.Tensor) -> int:
    return x.shape[0] if x.dim() == 4 else 1


def stft_loss(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return ((ref.real - est.real).abs().sum() + (ref.imag - est.imag).abs().sum()) / _batch(ref)


def time_loss(est: torch.Tensor, ref: torch.Tensor, length: int, n_fft: int, hop: int) -> torch.Tensor:
    return (istft(ref, length, n_fft, hop) - istft(est, length, n_fft, hop)).abs().sum() / _batch(ref)


def compute_loss(
    est: torch.Tensor, ref: torch.Tensor, domain: str = "time+stft", n_fft: int = 2048, hop: int = 512, length: int | None = None
) -> torch.Tensor:
    """L1 loss between complex spectrograms, summed over elements and divided by the batch size.

    ``time`` compares the inverse transforms (``length`` samples, default
    ``hop * (T - 1)``), ``stft`` the real and imaginary parts, ``time+stft`` adds both.
    """
    if est.shape != ref.shape:
        raise ValueError(f"estimate {tuple(est.shape)} and reference {tuple(ref.shape)} differ in shape")
    if domain not in LOSS_DOMAINS:
        raise ValueError(f"unknown loss domain {domain!r}")
    if length is None:
        length = hop * (ref.shape[-1] - 1)
    loss = est.real.new_zeros(())
    if domain in ("stft", "time+stft"):
        loss = loss + stft_loss(est, ref)
    if domain in ("time", "time+stft"):
        loss = loss + time_loss(est, ref, length, n_fft, hop)
    return loss


# --- optimization arithmetic --------------------------------------------------


def adjusted_lr(base_lr: float, batch: int, ref_batch: int = 16) -> float:
    """Learning rate keeping ``lr / batch`` equal to ``base_lr / ref_batch``."""
    if batch < 1 or ref_batch < 1:
        raise ValueError("batch sizes must be >= 1")
    return base_lr * batch / ref_batch


def lr_at_epoch(lr0: float, epoch: int, decay: float = 0.98, every: int = 2) -> float:
    return lr0 * decay ** (epoch // every)


def accumulate_step(buffers, micro_grads, n_micro: int):
    """Add ``micro_grads / n_micro`` into ``buffers`` (``None`` starts fresh); returns the buffers."""
    if buffers is None:
        return [g / n_micro for g in micro_grads]
    return [b + g / n_micro for b, g in zip(buffers, micro_grads)]


def global_norm(grads) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))


def clip_gradients(grads, max_norm: float = 5.0):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


def clip_gradients_(params, max_norm: float = 5.0) -> float:
    """In-place version on ``.grad`` of ``params``; returns the norm before clipping."""
    params = [p for p in params if p.grad is not None]
    grads = [p.grad for p in params]
    norm = global_norm(grads)
    if norm > max_norm:
        for g in grads:
            g.mul_(max_norm / norm)
    return norm


@dataclass
class EarlyStopState:
    best_value: float | None = None
    best_epoch: int = -1
    epochs_since_best: int = 0
    epoch: int = -1


def early_stop_update(state: EarlyStopState, value: float, monitor: str = "usdr", patience: int = 10):
    """Record one validation value; returns ``(state, improved, stop)``.

    uSDR is maximized, loss minimized. ``stop`` turns true once ``patience``
    consecutive epochs brought no improvement.
    """
    state.epoch += 1
    if state.best_value is None or math.isnan(state.best_value):
        better = not math.isnan(value)
    elif monitor == "usdr":
        better = value > state.best_value
    else:
        better = value < state.best_value
    if better:
        state.best_value, state.best_epoch, state.epochs_since_best = value, state.epoch, 0
    else:
        state.epochs_since_best += 1
    return state, better, state.epochs_since_best >= patience


# --- training -----------------------------------------------------------------


def train_step(model, optimizer, micro_batches, cfg: TrainConfig) -> float:
    """One parameter update from ``micro_batches`` of ``(mixture, target)`` waveforms.

    Gradients of the micro-batches are averaged, clipped to ``cfg.clip_norm``,
    then applied. Returns the mean loss.
    """
    mcfg = model.cfg
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    n = len(micro_batches)
    for mix, tgt in micro_batches:
        x = stft(mix, mcfg.n_fft, mcfg.hop)
        s = stft(tgt, mcfg.n_fft, mcfg.hop)
        loss = compute_loss(model(x), s, cfg.loss_domain, mcfg.n_fft, mcfg.hop, mix.shape[-1])
        if not torch.isfinite(loss):
            raise TrainingFault(f"non-finite training loss {loss.item()}")
        (loss / n).backward()
        total += loss.item() / n
    clip_gradients_(model.parameters(), cfg.clip_norm)
    optimizer.step()
    return total


@torch.no_grad()
def validate(model, valid_tracks: TrackSet, source: str, inference_cfg: InferenceConfig | None = None, with_loss: bool = False):
    """Mean uSDR (and optionally mean time+STFT loss) over whole validation songs.

    Uses fader inference unless ``inference_cfg`` says otherwise.
    """
    inference_cfg = inference_cfg or InferenceConfig(method="fader")
    sep = Separator(model)
    dtype = next(model.parameters()).dtype
    scores, losses = [], []
    for song in valid_tracks.songs:
        mix = torch.from_numpy(song.load_mixture()).to(dtype)
        ref = song.stems[source].read()
        est = separate(mix, sep, inference_cfg, song.sample_rate)
        scores.append(sdr(ref, est))
        if with_loss:
            n_fft, hop = model.cfg.n_fft, model.cfg.hop
            r = torch.from_numpy(ref).to(dtype)
            losses.append(compute_loss(stft(est, n_fft, hop), stft(r, n_fft, hop), "time+stft", n_fft, hop, r.shape[-1]).item())
    valid = [s for s in scores if not math.isnan(s)]
    mean = float(np.mean(valid)) if valid else math.nan
    if with_loss:
        return mean, float(np.mean(losses)) if losses else math.nan
    return mean


class RunLock:
    """Exclusive ownership of a run directory via an ``O_EXCL`` lock file."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"run directory is locked by another process ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


@dataclass
class TrainResult:
    best_checkpoint: Path
    report: RunReport
    history: list[dict] = field(default_factory=list)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data_cfg: DataConfig,
    train_tracks: TrackSet,
    valid_tracks: TrackSet,
    run_dir,
    activity: ActivityIndex | None = None,
    hardware: HardwareSpec | None = None,
    inference_cfg: InferenceConfig | None = None,
    label: str = "base",
) -> TrainResult:
    """Train one per-source model, resuming from ``run_dir/last.pt`` when it exists.

    Writes ``config.json``, ``metrics.jsonl`` (one record per epoch), ``best.pt``,
    ``last.pt`` and ``report.json`` / ``reports.jsonl`` into ``run_dir``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    hardware = hardware or HardwareSpec()
    inference_cfg = inference_cfg or InferenceConfig(method="fader")
    source = data_cfg.target
    with RunLock(run_dir):
        snapshot = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data_cfg.to_dict()}
        cfg_path = run_dir / "config.json"
        if not cfg_path.exists():
            cfg_path.write_text(json.dumps(snapshot, indent=2))

        device = torch.device(train_cfg.device)
        model = build_model(model_cfg, seed=train_cfg.seed).to(device)
        optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.initial_lr)
        early = EarlyStopState()
        start_epoch, wall_s, history = 0, 0.0, []
        last_path, best_path = run_dir / "last.pt", run_dir / "best.pt"
        if last_path.exists():
            ckpt = load_checkpoint(last_path)
            model.load_state_dict(ckpt["state_dict"])
            optimizer.load_state_dict(ckpt["optimizer"])
            early = EarlyStopState(**ckpt["early_stop"])
            start_epoch, wall_s, history = ckpt["epoch"] + 1, ckpt["wall_time_s"], ckpt["history"]
            torch.set_rng_state(ckpt["rng"])
            log.info("resuming %s at epoch %d", run_dir, start_epoch)

        if activity is None and data_cfg.regime == "sad":
            activity = build_activity_index(train_tracks, data_cfg.sad, cache_dir=run_dir)
        dataset = MixingDataset(train_tracks.shuffled(train_cfg.seed), activity, data_cfg, train_cfg.seed)
        n_micro = train_cfg.accumulation_steps
        stop = bool(history) and early.epochs_since_best >= train_cfg.patience
        for epoch in range(start_epoch, train_cfg.max_epochs):
            if stop:
                break
            t0 = time.perf_counter()
            lr = lr_at_epoch(train_cfg.initial_lr, epoch, train_cfg.decay, train_cfg.decay_every)
            for group in optimizer.param_groups:
                group["lr"] = lr
            dataset.set_epoch(epoch)
            loader = torch.utils.data.DataLoader(
                dataset, batch_size=train_cfg.batch_size, shuffle=False, num_workers=train_cfg.num_workers
            )
            model.train()
            losses, pending = [], []
            dtype = next(model.parameters()).dtype
            for mix, tgt in loader:
                pending.append((mix.to(device, dtype), tgt.to(device, dtype)))
                if len(pending) == n_micro:
                    losses.append(train_step(model, optimizer, pending, train_cfg))
                    pending = []
            if pending:
                losses.append(train_step(model, optimizer, pending, train_cfg))

            usdr, vloss = validate(model, valid_tracks, source, inference_cfg, with_loss=True)
            value = usdr if train_cfg.monitor == "usdr" else vloss
            early, improved, stop = early_stop_update(early, value, train_cfg.monitor, train_cfg.patience)
            wall_s += time.perf_counter() - t0
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)) if losses else math.nan,
                "valid_usdr": usdr,
                "valid_loss": vloss,
                "improved": improved,
                "wall_time_s": wall_s,
            }
            history.append(record)
            with open(run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            state = {
                "optimizer": optimizer.state_dict(),
                "epoch": epoch,
                "early_stop": asdict(early),
                "rng": torch.get_rng_state(),
                "wall_time_s": wall_s,
                "history": history,
                "best_metric": early.best_value,
                "train_config": train_cfg.to_dict(),
                "data_config": data_cfg.to_dict(),
            }
            if improved:
                save_checkpoint(best_path, model, model_cfg, **state)
            save_checkpoint(last_path, model, model_cfg, **state)
            log.info("epoch %d: loss %.4f, valid uSDR %.3f dB", epoch, record["train_loss"], usdr)

        best_usdr = max((h["valid_usdr"] for h in history if not math.isnan(h["valid_usdr"])), default=math.nan)
        if history and early.best_epoch >= 0:
            best_usdr = history[early.best_epoch]["valid_usdr"]
        report = RunReport(
            run_id=run_dir.name,
            source=source,
            model=label,
            seed=train_cfg.seed,
            epochs=len(history),
            best_epoch=early.best_epoch,
            best_metric=best_usdr,
            monitor=train_cfg.monitor,
            wall_time_h=wall_s / 3600.0,
            hardware=hardware,
            energy_kwh=estimate_energy(wall_s / 3600.0, hardware),
            n_params=count_params(model_cfg),
            scheme=model_cfg.scheme.to_dict(),
        )
        (run_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
        append_report(run_dir / "reports.jsonl", report)
        return TrainResult(best_path, report, history)
