import json
import math

import numpy as np
import pytest
import torch

from bsrnn import trainer as trainer_mod
from bsrnn.audio import Stem
from bsrnn.checkpoint import load_checkpoint, load_model
from bsrnn.datagen import DataConfig, SadParams, Song, TrackSet
from bsrnn.inference import InferenceConfig
from bsrnn.metrics import sdr
from bsrnn.model import build_model
from bsrnn.spectral import stft
from bsrnn.trainer import (
    EarlyStopState,
    TrainConfig,
    TrainingFault,
    accumulate_step,
    adjusted_lr,
    clip_gradients,
    compute_loss,
    early_stop_update,
    global_norm,
    lr_at_epoch,
    stft_loss,
    time_loss,
    train,
    train_step,
    validate,
)
from conftest import IdentityMask, tiny_cfg

# --- loss ----------------------------------------------------------------------


def rand_spec(shape, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.complex(torch.randn(shape, generator=g, dtype=torch.float64), torch.randn(shape, generator=g, dtype=torch.float64))


@pytest.mark.parametrize("domain", ["time", "stft", "time+stft"])
def test_loss_zero_iff_equal(domain):
    s = stft(torch.randn(2, 3, 200, dtype=torch.float64), 32, 8)
    assert compute_loss(s, s.clone(), domain, 32, 8) == 0
    assert compute_loss(s * 1.01, s, domain, 32, 8) > 0


def test_stft_loss_closed_form():
    f, t, c = 17, 10, -0.75
    ref = torch.zeros(1, f, t, dtype=torch.complex128)
    est = torch.full((1, f, t), c, dtype=torch.complex128)
    assert compute_loss(est, ref, "stft") == pytest.approx(f * t * abs(c), abs=1e-12)


def test_combined_loss_is_sum():
    est, ref = rand_spec((2, 2, 17, 10), 0), rand_spec((2, 2, 17, 10), 1)
    both = compute_loss(est, ref, "time+stft", 32, 8, 72)
    assert both == stft_loss(est, ref) + time_loss(est, ref, 72, 32, 8)


def test_loss_per_example_sum():
    est, ref = rand_spec((1, 2, 17, 10), 0), rand_spec((1, 2, 17, 10), 1)
    single = compute_loss(est, ref, "time+stft", 32, 8)
    double = compute_loss(est.repeat(2, 1, 1, 1), ref.repeat(2, 1, 1, 1), "time+stft", 32, 8)
    assert double.item() == pytest.approx(single.item(), rel=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        compute_loss(rand_spec((1, 17, 10), 0), rand_spec((1, 17, 9), 0), "stft")
    with pytest.raises(ValueError):
        compute_loss(rand_spec((1, 17, 10), 0), rand_spec((1, 17, 10), 0), "mel")


@pytest.mark.parametrize("domain", ["time", "stft", "time+stft"])
def test_loss_gradients_finite_nonzero(domain):
    model = build_model(tiny_cfg(), seed=0).double()
    x, s = rand_spec((1, 2, 17, 10), 2), rand_spec((1, 2, 17, 10), 3)
    compute_loss(model(x), s, domain, 32, 8).backward()
    grads = [p.grad for p in model.parameters()]
    assert all(torch.isfinite(g).all() for g in grads)
    assert global_norm(grads) > 0


# --- schedule arithmetic -------------------------------------------------------


def test_adjusted_lr():
    assert adjusted_lr(1e-3, 16, 16) == 1e-3
    assert adjusted_lr(1e-3, 4, 16) == pytest.approx(2.5e-4, abs=1e-18)
    with pytest.raises(ValueError):
        adjusted_lr(1e-3, 0, 16)
    assert TrainConfig(batch_size=4).initial_lr == pytest.approx(2.5e-4)
    assert TrainConfig(batch_size=4, batch_adapt="accumulate-gradients").initial_lr == 1e-3
    assert TrainConfig(batch_size=4, batch_adapt="accumulate-gradients").accumulation_steps == 4


def test_lr_at_epoch():
    assert lr_at_epoch(1.0, 0) == 1.0
    assert lr_at_epoch(1.0, 1) == 1.0
    assert lr_at_epoch(1.0, 2) == 0.98
    assert lr_at_epoch(1.0, 5) == pytest.approx(0.9604, abs=1e-15)


def test_clip_gradients():
    g = [torch.tensor([1.2, 1.6]), torch.tensor([0.0])]
    assert all(torch.equal(a, b) for a, b in zip(clip_gradients(g, 5.0), g))
    big = [torch.tensor([6.0, 8.0]), torch.tensor([0.0])]
    out = clip_gradients(big, 5.0)
    assert global_norm(out) == pytest.approx(5.0, abs=1e-12)
    assert torch.allclose(out[0], big[0] * 0.5)
    zero = [torch.zeros(3)]
    assert torch.equal(clip_gradients(zero, 5.0)[0], zero[0])


def test_accumulate_step_trivial():
    g = [torch.randn(3), torch.randn(2, 2)]
    one = accumulate_step(None, g, 1)
    assert all(torch.equal(a, b) for a, b in zip(one, g))
    z = accumulate_step(accumulate_step(None, [torch.zeros(3)], 2), [torch.zeros(3)], 2)
    assert torch.count_nonzero(z[0]) == 0


def batch_grads(model, mix, tgt):
    model.zero_grad()
    x, s = stft(mix, 32, 8), stft(tgt, 32, 8)
    compute_loss(model(x), s, "time+stft", 32, 8, mix.shape[-1]).backward()
    return [p.grad.clone() for p in model.parameters()]


def test_accumulation_matches_large_batch():
    model = build_model(tiny_cfg(), seed=0).double()
    g = torch.Generator().manual_seed(0)
    mix = torch.randn(4, 2, 72, generator=g, dtype=torch.float64)
    tgt = torch.randn(4, 2, 72, generator=g, dtype=torch.float64)
    full = batch_grads(model, mix, tgt)
    acc = None
    for sl in (slice(0, 2), slice(2, 4)):
        acc = accumulate_step(acc, batch_grads(model, mix[sl], tgt[sl]), 2)
    for a, b in zip(acc, full):
        assert (a - b).norm() <= 1e-6 * max(b.norm(), 1e-12)


def test_accumulated_update_matches_large_batch():
    g = torch.Generator().manual_seed(0)
    mix = torch.randn(4, 2, 72, generator=g, dtype=torch.float64)
    tgt = torch.randn(4, 2, 72, generator=g, dtype=torch.float64)
    cfg = TrainConfig(batch_size=2, batch_adapt="accumulate-gradients", ref_batch=4)
    updated = []
    for batches in ([(mix, tgt)], [(mix[:2], tgt[:2]), (mix[2:], tgt[2:])]):
        model = build_model(tiny_cfg(), seed=0).double()
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        for _ in range(3):
            train_step(model, opt, batches, cfg)
        updated.append(torch.cat([p.detach().flatten() for p in model.parameters()]))
    assert (updated[0] - updated[1]).norm() <= 1e-5 * updated[0].norm()


# --- early stopping ------------------------------------------------------------


def run_early(values, monitor="usdr", patience=10):
    state = EarlyStopState()
    for i, v in enumerate(values):
        state, _, stop = early_stop_update(state, v, monitor, patience)
        if stop:
            return state, i
    return state, None


def test_early_stop_improving_never_stops():
    _, stopped = run_early([float(i) for i in range(50)])
    assert stopped is None
    _, stopped = run_early([float(-i) for i in range(50)], monitor="loss")
    assert stopped is None


def test_early_stop_flat():
    state, stopped = run_early([5.0] * 11, patience=10)
    assert stopped == 10 and state.best_epoch == 0


def test_early_stop_hand_simulation():
    state, stopped = run_early([7.0, 7.5] + [7.4] * 10, patience=10)
    assert stopped == 11
    assert state.best_value == 7.5 and state.best_epoch == 1 and state.epochs_since_best == 10


def test_early_stop_loss_minimized():
    state, _ = run_early([3.0, 2.0, 2.5], monitor="loss")
    assert state.best_value == 2.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(monitor="sdr")
    with pytest.raises(ValueError):
        TrainConfig(loss_domain="mel")


# --- validation ----------------------------------------------------------------


def memory_song(name, stems, sr=8000):
    return Song(name, {k: Stem(v.astype(np.float32), sample_rate=sr) for k, v in stems.items()}, None, sr)


def two_songs():
    rng = np.random.default_rng(0)
    songs = []
    for i in range(2):
        stems = {k: 0.2 * rng.standard_normal((2, 8000 * 3)) for k in ("vocals", "bass", "drums", "other")}
        songs.append(memory_song(f"v{i}", stems))
    return TrackSet("valid", songs)


def test_validate_matches_hand_computation():
    tracks = two_songs()
    model = IdentityMask(tiny_cfg(), value=0.4)
    ours = validate(model, tracks, "vocals", InferenceConfig(fader_segment=1.0))
    hand = []
    for s in tracks.songs:
        mix = s.load_mixture().astype(np.float64)
        ref = s.stems["vocals"].read().astype(np.float64)
        hand.append(10 * np.log10(np.sum(ref**2) / np.sum((ref - 0.4 * mix) ** 2)))
    assert ours == pytest.approx(float(np.mean(hand)), abs=1e-4)


def test_validate_identity_on_target_equals_mixture():
    rng = np.random.default_rng(1)
    x = 0.3 * rng.standard_normal((2, 8000 * 3))
    z = np.zeros_like(x)
    tracks = TrackSet("valid", [memory_song("m", {"vocals": x, "bass": z, "drums": z, "other": z})])
    assert validate(IdentityMask(tiny_cfg()), tracks, "vocals") == 60.0


class OracleModel(torch.nn.Module):
    def __init__(self, cfg, source):
        super().__init__()
        self.cfg, self.source = cfg, source
        self.dummy = torch.nn.Parameter(torch.zeros(()))

    def forward(self, spec):
        return stft(self.source, self.cfg.n_fft, self.cfg.hop).to(spec.dtype).reshape(spec.shape)


def test_validate_oracle_beats_mixture():
    tracks = TrackSet("valid", two_songs().songs[:1])
    src = torch.from_numpy(tracks.songs[0].stems["vocals"].read())
    oracle = validate(OracleModel(tiny_cfg(), src), tracks, "vocals")
    mixture = validate(IdentityMask(tiny_cfg()), tracks, "vocals")
    assert oracle > mixture


# --- training loop -------------------------------------------------------------


def toy_setup():
    mc = tiny_cfg()
    dc = DataConfig(sample_rate=8000, chunk_seconds=0.5, epoch_size=8, sad=SadParams(min_segment_s=0.5))
    return mc, dc, InferenceConfig(fader_segment=2.0)


def test_toy_run_and_report(toy_tracks, tmp_path):
    train_tracks, valid_tracks = toy_tracks
    mc, dc, inf = toy_setup()
    res = train(mc, TrainConfig(batch_size=4, max_epochs=3), dc, train_tracks, valid_tracks, tmp_path / "run", inference_cfg=inf)
    r = res.report
    assert r.epochs == 3 and r.seed == 0 and r.source == "vocals"
    assert r.energy_kwh > 0 and r.wall_time_h > 0
    assert res.best_checkpoint.exists() and (tmp_path / "run" / "last.pt").exists()
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [0, 1, 2]
    assert json.loads((tmp_path / "run" / "reports.jsonl").read_text())["run_id"] == "run"
    assert (tmp_path / "run" / "config.json").exists()
    model = load_model(res.best_checkpoint)
    assert model.cfg == mc
    ckpt = load_checkpoint(res.best_checkpoint)
    assert {"optimizer", "epoch", "rng", "best_metric", "version"} <= set(ckpt)
    assert not (tmp_path / "run" / ".lock").exists()


def test_same_seed_same_trajectory(toy_tracks, tmp_path):
    train_tracks, valid_tracks = toy_tracks
    mc, dc, inf = toy_setup()
    runs = [
        train(mc, TrainConfig(batch_size=4, max_epochs=2), dc, train_tracks, valid_tracks, tmp_path / f"r{i}", inference_cfg=inf)
        for i in range(2)
    ]
    assert [h["train_loss"] for h in runs[0].history] == [h["train_loss"] for h in runs[1].history]


def test_resume_continues_identically(toy_tracks, tmp_path):
    train_tracks, valid_tracks = toy_tracks
    mc, dc, inf = toy_setup()
    straight = train(mc, TrainConfig(batch_size=4, max_epochs=3), dc, train_tracks, valid_tracks, tmp_path / "a", inference_cfg=inf)
    train(mc, TrainConfig(batch_size=4, max_epochs=1), dc, train_tracks, valid_tracks, tmp_path / "b", inference_cfg=inf)
    resumed = train(mc, TrainConfig(batch_size=4, max_epochs=3), dc, train_tracks, valid_tracks, tmp_path / "b", inference_cfg=inf)
    assert [h["train_loss"] for h in resumed.history] == [h["train_loss"] for h in straight.history]
    assert [h["valid_usdr"] for h in resumed.history] == [h["valid_usdr"] for h in straight.history]


def test_nonfinite_loss_aborts_keeping_checkpoint(toy_tracks, tmp_path, monkeypatch):
    train_tracks, valid_tracks = toy_tracks
    mc, dc, inf = toy_setup()
    run = tmp_path / "run"
    train(mc, TrainConfig(batch_size=4, max_epochs=1), dc, train_tracks, valid_tracks, run, inference_cfg=inf)
    before = load_checkpoint(run / "last.pt")["epoch"]
    monkeypatch.setattr(trainer_mod, "compute_loss", lambda *a, **k: torch.tensor(math.nan, requires_grad=True))
    with pytest.raises(TrainingFault):
        train(mc, TrainConfig(batch_size=4, max_epochs=2), dc, train_tracks, valid_tracks, run, inference_cfg=inf)
    assert load_checkpoint(run / "last.pt")["epoch"] == before
    assert not (run / ".lock").exists()


def test_run_directory_lock(toy_tracks, tmp_path):
    train_tracks, valid_tracks = toy_tracks
    mc, dc, inf = toy_setup()
    run = tmp_path / "run"
    run.mkdir()
    (run / ".lock").write_text("123")
    with pytest.raises(RuntimeError, match="locked"):
        train(mc, TrainConfig(batch_size=4, max_epochs=1), dc, train_tracks, valid_tracks, run, inference_cfg=inf)


def test_early_stopping_ends_run(toy_tracks, tmp_path, monkeypatch):
    train_tracks, valid_tracks = toy_tracks
    mc, dc, inf = toy_setup()
    monkeypatch.setattr(trainer_mod, "validate", lambda *a, **k: (1.0, 1.0))
    res = train(mc, TrainConfig(batch_size=4, max_epochs=50, patience=2), dc, train_tracks, valid_tracks, tmp_path / "r", inference_cfg=inf)
    assert len(res.history) == 3 and res.report.best_epoch == 0
