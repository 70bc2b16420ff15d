from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .layers import TAC, BandSplit, DualPathLayer, MaskEstimator


class BandSplitRNN(nn.Module):
    """Band split -> R dual-path layers (optionally with TAC) -> per-band masker.

    ``forward`` takes a complex STFT ``[B, C, F, T]`` (or ``[C, F, T]``) and returns
    the masked estimate of the same shape.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        joint = cfg.stereo_mode == "naive-stereo"
        channels = cfg.n_channels if joint else 1
        self.band_split = BandSplit(cfg.scheme, cfg.latent_dim, channels)
        self.layers = nn.ModuleList(DualPathLayer(cfg) for _ in range(cfg.depth))
        if cfg.stereo_mode == "tac":
            self.tacs = nn.ModuleList(
                TAC(cfg.latent_dim, cfg.tac_factor, cfg.tac_activation) for _ in range(cfg.depth)
            )
        else:
            self.tacs = None
        self.masker = MaskEstimator(cfg.scheme, cfg.latent_dim, cfg.masker_factor, cfg.masker_layers, channels)

    def _streams(self, spec: torch.Tensor) -> torch.Tensor:
        b, c, f, t = spec.shape
        if self.cfg.stereo_mode == "naive-stereo":
            if c != self.cfg.n_channels:
                raise ValueError(f"naive-stereo model expects {self.cfg.n_channels} channels, got {c}")
            return spec
        return spec.reshape(b * c, 1, f, t)

    def encode(self, spec: torch.Tensor) -> torch.Tensor:
        """Band-split latent: ``[B * C, N, K, T]`` per channel, or ``[B, N, K, T]`` for naive stereo."""
        return self.band_split(self._streams(spec))

    def separate_latent(self, z: torch.Tensor, n_channels: int) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if self.tacs is not None:
                bc, n, k, t = z.shape
                z = self.tacs[i](z.reshape(bc // n_channels, n_channels, n, k, t)).reshape(bc, n, k, t)
        return z

    def estimate_mask(self, spec: torch.Tensor) -> torch.Tensor:
        squeeze = spec.dim() == 3
        if squeeze:
            spec = spec.unsqueeze(0)
        if spec.dim() != 4 or not spec.is_complex():
            raise ValueError(f"expected complex [B, C, F, T] spectrogram, got {tuple(spec.shape)}")
        if spec.shape[2] != self.cfg.scheme.n_bins:
            raise ValueError(f"spectrogram has {spec.shape[2]} bins, model expects {self.cfg.scheme.n_bins}")
        z = self.separate_latent(self.encode(spec), spec.shape[1])
        mask = self.masker(z).reshape(spec.shape)
        return mask.squeeze(0) if squeeze else mask

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        return apply_mask(self.estimate_mask(spec), spec)

    def output_projections(self) -> list[nn.Module]:
        """Final projections of every residual branch; zeroing them makes the stack an identity."""
        mods = []
        for i, layer in enumerate(self.layers):
            mods += layer.output_projections()
            if self.tacs is not None:
                mods.append(self.tacs[i].concat[0])
        return mods


def apply_mask(mask: torch.Tensor, spec: torch.Tensor) -> torch.Tensor:
    if mask.shape != spec.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match spectrogram {tuple(spec.shape)}")
    return mask * spec


def build_model(cfg: ModelConfig, seed: int | None = None) -> BandSplitRNN:
    """Construct a model, seeding the initialization when ``seed`` is given."""
    if seed is None:
        return BandSplitRNN(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return BandSplitRNN(cfg)


def count_params(cfg: ModelConfig) -> int:
    """Number of learnable scalars of the model described by ``cfg``."""
    with torch.device("meta"):
        model = BandSplitRNN(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_pipeline_params(configs) -> int:
    """Total over one model per source (an iterable of configs)."""
    return sum(count_params(c) for c in configs)
