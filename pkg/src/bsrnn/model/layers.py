"""Building blocks of the band-split network.

Latent tensors are laid out ``[batch, N, K, T]``. Sequence-wise layers operate
on ``[batch', N, L]`` where ``L`` is either the time or the band axis.
"""

from __future__ import annotations

import math
import warnings

import torch
from torch import nn

from ..bandscheme import BandScheme, merge_mask, split


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """``[B, L, N] -> [B * heads, L, N / heads]``."""
    b, length, n = x.shape
    return x.reshape(b, length, heads, n // heads).permute(0, 2, 1, 3).reshape(b * heads, length, n // heads)


def merge_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """Inverse of :func:`split_heads`."""
    bh, length, d = x.shape
    return x.reshape(bh // heads, heads, length, d).permute(0, 2, 1, 3).reshape(bh // heads, length, heads * d)


class BandSplit(nn.Module):
    """Per-band normalization and projection of the complex input to ``N`` features."""

    def __init__(self, scheme: BandScheme, latent_dim: int, in_channels: int = 1):
        super().__init__()
        self.scheme = scheme
        self.in_channels = in_channels
        sizes = [2 * in_channels * w for w in scheme.widths]
        self.norms = nn.ModuleList(nn.LayerNorm(s) for s in sizes)
        self.projections = nn.ModuleList(nn.Linear(s, latent_dim) for s in sizes)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        # spec: complex [B, c, F, T]
        if spec.dim() != 4 or spec.shape[1] != self.in_channels:
            raise ValueError(f"expected complex [B, {self.in_channels}, F, T] input, got {tuple(spec.shape)}")
        b, _, _, t = spec.shape
        feats = []
        for band, norm, proj in zip(split(spec, self.scheme), self.norms, self.projections):
            # band: [B, c, 2, w, T] -> [B, T, c * 2 * w]
            band = band.permute(0, 4, 1, 2, 3).reshape(b, t, -1)
            feats.append(proj(norm(band)))
        return torch.stack(feats, dim=2).permute(0, 3, 2, 1)


class RecurrentLayer(nn.Module):
    """Residual group norm -> BLSTM -> dense, optionally split into heads sharing one LSTM."""

    def __init__(self, latent_dim: int, heads: int = 1, groups: int = 1, factor: int = 2):
        super().__init__()
        self.heads = heads
        d = latent_dim // heads
        self.norm = nn.GroupNorm(groups, latent_dim)
        self.rnn = nn.LSTM(d, factor * d, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * factor * d, d)
        for name, p in self.rnn.named_parameters():
            if name.startswith("weight_hh"):
                for gate in p.data.chunk(4, dim=0):
                    nn.init.orthogonal_(gate)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm(x).transpose(1, 2)
        y = split_heads(y, self.heads)
        y, _ = self.rnn(y)
        y = merge_heads(self.proj(y), self.heads)
        return x + y.transpose(1, 2)

    @property
    def output_projection(self) -> nn.Module:
        return self.proj


class DilatedConvLayer(nn.Module):
    """Residual stack of dilated 1-D convolutions (PReLU after each) and a 1x1 output conv.

    The stack runs at ``factor`` times the per-head latent width.
    """

    def __init__(
        self, latent_dim: int, heads: int = 1, groups: int = 1, kernel: int = 3, dilations=(1, 2, 4, 8), factor: int = 2
    ):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("dilated conv kernel size must be odd")
        self.heads = heads
        self.kernel = kernel
        self.dilations = tuple(dilations)
        d = latent_dim // heads
        self.norm = nn.GroupNorm(groups, latent_dim)
        h = factor * d
        layers = []
        for i, dil in enumerate(self.dilations):
            layers += [nn.Conv1d(d if i == 0 else h, h, kernel, dilation=dil, padding=dil * (kernel - 1) // 2), nn.PReLU()]
        self.stack = nn.Sequential(*layers)
        self.proj = nn.Conv1d(h, d, 1)

    @property
    def receptive_field(self) -> int:
        return 1 + sum(dil * (self.kernel - 1) for dil in self.dilations)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, length = x.shape
        y = self.norm(x).reshape(b * self.heads, n // self.heads, length)
        y = self.proj(self.stack(y)).reshape(b, n, length)
        return x + y

    @property
    def output_projection(self) -> nn.Module:
        return self.proj


class SelfAttention(nn.Module):
    """Residual multi-head self-attention along the sequence axis of ``[B', N, L]``.

    Queries and keys use ``attn_dim`` dimensions per head; values split ``N``
    evenly across heads.
    """

    def __init__(self, latent_dim: int, n_heads: int, attn_dim: int):
        super().__init__()
        if latent_dim % n_heads:
            raise ValueError(f"latent_dim {latent_dim} is not divisible by {n_heads} attention heads")
        self.n_heads = n_heads
        self.attn_dim = attn_dim
        self.norm = nn.LayerNorm(latent_dim)
        self.query = nn.Linear(latent_dim, n_heads * attn_dim)
        self.key = nn.Linear(latent_dim, n_heads * attn_dim)
        self.value = nn.Linear(latent_dim, latent_dim)
        self.proj = nn.Linear(latent_dim, latent_dim)

    def _weights(self, h: torch.Tensor) -> torch.Tensor:
        q = split_heads(self.query(h), self.n_heads)
        k = split_heads(self.key(h), self.n_heads)
        return torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.attn_dim), dim=-1)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic ``[B' * heads, L, L]`` attention matrix for ``x``."""
        return self._weights(self.norm(x.transpose(1, 2)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x.transpose(1, 2))
        w = self._weights(h)
        v = split_heads(self.value(h), self.n_heads)
        y = self.proj(merge_heads(w @ v, self.n_heads))
        return x + y.transpose(1, 2)

    @property
    def output_projection(self) -> nn.Module:
        return self.proj


class DualPathLayer(nn.Module):
    """One sequence (time) residual block followed by one band residual block."""

    def __init__(self, cfg):
        super().__init__()

        def block():
            if cfg.block_kind == "recurrent":
                return RecurrentLayer(cfg.latent_dim, cfg.heads, cfg.norm_groups, cfg.hidden_factor)
            return DilatedConvLayer(
                cfg.latent_dim, cfg.heads, cfg.norm_groups, cfg.conv_kernel, cfg.conv_dilations, cfg.hidden_factor
            )

        self.time = block()
        self.band = block()
        if cfg.attention:
            self.time_attn = SelfAttention(cfg.latent_dim, cfg.attn_heads, cfg.attn_dim)
            self.band_attn = SelfAttention(cfg.latent_dim, cfg.attn_heads, cfg.attn_dim)
        else:
            self.time_attn = self.band_attn = None

    def forward_axis(self, z: torch.Tensor, axis: str) -> torch.Tensor:
        b, n, k, t = z.shape
        if axis == "time":
            y = z.permute(0, 2, 1, 3).reshape(b * k, n, t)
            y = self.time(y)
            if self.time_attn is not None:
                y = self.time_attn(y)
            return y.reshape(b, k, n, t).permute(0, 2, 1, 3)
        if axis == "band":
            y = z.permute(0, 3, 1, 2).reshape(b * t, n, k)
            y = self.band(y)
            if self.band_attn is not None:
                y = self.band_attn(y)
            return y.reshape(b, t, n, k).permute(0, 2, 3, 1)
        raise ValueError(f"axis must be 'time' or 'band', got {axis!r}")

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.forward_axis(self.forward_axis(z, "time"), "band")

    def output_projections(self) -> list[nn.Module]:
        mods = [self.time.output_projection, self.band.output_projection]
        if self.time_attn is not None:
            mods += [self.time_attn.output_projection, self.band_attn.output_projection]
        return mods


class TAC(nn.Module):
    """Transform-average-concatenate across audio channels, applied residually.

    Input and output are ``[B, C, N, K, T]``.
    """

    def __init__(self, latent_dim: int, hidden_factor: int = 3, activation: str = "tanh"):
        super().__init__()
        h = hidden_factor * latent_dim

        def act():
            return nn.Tanh() if activation == "tanh" else nn.PReLU()

        self.transform = nn.Sequential(nn.Linear(latent_dim, h), act())
        self.average = nn.Sequential(nn.Linear(h, h), act())
        self.concat = nn.Sequential(nn.Linear(2 * h, latent_dim), act())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] < 2:
            warnings.warn("TAC received a single channel; passing it through unchanged", stacklevel=2)
            return x
        z = x.permute(0, 1, 3, 4, 2)
        y = self.transform(z)
        m = self.average(y.mean(dim=1, keepdim=True)).expand_as(y)
        out = self.concat(torch.cat([y, m], dim=-1))
        return x + out.permute(0, 1, 4, 2, 3)


class MaskEstimator(nn.Module):
    """Per-band MLPs (tanh hidden layers of width mu*N, GLU output) producing a complex mask."""

    def __init__(self, scheme: BandScheme, latent_dim: int, factor: int = 4, hidden_layers: int = 2, out_channels: int = 1):
        super().__init__()
        self.scheme = scheme
        self.out_channels = out_channels
        hidden = factor * latent_dim
        self.hidden_dim = hidden
        mlps = []
        for w in scheme.widths:
            layers = [nn.LayerNorm(latent_dim), nn.Linear(latent_dim, hidden), nn.Tanh()]
            for _ in range(hidden_layers - 1):
                layers += [nn.Linear(hidden, hidden), nn.Tanh()]
            layers += [nn.Linear(hidden, 2 * 2 * out_channels * w), nn.GLU(dim=-1)]
            mlps.append(nn.Sequential(*layers))
        self.mlps = nn.ModuleList(mlps)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: [B, N, K, T] -> complex mask [B, c_out, F, T]
        b, _, k, t = z.shape
        if k != self.scheme.n_bands:
            raise ValueError(f"latent has {k} bands, scheme has {self.scheme.n_bands}")
        pieces = []
        for i, (mlp, w) in enumerate(zip(self.mlps, self.scheme.widths)):
            h = mlp(z[:, :, i, :].transpose(1, 2))
            pieces.append(h.reshape(b, t, self.out_channels, 2, w).permute(0, 2, 3, 4, 1))
        return merge_mask(pieces, self.scheme)
