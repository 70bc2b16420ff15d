from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..bandscheme import BandScheme, build_scheme

STEREO_MODES = ("mono-per-channel", "naive-stereo", "tac")
BLOCK_KINDS = ("recurrent", "dilated-conv")
TAC_ACTIVATIONS = ("tanh", "prelu")


@dataclass
class ModelConfig:
    """Hyperparameters of one per-source separation network.

    ``attn_heads == 0`` disables self-attention. Defaults are the small model
    (N=64, R=8, mu=4) with mono-per-channel processing.
    """

    scheme: BandScheme
    latent_dim: int = 64
    depth: int = 8
    masker_factor: int = 4
    masker_layers: int = 2
    stereo_mode: str = "mono-per-channel"
    tac_activation: str = "tanh"
    tac_factor: int = 3
    block_kind: str = "recurrent"
    hidden_factor: int = 2
    conv_kernel: int = 3
    conv_dilations: tuple[int, ...] = (1, 2, 4, 8)
    attn_heads: int = 0
    attn_dim: int = 8
    heads: int = 1
    norm_groups: int = 1
    n_channels: int = 2
    n_fft: int = 2048
    hop: int = 512
    sample_rate: int = 44100

    def __post_init__(self):
        if isinstance(self.scheme, dict):
            self.scheme = BandScheme.from_dict(self.scheme)
        self.conv_dilations = tuple(int(d) for d in self.conv_dilations)
        if self.stereo_mode not in STEREO_MODES:
            raise ValueError(f"stereo_mode must be one of {STEREO_MODES}, got {self.stereo_mode!r}")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.tac_activation not in TAC_ACTIVATIONS:
            raise ValueError(f"tac_activation must be one of {TAC_ACTIVATIONS}, got {self.tac_activation!r}")
        for name in ("latent_dim", "depth", "masker_factor", "masker_layers", "heads", "hidden_factor", "tac_factor"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.latent_dim % self.heads:
            raise ValueError(f"latent_dim {self.latent_dim} is not divisible by heads {self.heads}")
        if self.norm_groups < 1 or self.latent_dim % self.norm_groups:
            raise ValueError("norm_groups must divide latent_dim")
        if self.attn_heads < 0 or (self.attn_heads and self.attn_dim < 1):
            raise ValueError("attention needs attn_heads >= 1 and attn_dim >= 1")
        if self.attn_heads and self.latent_dim % self.attn_heads:
            raise ValueError(f"latent_dim {self.latent_dim} is not divisible by attn_heads {self.attn_heads}")
        if self.scheme.n_bins != self.n_fft // 2 + 1:
            raise ValueError(f"scheme covers {self.scheme.n_bins} bins but n_fft={self.n_fft}")
        if self.stereo_mode == "tac" and self.n_channels < 2:
            raise ValueError("tac mode needs n_channels >= 2")

    @property
    def attention(self) -> bool:
        return self.attn_heads > 0

    @classmethod
    def for_source(cls, source: str, scheme_file=None, **kwargs) -> "ModelConfig":
        n_fft = kwargs.get("n_fft", 2048)
        rate = kwargs.get("sample_rate", 44100)
        return cls(scheme=build_scheme(source, n_fft, rate, scheme_file), **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.to_dict()
        d["conv_dilations"] = list(self.conv_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
