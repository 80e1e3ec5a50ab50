"""Model configurations and named presets."""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .geo_encoding import EncodingConfig
from .sample_store import N_CHANNELS, N_LEVELS


@dataclass(frozen=True)
class ViTConfig:
    scale: str = "small"
    token_size: int = 8
    image_size: int = 256
    in_channels: int = N_CHANNELS
    n_levels: int = N_LEVELS
    embed_dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    decoder_dim: int = 256
    decoder_depth: int = 4
    decoder_heads: int = 8
    head_channels: tuple[int, ...] = (128, 128, 128)
    use_time: bool = False
    use_coords: bool = False
    learned_pos: bool = False

    def __post_init__(self):
        if self.token_size not in (8, 16):
            raise ValueError(f"token size must be 8 or 16, got {self.token_size}")
        if self.image_size % self.token_size:
            raise ValueError("token size must divide the image size")
        if self.embed_dim % self.heads or self.decoder_dim % self.decoder_heads:
            raise ValueError("widths must be divisible by their head counts")
        n_up = (self.token_size).bit_length() - 1
        if len(self.head_channels) != n_up:
            raise ValueError(f"token size {self.token_size} needs {n_up} upsampling stages, "
                             f"got head_channels={self.head_channels}")
        object.__setattr__(self, "head_channels", tuple(self.head_channels))

    @property
    def grid_size(self) -> int:
        return self.image_size // self.token_size

    @property
    def n_tokens(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.token_size ** 2

    @property
    def encoding(self) -> EncodingConfig:
        return EncodingConfig(self.embed_dim, self.use_time, self.use_coords)

    def to_json(self) -> dict:
        d = asdict(self)
        d["head_channels"] = list(self.head_channels)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "ViTConfig":
        doc = dict(doc)
        if "head_channels" in doc:
            doc["head_channels"] = tuple(doc["head_channels"])
        return cls(**doc)


_SCALES = {
    "small": dict(embed_dim=384, depth=12, heads=6),
    "base": dict(embed_dim=768, depth=12, heads=12),
    # Reduced model that trains in seconds on one CPU core.
    "desk": dict(embed_dim=64, depth=4, heads=4, decoder_dim=64, decoder_depth=2,
                 decoder_heads=4, image_size=64),
}


def vit_config(scale: str = "small", token_size: int = 8, **overrides) -> ViTConfig:
    if scale not in _SCALES:
        raise ValueError(f"unknown ViT scale {scale!r}; choose from {sorted(_SCALES)}")
    kw = dict(_SCALES[scale])
    n_up = token_size.bit_length() - 1
    width = 32 if scale == "desk" else 128
    kw.setdefault("head_channels", (width,) * n_up)
    kw.update(overrides)
    return ViTConfig(scale=scale, token_size=token_size, **kw)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 22
    blocks_per_level: int = 2
    in_channels: int = N_CHANNELS
    out_channels: int = N_LEVELS
    image_size: int = 256

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "UNetConfig":
        return cls(**doc)
