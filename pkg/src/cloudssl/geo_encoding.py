"""Fixed sinusoidal embeddings for token position, acquisition time and location.

Every expansion writes interleaved ``(sin, cos)`` pairs, so a zero phase
always encodes as ``[0, 1, 0, 1, ...]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np


@dataclass(frozen=True)
class EncodingConfig:
    embed_dim: int
    use_time: bool = False
    use_coords: bool = False
    dim_split: tuple[int, int, int] | None = None

    def __post_init__(self):
        split = self.dim_split
        if split is None:
            d_time = self.embed_dim // 4 if self.use_time else 0
            d_coord = self.embed_dim // 4 if self.use_coords else 0
            split = (self.embed_dim - d_time - d_coord, d_time, d_coord)
            object.__setattr__(self, "dim_split", split)
        d_pos, d_time, d_coord = split
        if sum(split) != self.embed_dim:
            raise ValueError(f"dim_split {split} does not sum to embed_dim {self.embed_dim}")
        if any(d < 0 or d % 4 for d in split):
            raise ValueError(f"dim_split parts must be non-negative multiples of 4, got {split}")
        if (d_time > 0) != self.use_time or (d_coord > 0) != self.use_coords:
            raise ValueError("dim_split segments must be non-empty exactly when their flag is on")
        if d_pos == 0:
            raise ValueError("positional segment must be non-empty")


def _sincos(phase: np.ndarray) -> np.ndarray:
    """[..., K] phases -> [..., 2K] interleaved sin/cos."""
    out = np.empty(phase.shape[:-1] + (2 * phase.shape[-1],), dtype=np.float64)
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def geometric_frequencies(n: int, low: float = 1e-4) -> np.ndarray:
    """``n`` frequencies from 1 down to ``low`` (inclusive), geometrically spaced."""
    if n == 1:
        return np.ones(1)
    return low ** (np.arange(n) / (n - 1))


def harmonics(n: int) -> np.ndarray:
    # Integer multipliers keep cyclic quantities periodic at every scale.
    return 2.0 ** np.arange(n)


def posembed_sincos_grid(grid_shape: tuple[int, int], d_pos: int) -> np.ndarray:
    """Fixed 2D embedding [T, d_pos]: first half encodes the grid row, second half the column."""
    if d_pos <= 0 or d_pos % 4:
        raise ValueError(f"d_pos must be a positive multiple of 4, got {d_pos}")
    gh, gw = grid_shape
    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64),
                             indexing="ij")
    omega = geometric_frequencies(d_pos // 4)
    row_emb = _sincos(rows.reshape(-1, 1) * omega)
    col_emb = _sincos(cols.reshape(-1, 1) * omega)
    return np.concatenate([row_emb, col_emb], axis=1)


def _time_fractions(t: datetime) -> tuple[float, float]:
    t = t.astimezone(timezone.utc)
    seconds = t.hour * 3600 + t.minute * 60 + t.second
    tod = seconds / 86400.0
    year_len = 366 if (t.year % 4 == 0 and t.year % 100 != 0) or t.year % 400 == 0 else 365
    doy = (t.timetuple().tm_yday - 1 + tod) / year_len
    return doy, tod


def encode_timestamp(t: datetime, d_time: int) -> np.ndarray:
    """[d_time] vector: day-of-year cycle in the first half, time-of-day cycle in the second."""
    if d_time <= 0 or d_time % 4:
        raise ValueError(f"d_time must be a positive multiple of 4, got {d_time}")
    doy, tod = _time_fractions(t)
    m = harmonics(d_time // 4)
    return np.concatenate([_sincos(2 * np.pi * doy * m), _sincos(2 * np.pi * tod * m)])


def token_centers(latlon: np.ndarray, p: int) -> np.ndarray:
    """Mean (lat, lon) of every p x p pixel block, row-major -> [T, 2]."""
    _, h, w = latlon.shape
    blocks = latlon.astype(np.float64).reshape(2, h // p, p, w // p, p)
    return blocks.mean(axis=(2, 4)).reshape(2, -1).T


def encode_latlon(centers: np.ndarray, d_coord: int) -> np.ndarray:
    """[T, 2] token-center coordinates in degrees -> [T, d_coord]."""
    if d_coord <= 0 or d_coord % 4:
        raise ValueError(f"d_coord must be a positive multiple of 4, got {d_coord}")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    lat, lon = centers[:, 0], centers[:, 1]
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
        raise ValueError("coordinates out of range: lat in [-90, 90], lon in [-180, 180]")
    m = harmonics(d_coord // 4)
    lat_emb = _sincos(np.pi * (lat / 90.0)[:, None] * m)
    lon_emb = _sincos(np.pi * (lon / 180.0)[:, None] * m)
    return np.concatenate([lat_emb, lon_emb], axis=1)


def compose_token_embedding(config: EncodingConfig, grid_shape: tuple[int, int],
                            timestamp: datetime | None = None,
                            latlon: np.ndarray | None = None, p: int | None = None) -> np.ndarray:
    """Per-token additive embedding [T, embed_dim] laid out as [pos | time | coord]."""
    d_pos, d_time, d_coord = config.dim_split
    parts = [posembed_sincos_grid(grid_shape, d_pos)]
    n_tokens = parts[0].shape[0]
    if config.use_time:
        if timestamp is None:
            raise ValueError("time encoding requested but no timestamp given")
        parts.append(np.broadcast_to(encode_timestamp(timestamp, d_time), (n_tokens, d_time)))
    if config.use_coords:
        if latlon is None or p is None:
            raise ValueError("coordinate encoding requested but no latlon grid / token size given")
        centers = token_centers(latlon, p)
        if centers.shape[0] != n_tokens:
            raise ValueError("latlon grid does not match the token grid")
        parts.append(encode_latlon(centers, d_coord))
    return np.concatenate(parts, axis=1)
