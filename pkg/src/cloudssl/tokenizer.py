"""Image <-> token-grid conversion and random mask plans.

Tokens are ordered row-major over the token grid; inside a token the
values are laid out channel-major, then pixel row, then pixel column.
Both numpy arrays and torch tensors are accepted (with an optional leading
batch axis for torch).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class TokenGrid:
    tokens: np.ndarray  # [T, C * p * p]
    p: int
    grid_shape: tuple[int, int]
    n_channels: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class MaskPlan:
    masked_idx: np.ndarray  # sorted int64
    visible_idx: np.ndarray  # sorted int64
    ratio: float

    @property
    def n_tokens(self) -> int:
        return len(self.masked_idx) + len(self.visible_idx)


def _check_divisible(h: int, w: int, p: int) -> None:
    if p <= 0 or h % p or w % p:
        raise ValueError(f"token size {p} must divide the image size {h}x{w}")


def patchify(x, p: int):
    """[..., C, H, W] -> [..., T, C*p*p] for numpy arrays or torch tensors."""
    *lead, c, h, w = x.shape
    _check_divisible(h, w, p)
    gh, gw = h // p, w // p
    nl = len(lead)
    x = x.reshape(*lead, c, gh, p, gw, p)
    perm = tuple(range(nl)) + tuple(nl + i for i in (1, 3, 0, 2, 4))
    x = x.permute(*perm) if isinstance(x, torch.Tensor) else x.transpose(perm)
    return x.reshape(*lead, gh * gw, c * p * p)


def unpatchify(tokens, p: int, grid_shape: tuple[int, int], n_channels: int):
    """Inverse of :func:`patchify`."""
    *lead, t, d = tokens.shape
    gh, gw = grid_shape
    if t != gh * gw or d != n_channels * p * p:
        raise ValueError(f"token array {tuple(tokens.shape)} inconsistent with grid {grid_shape}, "
                         f"p={p}, C={n_channels}")
    nl = len(lead)
    x = tokens.reshape(*lead, gh, gw, n_channels, p, p)
    perm = tuple(range(nl)) + tuple(nl + i for i in (2, 0, 3, 1, 4))
    x = x.permute(*perm) if isinstance(x, torch.Tensor) else x.transpose(perm)
    return x.reshape(*lead, n_channels, gh * p, gw * p)


def image_to_tokens(image: np.ndarray, p: int) -> TokenGrid:
    c, h, w = image.shape
    _check_divisible(h, w, p)
    tokens = np.ascontiguousarray(patchify(image, p))
    return TokenGrid(tokens=tokens, p=p, grid_shape=(h // p, w // p), n_channels=c)


def tokens_to_image(grid: TokenGrid) -> np.ndarray:
    return np.ascontiguousarray(unpatchify(grid.tokens, grid.p, grid.grid_shape, grid.n_channels))


def n_masked(n_tokens: int, ratio: float) -> int:
    # Python's round() is half-to-even.
    return int(round(ratio * n_tokens))


def sample_mask(n_tokens: int, ratio: float = 0.75, seed=None) -> MaskPlan:
    """Uniformly choose ``round(ratio * n_tokens)`` tokens to mask.

    ``seed`` may be an int, a sequence of ints or a ``numpy.random.Generator``.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = n_masked(n_tokens, ratio)
    perm = rng.permutation(n_tokens)
    return MaskPlan(masked_idx=np.sort(perm[:k]), visible_idx=np.sort(perm[k:]), ratio=ratio)


def full_visible_plan(n_tokens: int) -> MaskPlan:
    """Plan with nothing masked; used for autoencoding checks and inference."""
    return MaskPlan(masked_idx=np.zeros(0, dtype=np.int64),
                    visible_idx=np.arange(n_tokens, dtype=np.int64), ratio=0.0)
