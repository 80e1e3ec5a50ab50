"""ViT encoder, masked-autoencoder decoder, masked loss and the pre-training loop."""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import TrainState
from .config import ViTConfig
from .data import SplitData, token_embedding
from .geo_encoding import posembed_sincos_grid
from .sample_store import SceneSample
from .tokenizer import MaskPlan, n_masked, patchify, sample_mask, unpatchify
from .training import Hyper, fit, make_optimizer, restore_best

log = logging.getLogger(__name__)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        x = attn.softmax(dim=-1) @ v
        return self.proj(x.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def _gather_tokens(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


class ViTEncoder(nn.Module):
    """Linear token embedding + transformer blocks.

    The per-token additive embedding (position, and optionally time and
    coordinates) is computed outside the model and passed in, so the same
    weights serve every encoding variant of a given width.
    """

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        self.pos_embed = (nn.Parameter(torch.zeros(1, cfg.n_tokens, cfg.embed_dim))
                          if cfg.learned_pos else None)
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
                                    for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.apply(_init_weights)
        if self.pos_embed is not None:
            nn.init.normal_(self.pos_embed, std=0.02)

    def forward(self, tokens, emb, visible_idx=None):
        x = self.patch_embed(tokens) + emb
        if self.pos_embed is not None:
            x = x + self.pos_embed
        if visible_idx is not None:
            x = _gather_tokens(x, visible_idx)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class MaskedAutoencoder(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg)
        self.decoder_embed = nn.Linear(cfg.embed_dim, cfg.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.decoder_dim))
        pos = posembed_sincos_grid((cfg.grid_size, cfg.grid_size), cfg.decoder_dim)
        self.register_buffer("decoder_pos", torch.from_numpy(pos).float().unsqueeze(0),
                             persistent=False)
        self.decoder_blocks = nn.ModuleList(Block(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio)
                                            for _ in range(cfg.decoder_depth))
        self.decoder_norm = nn.LayerNorm(cfg.decoder_dim)
        self.decoder_pred = nn.Linear(cfg.decoder_dim, cfg.patch_dim)
        for m in (self.decoder_embed, self.decoder_blocks, self.decoder_norm, self.decoder_pred):
            m.apply(_init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, tokens, emb, visible_idx):
        """tokens [B, T, P], emb [B, T, D], visible_idx [B, V] -> predicted tokens [B, T, P].

        Only the visible tokens enter the encoder; every other position is
        filled with the shared mask token before decoding.
        """
        latent = self.encoder(tokens, emb, visible_idx)
        y = self.decoder_embed(latent)
        b, t = tokens.shape[:2]
        full = self.mask_token.to(y.dtype).expand(b, t, -1)
        full = full.scatter(1, visible_idx.unsqueeze(-1).expand(-1, -1, y.shape[-1]), y)
        x = full + self.decoder_pos.to(y.dtype)
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.decoder_pred(self.decoder_norm(x))


def build_mae(cfg: ViTConfig) -> MaskedAutoencoder:
    return MaskedAutoencoder(cfg)


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def _as_index(idx, batch: int | None = None, device=None) -> torch.Tensor:
    if isinstance(idx, MaskPlan):
        idx = idx.masked_idx
    t = torch.as_tensor(np.asarray(idx) if not isinstance(idx, torch.Tensor) else idx,
                        dtype=torch.long, device=device)
    if t.ndim == 1 and batch is not None:
        t = t.unsqueeze(0).expand(batch, -1)
    return t


def masked_mse(pred: torch.Tensor, target: torch.Tensor, masked) -> torch.Tensor:
    """Mean squared error over the masked tokens only.

    ``pred``/``target`` are [T, P] or [B, T, P]; ``masked`` is a
    :class:`MaskPlan`, or masked indices shaped [M] or [B, M].
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    single = pred.ndim == 2
    if single:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    idx = _as_index(masked, pred.shape[0], pred.device)
    if idx.shape[-1] == 0:
        raise ValueError("masked set is empty")
    diff = _gather_tokens(pred, idx) - _gather_tokens(target, idx)
    return (diff ** 2).mean()


def mae_forward(model: MaskedAutoencoder, sample: SceneSample, plan: MaskPlan) -> torch.Tensor:
    """Predicted tokens [T, P] for one sample under ``plan``."""
    cfg = model.cfg
    if plan.n_tokens != cfg.n_tokens:
        raise ValueError(f"mask plan covers {plan.n_tokens} tokens, model expects {cfg.n_tokens}")
    if sample.image.shape != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ValueError(f"image shape {sample.image.shape} does not match the model")
    ref = next(model.parameters())
    tokens = patchify(torch.from_numpy(sample.image).to(ref.device, ref.dtype), cfg.token_size)
    g = (cfg.grid_size, cfg.grid_size)
    emb = torch.from_numpy(token_embedding(cfg.encoding, g, cfg.token_size,
                                           sample.timestamp, sample.latlon)).to(ref.device, ref.dtype)
    vis = torch.from_numpy(plan.visible_idx).long().to(ref.device).unsqueeze(0)
    tokens, emb = tokens.unsqueeze(0), emb.unsqueeze(0)
    return model(tokens, emb, vis)[0]


def _plans(n: int, n_tokens: int, ratio: float, key) -> tuple[torch.Tensor, torch.Tensor]:
    rng = np.random.default_rng(key)
    plans = [sample_mask(n_tokens, ratio, rng) for _ in range(n)]
    vis = torch.from_numpy(np.stack([p.visible_idx for p in plans])).long()
    msk = torch.from_numpy(np.stack([p.masked_idx for p in plans])).long()
    return vis, msk


def mae_batch_loss(model: MaskedAutoencoder, data: SplitData, ids: list[str],
                   vis: torch.Tensor, msk: torch.Tensor) -> torch.Tensor:
    cfg = model.cfg
    ref = next(model.parameters())
    tokens = patchify(data.images(ids, ref.dtype, ref.device), cfg.token_size)
    emb = data.embeddings(ids, cfg.encoding, cfg.token_size, ref.dtype, ref.device)
    pred = model(tokens, emb, vis.to(ref.device))
    return masked_mse(pred, tokens, msk)


_VAL_KEY = 0x5EED


def mae_validation_loss(model: MaskedAutoencoder, data: SplitData, seed: int,
                        mask_ratio: float = 0.75, batch_size: int = 16) -> float:
    """Masked MSE over a split with masks fixed per (seed, sample position)."""
    cfg = model.cfg
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            ids = data.ids[start:start + batch_size]
            vis, msk = _plans(len(ids), cfg.n_tokens, mask_ratio, [seed, _VAL_KEY, start])
            loss = mae_batch_loss(model, data, ids, vis, msk)
            total += loss.item() * len(ids)
            count += len(ids)
    return total / count


def pretrain(model: MaskedAutoencoder, train: SplitData, val: SplitData, hyper: Hyper,
             mask_ratio: float = 0.75, state: TrainState | None = None, out_dir=None,
             header: dict | None = None) -> TrainState:
    """Masked-reconstruction training with Adam and lowest-validation-loss checkpointing.

    Each epoch uses a fresh ``hyper.fraction`` subsample of ``train``. The
    returned state holds the model with the best validation loss loaded and
    the per-epoch loss history in ``state.history``. Passing a previously
    returned (or reloaded) ``state`` resumes training at ``state.epoch``.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("pre-training needs non-empty train and validation splits")
    if state is None:
        state = TrainState(model=model, optimizer=make_optimizer(model, hyper.lr), seed=hyper.seed)
    n_tok = model.cfg.n_tokens
    if n_masked(n_tok, mask_ratio) == 0:
        raise ValueError("mask ratio masks no tokens")

    def step_loss(ids, epoch, b):
        vis, msk = _plans(len(ids), n_tok, mask_ratio, [hyper.seed, epoch, b])
        return mae_batch_loss(model, train, ids, vis, msk)

    def validate():
        return {"loss": mae_validation_loss(model, val, hyper.seed, mask_ratio)}

    hdr = {"kind": "mae", "config": model.cfg.to_json(), "hyper": hyper.to_json(),
           "mask_ratio": mask_ratio}
    hdr.update(header or {})
    fit(state, train, hyper, step_loss, validate, out_dir=out_dir, header=hdr)
    return state


def finish(state: TrainState) -> TrainState:
    """Load the best-validation weights into ``state.model``."""
    restore_best(state)
    return state


def reconstruct(model: MaskedAutoencoder, sample: SceneSample, plan: MaskPlan) -> dict:
    """Masked input, reconstruction and original image, for figure triptychs."""
    cfg = model.cfg
    model.eval()
    with torch.no_grad():
        pred = mae_forward(model, sample, plan).float().cpu()
    tokens = patchify(torch.from_numpy(sample.image), cfg.token_size)
    masked_in = tokens.clone()
    masked_in[torch.from_numpy(plan.masked_idx)] = 0.0
    recon = tokens.clone()
    recon[torch.from_numpy(plan.masked_idx)] = pred[torch.from_numpy(plan.masked_idx)]
    g = (cfg.grid_size, cfg.grid_size)
    to_img = lambda t: unpatchify(t, cfg.token_size, g, cfg.in_channels).numpy()  # noqa: E731
    return {"masked": to_img(masked_in), "reconstruction": to_img(recon),
            "original": sample.image.copy()}

