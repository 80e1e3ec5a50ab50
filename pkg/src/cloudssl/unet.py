"""Residual U-Net baseline: 11-channel image -> 90-level reflectivity volume."""
from __future__ import annotations

import torch
import torch.nn as nn

from .checkpoint import TrainState
from .config import UNetConfig
from .data import SplitData
from .head import FinetuneRegime, finetune, predict_volume
from .training import Hyper


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout))
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1, bias=False)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.body(x) + self.skip(x))


def _level(cin: int, cout: int, n_blocks: int) -> nn.Sequential:
    return nn.Sequential(ResBlock(cin, cout), *(ResBlock(cout, cout) for _ in range(n_blocks - 1)))


class ResUNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]
        self.down = nn.ModuleList()
        prev = cfg.in_channels
        for w in widths:
            self.down.append(_level(prev, w, cfg.blocks_per_level))
            prev = w
        self.pool = nn.MaxPool2d(2)
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(prev, w, 2, stride=2))
            self.merge.append(_level(2 * w, w, cfg.blocks_per_level))
            prev = w
        self.out = nn.Conv2d(prev, cfg.out_channels, 1)

    def forward(self, x):
        skips = []
        for i, level in enumerate(self.down):
            if i:
                x = self.pool(x)
            x = level(x)
            skips.append(x)
        skips.pop()
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([up(x), skips.pop()], dim=1))
        return self.out(x)


def build_unet(cfg: UNetConfig | None = None) -> ResUNet:
    cfg = cfg or UNetConfig()
    if cfg.image_size % 2 ** (cfg.depth - 1):
        raise ValueError("image size must be divisible by 2**(depth-1)")
    return ResUNet(cfg)


def unet_train(model: ResUNet, train: SplitData, val: SplitData, hyper: Hyper,
               state: TrainState | None = None, out_dir=None, header: dict | None = None) -> TrainState:
    """Same slice loss and loop as the ViT fine-tuning; there is no backbone regime."""
    return finetune(model, FinetuneRegime.FROM_SCRATCH, train, val, hyper, state=state,
                    out_dir=out_dir, header=header)


unet_predict = predict_volume
