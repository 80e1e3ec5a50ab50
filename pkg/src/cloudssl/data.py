"""In-memory views of stored splits, batched for training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

import numpy as np
import torch

from .geo_encoding import EncodingConfig, compose_token_embedding
from .sample_store import (DatasetManifest, OverpassTrack, SceneSample, read_manifest,
                           read_sample, sample_path)


def token_embedding(enc: EncodingConfig, grid_shape, p: int, timestamp: datetime,
                    latlon: np.ndarray) -> np.ndarray:
    return compose_token_embedding(enc, grid_shape, timestamp=timestamp, latlon=latlon, p=p)


@dataclass
class SplitData:
    """All samples of one split held in memory, ordered as in the manifest."""

    manifest: DatasetManifest
    samples: list[SceneSample]

    def __post_init__(self):
        self._index = {s.id: i for i, s in enumerate(self.samples)}
        self._emb_cache: dict[tuple, np.ndarray] = {}

    @classmethod
    def load(cls, root, split: str) -> "SplitData":
        manifest = read_manifest(root, split)
        samples = [read_sample(sample_path(root, split, sid)) for sid in manifest.sample_ids]
        return cls(manifest, samples)

    @classmethod
    def from_samples(cls, split: str, samples: list[SceneSample], seed: int = 0) -> "SplitData":
        m = DatasetManifest(split=split, sample_ids=tuple(s.id for s in samples),
                            day_of_month=tuple(s.day_of_month for s in samples), seed=seed)
        return cls(m, samples)

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def get(self, sid: str) -> SceneSample:
        return self.samples[self._index[sid]]

    def subset(self, ids) -> "SplitData":
        ids = list(ids)
        keep = [self.get(i) for i in ids]
        m = DatasetManifest(split=self.manifest.split, sample_ids=tuple(ids),
                            day_of_month=tuple(s.day_of_month for s in keep), seed=self.manifest.seed)
        return SplitData(m, keep)

    def images(self, ids, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.get(i).image for i in ids])).to(device, dtype)

    def embeddings(self, ids, enc: EncodingConfig, p: int, dtype=torch.float32,
                   device=None) -> torch.Tensor:
        out = []
        for sid in ids:
            key = (sid, enc, p)
            if key not in self._emb_cache:
                s = self.get(sid)
                h, w = s.image.shape[1:]
                self._emb_cache[key] = token_embedding(
                    enc, (h // p, w // p), p, s.timestamp, s.latlon).astype(np.float32)
            out.append(self._emb_cache[key])
        return torch.from_numpy(np.stack(out)).to(device, dtype)

    def tracks(self, ids) -> list[OverpassTrack]:
        return [self.get(i).track for i in ids]


def batches(ids: list, batch_size: int):
    for start in range(0, len(ids), batch_size):
        yield ids[start:start + batch_size]
