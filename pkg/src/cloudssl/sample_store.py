"""On-disk sample format, day-group splits and per-epoch subsampling.

Layout of a dataset root::

    <root>/<split>/<id>/header.json
    <root>/<split>/<id>/image.f32          [C, H, W]
    <root>/<split>/<id>/latlon.f32         [2, H, W]
    <root>/<split>/<id>/track_path.i32     [L, 2]   (optional)
    <root>/<split>/<id>/reflectivity.f32   [Z, L]   (optional)
    <root>/<split>/<id>/cloud_type.i32     [L]      (optional)
    <root>/manifests/<split>.json

All arrays are little-endian and row-major. Height level 0 is the lowest bin.
"""
from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

N_CHANNELS = 11
N_LEVELS = 90
DBZ_MIN = -25.0
DBZ_MAX = 20.0
DBZ_RANGE = DBZ_MAX - DBZ_MIN
LAT_LIMIT = 45.0
LON_LIMIT = 45.0
FINETUNE_MIN_CLOUD_FRACTION = 0.20

PRETRAIN_SPLITS = ("pretrain_train", "pretrain_val", "pretrain_test")
FINETUNE_SPLITS = ("finetune_train", "finetune_val", "finetune_test")
SPLITS = PRETRAIN_SPLITS + FINETUNE_SPLITS

_F32 = np.dtype("<f4")
_I32 = np.dtype("<i4")


class InvariantError(ValueError):
    """A sample violates a named invariant of the storage format."""

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}" if detail else invariant)


def dbz_to_norm(dbz):
    return (np.asarray(dbz, dtype=np.float64) - DBZ_MIN) / DBZ_RANGE


def norm_to_dbz(norm):
    return DBZ_MIN + DBZ_RANGE * np.asarray(norm, dtype=np.float64)


@dataclass
class OverpassTrack:
    pixel_path: np.ndarray  # int32 [L, 2] (row, col)
    reflectivity: np.ndarray  # float32 [Z, L]
    cloud_type: np.ndarray  # int32 [L]
    cloud_fraction: float

    @property
    def length(self) -> int:
        return int(self.pixel_path.shape[0])


@dataclass
class SceneSample:
    id: str
    image: np.ndarray  # float32 [C, H, W]
    timestamp: datetime
    latlon: np.ndarray  # float32 [2, H, W]
    track: OverpassTrack | None = None

    @property
    def day_of_month(self) -> int:
        return self.timestamp.astimezone(timezone.utc).day

    @property
    def finetune_eligible(self) -> bool:
        return (self.track is not None
                and self.track.cloud_fraction >= FINETUNE_MIN_CLOUD_FRACTION)


def validate_sample(sample: SceneSample) -> None:
    """Raise :class:`InvariantError` naming the first violated invariant."""
    img = sample.image
    if img.ndim != 3 or img.shape[0] != N_CHANNELS:
        raise InvariantError("channel count", f"expected [{N_CHANNELS}, H, W], got {img.shape}")
    _, h, w = img.shape
    if not np.all(np.isfinite(img)):
        raise InvariantError("image finite")
    if img.min() < 0.0 or img.max() > 1.0:
        raise InvariantError("image range", "values must lie in [0, 1]")
    if sample.latlon.shape != (2, h, w):
        raise InvariantError("latlon shape", f"expected (2, {h}, {w}), got {sample.latlon.shape}")
    if not np.all(np.isfinite(sample.latlon)):
        raise InvariantError("latlon finite")
    if np.abs(sample.latlon[0]).max() > LAT_LIMIT or np.abs(sample.latlon[1]).max() > LON_LIMIT:
        raise InvariantError("field of view", "latitude/longitude must lie within +-45 degrees")
    if sample.timestamp.tzinfo is None:
        raise InvariantError("timestamp timezone", "timestamp must be timezone-aware (UTC)")
    if sample.track is not None:
        _validate_track(sample.track, h, w)


def _validate_track(track: OverpassTrack, h: int, w: int) -> None:
    path = np.asarray(track.pixel_path)
    if path.ndim != 2 or path.shape[1] != 2:
        raise InvariantError("track shape", f"pixel_path must be [L, 2], got {path.shape}")
    n = path.shape[0]
    if n < 1:
        raise InvariantError("empty track")
    if (path[:, 0].min() < 0 or path[:, 0].max() >= h
            or path[:, 1].min() < 0 or path[:, 1].max() >= w):
        raise InvariantError("track bounds")
    if n > 1 and np.abs(np.diff(path, axis=0)).max() > 1:
        raise InvariantError("track adjacency", "consecutive pixels must be 8-neighbours")
    if track.reflectivity.shape != (N_LEVELS, n):
        raise InvariantError("reflectivity shape",
                             f"expected ({N_LEVELS}, {n}), got {track.reflectivity.shape}")
    if not np.all(np.isfinite(track.reflectivity)):
        raise InvariantError("reflectivity finite")
    if track.cloud_type.shape != (n,):
        raise InvariantError("cloud_type shape")
    if track.cloud_type.min() < 0 or track.cloud_type.max() > 8:
        raise InvariantError("cloud_type codes", "codes must lie in 0..8")
    if not 0.0 <= track.cloud_fraction <= 1.0:
        raise InvariantError("cloud_fraction range")


def _write_array(path: Path, arr: np.ndarray, dtype: np.dtype) -> None:
    np.ascontiguousarray(arr, dtype=dtype).tofile(path)


def _read_array(path: Path, dtype: np.dtype, shape) -> np.ndarray:
    arr = np.fromfile(path, dtype=dtype)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=False)


def _iso(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)


def write_sample(sample: SceneSample, root, split: str, overwrite: bool = False) -> Path:
    """Validate ``sample`` and store it under ``root/split/sample.id``."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    validate_sample(sample)
    out = Path(root) / split / sample.id
    if out.exists():
        if not overwrite:
            raise FileExistsError(f"sample {sample.id!r} already exists in {out.parent}")
        shutil.rmtree(out)
    out.mkdir(parents=True)

    header = {
        "id": sample.id,
        "timestamp": _iso(sample.timestamp),
        "image_shape": list(sample.image.shape),
        "latlon_shape": list(sample.latlon.shape),
        "dbz_mapping": {"min_dbz": DBZ_MIN, "max_dbz": DBZ_MAX, "normalized": [0.0, 1.0]},
        "track_length": None,
        "cloud_fraction": None,
    }
    _write_array(out / "image.f32", sample.image, _F32)
    _write_array(out / "latlon.f32", sample.latlon, _F32)
    if sample.track is not None:
        t = sample.track
        header["track_length"] = t.length
        header["cloud_fraction"] = float(t.cloud_fraction)
        _write_array(out / "track_path.i32", t.pixel_path, _I32)
        _write_array(out / "reflectivity.f32", t.reflectivity, _F32)
        _write_array(out / "cloud_type.i32", t.cloud_type, _I32)
    (out / "header.json").write_text(json.dumps(header, indent=1), encoding="utf-8")
    return out


def read_sample(path) -> SceneSample:
    path = Path(path)
    header = json.loads((path / "header.json").read_text(encoding="utf-8"))
    image = _read_array(path / "image.f32", _F32, header["image_shape"])
    latlon = _read_array(path / "latlon.f32", _F32, header["latlon_shape"])
    track = None
    n = header.get("track_length")
    if n is not None:
        track = OverpassTrack(
            pixel_path=_read_array(path / "track_path.i32", _I32, (n, 2)),
            reflectivity=_read_array(path / "reflectivity.f32", _F32, (N_LEVELS, n)),
            cloud_type=_read_array(path / "cloud_type.i32", _I32, (n,)),
            cloud_fraction=header["cloud_fraction"],
        )
    return SceneSample(id=header["id"], image=image, timestamp=parse_timestamp(header["timestamp"]),
                       latlon=latlon, track=track)


def split_by_day_groups(day_of_month: int, stage: str) -> str:
    """Map a calendar day to its split label for ``stage`` ('pretrain' or 'finetune').

    Returns 'train', 'val', 'test' or 'unused'.
    """
    if not isinstance(day_of_month, (int, np.integer)) or not 1 <= day_of_month <= 31:
        raise ValueError(f"day of month must be an integer in 1..31, got {day_of_month!r}")
    d = int(day_of_month)
    if stage == "pretrain":
        if d <= 10:
            return "train"
        if d in (21, 22):
            return "val"
        if 25 <= d <= 27:
            return "test"
        return "unused"
    if stage == "finetune":
        if 20 <= d <= 22:
            return "val"
        if 25 <= d <= 27:
            return "test"
        return "train"
    raise ValueError(f"unknown stage {stage!r}")


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    sample_ids: tuple[str, ...]
    day_of_month: tuple[int, ...]
    seed: int
    finetune_eligible: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if len(self.sample_ids) != len(self.day_of_month):
            raise ValueError("sample_ids and day_of_month lengths differ")
        stage, label = self.split.split("_")
        for sid, day in zip(self.sample_ids, self.day_of_month):
            if split_by_day_groups(day, stage) != label:
                raise ValueError(f"sample {sid} (day {day}) does not belong to {self.split}")

    def __len__(self):
        return len(self.sample_ids)

    def to_json(self) -> dict:
        return {"split": self.split, "sample_ids": list(self.sample_ids),
                "day_of_month": list(self.day_of_month), "seed": self.seed,
                "finetune_eligible": list(self.finetune_eligible)}

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        return cls(split=doc["split"], sample_ids=tuple(doc["sample_ids"]),
                   day_of_month=tuple(int(d) for d in doc["day_of_month"]),
                   seed=int(doc["seed"]),
                   finetune_eligible=tuple(bool(x) for x in doc.get("finetune_eligible", ())))


def check_disjoint(manifests) -> None:
    seen: dict[str, str] = {}
    for m in manifests:
        for sid in m.sample_ids:
            if sid in seen:
                raise ValueError(f"sample {sid} appears in both {seen[sid]} and {m.split}")
            seen[sid] = m.split


def write_manifest(manifest: DatasetManifest, root) -> Path:
    path = Path(root) / "manifests" / f"{manifest.split}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=1), encoding="utf-8")
    return path


def read_manifest(root, split: str) -> DatasetManifest:
    path = Path(root) / "manifests" / f"{split}.json"
    return DatasetManifest.from_json(json.loads(path.read_text(encoding="utf-8")))


def sample_path(root, split: str, sample_id: str) -> Path:
    return Path(root) / split / sample_id


def epoch_subsample(manifest: DatasetManifest, fraction: float, epoch: int, seed: int) -> list[str]:
    """Draw ``ceil(fraction * N)`` distinct ids for one epoch.

    Each sample index gets a uniform key from a Philox stream keyed by
    ``(seed, epoch)``; the ids with the smallest keys are returned in key
    order, so the result depends only on (manifest, fraction, epoch, seed).
    """
    n = len(manifest.sample_ids)
    if n == 0:
        raise ValueError("cannot subsample an empty manifest")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    k = math.ceil(fraction * n - 1e-12)
    bitgen = np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, epoch & 0xFFFFFFFFFFFFFFFF])
    keys = np.random.Generator(bitgen).random(n)
    order = np.argsort(keys, kind="stable")[:k]
    return [manifest.sample_ids[i] for i in order]
