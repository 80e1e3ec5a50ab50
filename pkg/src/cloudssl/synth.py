"""Procedural (image, reflectivity volume, overpass track) scenes.

A scene is a clipped superposition of axis-aligned Gaussian blobs, one per
cloud structure, on a 90-level column grid. The 11-channel image sees the
volume from above through saturating, height-selective channel responses
plus a cloud-top term. Convective clouds (Nimbostratus, Deep Convection) are
more frequent near the equator and carry a narrow embedded core whose
strength grows towards the equator and in the local afternoon. The core sits
where the parent cloud already saturates every channel, so the image alone
cannot reveal it; the acquisition place and time can.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .sample_store import (DBZ_MIN, DBZ_RANGE, FINETUNE_MIN_CLOUD_FRACTION, LAT_LIMIT, N_CHANNELS,
                           N_LEVELS, DatasetManifest, OverpassTrack, SceneSample,
                           check_disjoint, dbz_to_norm, split_by_day_groups, write_manifest,
                           write_sample)

CLOUD_TYPES = ("No Cloud", "Cirrus", "Altostratus", "Altocumulus", "Stratus", "Stratocumulus",
               "Cumulus", "Nimbostratus", "Deep Convection")
CONVECTIVE = (7, 8)
CLOUD_THRESHOLD = float(dbz_to_norm(-22.5))
MAX_HEADING_DEG = 15.0
TRUNCATE_SIGMA = 3.0

# Per type: centre level range, vertical sigma range (levels), horizontal sigma
# range (fraction of image width), peak dBZ range.
TYPE_PRIORS = {
    1: dict(z=(62, 78), sz=(2.0, 4.0), sh=(0.03, 0.08), dbz=(-20.0, 0.0)),
    2: dict(z=(38, 52), sz=(3.0, 6.0), sh=(0.05, 0.12), dbz=(-18.0, -3.0)),
    3: dict(z=(35, 50), sz=(2.0, 4.0), sh=(0.02, 0.05), dbz=(-15.0, 2.0)),
    4: dict(z=(4, 10), sz=(1.5, 3.0), sh=(0.05, 0.12), dbz=(-20.0, -5.0)),
    5: dict(z=(6, 16), sz=(2.0, 4.0), sh=(0.03, 0.06), dbz=(-15.0, 0.0)),
    6: dict(z=(12, 30), sz=(4.0, 8.0), sh=(0.015, 0.035), dbz=(-10.0, 8.0)),
    7: dict(z=(27, 33), sz=(7.0, 9.0), sh=(0.05, 0.12), dbz=(-5.0, 0.0)),
    8: dict(z=(36, 44), sz=(13.0, 16.0), sh=(0.08, 0.15), dbz=(-3.0, 2.0)),
}
# Convective cores: extent as a fraction of the parent's, peak amplitude
# (normalized units, before the latitude and diurnal factors) and dBZ ceiling.
CORE_EXTENT = (0.5, 0.5, 0.5)
CORE_AMPLITUDE = {7: 0.8, 8: 1.0}
CORE_DBZ_MAX = {7: 15.0, 8: 20.0}
DEFAULT_CLASS_PRIORS = (0.20, 0.12, 0.12, 0.12, 0.14, 0.14, 0.06, 0.10)


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_scenes: int = 64
    n_pretrain_scenes: int | None = None
    image_size: int = 256
    pixel_deg: float = 0.03
    noise_sigma: float = 0.01
    latitude_band_bias: float = 5.0
    class_priors: tuple[float, ...] = DEFAULT_CLASS_PRIORS
    mean_structures: float = 8.0
    convective_lat_scale: float = 12.0
    diurnal_amplitude_dbz: float = 2.0

    def __post_init__(self):
        self.class_priors = tuple(float(x) for x in self.class_priors)
        if len(self.class_priors) != 8 or min(self.class_priors) < 0 or sum(self.class_priors) <= 0:
            raise ValueError("class_priors must be 8 non-negative weights with a positive sum")
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if self.noise_sigma < 0 or self.latitude_band_bias < 0:
            raise ValueError("noise_sigma and latitude_band_bias must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_priors"] = list(self.class_priors)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "GeneratorConfig":
        return cls(**doc)


def default_channel_response(n_levels: int = N_LEVELS, n_channels: int = N_CHANNELS) -> np.ndarray:
    """Rows peak at evenly spaced, distinct heights; each row sums to one."""
    z = np.arange(n_levels, dtype=np.float64)
    centers = np.linspace(5, n_levels - 5, n_channels)
    resp = np.exp(-0.5 * ((z[None, :] - centers[:, None]) / 6.0) ** 2)
    return resp / resp.sum(axis=1, keepdims=True)


@dataclass
class CloudStructure:
    type_code: int
    center: tuple[float, float, float]  # (z, row, col)
    extent: tuple[float, float, float]  # (sigma_z, sigma_row, sigma_col)
    peak_dbz: float


@dataclass
class SceneRecipe:
    seed: int
    n_structures: int
    latitude_band_bias: float
    timestamp: datetime
    patch_center: tuple[float, float]
    channel_response: np.ndarray = field(default_factory=default_channel_response)
    image_size: int = 256
    pixel_deg: float = 0.03
    noise_sigma: float = 0.01
    class_priors: tuple[float, ...] = DEFAULT_CLASS_PRIORS
    convective_lat_scale: float = 12.0
    diurnal_amplitude_dbz: float = 2.0

    def __post_init__(self):
        resp = np.asarray(self.channel_response, dtype=np.float64)
        if resp.shape != (N_CHANNELS, N_LEVELS) or resp.min() < 0 or np.any(resp.sum(axis=1) == 0):
            raise ValueError("channel_response must be a non-negative [11, 90] array without zero rows")
        lat, lon = self.patch_center
        if abs(lat) > LAT_LIMIT or abs(lon) > LAT_LIMIT:
            raise ValueError("patch centre must lie within +-45 degrees")
        self.channel_response = resp


def convective_weight(lat: float, bias: float) -> float:
    """Multiplier on convective class priors; peaks at the equator."""
    return 1.0 + bias * math.exp(-(lat / 15.0) ** 2)


def core_peak_dbz(type_code: int, lat: float, local_hour: float, bias: float,
                  rng: np.random.Generator, lat_scale: float = 12.0,
                  diurnal_amplitude: float = 2.0) -> float:
    """Peak of a convective core; ``DBZ_MIN`` (no core) far from the equator or without bias."""
    tropical = math.exp(-(lat / lat_scale) ** 2) * bias / (1.0 + bias)
    amp = CORE_AMPLITUDE[type_code] * tropical
    diurnal = diurnal_amplitude * math.cos(2 * math.pi * (local_hour - 15.0) / 24.0)
    noise = rng.normal(0.0, 1.0)
    if amp <= 0.01:
        return DBZ_MIN
    value = DBZ_MIN + DBZ_RANGE * amp + diurnal + noise
    return float(np.clip(value, DBZ_MIN, CORE_DBZ_MAX[type_code]))


def convective_core(parent: CloudStructure, peak_dbz: float) -> CloudStructure:
    ext = tuple(max(e * f, 0.5) for e, f in zip(parent.extent, CORE_EXTENT))
    return CloudStructure(parent.type_code, parent.center, ext, peak_dbz)


def recipe_structures(recipe: SceneRecipe) -> list[CloudStructure]:
    """Sampled cloud structures, each convective one followed by its core (if any)."""
    rng = np.random.default_rng([recipe.seed, 1])
    lat, lon = recipe.patch_center
    weights = np.array(recipe.class_priors, dtype=np.float64)
    for t in CONVECTIVE:
        weights[t - 1] *= convective_weight(lat, recipe.latitude_band_bias)
    weights /= weights.sum()
    size = recipe.image_size
    ts = recipe.timestamp.astimezone(timezone.utc)
    local_hour = (ts.hour + ts.minute / 60.0 + lon / 15.0) % 24.0
    out = []
    for _ in range(recipe.n_structures):
        t = int(rng.choice(8, p=weights)) + 1
        pri = TYPE_PRIORS[t]
        zc = rng.uniform(*pri["z"])
        sz = rng.uniform(*pri["sz"])
        sr = rng.uniform(*pri["sh"]) * size
        sc = rng.uniform(*pri["sh"]) * size
        rc, cc = rng.uniform(0, size - 1, size=2)
        peak = float(rng.uniform(*pri["dbz"]))
        s = CloudStructure(t, (zc, rc, cc), (sz, max(sr, 0.5), max(sc, 0.5)), peak)
        out.append(s)
        if t in CONVECTIVE:
            core = core_peak_dbz(t, lat, local_hour, recipe.latitude_band_bias, rng,
                                 recipe.convective_lat_scale, recipe.diurnal_amplitude_dbz)
            if core > DBZ_MIN:
                out.append(convective_core(s, core))
    return out


def _gauss1d(n: int, center: float, sigma: float) -> np.ndarray:
    x = (np.arange(n, dtype=np.float64) - center) / sigma
    g = np.exp(-0.5 * x ** 2)
    g[np.abs(x) > TRUNCATE_SIGMA] = 0.0
    return g


def structure_field(s: CloudStructure, n_levels: int, size: int):
    """Separable factors (gz, gr, gc) and peak (normalized) of one structure."""
    zc, rc, cc = s.center
    sz, sr, sc = s.extent
    peak = float(dbz_to_norm(s.peak_dbz))
    return _gauss1d(n_levels, zc, sz), _gauss1d(size, rc, sr), _gauss1d(size, cc, sc), peak


def volume_from_structures(structures: list[CloudStructure], size: int, n_levels: int = N_LEVELS):
    vol = np.zeros((n_levels, size, size), dtype=np.float64)
    best = np.zeros((size, size), dtype=np.float64)
    types = np.zeros((size, size), dtype=np.int32)
    for s in structures:
        gz, gr, gc, peak = structure_field(s, n_levels, size)
        plane = peak * np.outer(gr, gc)
        vol += gz[:, None, None] * plane[None]
        col_max = plane * gz.max()
        win = (col_max > best) & (col_max > CLOUD_THRESHOLD)
        types[win] = s.type_code
        best = np.maximum(best, col_max)
    return np.clip(vol, 0.0, 1.0).astype(np.float32), types


def generate_volume(recipe: SceneRecipe):
    """Reflectivity volume [90, H, W] (normalized) and dominant cloud type per column [H, W]."""
    return volume_from_structures(recipe_structures(recipe), recipe.image_size)


def cloud_top(volume: np.ndarray, threshold: float = CLOUD_THRESHOLD) -> np.ndarray:
    """Normalized height (level + 1) / Z of the highest cloudy voxel; 0 for clear columns."""
    z = volume.shape[0]
    cloudy = volume > threshold
    top = z - np.argmax(cloudy[::-1], axis=0)
    return np.where(cloudy.any(axis=0), top / z, 0.0)


CHANNEL_BACKGROUND = 0.05 + 0.01 * np.arange(N_CHANNELS)
RESPONSE_GAIN = 20.0
RESPONSE_AMPLITUDE = 0.6
TOP_WEIGHT = 0.2


def render_image(volume: np.ndarray, cloud_type_map: np.ndarray, recipe: SceneRecipe,
                 noise_sigma: float | None = None) -> np.ndarray:
    """Top-down 11-channel image [11, H, W] in [0, 1]."""
    if volume.ndim != 3 or volume.shape[0] != N_LEVELS:
        raise ValueError(f"volume must be [{N_LEVELS}, H, W], got {volume.shape}")
    if cloud_type_map.shape != volume.shape[1:]:
        raise ValueError("cloud type map does not match the volume raster")
    sigma = recipe.noise_sigma if noise_sigma is None else noise_sigma
    v = volume.astype(np.float64)
    inner = np.einsum("cz,zhw->chw", recipe.channel_response, v)
    img = (CHANNEL_BACKGROUND[:, None, None]
           + RESPONSE_AMPLITUDE * (1.0 - np.exp(-RESPONSE_GAIN * inner))
           + TOP_WEIGHT * cloud_top(v)[None])
    if sigma > 0:
        img = img + np.random.default_rng([recipe.seed, 2]).normal(0.0, sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def bresenham(p0, p1) -> np.ndarray:
    """8-connected raster line between integer points, inclusive -> [L, 2]."""
    r0, c0 = int(p0[0]), int(p0[1])
    r1, c1 = int(p1[0]), int(p1[1])
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr, sc = (1 if r1 >= r0 else -1), (1 if c1 >= c0 else -1)
    pts = []
    err = dr - dc
    r, c = r0, c0
    while True:
        pts.append((r, c))
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dc:
            err -= dc
            r += sr
        if e2 < dr:
            err += dr
            c += sc
    return np.array(pts, dtype=np.int32)


def heading_ok(p0, p1, max_deg: float = MAX_HEADING_DEG) -> bool:
    """True when the chord p0 -> p1 is within ``max_deg`` of north-south."""
    dr, dc = abs(p1[0] - p0[0]), abs(p1[1] - p0[1])
    if dr == 0 and dc == 0:
        return False
    return math.degrees(math.atan2(dc, dr)) <= max_deg + 1e-9


def track_length_bounds(size: int) -> tuple[int, int]:
    return size // 4, int(math.ceil(size * math.sqrt(2)))


def _chord_ends(point, heading_rad: float, size: int):
    dr, dc = math.cos(heading_rad), math.sin(heading_rad)
    hi = size - 1
    ts = []
    for p, d in ((point[0], dr), (point[1], dc)):
        if abs(d) < 1e-12:
            continue
        ts += [(0 - p) / d, (hi - p) / d]
    t_lo = max(min(ts[0], ts[1]), min(ts[2], ts[3])) if len(ts) == 4 else min(ts)
    t_hi = min(max(ts[0], ts[1]), max(ts[2], ts[3])) if len(ts) == 4 else max(ts)
    a = (point[0] + t_lo * dr, point[1] + t_lo * dc)
    b = (point[0] + t_hi * dr, point[1] + t_hi * dc)
    clip = lambda x: int(min(max(round(x), 0), hi))  # noqa: E731
    return (clip(a[0]), clip(a[1])), (clip(b[0]), clip(b[1]))


def track_from_path(path: np.ndarray, volume: np.ndarray, cloud_type_map: np.ndarray) -> OverpassTrack:
    rows, cols = path[:, 0], path[:, 1]
    refl = np.ascontiguousarray(volume[:, rows, cols], dtype=np.float32)
    cloudy = (refl > CLOUD_THRESHOLD).any(axis=0)
    return OverpassTrack(pixel_path=path.astype(np.int32), reflectivity=refl,
                         cloud_type=cloud_type_map[rows, cols].astype(np.int32),
                         cloud_fraction=float(cloudy.mean()))


def carve_track(recipe: SceneRecipe, volume: np.ndarray, cloud_type_map: np.ndarray,
                max_attempts: int = 1000) -> OverpassTrack:
    """Straight near-polar chord through the scene, border to border."""
    size = recipe.image_size
    lo, hi = track_length_bounds(size)
    rng = np.random.default_rng([recipe.seed, 3])
    for _ in range(max_attempts):
        heading = math.radians(rng.uniform(-MAX_HEADING_DEG, MAX_HEADING_DEG))
        point = rng.uniform(0, size - 1, size=2)
        a, b = _chord_ends(point, heading, size)
        if rng.random() < 0.5:
            a, b = b, a
        if not heading_ok(a, b):
            continue
        path = bresenham(a, b)
        if lo <= len(path) <= hi:
            return track_from_path(path, volume, cloud_type_map)
    raise RuntimeError("could not carve a valid track")


def latlon_grid(center: tuple[float, float], size: int, pixel_deg: float) -> np.ndarray:
    """[2, H, W] pixel-centre coordinates; row 0 is the northern edge."""
    off = (np.arange(size) - (size - 1) / 2.0) * pixel_deg
    lat = center[0] - off[:, None] * np.ones(size)[None, :]
    lon = center[1] + np.ones(size)[:, None] * off[None, :]
    return np.stack([lat, lon]).astype(np.float32)


def _pick_date(rng: np.random.Generator, day: int) -> datetime:
    months = [m for m in range(1, 13)
              if day <= (datetime(2010 + m // 12, m % 12 + 1, 1) - timedelta(days=1)).day]
    month = int(rng.choice(months))
    hour = int(rng.integers(0, 24))
    minute = int(rng.choice([0, 15, 30, 45]))
    return datetime(2010, month, day, hour, minute, tzinfo=timezone.utc)


def make_recipe(cfg: GeneratorConfig, kind: int, index: int, day: int) -> SceneRecipe:
    rng = np.random.default_rng([cfg.seed, kind, index])
    half = (cfg.image_size - 1) / 2.0 * cfg.pixel_deg
    lim = LAT_LIMIT - half - 1e-3
    center = (float(rng.uniform(-lim, lim)), float(rng.uniform(-lim, lim)))
    return SceneRecipe(
        seed=int(rng.integers(0, 2 ** 63 - 1)),
        n_structures=int(rng.poisson(cfg.mean_structures)),
        latitude_band_bias=cfg.latitude_band_bias,
        timestamp=_pick_date(rng, day),
        patch_center=center,
        image_size=cfg.image_size,
        pixel_deg=cfg.pixel_deg,
        noise_sigma=cfg.noise_sigma,
        class_priors=cfg.class_priors,
        convective_lat_scale=cfg.convective_lat_scale,
        diurnal_amplitude_dbz=cfg.diurnal_amplitude_dbz,
    )


def make_scene(recipe: SceneRecipe, sample_id: str, with_track: bool = True) -> SceneSample:
    volume, types = generate_volume(recipe)
    image = render_image(volume, types, recipe)
    track = carve_track(recipe, volume, types) if with_track else None
    return SceneSample(id=sample_id, image=image, timestamp=recipe.timestamp,
                       latlon=latlon_grid(recipe.patch_center, recipe.image_size, recipe.pixel_deg),
                       track=track)


PRETRAIN_DAYS = tuple(d for d in range(1, 32) if split_by_day_groups(d, "pretrain") != "unused")


def cyclic_days(i: int) -> int:
    return i % 31 + 1


def build_dataset(cfg: GeneratorConfig, out, month_days=cyclic_days,
                  overwrite: bool = False) -> dict[str, DatasetManifest]:
    """Generate labelled and unlabelled scenes and write them with their manifests.

    Labelled scenes (with a track) get day ``month_days(i)``; those with at
    least 20 % track cloud cover go to the fine-tuning split of their day,
    the rest fall back to the pre-training split of their day (if any).
    Unlabelled scenes are spread over the pre-training days.
    """
    out = Path(out)
    if (out / "manifests").exists() and not overwrite:
        raise FileExistsError(f"{out} already holds a dataset")
    out.mkdir(parents=True, exist_ok=True)
    members: dict[str, list[tuple[str, int, bool]]] = {}

    def add(split, sid, day, eligible):
        members.setdefault(split, []).append((sid, day, eligible))

    for i in range(cfg.n_scenes):
        day = int(month_days(i))
        sample = make_scene(make_recipe(cfg, 0, i, day), f"s{cfg.seed}-{i:05d}")
        if sample.finetune_eligible:
            split = "finetune_" + split_by_day_groups(day, "finetune")
        else:
            label = split_by_day_groups(day, "pretrain")
            if label == "unused":
                continue
            split = "pretrain_" + label
        write_sample(sample, out, split, overwrite=overwrite)
        add(split, sample.id, day, sample.finetune_eligible)

    n_unlabeled = cfg.n_scenes if cfg.n_pretrain_scenes is None else cfg.n_pretrain_scenes
    for j in range(n_unlabeled):
        day = PRETRAIN_DAYS[j % len(PRETRAIN_DAYS)]
        sample = make_scene(make_recipe(cfg, 1, j, day), f"u{cfg.seed}-{j:05d}", with_track=False)
        split = "pretrain_" + split_by_day_groups(day, "pretrain")
        write_sample(sample, out, split, overwrite=overwrite)
        add(split, sample.id, day, False)

    manifests = {}
    for split, rows in sorted(members.items()):
        m = DatasetManifest(split=split, sample_ids=tuple(r[0] for r in rows),
                            day_of_month=tuple(r[1] for r in rows), seed=cfg.seed,
                            finetune_eligible=tuple(r[2] for r in rows))
        write_manifest(m, out)
        manifests[split] = m
    check_disjoint(manifests.values())
    (out / "generator.json").write_text(json.dumps(cfg.to_json(), indent=1), encoding="utf-8")
    return manifests


def admitted_to_finetune(sample: SceneSample) -> bool:
    return sample.track is not None and sample.track.cloud_fraction >= FINETUNE_MIN_CLOUD_FRACTION

