"""Dataset synthesis and the binary dataset file.

Three generation modes mirror the synthetic training sets: a fixed array
layout in an anechoic low-noise room, the same with randomised room size and
SNR, and randomised array layouts. Labels and source positions are expressed
in the frame of the first array, on a grid centred on that array.

File layout (little endian)::

    b"SSL2" | version u32 | count u32
    per sample:
        arrays u8
        per array: pose 3*f32 | feature dims 3*u32 | f32 payload
        heatmap dims 2*u32 | f32 payload
        sources u8 | per source 2*f32          (array-1 frame, meters)

A plain-text ``key=value`` manifest is written next to the data file.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import acoustics, dsp, geom, seeding
from .geom import ARRAY_GRID, GridSpec, Pose2D

MAGIC = b"SSL2"
VERSION = 1
MODES = ("fixed-layout", "randomized-room-snr", "randomized-layout")
MAX_TRIES = 1000


class PlacementError(RuntimeError):
    pass


@dataclass
class DatasetConfig:
    mode: str = "fixed-layout"
    n_samples: int = 2000
    seed: int = 0
    room_width: float = 6.0
    room_height: float = 6.0
    absorption: float = 0.0
    max_order: int = 0
    # low-noise default; None disables noise
    snr_db: Optional[float] = 40.0
    room_side_range: tuple = (4.0, 8.0)
    snr_range: tuple = (6.0, 30.0)
    # array poses relative to the room centre: (dx, dy, theta)
    fixed_layout: tuple = ((0.0, 0.0, 0.0), (-1.5, 1.5, -math.pi / 4))
    wall_margin: float = 0.5
    min_array_separation: float = 1.0
    source_margin: float = 0.3
    min_source_array_distance: float = 0.5
    p_two_sources: float = 0.5
    min_source_separation: float = 2.0
    # per-source playback level; a spread keeps range from being read off loudness
    source_level_db: tuple = (-10.0, 10.0)
    sample_rate: int = acoustics.SAMPLE_RATE
    duration: float = acoustics.DURATION
    preroll: float = 0.1
    win: int = dsp.WIN
    hop: int = dsp.HOP
    sigma: float = acoustics.LABEL_SIGMA
    grid: GridSpec = field(default_factory=lambda: ARRAY_GRID)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown dataset mode {self.mode!r}; expected one of {MODES}")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")


@dataclass
class Dataset:
    poses: np.ndarray  # (N, arrays, 3) float64, exactly representable in f32
    features: np.ndarray  # (N, arrays, C, frames, bins) float32
    labels: Optional[np.ndarray]  # (N, rows, cols) float32, None when withheld
    sources: list  # N arrays of shape (k, 2), array-1 frame
    grid: GridSpec = ARRAY_GRID
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.poses)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.poses[idx],
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            [self.sources[i] for i in idx],
            self.grid,
            dict(self.manifest),
        )

    def without_labels(self):
        return Dataset(self.poses, self.features, None, self.sources, self.grid, dict(self.manifest))

    def relative_poses(self):
        """Pose of array 2 seen from array 1 for every sample, ``(N, 3)``."""
        return np.array([geom.relative_pose(Pose2D(*p[0]), Pose2D(*p[1])).as_tuple() for p in self.poses])

    def layout_hashes(self):
        return [layout_hash(p) for p in self.poses]


def _f32(x: float) -> float:
    return float(np.float32(x))


def _quantized_pose(x, y, theta) -> Pose2D:
    th = _f32(geom.wrap_angle(theta))
    if th > math.pi:
        th = float(np.nextafter(np.float32(math.pi), np.float32(0)))
    elif th <= -math.pi:
        th = float(np.nextafter(np.float32(-math.pi), np.float32(0)))
    return Pose2D(_f32(x), _f32(y), th)


def layout_hash(poses) -> str:
    buf = np.asarray(poses, dtype="<f4").tobytes()
    return hashlib.sha1(buf).hexdigest()[:16]


def _room_for(cfg: DatasetConfig, rng) -> acoustics.RoomSpec:
    if cfg.mode == "randomized-room-snr":
        lo, hi = cfg.room_side_range
        w, h = rng.uniform(lo, hi, 2)
        snr = rng.uniform(*cfg.snr_range)
        return acoustics.RoomSpec(float(w), float(h), cfg.absorption, cfg.max_order, float(snr))
    return acoustics.RoomSpec(cfg.room_width, cfg.room_height, cfg.absorption, cfg.max_order, cfg.snr_db)


def _layout_for(cfg: DatasetConfig, room, rng):
    if cfg.mode != "randomized-layout":
        cx, cy = room.width / 2, room.height / 2
        return [_quantized_pose(cx + dx, cy + dy, th) for dx, dy, th in cfg.fixed_layout]
    m = cfg.wall_margin
    for _ in range(MAX_TRIES):
        poses = [
            _quantized_pose(rng.uniform(m, room.width - m), rng.uniform(m, room.height - m), rng.uniform(-math.pi, math.pi))
            for _ in range(2)
        ]
        if math.hypot(poses[0].tx - poses[1].tx, poses[0].ty - poses[1].ty) >= cfg.min_array_separation:
            return poses
    raise PlacementError(f"no array layout satisfied the constraints after {MAX_TRIES} tries")


def _sources_for(cfg: DatasetConfig, room, poses, rng):
    """World positions of 1 or 2 sources, visible on the array-1 grid."""
    k = 2 if rng.uniform() < cfg.p_two_sources else 1
    to_local = geom.invert(geom.pose_to_transform(poses[0]))
    centers = np.array([[p.tx, p.ty] for p in poses])
    m = cfg.source_margin
    for _ in range(MAX_TRIES):
        pts = np.column_stack([rng.uniform(m, room.width - m, k), rng.uniform(m, room.height - m, k)])
        local = geom.apply(to_local, pts)
        if not all(cfg.grid.contains(q, margin=m) for q in local):
            continue
        d_arr = np.linalg.norm(pts[:, None, :] - centers[None], axis=-1)
        if d_arr.min() < cfg.min_source_array_distance:
            continue
        if k == 2 and np.linalg.norm(pts[0] - pts[1]) < cfg.min_source_separation:
            continue
        return pts
    raise PlacementError(f"no source placement satisfied the constraints after {MAX_TRIES} tries")


def generate_sample(cfg: DatasetConfig, index: int):
    """Synthesize sample ``index``; a pure function of ``(cfg, index)``."""
    rng = seeding.rng(cfg.seed, "sample", index)
    room = _room_for(cfg, rng)
    poses = _layout_for(cfg, room, rng)
    pts = _sources_for(cfg, room, poses, rng)
    if len(pts) == 2:
        assert np.linalg.norm(pts[0] - pts[1]) >= cfg.min_source_separation
    sig_len = cfg.duration + cfg.preroll
    sources = []
    for p in pts:
        sig = acoustics.synth_source_signal(int(rng.integers(2**62)), sig_len, cfg.sample_rate)
        level = 10 ** (rng.uniform(*cfg.source_level_db) / 20)
        sources.append((p, level * sig))
    arrays = [acoustics.MicArray(p) for p in poses]
    scene = acoustics.SceneSample(room, arrays, sources, cfg.sample_rate, cfg.duration)
    wave = acoustics.render(scene)
    wave = acoustics.add_noise(wave, room.snr_db, int(rng.integers(2**62)))
    feats = []
    start = 0
    for a in arrays:
        n = len(a.mic_offsets)
        feats.append(dsp.extract_features(wave[start : start + n], cfg.win, cfg.hop))
        start += n
    local = geom.apply(geom.invert(geom.pose_to_transform(poses[0])), pts)
    local = local.astype(np.float32)
    label = acoustics.make_label(local.astype(np.float64), cfg.grid, cfg.sigma).values
    return (
        np.array([p.as_tuple() for p in poses]),
        np.stack(feats).astype(np.float32),
        label.astype(np.float32),
        local,
    )


def build_dataset(cfg: DatasetConfig) -> Dataset:
    parts = [generate_sample(cfg, i) for i in range(cfg.n_samples)]
    if not parts:
        raise ValueError("empty dataset")
    poses, feats, labels, srcs = zip(*parts)
    ds = Dataset(np.stack(poses), np.stack(feats), np.stack(labels), list(srcs), cfg.grid)
    ds.manifest = manifest_for(cfg, ds)
    return ds


def manifest_for(cfg: DatasetConfig, ds: Dataset) -> dict:
    m = {"format": MAGIC.decode(), "version": VERSION}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, GridSpec):
            v = f"{v.width_cells},{v.height_cells},{v.origin[0]!r},{v.origin[1]!r},{v.cell_size!r}"
        m[f.name] = v
    m["n_samples"] = len(ds)
    m["layout_hashes"] = ",".join(dict.fromkeys(ds.layout_hashes()))
    return m


def write_manifest(path, manifest: dict):
    with open(path, "w") as fh:
        for k, v in manifest.items():
            fh.write(f"{k}={v}\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


def grid_from_manifest(text: str) -> GridSpec:
    w, h, ox, oy, c = text.split(",")
    return GridSpec(int(w), int(h), (float(ox), float(oy)), float(c))


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def write_dataset(path, ds: Dataset):
    labels = ds.labels if ds.labels is not None else np.zeros((len(ds),) + ds.grid.shape, np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(ds)))
        for i in range(len(ds)):
            fh.write(struct.pack("<B", len(ds.poses[i])))
            for pose, feat in zip(ds.poses[i], ds.features[i]):
                fh.write(np.asarray(pose, "<f4").tobytes())
                fh.write(struct.pack("<III", *feat.shape))
                fh.write(np.ascontiguousarray(feat, "<f4").tobytes())
            fh.write(struct.pack("<II", *labels[i].shape))
            fh.write(np.ascontiguousarray(labels[i], "<f4").tobytes())
            src = np.asarray(ds.sources[i], "<f4").reshape(-1, 2)
            fh.write(struct.pack("<B", len(src)))
            fh.write(src.tobytes())


def read_dataset(path, grid: Optional[GridSpec] = None) -> Dataset:
    """Load a dataset file; the grid comes from the manifest when present."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an SSL2 dataset file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 12

    def take(dtype, n):
        nonlocal off
        a = np.frombuffer(buf, dtype=dtype, count=n, offset=off)
        off += a.nbytes
        return a

    poses, feats, labels, srcs = [], [], [], []
    for _ in range(count):
        (n_arr,) = take("<u1", 1)
        p, f = [], []
        for _ in range(n_arr):
            p.append(take("<f4", 3).astype(np.float64))
            dims = tuple(int(d) for d in take("<u4", 3))
            f.append(take("<f4", int(np.prod(dims))).reshape(dims))
        dims = tuple(int(d) for d in take("<u4", 2))
        labels.append(take("<f4", int(np.prod(dims))).reshape(dims))
        (k,) = take("<u1", 1)
        srcs.append(take("<f4", 2 * int(k)).reshape(-1, 2).copy())
        poses.append(np.stack(p))
        feats.append(np.stack(f))
    manifest = {}
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = read_manifest(mpath)
        if grid is None and "grid" in manifest:
            grid = grid_from_manifest(manifest["grid"])
    return Dataset(
        np.stack(poses),
        np.stack(feats).astype(np.float32),
        np.stack(labels).astype(np.float32),
        srcs,
        grid or ARRAY_GRID,
        manifest,
    )


def generate_dataset(cfg: DatasetConfig, out) -> Dataset:
    """Build a dataset and write it together with its manifest."""
    ds = build_dataset(cfg)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, ds)
    write_manifest(manifest_path(out), ds.manifest)
    return ds


TARGET_DOMAIN = {"absorption": 0.3, "max_order": 2, "snr_db": 10.0}


def target_domain_config(**overrides) -> DatasetConfig:
    """Reverberant, noisy stand-in for recorded data."""
    return DatasetConfig(**{"mode": "fixed-layout", **TARGET_DOMAIN, **overrides})
