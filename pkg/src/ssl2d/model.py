"""Localization networks and domain discriminators on the numpy autodiff engine.

All models read STFT features ``(B, arrays, 2*mics, frames, bins)`` and emit
heatmaps ``(B, rows, cols, 1)`` on the array-1 grid.

Variants
--------
``adaptation``
    Both array encoders are concatenated into one encoding (the ``Dint``
    attachment point) and decoded by a shared decoder.
``plain`` / ``fc-pose`` / ``explicit-transform``
    Each array has its own encoder and decoder producing ``C0`` feature maps;
    a merge head turns the concatenated maps into the heatmap. ``fc-pose``
    appends a learned pose embedding to both encodings, ``explicit-transform``
    warps the second array's maps into the first array's frame.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import seeding
from .etlayer import et_layer
from .geom import ARRAY_GRID, GridSpec

VARIANTS = ("adaptation", "plain", "fc-pose", "explicit-transform")
GRID_KEYS = ("width_cells", "height_cells", "origin", "cell_size")


@dataclass
class ModelConfig:
    variant: str = "adaptation"
    seed: int = 0
    n_arrays: int = 2
    in_channels: int = 8
    # keep the 0-4 kHz band (65 of 129 bins at 16 kHz / 256-point frames)
    band_bins: int = 65
    input_scale: float = 200.0
    enc_channels: tuple = (16, 32, 64)
    seed_size: int = 7
    dec_channels: int = 8
    map_channels: int = 8
    merge_channels: int = 8
    pose_features: int = 32
    final_bias: float = -2.0
    grid: GridSpec = field(default_factory=lambda: ARRAY_GRID)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")


def glorot(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class _Builder:
    """Adds seeded, deterministically ordered parameters to a store."""

    def __init__(self, store: ad.ParamStore, seed: int, stream: str):
        self.store = store
        self.seed = seed
        self.stream = stream

    def _rng(self, name):
        return seeding.rng(self.seed, f"{self.stream}/{name}")

    def dense(self, name, n_in, n_out, bias=0.0):
        self.store.add(f"{name}.w", glorot(self._rng(name), (n_in, n_out), n_in, n_out))
        self.store.add(f"{name}.b", np.full(n_out, bias))

    def conv(self, name, k, c_in, c_out, bias=0.0):
        self.store.add(f"{name}.w", glorot(self._rng(name), (k, k, c_in, c_out), k * k * c_in, k * k * c_out))
        self.store.add(f"{name}.b", np.full(c_out, bias))


def _stage_sizes(start, end, n=3):
    return [round(start + (end - start) * (k + 1) / n) for k in range(n)]


class LocalizationModel:
    def __init__(self, cfg: ModelConfig | None = None, **overrides):
        cfg = cfg or ModelConfig()
        if overrides:
            cfg = ModelConfig(**{**cfg.__dict__, **overrides})
        self.cfg = cfg
        self.variant = cfg.variant
        self.store = ad.ParamStore()
        b = _Builder(self.store, cfg.seed, f"model/{cfg.variant}")
        rows, cols = cfg.grid.shape
        self.row_sizes = _stage_sizes(cfg.seed_size, rows)
        self.col_sizes = _stage_sizes(cfg.seed_size, cols)
        self.enc_bins = cfg.band_bins
        for _ in cfg.enc_channels:
            self.enc_bins = (self.enc_bins - 1) // 2 + 1
        c_enc = cfg.enc_channels[-1]
        for a in range(cfg.n_arrays):
            c = cfg.in_channels
            for i, co in enumerate(cfg.enc_channels):
                b.conv(f"enc{a}.conv{i}", 3, c, co)
                c = co
        s2 = cfg.seed_size**2
        if self.variant == "adaptation":
            ch = 2 * cfg.dec_channels
            b.dense("dec.seed", cfg.n_arrays * c_enc * self.enc_bins, ch * s2)
            for i in range(3):
                b.conv(f"dec.up{i}", 3, ch, ch)
            b.conv("dec.out", 1, ch, 1, bias=cfg.final_bias)
            return
        extra = cfg.pose_features if self.variant == "fc-pose" else 0
        if extra:
            b.dense("pose.fc", 3, extra)
        for a in range(cfg.n_arrays):
            ch = cfg.dec_channels
            b.dense(f"dec{a}.seed", (c_enc + extra) * self.enc_bins, ch * s2)
            b.conv(f"dec{a}.up0", 3, ch, ch)
            b.conv(f"dec{a}.up1", 3, ch, ch)
            b.conv(f"dec{a}.up2", 3, ch, cfg.map_channels)
        m = cfg.merge_channels
        b.conv("merge.c0", 3, cfg.n_arrays * cfg.map_channels, m)
        b.conv("merge.c1", 3, m, m)
        b.conv("merge.c2", 3, m, 1, bias=cfg.final_bias)

    # ---- pieces ----

    def prepare(self, features):
        """Band-limit, scale and move channels last: ``(B, arrays, frames, bins, C)``."""
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 5 or f.shape[1] != self.cfg.n_arrays or f.shape[2] != self.cfg.in_channels:
            raise ValueError(f"features of shape {f.shape} do not fit this model")
        f = f[..., : self.cfg.band_bins] * self.cfg.input_scale
        return np.ascontiguousarray(f.transpose(0, 1, 3, 4, 2))

    def _p(self, name):
        return self.store[name]

    def encode(self, x, a):
        h = x
        for i in range(len(self.cfg.enc_channels)):
            h = ad.relu(ad.conv2d(h, self._p(f"enc{a}.conv{i}.w"), self._p(f"enc{a}.conv{i}.b"), stride=2, pad=1))
        return h

    def _decode(self, prefix, h, ch, last_relu):
        s = self.cfg.seed_size
        pooled = ad.mean(h, axis=1)
        flat = ad.reshape(pooled, (pooled.shape[0], -1))
        z = ad.relu(ad.dense(flat, self._p(f"{prefix}.seed.w"), self._p(f"{prefix}.seed.b")))
        z = ad.reshape(z, (z.shape[0], s, s, ch))
        for i, size in enumerate(zip(self.row_sizes, self.col_sizes)):
            z = ad.upconv2d(z, self._p(f"{prefix}.up{i}.w"), self._p(f"{prefix}.up{i}.b"), size)
            if i < 2 or last_relu:
                z = ad.relu(z)
        return z

    def encoding(self, features):
        """The merged encoding ``(B, frames', bins', arrays*C)`` of the adaptation model."""
        x = self.prepare(features)
        return ad.concat_channels([self.encode(x[:, a], a) for a in range(self.cfg.n_arrays)])

    def decode(self, enc):
        z = self._decode("dec", enc, 2 * self.cfg.dec_channels, last_relu=True)
        return ad.sigmoid(ad.conv2d(z, self._p("dec.out.w"), self._p("dec.out.b")))

    def premerge(self, features, rel_poses):
        """Concatenated per-array maps ``(B, rows, cols, arrays*C0)`` fed to the merge head."""
        if self.variant == "adaptation":
            raise ValueError("the adaptation model has no merge head")
        if rel_poses is None:
            raise ValueError(f"variant {self.variant!r} needs relative poses")
        rel = np.asarray(rel_poses, dtype=np.float64)
        x = self.prepare(features)
        B = x.shape[0]
        if rel.shape != (B, 3):
            raise ValueError(f"expected relative poses of shape {(B, 3)}, got {rel.shape}")
        encs = [self.encode(x[:, a], a) for a in range(self.cfg.n_arrays)]
        if self.variant == "fc-pose":
            e = ad.relu(ad.dense(rel, self._p("pose.fc.w"), self._p("pose.fc.b")))
            fr, bn = encs[0].shape[1:3]
            tiled = ad.broadcast_to(ad.reshape(e, (B, 1, 1, e.shape[1])), (B, fr, bn, e.shape[1]))
            encs = [ad.concat_channels([h, tiled]) for h in encs]
        maps = [self._decode(f"dec{a}", h, self.cfg.dec_channels, last_relu=True) for a, h in enumerate(encs)]
        if self.variant == "explicit-transform":
            maps[1] = et_layer(maps[1], [tuple(p) for p in rel], self.cfg.grid)
        return ad.concat_channels(maps)

    def forward(self, features, rel_poses=None):
        """Heatmaps ``(B, rows, cols, 1)``; layout variants need ``rel_poses (B, 3)``."""
        if self.variant == "adaptation":
            return self.decode(self.encoding(features))
        z = self.premerge(features, rel_poses)
        z = ad.relu(ad.conv2d(z, self._p("merge.c0.w"), self._p("merge.c0.b"), pad=1))
        z = ad.relu(ad.conv2d(z, self._p("merge.c1.w"), self._p("merge.c1.b"), pad=1))
        return ad.sigmoid(ad.conv2d(z, self._p("merge.c2.w"), self._p("merge.c2.b"), pad=1))

    def forward_dataset(self, dataset, idx):
        feats = dataset.features[idx]
        rel = None if self.variant == "adaptation" else dataset.relative_poses()[idx]
        return self.forward(feats, rel)

    def predict(self, dataset, batch_size: int = 64):
        """Heatmaps ``(N, rows, cols)`` as float64 numpy."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        rel = None if self.variant == "adaptation" else dataset.relative_poses()
        out = []
        for lo in range(0, len(dataset), batch_size):
            sl = slice(lo, lo + batch_size)
            out.append(self.forward(dataset.features[sl], None if rel is None else rel[sl]).data[..., 0])
        if not out:
            return np.zeros((0,) + self.cfg.grid.shape)
        return np.concatenate(out)


class Discriminator:
    """Domain classifier returning ``P(source)`` of shape ``(B, 1)``.

    ``level="int"`` reads the merged encoding through 3 ReLU dense layers;
    ``level="out"`` reads the heatmap through 4 stride-2 convolutions and a
    small dense head. ``passes`` counts forward evaluations.
    """

    def __init__(self, level: str, input_shape, seed: int = 0):
        if level not in ("int", "out"):
            raise ValueError("discriminator level must be 'int' or 'out'")
        self.level = level
        self.input_shape = tuple(input_shape)
        self.passes = 0
        self.store = ad.ParamStore()
        b = _Builder(self.store, seed, f"disc/{level}")
        if level == "int":
            n = int(np.prod(self.input_shape))
            for i, (a, c) in enumerate(zip((n, 256, 128, 64), (256, 128, 64, 1))):
                b.dense(f"d{level}.fc{i}", a, c)
            return
        h, w, c = self.input_shape
        for i, co in enumerate((8, 16, 32, 32)):
            b.conv(f"d{level}.conv{i}", 3, c, co)
            c = co
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        for i, (a, co) in enumerate(zip((h * w * c, 64, 32), (64, 32, 1))):
            b.dense(f"d{level}.fc{i}", a, co)

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        x = ad.as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"discriminator expects {self.input_shape}, got {x.shape[1:]}")
        self.passes += 1
        p = self.store.params
        pre = f"d{self.level}"
        h = x
        if self.level == "out":
            for i in range(4):
                h = ad.relu(ad.conv2d(h, p[f"{pre}.conv{i}.w"], p[f"{pre}.conv{i}.b"], stride=2, pad=1))
        h = ad.reshape(h, (h.shape[0], -1))
        n_fc = 4 if self.level == "int" else 3
        for i in range(n_fc):
            h = ad.dense(h, p[f"{pre}.fc{i}.w"], p[f"{pre}.fc{i}.b"])
            h = ad.relu(h) if i < n_fc - 1 else ad.sigmoid(h)
        return h


def discriminators_for(model: LocalizationModel, levels, n_frames: int, seed: int = 0):
    """Build the discriminators named in ``levels`` (subset of ``int``/``out``)."""
    out = {}
    if "int" in levels:
        probe = model.encoding(np.zeros((1, model.cfg.n_arrays, model.cfg.in_channels, n_frames, model.cfg.band_bins)))
        out["int"] = Discriminator("int", probe.shape[1:], seed)
    if "out" in levels:
        out["out"] = Discriminator("out", model.cfg.grid.shape + (1,), seed)
    return out


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def config_header(mc: ModelConfig) -> dict:
    """Model configuration as checkpoint header entries."""
    h = {f"model.{f}": json.dumps(getattr(mc, f)) for f in mc.__dataclass_fields__ if f != "grid"}
    h.update({f"grid.{k}": json.dumps(getattr(mc.grid, k)) for k in GRID_KEYS})
    return h


def config_from_header(header: dict) -> ModelConfig:
    kw = {k[6:]: _tuplify(json.loads(v)) for k, v in header.items() if k.startswith("model.")}
    g = {k[5:]: _tuplify(json.loads(v)) for k, v in header.items() if k.startswith("grid.")}
    return ModelConfig(**kw, grid=GridSpec(**g) if g else ARRAY_GRID)
