"""Supervised, adversarial and layout training loops.

Adaptation methods
------------------
``S``           source-only supervised training (lower bound)
``GRint``       gradient reversal against an encoder-level discriminator
``LFint``       label flipping against an encoder-level discriminator
``GRout``       gradient reversal against a heatmap-level discriminator
``LFout``       label flipping against a heatmap-level discriminator
``GRintGRout``  both discriminators, gradient reversal
``LFintLFout``  both discriminators, label flipping

Target-domain data enters only through its features; its labels are never
read, so passing ``dataset.without_labels()`` changes nothing.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import evaluation, seeding
from .model import Discriminator, LocalizationModel, ModelConfig, config_header, discriminators_for

METHODS = ("S", "GRint", "LFint", "GRout", "LFout", "GRintGRout", "LFintLFout")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_grl: float = 1.0
    # the encoder-level domain gradient is two orders larger than the task
    # gradient on shared weights; larger weights stall the task at the
    # all-background plateau
    w_int: float = 1e-4
    w_out: float = 1e-3
    seed: int = 0
    # seeds of a multi-run grid; ``seed`` is the one a single run uses
    seeds: tuple = (0,)
    eval_every: int = 1
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if min(self.w_int, self.w_out, self.lambda_grl) < 0:
            raise ValueError("loss weights and lambda_grl must be >= 0")

    @classmethod
    def desk(cls, **kw):
        """Laptop-scale preset; a larger step size makes up for fewer updates."""
        return replace(cls(epochs=60, batch_size=64, lr=1e-3, seeds=(0, 1, 2)), **kw)


class Adam:
    def __init__(self, store: ad.ParamStore, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg

    def step(self, names=None):
        c = self.cfg
        ad.adam_step(self.store, c.lr, c.beta1, c.beta2, c.eps, names)


def _stores(*objs):
    return [o.store for o in objs]


def _zero(*objs):
    for s in _stores(*objs):
        s.zero_grad()


def _task_forward(model: LocalizationModel, batch):
    """Heatmap and, for the adaptation model, the encoding it came from."""
    if model.variant == "adaptation":
        enc = model.encoding(batch["features"])
        return model.decode(enc), enc
    return model.forward(batch["features"], batch.get("rel_poses")), None


def _labels(batch):
    return batch["labels"][..., None]


def _attachment(model, level, batch, cache=None):
    """Discriminator input for ``level``; reuses ``cache = (heatmap, encoding)`` when given."""
    if cache is None:
        cache = _task_forward(model, batch)
    heat, enc = cache
    return enc if level == "int" else heat


def supervised_step(model: LocalizationModel, batch, opt: Adam) -> float:
    """One Adam step on the heatmap MSE; returns the loss."""
    model.store.zero_grad()
    heat, _ = _task_forward(model, batch)
    loss = ad.mse_loss(heat, _labels(batch))
    ad.backward(loss)
    opt.step()
    return float(loss.data)


def _domain_loss(p_src, p_tgt, src_label, tgt_label):
    return ad.add(ad.bce_loss(p_src, src_label), ad.bce_loss(p_tgt, tgt_label))


def discriminator_step(disc: Discriminator, model: LocalizationModel, src_batch, tgt_batch, opt_d: Adam) -> float:
    """Train ``disc`` to tell source (1) from target (0) on frozen features."""
    g_s = _attachment(model, disc.level, src_batch).detach()
    g_t = _attachment(model, disc.level, tgt_batch).detach()
    disc.store.zero_grad()
    p = disc(ad.concat_batch([g_s, g_t]))
    n = g_s.shape[0]
    loss = _domain_loss(ad.rows(p, 0, n), ad.rows(p, n, p.shape[0]), 1.0, 0.0)
    ad.backward(loss)
    opt_d.step()
    return float(loss.data)


def generator_adversarial_loss(model, discs: dict, src_batch, tgt_batch, weights: dict, flip=True, lam=1.0):
    """Task loss plus weighted domain terms, built as one graph.

    With ``flip`` the domain labels are swapped (source 0, target 1) and the
    graph is descended directly; otherwise the features pass through gradient
    reversal and the true labels are used. Returns ``(total, task, {level: domain})``.
    """
    src_cache = _task_forward(model, src_batch)
    task = ad.mse_loss(src_cache[0], _labels(src_batch))
    tgt_cache = _task_forward(model, tgt_batch)
    total = task
    parts = {}
    for level, disc in discs.items():
        g_s = _attachment(model, level, src_batch, src_cache)
        g_t = _attachment(model, level, tgt_batch, tgt_cache)
        both = ad.concat_batch([g_s, g_t])
        if not flip:
            both = ad.grad_reverse(both, lam)
        p = disc(both)
        n = g_s.shape[0]
        labels = (0.0, 1.0) if flip else (1.0, 0.0)
        dom = _domain_loss(ad.rows(p, 0, n), ad.rows(p, n, p.shape[0]), *labels)
        parts[level] = dom
        total = ad.add(total, ad.mul(dom, weights.get(level, 1.0)))
    return total, task, parts


def generator_adversarial_step_labelflip(model, discs: dict, src_batch, tgt_batch, opt_g: Adam, weights: dict):
    """Descend the task loss plus the label-flipped domain loss on the model
    parameters only; discriminator parameters stay untouched."""
    _zero(model, *discs.values())
    total, task, parts = generator_adversarial_loss(model, discs, src_batch, tgt_batch, weights, flip=True)
    ad.backward(total)
    opt_g.step()
    _zero(*discs.values())
    return float(task.data), {k: float(v.data) for k, v in parts.items()}


def grl_joint_step(model, discs: dict, src_batch, tgt_batch, opt_g: Adam, opt_ds: dict, weights: dict, lam=1.0):
    """One joint descent step through gradient reversal: discriminators learn
    the domain split while the reversed gradient pushes the generator against it."""
    _zero(model, *discs.values())
    total, task, parts = generator_adversarial_loss(model, discs, src_batch, tgt_batch, weights, flip=False, lam=lam)
    ad.backward(total)
    opt_g.step()
    for level in discs:
        opt_ds[level].step()
    return float(task.data), {k: float(v.data) for k, v in parts.items()}


# ---- batching ----


def make_batch(dataset, idx, with_labels=True):
    idx = np.asarray(idx)
    b = {"features": dataset.features[idx], "rel_poses": dataset.relative_poses()[idx]}
    if with_labels:
        if dataset.labels is None:
            raise ValueError("training needs a labelled source dataset")
        b["labels"] = dataset.labels[idx]
    return b


class _Batcher:
    """Per-epoch shuffles keyed by ``(seed, stream, epoch)``, so a resumed run
    sees the same batches as an uninterrupted one."""

    def __init__(self, dataset, seed, stream, batch_size, with_labels):
        self.ds = dataset
        self.seed = seed
        self.stream = stream
        self.bs = batch_size
        self.with_labels = with_labels
        self.rel = dataset.relative_poses()

    def epoch(self, e, n_steps=None):
        n = len(self.ds)
        perm = seeding.rng(self.seed, self.stream, e).permutation(n)
        steps = n_steps if n_steps is not None else math.ceil(n / self.bs)
        for s in range(steps):
            idx = np.take(perm, np.arange(s * self.bs, (s + 1) * self.bs) % n) if n_steps is not None else perm[s * self.bs : (s + 1) * self.bs]
            b = {"features": self.ds.features[idx], "rel_poses": self.rel[idx]}
            if self.with_labels:
                b["labels"] = self.ds.labels[idx]
            yield b

    def steps(self):
        return math.ceil(len(self.ds) / self.bs)


# ---- runs ----


@dataclass
class TrainResult:
    model: LocalizationModel
    discs: dict
    history: list = field(default_factory=list)
    seconds: float = 0.0


def _levels(method):
    return [lv for lv in ("int", "out") if lv in method]


def _validate(model, val, cfg, epoch, row):
    keys = ("precision", "recall", "f1", "rmse")
    if val is None or (epoch + 1) % cfg.eval_every and epoch + 1 != cfg.epochs:
        row.update({f"val_{k}": None for k in keys})
        return
    rep = evaluation.evaluate_dataset(model, val, batch_size=cfg.eval_batch_size)
    row.update({f"val_{k}": rep[k] for k in keys})


def _ckpt_header(kind, name, epoch, cfg, model_cfg):
    return {"kind": kind, "name": name, "epoch": epoch, "seed": cfg.seed, "variant": model_cfg.variant, **config_header(model_cfg)}


def save_run(path, result: TrainResult, kind, name, epoch, cfg: TrainConfig):
    """Model, discriminators and their optimiser state in one checkpoint."""
    merged = ad.ParamStore()
    for prefix, store in [("", result.model.store)] + [(f"disc.{k}/", d.store) for k, d in result.discs.items()]:
        for n, t in store:
            merged.params[prefix + n] = t
        for n, st in store.state.items():
            merged.state[prefix + n] = st
    ad.save_checkpoint(path, merged, _ckpt_header(kind, name, epoch, cfg, result.model.cfg))


def load_run(path, result: TrainResult):
    """Restore parameters and optimiser state saved by :func:`save_run`; returns the header."""
    header, entries = ad.load_checkpoint(path)
    for prefix, store in [("", result.model.store)] + [(f"disc.{k}/", d.store) for k, d in result.discs.items()]:
        for n, t in store:
            key = prefix + n
            if key not in entries:
                raise KeyError(f"checkpoint lacks parameter {key!r}")
            if entries[key].shape != t.shape:
                raise ValueError(f"checkpoint shape mismatch for {key!r}")
            t.data = entries[key].copy()
            if f"adam.t/{key}" in entries:
                store.state[n] = {
                    "t": int(entries[f"adam.t/{key}"][0]),
                    "m": entries[f"adam.m/{key}"].copy(),
                    "v": entries[f"adam.v/{key}"].copy(),
                }
    return header


def _run(kind, name, result, cfg, epochs_fn, val, history_path, ckpt_path, log):
    start = 0
    if ckpt_path is not None and Path(ckpt_path).exists():
        header = load_run(ckpt_path, result)
        start = int(header.get("epoch", 0))
        if history_path is not None and Path(history_path).exists():
            result.history = [json.loads(l) for l in Path(history_path).read_text().splitlines() if l.strip()][:start]
            _write_history(history_path, result.history)
    elif history_path is not None:
        Path(history_path).write_text("")
    t0 = time.time()
    for epoch in range(start, cfg.epochs):
        row = {"epoch": epoch + 1, **epochs_fn(epoch)}
        _validate(result.model, val, cfg, epoch, row)
        result.history.append(row)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if ckpt_path is not None:
            save_run(ckpt_path, result, kind, name, epoch + 1, cfg)
        if log:
            log(row)
    result.seconds = time.time() - t0
    return result


def _write_history(path, rows):
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def train_adaptation(
    method: str,
    source,
    target,
    cfg: TrainConfig,
    model_cfg: Optional[ModelConfig] = None,
    val=None,
    history_path=None,
    ckpt_path=None,
    log=None,
) -> TrainResult:
    """Train the adaptation model with ``method`` on labelled ``source`` and
    unlabelled ``target`` data."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if source.labels is None:
        raise ValueError("the source dataset must be labelled")
    model_cfg = replace(model_cfg or ModelConfig(), variant="adaptation", seed=cfg.seed)
    model = LocalizationModel(model_cfg)
    levels = _levels(method)
    if levels and target is None:
        raise ValueError(f"method {method} needs target-domain data")
    n_frames = source.features.shape[3]
    discs = discriminators_for(model, levels, n_frames, seed=cfg.seed)
    opt_g = Adam(model.store, cfg)
    opt_ds = {k: Adam(d.store, cfg) for k, d in discs.items()}
    weights = {"int": cfg.w_int, "out": cfg.w_out}
    src = _Batcher(source, cfg.seed, "batches/source", cfg.batch_size, True)
    tgt = _Batcher(target, cfg.seed, "batches/target", cfg.batch_size, False) if levels else None
    flip = method.startswith("LF")

    def one_epoch(e):
        lm, ld = [], {k: [] for k in levels}
        tgt_iter = tgt.epoch(e, src.steps()) if tgt else None
        for sb in src.epoch(e):
            if not levels:
                lm.append(supervised_step(model, sb, opt_g))
                continue
            tb = next(tgt_iter)
            if flip:
                for lv in levels:
                    ld[lv].append(discriminator_step(discs[lv], model, sb, tb, opt_ds[lv]))
                m, _ = generator_adversarial_step_labelflip(model, discs, sb, tb, opt_g, weights)
            else:
                m, parts = grl_joint_step(model, discs, sb, tb, opt_g, opt_ds, weights, cfg.lambda_grl)
                for lv in levels:
                    ld[lv].append(parts[lv])
            lm.append(m)
        return {"loss_m": _mean(lm), "loss_d_int": _mean(ld.get("int", [])), "loss_d_out": _mean(ld.get("out", []))}

    result = TrainResult(model, discs)
    return _run("adaptation", method, result, cfg, one_epoch, val, history_path, ckpt_path, log)


def train_layout(
    variant: str,
    data,
    cfg: TrainConfig,
    model_cfg: Optional[ModelConfig] = None,
    val=None,
    history_path=None,
    ckpt_path=None,
    log=None,
) -> TrainResult:
    """Supervised training of a two-array layout variant."""
    if data.labels is None:
        raise ValueError("layout training needs labels")
    model = LocalizationModel(replace(model_cfg or ModelConfig(), variant=variant, seed=cfg.seed))
    if variant == "adaptation":
        raise ValueError("use train_adaptation for the adaptation model")
    opt = Adam(model.store, cfg)
    src = _Batcher(data, cfg.seed, "batches/layout", cfg.batch_size, True)

    def one_epoch(e):
        losses = [supervised_step(model, b, opt) for b in src.epoch(e)]
        return {"loss_m": _mean(losses), "loss_d_int": None, "loss_d_out": None}

    return _run("layout", variant, TrainResult(model, {}), cfg, one_epoch, val, history_path, ckpt_path, log)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
