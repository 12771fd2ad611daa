"""Directional reproductions shared by the scripts and the acceptance suite.

``layout_comparison`` trains the three layout variants on multi-layout and
single-layout data and scores them on unseen layouts. ``adaptation_comparison``
trains adaptation methods on an anechoic source domain against a reverberant,
noisy target domain and scores them on held-out target data.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import dataset as D
from . import evaluation, train

LAYOUT_VARIANTS = ("plain", "fc-pose", "explicit-transform")


@dataclass
class Scale:
    n_train: int = 2000
    n_test: int = 200
    epochs: int = 60
    seeds: tuple = (0, 1, 2)
    batch_size: int = 64
    lr: float = 1e-3


def _cached(cfg: D.DatasetConfig, cache_dir):
    """Generate once per config; later calls read the stored file."""
    if cache_dir is None:
        return D.build_dataset(cfg)
    key = f"{cfg.mode}-{cfg.n_samples}-{cfg.seed}-a{cfg.absorption}-o{cfg.max_order}-snr{cfg.snr_db}.ssl2"
    path = Path(cache_dir) / key
    if path.exists():
        return D.read_dataset(path)
    return D.generate_dataset(cfg, path)


def _median(xs):
    return statistics.median(xs)


def _summarise(runs, keys=("precision", "recall", "f1", "rmse")):
    out = {}
    for name, reps in runs.items():
        out[name] = {k: _median([r[k] for r in reps if r[k] is not None]) if any(r[k] is not None for r in reps) else None for k in keys}
    return out


def layout_comparison(scale: Scale = Scale(), cache_dir=None, log=print, data_seed=100):
    t0 = time.time()
    multi = _cached(D.DatasetConfig(mode="randomized-layout", n_samples=scale.n_train, seed=data_seed), cache_dir)
    single = _cached(D.DatasetConfig(mode="fixed-layout", n_samples=scale.n_train, seed=data_seed + 1), cache_dir)
    test = _cached(D.DatasetConfig(mode="randomized-layout", n_samples=scale.n_test, seed=data_seed + 2), cache_dir)
    runs = {}
    for train_name, data in (("multi", multi), ("single", single)):
        variants = LAYOUT_VARIANTS if train_name == "multi" else ("fc-pose", "explicit-transform")
        for v in variants:
            for s in scale.seeds:
                cfg = train.TrainConfig(epochs=scale.epochs, batch_size=scale.batch_size, lr=scale.lr, seed=s, eval_every=10**9)
                res = train.train_layout(v, data, cfg)
                rep = evaluation.evaluate_dataset(res.model, test)
                runs.setdefault(f"{train_name}/{v}", []).append(rep)
                if log:
                    log(f"{train_name}/{v} seed={s} f1={rep['f1']:.3f} ({res.seconds:.0f}s)")
    summary = _summarise(runs)
    f = {k: v["f1"] for k, v in summary.items()}
    checks = {
        "multi: F1(ET) >= F1(fc) >= F1(plain)": f["multi/explicit-transform"] >= f["multi/fc-pose"] >= f["multi/plain"],
        "multi: F1(ET) - F1(plain) >= 0.10": f["multi/explicit-transform"] - f["multi/plain"] >= 0.10,
        "single: F1(ET) - F1(fc) >= 0.10": f["single/explicit-transform"] - f["single/fc-pose"] >= 0.10,
    }
    return {"summary": summary, "checks": checks, "seconds": time.time() - t0, "runs": runs}


ADAPTATION_METHODS = ("S", "GRint", "GRout", "GRintGRout")


def adaptation_comparison(scale: Scale = Scale(), cache_dir=None, log=print, data_seed=200, methods=ADAPTATION_METHODS):
    t0 = time.time()
    source = _cached(D.DatasetConfig(mode="fixed-layout", n_samples=scale.n_train, seed=data_seed), cache_dir)
    target = _cached(D.target_domain_config(n_samples=scale.n_train, seed=data_seed + 1), cache_dir).without_labels()
    test = _cached(D.target_domain_config(n_samples=scale.n_test, seed=data_seed + 2), cache_dir)
    runs = {}
    for m in methods:
        for s in scale.seeds:
            cfg = train.TrainConfig(epochs=scale.epochs, batch_size=scale.batch_size, lr=scale.lr, seed=s, eval_every=10**9)
            res = train.train_adaptation(m, source, target, cfg)
            rep = evaluation.evaluate_dataset(res.model, test, evaluation.SYNTHETIC)
            runs.setdefault(m, []).append(rep)
            if log:
                log(f"{m} seed={s} P={rep['precision']:.3f} R={rep['recall']:.3f} F1={rep['f1']:.3f} ({res.seconds:.0f}s)")
    summary = _summarise(runs)
    checks = {}
    if {"S", "GRintGRout"} <= summary.keys():
        checks["recall(GRintGRout) - recall(S) >= 0.05"] = summary["GRintGRout"]["recall"] - summary["S"]["recall"] >= 0.05
    if {"GRint", "GRout", "GRintGRout"} <= summary.keys():
        best = max(summary["GRint"]["f1"], summary["GRout"]["f1"])
        checks["F1(GRintGRout) >= max(F1(GRint), F1(GRout)) - 0.02"] = summary["GRintGRout"]["f1"] >= best - 0.02
    return {"summary": summary, "checks": checks, "seconds": time.time() - t0, "runs": runs}


def scale_from_args(args) -> Scale:
    s = Scale()
    kw = {k: getattr(args, k) for k in ("n_train", "n_test", "epochs", "batch_size", "lr") if getattr(args, k, None) is not None}
    if getattr(args, "seeds", None) is not None:
        kw["seeds"] = tuple(range(args.seeds))
    return replace(s, **kw)


def write_result(path, result):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(result, indent=2, sort_keys=True, default=str) + "\n")
