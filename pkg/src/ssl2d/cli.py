"""Command-line front end: ``gen-data``, ``train``, ``eval``, ``gradcheck``, ``report``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 check failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import dataset as D
from . import evaluation, gradcheck, model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
CHECKPOINT = "checkpoint.sslw"
HISTORY = "history.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", choices=("paper", "desk"), help="built-in defaults to start from")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def _load_config(args):
    return C.load(args.config, args.preset, args.overrides)


# ---- gen-data ----


def cmd_gen_data(args):
    cfg = _load_config(args)
    kw = {}
    if args.mode:
        kw["mode"] = args.mode
    if args.n is not None:
        kw["n_samples"] = args.n
    dcfg = cfg.dataset_config(**kw)
    if args.target_domain:
        dcfg = replace(dcfg, **D.TARGET_DOMAIN)
    ds = D.generate_dataset(dcfg, args.out)
    layouts = len(set(ds.layout_hashes()))
    n_src = sum(len(s) for s in ds.sources)
    print(f"wrote {args.out}: {len(ds)} samples, {layouts} layouts, {n_src} sources, mode={dcfg.mode}, seed={dcfg.seed}")
    print(f"manifest: {D.manifest_path(args.out)}")
    return EXIT_OK


# ---- train ----


def _train_cell(job):
    """One (name, seed) grid cell; runs in a worker process when ``--jobs > 1``."""
    kind, name, seed, paths, cfg_text, out_dir = job
    cfg = C.parse(cfg_text)
    tcfg = cfg.train_config(seed=seed)
    mcfg = cfg.model_config()
    data = D.read_dataset(paths["data"])
    val = D.read_dataset(paths["val"]) if paths.get("val") else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg_text)
    log = lambda row: print(f"[{name} seed={seed}] epoch {row['epoch']} loss_m={row['loss_m']:.5f} val_f1={row['val_f1']}", flush=True)
    common = dict(val=val, history_path=out / HISTORY, ckpt_path=out / CHECKPOINT, log=log)
    if kind == "adaptation":
        target = D.read_dataset(paths["target"]).without_labels() if paths.get("target") else None
        res = train.train_adaptation(name, data, target, tcfg, mcfg, **common)
    else:
        res = train.train_layout(name, data, tcfg, mcfg, **common)
    if val is not None:
        rep = evaluation.evaluate_dataset(res.model, val, cfg.eval)
        evaluation.write_metrics_json(out / "metrics.json", rep)
    return str(out)


def cmd_train(args):
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    names = args.method or []
    variants = args.variant or []
    if not names and not variants:
        raise UsageError("give at least one --method or --variant")
    bad = [m for m in names if m not in train.METHODS] + [v for v in variants if v not in model.VARIANTS[1:]]
    if bad:
        raise UsageError(f"unknown method/variant: {', '.join(bad)}")
    if any(m != "S" for m in names) and not args.target:
        raise UsageError("adversarial methods need --target")
    paths = {"data": args.data, "target": args.target, "val": args.val}
    for k, p in paths.items():
        if p and not Path(p).exists():
            raise FileNotFoundError(f"{k} dataset not found: {p}")
    seeds = [cfg.seed] if args.seeds is None else [cfg.seed + i for i in range(args.seeds)]
    cfg_text = C.serialize(cfg)
    out = Path(args.out or cfg.out)
    jobs = [("adaptation", m, s, paths, cfg_text, out / m / f"seed{s}") for m in names for s in seeds]
    jobs += [("layout", v, s, paths, cfg_text, out / v / f"seed{s}") for v in variants for s in seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            done = list(ex.map(_train_cell, jobs))
    else:
        done = [_train_cell(j) for j in jobs]
    for d in done:
        print(f"finished {d}")
    return EXIT_OK


# ---- eval ----


def load_model(path) -> model.LocalizationModel:
    from . import autodiff as ad

    header, _ = ad.load_checkpoint(path)
    m = model.LocalizationModel(model.config_from_header(header))
    res = train.TrainResult(m, {})
    train.load_run(path, res)
    return m


def cmd_eval(args):
    cfg = _load_config(args)
    proto = cfg.eval
    if args.resolution is not None:
        proto = replace(proto, resolution=args.resolution)
    if args.peak_thresh is not None:
        proto = replace(proto, peak_thresh=args.peak_thresh)
    if args.nms_radius is not None:
        proto = replace(proto, nms_radius=args.nms_radius)
    if args.average:
        proto = replace(proto, average=args.average)
    ds = D.read_dataset(args.data)
    if args.oracle:
        who, name = "oracle", args.name or "oracle"
    elif args.checkpoint:
        who, name = load_model(args.checkpoint), args.name or Path(args.checkpoint).parent.as_posix()
    else:
        raise UsageError("give --checkpoint or --oracle")
    rep = evaluation.evaluate_dataset(who, ds, proto)
    out = Path(args.out) if args.out else (Path(args.checkpoint).parent / "metrics.json" if args.checkpoint else None)
    if out is not None:
        evaluation.write_metrics_json(out, rep)
    if args.csv:
        evaluation.append_csv_row(args.csv, {"name": name, **rep})
    print(json.dumps({k: rep[k] for k in evaluation.REPORT_KEYS}, sort_keys=True))
    return EXIT_OK


# ---- gradcheck ----


def cmd_gradcheck(args):
    results, secs = gradcheck.run_suite(seed=args.seed, log=print if args.verbose else None)
    failed = [r for r in results if not r.ok]
    worst = max(r.rel_error for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {secs:.1f}s (worst rel. error {worst:.2e})")
    for r in failed:
        print(f"FAIL {r.op} {r.shape} rel={r.rel_error:.2e}")
    return EXIT_CHECK if failed else EXIT_OK


# ---- report ----


def _fmt(v):
    if v is None:
        return "-"
    return f"{v:.3f}" if isinstance(v, float) else str(v)


def collect(run_dir):
    """One row per ``metrics.json`` below ``run_dir``, with the last history epoch."""
    run_dir = Path(run_dir)
    rows = []
    for mpath in sorted(run_dir.rglob("metrics.json")):
        rep = json.loads(mpath.read_text())
        rel = mpath.parent.relative_to(run_dir)
        row = {"name": rel.as_posix() or ".", **rep}
        hist = mpath.parent / HISTORY
        if hist.exists():
            lines = [l for l in hist.read_text().splitlines() if l.strip()]
            row["epochs"] = json.loads(lines[-1])["epoch"] if lines else 0
        rows.append(row)
    return rows


def _grouped(rows):
    """Median over seed directories ``<name>/seed<k>``."""
    groups = {}
    for r in rows:
        parts = r["name"].split("/")
        key = "/".join(parts[:-1]) if parts[-1].startswith("seed") and len(parts) > 1 else r["name"]
        groups.setdefault(key, []).append(r)
    out = []
    for key, rs in groups.items():
        row = {"name": key, "runs": len(rs)}
        for k in ("precision", "recall", "f1", "rmse"):
            vals = [x[k] for x in rs if x.get(k) is not None]
            row[k] = float(np.median(vals)) if vals else None
        out.append(row)
    return out


def cmd_report(args):
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    rows = _grouped(collect(run_dir))
    if not rows:
        raise FileNotFoundError(f"no metrics.json files under {run_dir}")
    cols = ["name", "runs", "precision", "recall", "f1", "rmse"]
    csv_path = Path(args.csv) if args.csv else run_dir / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    table = [cols] + [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(t[i]) for t in table) for i in range(len(cols))]
    text = "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(t, widths))) for t in table)
    (run_dir / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser():
    ap = _Parser(prog="ssl2d", description="Multi-source 2D sound localization lab")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize a dataset file")
    _add_common(g)
    g.add_argument("--mode", choices=D.MODES)
    g.add_argument("--n", type=int, help="number of samples")
    g.add_argument("--target-domain", action="store_true", help="reverberant, noisy target-domain settings")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train adaptation methods or layout variants")
    _add_common(t)
    t.add_argument("--method", action="append", help=f"one of {', '.join(train.METHODS)}")
    t.add_argument("--variant", action="append", help="plain, fc-pose or explicit-transform")
    t.add_argument("--data", required=True, help="labelled training set")
    t.add_argument("--target", help="unlabelled target-domain set")
    t.add_argument("--val", help="validation set scored every epoch")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seeds", type=int, help="run this many seeds from the master seed upward")
    t.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint (or the labels) on a dataset")
    _add_common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="score the ground-truth heatmaps")
    e.add_argument("--data", required=True)
    e.add_argument("--resolution", type=float)
    e.add_argument("--peak-thresh", type=float)
    e.add_argument("--nms-radius", type=float)
    e.add_argument("--average", choices=("micro", "macro"))
    e.add_argument("--out", help="metrics JSON path")
    e.add_argument("--csv", help="comparison table to append a row to")
    e.add_argument("--name", help="row label in the CSV")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("-v", "--verbose", action="store_true")
    c.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("report", help="collate metrics under a run directory")
    r.add_argument("run_dir")
    r.add_argument("--csv")
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if not getattr(args, "fn", None):
            ap.print_help(sys.stderr)
            return EXIT_USAGE
        return args.fn(args)
    except UsageError as e:
        print(f"ssl2d: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except C.ConfigError as e:
        print(f"ssl2d: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, D.PlacementError, KeyError) as e:
        print(f"ssl2d: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"ssl2d: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
