"""Train plain / fc-pose / explicit-transform models and compare them on unseen layouts."""
import argparse

from ssl2d import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-train", type=int)
    ap.add_argument("--n-test", type=int)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--seeds", type=int, help="number of seeds, starting at 0")
    ap.add_argument("--cache", default="runs/cache")
    ap.add_argument("--out", default="runs/layout_comparison.json")
    args = ap.parse_args()
    res = experiments.layout_comparison(experiments.scale_from_args(args), cache_dir=args.cache)
    experiments.write_result(args.out, res)
    for k, v in res["summary"].items():
        print(f"{k:28s} F1={v['f1']:.3f} P={v['precision']:.3f} R={v['recall']:.3f}")
    for k, ok in res["checks"].items():
        print(("PASS " if ok else "FAIL ") + k)
    print(f"total {res['seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
