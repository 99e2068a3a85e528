"""Masked AWing vs MSE heatmap loss over several seeds; prints a per-seed summary."""
import argparse
import json
import sys
from pathlib import Path

from unsct.config import load_config
from unsct.train import loss_comparison


def parse():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=Path("configs/desk.toml"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--threshold", type=float, default=4.0)
    ap.add_argument("--out", default="runs/loss_comparison")
    return ap.parse_args()


def main():
    args = parse()
    cfg = load_config(args.config)
    wins = 0
    for seed in args.seeds:
        s = loss_comparison(cfg.replace(seed=seed, out_dir=f"{args.out}/seed{seed}"), args.threshold)
        aw, ms = s["awing"], s["mse"]
        faster = aw["epochs_to_threshold"] is not None and (
            ms["epochs_to_threshold"] is None or aw["epochs_to_threshold"] <= ms["epochs_to_threshold"])
        wins += faster and aw["final_val_mre"] < ms["final_val_mre"]
        print(f"seed {seed}: {json.dumps(s)}")
    print(f"AWing faster and lower on {wins}/{len(args.seeds)} seeds")
    return 0


if __name__ == "__main__":
    sys.exit(main())
