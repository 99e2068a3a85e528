"""SRF on/off x UE on/off grid over several seeds; writes one markdown table per seed."""
import argparse
import sys
from pathlib import Path

from unsct.config import load_config
from unsct.train import ablation, ablation_markdown


def parse():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=Path("configs/desk.toml"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/ablation")
    return ap.parse_args()


def main():
    args = parse()
    cfg = load_config(args.config)
    for seed in args.seeds:
        rows = ablation(cfg.replace(seed=seed, out_dir=f"{args.out}/seed{seed}"))
        print(f"## seed {seed}\n\n{ablation_markdown(rows)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
