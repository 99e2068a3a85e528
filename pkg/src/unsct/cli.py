"""Command-line entry point: ``unsct {synth,train,eval,infer,loss-compare,ablation}``.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .net import ConfigError
from .phantom import CLINICAL_TRAIN, CLINICAL_VAL, PhantomConfig, build_dataset, check_config_bounds

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 2, 3


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"override {p!r} must look like key=value")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args):
    over = _overrides(args.set)
    if getattr(args, "data", None):
        over["data_dir"] = json.dumps(args.data)
    if getattr(args, "out", None):
        over["out_dir"] = json.dumps(args.out)
    return load_config(args.config, over)


def cmd_synth(args) -> int:
    try:
        cfg = PhantomConfig(image_size=(args.size, args.size), spacing=(args.spacing, args.spacing), seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    bad = check_config_bounds(cfg)
    if bad:
        raise ConfigError(f"phantom ranges can push landmarks {bad} outside the image")
    n_ut, n_uv = args.n_unstructured_train, args.n_unstructured_val
    if args.unstructured_frac is not None:
        if not 0 <= args.unstructured_frac <= 1:
            raise ConfigError("--unstructured-frac must lie in [0, 1]")
        n_ut = round(args.unstructured_frac * args.n_train) if n_ut is None else n_ut
        n_uv = round(args.unstructured_frac * args.n_val) if n_uv is None else n_uv
    try:
        m = build_dataset(cfg, Path(args.out), args.n_train, args.n_val, n_ut, n_uv)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"wrote {len(m.train)} train / {len(m.val)} val samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    ledger = train(_run_config(args), log_every=1)
    last = ledger.rows[-1]
    print(f"done: {len(ledger.rows)} epochs, final val MRE {last['val_mre']:.3f}, "
          f"best epoch {ledger.best_epoch}, checkpoint {ledger.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_checkpoint

    _, ckpt_cfg = load_checkpoint(args.checkpoint)
    over = _overrides(args.set)
    if args.data:
        over["data_dir"] = json.dumps(args.data)
    cfg = ckpt_cfg.replace(**over)
    report = evaluate(args.checkpoint, args.split, not args.no_ue, cfg=cfg, out_dir=Path(args.out), maps=args.maps)
    for r in report.rows():
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .train import infer

    paths = []
    for p in map(Path, args.images):
        paths.extend(sorted(p.glob("*.png")) if p.is_dir() else [p])
    if not paths:
        raise ConfigError("no input images found")
    infer(args.checkpoint, paths, Path(args.out), ue_enabled=not args.no_ue)
    print(f"wrote predictions for {len(paths)} images to {args.out}")
    return EXIT_OK


def cmd_loss_compare(args) -> int:
    from .train import loss_comparison

    summary = loss_comparison(_run_config(args), args.threshold)
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_ablation(args) -> int:
    from .train import ablation, ablation_markdown

    rows = ablation(_run_config(args))
    print(ablation_markdown(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unsct", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--train", "--n-train", dest="n_train", type=int, default=CLINICAL_TRAIN)
    s.add_argument("--val", "--n-val", dest="n_val", type=int, default=CLINICAL_VAL)
    s.add_argument("--unstructured-frac", type=float, default=None,
                   help="fraction of each split that is degraded (default: clinical split ratio)")
    s.add_argument("--n-unstructured-train", type=int, default=None)
    s.add_argument("--n-unstructured-val", type=int, default=None)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--spacing", type=float, default=1.0, help="mm per pixel")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    def run_args(p):
        p.add_argument("--config", type=Path, default=None, help="TOML or JSON run config")
        p.add_argument("--data", default=None, help="dataset directory (overrides data_dir)")
        p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. network.srf_enabled=false")

    t = sub.add_parser("train", help="train one model")
    run_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--out", required=True)
    e.add_argument("--no-ue", action="store_true", help="keep all 24 decoded landmarks")
    e.add_argument("--maps", "--dump-uncertainty", dest="maps", action="store_true",
                   help="write uncertainty overlay PNGs")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict landmarks for PNG images")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--no-ue", action="store_true")
    i.add_argument("images", nargs="+", help="PNG files or directories")
    i.set_defaults(func=cmd_infer)

    lc = sub.add_parser("loss-compare", help="masked AWing vs MSE heatmap loss")
    run_args(lc)
    lc.add_argument("--threshold", type=float, default=4.0, help="val MRE target for convergence speed")
    lc.set_defaults(func=cmd_loss_compare)

    ab = sub.add_parser("ablation", help="SRF on/off x UE on/off grid")
    run_args(ab)
    ab.set_defaults(func=cmd_ablation)
    return ap


def main(argv: list[str] | None = None) -> int:
    from .train import DivergenceError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
