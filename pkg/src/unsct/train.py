"""Training loop, evaluation and the comparison experiments."""
from __future__ import annotations

import csv
import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader

from .clinical import clinical_parameters, write_clinical_csv
from .config import RunConfig, UEConfig, dump_toml, from_dict
from .data import LandmarkDataset, load_split
from .encoding import encode_targets
from .landmarks import AnnotatedImage, build_default_skeleton
from .losses import hybrid_loss, masked_awing
from .metrics import MetricsReport, stratified_report
from .net import ConfigError, UnsctNet, layer_manifest
from .uncertainty import aggregate_and_suppress, all_kept, decode_landmarks, render_uncertainty_map, ue_report_rows

log = logging.getLogger(__name__)

LEDGER_COLUMNS = ("epoch", "train_heatmap", "train_awing", "train_paf_mse", "train_total",
                  "val_heatmap", "val_paf_mse", "val_total", "val_mre", "val_sdr", "seconds")


class DivergenceError(RuntimeError):
    pass


@dataclass
class RunLedger:
    out_dir: Path
    rows: list[dict] = field(default_factory=list)
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None
    best_epoch: int = 0

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    @classmethod
    def load(cls, out_dir: Path) -> "RunLedger":
        out_dir = Path(out_dir)
        with open(out_dir / "ledger.csv") as fh:
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
        best = min(rows, key=lambda r: r["val_mre"])["epoch"] if rows else 0
        return cls(out_dir, rows, out_dir / "best.pt", out_dir / "last.pt", best)


def set_determinism(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.deterministic = deterministic
        torch.backends.cudnn.benchmark = False


def _require_dataset(data_dir: str) -> Path:
    root = Path(data_dir)
    if not (root / "manifest.json").exists():
        raise ConfigError(f"dataset {root} has no manifest.json (run `unsct synth` first)")
    return root


# -- inference ---------------------------------------------------------------

Predictor = Callable[[list[AnnotatedImage]], list[tuple[np.ndarray, np.ndarray]]]


@torch.no_grad()
def predict(model: UnsctNet, images: list[np.ndarray], batch_size: int = 8) -> list[tuple[np.ndarray, np.ndarray]]:
    """Heatmaps and PAF for each image, as float64 arrays on the output grid."""
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.stack(images[i:i + batch_size]).astype(np.float32))[:, None]
        hm, paf = model(x)
        out.extend((h.double().numpy(), p.double().numpy()) for h, p in zip(hm, paf))
    return out


def model_predictor(model: UnsctNet, batch_size: int = 8) -> Predictor:
    return lambda samples: predict(model, [a.pixels for a in samples], batch_size)


def oracle_predictor(cfg: RunConfig) -> Predictor:
    """Stand-in for a checkpoint that outputs the encoded ground-truth targets."""
    skeleton = build_default_skeleton()

    def run(samples):
        return [(t.heatmaps.astype(np.float64), t.paf.astype(np.float64))
                for t in (encode_targets(a, skeleton, cfg.encoding) for a in samples)]
    return run


def load_checkpoint(path: Path) -> tuple[UnsctNet, RunConfig]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = from_dict(blob["config"])
    model = UnsctNet(cfg.network)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, cfg


@dataclass
class ScoredSample:
    annotation: AnnotatedImage
    decoded: list
    ue: object | None  # UEResult when UE is enabled
    kept: dict


def score_outputs(samples: list[AnnotatedImage], outputs: list[tuple[np.ndarray, np.ndarray]], stride: int,
                  ue: UEConfig | None) -> list[ScoredSample]:
    """Decode every output; with ``ue`` set, drop landmarks the PAF does not support."""
    skeleton = build_default_skeleton()
    scored = []
    for a, (hm, paf) in zip(samples, outputs):
        decoded = decode_landmarks(hm, stride)
        if ue is None:
            scored.append(ScoredSample(a, decoded, None, all_kept(decoded)))
        else:
            res = aggregate_and_suppress(decoded, skeleton, paf, ue.tau, ue.eps, stride, ue.n_samples)
            scored.append(ScoredSample(a, decoded, res, res.kept))
    return scored


def report_for(scored: list[ScoredSample], out_csv: Path | None = None) -> MetricsReport:
    return stratified_report([(s.annotation, s.kept) for s in scored], out_csv)


# -- training ----------------------------------------------------------------

def _write_csv_row(path: Path, columns, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        if new:
            w.writeheader()
        w.writerow(row)


def _save_checkpoint(path: Path, model: UnsctNet, cfg: RunConfig, epoch: int, val_mre: float) -> None:
    torch.save({"config": cfg.to_dict(), "state_dict": model.state_dict(), "epoch": epoch, "val_mre": val_mre}, path)


def _val_pass(model, cfg, val_set, val_samples):
    """Validation loss components plus Ori-mode MRE/SDR over all visible landmarks."""
    loader = DataLoader(val_set, batch_size=cfg.batch_size, shuffle=False)
    sums = {"heatmap": 0.0, "paf_mse": 0.0, "total": 0.0}
    outputs = []
    model.eval()
    with torch.no_grad():
        for img, hm, paf, mask in loader:
            p_hm, p_paf = model(img)
            _, comp = hybrid_loss(p_hm, hm, mask, p_paf, paf, cfg.weights, cfg.awing, cfg.heatmap_loss)
            for k in sums:
                sums[k] += comp[k] * len(img)
            outputs.extend((h.double().numpy(), p.double().numpy()) for h, p in zip(p_hm, p_paf))
    n = len(val_set)
    scored = score_outputs(val_samples, outputs, cfg.network.stride, None)
    report = report_for(scored)
    return {k: v / n for k, v in sums.items()}, report["all"].MRE, report["all"].SDR


def train(cfg: RunConfig, log_every: int = 0) -> RunLedger:
    """Train one model; everything goes under ``cfg.out_dir``.

    Raises :class:`DivergenceError` as soon as a training loss is non-finite.
    """
    root = _require_dataset(cfg.data_dir)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("ledger.csv", "steps.csv"):
        (out / name).unlink(missing_ok=True)
    (out / "config.toml").write_text(dump_toml(cfg))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))

    set_determinism(cfg.seed, cfg.deterministic)
    skeleton = build_default_skeleton()
    train_samples = load_split(root, "train", cfg.max_train)
    val_samples = load_split(root, "val")
    aug = cfg.augment
    train_set = LandmarkDataset(train_samples, skeleton, cfg.encoding, augment=True, flip_prob=aug.flip_prob,
                                noise_max=aug.noise_max, seed=cfg.seed)
    val_set = LandmarkDataset(val_samples, skeleton, cfg.encoding)
    gen = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(train_set, batch_size=cfg.batch_size, shuffle=True, generator=gen)

    model = UnsctNet(cfg.network)
    model.check_input(torch.zeros(1, cfg.network.in_channels, *train_samples[0].pixels.shape))
    (out / "layers.txt").write_text(layer_manifest(model))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    ledger = RunLedger(out)
    best = math.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        sums = {"heatmap": 0.0, "awing": 0.0, "paf_mse": 0.0, "total": 0.0}
        seen = 0
        for img, hm, paf, mask in loader:
            p_hm, p_paf = model(img)
            loss, comp = hybrid_loss(p_hm, hm, mask, p_paf, paf, cfg.weights, cfg.awing, cfg.heatmap_loss)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss {float(loss.detach())} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            comp["awing"] = (comp["heatmap"] if cfg.heatmap_loss == "awing"
                             else float(masked_awing(p_hm.detach(), hm, mask, cfg.awing, cfg.weights.w_mask)))
            _write_csv_row(out / "steps.csv", ("step", "epoch", "awing", "paf_mse", "total", "heatmap"),
                           {"step": step, "epoch": epoch, **comp})
            for k in sums:
                sums[k] += comp[k] * len(img)
            seen += len(img)
        val_loss, val_mre, val_sdr = _val_pass(model, cfg, val_set, val_samples)
        row = {"epoch": epoch, "train_heatmap": sums["heatmap"] / seen, "train_awing": sums["awing"] / seen,
               "train_paf_mse": sums["paf_mse"] / seen, "train_total": sums["total"] / seen,
               "val_heatmap": val_loss["heatmap"], "val_paf_mse": val_loss["paf_mse"],
               "val_total": val_loss["total"], "val_mre": val_mre, "val_sdr": val_sdr,
               "seconds": time.perf_counter() - t0}
        ledger.rows.append(row)
        _write_csv_row(out / "ledger.csv", LEDGER_COLUMNS, row)
        if val_mre < best:
            best = val_mre
            ledger.best_epoch = epoch
            _save_checkpoint(out / "best.pt", model, cfg, epoch, val_mre)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d  loss %.4f  val MRE %.3f", epoch, row["train_total"], val_mre)
    _save_checkpoint(out / "last.pt", model, cfg, cfg.epochs, ledger.rows[-1]["val_mre"])
    ledger.best_checkpoint = out / "best.pt" if (out / "best.pt").exists() else out / "last.pt"
    ledger.last_checkpoint = out / "last.pt"
    return ledger


def train_mre(model: UnsctNet, cfg: RunConfig) -> float:
    """Ori-mode MRE on the (unaugmented) training images."""
    samples = load_split(Path(cfg.data_dir), "train", cfg.max_train)
    scored = score_outputs(samples, model_predictor(model, cfg.batch_size)(samples), cfg.network.stride, None)
    return report_for(scored)["all"].MRE


# -- evaluation --------------------------------------------------------------

def evaluate(checkpoint: Path | None, split: str = "val", ue_enabled: bool = True, *, cfg: RunConfig | None = None,
             out_dir: Path | None = None, maps: bool = False, predictor: Predictor | None = None) -> MetricsReport:
    """Score a checkpoint (or an arbitrary ``predictor``) on a dataset split.

    Writes ``report.csv``, ``clinical.csv`` and, with UE on, ``ue.jsonl`` under
    ``out_dir`` when given; ``maps`` adds one uncertainty overlay PNG per image.
    """
    if predictor is None:
        model, ckpt_cfg = load_checkpoint(checkpoint)
        cfg = cfg or ckpt_cfg
        predictor = model_predictor(model, cfg.batch_size)
    if cfg is None:
        raise ConfigError("a RunConfig is required when evaluating a bare predictor")
    root = _require_dataset(cfg.data_dir)
    samples = load_split(root, split)
    scored = score_outputs(samples, predictor(samples), cfg.network.stride, cfg.ue if ue_enabled else None)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    report = report_for(scored, out / "report.csv" if out else None)
    if out:
        write_clinical_csv(out / "clinical.csv",
                           [(s.annotation.sample_id, clinical_parameters(s.kept, s.annotation.spacing))
                            for s in scored])
        (out / "report.json").write_text(json.dumps({"ue_enabled": ue_enabled, "split": split,
                                                     "config": cfg.to_dict(), "metrics": report.to_dict()},
                                                    indent=1, default=float))
        if ue_enabled:
            with open(out / "ue.jsonl", "w") as fh:
                for s in scored:
                    for r in ue_report_rows(s.annotation.sample_id, s.decoded, s.ue):
                        fh.write(json.dumps(r) + "\n")
        if maps and ue_enabled:
            (out / "maps").mkdir(exist_ok=True)
            for s in scored:
                rgb = render_uncertainty_map(s.decoded, s.ue.verdicts, s.annotation.pixels)
                Image.fromarray(rgb).save(out / "maps" / f"{s.annotation.sample_id}.png")
    return report


def infer(checkpoint: Path, images: list[Path], out_dir: Path, ue_enabled: bool = True) -> list[dict]:
    """Predict landmarks for standalone PNG files; writes JSON and overlay PNGs."""
    model, cfg = load_checkpoint(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    skeleton = build_default_skeleton()
    results = []
    for path in images:
        pixels = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
        (hm, paf), = predict(model, [pixels])
        decoded = decode_landmarks(hm, cfg.network.stride)
        res = aggregate_and_suppress(decoded, skeleton, paf, cfg.ue.tau, cfg.ue.eps, cfg.network.stride,
                                     cfg.ue.n_samples)
        kept = res.kept if ue_enabled else all_kept(decoded)
        rec = {"image": str(path), "landmarks": [
            {"global_id": v.global_id, "x": d.x, "y": d.y, "weight": v.weight, "uncertainty": v.uncertainty,
             "kept": v.global_id in kept} for v, d in zip(res.verdicts, decoded)]}
        (out / f"{Path(path).stem}.json").write_text(json.dumps(rec, indent=1))
        Image.fromarray(render_uncertainty_map(decoded, res.verdicts, pixels, debug=True)).save(
            out / f"{Path(path).stem}_uncertainty.png")
        results.append(rec)
    return results


# -- experiments -------------------------------------------------------------

def epochs_to_reach(values: list[float], threshold: float) -> int | None:
    """1-based epoch at which ``values`` first drops to ``threshold`` or below."""
    for i, v in enumerate(values, 1):
        if v <= threshold:
            return i
    return None


def loss_comparison(cfg: RunConfig, threshold_px: float = 4.0) -> dict:
    """Two identically seeded runs differing only in the heatmap loss."""
    out = Path(cfg.out_dir)
    ledgers = {}
    for kind in ("awing", "mse"):
        ledgers[kind] = train(cfg.replace(heatmap_loss=kind, out_dir=str(out / kind)))
    n = cfg.epochs
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "awing_heatmap_loss", "mse_heatmap_loss", "awing_val_mre", "mse_val_mre"])
        for i in range(n):
            a, m = ledgers["awing"].rows[i], ledgers["mse"].rows[i]
            w.writerow([i + 1, a["train_heatmap"], m["train_heatmap"], a["val_mre"], m["val_mre"]])
    _plot_curves(ledgers, out / "curves.png", threshold_px)
    summary = {kind: {"epochs_to_threshold": epochs_to_reach(l.column("val_mre"), threshold_px),
                      "final_val_mre": l.rows[-1]["val_mre"]} for kind, l in ledgers.items()}
    summary["threshold_px"] = threshold_px
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def _plot_curves(ledgers: dict, path: Path, threshold: float) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    for kind, label in (("awing", "masked AWing"), ("mse", "MSE")):
        ep = ledgers[kind].column("epoch")
        ax0.plot(ep, ledgers[kind].column("train_heatmap"), label=label)
        ax1.plot(ep, ledgers[kind].column("val_mre"), label=label)
    ax0.set(xlabel="epoch", ylabel="heatmap loss", yscale="log")
    ax1.axhline(threshold, color="grey", lw=0.8, ls="--")
    ax1.set(xlabel="epoch", ylabel="val MRE (mm)", yscale="log")
    ax1.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


ABLATION_COLUMNS = ("model", "ue", "subset", "NME", "MRE", "SDR", "PCC", "ICC", "T-Test",
                    "matched", "missed", "spurious")


def ablation(cfg: RunConfig, split: str = "val") -> list[dict]:
    """{SRF on/off} x {UE on/off}: two trainings, four scored evaluations."""
    out = Path(cfg.out_dir)
    rows = []
    for srf in (True, False):
        name = "srf_on" if srf else "srf_off"
        run_cfg = cfg.replace(**{"network.srf_enabled": srf, "out_dir": str(out / name)})
        ledger = train(run_cfg)
        model, _ = load_checkpoint(ledger.last_checkpoint)
        samples = load_split(Path(cfg.data_dir), split)
        outputs = model_predictor(model, cfg.batch_size)(samples)
        for ue in (False, True):
            scored = score_outputs(samples, outputs, cfg.network.stride, cfg.ue if ue else None)
            report = report_for(scored, out / name / f"report_ue_{'on' if ue else 'off'}.csv")
            for r in report.rows():
                rows.append({"model": name, "ue": "on" if ue else "off",
                             **{k: r[k] for k in ABLATION_COLUMNS[2:]}})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(ABLATION_COLUMNS))
        w.writeheader()
        w.writerows(rows)
    (out / "ablation.md").write_text(ablation_markdown(rows))
    return rows


def ablation_markdown(rows: list[dict]) -> str:
    head = "| " + " | ".join(ABLATION_COLUMNS) + " |"
    sep = "|" + "---|" * len(ABLATION_COLUMNS)
    lines = [head, sep]
    for r in rows:
        cells = [f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c]) for c in ABLATION_COLUMNS]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
