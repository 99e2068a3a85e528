"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-6 and 11 are exact or property checks and run in about a minute.
Criteria 7-10 train small models on a 128x128 phantom dataset (nine runs over
three seeds, shared through a session cache) and take roughly half an hour on
one CPU thread. Set ``UNSCT_ACCEPT_EPOCHS`` to change the training length.
"""
import filecmp
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import brute_mre, brute_nme, brute_pcc, brute_sdr, dense_projection, smooth_field
from unsct.config import RunConfig
from unsct.encoding import encode_targets
from unsct.landmarks import mirror_landmarks
from unsct.losses import AwingParams, awing, awing_constants, awing_grad, hybrid_loss, masked_awing, paf_mse
from unsct.metrics import consistency_stats, icc21, mre, nme, sdr
from unsct.net import NetworkConfig, UnsctNet
from unsct.phantom import PhantomConfig, build_dataset, generate_phantom, make_unstructured
from unsct.train import epochs_to_reach, evaluate, train
from unsct.uncertainty import aggregate_and_suppress, decode_landmarks, projection_weight

F64 = torch.float64
SEEDS = (0, 1, 2)
EPOCHS = int(os.environ.get("UNSCT_ACCEPT_EPOCHS", "30"))

# Shrout & Fleiss (1979) 6 targets x 4 judges; ICC(2,1) = 0.29
SHROUT_FLEISS = np.array([[9, 2, 5, 8], [6, 1, 3, 2], [8, 4, 6, 8],
                          [7, 1, 2, 6], [10, 5, 6, 9], [6, 2, 4, 7]], dtype=float)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check(fn, x, eps=1e-5):
    """Worst relative error between autograd and central differences of scalar ``fn`` at ``x``.

    The step sits near the cube root of float64 machine epsilon, which balances
    truncation against cancellation for central differences.
    """
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    an = x.grad.detach().view(-1)
    worst = 0.0
    with torch.no_grad():
        flat = x.detach().view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = fn(flat.view_as(x)).item()
            flat[i] = old - eps
            down = fn(flat.view_as(x)).item()
            flat[i] = old
            worst = max(worst, rel_err((up - down) / (2 * eps), an[i].item()))
    return worst


def awing_inputs(g, shape, theta):
    """gt in [0,1] and differences drawn on both sides of the seam, away from kinks."""
    gt = torch.rand(shape, generator=g, dtype=F64)
    small = 1e-3 + (theta - 2e-3) * torch.rand(shape, generator=g, dtype=F64)
    large = theta + 1e-3 + 2.0 * torch.rand(shape, generator=g, dtype=F64)
    pick = torch.rand(shape, generator=g, dtype=F64) < 0.5
    sign = torch.where(torch.rand(shape, generator=g, dtype=F64) < 0.5, -1.0, 1.0).to(F64)
    return gt + sign * torch.where(pick, small, large), gt, pick


# -- criterion 1 -------------------------------------------------------------

def test_gradients_match_finite_differences(verdict):
    t0 = time.perf_counter()
    p = AwingParams()
    g = torch.Generator().manual_seed(0)
    worst = {"awing_log": 0.0, "awing_linear": 0.0, "awing_closed_form": 0.0, "masked_awing": 0.0,
             "paf_mse": 0.0, "hybrid": 0.0}
    n_inputs = 100
    for _ in range(n_inputs):
        pred, gt, pick = awing_inputs(g, (2, 3, 4, 4), p.theta)
        mask = (torch.rand(gt.shape, generator=g, dtype=F64) < 0.3).to(F64)
        pred_paf = torch.randn(2, 4, 4, 4, generator=g, dtype=F64)
        gt_paf = torch.randn(2, 4, 4, 4, generator=g, dtype=F64)
        for branch, sel in (("awing_log", pick), ("awing_linear", ~pick)):
            worst[branch] = max(worst[branch], fd_check(lambda x: (awing(x, gt, p) * sel).sum(), pred))
        fd = fd_check(lambda x: awing(x, gt, p).sum(), pred)
        worst["awing_closed_form"] = max(worst["awing_closed_form"], fd, float(
            (awing_grad(pred, gt, p) - torch.func.grad(lambda x: awing(x, gt, p).sum())(pred)).abs().max()))
        worst["masked_awing"] = max(worst["masked_awing"], fd_check(lambda x: masked_awing(x, gt, mask, p), pred))
        worst["paf_mse"] = max(worst["paf_mse"], fd_check(lambda x: paf_mse(x, gt_paf), pred_paf))
        worst["hybrid"] = max(worst["hybrid"],
                              fd_check(lambda x: hybrid_loss(x, gt, mask, pred_paf, gt_paf)[0], pred),
                              fd_check(lambda x: hybrid_loss(pred, gt, mask, x, gt_paf)[0], pred_paf))

    # end to end through a tiny network, every parameter perturbed
    torch.manual_seed(0)
    tiny = NetworkConfig(stages=1, widths=(4,), blocks=1, stride=2, num_landmarks=3, num_edges=2)
    net = UnsctNet(tiny).double().train()
    x = torch.rand(2, 1, 8, 8, generator=g, dtype=F64)
    hm_t = torch.rand(2, 3, 4, 4, generator=g, dtype=F64)
    paf_t = torch.randn(2, 4, 4, 4, generator=g, dtype=F64)
    mask = (hm_t > 0.5).to(F64)

    def net_loss():
        hm, paf = net(x)
        return hybrid_loss(hm, hm_t, mask, paf, paf_t)[0]

    net.zero_grad()
    net_loss().backward()
    net_worst = 0.0
    with torch.no_grad():
        for prm in net.parameters():
            flat, grad = prm.view(-1), prm.grad.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + 1e-6
                up = net_loss().item()
                flat[i] = old - 1e-6
                down = net_loss().item()
                flat[i] = old
                net_worst = max(net_worst, rel_err((up - down) / 2e-6, grad[i].item(), 1e-4))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and net_worst <= 1e-3 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, "loss and network gradients",
            ok, f"{n_inputs} inputs; {detail}; network {net_worst:.1e}; {elapsed:.0f}s")


# -- criterion 2 -------------------------------------------------------------

def test_adaptive_wing_seam(verdict):
    rng = np.random.default_rng(2)
    worst_value, worst_slope = 0.0, 0.0
    h = 1e-6
    n_draws = 50
    for _ in range(n_draws):
        p = AwingParams(omega=rng.uniform(1, 30), theta=rng.uniform(0.1, 1.0), epsilon=rng.uniform(0.5, 2.0),
                        alpha=rng.uniform(1.5, 3.0))
        gt = torch.tensor([rng.uniform(0, 1)], dtype=F64)
        a, c = awing_constants(gt, p)
        log_v = p.omega * np.log1p((p.theta / p.epsilon) ** (p.alpha - gt.item()))
        lin_v = a.item() * p.theta - c.item()
        worst_value = max(worst_value, abs(log_v - lin_v))
        for sign in (1.0, -1.0):
            pred = gt + sign * torch.tensor([p.theta - h, p.theta, p.theta + h], dtype=F64)
            d = (pred - gt).abs()
            loss = awing(pred, gt, p)
            left = ((loss[1] - loss[0]) / (d[1] - d[0])).item()
            right = ((loss[2] - loss[1]) / (d[2] - d[1])).item()
            worst_slope = max(worst_slope, rel_err(left, a.item()), rel_err(right, a.item()))
    verdict(2, "Adaptive Wing seam", worst_value <= 1e-9 and worst_slope <= 1e-4,
            f"{n_draws} draws; value gap {worst_value:.1e}, slope rel err {worst_slope:.1e}")


# -- criterion 3 -------------------------------------------------------------

def test_projection_weight_against_dense_oracle(verdict):
    rng = np.random.default_rng(3)
    stride, grid = 4, 32
    errs, lin = [], 0.0
    while len(errs) < 200:
        field = smooth_field(rng, grid, grid)
        a, b = rng.uniform(0, stride * (grid - 1), (2, 2))
        length = np.linalg.norm(b - a)
        if length < 4:
            continue
        ref = dense_projection(field, a, b, stride)
        if abs(ref) < 0.1 * length:
            # relative error is undefined where the projection integrates to ~0
            continue
        w, _ = projection_weight(field, a, b, 32, stride)
        errs.append(abs(w - ref) / abs(ref))
        k = rng.uniform(-5, 5)
        wk, _ = projection_weight(k * field, a, b, 32, stride)
        lin = max(lin, abs(wk - k * w) / max(1.0, abs(k * w)))
    worst = max(errs)
    verdict(3, "projection line integral", worst <= 0.01 and lin <= 1e-9,
            f"{len(errs)} fields; worst rel err vs n=4096 {worst:.2e}; linearity {lin:.1e}")


# -- criterion 4 -------------------------------------------------------------

def test_metrics_against_brute_force(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 30))
        g = rng.uniform(0, 200, (n, 2))
        p = g + rng.normal(0, rng.uniform(0.5, 6), g.shape)
        sp = rng.uniform(0.1, 2.0, (n, 2))
        d = rng.uniform(20, 120, n)
        missed = int(rng.integers(0, 4))
        pcc, _, _ = consistency_stats(p, g)
        pairs = [(nme(p, g, d), sum(brute_nme([pi], [gi], di) for pi, gi, di in zip(p, g, d)) / n),
                 (mre(p, g, sp), sum(brute_mre([pi], [gi], si) for pi, gi, si in zip(p, g, sp)) / n),
                 (sdr(p, g, sp, 2.0, missed),
                  sum(brute_sdr([pi], [gi], si, 2.0) for pi, gi, si in zip(p, g, sp)) / (n + missed)),
                 (pcc, brute_pcc(list(p[:, 0]) + list(p[:, 1]), list(g[:, 0]) + list(g[:, 1])))]
        worst = max(worst, max(abs(x - y) for x, y in pairs))
    icc = icc21(SHROUT_FLEISS)
    three_four_five = (mre(np.array([[3.0, 4.0]]), np.zeros((1, 2)), (1.0, 1.0)),
                       mre(np.array([[1.0, 1.0]]), np.zeros((1, 2)), (3.0, 4.0)))
    ok = worst <= 1e-9 and abs(icc - 0.29) <= 1e-3 and three_four_five == (5.0, 5.0)
    verdict(4, "metric oracles", ok,
            f"200 cases worst |diff| {worst:.1e}; ICC(2,1) {icc:.4f} vs 0.29; 3-4-5 MRE {three_four_five}")


# -- criterion 5 -------------------------------------------------------------

def test_encode_decode_round_trip(verdict, skeleton):
    cfg = PhantomConfig()
    stride = 4
    worst = 0.0
    for i in range(200):
        a = generate_phantom(cfg, 50_000 + i)
        if i % 2:
            a = make_unstructured(a, np.random.default_rng(i))
        t = encode_targets(a, skeleton)
        dec = {d.global_id: d for d in decode_landmarks(t.heatmaps, stride)}
        for gid in np.flatnonzero(a.visible):
            worst = max(worst, float(np.hypot(dec[gid].x - a.landmarks[gid, 0], dec[gid].y - a.landmarks[gid, 1])))
    bound = stride / 2 + 0.5
    verdict(5, "encode/decode round trip", worst <= bound,
            f"200 phantoms; worst visible-landmark error {worst:.3f} px (bound {bound})")


# -- criterion 6 -------------------------------------------------------------

def test_ue_discriminates_spurious_peaks(verdict, skeleton):
    cfg = PhantomConfig()
    stride = 4
    wins, true_keep, spur_drop = 0, [], []
    trials = 100
    for t in range(trials):
        rng = np.random.default_rng([6, t])
        a = make_unstructured(generate_phantom(cfg, 70_000 + t), rng)
        tb = encode_targets(a, skeleton)
        hm = tb.heatmaps.copy()
        h, w = hm.shape[1:]
        yy, xx = np.mgrid[0:h, 0:w]
        for gid in a.missing_ids():
            cx, cy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
            hm[gid] = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 8.0)
        res = aggregate_and_suppress(decode_landmarks(hm, stride), skeleton, tb.paf, stride=stride)
        v = {r.global_id: r for r in res.verdicts}
        true_w = [v[g].weight for g in np.flatnonzero(a.visible)]
        spur_w = [v[g].weight for g in a.missing_ids()]
        wins += max(spur_w) < min(true_w)
        true_keep += [v[g].keep for g in np.flatnonzero(a.visible)]
        spur_drop += [not v[g].keep for g in a.missing_ids()]
    rate, recall, supp = wins / trials, float(np.mean(true_keep)), float(np.mean(spur_drop))
    verdict(6, "uncertainty ranks spurious below true", rate >= 0.95 and recall >= 0.95 and supp >= 0.8,
            f"strict ranking in {wins}/{trials} trials; recall {recall:.3f}; suppression {supp:.3f}")


# -- criteria 7-10: desk-scale training ---------------------------------------

@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_data")
    build_dataset(PhantomConfig(image_size=(128, 128)), root)
    return root


@pytest.fixture(scope="session")
def desk_runs(desk_data, tmp_path_factory):
    """Lazily trained runs keyed by (variant, seed); variants: awing, mse, srf_off."""
    cache, timings = {}, {}
    base = tmp_path_factory.mktemp("desk_runs")

    def get(variant, seed):
        key = (variant, seed)
        if key not in cache:
            over = {"data_dir": str(desk_data), "out_dir": str(base / f"{variant}_{seed}"),
                    "epochs": EPOCHS, "seed": seed}
            if variant == "mse":
                over["heatmap_loss"] = "mse"
            if variant == "srf_off":
                over["network.srf_enabled"] = False
            t0 = time.perf_counter()
            cache[key] = train(RunConfig().replace(**over))
            timings[key] = time.perf_counter() - t0
        return cache[key]

    get.timings = timings
    get.data = desk_data
    return get


def ue_pair(desk_runs, seed):
    """UE-on and UE-off reports for the same final checkpoint."""
    ckpt = desk_runs("awing", seed).last_checkpoint
    return evaluate(ckpt, "val", True), evaluate(ckpt, "val", False)


@pytest.mark.slow
def test_awing_converges_faster_than_mse(verdict, desk_runs):
    wins, parts = 0, []
    for seed in SEEDS:
        aw, ms = desk_runs("awing", seed), desk_runs("mse", seed)
        ea, em = epochs_to_reach(aw.column("val_mre"), 4.0), epochs_to_reach(ms.column("val_mre"), 4.0)
        fa, fm = aw.rows[-1]["val_mre"], ms.rows[-1]["val_mre"]
        faster = ea is not None and (em is None or ea <= em)
        win = faster and fa < fm
        wins += win
        parts.append(f"seed {seed}: epochs to 4px {ea} vs {em}, final {fa:.2f} vs {fm:.2f}")
    minutes = sum(v for (k, _), v in desk_runs.timings.items() if k in ("awing", "mse")) / 60
    verdict(7, "masked AWing vs MSE convergence", wins >= 2 and minutes < 60,
            f"{wins}/3 seeds; " + "; ".join(parts) + f"; {minutes:.1f} min")


@pytest.mark.slow
def test_ue_cuts_unstructured_error(verdict, desk_runs):
    wins, parts = 0, []
    for seed in SEEDS:
        on, off = ue_pair(desk_runs, seed)
        ratio = on["unstructured"].MRE / off["unstructured"].MRE
        wins += ratio <= 0.6
        parts.append(f"seed {seed}: {on['unstructured'].MRE:.3f}/{off['unstructured'].MRE:.3f} = {ratio:.2f}")
    verdict(8, "UE on vs off, unstructured MRE ratio <= 0.6", wins >= 2, f"{wins}/3 seeds; " + "; ".join(parts))


@pytest.mark.slow
def test_ue_keeps_structured_error(verdict, desk_runs):
    worst, parts = 0.0, []
    for seed in SEEDS:
        on, off = ue_pair(desk_runs, seed)
        change = abs(on["structured"].MRE - off["structured"].MRE) / off["structured"].MRE
        worst = max(worst, change)
        parts.append(f"seed {seed}: {on['structured'].MRE:.3f} vs {off['structured'].MRE:.3f}")
    verdict(9, "UE on vs off, structured MRE within 15%", worst <= 0.15,
            f"worst change {100 * worst:.1f}%; " + "; ".join(parts))


@pytest.mark.slow
def test_srf_lowers_validation_error(verdict, desk_runs):
    wins, parts = 0, []
    for seed in SEEDS:
        on, off = desk_runs("awing", seed).rows[-1]["val_mre"], desk_runs("srf_off", seed).rows[-1]["val_mre"]
        wins += on < off
        parts.append(f"seed {seed}: {on:.3f} vs {off:.3f}")
    verdict(10, "SRF on vs off, full validation MRE", wins >= 2,
            f"{wins}/3 seeds at {EPOCHS} epochs; " + "; ".join(parts))


# -- criterion 11 ------------------------------------------------------------

def test_reproducibility(verdict, tmp_path):
    data_a, data_b = tmp_path / "data_a", tmp_path / "data_b"
    for root in (data_a, data_b):
        build_dataset(PhantomConfig(image_size=(64, 64), seed=11), root, 6, 3, 2, 1)
    cmp = filecmp.dircmp(data_a, data_b)
    same_data = not cmp.diff_files and not cmp.left_only and not cmp.right_only and all(
        not (s.diff_files or s.left_only or s.right_only) for s in cmp.subdirs.values())

    def run(name):
        cfg = RunConfig().replace(**{"data_dir": str(data_a), "out_dir": str(tmp_path / name), "epochs": 2,
                                     "batch_size": 2, "network.stages": 2, "network.widths": [8, 16],
                                     "network.blocks": 1})
        rows = train(cfg).rows
        return [{k: v for k, v in r.items() if k != "seconds"} for r in rows]

    same_ledger = run("r1") == run("r2")
    cfg = PhantomConfig()
    same_mirror = True
    for i in range(100):
        a = generate_phantom(cfg, 90_000 + i)
        if i % 2:
            a = make_unstructured(a, np.random.default_rng(i))
        same_mirror &= mirror_landmarks(mirror_landmarks(a)) == a
    verdict(11, "reproducibility", same_data and same_ledger and same_mirror,
            f"dataset rebuild identical {same_data}; ledgers identical {same_ledger}; "
            f"mirror involution exact on 100 phantoms {same_mirror}")
