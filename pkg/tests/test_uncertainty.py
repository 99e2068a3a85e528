import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import dense_projection, smooth_field
from unsct.landmarks import NUM_LANDMARKS, Side, SkeletonGraph, global_id
from unsct.uncertainty import (DecodedLandmark, DegenerateEdgeError, UncertaintyVerdict, aggregate_and_suppress,
                               bilinear, decode_landmarks, edge_weights, entropy_uncertainty, projection_weight,
                               render_uncertainty_map, unit_direction)


def constant_field(h, w, d, scale=1.0):
    f = np.zeros((2, h, w))
    f[0], f[1] = d[0] * scale, d[1] * scale
    return f


# -- decoding ----------------------------------------------------------------

def test_decode_quarter_offset():
    hm = np.zeros((1, 20, 20))
    hm[0, 10, 10] = 1.0
    hm[0, 11, 10] = 0.9
    hm[0, 9, 10] = 0.5
    d = decode_landmarks(hm, stride=1)[0]
    assert (d.x, d.y) == (10.0, 10.25)
    assert d.score == 1.0 and not d.flagged
    assert decode_landmarks(hm, stride=4)[0].y == 41.0


def test_decode_flat_channel_fallback():
    d = decode_landmarks(np.zeros((2, 8, 10)), stride=4)
    assert all(x.flagged and x.score == 0.0 for x in d)
    assert (d[0].x, d[0].y) == (4.5 * 4, 3.5 * 4)


def test_decode_no_shift_on_border():
    hm = np.zeros((1, 5, 5))
    hm[0, 0, 4] = 1.0
    hm[0, 1, 4] = 0.3
    d = decode_landmarks(hm, 1)[0]
    assert (d.x, d.y) == (4.0, 0.0)  # shift needs both neighbours


# -- direction and projection -------------------------------------------------

def test_unit_direction():
    assert np.allclose(unit_direction((0, 0), (3, 4)), (0.6, 0.8))
    assert np.allclose(unit_direction((3, 4), (0, 0)), (-0.6, -0.8))
    with pytest.raises(DegenerateEdgeError):
        unit_direction((1, 1), (1, 1))


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-100, 100), st.floats(-100, 100))
def test_unit_direction_is_unit(ax, ay, bx, by):
    if math.hypot(bx - ax, by - ay) < 1e-6:
        return
    assert abs(np.linalg.norm(unit_direction((ax, ay), (bx, by))) - 1) <= 1e-9


def test_projection_perfect_alignment():
    a, b = (10.0, 12.0), (50.0, 40.0)
    d = unit_direction(a, b)
    w, w_hat = projection_weight(constant_field(16, 16, d), a, b, stride=4)
    assert w_hat == pytest.approx(1.0, abs=0.02)
    assert w == pytest.approx(math.dist(a, b), rel=0.02)


def test_projection_orthogonal_is_zero():
    a, b = (4.0, 4.0), (40.0, 4.0)
    _, w_hat = projection_weight(constant_field(16, 16, (0.0, 1.0)), a, b, stride=4)
    assert w_hat == 0.0


def test_projection_half_field_matches_dense_oracle():
    a, b = (8.0, 30.0), (56.0, 30.0)  # horizontal, px; stride 1 grid
    f = np.zeros((2, 64, 64))
    f[0, :, :32] = 1.0  # first half of the segment only
    _, w_hat = projection_weight(f, a, b, stride=1)
    oracle = dense_projection(f, a, b) / math.dist(a, b)
    assert oracle == pytest.approx(0.5, abs=0.02)
    assert w_hat == pytest.approx(0.5, abs=0.02)


def test_negative_projection_clamps_to_zero():
    a, b = (4.0, 4.0), (40.0, 4.0)
    w, w_hat = projection_weight(constant_field(16, 16, (-1.0, 0.0)), a, b, stride=4)
    assert w < 0 and w_hat == 0.0


@settings(max_examples=40)
@given(st.integers(0, 100_000), st.floats(-5, 5))
def test_projection_is_linear(seed, alpha):
    rng = np.random.default_rng(seed)
    f = smooth_field(rng, 20, 20)
    a, b = rng.uniform(0, 76, 2), rng.uniform(0, 76, 2)
    if math.dist(a, b) < 1:
        return
    w1, _ = projection_weight(f, a, b, stride=4)
    w2, _ = projection_weight(alpha * f, a, b, stride=4)
    assert abs(w2 - alpha * w1) <= 1e-9 * max(1.0, abs(w1))


@settings(max_examples=40)
@given(st.integers(0, 100_000))
def test_projection_agrees_with_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    f = smooth_field(rng, 24, 24)
    a, b = rng.uniform(4, 90, 2), rng.uniform(4, 90, 2)
    if math.dist(a, b) < 8:
        return
    w, w_hat = projection_weight(f, a, b, n_samples=32, stride=4)
    ref = dense_projection(f, a, b, stride=4)
    assert 0.0 <= w_hat <= 1.0
    # relative agreement, with an absolute floor for near-zero integrals
    assert abs(w - ref) <= 0.01 * max(abs(ref), 0.1 * math.dist(a, b))


def test_projection_needs_two_samples():
    with pytest.raises(ValueError):
        projection_weight(np.zeros((2, 4, 4)), (0, 0), (1, 1), n_samples=1)


def test_bilinear_matches_grid_and_midpoints():
    f = np.arange(12, dtype=float).reshape(3, 4)
    assert bilinear(f, np.array([2.0]), np.array([1.0]))[0] == f[1, 2]
    assert bilinear(f, np.array([0.5]), np.array([0.5]))[0] == pytest.approx(f[:2, :2].mean())
    assert bilinear(f, np.array([10.0]), np.array([-3.0]))[0] == f[0, 3]


# -- entropy ------------------------------------------------------------------

def test_entropy_endpoints():
    assert entropy_uncertainty(1.0, 1e-6) == pytest.approx(-math.log(1 + 1e-6))
    assert entropy_uncertainty(0.0, 1e-6) == 0.0
    assert entropy_uncertainty(1 / math.e, 1e-12) == pytest.approx(1 / math.e, abs=1e-9)
    ws = np.linspace(0, 1, 1001)
    assert ws[np.argmax(entropy_uncertainty(ws, 1e-12))] == pytest.approx(1 / math.e, abs=1e-3)


# -- aggregation ----------------------------------------------------------------

def chain_setup(scales):
    """Left 2-3-4 chain; edge weights are set by scaling an aligned PAF."""
    sk = SkeletonGraph.from_category_pairs([(2, 3), (3, 4)])
    pos = {global_id(2, Side.LEFT): (8.0, 8.0), global_id(3, Side.LEFT): (40.0, 8.0),
           global_id(4, Side.LEFT): (40.0, 40.0)}
    decoded = [DecodedLandmark(g, *pos.get(g, (4.0 + g, 50.0)), score=1.0) for g in range(NUM_LANDMARKS)]
    paf = np.zeros((2 * sk.num_edges, 16, 16))
    for e in sk.edges:
        if e.side == Side.LEFT:
            d = unit_direction(pos[e.a], pos[e.b])
            s = scales[(e.a, e.b)]
            paf[2 * e.index], paf[2 * e.index + 1] = d[0] * s, d[1] * s
    return sk, decoded, paf


L2, L3, L4 = global_id(2, Side.LEFT), global_id(3, Side.LEFT), global_id(4, Side.LEFT)


def test_aggregate_mixed_edges():
    sk, decoded, paf = chain_setup({(L2, L3): 1.0, (L3, L4): 0.2})
    res = aggregate_and_suppress(decoded, sk, paf, tau=0.3, stride=4)
    v = {x.global_id: x for x in res.verdicts}
    assert v[L3].weight == pytest.approx(0.6, abs=0.02) and v[L3].keep
    assert v[L2].weight == pytest.approx(1.0, abs=0.02) and v[L2].keep
    assert v[L4].weight == pytest.approx(0.2, abs=0.02) and not v[L4].keep
    assert L4 in res.suppressed() and L4 not in res.kept


def test_aggregate_all_zero_edges_suppress():
    sk, decoded, paf = chain_setup({(L2, L3): 0.0, (L3, L4): 0.0})
    res = aggregate_and_suppress(decoded, sk, paf, tau=0.01, stride=4)
    for g in (L2, L3, L4):
        assert g not in res.kept


def test_landmark_without_edges_is_kept_unassessed():
    sk, decoded, paf = chain_setup({(L2, L3): 0.0, (L3, L4): 0.0})
    res = aggregate_and_suppress(decoded, sk, paf, stride=4)
    lone = global_id(9, Side.LEFT)
    v = next(x for x in res.verdicts if x.global_id == lone)
    assert v.keep and not v.assessed and lone in res.kept


def test_tau_range():
    sk, decoded, paf = chain_setup({(L2, L3): 1.0, (L3, L4): 1.0})
    for tau in (0.0, 1.0):
        with pytest.raises(ValueError):
            aggregate_and_suppress(decoded, sk, paf, tau=tau)


@settings(max_examples=30)
@given(st.integers(0, 100_000), st.floats(0.05, 0.95))
def test_verdicts_consistent_and_pure_filter(seed, tau):
    rng = np.random.default_rng(seed)
    from unsct.landmarks import build_default_skeleton
    sk = build_default_skeleton()
    decoded = [DecodedLandmark(g, *rng.uniform(0, 63, 2), score=1.0) for g in range(NUM_LANDMARKS)]
    paf = rng.normal(0, 0.7, (48, 16, 16))
    res = aggregate_and_suppress(decoded, sk, paf, tau=tau, stride=4)
    for v in res.verdicts:
        assert 0.0 <= v.weight <= 1.0
        assert v.keep == (v.weight >= tau)
        assert v.uncertainty == pytest.approx(-v.weight * math.log(v.weight + 1e-6))
        if v.keep:
            assert res.kept[v.global_id] == decoded[v.global_id].position
    # a lower threshold keeps a superset
    lower = aggregate_and_suppress(decoded, sk, paf, tau=tau / 2, stride=4)
    assert set(res.kept) <= set(lower.kept)
    assert np.all((res.edge_weights >= 0) & (res.edge_weights <= 1))


def test_degenerate_edge_weight_is_zero():
    sk, decoded, paf = chain_setup({(L2, L3): 1.0, (L3, L4): 1.0})
    decoded[L4] = DecodedLandmark(L4, *decoded[L3].position, score=1.0)
    ew = edge_weights(decoded, sk, paf, stride=4)
    idx = next(e.index for e in sk.edges if (e.a, e.b) == (L3, L4))
    assert ew[idx] == 0.0


# -- rendering -------------------------------------------------------------------

def test_render_brightness_and_size():
    img = np.full((40, 50), 0.5)
    decoded = [DecodedLandmark(0, 10, 10, 1.0), DecodedLandmark(1, 30, 20, 1.0)]
    verdicts = [UncertaintyVerdict(0, 1.0, 0.0, True), UncertaintyVerdict(1, 1.0, 0.0, True)]
    out = render_uncertainty_map(decoded, verdicts, img)
    assert out.shape == (40, 50, 3)
    assert tuple(out[10, 10]) == (255, 255, 255) and tuple(out[20, 30]) == (255, 255, 255)


def test_render_suppressed_box_only_in_debug():
    img = np.zeros((40, 40))
    decoded = [DecodedLandmark(0, 20, 20, 1.0)]
    verdicts = [UncertaintyVerdict(0, 0.1, 0.2, False)]
    dbg = render_uncertainty_map(decoded, verdicts, img, debug=True)
    clean = render_uncertainty_map(decoded, verdicts, img, debug=False)
    yellow = np.all(dbg == (255, 255, 0), axis=-1)
    assert yellow.any()
    assert not clean.any()
