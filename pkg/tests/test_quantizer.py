import itertools
import math

import numpy as np
import pytest

from xfq.errors import QuantizationError
from xfq.quantizer import (
    Mode,
    QuantGroup,
    QuantizedLayer,
    filter_rows,
    group_errors,
    merge_groups,
    quantize_activation,
    quantize_group,
    quantize_layer,
    rows_to_weight,
    scale_stats,
)
from xfq.tensor import Tensor4, seeded_random_tensor


def brute_force_j(w):
    """Smallest ||w - a*b||^2 over every sign vector b with its best a = |w.b|/n, a >= 0."""
    n = w.size
    best = math.inf
    for bits in itertools.product((-1.0, 1.0), repeat=n):
        b = np.array(bits)
        a = max(float(w @ b) / n, 0.0)
        best = min(best, float(((w - a * b) ** 2).sum()))
    return best


def j_of(w, signs, alpha):
    return float(((w - alpha * signs) ** 2).sum())


def test_group_closed_form():
    signs, alpha = quantize_group([0.5, -1.5, 2.0, -1.0])
    assert signs.tolist() == [1, -1, 1, -1]
    assert alpha == 1.25
    w = np.array([0.5, -1.5, 2.0, -1.0])
    assert j_of(w, signs, alpha) <= brute_force_j(w) + 1e-12


def test_group_degenerate():
    signs, alpha = quantize_group(np.ones(9))
    assert signs.tolist() == [1] * 9 and alpha == 1.0
    signs, alpha = quantize_group(np.zeros(5))
    assert signs.tolist() == [1] * 5 and alpha == 0.0


def test_group_errors():
    with pytest.raises(QuantizationError):
        quantize_group([])
    with pytest.raises(QuantizationError):
        quantize_group([1.0, np.inf])


def test_group_beats_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(30):
        w = rng.standard_normal(rng.integers(1, 9))
        signs, alpha = quantize_group(w)
        assert j_of(w, signs, alpha) <= brute_force_j(w) + 1e-12


def test_layer_partition():
    w = seeded_random_tensor((1, 1, 3, 8), 1)
    q = quantize_layer(w, 2)
    assert [g.filter_range for g in q.groups] == [(0, 2), (2, 4), (4, 6), (6, 8)]
    q = quantize_layer(seeded_random_tensor((1, 1, 3, 5), 1), 2)
    assert len(q.groups) == 3 and q.groups[-1].beta_g == 1
    with pytest.raises(QuantizationError):
        quantize_layer(w, 0)


def test_beta_one_is_filterwise():
    w = seeded_random_tensor((3, 3, 4, 6), 2).data
    q = quantize_layer(w, 1)
    for i in range(6):
        expected = np.abs(w[..., i]).sum() / (3 * 3 * 4)
        assert abs(q.groups[i].alpha - expected) < 1e-15
        np.testing.assert_array_equal(q.groups[i].signs[0], np.where(filter_rows(w)[i] >= 0, 1, -1))


def test_group_alpha_is_group_l1_mean():
    rng = np.random.default_rng(8)
    for beta in (1, 2, 3, 5):
        w = rng.standard_normal((2, 3, 3, 7))
        q = quantize_layer(w, beta)
        rows = filter_rows(w)
        for g in q.groups:
            s, e = g.filter_range
            assert abs(g.alpha - quantize_group(rows[s:e])[1]) <= 1e-15


def test_filter_rows_round_trip():
    w = np.arange(2 * 3 * 4 * 5, dtype=float).reshape(2, 3, 4, 5)
    rows = filter_rows(w)
    assert rows.shape == (5, 24)
    # k_w fastest, then k_h, then i_c
    assert rows[0, :3].tolist() == [w[0, 0, 0, 0], w[0, 1, 0, 0], w[0, 2, 0, 0]]
    np.testing.assert_array_equal(rows_to_weight(rows, w.shape), w)


def test_dequantize_layout():
    w = seeded_random_tensor((2, 2, 3, 4), 3)
    q = quantize_layer(w, 2)
    d = q.dequantize().data
    for g in q.groups:
        s, e = g.filter_range
        np.testing.assert_array_equal(np.abs(d[..., s:e]), g.alpha)
        np.testing.assert_array_equal(np.sign(d[..., s:e]), np.where(w.data[..., s:e] >= 0, 1, -1))


def test_activation_examples():
    a = quantize_activation(np.array([1.0, -2.0, 3.0, -4.0]))
    assert a.signs.tolist() == [1, -1, 1, -1] and a.scale == 2.5
    neg = -np.abs(np.random.default_rng(0).standard_normal(20)) - 0.1
    a = quantize_activation(neg)
    assert (a.signs == -1).all() and abs(a.scale - np.abs(neg).mean()) < 1e-15


def test_activation_homogeneity():
    rng = np.random.default_rng(9)
    for _ in range(20):
        x = rng.standard_normal((4, 4, 3, 2))
        assert math.isclose(quantize_activation(-3.7 * x).scale, 3.7 * quantize_activation(x).scale, rel_tol=1e-14)
    with pytest.raises(QuantizationError):
        quantize_activation(np.array([1.0, np.nan]))


def test_merge_examples():
    signs = np.ones((1, 4), dtype=np.int8)
    fw = QuantizedLayer(
        (QuantGroup(signs, 0.4, (0, 1)), QuantGroup(signs, 0.6, (1, 2))), (1, 1, 4, 2), 1, Mode.BW
    )
    assert math.isclose(merge_groups(fw, 2).groups[0].alpha, 0.5, abs_tol=1e-16)
    assert merge_groups(fw, 1) == fw
    with pytest.raises(QuantizationError):
        merge_groups(merge_groups(fw, 2), 2)


@pytest.mark.parametrize("seed", range(10))
def test_merge_equals_direct(seed):
    rng = np.random.default_rng(seed)
    o_c = int(rng.integers(1, 13))
    w = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5)), o_c))
    beta = int(rng.integers(1, o_c + 2))
    merged = merge_groups(quantize_layer(w, 1), beta)
    direct = quantize_layer(w, beta)
    assert merged == direct
    for gm, gd in zip(merged.groups, direct.groups):
        np.testing.assert_array_equal(gm.signs, gd.signs)
        assert abs(gm.alpha - gd.alpha) <= 1e-15


def test_nested_partitions():
    rng = np.random.default_rng(4)
    for _ in range(20):
        w = rng.standard_normal((3, 3, 4, 8))
        j = [group_errors(w, quantize_layer(w, b)).sum() for b in (1, 2, 4, 8)]
        assert j[0] <= j[1] <= j[2] <= j[3]


def test_scale_stats_examples():
    signs = np.ones((1, 2), dtype=np.int8)
    flat = QuantizedLayer(tuple(QuantGroup(signs, 0.5, (i, i + 1)) for i in range(4)), (1, 1, 2, 4), 1, Mode.BW)
    st = scale_stats(flat)
    assert st.variance == 0.0 and (st.histogram > 0).sum() == 1
    two = QuantizedLayer((QuantGroup(signs, 0.4, (0, 1)), QuantGroup(signs, 0.6, (1, 2))), (1, 1, 2, 2), 1, Mode.BW)
    st = scale_stats(two)
    assert math.isclose(st.mean, 0.5) and st.max == 0.6 and st.min == 0.4


def test_scale_stats_sampled_variance():
    alphas = 0.5 + 0.01 * seeded_random_tensor((1, 1, 1, 10_000), 3, "normal").data.ravel()
    signs = np.ones((1, 1), dtype=np.int8)
    layer = QuantizedLayer(
        tuple(QuantGroup(signs, float(a), (i, i + 1)) for i, a in enumerate(alphas)), (1, 1, 1, 10_000), 1, Mode.BW
    )
    st = scale_stats(layer, bins=20)
    assert abs(st.variance - 1e-4) < 0.2e-4
    assert st.histogram.sum() == 10_000


def test_group_invariants():
    with pytest.raises(QuantizationError):
        QuantGroup(np.array([[1, 0]], dtype=np.int8), 1.0, (0, 1))
    with pytest.raises(QuantizationError):
        QuantGroup(np.array([[1, -1]], dtype=np.int8), -1.0, (0, 1))
    with pytest.raises(QuantizationError):
        QuantGroup(np.array([[1, -1]], dtype=np.int8), 1.0, (0, 2))


def test_layer_accepts_tensor4_and_array():
    w = seeded_random_tensor((3, 3, 2, 4), 0)
    assert quantize_layer(w, 2) == quantize_layer(np.array(w.data), 2)
    assert quantize_layer(Tensor4.weight(w.data), 2, "xnor").mode is Mode.XNOR
