import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sm3.diffcore import Tensor, grad_check
from sm3.losses import l_mm, l_ssl, multilabel_ce, nt_xent

E_RATIO = -math.log(math.e / (math.e + 2))  # 0.5514447139...


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# literal loops over i, j; independent of the vectorised code
def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _term(anchor, pos, same, i, tau):
    n = len(anchor)
    num = math.exp(_cos(anchor[i], pos[i]) / tau)
    den = sum(math.exp(_cos(anchor[i], pos[j]) / tau) for j in range(n))
    den += sum(math.exp(_cos(anchor[i], same[j]) / tau) for j in range(n) if j != i)
    return -math.log(num / den)


def brute_nt_xent(Z1, Z2, tau):
    return sum(_term(Z1, Z2, Z1, i, tau) for i in range(len(Z1))) / len(Z1)


def brute_l_mm(Zd1, Zc1, Zc2, tau):
    n = len(Zd1)
    return sum(_term(Zd1, Zc1, Zd1, i, tau) + _term(Zd1, Zc2, Zd1, i, tau) for i in range(n)) / n


# -- closed-form examples --------------------------------------------------------

def test_nt_xent_single_sample_is_zero():
    rng = np.random.default_rng(0)
    assert nt_xent(t64(rng.standard_normal((1, 5))), t64(rng.standard_normal((1, 5))), 1.0).item() == pytest.approx(0, abs=1e-12)


def test_nt_xent_orthonormal_pairs():
    e = np.eye(2)
    assert abs(nt_xent(t64(e), t64(e), 1.0).item() - E_RATIO) < 1e-9
    assert E_RATIO == pytest.approx(0.55144, abs=1e-5)


def test_nt_xent_all_identical():
    z = np.ones((2, 3))
    assert abs(nt_xent(t64(z), t64(z), 1.0).item() - math.log(3)) < 1e-9


def test_l_mm_single_sample_is_zero():
    z = np.random.default_rng(1).standard_normal((1, 4))
    assert l_mm(t64(z), t64(z), t64(z * 2), t64(-z), 0.5).item() == pytest.approx(0, abs=1e-12)


def test_l_mm_orthonormal_pairs():
    e = np.eye(2)
    value = l_mm(t64(e), t64(e), t64(e), t64(e), 1.0).item()
    assert abs(value - 2 * E_RATIO) < 1e-9
    # the commonly quoted 1.10287 is 2 * 0.55144 rounded twice; exact value is 1.1028894
    assert value == pytest.approx(1.10287, abs=3e-5)


def test_l_ssl_examples():
    z = np.random.default_rng(2).standard_normal((1, 3))
    assert l_ssl(t64(z), t64(z), t64(z), t64(z), 0.1).total.item() == pytest.approx(0, abs=1e-12)
    e = np.eye(2)
    out = l_ssl(t64(e), t64(e), t64(e), t64(e), 1.0)
    assert abs(out.total.item() - 4 * E_RATIO) < 1e-9
    assert out.total.item() == pytest.approx(2.20575, abs=3e-5)  # exact 2.2057789


@given(st.integers(0, 10 ** 6))
@settings(max_examples=20, deadline=None)
def test_l_ssl_is_bitwise_sum_of_components(seed):
    rng = np.random.default_rng(seed)
    Z = [t64(rng.standard_normal((6, 4))) for _ in range(4)]
    out = l_ssl(*Z, tau=0.3)
    a, b, c = nt_xent(Z[0], Z[1], 0.3), nt_xent(Z[2], Z[3], 0.3), l_mm(*Z, tau=0.3)
    assert out.total.item() == a.item() + b.item() + c.item()
    parts = out.components()
    assert parts["l_derm"] + parts["l_clinic"] + parts["l_mm"] == out.total.item()


def test_multilabel_ce_examples():
    logits = [t64(np.zeros((3, 2))) for _ in range(8)]
    y = np.zeros((3, 8), dtype=int)
    assert multilabel_ce(logits, y).item() == pytest.approx(8 * math.log(2), abs=1e-12)
    # probability 1 on the true class (up to float64): loss 0
    sure = t64([[0.0, 800.0, 0.0]])
    assert multilabel_ce([sure], [[1]]).item() == pytest.approx(0, abs=1e-12)


def test_multilabel_ce_k1_is_plain_cross_entropy():
    rng = np.random.default_rng(3)
    lg = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    logp = lg - np.log(np.exp(lg).sum(1, keepdims=True))
    expected = -logp[np.arange(5), y].mean()
    assert multilabel_ce([t64(lg)], y[:, None]).item() == pytest.approx(expected, abs=1e-12)


def test_multilabel_ce_single_sample_vector_logits():
    assert multilabel_ce([t64([0.0, 0.0])], [1]).item() == pytest.approx(math.log(2))


# -- errors ------------------------------------------------------------------------

def test_errors():
    z = t64(np.eye(2))
    with pytest.raises(ValueError):
        nt_xent(z, z, 0.0)
    with pytest.raises(ValueError):
        nt_xent(z, t64(np.eye(3)), 1.0)
    with pytest.raises(ValueError):
        nt_xent(t64(np.zeros((0, 2))), t64(np.zeros((0, 2))), 1.0)
    with pytest.raises(ValueError):
        l_mm(z, z, z, z, -1.0)
    with pytest.raises(ValueError):
        multilabel_ce([t64(np.zeros((2, 3)))], [[3], [0]])
    with pytest.raises(ValueError):
        multilabel_ce([t64(np.zeros((2, 3)))], [[0, 1], [0, 1]])


# -- oracle and properties ---------------------------------------------------------------

@given(st.integers(0, 10 ** 6), st.integers(1, 7), st.floats(0.05, 2.0))
@settings(max_examples=40, deadline=None)
def test_matches_brute_force(seed, n, tau):
    rng = np.random.default_rng(seed)
    Zd1, Zd2, Zc1, Zc2 = (rng.standard_normal((n, 5)) for _ in range(4))
    assert abs(nt_xent(t64(Zd1), t64(Zd2), tau).item() - brute_nt_xent(Zd1, Zd2, tau)) < 1e-12 * max(1, n / tau)
    assert abs(l_mm(t64(Zd1), t64(Zd2), t64(Zc1), t64(Zc2), tau).item() - brute_l_mm(Zd1, Zc1, Zc2, tau)) < 1e-12 * max(1, n / tau)


def test_brute_force_oracle_tight():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        Zd1, Zd2, Zc1, Zc2 = (rng.standard_normal((6, 8)) for _ in range(4))
        assert abs(l_mm(t64(Zd1), t64(Zd2), t64(Zc1), t64(Zc2), 1.0).item() - brute_l_mm(Zd1, Zc1, Zc2, 1.0)) < 1e-12
        assert abs(nt_xent(t64(Zd1), t64(Zd2), 1.0).item() - brute_nt_xent(Zd1, Zd2, 1.0)) < 1e-12


def test_mirror_adds_clinical_anchored_terms():
    rng = np.random.default_rng(4)
    Zd1, Zd2, Zc1, Zc2 = (rng.standard_normal((5, 3)) for _ in range(4))
    base = l_mm(t64(Zd1), t64(Zd2), t64(Zc1), t64(Zc2), 0.5).item()
    mirrored = l_mm(t64(Zd1), t64(Zd2), t64(Zc1), t64(Zc2), 0.5, mirror=True).item()
    extra = sum(_term(Zc1, Zd1, Zc1, i, 0.5) + _term(Zc1, Zd2, Zc1, i, 0.5) for i in range(5)) / 5
    assert mirrored == pytest.approx(base + extra, abs=1e-12)


def test_symmetric_flag_averages_both_anchors():
    rng = np.random.default_rng(5)
    Z1, Z2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    sym = nt_xent(t64(Z1), t64(Z2), 0.5, symmetric=True).item()
    assert sym == pytest.approx((brute_nt_xent(Z1, Z2, 0.5) + brute_nt_xent(Z2, Z1, 0.5)) / 2, abs=1e-12)


@given(st.integers(0, 10 ** 6), st.integers(0, 3), st.integers(0, 3))
@settings(max_examples=30, deadline=None)
def test_row_rescaling_invariance(seed, which, row):
    rng = np.random.default_rng(seed)
    Z = [rng.standard_normal((4, 6)) for _ in range(4)]
    before_nt = nt_xent(t64(Z[0]), t64(Z[1]), 0.1).item()
    before_mm = l_mm(*map(t64, Z), tau=0.1).item()
    Z[which] = Z[which].copy()
    Z[which][row] *= 3.7
    assert abs(nt_xent(t64(Z[0]), t64(Z[1]), 0.1).item() - before_nt) < 1e-9
    assert abs(l_mm(*map(t64, Z), tau=0.1).item() - before_mm) < 1e-9


def test_temperature_gap_grows_as_tau_drops():
    aligned = t64(np.eye(4))
    same = t64(np.ones((4, 4)))
    gaps = []
    for tau in (2.0, 1.0, 0.5, 0.2, 0.1, 0.05):
        gaps.append(nt_xent(same, same, tau).item() - nt_xent(aligned, aligned, tau).item())
        mm_gap = l_mm(same, same, same, same, tau).item() - l_mm(aligned, aligned, aligned, aligned, tau).item()
        assert mm_gap > 0
    assert all(b > a for a, b in zip(gaps, gaps[1:]))


def test_losses_non_negative():
    rng = np.random.default_rng(6)
    for _ in range(20):
        Z = [t64(rng.standard_normal((5, 3))) for _ in range(4)]
        assert nt_xent(Z[0], Z[1], 0.1).item() >= 0
        assert l_mm(*Z, tau=0.1).item() >= 0


# -- gradients -------------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["nt_xent", "l_mm", "l_ssl", "multilabel_ce"])
def test_loss_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        Z = [t64(rng.standard_normal((5, 4)), True) for _ in range(4)]
        if name == "nt_xent":
            f, params = (lambda: nt_xent(Z[0], Z[1], 0.5)), Z[:2]
        elif name == "l_mm":
            f, params = (lambda: l_mm(*Z, tau=0.5, mirror=True)), Z
        elif name == "l_ssl":
            f, params = (lambda: l_ssl(*Z, tau=0.5).total), Z
        else:
            lg = [t64(rng.standard_normal((5, c)), True) for c in (3, 2, 5)]
            y = np.stack([rng.integers(0, c, 5) for c in (3, 2, 5)], axis=1)
            f, params = (lambda: multilabel_ce(lg, y)), lg
        assert grad_check(f, params) < 1e-4
