import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grounding import autodiff as ad
from grounding import losses
from grounding.autodiff import ShapeError, Tensor
from grounding.losses import Hyperparams, NonFiniteLossError


# ------------------------------------------------------- scalar oracles


def pc_oracle(parent, children, count):
    total = 0.0
    h, w = parent.shape
    for i in range(h):
        for j in range(w):
            union = max(c[i, j] for c in children)
            total += (parent[i, j] - union) ** 2
    return total / count


def sib_oracle(sets, count=None):
    count = len(sets) if count is None else count
    total = 0.0
    for members in sets:
        h, w = members[0].shape
        for i in range(h):
            for j in range(w):
                vals = [m[i, j] for m in members]
                s = sum(vals)
                if s == 0:
                    continue
                total += (s / len(vals)) * math.log(max(vals) / s)
    return -total / count


# ---------------------------------------------------------------- L_PC


def test_pc_zero_for_exact_union():
    rng = np.random.default_rng(0)
    kids = [rng.uniform(size=(4, 4)) for _ in range(3)]
    assert losses.loss_pc(np.maximum.reduce(kids), kids, 1).item() == 0.0


def test_pc_two_by_two_example():
    parent = np.array([[1.0, 0.0], [0.0, 0.0]])
    child = np.full((2, 2), 0.0001)
    expected = (1 - 0.0001) ** 2 + 3 * 0.0001**2
    assert losses.loss_pc(parent, [child], 1).item() == pytest.approx(expected, abs=1e-15)


def test_pc_matches_oracle_on_4x4_three_children():
    rng = np.random.default_rng(1)
    for _ in range(50):
        parent = rng.uniform(size=(4, 4))
        kids = [rng.uniform(size=(4, 4)) for _ in range(3)]
        assert losses.loss_pc(parent, kids, 3).item() == pytest.approx(pc_oracle(parent, kids, 3), abs=1e-12)


def test_pc_matches_oracle_on_1000_random_8x8():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        k = int(rng.integers(1, 4))
        parent = rng.uniform(size=(8, 8))
        kids = [rng.uniform(size=(8, 8)) for _ in range(k)]
        count = int(rng.integers(1, 5))
        assert abs(losses.loss_pc(parent, kids, count).item() - pc_oracle(parent, kids, count)) <= 1e-10


def test_pc_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.loss_pc(np.zeros((2, 2)), [np.zeros((3, 3))], 1)


def test_pc_needs_a_child():
    with pytest.raises(ValueError):
        losses.loss_pc(np.zeros((2, 2)), [], 1)


# --------------------------------------------------------------- L_SIB


def test_sib_singleton_is_zero():
    m = np.random.default_rng(3).uniform(0.1, 0.9, (4, 4))
    assert losses.loss_sib([[m]]).item() == 0.0


def test_sib_one_pixel_example():
    value = losses.loss_sib([[np.array([[0.6]]), np.array([[0.2]])]]).item()
    assert value == pytest.approx(-0.4 * math.log(0.75), abs=1e-15)
    assert value == pytest.approx(0.11507, abs=1e-5)


def test_sib_zero_sum_pixels_contribute_nothing():
    a = np.array([[0.0, 0.6]])
    b = np.array([[0.0, 0.2]])
    assert losses.loss_sib([[a, b]]).item() == pytest.approx(-0.4 * math.log(0.75), abs=1e-15)


def test_sib_matches_oracle_on_1000_random_8x8():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        sets = [[rng.uniform(size=(8, 8)) for _ in range(int(rng.integers(1, 4)))] for _ in range(int(rng.integers(1, 3)))]
        assert abs(losses.loss_sib(sets).item() - sib_oracle(sets)) <= 1e-10


def test_sib_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.loss_sib([[np.ones((2, 2)), np.ones((2, 3))]])


def test_sib_weights_are_member_mean():
    a, b = np.array([[0.2, 0.4]]), np.array([[0.6, 0.0]])
    np.testing.assert_allclose(losses.sibling_weights([a, b]), [[0.4, 0.2]])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 4))
def test_sib_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    members = [rng.uniform(0.01, 1.0, (3, 3)) for _ in range(n)]
    perm = list(rng.permutation(n))
    a = losses.loss_sib([members]).item()
    b = losses.loss_sib([[members[i] for i in perm]]).item()
    assert a == pytest.approx(b, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 1.0))
def test_sib_scales_linearly_with_mask_scale(seed, alpha):
    rng = np.random.default_rng(seed)
    members = [rng.uniform(0.01, 1.0, (4, 4)) for _ in range(3)]
    base = losses.loss_sib([members]).item()
    scaled = losses.loss_sib([[alpha * m for m in members]]).item()
    assert scaled == pytest.approx(alpha * base, rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    masks = [rng.uniform(size=(5, 5)) for _ in range(3)]
    assert losses.loss_pc(masks[0], masks[1:], 1).item() >= 0.0
    assert losses.loss_sib([masks]).item() >= 0.0


# --------------------------------------------------------------- L_disc


@pytest.mark.parametrize("label, dot, expected", [(1, 0.0, -0.5), (-1, 0.0, 0.5), (1, 2.0, -0.8808)])
def test_disc_examples(label, dot, expected):
    score = ad.sigmoid(Tensor(dot))
    assert losses.loss_disc(score, label).item() == pytest.approx(expected, abs=1e-4)


def test_disc_rejects_bad_label():
    with pytest.raises(ValueError):
        losses.loss_disc(Tensor(0.5), 0)


def test_batch_disc_is_mean_over_pairs():
    logits = np.array([0.0, 2.0, -1.0])
    labels = np.array([1.0, -1.0, 1.0])
    sig = 1 / (1 + np.exp(-logits))
    expected = np.mean(-labels * sig)
    assert losses.batch_disc_loss(logits, labels).item() == pytest.approx(expected, abs=1e-15)
    expected_ls = np.mean(np.log1p(np.exp(-labels * logits)))
    assert losses.batch_disc_loss(logits, labels, "log-sigmoid").item() == pytest.approx(expected_ls, abs=1e-14)


def test_batch_disc_unknown_mode():
    with pytest.raises(ValueError):
        losses.batch_disc_loss(np.zeros(2), np.ones(2), "hinge")


# ---------------------------------------------------------- composition


def test_total_with_default_weights():
    b = losses.total_loss(1.0, 1.0, 1.0, Hyperparams(lambda_pc=0.01, lambda_sib=0.0001))
    assert b.L == pytest.approx(1.0101, abs=1e-15)
    assert b.L == pytest.approx(b.L_struct + b.L_disc, abs=1e-15)


def test_total_zero_weights_is_disc_only():
    b = losses.total_loss(3.0, 7.0, -0.25, Hyperparams(lambda_pc=0.0, lambda_sib=0.0))
    assert b.L == -0.25 and b.L_PC == 3.0 and b.L_SIB == 7.0


def test_pc_ablation_weights():
    b = losses.total_loss(2.0, 5.0, 0.0, Hyperparams(lambda_pc=0.01, lambda_sib=0.0))
    assert b.L == pytest.approx(0.02, abs=1e-15)


@pytest.mark.parametrize("which", ["L_PC", "L_SIB", "L_disc"])
def test_nan_component_rejected(which):
    vals = {"L_PC": 1.0, "L_SIB": 1.0, "L_disc": 1.0}
    vals[which] = float("nan")
    with pytest.raises(NonFiniteLossError, match=which):
        losses.total_loss(vals["L_PC"], vals["L_SIB"], vals["L_disc"], Hyperparams())


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        Hyperparams(lambda_pc=-1.0)
    with pytest.raises(ValueError):
        Hyperparams(lambda_sib=float("inf"))


def test_csv_line():
    b = losses.total_loss(1.0, 2.0, 0.5, Hyperparams())
    assert losses.CSV_HEADER == "step,L,L_disc,L_PC,L_SIB"
    fields = losses.csv_line(3, b).split(",")
    assert fields[0] == "3" and float(fields[1]) == b.L and float(fields[4]) == 2.0


# ------------------------------------------------------------ gradients


def test_pc_gradcheck_4x4():
    rng = np.random.default_rng(6)
    kids = [Tensor(rng.uniform(size=(4, 4))) for _ in range(2)]
    x = rng.uniform(size=(4, 4))
    assert ad.finite_difference_check(lambda p: losses.loss_pc(p, kids, 2), x) <= 1e-4


def test_sib_gradcheck_4x4():
    rng = np.random.default_rng(7)
    other = Tensor(rng.uniform(0.1, 0.9, (4, 4)))
    x = rng.uniform(0.1, 0.9, (4, 4))
    assert ad.finite_difference_check(lambda m: losses.loss_sib([[m, other]]), x) <= 1e-4


def test_disc_gradcheck():
    labels = np.array([1.0, -1.0, 1.0])
    x = np.array([0.3, -1.2, 2.0])
    for mode in losses.DISC_MODES:
        assert ad.finite_difference_check(lambda z: losses.batch_disc_loss(z, labels, mode), x) <= 1e-4
