import numpy as np
import pytest

from covfield.core import CovarianceField, FunctionalDataset, constant_field
from covfield.pairloss import full_pair_loss, permutation_average_loss, split_pair_loss

from conftest import random_dataset


def two_point_dataset(values):
    values = np.asarray(values, dtype=float)
    m = values.size
    locations = np.linspace(0.1, 0.9, m).reshape(1, m, 1)
    return FunctionalDataset(locations, values.reshape(1, m))


def test_full_loss_two_points_zero_field():
    ds = two_point_dataset([1.0, 2.0])
    out = full_pair_loss(ds, constant_field(0.0))
    assert out.value == pytest.approx(4.0)
    assert out.pair_count == 2


def test_full_loss_exact_fit():
    ds = two_point_dataset([1.0, 2.0])
    assert full_pair_loss(ds, constant_field(2.0)).value == pytest.approx(0.0)


def test_full_loss_three_points_brute_force():
    # Y = [1, -1, 2], K = 0: ordered-pair products squared, averaged over 6
    ds = two_point_dataset([1.0, -1.0, 2.0])
    out = full_pair_loss(ds, constant_field(0.0))
    prods = [1 * -1, 1 * 2, -1 * 1, -1 * 2, 2 * 1, 2 * -1]
    assert out.value == pytest.approx(sum(p * p for p in prods) / 6)
    assert out.value == pytest.approx(3.0)


def test_full_loss_requires_two_measurements():
    # the dataset type already refuses m < 2, so the loss can assume it
    with pytest.raises(ValueError, match="m >= 2"):
        FunctionalDataset(np.zeros((1, 1, 1)), np.zeros((1, 1)))


def test_split_loss_m2_identity_order():
    ds = two_point_dataset([1.0, 2.0])
    out = split_pair_loss(ds, constant_field(0.0), np.array([0, 1]))
    assert out.value == pytest.approx(4.0)
    assert out.pair_count == 1


def test_split_loss_m3_identity_order():
    # floor(3/2) = 1 pair: positions (0, 1) -> product -1, squared = 1
    ds = two_point_dataset([1.0, -1.0, 2.0])
    out = split_pair_loss(ds, constant_field(0.0), np.array([0, 1, 2]))
    assert out.value == pytest.approx(1.0)


def test_split_loss_invalid_permutation():
    ds = two_point_dataset([1.0, 2.0])
    with pytest.raises(ValueError, match="permutation"):
        split_pair_loss(ds, constant_field(0.0), np.array([0, 0]))


def test_split_loss_zero_when_interpolating():
    ds = random_dataset(3, n=4, m=4)
    prods = ds.values[:, :, None] * ds.values[:, None, :]

    def interp(s, t):
        # nearest pair product: works because locations are distinct draws
        out = np.empty(s.shape[0])
        flat = ds.locations[:, :, 0]
        for idx in range(s.shape[0]):
            i, j = divmod(int(np.argmin(np.abs(flat - s[idx, 0]))), ds.m)
            _, k = divmod(int(np.argmin(np.abs(flat - t[idx, 0]))), ds.m)
            out[idx] = prods[i, j, k]
        return out

    fld = CovarianceField(interp, d=1, bound=100.0)
    order = np.tile(np.arange(4), (4, 1))
    assert split_pair_loss(ds, fld, order).value == pytest.approx(0.0, abs=1e-24)


def test_permutation_average_m2_equals_full():
    ds = two_point_dataset([1.0, 2.0])
    fld = constant_field(0.3)
    assert permutation_average_loss(ds, fld) == pytest.approx(full_pair_loss(ds, fld).value)


def test_permutation_average_m3_value():
    ds = two_point_dataset([1.0, -1.0, 2.0])
    assert permutation_average_loss(ds, constant_field(0.0)) == pytest.approx(3.0)


def test_permutation_average_matches_full_random():
    rng = np.random.default_rng(17)
    for m in (2, 3, 4, 5):
        ds = random_dataset(100 + m, n=3, m=m)
        level = float(rng.normal())
        fld = constant_field(level if level != 0 else 0.1)
        full = full_pair_loss(ds, fld).value
        avg = permutation_average_loss(ds, fld)
        assert abs(avg - full) <= 1e-12 * max(1.0, abs(full))


def test_permutation_average_rejects_large_m():
    ds = random_dataset(9, n=1, m=7)
    with pytest.raises(ValueError, match="small m"):
        permutation_average_loss(ds, constant_field(0.0))


def test_full_loss_relabel_invariance():
    ds = random_dataset(23, n=5, m=6)
    fld = constant_field(0.2)
    base = full_pair_loss(ds, fld).value
    rng = np.random.default_rng(5)
    for _ in range(3):
        perm = rng.permutation(ds.m)
        shuffled = FunctionalDataset(ds.locations[:, perm, :], ds.values[:, perm])
        assert full_pair_loss(shuffled, fld).value == pytest.approx(base, rel=1e-12)


def test_ordered_pair_swap_identity():
    # sum over ordered pairs of g(T_j, T_k) equals the sum with arguments
    # swapped, hence the loss cannot distinguish K from its symmetrization
    ds = random_dataset(29, n=4, m=5)

    def g(s, t):
        return np.sin(3 * s[:, 0]) + 2.0 * t[:, 0] ** 2

    fld_fwd = CovarianceField(g, d=1, bound=10.0)
    fld_rev = CovarianceField(lambda s, t: g(t, s), d=1, bound=10.0)
    a = full_pair_loss(ds, fld_fwd).value
    b = full_pair_loss(ds, fld_rev).value
    assert a == pytest.approx(b, rel=1e-12)


def test_loss_nonnegative():
    ds = random_dataset(31, n=6, m=3)
    assert full_pair_loss(ds, constant_field(1.0)).value >= 0.0
