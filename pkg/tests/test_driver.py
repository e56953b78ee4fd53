import numpy as np
import pytest

from conftest import factored, make_spec, problem, rhs
from rskel.driver import factorize, rank_report, top_level
from rskel.geometry import build_tree, make_grid
from rskel.solve import apply_inverse


def _relres(A, x, b):
    return np.linalg.norm(A @ x - b) / np.linalg.norm(b)


def test_shallow_tree_is_dense_only():
    pts = make_grid(4)
    A = problem("laplace", 4)[2]
    f = factorize(pts, make_spec("laplace", 4), 1e-6, leaf_target=16)
    assert f.factors == [] and f.ranks == {}
    assert f.stats["top_size"] == 16
    b = rhs(16)
    assert np.allclose(A @ apply_inverse(f, b), b, rtol=0, atol=1e-13)


def test_top_level():
    assert top_level(build_tree(make_grid(64), 64)) == 2
    assert top_level(build_tree(make_grid(4), 16)) == 0


def _compressed(f):
    return sum(len(fa.red) for fa in f.factors)


def test_accuracy_tight_eps():
    A = problem("laplace", 32)[2]
    f = factored("laplace", 32, 1e-12, 16)
    b = rhs(1024)
    assert _relres(A, f.solve(b), b) <= 1e-10
    # 16-point boxes keep everything at this tolerance; 64-point boxes do compress
    A = problem("laplace", 64)[2]
    f = factored("laplace", 64, 1e-12)
    assert _compressed(f) > 1000
    assert _relres(A, f.solve(rhs(4096)), rhs(4096)) <= 1e-10


def test_accuracy_n4096():
    A = problem("laplace", 64)[2]
    f = factored("laplace", 64, 1e-6)
    b = rhs(4096)
    assert _relres(A, f.solve(b), b) <= 1e-3


@pytest.mark.parametrize("kind", ["laplace", "helmholtz"])
def test_round_trip_scales_with_eps(kind):
    A = problem(kind, 32)[2]
    b = rhs(1024, 3)
    for eps in (1e-4, 1e-6, 1e-8):
        f = factored(kind, 32, eps, 16)
        assert _compressed(f) > 0
        assert _relres(A, f.solve(b), b) <= 1e3 * eps


def test_error_monotone_in_eps():
    A = problem("laplace", 64)[2]
    b = rhs(4096, 1)
    errs = [_relres(A, factored("laplace", 64, e).solve(b), b) for e in (1e-3, 1e-6, 1e-9)]
    assert errs[0] > errs[1] > errs[2]


def test_every_index_eliminated_once():
    f = factorize(make_grid(64), make_spec("laplace", 64), 1e-6, leaf_target=16)
    red = np.concatenate([fa.red for fa in f.factors] + [f.top_idx])
    assert len(red) == 4096
    assert np.array_equal(np.sort(red), np.arange(4096))


def test_level_order_and_counts():
    f = factorize(make_grid(64), make_spec("laplace", 64), 1e-6, leaf_target=16)
    lv = [fa.box.level for fa in f.factors]
    assert lv == sorted(lv, reverse=True)
    assert [lv.count(l) for l in (4, 3)] == [256, 64]
    assert f.levels == [4, 3]


def test_rank_report():
    f = factored("laplace", 64, 1e-6)
    rep = rank_report(f)
    assert list(rep) == [3]
    assert rep[3] == pytest.approx(np.mean([len(fa.skel) for fa in f.factors]))
    assert 0 < rep[3] < 64


def test_custom_order_same_accuracy():
    pts = make_grid(64)
    spec = make_spec("laplace", 64)
    rev = lambda tree, level: tree.boxes(level)[::-1]
    f = factorize(pts, spec, 1e-8, order=rev)
    assert [fa.box for fa in f.factors] == build_tree(pts, 64).boxes(3)[::-1]
    A = problem("laplace", 64)[2]
    b = rhs(4096)
    assert _relres(A, f.solve(b), b) <= 1e-5


@pytest.mark.parametrize("eps", [0.0, 1.0, -1e-6, 2.0])
def test_eps_validation(eps):
    with pytest.raises(ValueError):
        factorize(make_grid(8), make_spec("laplace", 8), eps)


def test_hook_sees_each_level():
    seen = []
    factorize(make_grid(64), make_spec("laplace", 64), 1e-6, leaf_target=16,
              hook=lambda level, store: seen.append((level, len(store.active))))
    assert seen == [(4, 256), (3, 64)]


def test_stats_fields():
    f = factored("helmholtz", 32, 1e-6, 16)
    assert f.dtype == np.complex128
    assert 0 <= f.stats["t_comp"] <= f.stats["t_fact"]
    assert f.stats["peak_store_entries"] > 0
    assert f.n_entries() > 0
