import math

import numpy as np
import pytest

from brwlab import rng as rngmod
from brwlab.brw import (DROPPED, EXPANDED, Prune, default_k_stop, evolve, global_min, grow,
                        martingale_limits, min_neighborhood, simulate, truncated_functionals)
from brwlab.errors import BudgetExceeded, NotStabilized, PopulationOverflow, Uncertified
from brwlab.model import BUILTIN, LN2, Gaussian, PoissonCountIid, find_kappa

LL = find_kappa(BUILTIN)


def brute_force_martingales(run, n, theta=1.0):
    """Direct sums over the generation-n front of an unpruned arena."""
    v = run.pos[run.front(n)]
    w = np.sum(np.exp(-theta * v - n * BUILTIN.psi(theta)))
    d = -np.sum((v + n * LL.psi1) * np.exp(-v))
    return w, d


def test_exact_tree_structure():
    run = grow(BUILTIN, 7, rng=3)
    assert run.size == 2 ** 8 - 1
    for n in range(8):
        assert run.front(n).size == 2 ** n
    kids = run.children(0)
    assert kids.size == 2 and np.all(run.parent[kids] == 0)
    leaf = run.front(7)[5]
    line = run.ancestry(leaf)
    assert line[0] == 0 and line[-1] == leaf
    assert [int(run.gen[u]) for u in line] == list(range(8))
    tab = run.particle_table()
    assert tab.dtype.names == ("id", "parent", "gen", "position")
    assert np.all(tab["gen"][1:] == run.gen[run.parent[1:]] + 1)


def test_martingale_series_match_brute_force():
    run = grow(BUILTIN, 8, theta_set=(1.0, 2.0), rng=11)
    for n in range(9):
        w, d = brute_force_martingales(run, n)
        assert run.W_series[1.0][n] == pytest.approx(w, rel=1e-12)
        assert run.D_series[n] == pytest.approx(d, rel=1e-10, abs=1e-12)
        w2, _ = brute_force_martingales(run, n, 2.0)
        assert run.W_series[2.0][n] == pytest.approx(w2, rel=1e-12)
        assert run.Mn_series[n] == pytest.approx(run.pos[run.gen <= n].min())


def test_subtree_limits_of_unpruned_tree():
    run = grow(BUILTIN, 9, rng=5)
    # every leaf is terminal, so the root's limits are the generation-9 martingales
    assert run.W_inf_hat == pytest.approx(run.W_series[1.0][-1], rel=1e-12)
    assert run.D_inf_hat == pytest.approx(run.D_series[-1], rel=1e-9, abs=1e-12)


def test_truncated_functionals_full_line_equals_scaled_limits():
    run = grow(BUILTIN, 9, rng=21)
    e = math.exp(run.global_min)
    w, d = truncated_functionals(run, t=run.ustar_gen + 1)
    assert w == pytest.approx(e * run.W_inf_hat, rel=1e-10)
    assert d == pytest.approx(e * run.D_inf_hat, rel=1e-9, abs=1e-12)
    # a shorter window drops non-negative terms of W
    w0, _ = truncated_functionals(run, t=0)
    assert w0 <= w + 1e-12


def test_global_min_is_youngest_minimizer():
    run = grow(BUILTIN, 8, rng=8)
    m = run.pos.min()
    assert run.global_min == m
    assert run.ustar_gen == run.gen[run.pos == m].min()


def test_uncertified_raises_when_strict():
    run = grow(BUILTIN, 5, prune=Prune(5.0), rng=1)
    assert not run.certified
    with pytest.raises(Uncertified):
        global_min(run)
    gm = global_min(run, strict=False)
    assert not gm.certified


def test_pruned_run_certifies_and_keeps_spine_free():
    run = grow(BUILTIN, 2000, prune=Prune(default_k_stop(LL.kappa)), rng=4)
    gm = global_min(run)
    assert gm.certified
    assert gm.error_bound < 1e-3
    assert np.any(run.status == DROPPED)
    assert np.all(run.status[run.children(0)] != EXPANDED) or run.front(1).size == 2


def test_min_neighborhood_contains_minimizer():
    run = grow(BUILTIN, 2000, prune=Prune(8.0), rng=9)
    nb = min_neighborhood(run, 2.0)
    assert nb.count >= 1 and nb.offsets[0] == 0.0
    assert np.all(nb.offsets <= 2.0)
    assert nb.laplace(lambda z: np.zeros_like(z)) == 1.0


def test_martingale_limits_stabilization():
    run = grow(BUILTIN, 2000, prune=Prune(6.0), rng=12)
    lim = martingale_limits(run)
    assert lim.W_inf_hat == pytest.approx(run.W_inf_hat, rel=1e-9)
    early = grow(BUILTIN, 3, rng=12)
    with pytest.raises(NotStabilized):
        martingale_limits(early, threshold=1e-6)


def test_population_and_budget_caps():
    with pytest.raises(PopulationOverflow):
        grow(BUILTIN, 20, prune=Prune(50.0, budget_cap=math.inf, population_cap=1000), rng=0)
    with pytest.raises(BudgetExceeded):
        grow(BUILTIN, 100, prune=Prune(0.5, budget_cap=1e-6), rng=0)


def test_martingale_means_small_n():
    s = simulate(BUILTIN, 20_000, 6, seed=2, thetas=(1.0, 2.0), record=(6,))
    for t in (1.0, 2.0):
        w = s.W[t][0]
        assert abs(w.mean() - 1) <= 4 * w.std(ddof=1) / math.sqrt(w.size)
    d = s.D[0]
    assert abs(d.mean()) <= 4 * d.std(ddof=1) / math.sqrt(d.size)


def test_poisson_family_martingale_mean():
    # normalized Poisson family: psi(1) = 0
    lam = 3.0
    v = 1.0
    m = math.log(lam) + v / 2
    model = PoissonCountIid(lam, Gaussian(m, v))
    assert model.psi(1.0) == pytest.approx(0.0, abs=1e-12)
    s = simulate(model, 10_000, 4, seed=3, record=(4,))
    w = s.W[1.0][0]
    assert abs(w.mean() - 1) <= 4 * w.std(ddof=1) / math.sqrt(w.size)


def test_frozen_limit_means():
    s = simulate(BUILTIN, 20_000, 2000, seed=5, prune=Prune(5.0, budget_cap=math.inf),
                 tag="limits")
    assert s.certified.all()
    assert s.budget.mean() < 0.01
    assert abs(s.W_inf.mean() - 1) <= 4 * s.W_inf.std(ddof=1) / math.sqrt(s.W_inf.size)
    # the minimum is non-positive since the root sits at 0
    assert np.all(s.M <= 0)


def test_frozen_limit_means_light_tail():
    # psi = ln2 - t m + t^2 v / 2 with roots 1 and kappa = 2 ln2 / v = 5.5:
    # W_inf and D_inf have finite variance, so plain SEs are trustworthy
    v = 0.25
    model = PoissonCountIid(2.0, Gaussian(LN2 + v / 2, v))
    ll = find_kappa(model)
    assert ll.kappa == pytest.approx(2 * LN2 / v, rel=1e-9)
    s = simulate(model, 20_000, 3000, seed=6, prune=Prune(3.0, budget_cap=math.inf),
                 tag="limits", ll=ll)
    assert s.certified.all()
    for v_, target in ((s.W_inf, 1.0), (s.D_inf, 0.0)):
        assert abs(v_.mean() - target) <= 4 * v_.std(ddof=1) / math.sqrt(v_.size)


def test_simulate_worker_independence():
    kw = dict(seed=17, prune=Prune(5.0, budget_cap=math.inf), chunk=300)
    a = simulate(BUILTIN, 1000, 500, workers=1, **kw)
    b = simulate(BUILTIN, 1000, 500, workers=3, **kw)
    assert np.array_equal(a.W_inf, b.W_inf)
    assert np.array_equal(a.M, b.M)
    assert np.array_equal(a.ustar_gen, b.ustar_gen)


def test_simulate_seed_changes_output():
    a = simulate(BUILTIN, 200, 5, seed=1, record=(5,))
    b = simulate(BUILTIN, 200, 5, seed=2, record=(5,))
    assert not np.array_equal(a.W[1.0], b.W[1.0])


def test_evolve_start_shifts_positions():
    rng = rngmod.stream(0, "start")
    b = evolve(BUILTIN, 500, rng, 4, ll=LL, record=(0, 4), start=1.5)
    # W_n under P_a carries the factor e^{-a}
    assert np.allclose(b.W[1.0][0], math.exp(-1.5))
    assert b.M.max() <= 1.5


def test_default_k_stop():
    assert default_k_stop(2.0) == pytest.approx(4 * math.log(10))
    assert LL.psi1 == pytest.approx(-0.5 * LN2)
