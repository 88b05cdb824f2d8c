import csv
import math

import numpy as np
import pytest
from scipy import stats as sps

from brwlab import rng as rngmod
from brwlab.brw import Prune, evolve
from brwlab.errors import DegenerateWeights, UnsupportedFamily
from brwlab.model import BUILTIN, LN2, Gaussian, PoissonCountIid, find_kappa
from brwlab.spine import (FUNCTIONALS, MinBelow, WLimitAbove, conditional_sample,
                          direct_min_tail, ess, estimate_min_tail, fixed_depth,
                          grow_spine_run, sample_sized_biased_offspring,
                          sample_spine_path, sample_spine_positions)

LL = find_kappa(BUILTIN)
MU, S2 = 1.5 * LN2, LN2


def normal_marginal(theta, n):
    """Closed-form law of V(w_n) under the size-biased measure (Gaussian steps)."""
    return sps.norm(loc=n * (MU - theta * S2), scale=math.sqrt(n * S2))


def test_unsupported_family():
    class Other:
        pass
    with pytest.raises(UnsupportedFamily):
        sample_spine_path(Other(), 1.0, 3, rngmod.stream(0))


def test_size_biased_offspring():
    rng = rngmod.stream(1, "sb")
    spine, sibs = sample_sized_biased_offspring(BUILTIN, 1.0, rng)
    assert sibs.size == 1
    m = PoissonCountIid(2.0, Gaussian(0.0, 1.0))
    sizes = [sample_sized_biased_offspring(m, 1.0, rng)[1].size for _ in range(4000)]
    # size-biased Poisson(2) minus the spine child is Poisson(2)
    assert np.mean(sizes) == pytest.approx(2.0, abs=0.1)


@pytest.mark.parametrize("theta", [1.0, 2.0])
def test_spine_positions_marginal(theta):
    v = sample_spine_positions(BUILTIN, theta, 10, 10_000, rngmod.stream(2, theta))[:, -1]
    assert sps.kstest(v, normal_marginal(theta, 10).cdf).pvalue > 0.01


@pytest.mark.parametrize("theta", [1.0, 2.0])
def test_tree_spine_marginal(theta):
    b = evolve(BUILTIN, 5000, rngmod.stream(3, theta), 10, ll=LL, prune=Prune(4.0, math.inf),
               spine_theta=theta, spine_depth=10)
    v = b.spine_pos[:, 10]
    assert np.all(np.isfinite(v))
    assert sps.kstest(v, normal_marginal(theta, 10).cdf).pvalue > 0.01


def test_grow_spine_run_consistency():
    path, run = grow_spine_run(BUILTIN, 2.0, 8, rng=4)
    assert path.n == 8
    assert path.positions[0] == 0.0
    assert np.all(path.children_counts == 2)
    sp = np.flatnonzero(run.spine)
    assert sp.size == 9
    for k, u in enumerate(sp[np.argsort(run.gen[sp])]):
        assert run.pos[u] == path.positions[k]
    path2, run2 = grow_spine_run(BUILTIN, 2.0, 3, mode="Q_star_to_n_then_P", n_max=6, rng=4)
    assert path2.n == 3 and run2.n_generations == 6
    with pytest.raises(ValueError):
        grow_spine_run(BUILTIN, 2.0, 0)


def test_many_to_one_through_tree():
    # E[sum_{|u|=n} 1{V(u) in [a,b]}] = E[exp(theta S_n) 1{S_n in [a,b]}] with S ~ spine walk
    n, a, b = 5, 0.0, 2.0
    s = evolve(BUILTIN, 20_000, rngmod.stream(5, "tree"), n, ll=LL,
               observe=lambda g, rep, pos, R: {"c": np.bincount(rep, weights=(pos >= a) &
                                                                (pos <= b), minlength=R)},
               observe_at=(n,))
    tree = s.observed["c"][n]
    walk = sample_spine_positions(BUILTIN, 1.0, n, 200_000, rngmod.stream(5, "walk"))[:, -1]
    w = np.exp(walk) * ((walk >= a) & (walk <= b))
    se = math.hypot(tree.std(ddof=1) / math.sqrt(tree.size), w.std(ddof=1) / math.sqrt(w.size))
    assert abs(tree.mean() - w.mean()) <= 4 * se


def test_min_tail_upper_envelope():
    for x in (2.0, 4.0):
        e = estimate_min_tail(BUILTIN, x, 2000, seed=1)
        assert e.p_hat <= math.exp(-LL.kappa * x) * (1 + 1e-12)
        assert e.ess > 500
    doc = e.to_json()
    assert set(doc) >= {"target", "x", "n", "p_hat", "se", "ess", "prune_budget"}


def test_is_matches_direct_mc_truncated():
    x, n = 2.0, 12
    is_ = estimate_min_tail(BUILTIN, x, 6000, seed=2, n=n)
    di = direct_min_tail(BUILTIN, x, n, 30_000, seed=2)
    assert abs(is_.p_hat - di.p_hat) <= 4 * math.hypot(is_.se, di.se)


def test_fixed_depth_tilt_agrees():
    x = 1.5
    n = fixed_depth(x, LL)
    fp = estimate_min_tail(BUILTIN, x, 4000, seed=3, n=n)
    fd = estimate_min_tail(BUILTIN, x, 4000, seed=3, n=n, tilt="fixed_depth", ess_floor=0)
    assert abs(fp.p_hat - fd.p_hat) <= 4 * math.hypot(fp.se, fd.se)


def test_degenerate_weights():
    with pytest.raises(DegenerateWeights):
        estimate_min_tail(BUILTIN, 2.0, 200, seed=0, ess_floor=1e6)


def test_ess():
    assert ess(np.ones(10)) == pytest.approx(10)
    assert ess(np.r_[1.0, np.zeros(9)]) == pytest.approx(1)
    assert ess(np.zeros(3)) == 0.0


def test_conditional_sample_min_below(tmp_path):
    x = 4.0
    ws = conditional_sample(BUILTIN, MinBelow(x), 2000, seed=4, K=5.0)
    assert set(FUNCTIONALS) <= set(ws.values)
    m = ws.mask()
    assert np.all(ws.values["overshoot"][m] >= 0)
    assert np.all(ws.values["M"][m] <= -x)
    assert np.all(ws.values["nbhd_count"][m] >= 1)
    p, se = ws.p_hat
    ref = estimate_min_tail(BUILTIN, x, 2000, seed=5, K=5.0)
    assert abs(p - ref.p_hat) <= 4 * math.hypot(se, ref.se)
    q = ws.quantile("overshoot", 0.5)
    pr, pse = ws.prob("overshoot", lambda v: v <= q)
    assert 0.4 < pr < 0.6 and pse > 0
    sub = ws.subset("gen_std", lambda z: z <= 0)
    assert sub.ess < ws.ess
    lap = ws.laplace(lambda z: np.exp(-z))
    assert np.all((lap > 0) & (lap <= 1))
    path = tmp_path / "w.csv"
    ws.to_csv(path, ["overshoot"])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["seed", "replica", "functional", "value", "log_weight",
                       "ess_contribution"]
    assert len(rows) - 1 == int(m.sum())
    assert open(path, "rb").read().count(b"\r") == 0


def test_w_limit_condition_level():
    c = WLimitAbove(20.0, 0.1)
    assert c.level == pytest.approx(math.log(2.0))
