"""Size-biased (spinal) samplers and importance sampling for the minimum.

Under ``Q^theta`` one line of descent, the spine, reproduces with the
size-biased point process: its offspring count is size-biased and the
displacement of the next spine vertex is tilted by ``exp(-theta x)``; all
other particles reproduce as under ``P``.

Rare events ``{M <= -x}`` are sampled with the spine tilted at ``kappa``
until it first passes below ``-x``. Writing ``L`` for the set of particles
that are the first on their line of descent to reach ``(-inf, -x]``, the
likelihood ratio on the tree explored up to ``L`` is
``W_L = sum_{u in L} exp(-kappa V(u))`` (``psi(kappa) = 0``), hence

    P(M <= -x) = E_Q[1{spine reaches L} / W_L]   and   1 / W_L <= exp(-kappa x).

Truncating ``L`` at generation ``n`` gives ``P(M_n <= -x)`` the same way.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .brw import BrwRun, Prune, _run_from_batch, default_k_stop, evolve
from .errors import DegenerateWeights, UnsupportedFamily
from .model import (BinaryGaussian, FixedCountIid, LogLaplace, ModelSpec, PoissonCountIid,
                    find_kappa)
from .parallel import map_chunks
from .rwalk import WindowSpec

SUPPORTED = (BinaryGaussian, FixedCountIid, PoissonCountIid)


def _check_family(model) -> None:
    if not isinstance(model, SUPPORTED):
        raise UnsupportedFamily(f"no exact size-biased decomposition for {type(model).__name__}")


def sample_sized_biased_offspring(model: ModelSpec, theta: float,
                                  rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """One reproduction event of a spine vertex: ``(spine child, siblings)``."""
    _check_family(model)
    n = int(model.sample_biased_counts(rng, 1)[0])
    spine = float(model.displacement.tilted(theta).sample(rng, 1)[0])
    return spine, model.displacement.sample(rng, n - 1)


@dataclass
class SpinePath:
    """Spine positions ``V(w_0..w_n)`` with the sibling displacements of every
    spine vertex (relative to the parent)."""

    positions: np.ndarray
    sibling_records: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.positions.size - 1

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.positions)

    @property
    def children_counts(self) -> np.ndarray:
        return np.array([len(s) + 1 for s in self.sibling_records], dtype=np.int64)


def sample_spine_path(model: ModelSpec, theta: float, n: int, rng: np.random.Generator,
                      start: float = 0.0) -> SpinePath:
    _check_family(model)
    pos = [float(start)]
    sibs = []
    for _ in range(n):
        d, s = sample_sized_biased_offspring(model, theta, rng)
        pos.append(pos[-1] + d)
        sibs.append(s)
    return SpinePath(np.array(pos), sibs)


def sample_spine_positions(model: ModelSpec, theta: float, n: int, size: int,
                           rng: np.random.Generator, start: float = 0.0) -> np.ndarray:
    """Spine positions only, ``(size, n + 1)``. Siblings do not affect the
    spine, so this is a walk with the tilted displacement law."""
    _check_family(model)
    steps = model.displacement.tilted(theta).sample(rng, (size, n))
    out = np.empty((size, n + 1))
    out[:, 0] = start
    np.cumsum(steps, axis=1, out=out[:, 1:])
    out[:, 1:] += start
    return out


MODES = ("Q_star", "Q_star_to_n_then_P")


def grow_spine_run(model: ModelSpec, theta: float, n: int, mode: str = "Q_star",
                   rng=0, prune: Prune | None = None, n_max: int | None = None,
                   ll: LogLaplace | None = None) -> tuple[SpinePath, BrwRun]:
    """One tree under ``Q^{theta,*}``.

    ``Q_star``: the tree is grown to generation ``n`` with the spine carried
    throughout. ``Q_star_to_n_then_P``: the spine stops at generation ``n``
    and everything is then grown under ``P`` up to ``n_max`` (default ``n``).
    """
    _check_family(model)
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    ll = ll or find_kappa(model)
    rng = rngmod.as_generator(rng)
    horizon = n if mode == "Q_star" else max(n, n_max or n)
    thetas = tuple(sorted({1.0, float(theta)}))
    b = evolve(model, 1, rng, horizon, ll=ll, thetas=thetas, prune=prune,
               spine_theta=theta, spine_depth=math.inf if mode == "Q_star" else n,
               record=range(horizon + 1), record_tree=True)
    run = _run_from_batch(b, thetas, prune, ll, rng)
    # reconstruct the spine path from the arena
    sp = np.flatnonzero(run.spine)
    sp = sp[np.argsort(run.gen[sp])]
    positions = run.pos[sp]
    sibs = []
    for k in range(1, sp.size):
        kids = run.children(sp[k - 1])
        kids = kids[kids != sp[k]]
        sibs.append(run.pos[kids] - run.pos[sp[k - 1]])
    return SpinePath(positions, sibs), run


# ---------------------------------------------------------------------------
# rare-event estimation of the minimum
# ---------------------------------------------------------------------------


def fixed_depth(x: float, ll: LogLaplace) -> int:
    """Depth covering the minimizer window with a 4-sigma margin."""
    return int(math.ceil(x / ll.psi1_kappa + 4.0 * math.sqrt(x * ll.psi2_kappa) / ll.psi1_kappa))


def ess(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=float)
    s2 = float(np.sum(w * w))
    return float(np.sum(w) ** 2 / s2) if s2 > 0 else 0.0


@dataclass(frozen=True)
class MinTailEstimate:
    x: float
    n: int | None
    p_hat: float
    se: float
    ess: float
    prune_budget: float
    replicas: int
    tilt: str
    seed: int

    def to_json(self) -> dict:
        return {"target": "P(M_n <= -x)" if self.n is not None else "P(M <= -x)",
                "x": self.x, "n": self.n, "p_hat": self.p_hat, "se": self.se, "ess": self.ess,
                "prune_budget": self.prune_budget, "replicas": self.replicas,
                "tilt": self.tilt, "seed": self.seed}


def _default_nmax(x: float, ll: LogLaplace) -> int:
    return int(math.ceil(4.0 * x / ll.psi1_kappa + 200))


def _tail_task(task):
    (model, ll, seed, tag, ci, size, x, n, K, tilt) = task
    rng = rngmod.stream(seed, tag, ci)
    if tilt == "first_passage":
        n_max = _default_nmax(x, ll) if n is None else n
        b = evolve(model, size, rng, n_max, ll=ll, thetas=(ll.kappa,),
                   prune=Prune(K, budget_cap=math.inf), line_level=-x, stop_at_line=True,
                   spine_theta=ll.kappa, spine_until_line=True)
        h = np.where(b.spine_hit, 1.0 / np.where(b.line_weight > 0, b.line_weight, 1.0), 0.0)
        bud = b.budget + b.stop_bound
    else:
        b = evolve(model, size, rng, n, ll=ll, thetas=(ll.kappa,),
                   prune=Prune(K, budget_cap=math.inf), spine_theta=ll.kappa, spine_depth=n)
        h = np.where(b.M <= -x, 1.0 / b.W_final[ll.kappa], 0.0)
        bud = b.budget
    return h, bud


def estimate_min_tail(model: ModelSpec, x: float, replicas: int, seed: int = 0,
                      n: int | None = None, K: float | None = None,
                      tilt: str = "first_passage", ess_floor: float = 500.0,
                      workers: int | None = 1, chunk: int = rngmod.DEFAULT_CHUNK,
                      ll: LogLaplace | None = None) -> MinTailEstimate:
    """Importance-sampling estimate of ``P(M_n <= -x)`` (``n=None``: ``P(M <= -x)``).

    ``tilt="first_passage"`` (default) tilts the spine until it first reaches
    ``(-inf, -x]``; ``tilt="fixed_depth"`` tilts it for exactly ``n``
    generations (default :func:`fixed_depth`) and weights by ``1/W_n(kappa)``.
    """
    _check_family(model)
    ll = ll or find_kappa(model)
    K = default_k_stop(ll.kappa) if K is None else float(K)
    if tilt == "fixed_depth" and n is None:
        n = fixed_depth(x, ll)
    if tilt not in ("first_passage", "fixed_depth"):
        raise ValueError("tilt must be 'first_passage' or 'fixed_depth'")
    tasks = [(model, ll, seed, f"min_tail:{tilt}:{x!r}:{n}", ci, hi - lo, float(x), n, K, tilt)
             for ci, lo, hi in rngmod.chunks(replicas, chunk)]
    parts = map_chunks(_tail_task, tasks, workers)
    h = np.concatenate([p[0] for p in parts])
    bud = np.concatenate([p[1] for p in parts])
    e = ess(h)
    if e < ess_floor:
        raise DegenerateWeights(f"ESS {e:.1f} below floor {ess_floor}")
    return MinTailEstimate(float(x), n, float(h.mean()), float(h.std(ddof=1) / math.sqrt(h.size)),
                           e, float(bud.mean()), int(replicas), tilt, int(seed))


def _direct_task(task):
    (model, ll, seed, tag, ci, size, x, n, K) = task
    b = evolve(model, size, rngmod.stream(seed, tag, ci), n, ll=ll,
               prune=Prune(K, budget_cap=math.inf), line_level=-x, stop_at_line=True)
    return (b.line_first_gen >= 0).astype(float), b.budget


def direct_min_tail(model: ModelSpec, x: float, n: int, replicas: int, seed: int = 0,
                    K: float | None = None, workers: int | None = 1,
                    chunk: int = rngmod.DEFAULT_CHUNK,
                    ll: LogLaplace | None = None) -> MinTailEstimate:
    """Plain Monte Carlo estimate of ``P(M_n <= -x)`` under ``P``."""
    ll = ll or find_kappa(model)
    K = default_k_stop(ll.kappa) if K is None else float(K)
    tasks = [(model, ll, seed, f"direct:{x!r}:{n}", ci, hi - lo, float(x), int(n), K)
             for ci, lo, hi in rngmod.chunks(replicas, chunk)]
    parts = map_chunks(_direct_task, tasks, workers)
    h = np.concatenate([p[0] for p in parts])
    bud = np.concatenate([p[1] for p in parts])
    return MinTailEstimate(float(x), int(n), float(h.mean()),
                           float(h.std(ddof=1) / math.sqrt(h.size)), float(h.size),
                           float(bud.mean()), int(replicas), "none", int(seed))


# ---------------------------------------------------------------------------
# conditional laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MinBelow:
    x: float


@dataclass(frozen=True)
class WLimitAbove:
    x: float
    eps: float = 0.1

    @property
    def level(self) -> float:
        return math.log(self.eps * self.x)


@dataclass
class WeightedSamples:
    """Per-replica functionals with importance weights.

    ``log_weight`` converts the sampling measure into ``P`` restricted to the
    conditioning event (``-inf`` off the event), so ``mean(exp(log_weight))``
    estimates the probability of the event and the self-normalized weights
    give the conditional law.
    """

    target: str
    x: float
    values: dict
    log_weight: np.ndarray
    seed: int
    replicas: int
    prune_budget: float
    neighborhood: tuple | None = None   # (rep, offset) arrays

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weight)

    @property
    def ess(self) -> float:
        return ess(self.weights)

    @property
    def p_hat(self) -> tuple[float, float]:
        w = self.weights
        return float(w.mean()), float(w.std(ddof=1) / math.sqrt(w.size))

    def normalized(self) -> np.ndarray:
        w = self.weights
        return w / w.sum()

    def mask(self) -> np.ndarray:
        return np.isfinite(self.log_weight)

    def sample(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """``(values, normalized weights)`` restricted to the event."""
        m = self.mask()
        w = self.weights[m]
        return np.asarray(self.values[name])[m], w / w.sum()

    def mean(self, name: str) -> float:
        v, w = self.sample(name)
        return float(np.sum(v * w))

    def quantile(self, name: str, q: float) -> float:
        v, w = self.sample(name)
        order = np.argsort(v, kind="stable")
        cw = np.cumsum(w[order])
        i = int(np.searchsorted(cw, q * cw[-1]))
        return float(v[order][min(i, v.size - 1)])

    def prob(self, name: str, pred) -> tuple[float, float]:
        """Conditional probability of ``pred(value)`` with a delta-method SE."""
        m = self.mask()
        w = np.where(m, self.weights, 0.0)
        f = np.zeros(w.size)
        f[m] = np.asarray(pred(np.asarray(self.values[name])[m]), dtype=float)
        sw = w.sum()
        p = float(np.sum(w * f) / sw)
        resid = w * (f - p)
        se = float(math.sqrt(np.sum(resid ** 2)) / sw)
        return p, se

    def subset(self, pred_name: str, pred) -> "WeightedSamples":
        """Restrict the event further by ``pred`` on a stored functional."""
        keep = np.zeros(self.log_weight.size, dtype=bool)
        m = self.mask()
        keep[m] = np.asarray(pred(np.asarray(self.values[pred_name])[m]), dtype=bool)
        lw = np.where(keep, self.log_weight, -np.inf)
        return WeightedSamples(self.target, self.x, self.values, lw, self.seed,
                               self.replicas, self.prune_budget, self.neighborhood)

    def laplace(self, g) -> np.ndarray:
        """Per-replica ``exp(-sum_u g(V(u) - M))`` over the stored neighborhood."""
        if self.neighborhood is None:
            raise ValueError("no neighborhood was collected")
        r, off = self.neighborhood
        s = np.bincount(r, weights=g(off), minlength=self.replicas)
        return np.exp(-s)

    def to_csv(self, path, names: Sequence[str] | None = None) -> None:
        names = list(self.values) if names is None else list(names)
        w = self.weights
        tot2 = float(np.sum(w) ** 2) or 1.0
        contrib = np.where(self.mask(), 2 * w * np.sum(w) / tot2, 0.0) if tot2 else w
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["seed", "replica", "functional", "value", "log_weight",
                         "ess_contribution"])
            m = self.mask()
            for name in names:
                vals = np.asarray(self.values[name])
                for i in np.flatnonzero(m):
                    wr.writerow([self.seed, int(i), name, repr(float(vals[i])),
                                 repr(float(self.log_weight[i])), repr(float(contrib[i]))])


FUNCTIONALS = ("M", "overshoot", "ustar_gen", "gen_std", "in_window", "W_inf", "D_inf",
               "W_M", "D_M", "ratio_DW", "W_over_x", "D_over_xlnx", "nbhd_count")


def _cond_task(task):
    (model, ll, seed, tag, ci, size, level, K, n_max, A) = task
    b = evolve(model, size, rngmod.stream(seed, tag, ci), n_max, ll=ll, thetas=(1.0,),
               prune=Prune(K, budget_cap=math.inf), line_level=level,
               spine_theta=ll.kappa, spine_until_line=True, neighborhood=A)
    lw = np.where(b.spine_hit, -np.log(np.where(b.line_weight > 0, b.line_weight, 1.0)),
                  -np.inf)
    return {"M": b.M, "ustar_gen": b.ustar_gen, "W_inf": b.W_final[1.0], "D_inf": b.D_final,
            "log_weight": lw, "budget": b.budget + b.stop_bound,
            "nb_rep": b.nbhd_rep, "nb_off": b.nbhd_offset, "size": size}


def conditional_sample(model: ModelSpec, condition, replicas: int, seed: int = 0,
                       K: float | None = None, A: float = 2.0, ess_floor: float = 500.0,
                       workers: int | None = 1, chunk: int = 500,
                       ll: LogLaplace | None = None) -> WeightedSamples:
    """Weighted samples of tree functionals under ``P( . | condition)``.

    ``MinBelow(x)`` conditions on ``{M <= -x}``. ``WLimitAbove(x)`` samples
    ``{M <= -ln(eps x)}`` and then keeps replicas whose ``W_inf`` estimate is
    at least ``x``; the events ``{W_inf >= x, M > -ln(eps x)}`` are missed.
    Functionals are listed in :data:`FUNCTIONALS`; ``W_inf``/``D_inf`` are
    the frozen martingale limits of the barrier-pruned tree.
    """
    _check_family(model)
    ll = ll or find_kappa(model)
    K = default_k_stop(ll.kappa) if K is None else float(K)
    if isinstance(condition, MinBelow):
        x, level, target = float(condition.x), -float(condition.x), "M <= -x"
    elif isinstance(condition, WLimitAbove):
        x, level, target = float(condition.x), -condition.level, "W_inf >= x"
    else:
        raise TypeError("condition must be MinBelow or WLimitAbove")
    n_max = _default_nmax(abs(level), ll)
    tag = f"conditional:{type(condition).__name__}:{x!r}"
    tasks = [(model, ll, seed, tag, ci, hi - lo, level, K, n_max, A)
             for ci, lo, hi in rngmod.chunks(replicas, chunk)]
    parts = map_chunks(_cond_task, tasks, workers)
    cat = lambda k: np.concatenate([p[k] for p in parts])
    offs = np.cumsum([0] + [p["size"] for p in parts[:-1]])
    nb_rep = np.concatenate([p["nb_rep"] + o for p, o in zip(parts, offs)])
    nb_off = np.concatenate([p["nb_off"] for p in parts])
    M, g, W, D, lw = cat("M"), cat("ustar_gen"), cat("W_inf"), cat("D_inf"), cat("log_weight")
    R = int(replicas)
    win = WindowSpec(-level, ll.psi1_kappa)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = {
            "M": M, "overshoot": level - M, "ustar_gen": g.astype(float),
            "gen_std": win.standardize(g), "in_window": win.contains(g).astype(float),
            "W_inf": W, "D_inf": D, "W_M": np.exp(M) * W, "D_M": np.exp(M) * D,
            "ratio_DW": np.where(g > 0, D / (np.maximum(g, 1) * W), np.nan),
            "W_over_x": W / x,
            "D_over_xlnx": D / (x * math.log(x)) if x > 1 else np.full(R, np.nan),
            "nbhd_count": np.bincount(nb_rep, minlength=R).astype(float),
        }
    if isinstance(condition, MinBelow):
        lw = np.where(M <= -x, lw, -np.inf)
    else:
        lw = np.where(W >= x, lw, -np.inf)
    out = WeightedSamples(target, x, vals, lw, int(seed), R, float(cat("budget").mean()),
                          (nb_rep, nb_off))
    if out.ess < ess_floor:
        raise DegenerateWeights(f"ESS {out.ess:.1f} below floor {ess_floor}")
    return out
