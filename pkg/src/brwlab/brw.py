"""Forward simulation of the branching random walk.

The workhorse is :func:`evolve`, which grows a batch of independent
replicas generation by generation on flat numpy arrays. It optionally

* carries a spine (size-biased line of descent) with a given tilt,
* drops particles above a barrier ``anchor + k`` and books the probability
  that a dropped particle could still matter (``prune_budget``),
* records the first-passage line below a level (its members' weight is the
  importance weight used by :mod:`brwlab.spine`),
* keeps the whole tree in an append-only arena (single runs).

Dropped and final-generation particles are *frozen*: their subtree
martingale limits are replaced by their means (``W -> 1``, ``D -> 0``). The
frozen series are martingales with the same means as ``W_n``/``D_n`` and
coincide with them when nothing is dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .errors import (BudgetExceeded, NotStabilized, PopulationOverflow, Uncertified,
                     UnsupportedFamily)
from .model import LogLaplace, ModelSpec, find_kappa
from .parallel import map_chunks

# particle status in the arena
EXPANDED, DROPPED, FINAL, LINE = 0, 1, 2, 3


def default_k_stop(kappa: float) -> float:
    """Barrier height with per-particle miss probability 1e-8."""
    return 8.0 * math.log(10.0) / kappa


@dataclass(frozen=True)
class Prune:
    """Barrier policy.

    Particles sitting more than ``k`` above the anchor are dropped. The anchor
    is the running minimum, or the first-passage level when a line is
    tracked (whichever is higher). Each drop adds ``exp(-kappa * height)``
    to the replica's budget, an upper bound on the probability that the
    dropped subtree reaches the anchor.
    """

    k: float
    budget_cap: float = 1.0
    population_cap: int = 10_000_000


def _segment_starts(rep: np.ndarray) -> np.ndarray:
    if rep.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(np.r_[True, rep[1:] != rep[:-1]])


@dataclass
class Batch:
    """Per-replica results of :func:`evolve`."""

    replicas: int
    record: tuple[int, ...]
    W: dict            # theta -> array (len(record), R)
    D: np.ndarray      # (len(record), R)
    Mn: np.ndarray     # (len(record), R)
    W_final: dict      # theta -> (R,)
    D_final: np.ndarray
    M: np.ndarray
    ustar_gen: np.ndarray
    certified: np.ndarray
    budget: np.ndarray
    stop_bound: np.ndarray
    last_gen: np.ndarray
    line_weight: np.ndarray
    line_first_gen: np.ndarray
    spine_hit: np.ndarray
    spine_hit_gen: np.ndarray
    spine_pos: np.ndarray | None
    observed: dict
    tree: dict | None = None
    nbhd_rep: np.ndarray | None = None
    nbhd_offset: np.ndarray | None = None


def evolve(model: ModelSpec, replicas: int, rng: np.random.Generator, n_max: int,
           *, ll: LogLaplace | None = None, thetas: Sequence[float] = (1.0,),
           prune: Prune | None = None, line_level: float | None = None,
           stop_at_line: bool = False, spine_theta: float | None = None,
           spine_depth: float | None = None, spine_until_line: bool = False,
           record: Sequence[int] = (), start: float = 0.0, record_tree: bool = False,
           neighborhood: float | None = None,
           observe: Callable | None = None, observe_at: Sequence[int] = ()) -> Batch:
    """Grow ``replicas`` independent trees up to generation ``n_max``.

    ``spine_depth`` (generations carried by the spine; ``inf`` for the whole
    run) or ``spine_until_line`` (spine stops at its first passage below
    ``line_level``) switch on the size-biased line with tilt ``spine_theta``.
    ``neighborhood=A`` collects every particle within ``A`` of the final
    minimum (``Batch.nbhd_rep`` / ``Batch.nbhd_offset``).
    """
    ll = ll or find_kappa(model)
    kappa, psi1 = ll.kappa, ll.psi1
    thetas = tuple(float(t) for t in thetas)
    psis = [model.psi(t) for t in thetas]
    law = model.displacement
    R = int(replicas)
    record = tuple(sorted(set(int(g) for g in record if 0 <= g <= n_max)))
    rec_index = {g: i for i, g in enumerate(record)}
    observe_at = set(int(g) for g in observe_at)
    use_spine = spine_theta is not None
    if use_spine and not (spine_until_line or spine_depth):
        raise ValueError("spine requires spine_depth or spine_until_line")
    if spine_until_line and line_level is None:
        raise ValueError("spine_until_line requires line_level")
    tilted = law.tilted(spine_theta) if use_spine else None

    # ---- per-replica accumulators
    frozen_W = {t: np.zeros(R) for t in thetas}
    frozen_D = np.zeros(R)
    M = np.full(R, float(start))
    ustar_gen = np.zeros(R, dtype=np.int64)
    budget = np.zeros(R)
    line_weight = np.zeros(R)
    line_first_gen = np.full(R, -1, dtype=np.int64)
    spine_hit = np.zeros(R, dtype=bool)
    spine_hit_gen = np.full(R, -1, dtype=np.int64)
    last_gen = np.zeros(R, dtype=np.int64)
    Wrec = {t: np.zeros((len(record), R)) for t in thetas}
    Drec = np.zeros((len(record), R))
    Mrec = np.zeros((len(record), R))
    observed: dict = {}
    spine_pos = np.full((R, n_max + 1), np.nan) if use_spine else None

    # ---- front
    rep = np.arange(R, dtype=np.int64)
    pos = np.full(R, float(start))
    crossed = np.zeros(R, dtype=bool)
    if line_level is not None and start <= line_level:
        crossed[:] = True
    spine = np.ones(R, dtype=bool) if use_spine else np.zeros(R, dtype=bool)
    if use_spine:
        spine_pos[:, 0] = start
        if spine_until_line and start <= line_level:
            spine[:] = False
    ids = np.arange(R, dtype=np.int64) if record_tree else None
    tree_parts = []
    next_id = R
    nb_rep = [rep.copy()] if neighborhood is not None else None
    nb_pos = [pos.copy()] if neighborhood is not None else None

    def snapshot(g, rep, pos):
        if g in rec_index:
            i = rec_index[g]
            ex = np.exp(-pos)
            for t, p in zip(thetas, psis):
                live = np.bincount(rep, weights=np.exp(-t * pos - g * p), minlength=R)
                Wrec[t][i] = frozen_W[t] + live
            Drec[i] = frozen_D + np.bincount(rep, weights=(-pos - g * psi1) * ex, minlength=R)
            Mrec[i] = M
        if observe is not None and g in observe_at:
            for key, val in observe(g, rep, pos, R).items():
                observed.setdefault(key, {})[g] = val

    def freeze(g, rep_f, pos_f):
        if rep_f.size == 0:
            return
        ex = np.exp(-pos_f)
        for t, p in zip(thetas, psis):
            frozen_W[t] += np.bincount(rep_f, weights=np.exp(-t * pos_f - g * p), minlength=R)
        frozen_D[:] += np.bincount(rep_f, weights=(-pos_f - g * psi1) * ex, minlength=R)

    snapshot(0, rep, pos)
    g = 0
    status_prev = None
    while g < n_max and rep.size:
        F = rep.size
        counts = model.sample_counts(rng, F)
        sp_idx = np.flatnonzero(spine)
        if sp_idx.size:
            counts[sp_idx] = model.sample_biased_counts(rng, sp_idx.size)
        total = int(counts.sum())
        parent = np.repeat(np.arange(F), counts)
        disp = law.sample(rng, total)
        child_spine = np.zeros(total, dtype=bool)
        if sp_idx.size:
            first = (np.cumsum(counts) - counts)[sp_idx]
            disp[first] = tilted.sample(rng, first.size)
            child_spine[first] = True
        cpos = pos[parent] + disp
        crep = rep[parent]
        g += 1

        # running minimum and youngest minimizer generation
        starts = _segment_starts(crep)
        if starts.size:
            gmin = np.minimum.reduceat(cpos, starts)
            present = crep[starts]
            better = gmin < M[present]
            M[present[better]] = gmin[better]
            ustar_gen[present[better]] = g
            last_gen[present] = g

        if neighborhood is not None:
            near = cpos <= M[crep] + neighborhood
            nb_rep.append(crep[near])
            nb_pos.append(cpos[near])

        ccrossed = crossed[parent]
        if line_level is not None:
            member = (cpos <= line_level) & ~ccrossed
            if member.any():
                mrep = crep[member]
                line_weight[:] += np.bincount(mrep, weights=np.exp(-kappa * cpos[member]),
                                              minlength=R)
                fresh = line_first_gen[mrep] < 0
                line_first_gen[mrep[fresh]] = g
            ccrossed = ccrossed | (cpos <= line_level)
        else:
            member = None

        # spine bookkeeping; the vertex where the spine ends is still marked in the arena
        spine_vertex = child_spine.copy() if record_tree else None
        if use_spine and child_spine.any():
            srep = crep[child_spine]
            spine_pos[srep, g] = cpos[child_spine]
            if spine_until_line:
                hit = child_spine & (cpos <= line_level)
                if hit.any():
                    hrep = crep[hit]
                    spine_hit[hrep] = True
                    spine_hit_gen[hrep] = g
                    child_spine &= ~hit
            if spine_depth is not None and g >= spine_depth:
                child_spine[:] = False

        keep = np.ones(total, dtype=bool)
        status = np.full(total, EXPANDED, dtype=np.int8) if record_tree else None
        if stop_at_line and line_level is not None:
            stop = member & ~child_spine
            if stop.any():
                keep &= ~stop
                if record_tree:
                    status[stop] = LINE
        if prune is not None:
            anchor = M[crep]
            if line_level is not None:
                anchor = line_level if stop_at_line else np.maximum(anchor, line_level)
            over = (cpos > anchor + prune.k) & ~child_spine & keep
            if over.any():
                h = (cpos - anchor)[over] if np.ndim(anchor) else cpos[over] - anchor
                budget[:] += np.bincount(crep[over], weights=np.exp(-kappa * h), minlength=R)
                keep &= ~over
                if record_tree:
                    status[over] = DROPPED
            if budget.max(initial=0.0) > prune.budget_cap:
                raise BudgetExceeded(f"prune budget {budget.max():.3g} > cap {prune.budget_cap}")
        gone = ~keep
        freeze(g, crep[gone], cpos[gone])

        if record_tree:
            cids = np.arange(next_id, next_id + total, dtype=np.int64)
            next_id += total
            tree_parts.append((cids, ids[parent], np.full(total, g, dtype=np.int64), cpos,
                               status, spine_vertex))
            ids = cids[keep]
        rep, pos, crossed, spine = crep[keep], cpos[keep], ccrossed[keep], child_spine[keep]
        if prune is not None and rep.size:
            live = np.bincount(rep, minlength=R)
            if live.max() > prune.population_cap:
                raise PopulationOverflow(f"{live.max()} live particles at generation {g}")
        snapshot(g, rep, pos)

    # every particle froze before n_max: later records hold the frozen values
    for gr, i in rec_index.items():
        if gr > g:
            for t in thetas:
                Wrec[t][i] = frozen_W[t]
            Drec[i] = frozen_D
            Mrec[i] = M
    # whatever is still alive is frozen at the final generation
    freeze(g, rep, pos)
    certified = np.ones(R, dtype=bool)
    stop_bound = np.zeros(R)
    if rep.size:
        certified[np.unique(rep)] = False
        stop_bound = np.bincount(rep, weights=np.exp(-kappa * (pos - M[rep])), minlength=R)
    if prune is None:
        certified[:] = False

    nbhd_rep = nbhd_off = None
    if neighborhood is not None:
        r_, p_ = np.concatenate(nb_rep), np.concatenate(nb_pos)
        off = p_ - M[r_]
        keep_nb = off <= neighborhood
        order = np.lexsort((off[keep_nb], r_[keep_nb]))
        nbhd_rep, nbhd_off = r_[keep_nb][order], off[keep_nb][order]

    tree = None
    if record_tree:
        root = (np.arange(R, dtype=np.int64), np.full(R, -1, dtype=np.int64),
                np.zeros(R, dtype=np.int64), np.full(R, float(start)),
                np.full(R, EXPANDED, dtype=np.int8), np.full(R, use_spine))
        parts = [root] + tree_parts
        tree = {
            "id": np.concatenate([p[0] for p in parts]),
            "parent": np.concatenate([p[1] for p in parts]),
            "gen": np.concatenate([p[2] for p in parts]),
            "pos": np.concatenate([p[3] for p in parts]),
            "status": np.concatenate([p[4] for p in parts]),
            "spine": np.concatenate([p[5] for p in parts]),
        }
        if rep.size:
            final_mask = np.isin(tree["id"], ids)
            tree["status"][final_mask] = FINAL
        # a root with no children at n_max = 0 is final as well
        if n_max == 0:
            tree["status"][:R] = FINAL

    return Batch(
        replicas=R, record=record, W=Wrec, D=Drec, Mn=Mrec,
        W_final=frozen_W, D_final=frozen_D, M=M, ustar_gen=ustar_gen,
        certified=certified, budget=budget, stop_bound=stop_bound, last_gen=last_gen,
        line_weight=line_weight, line_first_gen=line_first_gen,
        spine_hit=spine_hit, spine_hit_gen=spine_hit_gen, spine_pos=spine_pos,
        observed={k: v for k, v in observed.items()}, tree=tree,
        nbhd_rep=nbhd_rep, nbhd_offset=nbhd_off,
    )


# ---------------------------------------------------------------------------
# single runs with an arena
# ---------------------------------------------------------------------------


@dataclass
class BrwRun:
    """One realized tree with its martingale series and minimum."""

    parent: np.ndarray
    gen: np.ndarray
    pos: np.ndarray
    status: np.ndarray
    spine: np.ndarray
    thetas: tuple
    W_series: dict
    D_series: np.ndarray
    Mn_series: np.ndarray
    global_min: float
    ustar: int
    ustar_gen: int
    certified: bool
    prune_budget: float
    stop_bound: float
    prune_barrier: float | None
    psi1: float
    kappa: float
    line_weight: float = 0.0
    _subtree: dict | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.pos.size

    @property
    def n_generations(self) -> int:
        return int(self.gen.max())

    def front(self, n: int) -> np.ndarray:
        """Indices of the particles of generation ``n``."""
        return np.flatnonzero(self.gen == n)

    def children(self, u: int) -> np.ndarray:
        return np.flatnonzero(self.parent == u)

    def ancestry(self, u: int) -> list[int]:
        """``[root, u_1, ..., u]``."""
        line = [int(u)]
        while self.parent[line[-1]] >= 0:
            line.append(int(self.parent[line[-1]]))
        return line[::-1]

    def particle_table(self) -> np.ndarray:
        """Structured array (id, parent, gen, position)."""
        out = np.zeros(self.size, dtype=[("id", "i8"), ("parent", "i8"),
                                         ("gen", "i8"), ("position", "f8")])
        out["id"] = np.arange(self.size)
        out["parent"], out["gen"], out["position"] = self.parent, self.gen, self.pos
        return out

    # subtree martingale limits --------------------------------------------
    def subtree_limits(self) -> tuple[np.ndarray, np.ndarray]:
        """``(W_inf^{(z)}, D_inf^{(z)})`` for every particle ``z``.

        Terminal particles (dropped or final) carry their mean subtree
        limits ``1`` and ``0``; everything else is summed exactly from the
        terminal layer upward.
        """
        if self._subtree is None:
            terminal = self.status != EXPANDED
            # a generation-n_max particle that was kept is terminal too
            ex = np.where(terminal, np.exp(-self.pos), 0.0)
            s0 = ex.copy()
            s1 = ex * self.pos
            s2 = ex * self.gen
            for g in range(self.n_generations, 0, -1):
                idx = np.flatnonzero(self.gen == g)
                par = self.parent[idx]
                np.add.at(s0, par, s0[idx])
                np.add.at(s1, par, s1[idx])
                np.add.at(s2, par, s2[idx])
            evz = np.exp(self.pos)
            W = evz * s0
            D = evz * (-s1 + self.pos * s0 - self.psi1 * (s2 - self.gen * s0))
            self._subtree = {"W": W, "D": D}
        return self._subtree["W"], self._subtree["D"]

    @property
    def W_inf_hat(self) -> float:
        return float(self.subtree_limits()[0][0] * math.exp(-self.pos[0]))

    @property
    def D_inf_hat(self) -> float:
        W, D = self.subtree_limits()
        a = self.pos[0]
        return float(math.exp(-a) * (D[0] - a * W[0]))


def _run_from_batch(b: Batch, thetas, prune, ll, rng) -> BrwRun:
    t = b.tree
    pos = t["pos"]
    m = pos.min()
    cand = np.flatnonzero(pos == m)
    youngest = cand[t["gen"][cand] == t["gen"][cand].min()]
    ustar = int(youngest[0] if youngest.size == 1 else rng.choice(youngest))
    return BrwRun(
        parent=t["parent"], gen=t["gen"], pos=pos, status=t["status"], spine=t["spine"],
        thetas=tuple(thetas),
        W_series={th: b.W[th][:, 0] for th in thetas},
        D_series=b.D[:, 0], Mn_series=b.Mn[:, 0],
        global_min=float(m), ustar=ustar, ustar_gen=int(t["gen"][ustar]),
        certified=bool(b.certified[0]), prune_budget=float(b.budget[0]),
        stop_bound=float(b.stop_bound[0]),
        prune_barrier=None if prune is None else prune.k,
        psi1=ll.psi1, kappa=ll.kappa, line_weight=float(b.line_weight[0]),
    )


def grow(model: ModelSpec, n_max: int, theta_set: Sequence[float] = (1.0,),
         prune: Prune | None = None, rng=0, *, start: float = 0.0,
         ll: LogLaplace | None = None) -> BrwRun:
    """Grow one tree under P (or P_a with ``start=a``) and keep it in an arena."""
    ll = ll or find_kappa(model)
    rng = rngmod.as_generator(rng)
    thetas = tuple(sorted(set(float(t) for t in theta_set) | {1.0}))
    b = evolve(model, 1, rng, n_max, ll=ll, thetas=thetas, prune=prune,
               record=range(n_max + 1), start=start, record_tree=True)
    return _run_from_batch(b, thetas, prune, ll, rng)


@dataclass(frozen=True)
class GlobalMin:
    value: float
    ustar_gen: int
    certified: bool
    error_bound: float


def global_min(run: BrwRun, strict: bool = True) -> GlobalMin:
    """The minimum over retained particles and the youngest minimizer."""
    if strict and not run.certified:
        raise Uncertified("growth stopped at n_max with particles below the barrier")
    return GlobalMin(run.global_min, run.ustar_gen, run.certified,
                     run.prune_budget + run.stop_bound)


@dataclass(frozen=True)
class MinNeighborhood:
    offsets: np.ndarray
    cutoff: float

    @property
    def count(self) -> int:
        return int(self.offsets.size)

    def laplace(self, g: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(math.exp(-np.sum(g(self.offsets))))


def min_neighborhood(run: BrwRun, A: float) -> MinNeighborhood:
    off = run.pos - run.global_min
    return MinNeighborhood(np.sort(off[off <= A]), float(A))


@dataclass(frozen=True)
class MartingaleLimits:
    W_inf_hat: float
    D_inf_hat: float
    n_stab: int
    fluctuation: float


def martingale_limits(run: BrwRun, n_stab: int | None = None, window: int = 5,
                      threshold: float = 0.05) -> MartingaleLimits:
    """Read ``W_inf`` and ``D_inf`` off the (frozen) series.

    With ``n_stab=None`` the last generation is used. The diagnostic is the
    largest relative change of ``W`` over the last ``window`` generations.
    """
    W = run.W_series[1.0]
    n = len(W) - 1 if n_stab is None else min(int(n_stab), len(W) - 1)
    lo = max(0, n - window)
    ref = W[n]
    fluct = float(np.max(np.abs(W[lo:n + 1] - ref)) / ref) if ref > 0 else 0.0
    if fluct > threshold:
        raise NotStabilized(f"relative fluctuation {fluct:.3g} over generations {lo}..{n}")
    return MartingaleLimits(float(ref), float(run.D_series[n]), n, fluct)


def truncated_functionals(run: BrwRun, t: int, u: int | None = None) -> tuple[float, float]:
    """Sibling decompositions of ``e^{V(u)} W_inf`` and ``e^{V(u)} D_inf``
    restricted to the last ``t`` generations of the ancestral line of ``u``
    (default ``u*``)."""
    u = run.ustar if u is None else int(u)
    Wz, Dz = run.subtree_limits()
    line = run.ancestry(u)
    n = len(line) - 1
    vu = run.pos[u]
    psi1 = run.psi1
    w_tr = Wz[u]
    d_tr = Dz[u] - (vu + n * psi1) * Wz[u]
    for k in range(max(n - t, 1), n + 1):
        uk = line[k]
        sib = run.children(line[k - 1])
        sib = sib[sib != uk]
        if sib.size == 0:
            continue
        e = np.exp(vu - run.pos[sib])
        w_tr += float(np.sum(e * Wz[sib]))
        d_tr += float(np.sum(e * (Dz[sib] - (run.pos[sib] + k * psi1) * Wz[sib])))
    return float(w_tr), float(d_tr)


# ---------------------------------------------------------------------------
# batched replicas
# ---------------------------------------------------------------------------


@dataclass
class Summary:
    """Per-replica arrays concatenated over chunks, in replica order."""

    seed: int
    replicas: int
    record: tuple
    W: dict
    D: np.ndarray
    Mn: np.ndarray
    W_inf: np.ndarray
    D_inf: np.ndarray
    M: np.ndarray
    ustar_gen: np.ndarray
    certified: np.ndarray
    budget: np.ndarray
    observed: dict


def _summary_task(task):
    (model, ll, seed, tag, ci, size, n_max, thetas, prune, record, line_level,
     stop_at_line, start, observe, observe_at) = task
    b = evolve(model, size, rngmod.stream(seed, tag, ci), n_max, ll=ll, thetas=thetas,
               prune=prune, line_level=line_level, stop_at_line=stop_at_line,
               record=record, start=start, observe=observe, observe_at=observe_at)
    return b


def simulate(model: ModelSpec, replicas: int, n_max: int, *, seed: int = 0,
             thetas: Sequence[float] = (1.0,), prune: Prune | None = None,
             record: Sequence[int] = (), line_level: float | None = None,
             stop_at_line: bool = False, start: float = 0.0,
             observe: Callable | None = None, observe_at: Sequence[int] = (),
             workers: int | None = 1, chunk: int = rngmod.DEFAULT_CHUNK,
             tag: str = "simulate", ll: LogLaplace | None = None) -> Summary:
    """Independent replicas under P, processed in keyed chunks."""
    ll = ll or find_kappa(model)
    thetas = tuple(sorted(set(float(t) for t in thetas) | {1.0}))
    tasks = [(model, ll, seed, tag, ci, stop - lo, n_max, thetas, prune, tuple(record),
              line_level, stop_at_line, start, observe, tuple(observe_at))
             for ci, lo, stop in rngmod.chunks(replicas, chunk)]
    parts = map_chunks(_summary_task, tasks, workers)
    cat = lambda f: np.concatenate([f(p) for p in parts]) if parts else np.zeros(0)
    observed = {}
    for key in (parts[0].observed if parts else {}):
        observed[key] = {g: np.concatenate([p.observed[key][g] for p in parts])
                         for g in parts[0].observed[key]}
    return Summary(
        seed=seed, replicas=replicas, record=tuple(parts[0].record) if parts else (),
        W={t: np.concatenate([p.W[t] for p in parts], axis=1) for t in thetas},
        D=np.concatenate([p.D for p in parts], axis=1),
        Mn=np.concatenate([p.Mn for p in parts], axis=1),
        W_inf=cat(lambda p: p.W_final[1.0]), D_inf=cat(lambda p: p.D_final),
        M=cat(lambda p: p.M), ustar_gen=cat(lambda p: p.ustar_gen),
        certified=cat(lambda p: p.certified), budget=cat(lambda p: p.budget),
        observed=observed,
    )
