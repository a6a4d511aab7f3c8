"""Derivative-free minimizers: Nelder-Mead, Powell, differential evolution and a
Powell/Nelder-Mead hybrid.

Every minimizer takes an opaque ``cost(x) -> float`` on numpy vectors and
returns an :class:`OptResult`. All of them are deterministic; differential
evolution draws every random number before evaluating a generation, so the
result does not depend on how many workers evaluate it.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0  # 0.618...


class OptimizerError(ValueError):
    pass


@dataclass(frozen=True)
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise OptimizerError("bounds have different lengths")
        if not np.all(lo < hi):
            raise OptimizerError(f"lower bounds must be below upper bounds: {lo} vs {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def around(cls, center, half_width) -> "BoxBounds":
        c = np.asarray(center, dtype=float)
        h = np.broadcast_to(np.asarray(half_width, dtype=float), c.shape)
        return cls(c - h, c + h)

    @property
    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    nfev: int
    converged: bool
    nit: int = 0
    trace: list = field(default_factory=list)
    info: dict = field(default_factory=dict)


class _Counted:
    """Wraps a cost function, counting calls and remembering the best point."""

    def __init__(self, cost):
        self.cost = cost
        self.nfev = 0
        self.best_x = None
        self.best_f = math.inf

    def __call__(self, x):
        x = np.array(x, dtype=float)
        f = float(self.cost(x))
        self.nfev += 1
        if not math.isfinite(f):
            f = math.inf
        if f < self.best_f:
            self.best_f = f
            self.best_x = x
        return f


def _start(cost, x0):
    fn = _Counted(cost)
    x0 = np.array(x0, dtype=float).ravel()
    f0 = fn(x0)
    if not math.isfinite(f0):
        raise OptimizerError("cost is not finite at the starting point")
    return fn, x0, f0


# -- Nelder-Mead --------------------------------------------------------------

def nelder_mead(cost, x0, xtol=1e-3, ftol=1e-5, max_iter=1000, initial_step=1.0, max_fev=None) -> OptResult:
    """Simplex search with reflection 1, expansion 2, contraction 0.5 and shrink 0.5.

    Stops when the simplex diameter (largest max-norm distance from the best
    vertex) is below ``xtol`` and the cost spread is below ``ftol``, or after
    ``max_iter`` iterations. Ties in cost keep the lower simplex index first.
    """
    fn, x0, f0 = _start(cost, x0)
    n = x0.size
    if max_iter <= 0:
        return OptResult(x0, f0, fn.nfev, False, 0, [f0])
    step = np.broadcast_to(np.asarray(initial_step, dtype=float), (n,))
    simplex = [x0]
    fvals = [f0]
    for i in range(n):
        x = x0.copy()
        x[i] += step[i] if step[i] != 0 else 1e-3
        simplex.append(x)
        fvals.append(fn(x))
    simplex = np.array(simplex)
    fvals = np.array(fvals)

    trace = []
    converged = False
    it = 0
    while it < max_iter:
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        trace.append(float(fvals[0]))
        diameter = float(np.max(np.abs(simplex[1:] - simplex[0])))
        if diameter < xtol and fvals[-1] - fvals[0] < ftol:
            converged = True
            break
        if max_fev is not None and fn.nfev >= max_fev:
            break
        it += 1
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = fn(xr)
        if fr < fvals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = fn(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = centroid + 0.5 * (xr - centroid)  # outside contraction
            fc = fn(xc)
            if fc <= fr:
                simplex[-1], fvals[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)  # inside contraction
            fc = fn(xc)
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
                continue
        best = simplex[0]
        for k in range(1, n + 1):
            simplex[k] = best + 0.5 * (simplex[k] - best)
            fvals[k] = fn(simplex[k])

    order = np.argsort(fvals, kind="stable")
    simplex, fvals = simplex[order], fvals[order]
    if not trace or trace[-1] != fvals[0]:
        trace.append(float(fvals[0]))
    return OptResult(simplex[0].copy(), float(fvals[0]), fn.nfev, converged, it, trace)


# -- Powell ---------------------------------------------------------------------

def _bracket(f, f0, step, max_expand=60):
    """Find ``a < b < c`` (or reversed) along a line with ``f(b) <= f(a), f(c)``.

    ``f`` takes the scalar line parameter; ``f0 = f(0)``. Returns
    ``(a, b, c, fb)`` with ``b`` the best point seen.
    """
    a, fa = 0.0, f0
    b, fb = step, f(step)
    if fb > fa:
        c, fc = -step, f(-step)
        if fc >= fa:
            return -step, 0.0, step, fa
        # descend in the negative direction
        a, fa, b, fb = 0.0, f0, c, fc
        step = -step
    # fb < fa: march outward until the cost rises
    for _ in range(max_expand):
        c = b + (b - a) / GOLDEN
        fc = f(c)
        if fc >= fb:
            return a, b, c, fb
        a, fa, b, fb = b, fb, c, fc
    return a, b, b, fb


def golden_section(f, a, b, c, fb, tol):
    """Minimize ``f`` on the bracket ``(a, b, c)`` to interval width ``tol``."""
    lo, hi = min(a, c), max(a, c)
    x, fx = b, fb
    if hi - lo <= tol:
        return x, fx
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 < f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = f(x2)
    for xi, fi in ((x1, f1), (x2, f2)):
        if fi < fx:
            x, fx = xi, fi
    return x, fx


def line_minimize(fn, x, fx, direction, step, tol):
    """Bracket then golden-section search along ``direction`` (unit length)."""
    d = np.asarray(direction, dtype=float)

    def f(t):
        return fn(x + t * d)

    a, b, c, fb = _bracket(f, fx, step)
    t, ft = golden_section(f, a, b, c, fb, tol)
    if ft < fx:
        return x + t * d, ft, t
    return x, fx, 0.0


def powell(cost, x0, xtol=1e-3, ftol=1e-5, max_iter=200, step=1.0, max_fev=None) -> OptResult:
    """Powell's conjugate-direction method.

    Each outer iteration line-minimizes along every direction in the set,
    then along the net displacement, which replaces the direction of largest
    decrease (Powell's acceptance test). The set is reset to the coordinate
    axes every ``n`` iterations. Converges when an iteration lowers the cost by
    no more than ``ftol`` and moves no more than ``xtol`` in any coordinate.
    ``max_fev`` is checked between outer iterations, so a sweep in progress
    may run past it.
    """
    fn, x, fx = _start(cost, x0)
    n = x.size
    line_tol = xtol / 10.0
    steps = np.broadcast_to(np.asarray(step, dtype=float), (n,))
    dirs = [np.eye(n)[i] for i in range(n)]
    dir_steps = list(steps)
    trace = [fx]
    converged = False
    it = 0
    while it < max_iter:
        if max_fev is not None and fn.nfev >= max_fev:
            break
        if it > 0 and it % n == 0:
            dirs = [np.eye(n)[i] for i in range(n)]
            dir_steps = list(steps)
        it += 1
        x_start, f_start = x.copy(), fx
        biggest, biggest_k = 0.0, 0
        for k, d in enumerate(dirs):
            f_before = fx
            x, fx, _ = line_minimize(fn, x, fx, d, dir_steps[k], line_tol)
            if f_before - fx > biggest:
                biggest, biggest_k = f_before - fx, k
        disp = x - x_start
        dist = float(np.linalg.norm(disp))
        if dist > 0:
            f_ext = fn(x + disp)
            if f_ext < f_start:
                lhs = 2.0 * (f_start - 2.0 * fx + f_ext) * (f_start - fx - biggest) ** 2
                rhs = biggest * (f_start - f_ext) ** 2
                if lhs < rhs:
                    d_new = disp / dist
                    x, fx, _ = line_minimize(fn, x, fx, d_new, dist, line_tol)
                    dirs[biggest_k] = dirs[-1]
                    dir_steps[biggest_k] = dir_steps[-1]
                    dirs[-1] = d_new
                    dir_steps[-1] = max(dist, line_tol)
        trace.append(fx)
        if f_start - fx <= ftol and float(np.max(np.abs(x - x_start))) <= xtol:
            converged = True
            break
    return OptResult(x, fx, fn.nfev, converged, it, trace)


# -- differential evolution -----------------------------------------------------

def _evaluate(fn, points, workers):
    if workers and workers > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return [float(v) for v in pool.map(fn, points)]
    return [float(fn(p)) for p in points]


def differential_evolution(cost, bounds: BoxBounds, pop=30, F=0.7, CR=0.9, max_gen=100, seed=0,
                           x0=None, ftol=1e-12, workers=1) -> OptResult:
    """DE/rand/1/bin with generation-synchronous greedy selection.

    ``x0``, when given, is clipped into the bounds and used as population
    member 0. Trial vectors are clipped to the bounds. Stops early when the
    population cost spread falls below ``ftol``.
    """
    if pop < 4:
        raise OptimizerError(f"population must be at least 4, got {pop}")
    if not (0.0 <= CR <= 1.0) or F <= 0:
        raise OptimizerError("need F > 0 and 0 <= CR <= 1")
    rng = np.random.default_rng(seed)
    lo, hi = bounds.lower, bounds.upper
    n = lo.size
    P = lo + rng.random((pop, n)) * (hi - lo)
    if x0 is not None:
        P[0] = bounds.clip(np.asarray(x0, dtype=float))
    nfev = 0

    def counted(x):
        v = float(cost(x))
        return v if math.isfinite(v) else math.inf

    fit = np.array(_evaluate(counted, list(P), workers))
    nfev += pop
    best = int(np.argmin(fit))
    trace = [float(fit[best])]
    converged = False
    gen = 0
    idx = np.arange(pop)
    for gen in range(1, max_gen + 1):
        trials = np.empty_like(P)
        for i in range(pop):
            a, b, c = rng.choice(idx[idx != i], 3, replace=False)
            mutant = P[a] + F * (P[b] - P[c])
            cross = rng.random(n) < CR
            cross[rng.integers(n)] = True
            trials[i] = np.clip(np.where(cross, mutant, P[i]), lo, hi)
        tf = np.array(_evaluate(counted, list(trials), workers))
        nfev += pop
        better = tf <= fit
        P[better] = trials[better]
        fit[better] = tf[better]
        best = int(np.argmin(fit))
        trace.append(float(fit[best]))
        if np.isfinite(fit).all() and fit.max() - fit.min() < ftol:
            converged = True
            break
    return OptResult(P[best].copy(), float(fit[best]), nfev, converged, gen, trace,
                     {"population": P.copy(), "fitness": fit.copy()})


# -- hybrid -------------------------------------------------------------------------

def hybrid_powell_nm(cost, x0, xtol=1e-3, ftol=1e-5, max_rounds=3, powell_max_iter=200,
                     nm_max_iter=1000, step=1.0, initial_step=None, max_fev=None) -> OptResult:
    """Alternate Powell and Nelder-Mead (warm-started at Powell's best).

    Rounds repeat until neither method lowers the cost by more than ``ftol``
    or ``max_rounds`` is reached. Returns the best point over all rounds.
    """
    fn, x, fx = _start(cost, x0)
    if initial_step is None:
        initial_step = step
    trace = [fx]
    rounds = 0
    converged = False
    per_round = []
    for rounds in range(1, max_rounds + 1):
        budget = None if max_fev is None else max(max_fev - fn.nfev, 1)
        rp = powell(fn, x, xtol=xtol, ftol=ftol, max_iter=powell_max_iter, step=step, max_fev=budget)
        gain_p = fx - rp.fun
        if rp.fun < fx:
            x, fx = rp.x, rp.fun
        trace.append(fx)
        budget = None if max_fev is None else max(max_fev - fn.nfev, 1)
        rn = nelder_mead(fn, x, xtol=xtol, ftol=ftol, max_iter=nm_max_iter, initial_step=initial_step,
                         max_fev=budget)
        gain_n = fx - rn.fun
        if rn.fun < fx:
            x, fx = rn.x, rn.fun
        trace.append(fx)
        per_round.append({"powell_gain": float(gain_p), "nm_gain": float(gain_n),
                          "powell_nfev": rp.nfev, "nm_nfev": rn.nfev})
        if gain_p <= ftol and gain_n <= ftol:
            converged = True
            break
        if max_fev is not None and fn.nfev >= max_fev:
            break
    if fn.best_f < fx:
        x, fx = fn.best_x, fn.best_f
    return OptResult(np.asarray(x, dtype=float), float(fx), fn.nfev, converged, rounds, trace,
                     {"rounds": rounds, "per_round": per_round})
