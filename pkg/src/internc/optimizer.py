"""Rate allocation search: projection onto the feasible set and SPSA.

The free variables are the innovative rates ``r[(i, j)][t]`` on links whose
tail is not a source, restricted to types whose sources all reach ``i``
(``inter`` mode) or to singleton types (``intra`` mode).

The constraints compile into a short straight-line program over the variable
vector.  Running it in topological node order with ``apply=True`` projects a
raw vector onto the feasible set by proportional down-scaling; running it with
``apply=False`` measures how far a raw vector is from feasibility, which feeds
the quadratic penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from numba import njit

from .allocation import C3_TOL, RateAllocation, check_feasible, free_types
from .delay import DelayReport, UnreachableSourceError, average_delay, expected_slots
from .lattice import is_singleton, is_subset, members, submasks
from .records import write_csv
from .topology import Topology

# instruction opcodes
_CAP = 0  # const + sum(y[a]) <= bound, fix by scaling y[a]
_RATIO = 1  # sum(y[a]) <= const + sum(y[b]), fix by scaling y[a]
_ZERO = 2  # y[v] must be 0 when const + sum(y[a]) < C3_TOL

UNREACHABLE_PENALTY = 1e6
TRACE_HEADER = ("iteration", "restart", "objective")


class OptimizationError(RuntimeError):
    def __init__(self, message: str, snapshot: np.ndarray | None = None):
        super().__init__(message)
        self.snapshot = snapshot


@njit(cache=True)
def _gsum(y, ptr, idx, g):
    s = 0.0
    for k in range(ptr[g], ptr[g + 1]):
        s += y[idx[k]]
    return s


@njit(cache=True)
def _gscale(y, ptr, idx, g, f):
    for k in range(ptr[g], ptr[g + 1]):
        y[idx[k]] *= f


@njit(cache=True)
def _run_program(x, ops, ga, gb, var, const, bound, ptr, idx, apply, c3_tol):
    """Project ``x`` (apply=True, returns the projection) or return the
    squared violation of the raw vector (apply=False, returns a 1-vector)."""
    if apply:
        y = np.maximum(x, 0.0)
    else:
        y = x
    viol = 0.0
    if not apply:
        for v in range(len(x)):
            if x[v] < 0.0:
                viol += x[v] * x[v]
    for k in range(len(ops)):
        op = ops[k]
        if op == 0:
            tot = const[k] + _gsum(y, ptr, idx, ga[k])
            if tot > bound[k]:
                if apply:
                    part = tot - const[k]
                    room = bound[k] - const[k]
                    f = room / part if room > 0.0 and part > 0.0 else 0.0
                    _gscale(y, ptr, idx, ga[k], f)
                else:
                    viol += (tot - bound[k]) ** 2
        elif op == 1:
            lhs = _gsum(y, ptr, idx, ga[k])
            rhs = const[k] + _gsum(y, ptr, idx, gb[k])
            if lhs > rhs:
                if apply:
                    f = rhs / lhs if rhs > 0.0 else 0.0
                    _gscale(y, ptr, idx, ga[k], f)
                else:
                    viol += (lhs - rhs) ** 2
        else:
            if const[k] + _gsum(y, ptr, idx, ga[k]) < c3_tol:
                v = var[k]
                if apply:
                    y[v] = 0.0
                elif y[v] > 0.0:
                    viol += y[v] * y[v]
    if apply:
        return y
    out = np.empty(1)
    out[0] = viol
    return out


class Layout:
    """Variable vector <-> allocation mapping plus the compiled constraint program."""

    def __init__(self, topology: Topology, mode: str = "inter"):
        self.topology = topology
        self.mode = mode
        keys: list[tuple[tuple[str, str], int]] = []
        for node in topology.topo_order:
            if topology.is_source(node):
                continue
            for link in topology.out_links(node):
                for t in free_types(topology, link, mode):
                    keys.append((link.key, t))
        self.keys = keys
        self.index = {k: i for i, k in enumerate(keys)}
        self.base = RateAllocation.empty(topology)
        self._compile()

    @property
    def size(self) -> int:
        return len(self.keys)

    # --- conversion ---------------------------------------------------------

    def to_allocation(self, y: np.ndarray) -> RateAllocation:
        alloc = self.base.copy()
        for (key, t), v in zip(self.keys, y):
            alloc.set(key, t, float(v))
        return alloc

    def from_allocation(self, alloc: RateAllocation) -> np.ndarray:
        return np.array([alloc.rate(k, t) for k, t in self.keys], dtype=np.float64)

    # --- constraint program -------------------------------------------------

    def _fixed_in(self, node: str) -> dict[int, float]:
        out: dict[int, float] = {}
        for link in self.topology.in_links(node):
            if self.topology.is_source(link.tail):
                for t, r in self.base.rates[link.key].items():
                    out[t] = out.get(t, 0.0) + r
        return out

    def _compile(self) -> None:
        topo = self.topology
        groups: list[list[int]] = []
        ops, ga, gb, var, const, bound = [], [], [], [], [], []

        def group(ix: list[int]) -> int:
            groups.append(ix)
            return len(groups) - 1

        def emit(op, a, b=0, v=-1, c=0.0, bd=0.0):
            ops.append(op), ga.append(a), gb.append(b), var.append(v)
            const.append(c), bound.append(bd)

        emission = [self.base.source_emission(s) for s in range(len(topo.sources))]
        for node in topo.topo_order:
            if topo.is_source(node):
                continue
            avail = topo.available[node]
            fixed = self._fixed_in(node)
            in_vars = [
                (self.index[(l.key, t)], t)
                for l in topo.in_links(node)
                if not topo.is_source(l.tail)
                for t in free_types(topo, l, self.mode)
            ]

            def fixed_sum(u: int, s_bit: int) -> float:
                return sum(r for t, r in fixed.items() if t & s_bit and is_subset(t, u))

            def in_group(u: int, s_bit: int) -> list[int]:
                return [v for v, t in in_vars if t & s_bit and is_subset(t, u)]

            # C5: the widest type set gives the binding row for each source
            for s in members(avail):
                sb = 1 << s
                emit(_CAP, group(in_group(avail, sb)), c=fixed_sum(avail, sb), bd=emission[s])

            for link in topo.out_links(node):
                out_vars = [(self.index[(link.key, t)], t) for t in free_types(topo, link, self.mode)]
                for v, t in out_vars:
                    for s in members(t):
                        sb = 1 << s
                        emit(_ZERO, group(in_group(t, sb)), v=v, c=fixed_sum(t, sb))
                for u in submasks(avail):
                    for s in members(u):
                        sb = 1 << s
                        a = [v for v, t in out_vars if t & sb and is_subset(t, u)]
                        if not a:
                            continue
                        emit(_RATIO, group(a), group(in_group(u, sb)), c=fixed_sum(u, sb))
                emit(_CAP, group([v for v, _ in out_vars]), bd=link.effective)

        self._ops = np.array(ops, dtype=np.int64)
        self._ga = np.array(ga, dtype=np.int64)
        self._gb = np.array(gb, dtype=np.int64)
        self._var = np.array(var, dtype=np.int64)
        self._const = np.array(const, dtype=np.float64)
        self._bound = np.array(bound, dtype=np.float64)
        self._ptr = np.cumsum([0] + [len(g) for g in groups]).astype(np.int64)
        self._idx = np.array([i for g in groups for i in g], dtype=np.int64)

    def _program(self, x: np.ndarray, apply: bool) -> np.ndarray:
        return _run_program(
            np.ascontiguousarray(x, dtype=np.float64),
            self._ops, self._ga, self._gb, self._var, self._const, self._bound,
            self._ptr, self._idx, apply, C3_TOL,
        )

    def project(self, x: np.ndarray) -> np.ndarray:
        return self._program(x, True)

    def violation(self, x: np.ndarray) -> float:
        """Sum of squared constraint violations of a raw vector."""
        return float(self._program(x, False)[0])

    # --- objective ----------------------------------------------------------

    @cached_property
    def _clients(self):
        topo = self.topology
        out = []
        for c in topo.clients:
            support: set[int] = set()
            fixed: dict[int, float] = {}
            rows: list[tuple[int, int]] = []
            for l in topo.in_links(c):
                if topo.is_source(l.tail):
                    for t, r in self.base.rates[l.key].items():
                        fixed[t] = fixed.get(t, 0.0) + r
                        support.add(t)
                else:
                    for t in free_types(topo, l, self.mode):
                        rows.append((self.index[(l.key, t)], t))
                        support.add(t)
            types = tuple(sorted(support))
            m = np.zeros((len(types), self.size))
            for v, t in rows:
                m[types.index(t), v] = 1.0
            b = np.array([fixed.get(t, 0.0) for t in types])
            cap = sum(l.capacity for l in topo.in_links(c))
            target = topo.source_index[topo.subscriptions[c]]
            out.append((c, types, m, b, cap, target))
        return out

    def client_delays(self, y: np.ndarray) -> np.ndarray:
        """Expected delay per client for a feasible vector (inf if unreachable)."""
        out = np.empty(len(self._clients))
        sizes = self.topology.sizes
        for i, (c, types, m, b, cap, target) in enumerate(self._clients):
            p = (m @ y + b) / cap
            try:
                out[i] = expected_slots(dict(zip(types, p)), target, sizes, support=types) / cap
            except UnreachableSourceError:
                out[i] = np.inf
        return out

    def mean_delay(self, y: np.ndarray) -> float:
        return float(np.mean(self.client_delays(y)))

    def mixed_mask(self) -> np.ndarray:
        return np.array([not is_singleton(t) for _, t in self.keys])

    def var_scale(self) -> np.ndarray:
        return np.array([self.topology.link_map[k].effective for k, _ in self.keys])

    def mean_capacity(self) -> float:
        caps = [self.topology.link_map[k].effective for k, _ in self.keys]
        return float(np.mean(caps)) if caps else 1.0

    def uniform_point(self) -> np.ndarray:
        """Every free link split evenly over its allowed types, then projected."""
        x = np.empty(self.size)
        counts: dict[tuple[str, str], int] = {}
        for k, _ in self.keys:
            counts[k] = counts.get(k, 0) + 1
        for i, (k, _) in enumerate(self.keys):
            x[i] = self.topology.link_map[k].effective / counts[k]
        return self.project(x)

    @cached_property
    def _wanted_below(self) -> dict[str, int]:
        """Mask of sources subscribed by clients reachable from each node."""
        topo = self.topology
        out: dict[str, int] = {}
        for n in reversed(topo.topo_order):
            m = 0
            if n in topo.subscriptions:
                m |= 1 << topo.source_index[topo.subscriptions[n]]
            for ch in topo.children(n):
                m |= out[ch]
            out[n] = m
        return out

    def demand_point(self) -> np.ndarray:
        """Even split over the types that carry a source wanted downstream."""
        wanted = self._wanted_below
        useful = np.array([bool(t & wanted[k[1]]) for k, t in self.keys])
        x = np.zeros(self.size)
        for k in {k for k, _ in self.keys}:
            sel = np.array([kk == k for kk, _ in self.keys]) & useful
            if sel.any():
                x[sel] = self.topology.link_map[k].effective / sel.sum()
        return self.project(x)

    def random_point(self, rng: np.random.Generator) -> np.ndarray:
        caps = np.array([self.topology.link_map[k].effective for k, _ in self.keys])
        return self.project(rng.uniform(0.0, 1.0, self.size) * caps)


def project_feasible(topology: Topology, raw: np.ndarray, mode: str = "inter") -> RateAllocation:
    layout = Layout(topology, mode)
    return layout.to_allocation(layout.project(np.asarray(raw, dtype=np.float64)))


@dataclass(frozen=True)
class SpsaConfig:
    """SPSA schedule: a_k = a / (A + k + 1)^alpha, c_k = c / (k + 1)^gamma.

    ``a``, ``A`` and ``c`` default to data-driven values when left as None:
    ``A`` is 10% of the budget, ``c`` is 1% of the mean link capacity and ``a``
    is calibrated so the first step moves about 2% of the mean capacity.
    """

    iterations: int = 5000
    restarts: int = 8
    a: float | None = None
    A: float | None = None
    alpha: float = 0.602
    c: float | None = None
    gamma: float = 0.167
    penalty: float = 0.05  # relative to D(x0) / capacity^2, see optimize()
    max_step: float = 0.1  # per-component step cap, as a fraction of link capacity
    tie_rtol: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be positive")
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0.5, 1]")
        if not 1.0 / 6.0 < self.gamma <= 0.5:
            raise ValueError("gamma must lie in (1/6, 1/2]")
        for name in ("a", "c"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        if self.penalty < 0:
            raise ValueError("penalty must be non-negative")


@dataclass
class OptimizeResult:
    allocation: RateAllocation
    report: DelayReport
    trace: list[tuple[int, int, float]] = field(default_factory=list)

    def __iter__(self):
        return iter((self.allocation, self.report, self.trace))


def _spsa_run(
    layout: Layout,
    objective: Callable[[np.ndarray], tuple[float, float, np.ndarray]],
    x0: np.ndarray,
    cfg: SpsaConfig,
    rng: np.random.Generator,
    restart: int,
    trace: list,
):
    # search in capacity-normalised coordinates: perturbations and steps are
    # fractions of each link's own effective bandwidth
    n = layout.size
    scale = layout.var_scale()
    big_a = cfg.A if cfg.A is not None else 0.1 * cfg.iterations
    c0 = cfg.c / layout.mean_capacity() if cfg.c is not None else 0.01

    x = layout.project(x0)
    best_y = x
    best_d = layout.mean_delay(x)

    def grad(xk, ck):
        delta = rng.choice((-1.0, 1.0), size=n)
        fp, dp, yp = objective(xk + ck * scale * delta)
        fm, dm, ym = objective(xk - ck * scale * delta)
        return (fp - fm) / (2.0 * ck) * delta, ((fp + fm) / 2.0), ((dp, yp), (dm, ym))

    a0 = cfg.a
    if a0 is None:
        mags = []
        for _ in range(4):
            g, _, _ = grad(x, c0)
            mags.append(np.mean(np.abs(g)))
        mag = float(np.mean(mags))
        a0 = 0.02 * (big_a + 1) ** cfg.alpha / mag if mag > 0 else 1.0

    for k in range(cfg.iterations):
        ck = c0 / (k + 1) ** cfg.gamma
        ak = a0 / (big_a + k + 1) ** cfg.alpha
        g, fmid, cands = grad(x, ck)
        for d, y in cands:
            if d < best_d:
                best_d, best_y = d, y
        x = x - scale * np.clip(ak * g, -cfg.max_step, cfg.max_step)
        trace.append((k, restart, fmid))

    _, d, y = objective(x)
    if d < best_d:
        best_d, best_y = d, y
    return best_d, best_y


def optimize(topology: Topology, cfg: SpsaConfig = SpsaConfig(), mode: str = "inter") -> OptimizeResult:
    """Minimise the mean expected decoding delay over feasible allocations.

    The objective at a raw iterate is the mean delay of its projection plus a
    quadratic penalty on the violation of the raw vector.  The penalty weight
    is ``cfg.penalty * D0 / cap**2`` (``D0`` the delay at the evenly split
    starting point, ``cap`` the mean link capacity) so that it means the same
    thing at every capacity scale.  The best
    projected point seen is returned.  In ``inter`` mode the intra-only
    optimum is computed first; if no mixed allocation beats it by more than
    ``tie_rtol`` the intra one is kept, preferring the simpler coding strategy.
    """
    for c in topology.clients:
        if not topology.available[c] >> topology.source_index[topology.subscriptions[c]] & 1:
            raise UnreachableSourceError(f"client {c} has no path from {topology.subscriptions[c]}")
    layout = Layout(topology, mode)
    trace: list[tuple[int, int, float]] = []
    uniform = layout.uniform_point()
    d0 = layout.mean_delay(uniform)
    weight = cfg.penalty * (d0 if np.isfinite(d0) else 1.0) / layout.mean_capacity() ** 2

    def objective(x):
        y = layout.project(x)
        d = layout.mean_delay(y)
        if np.isnan(d):
            raise OptimizationError("objective is not a number", snapshot=x.copy())
        d_eff = d if np.isfinite(d) else UNREACHABLE_PENALTY
        return d_eff + weight * layout.violation(x), d, y

    warm = None
    if mode == "inter":
        # the intra optimum is a feasible inter point; it competes at the end
        warm = optimize(topology, cfg, "intra")
        trace.extend((k, -1, f) for k, _, f in warm.trace)  # intra pre-pass, restart -1
    starts = [uniform, layout.demand_point()] if mode == "inter" else [layout.demand_point(), uniform]

    best_d, best_y = np.inf, None
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r])
        x0 = starts[r] if r < len(starts) else layout.random_point(rng)
        d, y = _spsa_run(layout, objective, x0, cfg, rng, r, trace)
        if d < best_d:
            best_d, best_y = d, y

    if best_y is None or not np.isfinite(best_d):
        raise UnreachableSourceError("no allocation found in which every client decodes")

    if warm is not None and warm.report.average <= best_d * (1.0 + cfg.tie_rtol):
        alloc = layout.to_allocation(layout.from_allocation(warm.allocation))
    else:
        alloc = layout.to_allocation(best_y)
        mixed = layout.mixed_mask()
        if mixed.any() and best_y[mixed].any():
            y0 = layout.project(np.where(mixed, 0.0, best_y))
            if layout.mean_delay(y0) <= best_d * (1.0 + cfg.tie_rtol):
                alloc = layout.to_allocation(y0)

    bad = check_feasible(topology, alloc)
    if bad:
        raise OptimizationError("optimizer produced an infeasible allocation: " + "; ".join(map(str, bad[:5])))
    return OptimizeResult(alloc, average_delay(topology, alloc), trace)


def write_trace(path, trace) -> None:
    write_csv(path, TRACE_HEADER, trace)
