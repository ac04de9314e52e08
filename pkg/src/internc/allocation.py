"""Innovative-rate allocations and their feasibility constraints.

An allocation assigns an innovative rate ``r[(i, j)][t]`` (packets/sec) to every
link and packet type.  Links leaving a source are not free: the source pushes
its own symbols at ``min(rate, c) * (1 - loss)`` as a singleton type.

The constraints, checked literally for every type ``t`` and source ``s`` in it:

* C1  rates are non-negative;
* C2  a link's total rate fits its effective bandwidth ``c (1 - loss)``;
* C3  a type may only be sent if every one of its sources reaches the node;
* C4  per outgoing link, the rate of types inside ``t`` that carry ``s`` is at
      most the matching rate flowing into the node;
* C5  that incoming rate is at most what source ``s`` emits in total.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

from .lattice import is_singleton, is_subset, members, submasks
from .records import read_csv, write_csv
from .topology import Link, Topology

FEAS_TOL = 1e-9
C3_TOL = 1e-9

ALLOCATION_HEADER = ("link_from", "link_to", "type", "r_innovative", "f_flow", "w_probability")


@dataclass(frozen=True)
class Violation:
    constraint: str
    where: str
    amount: float

    def __str__(self) -> str:
        return f"{self.constraint} at {self.where}: off by {self.amount:.3g}"


@dataclass
class RateAllocation:
    topology: Topology
    rates: dict[tuple[str, str], dict[int, float]] = field(default_factory=dict)

    @classmethod
    def empty(cls, topology: Topology) -> "RateAllocation":
        """All free rates zero, source links at their fixed emission rate."""
        rates: dict[tuple[str, str], dict[int, float]] = {}
        for link in topology.links:
            if topology.is_source(link.tail):
                bit = 1 << topology.source_index[link.tail]
                rates[link.key] = {bit: topology.source_link_rate(link)}
            else:
                rates[link.key] = {}
        return cls(topology, rates)

    def rate(self, key: tuple[str, str], t: int) -> float:
        return self.rates.get(key, {}).get(t, 0.0)

    def set(self, key: tuple[str, str], t: int, value: float) -> None:
        self.rates.setdefault(key, {})[t] = float(value)

    def link_total(self, key: tuple[str, str]) -> float:
        return sum(self.rates.get(key, {}).values())

    def inflow(self, node: str) -> dict[int, float]:
        out: dict[int, float] = {}
        for link in self.topology.in_links(node):
            for t, r in self.rates.get(link.key, {}).items():
                out[t] = out.get(t, 0.0) + r
        return out

    def source_emission(self, source_index: int) -> float:
        """Total innovative rate leaving source ``source_index`` over all its links."""
        name = self.topology.sources[source_index].name
        return sum(self.link_total(l.key) for l in self.topology.out_links(name))

    def total_rate(self, free_only: bool = True) -> float:
        return sum(
            self.link_total(l.key)
            for l in self.topology.links
            if not (free_only and self.topology.is_source(l.tail))
        )

    def mixed_rate(self) -> float:
        return sum(
            r for rs in self.rates.values() for t, r in rs.items() if not is_singleton(t)
        )

    def mixed_share(self) -> float:
        total = self.total_rate()
        return self.mixed_rate() / total if total > 0 else 0.0

    def items(self) -> Iterator[tuple[Link, int, float]]:
        """(link, type, rate) in link declaration order, types ascending."""
        for link in self.topology.links:
            for t in sorted(self.rates.get(link.key, {})):
                yield link, t, self.rates[link.key][t]

    def copy(self) -> "RateAllocation":
        return RateAllocation(self.topology, {k: dict(v) for k, v in self.rates.items()})


def _sum_over(rates: Mapping[int, float], t: int, s_bit: int) -> float:
    """Sum of rates over T_{t,s}: types inside ``t`` that carry source ``s``."""
    return sum(r for u, r in rates.items() if u & s_bit and is_subset(u, t))


def check_feasible(topology: Topology, alloc: RateAllocation, tol: float = FEAS_TOL) -> list[Violation]:
    out: list[Violation] = []
    n_src = len(topology.sources)
    all_types = topology.lattice.all_types
    for key in alloc.rates:
        if key not in topology.link_map:
            out.append(Violation("shape", f"{key[0]}->{key[1]}", float("inf")))

    for link in topology.links:
        where = f"{link.tail}->{link.head}"
        rs = alloc.rates.get(link.key, {})
        for t, r in rs.items():
            if not 0 < t < 1 << n_src:
                out.append(Violation("shape", f"{where} type {t}", float("inf")))
            elif r < -tol:
                out.append(Violation("C1", f"{where} {topology.lattice.label(t)}", -r))
        excess = sum(rs.values()) - link.effective
        if excess > tol:
            out.append(Violation("C2", where, excess))
        if topology.is_source(link.tail):
            continue

        inflow = alloc.inflow(link.tail)
        for t, r in rs.items():
            if r <= tol or not 0 < t < 1 << n_src:
                continue
            factors = [_sum_over(inflow, t, 1 << s) for s in members(t)]
            if min(factors) < C3_TOL:
                out.append(Violation("C3", f"{where} {topology.lattice.label(t)}", r))
        for t in all_types:
            for s in members(t):
                lhs = _sum_over(rs, t, 1 << s)
                rhs = _sum_over(inflow, t, 1 << s)
                if lhs - rhs > tol:
                    out.append(
                        Violation("C4", f"{where} {topology.lattice.label(t)}/{topology.sources[s].name}", lhs - rhs)
                    )

    emission = [alloc.source_emission(s) for s in range(n_src)]
    for node in topology.nodes:
        if topology.is_source(node):
            continue
        inflow = alloc.inflow(node)
        for t in all_types:
            for s in members(t):
                excess = _sum_over(inflow, t, 1 << s) - emission[s]
                if excess > tol:
                    out.append(
                        Violation("C5", f"{node} {topology.lattice.label(t)}/{topology.sources[s].name}", excess)
                    )
    return out


def derive_forwarding(alloc: RateAllocation) -> dict[tuple[str, str], dict[int, float]]:
    """Per-link type distribution ``w``; ``1 - sum(w)`` is the idle probability.

    Free links send at full capacity, split in proportion to the innovative
    rates (``f = r / sum(r) * c`` and ``w = f / c``).  Source links send their
    own symbols at the source rate, so ``w = min(rate, c) / c`` there.
    """
    topo = alloc.topology
    out: dict[tuple[str, str], dict[int, float]] = {}
    for link in topo.links:
        rs = {t: r for t, r in alloc.rates.get(link.key, {}).items() if r > 0}
        if topo.is_source(link.tail):
            src = topo.sources[topo.source_index[link.tail]]
            out[link.key] = {t: min(src.rate, link.capacity) / link.capacity for t in rs}
            continue
        total = sum(rs.values())
        out[link.key] = {t: r / total for t, r in rs.items()} if total > 0 else {}
    return out


def allocation_rows(alloc: RateAllocation) -> list[tuple]:
    w = derive_forwarding(alloc)
    lab = alloc.topology.lattice.label
    rows = []
    for link, t, r in alloc.items():
        wt = w[link.key].get(t, 0.0)
        rows.append((link.tail, link.head, lab(t), r, wt * link.capacity, wt))
    return rows


def write_allocation(path: str | Path, alloc: RateAllocation) -> None:
    write_csv(path, ALLOCATION_HEADER, allocation_rows(alloc))


def read_allocation(path: str | Path, topology: Topology) -> RateAllocation:
    """Load an allocation CSV; rows for unknown links or sources raise ValueError."""
    alloc = RateAllocation(topology, {l.key: {} for l in topology.links})
    for i, row in enumerate(read_csv(path), start=2):
        key = (row["link_from"], row["link_to"])
        if key not in topology.link_map:
            raise ValueError(f"line {i}: no link {key[0]}->{key[1]} in the topology")
        t = topology.lattice.mask(p for p in row["type"].split("+") if p)
        alloc.set(key, t, float(row["r_innovative"]))
    return alloc


def free_types(topology: Topology, link: Link, mode: str = "inter") -> list[int]:
    """Types that may carry nonzero rate on a free link under ``mode``."""
    avail = topology.available[link.tail]
    types = submasks(avail) if avail else []
    if mode == "intra":
        types = [t for t in types if is_singleton(t)]
    elif mode != "inter":
        raise ValueError(f"mode must be 'inter' or 'intra', got {mode!r}")
    return types
