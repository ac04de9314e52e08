"""Network model: a DAG of sources, helper nodes and clients with lossy links.

Topology documents are YAML (JSON also parses, being a YAML subset) with four
top-level keys::

    nodes:         [{name, role}]            role in {source, intermediate, client}
    links:         [{from, to, capacity, loss, group?}]
    sources:       [{name, symbols, rate}]
    subscriptions: [{client, source}]

``group`` is an optional tag used by capacity sweeps (e.g. ``numbered``, ``dashed``).
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable

import yaml

from .lattice import TypeLattice

ROLES = ("source", "intermediate", "client")
FIXTURES = ("butterfly", "topology1", "topology2", "irregular")


class TopologyError(ValueError):
    """Malformed or invalid topology document."""


class TopologyValidationError(TopologyError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass(frozen=True)
class Link:
    tail: str
    head: str
    capacity: float
    loss: float = 0.0
    group: str = ""

    @property
    def key(self) -> tuple[str, str]:
        return (self.tail, self.head)

    @property
    def effective(self) -> float:
        """Capacity net of losses, c(1 - pi)."""
        return self.capacity * (1.0 - self.loss)


@dataclass(frozen=True)
class Source:
    name: str
    symbols: int
    rate: float


@dataclass(frozen=True)
class Topology:
    roles: dict[str, str]
    links: tuple[Link, ...]
    sources: tuple[Source, ...]
    subscriptions: dict[str, str]
    name: str = field(default="", compare=False)

    # --- structure -------------------------------------------------------------

    @cached_property
    def nodes(self) -> list[str]:
        return list(self.roles)

    @cached_property
    def lattice(self) -> TypeLattice:
        return TypeLattice(tuple(s.name for s in self.sources))

    @cached_property
    def source_index(self) -> dict[str, int]:
        return {s.name: i for i, s in enumerate(self.sources)}

    @cached_property
    def sizes(self) -> tuple[int, ...]:
        return tuple(s.symbols for s in self.sources)

    @cached_property
    def clients(self) -> list[str]:
        return [n for n, r in self.roles.items() if r == "client"]

    @cached_property
    def link_map(self) -> dict[tuple[str, str], Link]:
        return {l.key: l for l in self.links}

    @cached_property
    def _parents(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n: [] for n in self.roles}
        for l in self.links:
            out[l.head].append(l.tail)
        return out

    @cached_property
    def _children(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n: [] for n in self.roles}
        for l in self.links:
            out[l.tail].append(l.head)
        return out

    def parents(self, node: str) -> set[str]:
        self._check_node(node)
        return set(self._parents[node])

    def children(self, node: str) -> set[str]:
        self._check_node(node)
        return set(self._children[node])

    def in_links(self, node: str) -> list[Link]:
        self._check_node(node)
        return [self.link_map[(p, node)] for p in self._parents[node]]

    def out_links(self, node: str) -> list[Link]:
        self._check_node(node)
        return [self.link_map[(node, c)] for c in self._children[node]]

    def is_source(self, node: str) -> bool:
        return self.roles[node] == "source"

    @cached_property
    def topo_order(self) -> list[str]:
        """Kahn's algorithm, ties broken by node name."""
        indeg = {n: len(self._parents[n]) for n in self.roles}
        heap = [n for n, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            n = heapq.heappop(heap)
            order.append(n)
            for c in self._children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(heap, c)
        if len(order) != len(self.roles):
            raise TopologyValidationError(["graph has a directed cycle"])
        return order

    @cached_property
    def available(self) -> dict[str, int]:
        """Bitmask of the sources that can reach each node along some path."""
        out: dict[str, int] = {}
        for n in self.topo_order:
            mask = 0
            if self.is_source(n):
                mask = 1 << self.source_index[n]
            for p in self._parents[n]:
                mask |= out[p]
            out[n] = mask
        return out

    def client_slot_time(self, client: str) -> float:
        """d_c: seconds per received packet slot, 1 / total incoming capacity."""
        total = sum(l.capacity for l in self.in_links(client))
        if total <= 0:
            raise TopologyError(f"client {client} has no incoming capacity")
        return 1.0 / total

    def source_link_rate(self, link: Link) -> float:
        """Innovative rate a source pushes on one of its outgoing links."""
        src = self.sources[self.source_index[link.tail]]
        return min(src.rate, link.capacity) * (1.0 - link.loss)

    def _check_node(self, node: str) -> None:
        if node not in self.roles:
            raise KeyError(f"unknown node {node!r}")

    # --- variants ---------------------------------------------------------------

    def with_links(self, links: Iterable[Link]) -> "Topology":
        return replace(self, links=tuple(links))

    def with_capacity(self, value: float, group: str | None = None) -> "Topology":
        """Set capacity of every link (or of one group)."""
        return self.with_links(
            replace(l, capacity=float(value)) if group is None or l.group == group else l
            for l in self.links
        )

    def with_loss(self, loss: float) -> "Topology":
        return self.with_links(replace(l, loss=float(loss)) for l in self.links)

    def drop_group(self, group: str) -> "Topology":
        return self.with_links(l for l in self.links if l.group != group)

    def with_symbols(self, n: int) -> "Topology":
        return replace(
            self, sources=tuple(replace(s, symbols=int(n)) for s in self.sources)
        )

    def with_source_rate(self, rate: float) -> "Topology":
        return replace(
            self, sources=tuple(replace(s, rate=float(rate)) for s in self.sources)
        )

    # --- serialisation ----------------------------------------------------------

    def to_dict(self) -> dict:
        links = []
        for l in self.links:
            d = {"from": l.tail, "to": l.head, "capacity": l.capacity, "loss": l.loss}
            if l.group:
                d["group"] = l.group
            links.append(d)
        return {
            "nodes": [{"name": n, "role": r} for n, r in self.roles.items()],
            "links": links,
            "sources": [{"name": s.name, "symbols": s.symbols, "rate": s.rate} for s in self.sources],
            "subscriptions": [{"client": c, "source": s} for c, s in self.subscriptions.items()],
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def digest(self) -> str:
        return hashlib.sha256(self.to_yaml().encode()).hexdigest()[:16]


def validate(t: Topology) -> list[str]:
    """Names of violated invariants; empty when the topology is valid."""
    errs: list[str] = []
    for n, r in t.roles.items():
        if r not in ROLES:
            errs.append(f"node {n}: unknown role {r!r}")
    seen = set()
    for l in t.links:
        for end in (l.tail, l.head):
            if end not in t.roles:
                errs.append(f"link {l.tail}->{l.head}: unknown node {end!r}")
        if l.key in seen:
            errs.append(f"link {l.tail}->{l.head}: duplicate")
        seen.add(l.key)
        if l.tail == l.head:
            errs.append(f"link {l.tail}->{l.head}: self loop")
        if not l.capacity > 0:
            errs.append(f"link {l.tail}->{l.head}: capacity must be > 0")
        if not 0 <= l.loss < 1:
            errs.append(f"link {l.tail}->{l.head}: loss must be in [0, 1)")
        if l.head in t.roles and t.roles[l.head] == "source":
            errs.append(f"link {l.tail}->{l.head}: sources cannot have incoming links")
    if errs:
        return errs
    src_nodes = {n for n, r in t.roles.items() if r == "source"}
    declared = [s.name for s in t.sources]
    if len(set(declared)) != len(declared):
        errs.append("sources: duplicate entries")
    for s in t.sources:
        if s.name not in src_nodes:
            errs.append(f"source {s.name}: not a node with role source")
        if s.symbols < 1:
            errs.append(f"source {s.name}: symbols must be >= 1")
        if not s.rate > 0:
            errs.append(f"source {s.name}: rate must be > 0")
    for n in sorted(src_nodes - set(declared)):
        errs.append(f"source node {n}: missing from sources list")
    if not declared:
        errs.append("no sources declared")
    elif len(declared) > 8:
        errs.append("at most 8 sources are supported")
    try:
        t.topo_order
    except TopologyValidationError:
        errs.append("graph is not acyclic (cycle detected)")
        return errs
    for c in t.clients:
        if c not in t.subscriptions:
            errs.append(f"client {c}: no subscription")
        if not t._parents[c]:
            errs.append(f"client {c}: orphan (no incoming links)")
    for c, s in t.subscriptions.items():
        if t.roles.get(c) != "client":
            errs.append(f"subscription {c}->{s}: {c!r} is not a client")
            continue
        if s not in declared:
            errs.append(f"subscription {c}->{s}: unknown source {s!r}")
            continue
        if not errs and not t.available[c] >> t.source_index[s] & 1:
            errs.append(f"subscription {c}->{s}: no path from source to client")
    return errs


def _req(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise TopologyError(f"{where}: missing field {key!r}")
    return d[key]


def from_dict(doc: dict, name: str = "", check: bool = True) -> Topology:
    if not isinstance(doc, dict):
        raise TopologyError("topology document must be a mapping")
    for key in ("nodes", "links", "sources", "subscriptions"):
        if not isinstance(doc.get(key), list):
            raise TopologyError(f"top-level key {key!r} must be a list")
    roles: dict[str, str] = {}
    for i, n in enumerate(doc["nodes"]):
        nm = str(_req(n, "name", f"nodes[{i}]"))
        if nm in roles:
            raise TopologyError(f"nodes[{i}]: duplicate node {nm!r}")
        roles[nm] = str(_req(n, "role", f"nodes[{i}]"))
    try:
        links = tuple(
            Link(
                str(_req(l, "from", f"links[{i}]")),
                str(_req(l, "to", f"links[{i}]")),
                float(_req(l, "capacity", f"links[{i}]")),
                float(_req(l, "loss", f"links[{i}]")),
                str(l.get("group", "")),
            )
            for i, l in enumerate(doc["links"])
        )
        sources = tuple(
            Source(
                str(_req(s, "name", f"sources[{i}]")),
                int(_req(s, "symbols", f"sources[{i}]")),
                float(_req(s, "rate", f"sources[{i}]")),
            )
            for i, s in enumerate(doc["sources"])
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, TopologyError):
            raise
        raise TopologyError(f"bad numeric field: {e}") from None
    subs: dict[str, str] = {}
    for i, s in enumerate(doc["subscriptions"]):
        c = str(_req(s, "client", f"subscriptions[{i}]"))
        if c in subs:
            raise TopologyValidationError([f"client {c}: subscribes to more than one source"])
        subs[c] = str(_req(s, "source", f"subscriptions[{i}]"))
    t = Topology(roles, links, sources, subs, name=name)
    if check:
        errs = validate(t)
        if errs:
            raise TopologyValidationError(errs)
    return t


def parse_topology(text: str, name: str = "", check: bool = True) -> Topology:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise TopologyError(f"parse error: {where}{getattr(e, 'problem', e)}") from None
    return from_dict(doc, name=name, check=check)


def load_topology(path: str | Path, check: bool = True) -> Topology:
    """Load a topology file, or a bundled fixture by name (``butterfly``, ...)."""
    p = Path(path)
    if not p.exists() and str(path) in FIXTURES:
        text = resources.files("internc.fixtures").joinpath(f"{path}.yaml").read_text()
        return parse_topology(text, name=str(path), check=check)
    return parse_topology(p.read_text(encoding="utf-8"), name=p.stem, check=check)


def fixture_text(name: str) -> str:
    return resources.files("internc.fixtures").joinpath(f"{name}.yaml").read_text()
