"""Packet types as bitmasks over the source set.

A packet type is the set of sources mixed into a coded packet.  Bit ``i`` of the
mask is source ``i``; singleton masks are intra-session types.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

MAX_SOURCES = 8


def members(t: int) -> list[int]:
    return [i for i in range(t.bit_length()) if t >> i & 1]


def is_subset(a: int, b: int) -> bool:
    return a & ~b == 0


def is_singleton(t: int) -> bool:
    return t != 0 and t & (t - 1) == 0


def submasks(t: int) -> list[int]:
    """Nonempty submasks of ``t`` in increasing order."""
    out = []
    sub = t
    while sub:
        out.append(sub)
        sub = (sub - 1) & t
    return sorted(out)


@dataclass(frozen=True)
class TypeLattice:
    """All ``2^S - 1`` packet types over ``S`` named sources."""

    sources: tuple[str, ...]

    def __post_init__(self) -> None:
        if not 1 <= len(self.sources) <= MAX_SOURCES:
            raise ValueError(f"need 1..{MAX_SOURCES} sources, got {len(self.sources)}")
        if len(set(self.sources)) != len(self.sources):
            raise ValueError("duplicate source names")

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @cached_property
    def all_types(self) -> list[int]:
        return list(range(1, 1 << self.n_sources))

    @cached_property
    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.sources)}

    def mask(self, names: Iterable[str]) -> int:
        t = 0
        for n in names:
            try:
                t |= 1 << self.index[n]
            except KeyError:
                raise ValueError(f"unknown source {n!r}") from None
        if t == 0:
            raise ValueError("a packet type needs at least one source")
        return t

    def source_bit(self, name: str) -> int:
        return 1 << self.index[name]

    def names(self, t: int) -> list[str]:
        self._check(t)
        return sorted(self.sources[i] for i in members(t))

    def label(self, t: int) -> str:
        return "+".join(self.names(t))

    def component_sources(self, t: int) -> list[int]:
        """S_t as source indices."""
        self._check(t)
        return members(t)

    def component_types(self, t: int) -> list[int]:
        """T_t: every type whose sources are a subset of ``t``'s."""
        self._check(t)
        return submasks(t)

    def component_types_with_source(self, t: int, s: int) -> list[int]:
        """T_{t,s}: the members of T_t that carry source index ``s``."""
        self._check(t)
        if not t >> s & 1:
            raise ValueError(f"source {s} is not part of type {self.label(t)}")
        return [u for u in submasks(t) if u >> s & 1]

    def singletons(self) -> list[int]:
        return [1 << i for i in range(self.n_sources)]

    def types_within(self, avail: int) -> list[int]:
        return submasks(avail) if avail else []

    def _check(self, t: int) -> None:
        if not 0 < t < 1 << self.n_sources:
            raise ValueError(f"type mask {t} outside lattice of {self.n_sources} sources")


def parse_type(lattice: TypeLattice, text: str | Sequence[str]) -> int:
    """Accept ``"s1+s3"`` or a list of names."""
    if isinstance(text, str):
        parts = [p.strip() for p in text.replace(",", "+").split("+") if p.strip()]
    else:
        parts = list(text)
    return lattice.mask(parts)
