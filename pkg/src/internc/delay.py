"""Expected decoding delay at a client from per-type useful-packet probabilities.

Each receive slot at a client brings a useful packet of type ``t`` with
probability ``p[t]``; otherwise the slot is wasted (loss, idle parent, or a
non-innovative packet).  Counts of received packets per type are tracked only
while they stay generically independent.  With random coefficients that is the
Hall condition: for every set ``W`` of sources, the packets whose types lie in
``W`` cannot outnumber the symbols of ``W``.  Source ``s`` decodes once some
source set ``V`` holding ``s`` is saturated, i.e. the packets inside ``V``
number exactly ``sum(N[v] for v in V)``.

The chain over these count vectors is finite and acyclic (counts only grow),
so the expected number of slots to decoding is an exact finite sum.  When no
packet type can be blocked before decoding, the sum coincides term by term
with the multinomial frontier sum (:func:`frontier_delay`).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import lgamma, log, exp
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .lattice import is_subset, submasks

BLOCKED = -1
DECODED = -2
PROB_EPS = 1e-15
MAX_SLOTS = 10**8  # hard cap on the truncated sum
_PMF_CHUNK = 4096


class UnreachableSourceError(RuntimeError):
    """No sequence of useful packets with positive probability decodes the source."""


def _n_of(mask: int, sizes: Sequence[int]) -> int:
    return sum(n for i, n in enumerate(sizes) if mask >> i & 1)


def generic_rank(counts: Mapping[int, int], sizes: Sequence[int], within: int | None = None) -> int:
    """Rank of random packets with the given type counts (max-flow/min-cut form).

    ``rank = min over source sets W of N(W) + #packets whose type is not inside W``.
    With ``within`` set, only packets whose type lies inside that source set count.
    """
    full = (1 << len(sizes)) - 1
    if within is None:
        within = full
    items = [(t, k) for t, k in counts.items() if k > 0 and is_subset(t, within)]
    best = None
    for w in [0] + submasks(within):
        val = _n_of(w, sizes) + sum(k for t, k in items if not is_subset(t, w))
        best = val if best is None else min(best, val)
    return best


def hall_feasible(counts: Mapping[int, int], sizes: Sequence[int]) -> bool:
    """True when the counts could all be linearly independent."""
    full = (1 << len(sizes)) - 1
    for w in submasks(full):
        if sum(k for t, k in counts.items() if is_subset(t, w)) > _n_of(w, sizes):
            return False
    return all(k >= 0 for k in counts.values())


def decodable(counts: Mapping[int, int], target: int, sizes: Sequence[int]) -> bool:
    """Whether packets with these type counts determine source ``target``.

    True iff some source set ``V`` containing the target has generic rank
    ``N(V)`` using only packets whose types lie inside ``V``; equivalently a
    sub-collection exactly covers its sources and is full rank.
    """
    full = (1 << len(sizes)) - 1
    bit = 1 << target
    for v in submasks(full):
        if v & bit and generic_rank(counts, sizes, within=v) == _n_of(v, sizes):
            return True
    return False


@lru_cache(maxsize=4096)
def _relevant(support: tuple[int, ...], target: int, sizes: tuple[int, ...]) -> tuple[int, ...]:
    return relevant_types(support, target, sizes)


def relevant_types(support: Sequence[int], target: int, sizes: Sequence[int]) -> tuple[int, ...]:
    """Types that can affect when ``target`` decodes.

    A decoding set ``V`` is redundant if some other source ``s'`` in it only
    appears in singleton packets inside ``V``: saturating ``V`` then saturates
    ``V - {s'}`` too.  Types that sit only inside redundant sets never change
    the decoding time and are treated as wasted slots.
    """
    full = (1 << len(sizes)) - 1
    bit = 1 << target
    types = sorted(set(support))
    while True:
        live = []
        for v in submasks(full):
            if not v & bit:
                continue
            inside = [t for t in types if is_subset(t, v)]
            redundant = False
            for s in range(len(sizes)):
                sb = 1 << s
                if sb == bit or not v & sb:
                    continue
                if all(t == sb for t in inside if t & sb):
                    redundant = True
                    break
            if not redundant:
                live.append(v)
        keep = [t for t in types if any(is_subset(t, v) for v in live)]
        if keep == types:
            return tuple(types)
        types = keep


@dataclass(frozen=True)
class DecodeChain:
    """Transient states of the count chain for one target and type support.

    ``states[i]`` is a count vector over ``types``; rows are sorted by total
    count, so every transition goes to a later row.  ``nxt[i, j]`` is the row
    reached when a type-``j`` packet arrives, or BLOCKED (not innovative) or
    DECODED.
    """

    types: tuple[int, ...]
    sizes: tuple[int, ...]
    target: int
    states: np.ndarray
    nxt: np.ndarray
    blocked: np.ndarray  # bit j set when type j is not innovative in that state

    @property
    def n_states(self) -> int:
        return len(self.states)


@lru_cache(maxsize=512)
def build_chain(types: tuple[int, ...], sizes: tuple[int, ...], target: int) -> DecodeChain:
    n_src = len(sizes)
    full = (1 << n_src) - 1
    masks = submasks(full)
    caps = np.array([_n_of(w, sizes) for w in masks], dtype=np.int32)
    tgt_sets = np.array([bool(w >> target & 1) for w in masks])
    inc = np.array([[is_subset(t, w) for w in masks] for t in types], dtype=np.int32)
    bounds = [_n_of(t, sizes) for t in types]

    # grow count vectors one coordinate at a time; sums over W only increase,
    # so partial vectors that overflow or already decode can be dropped early
    states = np.zeros((1, 0), dtype=np.int32)
    y = np.zeros((1, len(masks)), dtype=np.int32)
    for j, b in enumerate(bounds):
        vals = np.arange(b + 1, dtype=np.int32)
        y_new = (y[:, None, :] + vals[None, :, None] * inc[j][None, None, :]).reshape(-1, len(masks))
        st_new = np.concatenate(
            [np.repeat(states, b + 1, axis=0), np.tile(vals, len(states))[:, None]], axis=1
        )
        ok = np.all(y_new <= caps, axis=1) & ~np.any((y_new == caps) & tgt_sets, axis=1)
        states, y = st_new[ok], y_new[ok]

    order = np.lexsort(states.T[::-1])
    order = order[np.argsort(states[order].sum(axis=1), kind="stable")]
    states, y = states[order], y[order]
    radix = np.array([b + 1 for b in bounds], dtype=np.int64)
    weights = np.concatenate([np.cumprod(radix[::-1])[::-1][1:], [1]]).astype(np.int64)
    keys = states.astype(np.int64) @ weights
    key_order = np.argsort(keys)
    sorted_keys = keys[key_order]

    k = len(types)
    nxt = np.empty((len(states), k), dtype=np.int32)
    for j in range(k):
        y2 = y + inc[j]
        over = np.any(y2 > caps, axis=1)
        dec = ~over & np.any((y2 == caps) & tgt_sets, axis=1)
        key2 = keys + weights[j]
        pos = np.searchsorted(sorted_keys, key2)
        pos = np.minimum(pos, len(sorted_keys) - 1)
        col = key_order[pos]
        nxt[:, j] = np.where(over, BLOCKED, np.where(dec, DECODED, col))
        live = ~over & ~dec
        if np.any(sorted_keys[pos[live]] != key2[live]):
            raise AssertionError("transient successor missing from the state table")
    blocked = np.zeros(len(states), dtype=np.int64)
    for j in range(k):
        blocked |= (nxt[:, j] == BLOCKED).astype(np.int64) << j
    return DecodeChain(tuple(types), tuple(sizes), target, states, nxt, blocked)


@njit(cache=True)
def _expected_slots(nxt, blocked, p):
    n, k = nxt.shape
    # 1/q for every pattern of blocked types, q = useful probability left
    inv_q = np.empty(1 << k)
    for b in range(1 << k):
        q = 0.0
        for j in range(k):
            if not (b >> j) & 1:
                q += p[j]
        inv_q[b] = 1.0 / q if q > 0.0 else 0.0
    mass = np.zeros(n)
    mass[0] = 1.0
    total = 0.0
    stuck = 0.0
    for i in range(n):
        m = mass[i]
        if m == 0.0:
            continue
        iq = inv_q[blocked[i]]
        if iq == 0.0:
            stuck += m
            continue
        w = m * iq
        total += w
        for j in range(k):
            s = nxt[i, j]
            if s >= 0:
                mass[s] += w * p[j]
    return total, stuck


@njit(cache=True)
def _slot_pmf(nxt, p, cur, n_slots, tail_tol):
    """Advance the state distribution ``cur`` by up to ``n_slots`` slots.

    Returns the per-slot absorption mass, the final distribution and the mass
    still transient.  Stops early once that mass drops below ``tail_tol``.
    """
    n, k = nxt.shape
    pmf = np.zeros(n_slots)
    remaining = cur.sum()
    used = 0
    for slot in range(n_slots):
        if remaining < tail_tol:
            break
        new = np.zeros(n)
        absorbed = 0.0
        for i in range(n):
            m = cur[i]
            if m == 0.0:
                continue
            stay = 1.0
            for j in range(k):
                s = nxt[i, j]
                if s == -1:
                    continue
                stay -= p[j]
                if s == -2:
                    absorbed += m * p[j]
                else:
                    new[s] += m * p[j]
            new[i] += m * stay
        pmf[slot] = absorbed
        cur = new
        remaining = cur.sum()
        used = slot + 1
    return pmf[:used], cur, remaining


def _prepare(rates: Mapping[int, float], target: int, sizes: Sequence[int], support=None):
    if support is None:
        support = [t for t, v in rates.items() if v > PROB_EPS]
    types = _relevant(tuple(sorted(set(support))), target, tuple(sizes))
    if not types:
        raise UnreachableSourceError(f"no useful packet type can decode source {target}")
    chain = build_chain(types, tuple(sizes), target)
    p = np.array([rates.get(t, 0.0) for t in types], dtype=np.float64)
    if (p < 0).any() or sum(rates.values()) > 1.0 + 1e-9:
        raise ValueError("useful-packet probabilities must be non-negative and sum to at most 1")
    return chain, p


def expected_slots(
    rates: Mapping[int, float], target: int, sizes: Sequence[int], support: Sequence[int] | None = None
) -> float:
    """Expected number of receive slots until ``target`` decodes.

    ``support`` fixes the set of types the chain is built over (types outside
    it are treated as wasted); by default it is the types with positive rate.
    Passing a fixed superset lets repeated calls share one cached chain.
    """
    chain, p = _prepare(rates, target, sizes, support)
    total, stuck = _expected_slots(chain.nxt, chain.blocked, p)
    if stuck > 0.0:
        raise UnreachableSourceError(
            f"source {target} cannot be decoded with probability {stuck:.3g}"
        )
    return float(total)


def slot_pmf(
    rates: Mapping[int, float],
    target: int,
    sizes: Sequence[int],
    kmax: int | None = None,
    tail_tol: float = 1e-8,
) -> tuple[np.ndarray, float]:
    """``P(k)`` for k = 0..K and the probability mass left beyond K.

    K is the smallest slot count with remaining mass below ``tail_tol``,
    capped at ``kmax`` (default ``MAX_SLOTS``).
    """
    chain, p = _prepare(rates, target, sizes)
    limit = MAX_SLOTS if kmax is None else int(kmax)
    cur = np.zeros(len(chain.states))
    cur[0] = 1.0
    parts = [np.zeros(1)]
    done, tail = 0, 1.0
    while done < limit and tail >= tail_tol:
        step = min(_PMF_CHUNK, limit - done)
        part, cur, tail = _slot_pmf(chain.nxt, p, cur, step, float(tail_tol))
        parts.append(part)
        done += len(part)
        if len(part) < step:
            break
    return np.concatenate(parts), max(float(tail), 0.0)


def decode_prob_exact_k(rates: Mapping[int, float], target: int, sizes: Sequence[int], k: int) -> float:
    """Probability that ``target`` first becomes decodable at slot ``k``."""
    if k < sizes[target]:
        return 0.0
    pmf, _ = slot_pmf(rates, target, sizes, kmax=k, tail_tol=0.0)
    return float(pmf[k]) if k < len(pmf) else 0.0


@dataclass(frozen=True)
class DelayEstimate:
    seconds: float
    tail_mass: float = 0.0
    kmax: int = 0


def expected_delay(
    rates: Mapping[int, float],
    target: int,
    sizes: Sequence[int],
    slot_time: float,
    mode: str = "closed_form",
    tail_tol: float = 1e-8,
    kmax: int | None = None,
    support: Sequence[int] | None = None,
) -> DelayEstimate:
    """Expected decoding delay in seconds.

    ``closed_form`` sums the exact finite series over transient count vectors.
    ``truncated_sum`` adds ``k * P(k)`` slot by slot up to K and reports the
    probability mass that was cut off.
    """
    if mode == "closed_form":
        return DelayEstimate(slot_time * expected_slots(rates, target, sizes, support))
    if mode == "truncated_sum":
        pmf, tail = slot_pmf(rates, target, sizes, kmax=kmax, tail_tol=tail_tol)
        ks = np.arange(len(pmf))
        return DelayEstimate(slot_time * float(ks @ pmf), tail, len(pmf) - 1)
    raise ValueError(f"unknown mode {mode!r}")


def frontier_delay(rates: Mapping[int, float], target: int, sizes: Sequence[int], slot_time: float) -> tuple[float, float]:
    """Multinomial frontier sum with a constant useful-packet probability.

    Sums, over last-packet types ``t*`` and independent non-decodable count
    vectors ``x`` that ``t*`` completes,
    ``p[t*] (|x|+1)! / prod(x_t!) * prod(p_t^x_t) / P^(|x|+2)``.
    Returns ``(delay_seconds, decoded_mass)``; the mass falls short of 1 when a
    type can turn non-innovative before decoding, and the delay is then only a
    partial sum.
    """
    chain, p = _prepare(rates, target, sizes)
    ptot = float(p.sum())
    logp = np.log(np.where(p > 0, p, 1.0))
    total = 0.0
    mass = 0.0
    for i, x in enumerate(chain.states):
        n = int(x.sum())
        if np.any((x > 0) & (p <= 0)):
            continue
        log_w = lgamma(n + 1) - sum(lgamma(int(v) + 1) for v in x) + float(x @ logp) - n * log(ptot)
        for j in range(len(p)):
            if chain.nxt[i, j] == DECODED and p[j] > 0:
                w = exp(log_w) * p[j] / ptot
                mass += w
                total += w * (n + 1) / ptot
    return slot_time * total, mass


# --- network level -------------------------------------------------------------

UsefulRates = dict  # type mask -> probability that a receive slot brings that type

DELAY_HEADER = ("client", "source", "D_seconds")


def useful_rates(topology, alloc, client: str) -> UsefulRates:
    """p_c^t: incoming innovative rate of type ``t`` over total incoming capacity."""
    links = topology.in_links(client)
    cap = sum(l.capacity for l in links)
    out: dict[int, float] = {}
    for l in links:
        for t, r in alloc.rates.get(l.key, {}).items():
            out[t] = out.get(t, 0.0) + r
    return {t: (r / cap if cap > 0 else 0.0) for t, r in sorted(out.items())}


@dataclass(frozen=True)
class DelayReport:
    clients: tuple[str, ...]
    sources: tuple[str, ...]
    delays: tuple[float, ...]

    @property
    def average(self) -> float:
        return float(sum(self.delays) / len(self.delays))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.clients, self.delays))

    def rows(self) -> list[tuple]:
        rows = [(c, s, d) for c, s, d in zip(self.clients, self.sources, self.delays)]
        rows.append(("__average__", "", self.average))
        return rows


def client_delay(topology, alloc, client: str, mode: str = "closed_form", support=None) -> float:
    src = topology.subscriptions[client]
    p = useful_rates(topology, alloc, client)
    est = expected_delay(
        p,
        topology.source_index[src],
        topology.sizes,
        topology.client_slot_time(client),
        mode=mode,
        support=support,
    )
    return est.seconds


def average_delay(topology, alloc, mode: str = "closed_form") -> DelayReport:
    """Per-client expected decoding delay and the mean over clients.

    Raises UnreachableSourceError if some client can never decode.
    """
    clients = tuple(topology.clients)
    delays = tuple(client_delay(topology, alloc, c, mode) for c in clients)
    return DelayReport(clients, tuple(topology.subscriptions[c] for c in clients), delays)
