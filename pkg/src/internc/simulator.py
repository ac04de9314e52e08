"""Seeded discrete-event simulation of push-based coded forwarding.

Every link offers a transmission opportunity each ``1/c`` seconds (with a random
phase).  At an opportunity the tail node draws a packet type from the link's
forwarding distribution, recodes a packet of that type from its buffer, and the
packet is lost with the link's loss probability.  Nodes keep innovative
packets only.  A client decodes its source once some set of buffered rows is
full rank over the columns it touches and covers the source block; the symbols
are then recovered and checked against what the source generated.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .gf import GF256, GaloisField, block_slices, satisfies_decoding_conditions, solve_for_source
from .lattice import is_subset, members
from .records import write_csv
from .topology import Topology

EMPIRICAL_HEADER = (
    "client", "source", "mean_delay_s", "ci95_halfwidth_s", "censored_count", "replications",
)
_RECODE_TRIES = 16


@dataclass(frozen=True)
class CodedPacket:
    coeffs: np.ndarray  # length sum(N), per-source blocks
    payload: np.ndarray
    type: int

    def header_bits(self, gf: GaloisField = GF256) -> int:
        return len(self.coeffs) * gf.m


def packet_type(coeffs: np.ndarray, sizes: Sequence[int]) -> int:
    t = 0
    for i, sl in enumerate(block_slices(sizes)):
        if coeffs[sl].any():
            t |= 1 << i
    return t


class EchelonBasis:
    """Incrementally maintained row-echelon basis (pivots normalised to 1)."""

    def __init__(self, n: int, gf: GaloisField = GF256):
        self.n = n
        self.gf = gf
        self.pivots: list[int] = []  # ascending
        self.rows: dict[int, np.ndarray] = {}

    @property
    def rank(self) -> int:
        return len(self.pivots)

    def reduce(self, v: np.ndarray) -> np.ndarray:
        v = v.copy()
        mul = self.gf.mul_table
        for p in self.pivots:
            if v[p]:
                v ^= mul[v[p], self.rows[p]]
        return v

    def is_innovative(self, v: np.ndarray) -> bool:
        return bool(self.reduce(v).any())

    def add(self, v: np.ndarray) -> bool:
        """Insert ``v``; returns False (and leaves the basis alone) if dependent."""
        r = self.reduce(v)
        nz = np.flatnonzero(r)
        if len(nz) == 0:
            return False
        p = int(nz[0])
        r = self.gf.mul_table[self.gf.inv_table[r[p]], r]
        self.rows[p] = r
        self.pivots.insert(int(np.searchsorted(self.pivots, p)), p)
        return True


class NodeBuffer:
    """Innovative packets held by one node."""

    def __init__(self, sizes: Sequence[int], gf: GaloisField = GF256):
        self.sizes = tuple(sizes)
        self.gf = gf
        self.basis = EchelonBasis(sum(sizes), gf)
        self.coeffs: list[np.ndarray] = []
        self.payloads: list[np.ndarray] = []
        self.types: list[int] = []
        self._type_set: set[int] = set()

    def __len__(self) -> int:
        return len(self.coeffs)

    @property
    def rank(self) -> int:
        return self.basis.rank

    def offer(self, pkt: CodedPacket) -> bool:
        """Store ``pkt`` if innovative; non-innovative packets are dropped."""
        if not self.basis.add(pkt.coeffs):
            return False
        self.coeffs.append(pkt.coeffs)
        self.payloads.append(pkt.payload)
        self.types.append(pkt.type)
        self._type_set.add(pkt.type)
        return True

    def producible(self, t: int) -> bool:
        return all(any(u >> s & 1 and is_subset(u, t) for u in self._type_set) for s in members(t))


def innovation_check(buffer: NodeBuffer, pkt: CodedPacket) -> bool:
    return buffer.basis.is_innovative(pkt.coeffs)


def recode(buffer: NodeBuffer, requested: int, rng: np.random.Generator) -> CodedPacket | None:
    """Random combination of the buffered packets whose types lie inside ``requested``.

    Returns None when some source of ``requested`` has no representative.
    Coefficients are redrawn a few times if a block cancels out.
    """
    if not buffer.producible(requested):
        return None
    idx = [i for i, u in enumerate(buffer.types) if is_subset(u, requested)]
    rows = np.stack([buffer.coeffs[i] for i in idx])
    pays = np.stack([buffer.payloads[i] for i in idx])
    gf = buffer.gf
    for _ in range(_RECODE_TRIES):
        a = gf.random(rng, len(idx))
        c = gf.combine(a, rows)
        t = packet_type(c, buffer.sizes)
        if t == requested:
            break
    if t == 0:
        return None
    return CodedPacket(c, gf.combine(a, pays), t)


class ClientDecoder:
    """Tracks, per source set V holding the target, the rows supported inside V."""

    def __init__(self, sizes: Sequence[int], target: int, gf: GaloisField = GF256):
        self.sizes = tuple(sizes)
        self.target = target
        self.gf = gf
        self.buffer = NodeBuffer(sizes, gf)
        n = sum(sizes)
        full = (1 << len(sizes)) - 1
        self.sets = [v for v in range(1, full + 1) if v >> target & 1]
        self.bases = {v: EchelonBasis(n, gf) for v in self.sets}
        self.touched = {v: np.zeros(n, dtype=bool) for v in self.sets}
        self.members = {v: [] for v in self.sets}
        self.tcols = np.zeros(n, dtype=bool)
        self.tcols[block_slices(sizes)[target]] = True
        self.decoded_by: int | None = None

    def receive(self, pkt: CodedPacket) -> bool:
        """Store an innovative packet; return True when the target becomes decodable."""
        if not self.buffer.offer(pkt):
            return False
        row = len(self.buffer) - 1
        if self.decoded_by is not None:
            return False
        for v in self.sets:
            if not is_subset(pkt.type, v):
                continue
            self.bases[v].add(pkt.coeffs)
            self.touched[v] |= pkt.coeffs != 0
            self.members[v].append(row)
            tv = self.touched[v]
            if tv[self.tcols].all() and self.bases[v].rank == int(tv.sum()):
                self.decoded_by = v
                return True
        return False

    def solve(self) -> np.ndarray:
        rows = self.members[self.decoded_by]
        a = np.stack([self.buffer.coeffs[i] for i in rows])
        y = np.stack([self.buffer.payloads[i] for i in rows])
        return solve_for_source(a, y, self.sizes, self.target, self.gf)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    replications: int = 100
    duration: float = 1000.0  # simulated seconds per replication before censoring
    payload_len: int = 4
    field_m: int = 8
    record_events: bool = False

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.payload_len < 1:
            raise ValueError("payload_len must be positive")


@dataclass
class ReplicationResult:
    decode_time: dict[str, float]  # nan when censored
    received: dict[str, int]  # packets delivered (innovative or not) before decoding
    useful: dict[str, dict[int, int]]  # innovative arrivals per type at each client
    slots: dict[str, int]  # receive slots (opportunities on incoming links)
    counters: dict[str, int]
    digest: str
    events: list[tuple] = field(default_factory=list)


def _gf_for(m: int) -> GaloisField:
    return GF256 if m == 8 else GaloisField(m)


def run_replication(
    topology: Topology,
    w: Mapping[tuple[str, str], Mapping[int, float]],
    cfg: SimConfig,
    rep: int,
) -> ReplicationResult:
    gf = _gf_for(cfg.field_m)
    rng = np.random.default_rng([cfg.seed, rep])
    sizes = topology.sizes
    n = sum(sizes)
    blocks = block_slices(sizes)

    # sources hold their own symbols as unit rows
    symbols = {}
    buffers: dict[str, NodeBuffer] = {}
    for i, src in enumerate(topology.sources):
        payload = gf.random(rng, (src.symbols, cfg.payload_len))
        symbols[i] = payload
        buf = NodeBuffer(sizes, gf)
        for k in range(src.symbols):
            e = np.zeros(n, dtype=np.uint8)
            e[blocks[i].start + k] = 1
            buf.offer(CodedPacket(e, payload[k], 1 << i))
        buffers[src.name] = buf
    clients = {
        c: ClientDecoder(sizes, topology.source_index[topology.subscriptions[c]], gf)
        for c in topology.clients
    }
    for node in topology.nodes:
        if node not in buffers and node not in clients:
            buffers[node] = NodeBuffer(sizes, gf)
    store = {**buffers, **{c: d.buffer for c, d in clients.items()}}

    links = list(topology.links)
    dists = []
    for l in links:
        dist = w.get(l.key, {})
        types = sorted(t for t, p in dist.items() if p > 0)
        probs = np.array([dist[t] for t in types], dtype=np.float64)
        dists.append((types, probs))

    heap = []
    for li, l in enumerate(links):
        phase = rng.uniform(0.0, 1.0 / l.capacity)
        heap.append((phase, li, 0, phase))
    heapq.heapify(heap)

    decode_time = {c: math.nan for c in clients}
    received = {c: 0 for c in clients}
    useful = {c: {} for c in clients}
    slots = {c: 0 for c in clients}
    counters = {"opportunities": 0, "idle": 0, "lost": 0, "delivered": 0, "innovative": 0, "resampled": 0}
    hasher = hashlib.sha256()
    events: list[tuple] = []
    pending = set(clients)

    while heap and pending:
        now, li, k, phase = heapq.heappop(heap)
        if now > cfg.duration:
            break
        l = links[li]
        heapq.heappush(heap, (phase + (k + 1) / l.capacity, li, k + 1, phase))
        counters["opportunities"] += 1
        if l.head in clients:
            slots[l.head] += 1

        types, probs = dists[li]
        buf = store[l.tail]
        pkt = None
        t = 0
        u = rng.random()
        if len(types) and u < probs.sum():
            t = types[min(int(np.searchsorted(np.cumsum(probs), u, side="right")), len(types) - 1)]
            pkt = recode(buf, t, rng)
            if pkt is None:
                # resample among the types this node can currently produce
                ok = [i for i, tt in enumerate(types) if buf.producible(tt)]
                if ok:
                    counters["resampled"] += 1
                    pr = probs[ok] / probs[ok].sum()
                    t = types[ok[int(rng.choice(len(ok), p=pr))]]
                    pkt = recode(buf, t, rng)
        if pkt is None:
            counters["idle"] += 1
            outcome = "idle"
        elif rng.random() < l.loss:
            counters["lost"] += 1
            outcome = "lost"
        else:
            counters["delivered"] += 1
            if l.head in clients:
                dec = clients[l.head]
                if l.head in pending:
                    received[l.head] += 1
                innov = dec.buffer.basis.is_innovative(pkt.coeffs)
                done = dec.receive(pkt)
                if innov:
                    useful[l.head][pkt.type] = useful[l.head].get(pkt.type, 0) + 1
                if done and l.head in pending:
                    _check_decode(dec, symbols, gf)
                    decode_time[l.head] = now
                    pending.discard(l.head)
            else:
                innov = store[l.head].offer(pkt)
            counters["innovative"] += int(innov)
            outcome = "innov" if innov else "dup"
        hasher.update(struct.pack("<dii", now, li, pkt.type if pkt is not None else 0))
        hasher.update(outcome.encode())
        if cfg.record_events:
            events.append((now, l.tail, l.head, pkt.type if pkt is not None else 0, outcome))

    return ReplicationResult(decode_time, received, useful, slots, counters, hasher.hexdigest(), events)


def _check_decode(dec: ClientDecoder, symbols, gf: GaloisField) -> None:
    """Decode-time assertions, independent of the incremental bookkeeping."""
    got = dec.solve()
    want = symbols[dec.target]
    if not np.array_equal(got, want):
        raise AssertionError("decoded symbols differ from the source payload")
    a = np.stack(dec.buffer.coeffs)
    if not satisfies_decoding_conditions(a, dec.sizes, dec.target, gf):
        raise AssertionError("decode event without a full-rank covering row subset")
    if len(dec.buffer) < dec.sizes[dec.target]:
        raise AssertionError("decoded with fewer packets than source symbols")


@dataclass
class EmpiricalReport:
    clients: tuple[str, ...]
    sources: tuple[str, ...]
    mean: tuple[float, ...]
    ci95: tuple[float, ...]
    censored: tuple[int, ...]
    replications: int
    replicas: list[ReplicationResult] = field(default_factory=list, repr=False)

    def rows(self) -> list[tuple]:
        return [
            (c, s, m, h, k, self.replications)
            for c, s, m, h, k in zip(self.clients, self.sources, self.mean, self.ci95, self.censored)
        ]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.clients, self.mean))

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.replicas:
            h.update(r.digest.encode())
        return h.hexdigest()

    def useful_fractions(self, client: str) -> dict[int, float]:
        """Innovative arrivals per type divided by receive slots, pooled over replications."""
        tot = sum(r.slots[client] for r in self.replicas)
        out: dict[int, float] = {}
        for r in self.replicas:
            for t, k in r.useful[client].items():
                out[t] = out.get(t, 0) + k
        return {t: k / tot for t, k in sorted(out.items())} if tot else {}


def run(topology: Topology, w: Mapping[tuple[str, str], Mapping[int, float]], cfg: SimConfig = SimConfig()) -> EmpiricalReport:
    """Independent replications; per-client mean decode time and 95% half-width.

    Censored replications (no decode within ``cfg.duration``) are excluded
    from the mean and counted separately.
    """
    reps = [run_replication(topology, w, cfg, r) for r in range(cfg.replications)]
    clients = tuple(topology.clients)
    means, cis, cens = [], [], []
    for c in clients:
        times = np.array([r.decode_time[c] for r in reps])
        ok = times[~np.isnan(times)]
        cens.append(int(len(times) - len(ok)))
        if len(ok) == 0:
            means.append(math.nan)
            cis.append(math.nan)
        else:
            means.append(float(ok.mean()))
            sd = float(ok.std(ddof=1)) if len(ok) > 1 else 0.0
            cis.append(1.96 * sd / math.sqrt(len(ok)))
    return EmpiricalReport(
        clients,
        tuple(topology.subscriptions[c] for c in clients),
        tuple(means),
        tuple(cis),
        tuple(cens),
        cfg.replications,
        reps,
    )


def write_empirical(path, report: EmpiricalReport) -> None:
    write_csv(path, EMPIRICAL_HEADER, report.rows())
