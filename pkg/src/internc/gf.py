"""Arithmetic over GF(2^m) and the Gaussian elimination used for coding and decoding.

Elements are plain integers in ``[0, q)``; vectors and matrices are ``numpy.uint8``
arrays.  Addition is XOR.  Multiplication goes through log/antilog tables that are
built once per field when the module is imported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# irreducible polynomial and a primitive element for each supported degree
_FIELD_PARAMS = {
    4: (0x13, 2),  # x^4 + x + 1
    8: (0x11B, 3),  # x^8 + x^4 + x^3 + x + 1
}


class DecodeError(ValueError):
    """The rows at hand cannot recover the requested source block."""


@dataclass(frozen=True)
class GaloisField:
    m: int = 8
    poly: int = field(init=False)
    exp: np.ndarray = field(init=False, repr=False)
    log: np.ndarray = field(init=False, repr=False)
    mul_table: np.ndarray = field(init=False, repr=False)
    inv_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.m not in _FIELD_PARAMS:
            raise ValueError(f"unsupported field degree m={self.m}; choose 4 or 8")
        poly, gen = _FIELD_PARAMS[self.m]
        q = 1 << self.m
        exp = np.zeros(2 * q, dtype=np.int64)
        log = np.zeros(q, dtype=np.int64)
        x = 1
        for i in range(q - 1):
            exp[i] = x
            log[x] = i
            x = _shift_mul(x, gen, poly, self.m)
        if x != 1 or len(set(exp[: q - 1].tolist())) != q - 1:
            raise AssertionError("generator is not primitive")
        exp[q - 1 : 2 * q - 2] = exp[: q - 1]
        a = np.arange(q)
        la = log[a][:, None] + log[a][None, :]
        mul = exp[la].astype(np.uint8)
        mul[0, :] = 0
        mul[:, 0] = 0
        inv = np.zeros(q, dtype=np.uint8)
        inv[1:] = exp[(q - 1 - log[1:]) % (q - 1)]
        object.__setattr__(self, "poly", poly)
        object.__setattr__(self, "exp", exp)
        object.__setattr__(self, "log", log)
        object.__setattr__(self, "mul_table", mul)
        object.__setattr__(self, "inv_table", inv)

    @property
    def q(self) -> int:
        return 1 << self.m

    def add(self, a: int, b: int) -> int:
        return a ^ b

    def mul(self, a: int, b: int) -> int:
        return int(self.mul_table[a, b])

    def inv(self, a: int) -> int:
        if a == 0:
            raise ZeroDivisionError("0 has no inverse in GF(q)")
        return int(self.inv_table[a])

    def div(self, a: int, b: int) -> int:
        return self.mul(a, self.inv(b))

    def scale(self, c: int, v: np.ndarray) -> np.ndarray:
        return self.mul_table[c, v]

    def axpy(self, y: np.ndarray, c: int, x: np.ndarray) -> np.ndarray:
        """Return ``y + c*x`` (a new array)."""
        return y ^ self.mul_table[c, x]

    def combine(self, coeffs: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Linear combination ``sum_k coeffs[k] * rows[k]``."""
        if len(rows) == 0:
            return np.zeros(rows.shape[1:], dtype=np.uint8)
        prods = self.mul_table[np.asarray(coeffs)[:, None], rows]
        return np.bitwise_xor.reduce(prods, axis=0)

    def matmul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.uint8)
        b = np.asarray(b, dtype=np.uint8)
        out = np.zeros((a.shape[0], b.shape[1]), dtype=np.uint8)
        for k in range(a.shape[1]):
            out ^= self.mul_table[a[:, k][:, None], b[k][None, :]]
        return out

    def random(self, rng: np.random.Generator, shape, nonzero: bool = False) -> np.ndarray:
        low = 1 if nonzero else 0
        return rng.integers(low, self.q, size=shape, dtype=np.uint8)


def _shift_mul(a: int, b: int, poly: int, m: int) -> int:
    """Carry-less multiply with reduction, one bit at a time."""
    result = 0
    top = 1 << m
    while b:
        if b & 1:
            result ^= a
        a <<= 1
        if a & top:
            a ^= poly
        b >>= 1
    return result


GF256 = GaloisField(8)
GF16 = GaloisField(4)


def fe_mul(a: int, b: int, gf: GaloisField = GF256) -> int:
    return gf.mul(a, b)


def fe_add(a: int, b: int) -> int:
    return a ^ b


def row_echelon(
    m: np.ndarray, gf: GaloisField = GF256, reduced: bool = False
) -> tuple[np.ndarray, list[int]]:
    """Row echelon form of ``m`` and its pivot columns.

    Pivots are normalised to 1.  With ``reduced=True`` the pivot columns are also
    cleared above the pivot (RREF).
    """
    a = np.array(m, dtype=np.uint8, copy=True)
    if a.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    rows, cols = a.shape
    pivots: list[int] = []
    r = 0
    for c in range(cols):
        if r == rows:
            break
        nz = np.nonzero(a[r:, c])[0]
        if len(nz) == 0:
            continue
        p = r + int(nz[0])
        if p != r:
            a[[r, p]] = a[[p, r]]
        a[r] = gf.mul_table[gf.inv_table[a[r, c]], a[r]]
        start = 0 if reduced else r + 1
        for i in range(start, rows):
            if i != r and a[i, c]:
                a[i] ^= gf.mul_table[a[i, c], a[r]]
        pivots.append(c)
        r += 1
    return a, pivots


def rank(m: np.ndarray, gf: GaloisField = GF256) -> int:
    m = np.asarray(m)
    if m.size == 0:
        return 0
    return len(row_echelon(m, gf)[1])


def block_slices(sizes: Sequence[int]) -> list[slice]:
    out, start = [], 0
    for n in sizes:
        out.append(slice(start, start + n))
        start += n
    return out


def satisfies_decoding_conditions(
    system: np.ndarray, sizes: Sequence[int], target: int, gf: GaloisField = GF256
) -> bool:
    """Direct check of the two row-subset conditions for decoding ``target``.

    A row subset works when its rank equals the number of columns it touches and
    it holds at least ``sizes[target]`` independent rows touching the target block.
    Candidate subsets are "all rows supported inside a union of source blocks";
    with dense per-block coefficients every admissible subset spans the same
    space as one of these.
    """
    system = np.asarray(system, dtype=np.uint8)
    if system.size == 0:
        return False
    blocks = block_slices(sizes)
    n_src = len(sizes)
    touched_blocks = np.stack([system[:, b].any(axis=1) for b in blocks], axis=1)
    for mask in range(1, 1 << n_src):
        if not mask >> target & 1:
            continue
        inside = np.ones(len(system), dtype=bool)
        for s in range(n_src):
            if not mask >> s & 1:
                inside &= ~touched_blocks[:, s]
        sub = system[inside]
        if len(sub) == 0:
            continue
        cols = np.nonzero(sub.any(axis=0))[0]
        tb = blocks[target]
        if not np.all(np.isin(np.arange(tb.start, tb.stop), cols)):
            continue
        if rank(sub[:, cols], gf) != len(cols):
            continue
        hits = sub[touched_blocks[inside, target]]
        if rank(hits, gf) >= sizes[target]:
            return True
    return False


def solve_for_source(
    system: np.ndarray,
    rhs: np.ndarray,
    sizes: Sequence[int],
    target: int,
    gf: GaloisField = GF256,
) -> np.ndarray:
    """Recover the symbols of source ``target`` from ``system @ x = rhs``.

    ``rhs`` has one row per equation (payload vectors).  Raises ``DecodeError``
    when the target block is not determined by the rows.  Other blocks that get
    solved along the way are discarded.
    """
    system = np.asarray(system, dtype=np.uint8)
    rhs = np.asarray(rhs, dtype=np.uint8)
    if rhs.ndim == 1:
        rhs = rhs[:, None]
    if system.shape[0] != rhs.shape[0]:
        raise ValueError("system and rhs row counts differ")
    if system.shape[1] != sum(sizes):
        raise ValueError("column count does not match the source sizes")
    if system.shape[0] == 0:
        raise DecodeError("empty system")
    ncols = system.shape[1]
    aug = np.concatenate([system, rhs], axis=1)
    red, pivots = row_echelon(aug, gf, reduced=True)
    pivots = [p for p in pivots if p < ncols]
    pivot_row = {c: i for i, c in enumerate(pivots)}
    tb = block_slices(sizes)[target]
    out = np.zeros((sizes[target], rhs.shape[1]), dtype=np.uint8)
    for k, c in enumerate(range(tb.start, tb.stop)):
        i = pivot_row.get(c)
        # the unknown is determined only if its RREF row is a unit vector
        if i is None or np.count_nonzero(red[i, :ncols]) != 1:
            raise DecodeError(f"source {target} is not decodable from these rows")
        out[k] = red[i, ncols:]
    return out
