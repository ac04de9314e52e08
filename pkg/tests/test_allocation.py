import pytest
from hypothesis import given
from hypothesis import strategies as st

from internc.allocation import (
    RateAllocation,
    allocation_rows,
    check_feasible,
    derive_forwarding,
    free_types,
    read_allocation,
    write_allocation,
)
from internc.topology import load_topology, parse_topology

A, B, AB = 1, 2, 3

# two sources meet at N, which forwards on a wide link N -> C
MERGE = """
nodes:
  - {name: A, role: source}
  - {name: B, role: source}
  - {name: N, role: intermediate}
  - {name: C, role: client}
links:
  - {from: A, to: N, capacity: 4, loss: 0}
  - {from: B, to: N, capacity: 3, loss: 0}
  - {from: N, to: C, capacity: 20, loss: 0}
sources: [{name: A, symbols: 2, rate: 4}, {name: B, symbols: 2, rate: 3}]
subscriptions: [{client: C, source: A}]
"""


def _merge(ra_out, rb_out, rab_out):
    t = parse_topology(MERGE)
    alloc = RateAllocation.empty(t)  # inputs: r_A = 4, r_B = 3
    alloc.set(("N", "C"), A, ra_out)
    alloc.set(("N", "C"), B, rb_out)
    alloc.set(("N", "C"), AB, rab_out)
    return t, alloc


@given(st.floats(0, 4), st.floats(0, 3), st.floats(0, 1))
def test_mixing_bounded_by_leftover_is_feasible(ra, rb, frac):
    rab = frac * min(4 - ra, 3 - rb)
    t, alloc = _merge(ra, rb, rab)
    assert check_feasible(t, alloc) == []


@given(st.floats(0, 4), st.floats(0, 3))
def test_one_more_mixed_packet_breaks_c4(ra, rb):
    t, alloc = _merge(ra, rb, min(4 - ra, 3 - rb) + 1)
    kinds = {v.constraint for v in check_feasible(t, alloc)}
    assert "C4" in kinds


def test_zero_allocation_feasible():
    for name in ("butterfly", "topology1", "irregular"):
        t = load_topology(name)
        assert check_feasible(t, RateAllocation.empty(t)) == []


def test_each_constraint_detected():
    t, alloc = _merge(1, 1, 0)
    alloc.set(("N", "C"), A, -0.5)
    assert [v.constraint for v in check_feasible(t, alloc)] == ["C1"]

    t, alloc = _merge(4, 3, 0)
    t = t.with_capacity(5)
    alloc = RateAllocation(t, alloc.rates)
    assert "C2" in {v.constraint for v in check_feasible(t, alloc)}

    t, alloc = _merge(0, 0, 0)
    alloc.set(("B", "N"), B, 0.0)  # nothing of B reaches N
    alloc.set(("N", "C"), AB, 0.5)
    assert "C3" in {v.constraint for v in check_feasible(t, alloc)}


def test_c5_against_source_emission():
    t = load_topology("butterfly")
    alloc = RateAllocation.empty(t)
    # I2 receives more S1 than S1 emits in total (2 = 1 to I1 + 1 to C1)
    alloc.set(("I1", "I2"), A, 0.6)
    alloc.set(("S1", "I1"), A, 1.0)
    assert check_feasible(t, alloc) == []
    t2 = t.with_capacity(5)
    a2 = RateAllocation(t2, {k: dict(v) for k, v in alloc.rates.items()})
    a2.set(("I1", "I2"), A, 2.5)
    kinds = {v.constraint for v in check_feasible(t2, a2)}
    assert "C5" in kinds


def test_unknown_link_reported():
    t, alloc = _merge(1, 1, 0)
    alloc.rates[("C", "N")] = {A: 1.0}
    assert check_feasible(t, alloc)[0].constraint == "shape"


def test_forwarding_examples():
    t = parse_topology(MERGE.replace("capacity: 20", "capacity: 4"))
    alloc = RateAllocation.empty(t)
    alloc.set(("N", "C"), A, 4.0)
    assert derive_forwarding(alloc)[("N", "C")] == {A: pytest.approx(1.0)}

    alloc = RateAllocation.empty(t)
    assert derive_forwarding(alloc)[("N", "C")] == {}

    alloc.set(("N", "C"), A, 1.0)
    alloc.set(("N", "C"), AB, 1.0)
    w = derive_forwarding(alloc)[("N", "C")]
    assert w[A] == pytest.approx(w[AB]) == pytest.approx(0.5)


def test_source_links_send_at_source_rate():
    t = load_topology("butterfly").with_capacity(4).with_source_rate(2)
    w = derive_forwarding(RateAllocation.empty(t))
    assert w[("S1", "I1")] == {A: pytest.approx(0.5)}


@given(st.floats(0, 4), st.floats(0, 3), st.floats(0, 1))
def test_forwarding_is_a_subdistribution(ra, rb, frac):
    t, alloc = _merge(ra, rb, frac * min(4 - ra, 3 - rb))
    for w in derive_forwarding(alloc).values():
        assert all(x >= 0 for x in w.values())
        assert sum(w.values()) <= 1 + 1e-12


def test_csv_roundtrip(tmp_path):
    t, alloc = _merge(1.25, 0.5, 0.1)
    path = tmp_path / "a.csv"
    write_allocation(path, alloc)
    back = read_allocation(path, t)
    for key, rs in alloc.rates.items():
        for ty, r in rs.items():
            assert back.rate(key, ty) == r
    header = path.read_text().splitlines()[0]
    assert header == "link_from,link_to,type,r_innovative,f_flow,w_probability"
    assert any(row[2] == "A+B" for row in allocation_rows(alloc))


def test_read_rejects_unknown_link(tmp_path):
    t, _ = _merge(0, 0, 0)
    p = tmp_path / "bad.csv"
    p.write_text("link_from,link_to,type,r_innovative,f_flow,w_probability\nX,Y,A,1,1,1\n")
    with pytest.raises(ValueError):
        read_allocation(p, t)


def test_free_types_and_mixed_share():
    t = load_topology("butterfly")
    link = t.link_map[("I1", "I2")]
    assert free_types(t, link, "inter") == [A, B, AB]
    assert free_types(t, link, "intra") == [A, B]
    with pytest.raises(ValueError):
        free_types(t, link, "other")
    alloc = RateAllocation.empty(t)
    alloc.set(("I1", "I2"), AB, 1.0)
    alloc.set(("I2", "C1"), A, 1.0)
    assert alloc.mixed_share() == pytest.approx(0.5)
