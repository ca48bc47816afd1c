import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdigame.network import (EdgeAttr, GreParams, NetworkValidationError, RoadNetwork, Scenario, TntpParseError,
                             TripTable, generate_gre, load_tntp, randomize_demands, sioux_falls, validate_network,
                             write_tntp)

TWO_NODE = """<NUMBER OF ZONES> 2
<NUMBER OF NODES> 2
<FIRST THRU NODE> 1
<NUMBER OF LINKS> 1
<END OF METADATA>
~ init term capacity length fft b power speed toll type ;
 1 2 100.0 1 3.0 0.15 4 0 0 1 ;
"""


def test_sioux_falls_counts():
    net, trips = sioux_falls()
    assert (net.n_nodes, net.n_edges) == (24, 76)
    assert len(trips) == 528
    assert validate_network(net, trips) == []


def test_two_node_file():
    net, trips = load_tntp(io.StringIO(TWO_NODE))
    assert net.n_edges == 1
    assert net.adjacency[1] == (0,)
    assert net.adjacency[2] == ()
    assert len(trips) == 0
    assert net.edge_attr(0) == EdgeAttr(3.0, 100.0, 0.15, 4.0)


def test_empty_trips_section():
    trips_text = "<NUMBER OF ZONES> 2\n<TOTAL OD FLOW> 0\n<END OF METADATA>\n"
    _, trips = load_tntp(TWO_NODE, trips_text)
    assert len(trips) == 0


def test_zero_flow_pairs_and_comments_skipped():
    trips_text = ("<NUMBER OF ZONES> 2\n<END OF METADATA>\n~ comment\n"
                  "Origin 1\n 1 : 0.0; 2 : 5.5;\nOrigin 2\n 1 : 0.0;\n")
    _, trips = load_tntp(TWO_NODE, trips_text)
    assert list(trips) == [(1, 2, 5.5)]


def test_trip_to_unknown_node_rejected():
    with pytest.raises(NetworkValidationError):
        load_tntp(TWO_NODE, "<END OF METADATA>\nOrigin 1\n 7 : 1.0;\n")


def test_malformed_row_names_line():
    bad = TWO_NODE.replace(" 1 2 100.0 1 3.0 0.15 4 0 0 1 ;", " 1 2 lots 1 3.0 0.15 4 0 0 1 ;")
    with pytest.raises(TntpParseError) as info:
        load_tntp(bad)
    assert info.value.line == 7


def test_tntp_round_trip_sioux_falls():
    net, trips = sioux_falls()
    net_text, trips_text = write_tntp(net, trips)
    net2, trips2 = load_tntp(net_text, trips_text)
    assert net2 == net
    assert trips2 == trips


def test_gre_reference_instances():
    sf, _ = sioux_falls()
    small = generate_gre(GreParams(3, 2, seed=20), sf)
    large = generate_gre(GreParams(5, 4, seed=110), sf)
    assert (small.n_nodes, small.n_edges) == (6, 16)
    assert (large.n_nodes, large.n_edges) == (20, 55)


def test_gre_degenerate_probabilities():
    sf, _ = sioux_falls()
    net = generate_gre(GreParams(2, 1, p=1.0, q=0.0, seed=3), sf)
    assert sorted((u, v) for u, v, _ in net.edges) == [(1, 2), (2, 1)]


def test_gre_rejects_single_node():
    with pytest.raises(ValueError):
        GreParams(1, 1)


def test_gre_attributes_come_from_source():
    sf, _ = sioux_falls()
    pool = {(a.capacity, a.b, a.p) for *_, a in sf.edges}
    fft = {a.free_flow_time for *_, a in sf.edges}
    net = generate_gre(GreParams(4, 3, seed=5), sf)
    for u, v, a in net.edges:
        assert (a.capacity, a.b, a.p) in pool
        ru, cu = divmod(u - 1, 3)
        rv, cv = divmod(v - 1, 3)
        m = abs(ru - rv) + abs(cu - cv)
        assert any(abs(a.free_flow_time - m * f) < 1e-9 for f in fft)


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(2, 4), seed=st.integers(0, 2**32 - 1))
def test_gre_deterministic_and_strongly_connected(rows, cols, seed):
    sf, _ = sioux_falls()
    params = GreParams(rows, cols, seed=seed)
    a = generate_gre(params, sf)
    assert a == generate_gre(params, sf)
    trips = TripTable(tuple((u, v, 1.0) for u in a.nodes for v in a.nodes if u != v))
    assert validate_network(a, trips) == []


def test_randomize_demands_identity_and_interval():
    trips = TripTable(((1, 2, 1000.0), (2, 1, 1000.0)))
    assert randomize_demands(trips, 0.0, np.random.default_rng(0)) == trips
    for seed in range(50):
        out = randomize_demands(trips, 0.05, np.random.default_rng(seed))
        assert all(999.5 <= s <= 1000.5 for _, _, s in out)
    assert len(randomize_demands(TripTable(), 0.05, np.random.default_rng(0))) == 0


def test_randomize_demands_unbiased():
    trips = TripTable(tuple((1, 2, 10.0) for _ in range(2000)))
    out = randomize_demands(trips, 0.05, np.random.default_rng(1))
    rel = out.demands / 10.0 - 1.0
    assert [(o, d) for o, d, _ in out] == [(o, d) for o, d, _ in trips]
    # uniform on +-5e-4: SD of the mean is 5e-4 / sqrt(3 * 2000)
    assert abs(rel.mean()) < 4 * 5e-4 / np.sqrt(3 * 2000)


def test_validate_network_reports():
    net = RoadNetwork((1, 2), ())
    assert any("unreachable" in p for p in validate_network(net, TripTable(((1, 2, 1.0),))))
    sf, _ = sioux_falls()
    problems = validate_network(sf, TripTable(((1, 1, 1.0),)))
    assert len(problems) == 1 and "origin == destination" in problems[0]


def test_network_invariants_enforced():
    a = EdgeAttr(1.0, 1.0)
    with pytest.raises(NetworkValidationError):
        RoadNetwork((1, 2), ((1, 2, a), (1, 2, a)))
    with pytest.raises(NetworkValidationError):
        RoadNetwork((1,), ((1, 1, a),))
    with pytest.raises(ValueError):
        EdgeAttr(0.0, 1.0)


def test_scenario_json_round_trip(gre32):
    back = Scenario.from_json(gre32.to_json())
    assert back == gre32
    assert back.net.fingerprint() == gre32.net.fingerprint()
