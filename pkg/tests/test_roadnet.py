import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crashscen.roadnet import (
    Edge,
    NetFormatError,
    Node,
    NodeClass,
    RoadGraph,
    classify_nodes,
    compare_networks,
    connectivity_error,
    intersection_count_error,
    lane_count_error,
    opendrive_junction_count,
    parse_sumo_net,
    read_opendrive,
    road_summary,
    write_opendrive,
    write_sumo_net,
)

import generators
import oracles


def star(n_arms: int, prefix: str = "s", lanes: int = 1, origin=(0.0, 0.0)) -> RoadGraph:
    ox, oy = origin
    nodes = [Node(f"{prefix}c", ox, oy)]
    edges = []
    for i in range(n_arms):
        ang = 2 * math.pi * i / n_arms
        nodes.append(Node(f"{prefix}{i}", ox + 50 * math.cos(ang), oy + 50 * math.sin(ang)))
        edges.append(Edge(f"{prefix}e{i}", f"{prefix}c", f"{prefix}{i}", lanes))
    return RoadGraph.build(nodes, edges)


def path(n: int, prefix: str = "p", y: float = 0.0, lanes=1) -> RoadGraph:
    nodes = [Node(f"{prefix}{i}", 30.0 * i, y) for i in range(n)]
    edges = [Edge(f"{prefix}e{i}", f"{prefix}{i}", f"{prefix}{i + 1}", lanes) for i in range(n - 1)]
    return RoadGraph.build(nodes, edges)


def union(*graphs: RoadGraph) -> RoadGraph:
    return RoadGraph.build([n for g in graphs for n in g.nodes.values()], [e for g in graphs for e in g.edges])


@pytest.fixture
def cross(fixtures):
    return parse_sumo_net((fixtures / "cross.net.xml").read_bytes())


def test_cross_fixture_classification(cross):
    assert len(cross.nodes) == 5 and len(cross.edges) == 4
    counts = classify_nodes(cross).counts
    assert counts[NodeClass.TRUE_INTERSECTION] == 1
    assert counts[NodeClass.DEAD_END] == 4
    assert counts[NodeClass.THROUGH_NODE] == 0


def test_empty_net():
    g = parse_sumo_net(b"<net/>")
    assert not g.nodes and not g.edges


def test_parse_errors():
    with pytest.raises(NetFormatError) as info:
        parse_sumo_net(b"<net><junction")
    assert info.value.code == "xml-parse"
    with pytest.raises(NetFormatError) as info:
        parse_sumo_net(b'<net><junction id="a" x="0" y="0"/><edge id="e" from="a" to="zz"><lane id="e_0" index="0"/></edge></net>')
    assert info.value.code == "dangling-node-ref"
    with pytest.raises(NetFormatError) as info:
        parse_sumo_net(b'<net><junction id="a" x="0"/></net>')
    assert info.value.code == "missing-coordinates"


def test_internal_elements_skipped():
    xml = b"""<net>
      <junction id="a" x="0" y="0"/><junction id="b" x="10" y="0"/>
      <junction id=":a_0" type="internal" x="0" y="0"/>
      <edge id=":a_0" function="internal"><lane id=":a_0_0" index="0"/></edge>
      <edge id="ab" from="a" to="b"><lane id="ab_0" index="0"/><lane id="ab_1" index="1"/></edge>
    </net>"""
    g = parse_sumo_net(xml)
    assert set(g.nodes) == {"a", "b"}
    assert [(e.id, e.lane_count) for e in g.edges] == [("ab", 2)]


def test_path_and_star_classes():
    c = classify_nodes(path(3)).counts
    assert (c[NodeClass.TRUE_INTERSECTION], c[NodeClass.THROUGH_NODE], c[NodeClass.DEAD_END]) == (0, 1, 2)
    assert classify_nodes(star(5)).intersections == 1


def test_opposing_edges_collapse_in_degree():
    # a two-way road encoded as two directed edges still makes b a through node
    nodes = [Node("a", 0, 0), Node("b", 10, 0), Node("c", 20, 0)]
    edges = [Edge("ab", "a", "b"), Edge("ba", "b", "a"), Edge("bc", "b", "c"), Edge("cb", "c", "b")]
    assert classify_nodes(RoadGraph.build(nodes, edges)).classes["b"] is NodeClass.THROUGH_NODE


def test_isolated_nodes_dropped(caplog):
    g = RoadGraph.build([Node("a", 0, 0), Node("b", 1, 0), Node("lonely", 5, 5)], [Edge("ab", "a", "b")])
    cls = classify_nodes(g)
    assert cls.dropped == ("lonely",)
    assert "lonely" in caplog.text
    assert sum(cls.counts.values()) == 2


@given(st.integers(0, 2**32 - 1))
def test_classification_matches_degree_scan(seed):
    g = generators.random_graph(np.random.default_rng(seed))
    nxg = oracles.to_networkx(g)
    cls = classify_nodes(g)
    for node, deg in nxg.degree():
        expected = None if deg == 0 else {1: NodeClass.DEAD_END, 2: NodeClass.THROUGH_NODE}.get(deg, NodeClass.TRUE_INTERSECTION)
        assert cls.classes.get(node) is expected
    assert sum(cls.counts.values()) + len(cls.dropped) == len(g.nodes)


# -- metrics ---------------------------------------------------------------------


def test_ice_examples():
    four = union(*(star(3, f"s{i}", origin=(500.0 * i, 0)) for i in range(4)))
    three = union(*(star(3, f"s{i}", origin=(500.0 * i, 0)) for i in range(3)))
    seven = union(*(star(3, f"s{i}", origin=(500.0 * i, 0)) for i in range(7)))
    two = union(*(star(3, f"s{i}", origin=(500.0 * i, 0)) for i in range(2)))
    assert intersection_count_error(four, four) == 0.0
    assert intersection_count_error(four, three) == 25.0
    assert intersection_count_error(two, seven) == 100.0
    with pytest.raises(ValueError):
        intersection_count_error(path(3), four)


def test_lce_examples():
    gt = path(3, lanes=2)
    cand = RoadGraph.build(gt.nodes.values(), [Edge("pe0", "p0", "p1", 2), Edge("pe1", "p1", "p2", 1)])
    assert lane_count_error(gt, gt).lce == 0.0
    rep = lane_count_error(gt, cand)
    assert rep.lce == 25.0
    assert [d["diff"] for d in rep.per_segment] == [0, -1]
    assert lane_count_error(path(4), path(5)).per_segment is None
    with pytest.raises(ValueError):
        lane_count_error(RoadGraph.build([Node("a", 0, 0)], []), gt)


def test_per_segment_matching_ignores_ids():
    gt = path(3, lanes=1)
    renamed = RoadGraph.build(
        [Node("x", 0, 0), Node("y", 30.04, 0), Node("z", 60, 0)],
        [Edge("second", "y", "z", 3), Edge("first", "x", "y", 1)],
    )
    diffs = lane_count_error(gt, renamed).per_segment
    assert [(d["gt_edge"], d["candidate_edge"], d["diff"]) for d in diffs] == [("pe0", "first", 0), ("pe1", "second", 2)]


def test_ce_examples():
    assert connectivity_error(path(4), path(4)) == 0.0
    split = union(path(2, "a"), path(2, "b", y=100))
    assert connectivity_error(path(4), split) == 100.0
    g35 = union(path(3, "a"), path(5, "b", y=100))
    h35 = union(path(5, "c"), path(3, "d", y=100))
    assert connectivity_error(g35, h35) == 0.0
    assert connectivity_error(RoadGraph.build([], []), path(2)) == 0.0


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_metrics_match_oracles(s1, s2):
    gt = generators.random_graph_with_intersection(np.random.default_rng(s1))
    cand = generators.random_graph(np.random.default_rng(s2))
    cmp = compare_networks(gt, cand)
    assert cmp.ice == oracles.ice(gt, cand)
    assert cmp.lce == oracles.lce(gt, cand)
    assert cmp.ce == oracles.ce(gt, cand)
    for v in (cmp.ice, cmp.lce, cmp.ce):
        assert 0.0 <= v <= 100.0


@given(st.integers(0, 2**32 - 1))
def test_self_comparison_is_zero(seed):
    g = generators.random_graph_with_intersection(np.random.default_rng(seed))
    cmp = compare_networks(g, g)
    assert (cmp.ice, cmp.lce, cmp.ce) == (0.0, 0.0, 0.0)


@given(st.integers(0, 2**32 - 1), st.floats(-1000, 1000), st.floats(-1000, 1000), st.floats(0, 2 * math.pi))
def test_ice_invariant_under_relabel_and_motion(seed, dx, dy, theta):
    g = generators.random_graph_with_intersection(np.random.default_rng(seed))
    c, s = math.cos(theta), math.sin(theta)
    nodes = [Node("q" + n.id, c * n.x - s * n.y + dx, s * n.x + c * n.y + dy) for n in g.nodes.values()]
    edges = [Edge("r" + e.id, "q" + e.from_node, "q" + e.to_node, e.lane_count) for e in g.edges]
    moved = RoadGraph.build(nodes, edges)
    assert intersection_count_error(g, moved) == 0.0
    assert classify_nodes(moved).intersections == classify_nodes(g).intersections


# -- writers and round trips -------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_sumo_round_trip(seed):
    g = generators.random_graph(np.random.default_rng(seed))
    back = parse_sumo_net(write_sumo_net(g))
    assert set(back.nodes) == set(g.nodes)
    assert [(e.id, e.from_node, e.to_node, e.lane_count) for e in back.edges] == [
        (e.id, e.from_node, e.to_node, e.lane_count) for e in g.edges
    ]


def test_opendrive_single_edge():
    g = RoadGraph.build([Node("a", 0, 0), Node("b", 100, 0)], [Edge("ab", "a", "b", 2, 100.0)])
    root = ET.fromstring(write_opendrive(g))
    roads = root.findall("road")
    assert len(roads) == 1
    assert float(roads[0].get("length")) == pytest.approx(100.0)
    lanes = roads[0].findall("lanes/laneSection/right/lane")
    assert sorted(int(l.get("id")) for l in lanes) == [-2, -1]
    assert root.find("lanes/laneSection/left") is None


def test_opendrive_cross_connections(cross):
    xodr = write_opendrive(cross)
    root = ET.fromstring(xodr)
    assert len(root.findall("road")) == 4
    junctions = root.findall("junction")
    assert len(junctions) == 1 == opendrive_junction_count(xodr)
    assert len(junctions[0].findall("connection")) == 12


def test_opendrive_errors():
    with pytest.raises(NetFormatError) as info:
        write_opendrive(RoadGraph.build([Node("a", 0, 0), Node("b", 0, 0)], [Edge("ab", "a", "b")]))
    assert info.value.code == "zero-length-edge"
    with pytest.raises(NetFormatError) as info:
        write_opendrive(RoadGraph.build([Node("a", 0, 0), Node("b", 9, 0), Node("c", 50, 50)], [Edge("ab", "a", "b")]))
    assert info.value.code == "isolated-node"


@given(st.integers(0, 2**32 - 1))
def test_opendrive_round_trip(seed):
    g = generators.random_graph(np.random.default_rng(seed), isolated=False)
    back = read_opendrive(write_opendrive(g))
    assert len(back.nodes) == len(g.nodes)
    assert len(back.edges) == len(g.edges)
    assert {e.id: e.lane_count for e in back.edges} == {e.id: e.lane_count for e in g.edges}


def test_road_summary_lists_everything(cross):
    text = road_summary(cross)
    assert text.startswith("road network: 5 nodes, 4 edges")
    assert "edge west_in from=W to=C lanes=2 length=100.00" in text
    assert "node C x=0.00 y=0.00 class=true_intersection" in text
