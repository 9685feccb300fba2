"""Road-network graphs: SUMO net parsing, OpenDRIVE export, topology metrics."""

from __future__ import annotations

import enum
import logging
import math
import xml.etree.ElementTree as ET
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

log = logging.getLogger(__name__)

LANE_WIDTH = 3.5
MATCH_GRID = 0.1


class NetFormatError(ValueError):
    """Raised for unreadable network files; ``code`` is a machine-readable reason."""

    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code


class NodeClass(enum.Enum):
    TRUE_INTERSECTION = "true_intersection"
    THROUGH_NODE = "through_node"
    DEAD_END = "dead_end"


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    id: str
    from_node: str
    to_node: str
    lane_count: int = 1
    length: float | None = None

    def __post_init__(self) -> None:
        if self.lane_count < 1:
            raise ValueError(f"edge {self.id!r}: lane_count must be >= 1")


@dataclass(frozen=True)
class RoadGraph:
    nodes: Mapping[str, Node] = field(default_factory=dict)
    edges: tuple[Edge, ...] = ()
    directed: bool = True

    def __post_init__(self) -> None:
        nodes = dict(self.nodes) if not isinstance(self.nodes, dict) else self.nodes
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", tuple(self.edges))
        for e in self.edges:
            for end in (e.from_node, e.to_node):
                if end not in nodes:
                    raise NetFormatError("dangling-node-ref", f"edge {e.id!r} references missing node {end!r}")

    @classmethod
    def build(cls, nodes: Iterable[Node], edges: Iterable[Edge], directed: bool = True) -> RoadGraph:
        return cls({n.id: n for n in nodes}, tuple(edges), directed)

    def edge(self, edge_id: str) -> Edge:
        for e in self.edges:
            if e.id == edge_id:
                return e
        raise KeyError(edge_id)

    def neighbors(self) -> dict[str, set[str]]:
        """Undirected simple adjacency; opposing directed edges collapse to one link."""
        adj: dict[str, set[str]] = {nid: set() for nid in self.nodes}
        for e in self.edges:
            if e.from_node != e.to_node:
                adj[e.from_node].add(e.to_node)
                adj[e.to_node].add(e.from_node)
        return adj

    def degrees(self) -> dict[str, int]:
        return {nid: len(nb) for nid, nb in self.neighbors().items()}

    def incident_edges(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if node_id in (e.from_node, e.to_node)]

    def length_of(self, e: Edge) -> float:
        return e.length if e.length is not None else self.geometric_length(e)

    def geometric_length(self, e: Edge) -> float:
        a, b = self.nodes[e.from_node], self.nodes[e.to_node]
        return math.hypot(b.x - a.x, b.y - a.y)


def _float_attr(el: ET.Element, name: str, what: str) -> float:
    raw = el.get(name)
    if raw is None:
        raise NetFormatError("missing-coordinates", f"{what} lacks attribute {name!r}")
    try:
        return float(raw)
    except ValueError:
        raise NetFormatError("schema", f"{what}: attribute {name!r}={raw!r} is not a number") from None


def _parse_xml(data: bytes | str) -> ET.Element:
    try:
        return ET.fromstring(data)
    except ET.ParseError as exc:
        raise NetFormatError("xml-parse", str(exc)) from exc


def parse_sumo_net(data: bytes | str) -> RoadGraph:
    root = _parse_xml(data)
    if root.tag != "net":
        raise NetFormatError("schema", f"root element is <{root.tag}>, expected <net>")
    nodes: dict[str, Node] = {}
    for j in root.iter("junction"):
        if j.get("type") == "internal":
            continue
        jid = j.get("id")
        if not jid:
            raise NetFormatError("schema", "junction without id")
        if jid in nodes:
            raise NetFormatError("schema", f"duplicate junction id {jid!r}")
        nodes[jid] = Node(jid, _float_attr(j, "x", f"junction {jid!r}"), _float_attr(j, "y", f"junction {jid!r}"))
    edges: list[Edge] = []
    seen: set[str] = set()
    for e in root.iter("edge"):
        eid = e.get("id")
        if not eid:
            raise NetFormatError("schema", "edge without id")
        if e.get("function") == "internal" or eid.startswith(":"):
            continue
        if eid in seen:
            raise NetFormatError("schema", f"duplicate edge id {eid!r}")
        seen.add(eid)
        src, dst = e.get("from"), e.get("to")
        if src is None or dst is None:
            raise NetFormatError("schema", f"edge {eid!r} lacks from/to")
        for end in (src, dst):
            if end not in nodes:
                raise NetFormatError("dangling-node-ref", f"edge {eid!r} references missing junction {end!r}")
        lanes = e.findall("lane")
        if not lanes:
            raise NetFormatError("schema", f"edge {eid!r} has no lanes")
        lengths = [float(la.get("length")) for la in lanes if la.get("length") is not None]
        a, b = nodes[src], nodes[dst]
        length = max(lengths) if lengths else math.hypot(b.x - a.x, b.y - a.y)
        edges.append(Edge(eid, src, dst, len(lanes), length))
    return RoadGraph(nodes, tuple(edges))


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tostring(root: ET.Element) -> bytes:
    ET.indent(root, space="    ")
    return ET.tostring(root, encoding="utf-8", xml_declaration=True) + b"\n"


def write_sumo_net(graph: RoadGraph) -> bytes:
    """Emit the ``.net.xml`` subset this module reads."""
    root = ET.Element("net", version="1.9", junctionCornerDetail="5")
    degrees = graph.degrees()
    for e in graph.edges:
        el = ET.SubElement(root, "edge", id=e.id, attrib={"from": e.from_node, "to": e.to_node})
        a, b = graph.nodes[e.from_node], graph.nodes[e.to_node]
        length = e.length if e.length is not None else graph.geometric_length(e)
        for i in range(e.lane_count):
            ET.SubElement(
                el,
                "lane",
                id=f"{e.id}_{i}",
                index=str(i),
                speed="13.89",
                length=_fmt(length),
                shape=f"{_fmt(a.x)},{_fmt(a.y)} {_fmt(b.x)},{_fmt(b.y)}",
            )
    for n in graph.nodes.values():
        kind = "dead_end" if degrees[n.id] <= 1 else "priority"
        ET.SubElement(root, "junction", id=n.id, type=kind, x=_fmt(n.x), y=_fmt(n.y))
    return _tostring(root)


# -- OpenDRIVE -----------------------------------------------------------------


def write_opendrive(graph: RoadGraph, name: str = "generated") -> bytes:
    degrees = graph.degrees()
    for nid, d in degrees.items():
        if d == 0:
            raise NetFormatError("isolated-node", f"node {nid!r} has no incident edges")
    if not graph.edges:
        raise NetFormatError("empty-network", "cannot write an OpenDRIVE file without roads")
    intersections = {nid for nid, d in degrees.items() if d >= 3}

    root = ET.Element("OpenDRIVE")
    ET.SubElement(root, "header", revMajor="1", revMinor="6", name=name, version="1.00")
    for e in graph.edges:
        geo_len = graph.geometric_length(e)
        if geo_len <= 0 or (e.length is not None and e.length <= 0):
            raise NetFormatError("zero-length-edge", f"edge {e.id!r} has zero length")
        a, b = graph.nodes[e.from_node], graph.nodes[e.to_node]
        hdg = math.atan2(b.y - a.y, b.x - a.x)
        road = ET.SubElement(root, "road", name=e.id, length=f"{geo_len:.6f}", id=e.id, junction="-1")
        if e.from_node in intersections or e.to_node in intersections:
            link = ET.SubElement(road, "link")
            if e.from_node in intersections:
                ET.SubElement(link, "predecessor", elementType="junction", elementId=f"J{e.from_node}")
            if e.to_node in intersections:
                ET.SubElement(link, "successor", elementType="junction", elementId=f"J{e.to_node}")
        plan = ET.SubElement(road, "planView")
        geom = ET.SubElement(
            plan, "geometry", s="0.000000", x=f"{a.x:.6f}", y=f"{a.y:.6f}", hdg=f"{hdg:.12f}", length=f"{geo_len:.6f}"
        )
        ET.SubElement(geom, "line")
        lanes = ET.SubElement(road, "lanes")
        section = ET.SubElement(lanes, "laneSection", s="0.000000")
        center = ET.SubElement(section, "center")
        ET.SubElement(center, "lane", id="0", type="none", level="false")
        right = ET.SubElement(section, "right")
        for i in range(1, e.lane_count + 1):
            lane = ET.SubElement(right, "lane", id=str(-i), type="driving", level="false")
            ET.SubElement(lane, "width", sOffset="0.0", a=f"{LANE_WIDTH}", b="0.0", c="0.0", d="0.0")
        ET.SubElement(road, "userData", code="nodes", value=f"{e.from_node} {e.to_node}")
    for nid in sorted(intersections):
        junction = ET.SubElement(root, "junction", id=f"J{nid}", name=nid)
        incident = graph.incident_edges(nid)
        cid = 0
        for inc in incident:
            for out in incident:
                if inc.id == out.id:
                    continue
                contact = "start" if out.from_node == nid else "end"
                ET.SubElement(
                    junction, "connection", id=str(cid), incomingRoad=inc.id, connectingRoad=out.id, contactPoint=contact
                )
                cid += 1
    return _tostring(root)


def _grid_key(x: float, y: float) -> tuple[int, int]:
    return (round(x / MATCH_GRID), round(y / MATCH_GRID))


def read_opendrive(data: bytes | str) -> RoadGraph:
    """Read back the straight-line subset written by :func:`write_opendrive`.

    Node ids come from road ``userData`` when present; otherwise road
    endpoints are merged on a 0.1 m grid.
    """
    root = _parse_xml(data)
    if root.tag != "OpenDRIVE":
        raise NetFormatError("schema", f"root element is <{root.tag}>, expected <OpenDRIVE>")
    if root.find("header") is None:
        raise NetFormatError("schema", "missing <header>")
    nodes: dict[str, Node] = {}
    by_key: dict[tuple[int, int], str] = {}
    edges = []

    def node_at(x: float, y: float, hint: str | None) -> str:
        if hint is not None:
            nodes.setdefault(hint, Node(hint, x, y))
            return hint
        key = _grid_key(x, y)
        if key not in by_key:
            nid = f"n{len(by_key)}"
            by_key[key] = nid
            nodes[nid] = Node(nid, x, y)
        return by_key[key]

    for road in root.findall("road"):
        rid = road.get("id")
        if rid is None:
            raise NetFormatError("schema", "road without id")
        geoms = road.findall("planView/geometry")
        if not geoms:
            raise NetFormatError("schema", f"road {rid!r} has no planView geometry")
        g0, g1 = geoms[0], geoms[-1]
        x0, y0 = _float_attr(g0, "x", f"road {rid!r}"), _float_attr(g0, "y", f"road {rid!r}")
        hdg = _float_attr(g1, "hdg", f"road {rid!r}")
        seg = _float_attr(g1, "length", f"road {rid!r}")
        x1 = _float_attr(g1, "x", f"road {rid!r}") + seg * math.cos(hdg)
        y1 = _float_attr(g1, "y", f"road {rid!r}") + seg * math.sin(hdg)
        hint_from = hint_to = None
        ud = road.find("userData[@code='nodes']")
        if ud is not None and len((ud.get("value") or "").split()) == 2:
            hint_from, hint_to = ud.get("value").split()
        section = road.find("lanes/laneSection")
        if section is None:
            raise NetFormatError("schema", f"road {rid!r} has no laneSection")
        lane_count = len(section.findall("right/lane")) + len(section.findall("left/lane"))
        if lane_count < 1:
            raise NetFormatError("schema", f"road {rid!r} has no driving lanes")
        length = float(road.get("length", seg))
        edges.append(Edge(rid, node_at(x0, y0, hint_from), node_at(x1, y1, hint_to), lane_count, length))
    return RoadGraph(nodes, tuple(edges))


def opendrive_junction_count(data: bytes | str) -> int:
    return len(_parse_xml(data).findall("junction"))


# -- classification and metrics -----------------------------------------------


@dataclass(frozen=True)
class Classification:
    classes: dict[str, NodeClass]
    dropped: tuple[str, ...] = ()

    @property
    def counts(self) -> dict[NodeClass, int]:
        c = Counter(self.classes.values())
        return {k: c.get(k, 0) for k in NodeClass}

    @property
    def intersections(self) -> int:
        return self.counts[NodeClass.TRUE_INTERSECTION]


def node_class(degree: int) -> NodeClass | None:
    if degree >= 3:
        return NodeClass.TRUE_INTERSECTION
    if degree == 2:
        return NodeClass.THROUGH_NODE
    if degree == 1:
        return NodeClass.DEAD_END
    return None


def classify_nodes(graph: RoadGraph) -> Classification:
    classes = {}
    dropped = []
    for nid, d in graph.degrees().items():
        cls = node_class(d)
        if cls is None:
            dropped.append(nid)
        else:
            classes[nid] = cls
    if dropped:
        log.warning("dropping %d isolated node(s) before classification: %s", len(dropped), ", ".join(sorted(dropped)))
    return Classification(classes, tuple(sorted(dropped)))


def _clipped_relative_error(truth: int | Fraction, candidate: int | Fraction) -> float:
    """``min(|truth - candidate| / truth, 1) * 100`` with 0 meaning a perfect match.

    Inputs are exact rationals so the result is rounded to float only once.
    """
    return float(min(Fraction(abs(truth - candidate)) / truth, 1) * 100)


def intersection_count_error(gt: RoadGraph, sumo: RoadGraph) -> float:
    n_gt = classify_nodes(gt).intersections
    if n_gt == 0:
        raise ValueError("ground truth has no true intersections; ICE is undefined")
    return _clipped_relative_error(n_gt, classify_nodes(sumo).intersections)


def _exact_mean_lanes(graph: RoadGraph) -> Fraction:
    if not graph.edges:
        raise ValueError("graph has no edges")
    return Fraction(sum(e.lane_count for e in graph.edges), len(graph.edges))


def mean_lane_count(graph: RoadGraph) -> float:
    return float(_exact_mean_lanes(graph))


def _edge_key(graph: RoadGraph, e: Edge) -> tuple[int, int, int, int]:
    a, b = graph.nodes[e.from_node], graph.nodes[e.to_node]
    return _grid_key(a.x, a.y) + _grid_key(b.x, b.y)


def per_segment_lane_diffs(gt: RoadGraph, sumo: RoadGraph) -> list[dict] | None:
    if len(gt.edges) != len(sumo.edges):
        return None
    g_sorted = sorted(gt.edges, key=lambda e: (_edge_key(gt, e), e.id))
    s_sorted = sorted(sumo.edges, key=lambda e: (_edge_key(sumo, e), e.id))
    return [
        {"gt_edge": g.id, "candidate_edge": s.id, "gt_lanes": g.lane_count, "candidate_lanes": s.lane_count, "diff": s.lane_count - g.lane_count}
        for g, s in zip(g_sorted, s_sorted)
    ]


@dataclass(frozen=True)
class LaneReport:
    lce: float
    mean_gt: float
    mean_candidate: float
    segment_count_gt: int
    segment_count_candidate: int
    per_segment: list[dict] | None


def lane_count_error(gt: RoadGraph, sumo: RoadGraph) -> LaneReport:
    if not gt.edges or not sumo.edges:
        raise ValueError("lane count error needs at least one edge in each graph")
    lg, ls = _exact_mean_lanes(gt), _exact_mean_lanes(sumo)
    return LaneReport(
        _clipped_relative_error(lg, ls), float(lg), float(ls), len(gt.edges), len(sumo.edges), per_segment_lane_diffs(gt, sumo)
    )


def connected_components(graph: RoadGraph) -> list[set[str]]:
    parent = {nid: nid for nid in graph.nodes}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in graph.edges:
        ra, rb = find(e.from_node), find(e.to_node)
        if ra != rb:
            parent[ra] = rb
    groups: dict[str, set[str]] = defaultdict(set)
    for nid in graph.nodes:
        groups[find(nid)].add(nid)
    return sorted(groups.values(), key=lambda g: (-len(g), sorted(g)))


def connectivity_error(gt: RoadGraph, sumo: RoadGraph) -> float:
    gt_sizes = sorted((len(c) for c in connected_components(gt)), reverse=True)
    if not gt_sizes:
        log.info("ground truth graph is empty; connectivity error set to 0")
        return 0.0
    pool = Counter(len(c) for c in connected_components(sumo))
    matched = 0
    for size in gt_sizes:
        if pool[size] > 0:
            pool[size] -= 1
            matched += 1
    total = len(gt_sizes)
    return 100 * (total - matched) / total


@dataclass(frozen=True)
class NetworkComparison:
    ice: float
    lce: float
    ce: float
    intersections_gt: int
    intersections_candidate: int
    mean_lanes_gt: float
    mean_lanes_candidate: float
    segment_count_gt: int
    segment_count_candidate: int
    per_segment_lane_diffs: list[dict] | None = None

    def to_dict(self) -> dict:
        return {
            "ice": self.ice,
            "lce": self.lce,
            "ce": self.ce,
            "intersections_gt": self.intersections_gt,
            "intersections_candidate": self.intersections_candidate,
            "mean_lanes_gt": self.mean_lanes_gt,
            "mean_lanes_candidate": self.mean_lanes_candidate,
            "segment_count_gt": self.segment_count_gt,
            "segment_count_candidate": self.segment_count_candidate,
            "per_segment_lane_diffs": self.per_segment_lane_diffs,
        }


def compare_networks(gt: RoadGraph, candidate: RoadGraph) -> NetworkComparison:
    lanes = lane_count_error(gt, candidate)
    return NetworkComparison(
        ice=intersection_count_error(gt, candidate),
        lce=lanes.lce,
        ce=connectivity_error(gt, candidate),
        intersections_gt=classify_nodes(gt).intersections,
        intersections_candidate=classify_nodes(candidate).intersections,
        mean_lanes_gt=lanes.mean_gt,
        mean_lanes_candidate=lanes.mean_candidate,
        segment_count_gt=lanes.segment_count_gt,
        segment_count_candidate=lanes.segment_count_candidate,
        per_segment_lane_diffs=lanes.per_segment,
    )


def road_summary(graph: RoadGraph) -> str:
    """Plain-text node/edge/lane listing fed to the behavior stage."""
    classes = classify_nodes(graph).classes
    lines = [f"road network: {len(graph.nodes)} nodes, {len(graph.edges)} edges"]
    for n in sorted(graph.nodes.values(), key=lambda n: n.id):
        cls = classes.get(n.id)
        lines.append(f"node {n.id} x={n.x:.2f} y={n.y:.2f} class={cls.value if cls else 'isolated'}")
    for e in graph.edges:
        lines.append(f"edge {e.id} from={e.from_node} to={e.to_node} lanes={e.lane_count} length={graph.length_of(e):.2f}")
    return "\n".join(lines)
