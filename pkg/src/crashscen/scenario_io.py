"""OpenSCENARIO subset, trajectory extraction and bundle validation.

Only three maneuver kinds are understood, each mapped to its OpenSCENARIO 1.1
element: ``SpeedAction`` (speed-change), ``LaneChangeAction`` (lane-change)
and ``FollowTrajectoryAction`` with a polyline (trajectory-follow).
Maneuvers start on a ``SimulationTimeCondition``. Trajectory vertex times are
relative to the maneuver start.
"""

from __future__ import annotations

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .roadnet import LANE_WIDTH, NetFormatError, RoadGraph, parse_sumo_net, read_opendrive
from .trajectory import AgentTrack, TrajectorySet, finite_difference_velocity

log = logging.getLogger(__name__)

SPEED_CHANGE = "speed-change"
LANE_CHANGE = "lane-change"
TRAJECTORY_FOLLOW = "trajectory-follow"
MANEUVER_KINDS = (SPEED_CHANGE, LANE_CHANGE, TRAJECTORY_FOLLOW)

VALIDATION_DT = 0.1
MIN_VALIDATION_HORIZON = 10.0


class ScenarioError(ValueError):
    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class Entity:
    name: str
    length: float = 4.5
    width: float = 1.8
    height: float = 1.5
    category: str = "car"


@dataclass(frozen=True)
class RoadPosition:
    road_id: str
    lane_id: int
    s: float
    offset: float = 0.0


@dataclass(frozen=True)
class WorldPosition:
    x: float
    y: float
    h: float = 0.0


@dataclass(frozen=True)
class InitState:
    entity: str
    position: RoadPosition | WorldPosition
    speed: float = 0.0


@dataclass(frozen=True)
class Vertex:
    time: float
    x: float
    y: float
    h: float = 0.0


@dataclass(frozen=True)
class Maneuver:
    name: str
    entity: str
    kind: str
    start: float = 0.0
    duration: float = 0.0
    target_speed: float | None = None
    target_lane: int | None = None
    vertices: tuple[Vertex, ...] = ()

    @property
    def end(self) -> float:
        if self.kind == TRAJECTORY_FOLLOW and self.vertices:
            return self.start + self.vertices[-1].time
        return self.start + self.duration


@dataclass(frozen=True)
class ScenarioDoc:
    entities: tuple[Entity, ...]
    init: tuple[InitState, ...]
    maneuvers: tuple[Maneuver, ...] = ()
    road_file: str | None = None
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "init", tuple(self.init))
        object.__setattr__(self, "maneuvers", tuple(self.maneuvers))
        names = [e.name for e in self.entities]
        if len(set(names)) != len(names):
            raise ScenarioError("schema", "duplicate entity names")
        declared = set(names)
        for ref in [i.entity for i in self.init] + [m.entity for m in self.maneuvers]:
            if ref not in declared:
                raise ScenarioError("dangling-entity-ref", f"reference to undeclared entity {ref!r}")
        for m in self.maneuvers:
            if m.kind not in MANEUVER_KINDS:
                raise ScenarioError("schema", f"unknown maneuver kind {m.kind!r}")
            if m.duration < 0 or m.start < 0:
                raise ScenarioError("schema", f"maneuver {m.name!r} has negative timing")
            times = [v.time for v in m.vertices]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ScenarioError("non-monotone-trajectory", f"maneuver {m.name!r} has non-increasing vertex times")
            if m.kind == TRAJECTORY_FOLLOW and not m.vertices:
                raise ScenarioError("schema", f"maneuver {m.name!r} has no trajectory vertices")

    def entity(self, name: str) -> Entity:
        return next(e for e in self.entities if e.name == name)

    @property
    def ego_name(self) -> str:
        for e in self.entities:
            if e.name.lower() == "ego":
                return e.name
        return self.entities[0].name


# -- parsing -------------------------------------------------------------------


def _num(el: ET.Element, name: str, default: float | None = None) -> float:
    raw = el.get(name)
    if raw is None:
        if default is not None:
            return default
        raise ScenarioError("schema", f"<{el.tag}> lacks attribute {name!r}")
    try:
        return float(raw)
    except ValueError:
        raise ScenarioError("schema", f"<{el.tag}> attribute {name}={raw!r} is not a number") from None


def _req(el: ET.Element | None, path: str, what: str) -> ET.Element:
    found = el.find(path) if el is not None else None
    if found is None:
        raise ScenarioError("schema", f"{what}: missing <{path}>")
    return found


def _parse_position(el: ET.Element, what: str) -> RoadPosition | WorldPosition:
    lane = el.find("LanePosition")
    if lane is not None:
        road = lane.get("roadId")
        if road is None:
            raise ScenarioError("schema", f"{what}: LanePosition lacks roadId")
        return RoadPosition(road, int(_num(lane, "laneId")), _num(lane, "s"), _num(lane, "offset", 0.0))
    world = el.find("WorldPosition")
    if world is not None:
        return WorldPosition(_num(world, "x"), _num(world, "y"), _num(world, "h", 0.0))
    raise ScenarioError("schema", f"{what}: unsupported position type")


def _parse_private_action(pa: ET.Element, what: str, warnings: list[str]) -> dict | None:
    speed = pa.find("LongitudinalAction/SpeedAction")
    if speed is not None:
        dyn = _req(speed, "SpeedActionDynamics", what)
        target = _req(speed, "SpeedActionTarget/AbsoluteTargetSpeed", what)
        return {"kind": SPEED_CHANGE, "duration": _num(dyn, "value", 0.0), "target_speed": _num(target, "value")}
    lc = pa.find("LateralAction/LaneChangeAction")
    if lc is not None:
        dyn = _req(lc, "LaneChangeActionDynamics", what)
        target = _req(lc, "LaneChangeTarget/AbsoluteTargetLane", what)
        return {"kind": LANE_CHANGE, "duration": _num(dyn, "value", 0.0), "target_lane": int(_num(target, "value"))}
    ft = pa.find("RoutingAction/FollowTrajectoryAction")
    if ft is not None:
        verts = []
        for v in ft.iter("Vertex"):
            pos = _req(v, "Position", what)
            wp = _parse_position(pos, what)
            if not isinstance(wp, WorldPosition):
                raise ScenarioError("schema", f"{what}: trajectory vertices must use WorldPosition")
            verts.append(Vertex(_num(v, "time"), wp.x, wp.y, wp.h))
        return {"kind": TRAJECTORY_FOLLOW, "vertices": tuple(verts)}
    inner = [c.tag for c in pa]
    warnings.append(f"{what}: unsupported private action {inner}")
    return None


def _start_time(event: ET.Element) -> float:
    cond = event.find("StartTrigger/ConditionGroup/Condition/ByValueCondition/SimulationTimeCondition")
    return _num(cond, "value") if cond is not None else 0.0


_KNOWN_TOP = {"FileHeader", "ParameterDeclarations", "CatalogLocations", "RoadNetwork", "Entities", "Storyboard"}


def parse_xosc(data: bytes | str) -> ScenarioDoc:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise ScenarioError("xml-parse", str(exc)) from exc
    if root.tag != "OpenSCENARIO":
        raise ScenarioError("schema", f"root element is <{root.tag}>, expected <OpenSCENARIO>")
    warnings = [f"unknown element <{c.tag}>" for c in root if c.tag not in _KNOWN_TOP]

    logic = root.find("RoadNetwork/LogicFile")
    road_file = logic.get("filepath") if logic is not None else None

    entities = []
    for obj in _req(root, "Entities", "document").findall("ScenarioObject"):
        name = obj.get("name")
        if not name:
            raise ScenarioError("schema", "ScenarioObject without name")
        veh = obj.find("Vehicle")
        if veh is None:
            warnings.append(f"entity {name!r}: not a Vehicle, dimensions defaulted")
            entities.append(Entity(name))
            continue
        dims = _req(veh, "BoundingBox/Dimensions", f"entity {name!r}")
        entities.append(
            Entity(name, _num(dims, "length"), _num(dims, "width"), _num(dims, "height", 1.5), veh.get("vehicleCategory", "car"))
        )

    story = _req(root, "Storyboard", "document")
    init = []
    for private in story.findall("Init/Actions/Private"):
        ent = private.get("entityRef")
        if ent is None:
            raise ScenarioError("schema", "Init Private lacks entityRef")
        position = None
        speed = 0.0
        for pa in private.findall("PrivateAction"):
            tele = pa.find("TeleportAction/Position")
            sp = pa.find("LongitudinalAction/SpeedAction/SpeedActionTarget/AbsoluteTargetSpeed")
            if tele is not None:
                position = _parse_position(tele, f"init of {ent!r}")
            elif sp is not None:
                speed = _num(sp, "value")
            else:
                warnings.append(f"init of {ent!r}: unsupported action {[c.tag for c in pa]}")
        if position is None:
            raise ScenarioError("schema", f"init of {ent!r} has no TeleportAction")
        init.append(InitState(ent, position, speed))

    maneuvers = []
    for group in story.iter("ManeuverGroup"):
        refs = [r.get("entityRef") for r in group.findall("Actors/EntityRef")]
        if not refs or refs[0] is None:
            raise ScenarioError("schema", f"maneuver group {group.get('name')!r} has no actor")
        for man in group.findall("Maneuver"):
            for event in man.findall("Event"):
                start = _start_time(event)
                for action in event.findall("Action"):
                    what = f"maneuver {man.get('name')!r}"
                    pa = action.find("PrivateAction")
                    if pa is None:
                        warnings.append(f"{what}: non-private action skipped")
                        continue
                    parsed = _parse_private_action(pa, what, warnings)
                    if parsed is not None:
                        maneuvers.append(Maneuver(man.get("name") or f"m{len(maneuvers)}", refs[0], start=start, **parsed))
    doc = ScenarioDoc(tuple(entities), tuple(init), tuple(maneuvers), road_file, tuple(warnings))
    for w in warnings:
        log.warning("xosc: %s", w)
    return doc


# -- writing -------------------------------------------------------------------


def _f(v: float) -> str:
    return repr(float(v))


def _position_el(parent: ET.Element, pos: RoadPosition | WorldPosition) -> None:
    p = ET.SubElement(parent, "Position")
    if isinstance(pos, RoadPosition):
        ET.SubElement(p, "LanePosition", roadId=pos.road_id, laneId=str(pos.lane_id), s=_f(pos.s), offset=_f(pos.offset))
    else:
        ET.SubElement(p, "WorldPosition", x=_f(pos.x), y=_f(pos.y), h=_f(pos.h))


def _speed_action(parent: ET.Element, target: float, duration: float) -> None:
    sa = ET.SubElement(ET.SubElement(ET.SubElement(parent, "PrivateAction"), "LongitudinalAction"), "SpeedAction")
    ET.SubElement(
        sa,
        "SpeedActionDynamics",
        dynamicsShape="linear" if duration > 0 else "step",
        value=_f(duration),
        dynamicsDimension="time",
    )
    ET.SubElement(ET.SubElement(sa, "SpeedActionTarget"), "AbsoluteTargetSpeed", value=_f(target))


def _time_trigger(parent: ET.Element, time: float) -> None:
    cond = ET.SubElement(
        ET.SubElement(ET.SubElement(parent, "StartTrigger"), "ConditionGroup"),
        "Condition",
        name="start",
        delay="0",
        conditionEdge="rising",
    )
    ET.SubElement(ET.SubElement(cond, "ByValueCondition"), "SimulationTimeCondition", value=_f(time), rule="greaterThan")


def write_xosc(doc: ScenarioDoc, description: str = "generated scenario") -> bytes:
    root = ET.Element("OpenSCENARIO")
    ET.SubElement(root, "FileHeader", revMajor="1", revMinor="1", date="2000-01-01T00:00:00", description=description, author="crashscen")
    rn = ET.SubElement(root, "RoadNetwork")
    if doc.road_file:
        ET.SubElement(rn, "LogicFile", filepath=doc.road_file)
    ents = ET.SubElement(root, "Entities")
    for e in doc.entities:
        veh = ET.SubElement(ET.SubElement(ents, "ScenarioObject", name=e.name), "Vehicle", name=e.name, vehicleCategory=e.category)
        bb = ET.SubElement(veh, "BoundingBox")
        ET.SubElement(bb, "Center", x="0.0", y="0.0", z=_f(e.height / 2))
        ET.SubElement(bb, "Dimensions", width=_f(e.width), length=_f(e.length), height=_f(e.height))
    sb = ET.SubElement(root, "Storyboard")
    actions = ET.SubElement(ET.SubElement(sb, "Init"), "Actions")
    for st in doc.init:
        priv = ET.SubElement(actions, "Private", entityRef=st.entity)
        _position_el(ET.SubElement(ET.SubElement(priv, "PrivateAction"), "TeleportAction"), st.position)
        _speed_action(priv, st.speed, 0.0)
    story = ET.SubElement(sb, "Story", name="crash")
    act = ET.SubElement(story, "Act", name="main")
    for m in doc.maneuvers:
        group = ET.SubElement(act, "ManeuverGroup", name=f"{m.name}_group", maximumExecutionCount="1")
        ET.SubElement(ET.SubElement(group, "Actors", selectTriggeringEntities="false"), "EntityRef", entityRef=m.entity)
        event = ET.SubElement(ET.SubElement(group, "Maneuver", name=m.name), "Event", name=f"{m.name}_event", priority="overwrite")
        action = ET.SubElement(event, "Action", name=f"{m.name}_action")
        if m.kind == SPEED_CHANGE:
            _speed_action(action, m.target_speed, m.duration)
        elif m.kind == LANE_CHANGE:
            lca = ET.SubElement(ET.SubElement(ET.SubElement(action, "PrivateAction"), "LateralAction"), "LaneChangeAction")
            ET.SubElement(lca, "LaneChangeActionDynamics", dynamicsShape="linear", value=_f(m.duration), dynamicsDimension="time")
            ET.SubElement(ET.SubElement(lca, "LaneChangeTarget"), "AbsoluteTargetLane", value=str(m.target_lane))
        else:
            fta = ET.SubElement(ET.SubElement(ET.SubElement(action, "PrivateAction"), "RoutingAction"), "FollowTrajectoryAction")
            traj = ET.SubElement(ET.SubElement(fta, "TrajectoryRef"), "Trajectory", name=f"{m.name}_path", closed="false")
            poly = ET.SubElement(ET.SubElement(traj, "Shape"), "Polyline")
            for v in m.vertices:
                _position_el(ET.SubElement(poly, "Vertex", time=_f(v.time)), WorldPosition(v.x, v.y, v.h))
            ET.SubElement(fta, "TimeReference").append(ET.Element("Timing", domainAbsoluteRelative="relative", scale="1.0", offset="0.0"))
            ET.SubElement(fta, "TrajectoryFollowingMode", followingMode="position")
        _time_trigger(event, m.start)
    act_trigger = ET.SubElement(act, "StartTrigger")
    cond = ET.SubElement(ET.SubElement(act_trigger, "ConditionGroup"), "Condition", name="act_start", delay="0", conditionEdge="rising")
    ET.SubElement(ET.SubElement(cond, "ByValueCondition"), "SimulationTimeCondition", value="0.0", rule="greaterThan")
    ET.SubElement(sb, "StopTrigger")
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="utf-8", xml_declaration=True) + b"\n"


# -- trajectory extraction -----------------------------------------------------


def _speed_profile(v0: float, changes: Sequence[Maneuver]) -> list[tuple[float, float, float, float]]:
    """Piecewise constant-acceleration segments ``(t_start, s_start, v_start, accel)``."""
    segs = [(0.0, 0.0, v0, 0.0)]

    def state_at(t: float) -> tuple[float, float]:
        t0, s0, v, a = segs[-1]  # callers keep segs[-1] as the segment covering t
        dt = t - t0
        return s0 + v * dt + 0.5 * a * dt * dt, v + a * dt

    for m in sorted(changes, key=lambda m: m.start):
        if m.target_speed is None or m.target_speed < 0:
            raise ScenarioError("schema", f"maneuver {m.name!r} needs a nonnegative target speed")
        # a still-running ramp is cut where the new maneuver begins
        segs = [seg for seg in segs if seg[0] <= m.start]
        s, v = state_at(m.start)
        segs = [seg for seg in segs if seg[0] < m.start]
        if m.duration > 0:
            segs.append((m.start, s, v, (m.target_speed - v) / m.duration))
            s_end, _ = state_at(m.start + m.duration)
            segs.append((m.start + m.duration, s_end, m.target_speed, 0.0))
        else:
            segs.append((m.start, s, m.target_speed, 0.0))
    segs.sort(key=lambda seg: seg[0])
    return segs


def _eval_profile(segs, t: np.ndarray) -> np.ndarray:
    starts = np.array([seg[0] for seg in segs])
    idx = np.searchsorted(starts, t, side="right") - 1
    out = np.empty_like(t)
    for k, (t0, s0, v, a) in enumerate(segs):
        mask = idx == k
        dt = t[mask] - t0
        out[mask] = s0 + v * dt + 0.5 * a * dt * dt
    return out


def _lane_center(lane_id: int, lane_count: int, what: str) -> float:
    if lane_id >= 0 or -lane_id > lane_count:
        raise ScenarioError("bad-lane-ref", f"{what}: lane {lane_id} not on a road with {lane_count} lane(s)")
    return -(abs(lane_id) - 0.5) * LANE_WIDTH


def _entity_track(
    name: str,
    role: str,
    ent: Entity,
    st: InitState,
    mans: list[Maneuver],
    net: RoadGraph | None,
    t: np.ndarray,
) -> AgentTrack:
    pos = st.position
    if isinstance(pos, RoadPosition):
        if net is None or pos.road_id not in {e.id for e in net.edges}:
            raise ScenarioError("dangling-road-ref", f"entity {name!r} references unknown road {pos.road_id!r}")
        edge = net.edge(pos.road_id)
        a, b = net.nodes[edge.from_node], net.nodes[edge.to_node]
        length = math.hypot(b.x - a.x, b.y - a.y)
        if length == 0:
            raise ScenarioError("dangling-road-ref", f"road {pos.road_id!r} has zero length")
        ux, uy = (b.x - a.x) / length, (b.y - a.y) / length
        ox, oy = a.x, a.y
        s0 = pos.s
        lateral0 = _lane_center(pos.lane_id, edge.lane_count, f"init of {name!r}") + pos.offset
        lane_count = edge.lane_count
    else:
        ux, uy = math.cos(pos.h), math.sin(pos.h)
        ox, oy = pos.x, pos.y
        s0, lateral0, lane_count = 0.0, 0.0, None

    s = s0 + _eval_profile(_speed_profile(st.speed, [m for m in mans if m.kind == SPEED_CHANGE]), t)

    lateral = np.full(t.size, lateral0)
    for m in sorted((m for m in mans if m.kind == LANE_CHANGE), key=lambda m: m.start):
        if lane_count is None:
            raise ScenarioError("schema", f"lane change {m.name!r} needs a road-relative start position")
        target = _lane_center(m.target_lane, lane_count, f"maneuver {m.name!r}")
        idx = int(np.searchsorted(t, m.start, side="left"))
        here = float(np.interp(m.start, t, lateral))
        if m.duration > 0:
            frac = np.clip((t - m.start) / m.duration, 0.0, 1.0)
        else:
            frac = (t >= m.start).astype(float)
        lateral[idx:] = here + (target - here) * frac[idx:]

    x = ox + s * ux - lateral * uy
    y = oy + s * uy + lateral * ux

    for m in sorted((m for m in mans if m.kind == TRAJECTORY_FOLLOW), key=lambda m: m.start):
        vt = np.array([m.start + v.time for v in m.vertices])
        active = t >= vt[0]
        x[active] = np.interp(t[active], vt, [v.x for v in m.vertices])
        y[active] = np.interp(t[active], vt, [v.y for v in m.vertices])

    vx, vy = finite_difference_velocity(t, x, y)
    heading = np.empty(t.size)
    last = math.atan2(uy, ux)
    for i in range(t.size):
        if math.hypot(vx[i], vy[i]) > 1e-6:
            last = math.atan2(vy[i], vx[i])
        heading[i] = last
    return AgentTrack(name, role, t, x, y, vx, vy, heading, np.full(t.size, ent.length), np.full(t.size, ent.width))


def extract_trajectories(doc: ScenarioDoc, net: RoadGraph | None, dt: float = 0.1, horizon: float = 10.0) -> TrajectorySet:
    if dt <= 0 or horizon <= 0:
        raise ScenarioError("schema", "dt and horizon must be positive")
    if doc.maneuvers:
        first = min(m.start for m in doc.maneuvers)
        if horizon < first:
            raise ScenarioError("horizon", f"horizon {horizon} s ends before the first maneuver at {first} s")
    inits = {st.entity: st for st in doc.init}
    n = int(round(horizon / dt)) + 1
    t = np.arange(n) * dt
    ego = doc.ego_name
    tracks = []
    for ent in doc.entities:
        if ent.name not in inits:
            raise ScenarioError("schema", f"entity {ent.name!r} has no initial position")
        mans = [m for m in doc.maneuvers if m.entity == ent.name]
        role = "ego" if ent.name == ego else "other"
        tracks.append(_entity_track(ent.name, role, ent, inits[ent.name], mans, net, t))
    return TrajectorySet.from_tracks(tracks)


def default_horizon(doc: ScenarioDoc) -> float:
    return max([MIN_VALIDATION_HORIZON] + [m.end for m in doc.maneuvers])


# -- bundles -------------------------------------------------------------------

NET_FILE = "scenario.net.xml"
XODR_FILE = "scenario.xodr"
XOSC_FILE = "scenario.xosc"
FILE_KINDS = ("net", "xodr", "xosc")


@dataclass(frozen=True)
class Reason:
    code: str
    file: str | None = None
    detail: str = ""

    def __str__(self) -> str:
        where = f"[{self.file}] " if self.file else ""
        return f"{self.code}: {where}{self.detail}".rstrip(": ")


@dataclass(frozen=True)
class ValidationStatus:
    valid: bool
    reasons: tuple[Reason, ...] = ()

    @property
    def codes(self) -> list[str]:
        return [r.code for r in self.reasons]

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "reasons": [{"code": r.code, "file": r.file, "detail": r.detail} for r in self.reasons],
        }


VALID = ValidationStatus(True)


def invalid(*reasons: Reason) -> ValidationStatus:
    return ValidationStatus(False, tuple(reasons))


@dataclass(frozen=True)
class ScenarioBundle:
    """The net/xodr/xosc triple as raw bytes; any of them may be absent."""

    net: bytes | None = None
    xodr: bytes | None = None
    xosc: bytes | None = None
    name: str = "scenario"

    def files(self) -> dict[str, bytes | None]:
        return {"net": self.net, "xodr": self.xodr, "xosc": self.xosc}

    def graph(self) -> RoadGraph:
        return parse_sumo_net(self.net)

    def scenario(self) -> ScenarioDoc:
        return parse_xosc(self.xosc)


def syntax_errors(bundle: ScenarioBundle) -> dict[str, bool]:
    """For each present file, whether it fails to parse in its own format."""
    parsers = {"net": parse_sumo_net, "xodr": read_opendrive, "xosc": parse_xosc}
    out = {}
    for kind, data in bundle.files().items():
        if data is None:
            continue
        try:
            parsers[kind](data)
        except (NetFormatError, ScenarioError):
            out[kind] = True
        else:
            out[kind] = False
    return out


def validate_bundle(bundle: ScenarioBundle) -> ValidationStatus:
    """Valid iff all three files parse, cross-references resolve and extraction runs."""
    reasons: list[Reason] = []
    for kind, data in bundle.files().items():
        if data is None:
            reasons.append(Reason("missing-file", kind, "file not generated"))
    graph = xodr_graph = doc = None
    if bundle.net is not None:
        try:
            graph = parse_sumo_net(bundle.net)
        except NetFormatError as exc:
            reasons.append(Reason(exc.code, "net", str(exc)))
    if bundle.xodr is not None:
        try:
            xodr_graph = read_opendrive(bundle.xodr)
        except NetFormatError as exc:
            reasons.append(Reason(exc.code, "xodr", str(exc)))
    if bundle.xosc is not None:
        try:
            doc = parse_xosc(bundle.xosc)
        except ScenarioError as exc:
            reasons.append(Reason(exc.code, "xosc", str(exc)))
    if graph is not None and xodr_graph is not None:
        net_lanes = {e.id: e.lane_count for e in graph.edges}
        xodr_lanes = {e.id: e.lane_count for e in xodr_graph.edges}
        if net_lanes != xodr_lanes:
            reasons.append(Reason("net-xodr-mismatch", "xodr", "roads or lane counts differ from the net file"))
    if doc is not None and graph is not None:
        edges = {e.id: e for e in graph.edges}
        ref_ok = True
        for st in doc.init:
            if isinstance(st.position, RoadPosition):
                edge = edges.get(st.position.road_id)
                if edge is None:
                    ref_ok = False
                    reasons.append(Reason("dangling-road-ref", "xosc", f"{st.entity} starts on unknown road {st.position.road_id!r}"))
                elif not (st.position.lane_id < 0 and -st.position.lane_id <= edge.lane_count):
                    ref_ok = False
                    reasons.append(Reason("bad-lane-ref", "xosc", f"{st.entity} starts on lane {st.position.lane_id} of {edge.id!r}"))
        if ref_ok:
            try:
                extract_trajectories(doc, graph, VALIDATION_DT, default_horizon(doc))
            except (ScenarioError, ValueError) as exc:
                code = getattr(exc, "code", "extraction-failed")
                reasons.append(Reason(code if code in ("bad-lane-ref", "dangling-road-ref") else "extraction-failed", "xosc", str(exc)))
    return invalid(*reasons) if reasons else VALID


def load_bundle(directory: str | Path) -> ScenarioBundle:
    d = Path(directory)

    def pick(pattern: str) -> bytes | None:
        matches = sorted(d.glob(pattern))
        return matches[0].read_bytes() if matches else None

    return ScenarioBundle(pick("*.net.xml"), pick("*.xodr"), pick("*.xosc"), d.name)


def save_bundle(bundle: ScenarioBundle, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for fname, data in ((NET_FILE, bundle.net), (XODR_FILE, bundle.xodr), (XOSC_FILE, bundle.xosc)):
        if data is not None:
            (d / fname).write_bytes(data)


@dataclass(frozen=True)
class CorpusStats:
    gsr: float
    aer: float
    total: int
    valid: int
    files: int
    syntax_error_files: int

    def to_dict(self) -> dict:
        return {
            "gsr": self.gsr,
            "aer": self.aer,
            "total": self.total,
            "valid": self.valid,
            "files": self.files,
            "syntax_error_files": self.syntax_error_files,
        }


def corpus_stats(bundles: Iterable[ScenarioBundle]) -> CorpusStats:
    bundles = list(bundles)
    if not bundles:
        raise ValueError("corpus is empty")
    n_valid = sum(validate_bundle(b).valid for b in bundles)
    n_files = n_errors = 0
    for b in bundles:
        errs = syntax_errors(b)
        n_files += len(errs)
        n_errors += sum(errs.values())
    return CorpusStats(
        gsr=100 * n_valid / len(bundles),
        aer=100 * n_errors / n_files if n_files else 0.0,
        total=len(bundles),
        valid=n_valid,
        files=n_files,
        syntax_error_files=n_errors,
    )


def load_corpus(root: str | Path) -> list[ScenarioBundle]:
    return [load_bundle(d) for d in sorted(Path(root).iterdir()) if d.is_dir()]
