import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from crashscen.roadnet import Edge, Node, RoadGraph, parse_sumo_net, write_opendrive, write_sumo_net
from crashscen.scenario_io import (
    LANE_CHANGE,
    SPEED_CHANGE,
    TRAJECTORY_FOLLOW,
    Entity,
    InitState,
    Maneuver,
    RoadPosition,
    ScenarioBundle,
    ScenarioDoc,
    ScenarioError,
    Vertex,
    WorldPosition,
    corpus_stats,
    default_horizon,
    extract_trajectories,
    load_bundle,
    load_corpus,
    parse_xosc,
    save_bundle,
    syntax_errors,
    validate_bundle,
    write_xosc,
)
from crashscen.trajectory import CriticalityConfig, TrajectorySet, pet_events

import generators

STRAIGHT = RoadGraph.build([Node("a", 0, 0), Node("b", 100, 0)], [Edge("r", "a", "b", 2, 100.0)])


@pytest.fixture
def golden(fixtures):
    return load_bundle(fixtures / "golden")


def test_two_vehicle_lane_change():
    doc = ScenarioDoc(
        (Entity("Ego"), Entity("Car")),
        (InitState("Ego", RoadPosition("r", -1, 10), 10), InitState("Car", RoadPosition("r", -2, 30), 8)),
        (Maneuver("lc", "Car", LANE_CHANGE, 1.0, 2.0, target_lane=-1),),
    )
    back = parse_xosc(write_xosc(doc))
    assert len(back.entities) == 2 and len(back.maneuvers) == 1
    assert back == doc


def test_undeclared_entity_rejected():
    with pytest.raises(ScenarioError) as info:
        ScenarioDoc((Entity("Ego"),), (InitState("Ghost", WorldPosition(0, 0)),))
    assert info.value.code == "dangling-entity-ref"
    xml = write_xosc(ScenarioDoc((Entity("Ego"),), (InitState("Ego", WorldPosition(0, 0)),))).replace(b'entityRef="Ego"', b'entityRef="Ghost"')
    with pytest.raises(ScenarioError) as info:
        parse_xosc(xml)
    assert info.value.code == "dangling-entity-ref"


def test_non_monotone_vertices_rejected():
    with pytest.raises(ScenarioError) as info:
        ScenarioDoc(
            (Entity("Ego"),),
            (InitState("Ego", WorldPosition(0, 0)),),
            (Maneuver("t", "Ego", TRAJECTORY_FOLLOW, 0, vertices=(Vertex(1, 0, 0), Vertex(1, 5, 0))),),
        )
    assert info.value.code == "non-monotone-trajectory"


def test_malformed_xml():
    with pytest.raises(ScenarioError) as info:
        parse_xosc(b"<OpenSCENARIO><Entities>")
    assert info.value.code == "xml-parse"


def test_unknown_elements_become_warnings():
    xml = write_xosc(ScenarioDoc((Entity("Ego"),), (InitState("Ego", WorldPosition(0, 0)),)))
    xml = xml.replace(b"<Entities>", b"<Weather cloudState='free'/><Entities>")
    doc = parse_xosc(xml)
    assert any("Weather" in w for w in doc.warnings)


@given(st.integers(0, 2**32 - 1))
def test_xosc_round_trip(seed):
    doc = generators.random_xosc_doc(np.random.default_rng(seed))
    assert parse_xosc(write_xosc(doc)) == doc


# -- extraction ------------------------------------------------------------------------


def test_constant_speed_on_straight_road():
    doc = ScenarioDoc((Entity("Ego"),), (InitState("Ego", RoadPosition("r", -1, 0.0), 10.0),))
    ts = extract_trajectories(doc, STRAIGHT, 0.1, 5.0)
    assert ts.steps == 51
    assert ts.ego.x[-1] == pytest.approx(50.0)
    # right-hand lane -1 sits half a lane width to the right of the reference line
    assert np.allclose(ts.ego.y, -1.75)


def test_zero_speed_stays_put():
    doc = ScenarioDoc((Entity("Ego"),), (InitState("Ego", RoadPosition("r", -2, 42.0), 0.0),))
    ts = extract_trajectories(doc, STRAIGHT, 0.1, 3.0)
    assert np.all(ts.ego.x == 42.0) and np.allclose(ts.ego.y, -5.25)


def test_speed_change_integrates_constant_acceleration():
    doc = ScenarioDoc(
        (Entity("Ego"),),
        (InitState("Ego", RoadPosition("r", -1, 0.0), 10.0),),
        (Maneuver("brake", "Ego", SPEED_CHANGE, 1.0, 2.0, target_speed=0.0),),
    )
    ts = extract_trajectories(doc, STRAIGHT, 0.1, 5.0)
    # 10 m at full speed, then 10 m while decelerating at 5 m/s^2, then stopped
    assert ts.ego.x[-1] == pytest.approx(20.0)
    assert ts.ego.x[20] == pytest.approx(10 + 10 * 1 - 2.5)


def test_lane_change_is_linear():
    doc = ScenarioDoc(
        (Entity("Ego"),),
        (InitState("Ego", RoadPosition("r", -1, 0.0), 0.0),),
        (Maneuver("lc", "Ego", LANE_CHANGE, 1.0, 2.0, target_lane=-2),),
    )
    ts = extract_trajectories(doc, STRAIGHT, 0.1, 4.0)
    assert ts.ego.y[10] == pytest.approx(-1.75)
    assert ts.ego.y[20] == pytest.approx(-3.5)
    assert ts.ego.y[30] == pytest.approx(-5.25)


def test_trajectory_follow_interpolates_and_holds():
    doc = ScenarioDoc(
        (Entity("Ego"),),
        (InitState("Ego", WorldPosition(0, 0), 0.0),),
        (Maneuver("tf", "Ego", TRAJECTORY_FOLLOW, 1.0, vertices=(Vertex(0, 0, 0), Vertex(2, 10, 0))),),
    )
    ts = extract_trajectories(doc, None, 0.1, 5.0)
    assert ts.ego.x[20] == pytest.approx(5.0)
    assert ts.ego.x[40] == pytest.approx(10.0) and ts.ego.x[-1] == pytest.approx(10.0)


def test_extraction_errors():
    doc = ScenarioDoc((Entity("Ego"),), (InitState("Ego", RoadPosition("nowhere", -1, 0.0), 1.0),))
    with pytest.raises(ScenarioError) as info:
        extract_trajectories(doc, STRAIGHT)
    assert info.value.code == "dangling-road-ref"
    bad_lane = ScenarioDoc((Entity("Ego"),), (InitState("Ego", RoadPosition("r", -3, 0.0), 1.0),))
    with pytest.raises(ScenarioError) as info:
        extract_trajectories(bad_lane, STRAIGHT)
    assert info.value.code == "bad-lane-ref"
    late = ScenarioDoc(
        (Entity("Ego"),),
        (InitState("Ego", WorldPosition(0, 0)),),
        (Maneuver("s", "Ego", SPEED_CHANGE, 8.0, 1.0, target_speed=3.0),),
    )
    with pytest.raises(ScenarioError) as info:
        extract_trajectories(late, None, 0.1, 5.0)
    assert info.value.code == "horizon"


@given(st.integers(0, 2**32 - 1))
def test_extraction_output_is_well_formed(seed):
    rng = np.random.default_rng(seed)
    doc = generators.random_xosc_doc(rng)
    world = {i.entity for i in doc.init if isinstance(i.position, WorldPosition)}
    # lane changes need a road-relative start; extraction rejects them otherwise
    assume(not any(m.kind == LANE_CHANGE and m.entity in world for m in doc.maneuvers))
    net = RoadGraph.build(
        [Node("a", 0, 0), Node("b", 100, 0), Node("c", 100, 100)],
        [Edge("r0", "a", "b", 2), Edge("r1", "b", "c", 2), Edge("r2", "c", "a", 3)],
    )
    ts = extract_trajectories(doc, net, 0.1, default_horizon(doc))
    assert isinstance(ts, TrajectorySet)
    assert np.all(np.diff(ts.t) > 0)
    assert ts.ego.agent_id == "Ego"


def test_crossing_entities_produce_pet(golden):
    doc = golden.scenario()
    ts = extract_trajectories(doc, golden.graph(), 0.1, default_horizon(doc))
    events = pet_events(ts, CriticalityConfig())
    assert events and min(e.pet for e in events) == pytest.approx(0.3)


# -- validation ------------------------------------------------------------------------


def test_golden_bundle_valid(golden):
    status = validate_bundle(golden)
    assert status.valid and status.reasons == ()
    assert validate_bundle(golden) == status


def test_dangling_road_ref(golden):
    xosc = golden.xosc.replace(b'roadId="west_in"', b'roadId="west_gone"')
    status = validate_bundle(ScenarioBundle(golden.net, golden.xodr, xosc))
    assert not status.valid and "dangling-road-ref" in status.codes


def test_truncated_xodr(golden):
    status = validate_bundle(ScenarioBundle(golden.net, golden.xodr[: len(golden.xodr) // 2], golden.xosc))
    assert status.codes == ["xml-parse"]
    assert status.reasons[0].file == "xodr"


def test_missing_file_and_mismatch(golden):
    assert validate_bundle(ScenarioBundle(golden.net, None, golden.xosc)).codes == ["missing-file"]
    other = write_opendrive(parse_sumo_net(write_sumo_net(STRAIGHT)))
    assert "net-xodr-mismatch" in validate_bundle(ScenarioBundle(golden.net, other, golden.xosc)).codes


def test_bundle_save_load(tmp_path, golden):
    save_bundle(golden, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    assert (back.net, back.xodr, back.xosc) == (golden.net, golden.xodr, golden.xosc)


# -- corpus ------------------------------------------------------------------------------


def test_corpus_all_valid(golden):
    stats = corpus_stats([golden] * 4)
    assert (stats.gsr, stats.aer, stats.total) == (100.0, 0.0, 4)


def test_corpus_empty_rejected():
    with pytest.raises(ValueError):
        corpus_stats([])


def test_syntax_errors_per_file(golden):
    b = ScenarioBundle(b"<net", golden.xodr, None)
    assert syntax_errors(b) == {"net": True, "xodr": False}


def test_gsr_complements_invalid_fraction(tmp_path, golden):
    bad = ScenarioBundle(golden.net, golden.xodr, b"<x")
    bundles = [golden, golden, bad]
    for i, b in enumerate(bundles):
        save_bundle(b, tmp_path / f"b{i}")
    stats = corpus_stats(load_corpus(tmp_path))
    invalid = sum(not validate_bundle(b).valid for b in bundles)
    assert stats.gsr + 100 * invalid / len(bundles) == pytest.approx(100.0)
