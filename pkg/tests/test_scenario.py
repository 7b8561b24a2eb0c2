import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clforecast.scenario import (
    AgentTrack,
    ScenarioParseError,
    ScenarioValidationError,
    canonicalize,
    dumps_scenario,
    extract_ground_truth,
    import_csv_log,
    load_scenario,
    loads_scenario,
    save_scenario,
    states_from_positions,
    wrap_angle,
)

from conftest import line_track, make_scenario


def test_minimal_file_one_track_no_map():
    s = make_scenario([line_track(0, (0, 0), (1, 0), is_ego=True)], with_map=False)
    back = loads_scenario(dumps_scenario(s))
    assert len(back.tracks) == 1 and back.map == ()


def test_two_ego_tracks_rejected():
    with pytest.raises(ScenarioValidationError, match="exactly one ego"):
        make_scenario([line_track(0, (0, 0), (1, 0), is_ego=True), line_track(1, (5, 0), (1, 0), is_ego=True)])


def test_no_ego_rejected():
    with pytest.raises(ScenarioValidationError):
        make_scenario([line_track(0, (0, 0), (1, 0))])


@pytest.mark.parametrize("dims", [(0.0, 2.0), (4.5, -1.0)])
def test_nonpositive_dims_rejected(dims):
    with pytest.raises(ScenarioValidationError, match="agent 1"):
        make_scenario([line_track(0, (0, 0), (1, 0), is_ego=True), line_track(1, (5, 0), (1, 0), dims=dims)])


def test_valid_gap_rejected():
    valid = [True] * 5 + [False] + [True] * 9
    with pytest.raises(ScenarioValidationError, match="gap"):
        make_scenario([line_track(0, (0, 0), (1, 0), is_ego=True), line_track(1, (5, 0), (1, 0), valid=valid)])


def test_ego_must_be_fully_valid():
    valid = [True] * 14 + [False]
    with pytest.raises(ScenarioValidationError, match="ego"):
        make_scenario([line_track(0, (0, 0), (1, 0), is_ego=True, valid=valid)])


def test_wrong_state_count_rejected():
    t = line_track(0, (0, 0), (1, 0), is_ego=True, n_steps=14)
    with pytest.raises(ScenarioValidationError, match="rows"):
        make_scenario([t])


def test_heading_out_of_range_rejected():
    rows = line_track(0, (0, 0), (1, 0)).states.copy()
    rows[3, 2] = 4.0
    with pytest.raises(ScenarioValidationError, match="heading"):
        make_scenario([line_track(1, (0, 5), (1, 0), is_ego=True), AgentTrack(0, False, 4.5, 2.0, rows)])


def test_unknown_field_rejected_with_path(simple_scenario):
    doc = json.loads(dumps_scenario(simple_scenario))
    doc["tracks"][1]["colour"] = "red"
    with pytest.raises(ScenarioParseError, match=r"tracks\[1\].*colour"):
        loads_scenario(json.dumps(doc))


def test_missing_field_rejected(simple_scenario):
    doc = json.loads(dumps_scenario(simple_scenario))
    del doc["dt"]
    with pytest.raises(ScenarioParseError, match="missing"):
        loads_scenario(json.dumps(doc))


def test_duplicate_key_rejected():
    with pytest.raises(ScenarioParseError, match="duplicate"):
        loads_scenario('{"dt": 0.5, "dt": 0.5}')


def test_malformed_state_row_names_record(simple_scenario):
    doc = json.loads(dumps_scenario(simple_scenario))
    doc["tracks"][2]["states"][4] = [1, 2, 3]
    with pytest.raises(ScenarioParseError, match=r"tracks\[2\]\.states\[4\]"):
        loads_scenario(json.dumps(doc))


def test_malformed_json():
    with pytest.raises(ScenarioParseError):
        loads_scenario("{not json")


def test_file_round_trip_is_byte_identical(tmp_path, simple_scenario):
    p = tmp_path / "a.json"
    save_scenario(simple_scenario, p)
    q = tmp_path / "b.json"
    save_scenario(load_scenario(p), q)
    assert p.read_bytes() == q.read_bytes()


def test_serialized_numbers_have_nine_significant_digits():
    s = make_scenario([line_track(0, (math.pi, 0), (1 / 3, 0), is_ego=True)], with_map=False)
    text = dumps_scenario(s)
    assert "3.14159265," in text
    assert "0.333333333" in text  # vx


coords = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


@given(st.lists(st.tuples(coords, coords), min_size=15, max_size=15), st.floats(0.5, 10), st.floats(0.5, 3))
def test_round_trip_canonical_scenarios_field_for_field(points, length, width):
    rows = states_from_positions(np.array(points), 0.5)
    s = canonicalize(make_scenario([AgentTrack(3, True, length, width, rows)]))
    assert loads_scenario(dumps_scenario(s)) == s


@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_wrap_angle_boundary():
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(math.pi) == math.pi


def test_ground_truth_stationary_ego_constant():
    s = make_scenario([line_track(0, (3, 4), (0, 0), is_ego=True)])
    gt = extract_ground_truth(s)
    assert gt.ego.shape == (12, 2)
    assert np.all(gt.ego == [3, 4])


def test_ground_truth_validity_after_track_ends():
    valid = [True] * 8 + [False] * 7  # valid up to absolute step 7 = future step 5
    s = make_scenario([line_track(0, (0, 0), (1, 0), is_ego=True), line_track(1, (0, 5), (1, 0), valid=valid)])
    gt = extract_ground_truth(s)
    assert gt.scene_ids == (1,)
    assert gt.scene_valid[0].tolist() == [True] * 5 + [False] * 7


def test_ground_truth_orders_ego_first():
    s = make_scenario([line_track(5, (0, 5), (1, 0)), line_track(2, (0, 0), (1, 0), is_ego=True)])
    gt = extract_ground_truth(s)
    assert gt.scene_ids == (5,)
    assert np.allclose(gt.ego[0], [1.5, 0])


def test_states_from_positions_backward_difference():
    rows = states_from_positions(np.array([[1.0, 0.0], [1.0, 1.0]]), 0.5, prev=[0.0, 0.0])
    assert np.allclose(rows[0], [1, 0, 0, 2, 0, 1])
    assert np.allclose(rows[1], [1, 1, math.pi / 2, 0, 2, 1])


def _write_csv(path, rows):
    header = "scenario_id,agent_id,step,x,y,heading,vx,vy,is_ego,length,width\n"
    path.write_text(header + "\n".join(",".join(str(v) for v in r) for r in rows) + "\n")


def test_import_csv_log(tmp_path):
    rows = []
    for k in range(15):
        rows.append(["a", 1, k, k * 1.0, 0, 0, 2, 0, 1, "", ""])
    for k in range(4, 10):
        rows.append(["a", 7, k, 0, k * 1.0, 1.5707963, 0, 2, 0, 5.0, 2.2])
    rows.append(["b", 3, 0, 0, 0, 0, 0, 0, "true", 4, 2])
    p = tmp_path / "log.csv"
    _write_csv(p, rows[:-1])
    (s,) = import_csv_log(p)
    assert s.scenario_id == "a" and s.ego.agent_id == 1
    assert (s.ego.length, s.ego.width) == (4.5, 2.0)
    other = s.tracks[1]
    assert other.length == 5.0 and other.valid.tolist() == [False] * 4 + [True] * 6 + [False] * 5


def test_import_csv_bad_header(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ScenarioParseError, match="header"):
        import_csv_log(p)


def test_import_csv_bad_value_names_line(tmp_path):
    p = tmp_path / "log.csv"
    _write_csv(p, [["a", 1, 0, "x", 0, 0, 0, 0, 1, "", ""]])
    with pytest.raises(ScenarioParseError, match="line 2"):
        import_csv_log(p)


def test_tracks_are_immutable(simple_scenario):
    with pytest.raises(ValueError):
        simple_scenario.tracks[0].states[0, 0] = 1.0
