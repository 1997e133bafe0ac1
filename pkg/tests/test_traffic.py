import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from relpairs import geo, traffic
from relpairs.traffic import (
    DIRECT_TO, FOLLOW_ROUTE, HEADING, LEVEL, AircraftState, Clearance, FlightBundle, FlightPlan, Scenario, Sector,
    TrafficError, Waypoint,
)

from conftest import T0, bundle, local, state, straight_plan

H12 = 12 * 60.0


def dogleg_plan(cs="DOG1"):
    # 40 NM east, then a 90 degree turn and 40 NM north
    return FlightPlan(cs, "EGLL", "EDDF", (
        Waypoint("DA", local(-40, 0)), Waypoint("DB", local(0, 0)), Waypoint("DC", local(0, 40)),
        Waypoint("DD", local(0, 80)),
    ))


def test_callsign_rules():
    assert traffic.validate_callsign("KLM53Q") == "KLM53Q"
    for bad in ["", "klm53q", "KLM 53", None]:
        with pytest.raises(TrafficError):
            traffic.validate_callsign(bad)


def test_plan_invariants():
    w = Waypoint("AAA", local(0, 0))
    with pytest.raises(TrafficError):
        FlightPlan("X1", "A", "B", (w,))
    with pytest.raises(TrafficError):
        FlightPlan("X1", "A", "B", (w, w, Waypoint("BBB", local(5, 0))))


def test_state_bounds_and_exit_default():
    s = state("A1", 0, 0, 90)
    assert s.exit_fl == s.cleared_fl
    with pytest.raises(TrafficError):
        state("A1", 0, 0, 90, gs=800)
    with pytest.raises(TrafficError):
        state("A1", 0, 0, 90, fl=700)


def test_direct_to_must_be_on_plan():
    plan = straight_plan("A1", 0, 0, 60, 0)
    with pytest.raises(TrafficError):
        Clearance("A1", T0, DIRECT_TO, "NOPE").check_against(plan)
    Clearance("A1", T0, DIRECT_TO, plan.waypoints[-1].name).check_against(plan)


def test_sector_band_order():
    with pytest.raises(TrafficError):
        Sector("S", (local(0, 0), local(10, 0), local(0, 10)), 300, 200)


def test_json_roundtrips(sector):
    plan = dogleg_plan()
    b = FlightBundle(state("DOG1", -20, 0, 90, rocd=-1500, cfl=250), plan,
                     Clearance("DOG1", T0 - 60, DIRECT_TO, "DC"))
    sc = Scenario(T0, [b], subject="DOG1", labels={})
    again = Scenario.from_json(json.loads(json.dumps(sc.to_json())))
    assert again.to_json() == sc.to_json()
    assert Sector.from_json(sector.to_json()) == sector


def test_duplicate_callsigns_rejected():
    s = state("A1", 0, 0, 90)
    with pytest.raises(TrafficError):
        Scenario(T0, [FlightBundle(s), FlightBundle(s)])


def test_heading_rollout_96nm_east():
    s = state("H1", 0, 0, 0, gs=480)
    traj = traffic.predict_lateral(s, None, None, H12)
    assert len(traj.times) == 73
    end = geo.GeoPoint(float(traj.lat[-1]), float(traj.lon[-1]))
    # heading clearance overrides the current track
    plan = straight_plan("H1", 0, 0, 0, 60)
    traj = traffic.predict_lateral(s, plan, Clearance("H1", T0, HEADING, 90.0), H12)
    end = geo.GeoPoint(float(traj.lat[-1]), float(traj.lon[-1]))
    start = s.position
    assert geo.great_circle_nm(start, end) == pytest.approx(96.0, abs=1e-6)
    assert geo.initial_bearing_deg(start, end) == pytest.approx(90.0, abs=0.01)


def test_direct_to_last_on_straight_plan_matches_follow_route():
    plan = straight_plan("S1", -30, 0, 90, 0, n=5)
    s = state("S1", -30, 0, 90)
    a = traffic.predict_lateral(s, plan, Clearance("S1", T0, FOLLOW_ROUTE), H12)
    b = traffic.predict_lateral(s, plan, Clearance("S1", T0, DIRECT_TO, plan.waypoints[-1].name), H12)
    d = geo.np_haversine_nm(a.lat, a.lon, b.lat, b.lon)
    assert d.max() < 1e-6


def test_dogleg_arc_length_oracle():
    plan = dogleg_plan()
    s = state("DOG1", -40, 0, 90, gs=300)
    traj = traffic.predict_lateral(s, plan, Clearance("DOG1", T0, FOLLOW_ROUTE), H12)
    # oracle: along-route distance of each sample measured by projecting onto the known legs
    frame = geo.LocalFrame(geo.GeoPoint(51.6, -0.9))
    x, y = frame.project(traj.lat, traj.lon)
    along = np.where(y < 1e-3, x + 40.0, 40.0 + y)
    expected = 300 * (traj.times - T0) / 3600
    assert np.max(np.abs(along - expected)) < 0.1


def test_extrapolated_beyond_final_waypoint():
    plan = straight_plan("E1", 0, 0, 30, 0, n=3)
    s = state("E1", 40, 0, 90)
    traj = traffic.predict_lateral(s, plan, Clearance("E1", T0, FOLLOW_ROUTE), H12)
    assert traj.extrapolated
    end = geo.GeoPoint(float(traj.lat[-1]), float(traj.lon[-1]))
    assert geo.great_circle_nm(s.position, end) == pytest.approx(90.0, abs=0.01)


def test_off_route_aircraft_snaps_ahead():
    plan = straight_plan("O1", -60, 0, 60, 0, n=5)
    s = state("O1", -10, 3, 90, gs=360)
    traj = traffic.predict_lateral(s, plan, Clearance("O1", T0, FOLLOW_ROUTE), 600)
    frame = geo.LocalFrame(geo.GeoPoint(51.6, -0.9))
    x, y = frame.project(traj.lat, traj.lon)
    assert abs(y[0]) < 0.05 and x[0] == pytest.approx(-10, abs=0.05)


def test_cone_level_flight_degenerate():
    s = state("L1", 0, 0, 90, fl=280)
    _, lo, hi, nom = traffic.predict_vertical_cone(s, H12)
    assert np.all(lo == 280) and np.all(hi == 280)


def test_cone_climb_levels_off_at_three_minutes():
    s = state("C1", 0, 0, 90, fl=240, cfl=300, rocd=2000)
    t, lo, hi, nom = traffic.predict_vertical_cone(s, H12)
    mins = (t - T0) / 60
    assert nom[mins == 3][0] == pytest.approx(300)
    assert np.all(nom[mins >= 3] == 300)
    assert nom[mins == 1.5][0] == pytest.approx(270)


def test_cone_descent_at_two_minutes():
    s = state("D1", 0, 0, 90, fl=300, cfl=220, rocd=-1800)
    t, lo, hi, nom = traffic.predict_vertical_cone(s, H12, sigma_rocd_fraction=0.25)
    k = int(np.flatnonzero(np.isclose(t - T0, 120))[0])
    assert nom[k] == pytest.approx(264)
    assert lo[k] == pytest.approx(264 - 18)
    assert hi[k] == pytest.approx(264 + 18)


@given(st.floats(100, 400), st.floats(100, 400), st.floats(-4000, 4000).filter(lambda r: abs(r) > 1))
def test_cone_properties(fl, cfl, rocd):
    s = state("P1", 0, 0, 90, fl=fl, cfl=cfl, rocd=rocd)
    _, lo, hi, nom = traffic.predict_vertical_cone(s, H12)
    width = hi - lo
    assert np.all(lo <= hi)
    assert np.all(np.diff(width) >= -1e-9)
    lo_b, hi_b = min(fl, cfl), max(fl, cfl)
    assert np.all(nom >= lo_b - 1e-9) and np.all(nom <= hi_b + 1e-9)


@given(st.floats(200, 600), st.floats(0, 359))
def test_speed_consistency_on_straight_legs(gs, track):
    s = state("V1", 0, 0, track, gs=gs)
    traj = traffic.predict_lateral(s, None, None, H12)
    d = geo.np_haversine_nm(traj.lat[:-1], traj.lon[:-1], traj.lat[1:], traj.lon[1:])
    assert np.allclose(d / 10 * 3600, gs, rtol=0.01)


def test_subject_trajectories_identical_cases(sector):
    plan = straight_plan("S2", -80, 0, 80, 0, n=5)
    s = state("S2", -50, 0, 90)
    a, b = traffic.subject_trajectories(s, plan, Clearance("S2", T0, FOLLOW_ROUTE), sector, H12)
    assert np.allclose(a.lat, b.lat) and np.allclose(a.lon, b.lon)
    fix = plan.waypoints[traffic.final_fix_index(plan, sector)].name
    a, b = traffic.subject_trajectories(s, plan, Clearance("S2", T0, DIRECT_TO, fix), sector, H12)
    assert np.allclose(a.lat, b.lat) and np.allclose(a.lon, b.lon)


def test_subject_direct_path_is_shorter_on_dogleg(sector):
    plan = dogleg_plan()
    s = state("DOG1", -40, 0, 90)
    clr = Clearance("DOG1", T0, FOLLOW_ROUTE)
    fix = traffic.final_fix_index(plan, sector)
    via_route = traffic.route_length_to(s, plan, clr, fix)
    direct = traffic.route_length_to(s, plan, Clearance("DOG1", T0, DIRECT_TO, plan.waypoints[fix].name), fix)
    assert direct < via_route
    a, b = traffic.subject_trajectories(s, plan, clr, sector, H12)
    assert not np.allclose(a.lat, b.lat)


def test_load_scenarios_formats(tmp_path):
    sc = Scenario(T0, [FlightBundle(state("A1", 0, 0, 90))])
    (tmp_path / "scenario_a.json").write_text(json.dumps(sc.to_json()))
    (tmp_path / "scenarios_b.jsonl").write_text(json.dumps(sc.to_json()) + "\n" + json.dumps(sc.to_json()) + "\n")
    (tmp_path / "other.json").write_text("not json")
    assert len(traffic.load_scenarios(tmp_path)) == 3
