import math

import pytest

from relpairs import geo, synth
from relpairs.geo import GeoPoint
from relpairs.traffic import AircraftState, Clearance, FlightBundle, FlightPlan, Sector, Waypoint, FOLLOW_ROUTE

ORIGIN = GeoPoint(51.6, -0.9)
T0 = 1_747_200_000.0  # 2025-05-14T05:20:00Z


def local(x, y, origin=ORIGIN):
    """GeoPoint at planar offset (x east, y north) in NM."""
    return geo.LocalFrame(origin).unproject_point(x, y)


def state(cs, x, y, track, gs=450.0, fl=300.0, cfl=None, rocd=0.0, t=T0):
    return AircraftState(cs, t, local(x, y), fl, fl if cfl is None else cfl, gs, track, rocd)


def straight_plan(cs, x0, y0, x1, y1, n=4):
    wps = tuple(
        Waypoint(f"{cs[:3]}{i}", local(x0 + (x1 - x0) * i / (n - 1), y0 + (y1 - y0) * i / (n - 1)))
        for i in range(n)
    )
    return FlightPlan(cs, "EGLL", "EDDF", wps)


def bundle(st, plan=None, kind=FOLLOW_ROUTE, value=None):
    clr = Clearance(st.callsign, st.time, kind, value) if plan is not None else None
    return FlightBundle(st, plan, clr)


@pytest.fixture(scope="session")
def sector():
    return synth.preset_sector()


@pytest.fixture(scope="session")
def big_sector():
    return Sector("BIG", tuple(geo.destination(ORIGIN, b, 150.0) for b in range(0, 360, 45)), 0.0, 600.0)


# constructed filter scenarios, each returning (subject, other, expected_relevant)

def head_on_pair():
    a = bundle(state("HEAD1", -20, 0, 90, gs=480, fl=280), straight_plan("HEAD1", -20, 0, 100, 0))
    b = bundle(state("HEAD2", 20, 0, 270, gs=480, fl=280), straight_plan("HEAD2", 20, 0, -100, 0))
    return a, b, True


def far_pair():
    a = bundle(state("FAR1", -50, 0, 0, fl=280), straight_plan("FAR1", -50, 0, -50, 100))
    b = bundle(state("FAR2", 50, 10, 180, fl=280), straight_plan("FAR2", 50, 10, 50, -90))
    return a, b, False


def in_trail_pair():
    a = bundle(state("LEAD1", 0, 0, 0, gs=420, fl=280), straight_plan("LEAD1", 0, 0, 0, 100))
    b = bundle(state("TRAIL1", 0, -10, 0, gs=420, fl=280), straight_plan("TRAIL1", 0, -10, 0, 100))
    return a, b, False


def parallel_4nm_pair():
    # same direction, same speed, abeam 4 NM apart
    a = bundle(state("PARA1", -30, 0, 90, gs=450, fl=280), straight_plan("PARA1", -30, 0, 90, 0))
    b = bundle(state("PARA2", -30, 4, 90, gs=450, fl=280), straight_plan("PARA2", -30, 4, 90, 4))
    return a, b, True


def crossing_separated_pair():
    # laterally crossing at t = 2 min; the descender stays above the climber until the crossing
    a = bundle(AircraftState("DESC1", T0, local(-15, 0), 300.0, 253.0, 450.0, 90.0, -1000.0, 240.0),
               straight_plan("DESC1", -15, 0, 100, 0))
    b = bundle(AircraftState("CLMB1", T0, local(0, -15), 220.0, 251.0, 450.0, 0.0, 1000.0, 260.0),
               straight_plan("CLMB1", 0, -15, 0, 100))
    return a, b, False


BEHAVIOURAL_SCENARIOS = {
    "head-on relevant": head_on_pair,
    "beyond 80 NM excluded": far_pair,
    "in-trail excluded": in_trail_pair,
    "4 NM parallel not divergence-excluded": parallel_4nm_pair,
    "vertically separated crossing not relevant": crossing_separated_pair,
}


def random_path(ctx, rng, lo=3, hi=15):
    """Self-avoiding random walk over the resampled network."""
    nodes = sorted(ctx.network.nodes)
    want = int(rng.integers(lo, hi + 1))
    for _ in range(100):
        path = [nodes[int(rng.integers(len(nodes)))]]
        while len(path) < want:
            nxt = sorted(set(ctx.graph.neighbors(path[-1])) - set(path))
            if not nxt:
                break
            path.append(nxt[int(rng.integers(len(nxt)))])
        if len(path) >= lo:
            return path
    raise RuntimeError("graph too sparse for a random walk")


def random_timeline(ctx, rng, t_query, callsign="RND1", sigma_min=5.0):
    from relpairs.occupancy import ArrivalTimeline, path_distances

    path = random_path(ctx, rng)
    s = path_distances(ctx.network, path)
    speed = rng.uniform(300, 500) / 3600.0  # NM per second
    mu = s / speed
    # query anywhere from well before entry to well after exit
    mu = mu + t_query - rng.uniform(-1800, mu[-1] + 1800)
    legs = [ctx.network.leg_id(a, b) for a, b in zip(path, path[1:])]
    return ArrivalTimeline(callsign, path, mu, legs, sigma_min)


def random_prior(ctx, rng, month="2025-05", density=0.5):
    from relpairs.prior import PriorTable

    table = PriorTable(month)
    ids = ctx.leg_ids()
    for i, a in enumerate(ids):
        for b in ids[i:]:
            if rng.random() < density:
                n_co = int(rng.integers(1, 50))
                table.counts[(a, b)] = [n_co, int(rng.integers(0, n_co + 1))]
    return table


# acceptance verdicts, filled by test_acceptance and echoed at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
