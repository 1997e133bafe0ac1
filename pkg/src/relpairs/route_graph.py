"""Route network built from filed plans and resampled to 5-10 NM legs.

The raw network has one node per named waypoint and one edge per pair of
consecutive waypoints on any (sector-truncated) plan. Resampling subdivides
long edges, then repeatedly merges nearby nodes with complete-linkage
agglomerative clustering until no leg is shorter than the floor.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import networkx as nx
import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist

from . import geo
from .geo import GeoPoint
from .traffic import FlightPlan, Sector, Waypoint

log = logging.getLogger(__name__)

GRAPH_FORMAT = "relpairs-graph"
GRAPH_VERSION = 1

MIN_LEG_NM = 5.0
MAX_LEG_NM = 10.0
LENGTH_EPS = 1e-6
MAP_SNAP_NM = 5.0


class GraphError(ValueError):
    pass


class ResamplingError(GraphError):
    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class UnmappableWaypoint(GraphError):
    pass


@dataclass
class Node:
    id: str
    position: GeoPoint
    name: Optional[str] = None  # original waypoint name, None when synthetic

    @property
    def synthetic(self) -> bool:
        return self.name is None


def _edge(a: str, b: str) -> tuple[str, str]:
    if a == b:
        raise GraphError(f"self-edge on {a}")
    return (a, b) if a < b else (b, a)


def leg_id(pa: GeoPoint, pb: GeoPoint) -> str:
    """Content-addressed leg identifier from the rounded endpoint coordinates."""
    ends = sorted([(round(pa.lat, 4), round(pa.lon, 4)), (round(pb.lat, 4), round(pb.lon, 4))])
    text = ";".join(f"{la:.4f},{lo:.4f}" for la, lo in ends)
    return hashlib.sha1(text.encode()).hexdigest()[:16]


class RouteNetwork:
    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.edges: set[tuple[str, str]] = set()
        self._length: dict[tuple[str, str], float] = {}

    def add_node(self, node: Node) -> None:
        existing = self.nodes.get(node.id)
        if existing is not None:
            if geo.great_circle_nm(existing.position, node.position) > 1e-6:
                raise GraphError(f"waypoint {node.id} has conflicting positions")
            return
        self.nodes[node.id] = node

    def add_edge(self, a: str, b: str) -> None:
        if a not in self.nodes or b not in self.nodes:
            raise GraphError(f"edge endpoint missing: {a}-{b}")
        e = _edge(a, b)
        if e not in self.edges:
            self.edges.add(e)
            self._length[e] = geo.great_circle_nm(self.nodes[a].position, self.nodes[b].position)

    def length(self, a: str, b: str) -> float:
        return self._length[_edge(a, b)]

    def has_edge(self, a: str, b: str) -> bool:
        return a != b and _edge(a, b) in self.edges

    def sorted_edges(self) -> list[tuple[str, str]]:
        return sorted(self.edges)

    def degrees(self) -> Counter:
        deg = Counter()
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def stub_edges(self) -> set[tuple[str, str]]:
        """Edges touching a dead-end node (route entry/exit stubs)."""
        deg = self.degrees()
        return {e for e in self.edges if deg[e[0]] == 1 or deg[e[1]] == 1}

    def leg_id(self, a: str, b: str) -> str:
        return leg_id(self.nodes[a].position, self.nodes[b].position)

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        for nid in sorted(self.nodes):
            g.add_node(nid)
        for a, b in self.sorted_edges():
            g.add_edge(a, b, length=self._length[(a, b)])
        return g

    def positions(self, ids: Iterable[str]):
        ids = list(ids)
        return (
            np.array([self.nodes[i].position.lat for i in ids]),
            np.array([self.nodes[i].position.lon for i in ids]),
        )

    def frame(self) -> geo.LocalFrame:
        lat, lon = self.positions(sorted(self.nodes))
        return geo.LocalFrame(GeoPoint(float(lat.mean()), float(lon.mean())))

    def content_hash(self) -> str:
        payload = {
            "nodes": [
                [nid, round(n.position.lat, 7), round(n.position.lon, 7), n.name]
                for nid, n in sorted(self.nodes.items())
            ],
            "edges": [list(e) for e in self.sorted_edges()],
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def truncate_plan(plan: FlightPlan, sector: Sector) -> tuple[int, int]:
    """Index range ``[lo, hi)`` of in-sector waypoints plus one on each side; ``(0, 0)`` if none."""
    lat = np.array([w.position.lat for w in plan.waypoints])
    lon = np.array([w.position.lon for w in plan.waypoints])
    inside = np.flatnonzero(sector.contains_laterally(lat, lon))
    if len(inside) == 0:
        return 0, 0
    return max(int(inside[0]) - 1, 0), min(int(inside[-1]) + 2, len(plan.waypoints))


def build_raw_network(plans: Iterable[FlightPlan], sector: Sector) -> RouteNetwork:
    net = RouteNetwork()
    for plan in plans:
        lo, hi = truncate_plan(plan, sector)
        chain = plan.waypoints[lo:hi]
        for w in chain:
            net.add_node(Node(w.name, w.position, w.name))
        for a, b in zip(chain, chain[1:]):
            net.add_edge(a.name, b.name)
    return net


def waypoint_catalog(plans: Iterable[FlightPlan]) -> dict[str, GeoPoint]:
    out: dict[str, GeoPoint] = {}
    for plan in plans:
        for w in plan.waypoints:
            out.setdefault(w.name, w.position)
    return out


def subdivide(net: RouteNetwork, max_len: float = MIN_LEG_NM) -> RouteNetwork:
    """Split every edge longer than ``max_len`` into equal great-circle pieces."""
    out = RouteNetwork()
    for n in net.nodes.values():
        out.add_node(Node(n.id, n.position, n.name))
    counter = 0
    for a, b in net.sorted_edges():
        length = net.length(a, b)
        pieces = max(1, math.ceil(length / max_len - 1e-9))
        if pieces == 1:
            out.add_edge(a, b)
            continue
        pa, pb = net.nodes[a].position, net.nodes[b].position
        fr = np.arange(1, pieces) / pieces
        lat, lon = geo.np_interpolate(pa.lat, pa.lon, pb.lat, pb.lon, fr)
        prev = a
        for la, lo in zip(lat, lon):
            while f"~{counter:06d}" in net.nodes:
                counter += 1
            nid = f"~{counter:06d}"
            counter += 1
            out.add_node(Node(nid, GeoPoint(float(la), float(lo))))
            out.add_edge(prev, nid)
            prev = nid
        out.add_edge(prev, b)
    return out


def _short_edges(net: RouteNetwork, min_len: float):
    stubs = net.stub_edges()
    return [e for e in net.sorted_edges() if e not in stubs and net.length(*e) < min_len - LENGTH_EPS]


def _merge_once(net: RouteNetwork, radius: float, frame: geo.LocalFrame):
    ids = sorted(net.nodes)
    lat, lon = net.positions(ids)
    x, y = frame.project(lat, lon)
    xy = np.column_stack([x, y])
    if len(ids) > 1:
        labels = fcluster(linkage(pdist(xy), method="complete"), t=radius, criterion="distance")
    else:
        labels = np.ones(1, dtype=int)
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    out = RouteNetwork()
    rename: dict[str, str] = {}
    for members in groups.values():
        member_ids = [ids[i] for i in members]
        named = sorted(net.nodes[m].name for m in member_ids if net.nodes[m].name is not None)
        if len(members) == 1:
            node = net.nodes[member_ids[0]]
            out.add_node(Node(node.id, node.position, node.name))
            rename[node.id] = node.id
            continue
        cx, cy = xy[members].mean(axis=0)
        pos = frame.unproject_point(float(cx), float(cy))
        if named:
            new = Node(named[0], pos, named[0])
        else:
            new = Node(min(member_ids), pos)
        out.add_node(new)
        for m in member_ids:
            rename[m] = new.id
    for a, b in net.sorted_edges():
        ra, rb = rename[a], rename[b]
        if ra != rb:
            out.add_edge(ra, rb)
    return out, rename


def _split_long(net: RouteNetwork, max_len: float) -> RouteNetwork:
    long = [e for e in net.sorted_edges() if net.length(*e) > max_len + LENGTH_EPS]
    if not long:
        return net
    out = RouteNetwork()
    for n in net.nodes.values():
        out.add_node(Node(n.id, n.position, n.name))
    counter = 0
    for a, b in net.sorted_edges():
        length = net.length(a, b)
        pieces = math.ceil(length / max_len - 1e-9) if length > max_len + LENGTH_EPS else 1
        if pieces == 1:
            out.add_edge(a, b)
            continue
        pa, pb = net.nodes[a].position, net.nodes[b].position
        prev = a
        for k in range(1, pieces):
            while f"+{counter:06d}" in net.nodes:
                counter += 1
            nid = f"+{counter:06d}"
            counter += 1
            out.add_node(Node(nid, geo.interpolate(pa, pb, k / pieces)))
            out.add_edge(prev, nid)
            prev = nid
        out.add_edge(prev, b)
    return out


def cluster_resample(
    net: RouteNetwork,
    target_range: tuple[float, float] = (MIN_LEG_NM, MAX_LEG_NM),
    merge_radius: float = 2.5,
    growth: float = 1.1,
    max_iter: int = 20,
) -> tuple[RouteNetwork, dict[str, str]]:
    """Iterative complete-linkage merging until no non-stub leg is below the floor.

    Each round clusters all node positions with distance threshold
    ``merge_radius``, collapses clusters to centroids and rewires edges; the
    radius then grows by ``growth``. Legs left above the ceiling are split
    evenly afterwards. Returns the network and a map from every input node id
    to its output node id.
    """
    min_len, max_len = target_range
    frame = net.frame() if net.nodes else None
    mapping = {nid: nid for nid in net.nodes}
    radius = merge_radius
    current = net
    for it in range(max_iter + 1):
        short = _short_edges(current, min_len)
        if not short:
            break
        if it == max_iter:
            raise ResamplingError(
                f"resampling did not converge in {max_iter} iterations ({len(short)} short legs)",
                [(a, b, current.length(a, b)) for a, b in short],
            )
        current, rename = _merge_once(current, radius, frame)
        mapping = {k: rename[v] for k, v in mapping.items()}
        log.debug("resample iteration %d radius %.3f -> %d nodes %d edges", it, radius, len(current.nodes),
                  len(current.edges))
        radius *= growth
    current = _split_long(current, max_len)
    return current, mapping


def resample(plans, sector: Sector, max_sub_len: float = MIN_LEG_NM, merge_radius: float = 2.5):
    """Raw build, subdivision and clustering in one call. Returns ``(raw, resampled, merge_map)``."""
    raw = build_raw_network(plans, sector)
    sub = subdivide(raw, max_sub_len)
    out, mapping = cluster_resample(sub, merge_radius=merge_radius)
    return raw, out, mapping


def check_leg_lengths(net: RouteNetwork, lo: float = MIN_LEG_NM, hi: float = MAX_LEG_NM):
    """Non-stub legs outside ``[lo, hi]`` plus stubs above ``hi``."""
    stubs = net.stub_edges()
    bad = []
    for e in net.sorted_edges():
        length = net.length(*e)
        if length > hi + LENGTH_EPS or (e not in stubs and length < lo - LENGTH_EPS):
            bad.append((e, length))
    return bad


# ---------------------------------------------------------------------------
# route mapping


@dataclass
class MappedRoute:
    path: list[str]
    anchors: list[tuple[int, int]]  # (plan waypoint index, path index)

    def legs(self) -> list[tuple[str, str]]:
        return list(zip(self.path, self.path[1:]))


@dataclass
class RouteGraph:
    """Resampled network plus everything needed to translate plans onto it."""

    network: RouteNetwork
    merge_map: dict[str, str]
    catalog: dict[str, GeoPoint]
    sector: Sector
    lookup: dict[tuple[str, ...], MappedRoute] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self._nx = None
        self._hash = None
        self._leg_index = None

    @property
    def graph(self) -> nx.Graph:
        if self._nx is None:
            self._nx = self.network.to_networkx()
        return self._nx

    @property
    def content_hash(self) -> str:
        if self._hash is None:
            self._hash = self.network.content_hash()
        return self._hash

    def leg_ids(self) -> list[str]:
        return sorted(self.network.leg_id(a, b) for a, b in self.network.edges)

    @property
    def leg_index(self) -> dict[str, int]:
        if self._leg_index is None:
            self._leg_index = {lid: i for i, lid in enumerate(self.leg_ids())}
        return self._leg_index

    def leg_midpoints(self) -> dict[str, GeoPoint]:
        out = {}
        for a, b in self.network.edges:
            pa, pb = self.network.nodes[a].position, self.network.nodes[b].position
            out[self.network.leg_id(a, b)] = geo.interpolate(pa, pb, 0.5)
        return out

    def in_sector_legs(self) -> set[str]:
        mids = self.leg_midpoints()
        ids = sorted(mids)
        inside = self.sector.contains_laterally([mids[i].lat for i in ids], [mids[i].lon for i in ids])
        return {i for i, ok in zip(ids, inside) if ok}

    def _nearest_node(self, p: GeoPoint) -> str:
        ids = sorted(self.network.nodes)
        lat, lon = self.network.positions(ids)
        d = geo.np_haversine_nm(p.lat, p.lon, lat, lon)
        i = int(np.argmin(d))
        if d[i] > MAP_SNAP_NM:
            raise UnmappableWaypoint(f"unmappable waypoint at {p.lat:.4f},{p.lon:.4f} ({d[i]:.1f} NM from graph)")
        return ids[i]

    def image(self, w: Waypoint) -> str:
        node = self.merge_map.get(w.name)
        if node is not None and node in self.network.nodes:
            known = self.catalog.get(w.name)
            if known is None or geo.great_circle_nm(known, w.position) < 1e-3:
                return node
        return self._nearest_node(w.position)


def map_route(ctx: RouteGraph, plan: FlightPlan) -> MappedRoute:
    """Resampled node path for a plan; cached by waypoint-name sequence."""
    key = tuple(plan.names)
    hit = ctx.lookup.get(key)
    if hit is not None:
        return hit
    lo, hi = truncate_plan(plan, ctx.sector)
    if hi - lo == 0:
        out = MappedRoute([], [])
        ctx.lookup[key] = out
        return out
    path: list[str] = []
    anchors: list[tuple[int, int]] = []
    inside = ctx.sector.contains_laterally([w.position.lat for w in plan.waypoints],
                                           [w.position.lon for w in plan.waypoints])
    for idx in range(lo, hi):
        try:
            node = ctx.image(plan.waypoints[idx])
        except UnmappableWaypoint:
            # an unknown boundary waypoint outside the sector only adds context; drop it
            if (idx == lo or idx == hi - 1) and not inside[idx]:
                continue
            raise
        if not path:
            path.append(node)
        elif node != path[-1]:
            if ctx.network.has_edge(path[-1], node):
                path.append(node)
            else:
                try:
                    fill = nx.shortest_path(ctx.graph, path[-1], node, weight="length")
                except nx.NetworkXNoPath as exc:
                    raise UnmappableWaypoint(f"no route between {path[-1]} and {node}") from exc
                path.extend(fill[1:])
        anchors.append((idx, len(path) - 1))
    path, anchors = _remove_loops(path, anchors)
    out = MappedRoute(path, anchors)
    ctx.lookup[key] = out
    return out


def _remove_loops(path, anchors):
    out: list[str] = []
    pos: dict[str, int] = {}
    remap: dict[int, int] = {}
    for i, node in enumerate(path):
        if node in pos:
            cut = pos[node]
            for dropped in out[cut + 1 :]:
                pos.pop(dropped, None)
            out = out[: cut + 1]
            for k, v in list(remap.items()):
                if v > cut:
                    del remap[k]
            remap[i] = cut
        else:
            pos[node] = len(out)
            remap[i] = len(out)
            out.append(node)
    new_anchors = []
    for wi, pi in anchors:
        if pi in remap:
            new_anchors.append((wi, remap[pi]))
    # one anchor per path index (the first waypoint reaching it), increasing
    cleaned: list[tuple[int, int]] = []
    for wi, pi in new_anchors:
        if cleaned and pi <= cleaned[-1][1]:
            continue
        cleaned.append((wi, pi))
    return out, cleaned


def build_route_graph(plans, sector: Sector, max_sub_len: float = MIN_LEG_NM, merge_radius: float = 2.5,
                      config: Optional[dict] = None) -> RouteGraph:
    plans = list(plans)
    if not any(truncate_plan(p, sector)[1] for p in plans):
        raise GraphError("no plan intersects the sector")
    _, net, mapping = resample(plans, sector, max_sub_len, merge_radius)
    ctx = RouteGraph(net, mapping, waypoint_catalog(plans), sector, config=dict(config or {}))
    for p in plans:
        try:
            map_route(ctx, p)
        except GraphError as exc:
            log.warning("corpus plan %s not mappable: %s", p.callsign, exc)
    return ctx


def graph_stats(net: RouteNetwork, bins=(0, 2.5, 5, 7.5, 10, 15, 20)) -> dict:
    lengths = np.array([net.length(*e) for e in net.sorted_edges()]) if net.edges else np.zeros(0)
    hist, edges = np.histogram(lengths, bins=list(bins) + [np.inf])
    stubs = net.stub_edges()
    return {
        "nodes": len(net.nodes),
        "edges": len(net.edges),
        "stub_edges": len(stubs),
        "synthetic_nodes": sum(n.synthetic for n in net.nodes.values()),
        "edge_length_min": float(lengths.min()) if len(lengths) else None,
        "edge_length_max": float(lengths.max()) if len(lengths) else None,
        "edge_length_histogram": [
            {"lo": float(lo), "hi": (None if math.isinf(hi) else float(hi)), "count": int(c)}
            for lo, hi, c in zip(edges[:-1], edges[1:], hist)
        ],
    }


# ---------------------------------------------------------------------------
# persistence


def save_graph(ctx: RouteGraph, path) -> str:
    net = ctx.network
    doc = {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "content_hash": ctx.content_hash,
        "config": ctx.config,
        "sector": ctx.sector.to_json(),
        "nodes": [
            {"id": nid, "lat": n.position.lat, "lon": n.position.lon, "name": n.name}
            for nid, n in sorted(net.nodes.items())
        ],
        "edges": [list(e) for e in net.sorted_edges()],
        "merge_map": dict(sorted(ctx.merge_map.items())),
        "catalog": {k: v.to_json() for k, v in sorted(ctx.catalog.items())},
        "lookup": [
            {"route": list(k), "path": v.path, "anchors": [list(a) for a in v.anchors]}
            for k, v in sorted(ctx.lookup.items())
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))
    return ctx.content_hash


def load_graph(path) -> RouteGraph:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != GRAPH_FORMAT:
        raise GraphError(f"{path}: not a graph artifact")
    if doc.get("version") != GRAPH_VERSION:
        raise GraphError(f"{path}: unsupported graph version {doc.get('version')}")
    net = RouteNetwork()
    for n in doc["nodes"]:
        net.add_node(Node(n["id"], GeoPoint(n["lat"], n["lon"]), n.get("name")))
    for a, b in doc["edges"]:
        net.add_edge(a, b)
    ctx = RouteGraph(
        net,
        dict(doc["merge_map"]),
        {k: GeoPoint.from_json(v) for k, v in doc["catalog"].items()},
        Sector.from_json(doc["sector"]),
        {tuple(r["route"]): MappedRoute(list(r["path"]), [tuple(a) for a in r["anchors"]]) for r in doc["lookup"]},
        dict(doc.get("config") or {}),
    )
    if ctx.content_hash != doc["content_hash"]:
        raise GraphError(f"{path}: content hash mismatch")
    return ctx
