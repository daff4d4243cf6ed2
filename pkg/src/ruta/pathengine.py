"""Per-linecard route resolution and constrained relay-path computation.

The engine mirrors the watched /route prefixes into a local table (type-2
exact match, type-5 longest prefix match), evaluates destination SLAs against
direct probe results, and, on violation, runs a hop-constrained shortest-path
search over the link-state snapshot.  Edge cost is

    one_way_delay_ms + loss_penalty * loss + jitter_weight * jitter_ms

with one-way delay approximated as half the measured round trip (symmetric
assumption; simulation clocks are synchronized).  The search is hop-layered
relaxation: k rounds of edge relaxation bound the waypoint count to the
segment budget, with ties broken by (cost, hop count, lexicographic SLoC-short
sequence) so results are fully deterministic.

When the store is unreachable the table freezes and keeps answering from
cache (headless mode); the watch backlog replays on heal.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import srou
from .kvstore import DELETE, StoreHandle, StoreUnavailable, WatchEvent
from .schema import (
    LINKSTATE_PREFIX,
    STATUS_DOWN,
    LinkStateRecord,
    ServiceRoute,
    ServiceSloc,
    from_json_bytes,
    parse_linkstate_key,
    parse_route_key,
    route_prefix,
)

PATH_DIRECT = "direct"
PATH_ENGINEERED = "engineered"
PATH_POLICY_STEER = "policy-steer"

SLA_OK = "ok"


class PathError(Exception):
    pass


class NoRoute(PathError):
    pass


class NoFeasiblePath(PathError):
    pass


class TooManySegments(PathError):
    pass


@dataclass(frozen=True)
class SlaPolicy:
    max_delay_ms: float = 200.0
    max_loss: float = 0.02
    max_segments: int = 4
    loss_penalty_ms: float = 1000.0
    jitter_weight: float = 0.0

    def __post_init__(self):
        if self.max_segments < 1:
            raise ValueError("max_segments must be >= 1")


@dataclass(frozen=True)
class SlaVerdict:
    ok: bool
    reason: Optional[str] = None  # delay | loss | down | unknown


def one_way_delay_ms(rec: LinkStateRecord) -> float:
    return rec.two_way_delay_us / 2.0 / 1000.0


def evaluate_sla(rec: Optional[LinkStateRecord], policy: SlaPolicy) -> SlaVerdict:
    """Missing probe data counts as violated so a relay search is attempted."""
    if rec is None:
        return SlaVerdict(False, "unknown")
    if rec.status == STATUS_DOWN:
        return SlaVerdict(False, "down")
    if one_way_delay_ms(rec) > policy.max_delay_ms:
        return SlaVerdict(False, "delay")
    if rec.loss > policy.max_loss:
        return SlaVerdict(False, "loss")
    return SlaVerdict(True)


def edge_cost_ms(rec: LinkStateRecord, policy: SlaPolicy) -> float:
    return (one_way_delay_ms(rec)
            + policy.loss_penalty_ms * rec.loss
            + policy.jitter_weight * rec.jitter_us / 1000.0)


def build_edges(records: dict[tuple[str, str], LinkStateRecord],
                policy: SlaPolicy) -> dict[tuple[str, str], float]:
    """Directed cost map from probe records.

    Round-trip measurements are direction-free, so each up record also
    supplies the reverse edge unless that direction was measured itself or
    explicitly reported down.
    """
    down = {pair for pair, rec in records.items() if rec.status == STATUS_DOWN}
    edges: dict[tuple[str, str], float] = {}
    for pair in sorted(records):
        rec = records[pair]
        if rec.status == STATUS_DOWN:
            continue
        edges[pair] = edge_cost_ms(rec, policy)
    for pair in sorted(records):
        rec = records[pair]
        if rec.status == STATUS_DOWN:
            continue
        rev = (pair[1], pair[0])
        if rev not in edges and rev not in down:
            edges[rev] = edge_cost_ms(rec, policy)
    return edges


def shortest_constrained(edges: dict[tuple[str, str], float],
                         srcs: set[str], dsts: set[str],
                         max_hops: int) -> tuple[float, tuple[str, ...]]:
    """Hop-layered relaxation; returns (cost, node path including the source).

    Each round extends best-known walks by one edge, so after k rounds the
    table holds minima over walks of at most k edges; with positive costs the
    winner is a simple path.  Ties break on (cost, hops, lexicographic path).
    """
    best: dict[str, tuple[float, int, tuple[str, ...]]] = {}
    for s in sorted(srcs):
        best[s] = (0.0, 0, (s,))
    edge_items = sorted(edges.items())
    for _ in range(max_hops):
        nxt = dict(best)
        for (u, v), w in edge_items:
            cur = best.get(u)
            if cur is None:
                continue
            cand = (cur[0] + w, cur[1] + 1, cur[2] + (v,))
            if v not in nxt or cand < nxt[v]:
                nxt[v] = cand
        best = nxt
    winner = None
    for d in sorted(dsts):
        cand = best.get(d)
        if cand is None or cand[1] == 0:
            continue
        if winner is None or cand < winner:
            winner = cand
    if winner is None:
        raise NoFeasiblePath(f"no path within {max_hops} hops")
    return winner[0], winner[2]


@dataclass(frozen=True)
class ComputedPath:
    """Selected waypoint sequence: first is the outer destination, last is the
    destination service node where the function executes."""

    waypoints: tuple[ServiceSloc, ...]
    cost_ms: float
    computed_at: int
    source: str  # direct | engineered | policy-steer
    dst_key: Optional[str] = None


def to_segment_list(path: ComputedPath, function: int, args: int,
                    max_segments: int) -> tuple[ServiceSloc, tuple[srou.Segment, ...], int]:
    """Render waypoints as (outer destination, reverse-ordered segments, SL).

    The function segment sits at index 0 (executed at the final waypoint);
    intermediate waypoints follow in reverse visit order.  The first waypoint
    is only the outer destination and never appears in the list.
    """
    if not path.waypoints:
        raise NoFeasiblePath("empty waypoint list")
    if len(path.waypoints) > max_segments:
        raise TooManySegments(
            f"{len(path.waypoints)} waypoints exceed budget {max_segments}")
    segments: list[srou.Segment] = [srou.Function(args=args, function=function)]
    for wp in reversed(path.waypoints[1:]):
        ip, port = wp.public_addr
        segments.append(srou.Waypoint(ip, port))
    outer = path.waypoints[0]
    return outer, tuple(segments), len(segments)


# ---------------------------------------------------------------------------
# route table


class Lpm:
    """Longest-prefix-match over IPv4: mask-indexed exact-match maps."""

    def __init__(self):
        self._by_mask: dict[int, dict[int, ServiceRoute]] = {}

    @staticmethod
    def _net(ip: str, mask: int) -> int:
        return int(ipaddress.IPv4Address(ip)) & (0xFFFFFFFF << (32 - mask)
                                                 if mask else 0)

    def insert(self, prefix: str, mask: int, route: ServiceRoute) -> None:
        self._by_mask.setdefault(mask, {})[self._net(prefix, mask)] = route

    def remove(self, prefix: str, mask: int) -> None:
        table = self._by_mask.get(mask)
        if table is not None:
            table.pop(self._net(prefix, mask), None)

    def lookup(self, ip: str) -> Optional[ServiceRoute]:
        addr = int(ipaddress.IPv4Address(ip))
        for mask in sorted(self._by_mask, reverse=True):
            key = addr & (0xFFFFFFFF << (32 - mask) if mask else 0)
            route = self._by_mask[mask].get(key)
            if route is not None:
                return route
        return None

    def __len__(self):
        return sum(len(t) for t in self._by_mask.values())


@dataclass
class RouteTable:
    type2: dict[tuple[int, str], ServiceRoute] = field(default_factory=dict)
    type5: dict[int, Lpm] = field(default_factory=dict)
    cache_epoch: int = 0
    headless: bool = False

    def resolve_l2(self, vnid: int, mac: str) -> ServiceRoute:
        route = self.type2.get((vnid, mac))
        if route is None:
            raise NoRoute(f"no type-2 route for vnid {vnid} mac {mac}")
        return route

    def resolve_l3(self, vrf: int, ip: str) -> ServiceRoute:
        lpm = self.type5.get(vrf)
        route = lpm.lookup(ip) if lpm is not None else None
        if route is None:
            raise NoRoute(f"no type-5 route for vrf {vrf} ip {ip}")
        return route

    def resolve(self, *, vnid: Optional[int] = None, mac: Optional[str] = None,
                vrf: Optional[int] = None, ip: Optional[str] = None) -> ServiceRoute:
        """Type-2 exact match preferred; type-5 LPM as the L3 fallback."""
        if vnid is not None and mac is not None:
            try:
                return self.resolve_l2(vnid, mac)
            except NoRoute:
                if vrf is None or ip is None:
                    raise
        if vrf is not None and ip is not None:
            return self.resolve_l3(vrf, ip)
        raise NoRoute("nothing to resolve with")


class RouteSync:
    """Mirror of the watched /route prefixes, one watch per imported RT."""

    def __init__(self, handle: StoreHandle, l2_imports: dict[str, int],
                 l3_imports: dict[str, int],
                 on_delta: Optional[Callable[[str, ServiceRoute], None]] = None):
        self.handle = handle
        self.l2_imports = dict(l2_imports)
        self.l3_imports = dict(l3_imports)
        self.on_delta = on_delta
        self.table = RouteTable()
        self.log: list[tuple[int, str, str]] = []  # (revision, kind, key)
        self.started = False

    def start(self) -> bool:
        """Seed from a prefix fetch and watch from the next revision.

        Returns False (headless) when the store is unreachable; the caller
        retries later.
        """
        try:
            prefixes = ([(route_prefix(2, rt), 2) for rt in sorted(self.l2_imports)]
                        + [(route_prefix(5, rt), 5) for rt in sorted(self.l3_imports)])
            for prefix, _ in prefixes:
                rev = self.handle.revision + 1
                for entry in self.handle.get_prefix(prefix):
                    self._apply("put", entry.key, entry.value, entry.mod_revision)
                self.handle.watch_prefix(prefix, from_revision=rev,
                                         on_event=self._on_event)
        except StoreUnavailable:
            self.table.headless = True
            return False
        self.table.headless = False
        self.started = True
        return True

    def _on_event(self, ev: WatchEvent) -> None:
        self._apply("delete" if ev.kind == DELETE else "put",
                    ev.entry.key, ev.entry.value, ev.revision)

    def _apply(self, kind: str, key: str, value: bytes, revision: int) -> None:
        try:
            doc = from_json_bytes(value)
            route = parse_route_key(key, doc)
        except Exception:
            return
        if route.route_type == 2:
            vnid = self.l2_imports.get(route.export_rt)
            if vnid is None:
                return
            tkey = (vnid, route.mac)
            if kind == "put":
                self.table.type2[tkey] = route
            else:
                self.table.type2.pop(tkey, None)
        else:
            vrf = self.l3_imports.get(route.export_rt)
            if vrf is None:
                return
            lpm = self.table.type5.setdefault(vrf, Lpm())
            if kind == "put":
                lpm.insert(route.prefix, route.mask, route)
            else:
                lpm.remove(route.prefix, route.mask)
        self.table.cache_epoch = max(self.table.cache_epoch, revision)
        self.log.append((revision, kind, key))
        if self.on_delta is not None:
            self.on_delta(kind, route)


class LinkStateSync:
    """Mirror of /stats/linkstate into an in-memory record map."""

    def __init__(self, handle: StoreHandle,
                 on_delta: Optional[Callable[[str, str], None]] = None):
        self.handle = handle
        self.records: dict[tuple[str, str], LinkStateRecord] = {}
        self.on_delta = on_delta
        self.started = False

    def start(self) -> bool:
        try:
            rev = self.handle.revision + 1
            for entry in self.handle.get_prefix(LINKSTATE_PREFIX):
                self._apply("put", entry.key, entry.value)
            self.handle.watch_prefix(LINKSTATE_PREFIX, from_revision=rev,
                                     on_event=self._on_event)
        except StoreUnavailable:
            return False
        self.started = True
        return True

    def _on_event(self, ev: WatchEvent) -> None:
        self._apply("delete" if ev.kind == DELETE else "put", ev.entry.key,
                    ev.entry.value)

    def _apply(self, kind: str, key: str, value: bytes) -> None:
        try:
            pair = parse_linkstate_key(key)
        except Exception:
            return
        if kind == "put":
            try:
                self.records[pair] = LinkStateRecord.from_doc(from_json_bytes(value))
            except Exception:
                return
        else:
            self.records.pop(pair, None)
        if self.on_delta is not None:
            self.on_delta(*pair)

    def edges(self, policy: SlaPolicy) -> dict[tuple[str, str], float]:
        return build_edges(self.records, policy)
