"""Path engine: SLA checks, constrained search vs brute-force oracle, LPM."""

import random

import pytest

from ruta import pathengine, srou
from ruta.kvstore import KvStore, StoreUnavailable
from ruta.netsim import VirtualClock, seconds
from ruta.pathengine import (
    ComputedPath,
    Lpm,
    RouteSync,
    SlaPolicy,
    build_edges,
    evaluate_sla,
    shortest_constrained,
    to_segment_list,
)
from ruta.schema import LinkStateRecord, ServiceRoute, ServiceSloc, Sloc, to_json_bytes

import pathoracle


def make_rec(src, dst, twd_us, loss=0.0, jitter=0.0, status="up"):
    return LinkStateRecord(src=src, dst=dst, two_way_delay_us=twd_us,
                           jitter_us=jitter, loss=loss, utilization_rx=0.0,
                           utilization_tx=0.0, status=status, sampled_at=0)


def make_ssloc(name, ip, port=17777):
    return ServiceSloc(name, Sloc(color="inet", private_ip=ip, private_port=port,
                                  public_ip=ip, public_port=port))


class TestSla:
    def test_ok_under_limits(self):
        rec = make_rec("a", "b", 100_000.0)  # one-way 50ms
        assert evaluate_sla(rec, SlaPolicy()).ok

    def test_delay_violation(self):
        rec = make_rec("a", "b", 770_000.0)  # one-way 385ms
        verdict = evaluate_sla(rec, SlaPolicy())
        assert not verdict.ok and verdict.reason == "delay"

    def test_loss_violation(self):
        rec = make_rec("a", "b", 10_000.0, loss=0.05)
        verdict = evaluate_sla(rec, SlaPolicy())
        assert not verdict.ok and verdict.reason == "loss"

    def test_down_and_missing(self):
        assert evaluate_sla(make_rec("a", "b", 1.0, status="down"),
                            SlaPolicy()).reason == "down"
        assert evaluate_sla(None, SlaPolicy()).reason == "unknown"

    def test_boundary_is_inclusive(self):
        rec = make_rec("a", "b", 400_000.0)  # one-way exactly 200ms
        assert evaluate_sla(rec, SlaPolicy()).ok


class TestEdges:
    def test_cost_formula(self):
        rec = make_rec("a", "b", 80_000.0, loss=0.01, jitter=2_000.0)
        policy = SlaPolicy(loss_penalty_ms=1000.0, jitter_weight=0.5)
        assert pathengine.edge_cost_ms(rec, policy) == pytest.approx(40 + 10 + 1)

    def test_reverse_edges_derived(self):
        edges = build_edges({("a", "b"): make_rec("a", "b", 20_000.0)}, SlaPolicy())
        assert set(edges) == {("a", "b"), ("b", "a")}
        assert edges[("a", "b")] == edges[("b", "a")]

    def test_measured_direction_wins(self):
        recs = {("a", "b"): make_rec("a", "b", 20_000.0),
                ("b", "a"): make_rec("b", "a", 60_000.0)}
        edges = build_edges(recs, SlaPolicy())
        assert edges[("a", "b")] == pytest.approx(10.0)
        assert edges[("b", "a")] == pytest.approx(30.0)

    def test_down_edges_excluded(self):
        recs = {("a", "b"): make_rec("a", "b", 20_000.0, status="down"),
                ("b", "a"): make_rec("b", "a", 20_000.0)}
        edges = build_edges(recs, SlaPolicy())
        assert ("a", "b") not in edges
        assert ("b", "a") in edges


class TestSearch:
    def test_relay_beats_slow_direct(self):
        # one-way: direct 385ms, relay 120 + 120
        edges = {("s", "d"): 385.0, ("s", "f"): 120.0, ("f", "d"): 120.0}
        cost, path = shortest_constrained(edges, {"s"}, {"d"}, 4)
        assert path == ("s", "f", "d")
        assert cost == pytest.approx(240.0)

    def test_direct_when_relays_worse(self):
        edges = {("s", "d"): 10.0, ("s", "f"): 20.0, ("f", "d"): 20.0}
        cost, path = shortest_constrained(edges, {"s"}, {"d"}, 4)
        assert path == ("s", "d")

    def test_hop_budget_enforced(self):
        edges = {("s", "a"): 1.0, ("a", "b"): 1.0, ("b", "d"): 1.0}
        with pytest.raises(pathengine.NoFeasiblePath):
            shortest_constrained(edges, {"s"}, {"d"}, 2)
        cost, path = shortest_constrained(edges, {"s"}, {"d"}, 3)
        assert path == ("s", "a", "b", "d")

    def test_disconnected(self):
        with pytest.raises(pathengine.NoFeasiblePath):
            shortest_constrained({("a", "b"): 1.0}, {"a"}, {"z"}, 4)

    def test_deterministic_tie_break(self):
        edges = {("s", "x"): 1.0, ("x", "d"): 1.0,
                 ("s", "y"): 1.0, ("y", "d"): 1.0}
        _, path = shortest_constrained(edges, {"s"}, {"d"}, 4)
        assert path == ("s", "x", "d")  # lexicographically smallest

    def test_fewer_hops_wins_cost_tie(self):
        edges = {("s", "d"): 2.0, ("s", "a"): 1.0, ("a", "d"): 1.0}
        _, path = shortest_constrained(edges, {"s"}, {"d"}, 4)
        assert path == ("s", "d")

    def test_oracle_equivalence_random_graphs(self):
        # mandatory pre-build check: 200 seeded graphs vs exhaustive search
        for seed in range(200):
            rng = random.Random(seed)
            n = rng.randrange(3, 9)
            names = [f"n{i}" for i in range(n)]
            edges = {}
            for u in names:
                for v in names:
                    if u != v and rng.random() < 0.45:
                        edges[(u, v)] = rng.uniform(0.1, 100.0)
            srcs, dsts = {names[0]}, {names[-1]}
            expect = pathoracle.best_path(edges, srcs, dsts, 4)
            if expect is None:
                with pytest.raises(pathengine.NoFeasiblePath):
                    shortest_constrained(edges, srcs, dsts, 4)
                continue
            cost, path = shortest_constrained(edges, srcs, dsts, 4)
            assert cost == pytest.approx(expect[0])
            assert path == expect[1]

    def test_monotonicity(self):
        # raising an edge cost never lowers the chosen path cost
        rng = random.Random(77)
        for _ in range(50):
            names = [f"n{i}" for i in range(6)]
            edges = {}
            for u in names:
                for v in names:
                    if u != v and rng.random() < 0.5:
                        edges[(u, v)] = rng.uniform(0.1, 50.0)
            try:
                base, _ = shortest_constrained(edges, {names[0]}, {names[-1]}, 4)
            except pathengine.NoFeasiblePath:
                continue
            victim = rng.choice(sorted(edges))
            edges[victim] += rng.uniform(1.0, 100.0)
            try:
                bumped, _ = shortest_constrained(edges, {names[0]}, {names[-1]}, 4)
            except pathengine.NoFeasiblePath:
                continue
            assert bumped >= base - 1e-9


class TestSegmentList:
    def test_direct(self):
        lc_b = make_ssloc("LC_B", "192.168.99.78", 5546)
        path = ComputedPath(waypoints=(lc_b,), cost_ms=1.0, computed_at=0,
                            source="direct")
        outer, segments, sl = to_segment_list(path, srou.FUNC_END_DT2U, 1234, 4)
        assert outer is lc_b
        assert segments == (srou.Function(1234, srou.FUNC_END_DT2U),)
        assert sl == 1

    def test_via_relay(self):
        spine = make_ssloc("Spine_A", "192.168.99.75")
        lc_b = make_ssloc("LC_B", "192.168.99.78", 5546)
        path = ComputedPath(waypoints=(spine, lc_b), cost_ms=1.0, computed_at=0,
                            source="engineered")
        outer, segments, sl = to_segment_list(path, srou.FUNC_END_DT2U, 1234, 4)
        assert outer is spine
        assert segments == (srou.Function(1234, srou.FUNC_END_DT2U),
                            srou.Waypoint("192.168.99.78", 5546))
        assert sl == 2

    def test_too_many(self):
        wps = tuple(make_ssloc(f"F{i}", f"10.0.0.{i+1}") for i in range(5))
        path = ComputedPath(waypoints=wps, cost_ms=1.0, computed_at=0,
                            source="engineered")
        with pytest.raises(pathengine.TooManySegments):
            to_segment_list(path, srou.FUNC_END_DT2U, 1, 4)

    def test_advance_inverts_to_visit_order(self):
        # applying advance_segment repeatedly visits waypoints in path order
        wps = tuple(make_ssloc(f"F{i}", f"10.0.0.{i+1}") for i in range(4))
        path = ComputedPath(waypoints=wps, cost_ms=0.0, computed_at=0,
                            source="engineered")
        outer, segments, sl = to_segment_list(path, srou.FUNC_END_DT4, 77, 4)
        hdr = srou.SRoUHeader(
            protocol_id=srou.ProtocolId.IPV4, source_address="10.9.9.9",
            source_port=1, segment_list=segments, segments_left=sl)
        visited = [outer.public_addr]
        while hdr.segments_left:
            seg, hdr = srou.advance_segment(hdr)
            if isinstance(seg, srou.Waypoint):
                visited.append((seg.address, seg.port))
            else:
                assert hdr.segments_left == 0  # function sits at index 0
        assert visited == [w.public_addr for w in wps]


class TestLpmAndTable:
    def test_longest_match(self):
        lpm = Lpm()
        wide = ServiceRoute(route_type=5, export_rt="1:1", rd="1:1",
                            prefix="10.1.0.0", mask=16, site_id=1,
                            system_name="A", policy_tag=0)
        narrow = ServiceRoute(route_type=5, export_rt="1:1", rd="1:1",
                              prefix="10.1.2.0", mask=24, site_id=1,
                              system_name="B", policy_tag=0)
        lpm.insert("10.1.0.0", 16, wide)
        lpm.insert("10.1.2.0", 24, narrow)
        assert lpm.lookup("10.1.2.3") is narrow
        assert lpm.lookup("10.1.9.9") is wide
        assert lpm.lookup("10.2.0.1") is None

    def test_lpm_random_oracle(self):
        rng = random.Random(5)
        lpm = Lpm()
        routes = []
        for i in range(40):
            mask = rng.randrange(8, 33)
            net = rng.getrandbits(32) & ((0xFFFFFFFF << (32 - mask)) & 0xFFFFFFFF)
            prefix = ".".join(str((net >> s) & 0xFF) for s in (24, 16, 8, 0))
            route = ServiceRoute(route_type=5, export_rt="1:1", rd="1:1",
                                 prefix=prefix, mask=mask, site_id=i,
                                 system_name=f"n{i}", policy_tag=0)
            lpm.insert(prefix, mask, route)
            routes.append((net, mask, route))
        for _ in range(500):
            addr = rng.getrandbits(32)
            best = None
            for net, mask, route in routes:
                m = (0xFFFFFFFF << (32 - mask)) & 0xFFFFFFFF if mask else 0
                if addr & m == net and (best is None or mask > best[0]):
                    best = (mask, route)
            ip = ".".join(str((addr >> s) & 0xFF) for s in (24, 16, 8, 0))
            got = lpm.lookup(ip)
            assert got is (best[1] if best else None)

    def test_resolve_prefers_type2(self):
        table = pathengine.RouteTable()
        t2 = ServiceRoute(route_type=2, export_rt="1:1", rd="1:1",
                          mac="aa:aa:aa:aa:aa:aa", ip="10.0.0.99",
                          site_id=1, system_name="LC_B", policy_tag=0)
        table.type2[(1234, "aa:aa:aa:aa:aa:aa")] = t2
        assert table.resolve(vnid=1234, mac="aa:aa:aa:aa:aa:aa") is t2
        with pytest.raises(pathengine.NoRoute):
            table.resolve(vnid=1234, mac="bb:bb:bb:bb:bb:bb")


class TestRouteSync:
    def build(self):
        clock = VirtualClock()
        store = KvStore(clock)
        handle = store.client("LC_A")
        sync = RouteSync(handle, l2_imports={"100:1": 1234}, l3_imports={})
        return clock, store, handle, sync

    def put_route(self, store, mac="aa:aa:aa:aa:aa:aa", ip="10.0.0.99"):
        route = ServiceRoute(route_type=2, export_rt="100:1", rd="2:1",
                             mac=mac, ip=ip, site_id=2, system_name="LC_B",
                             policy_tag=0)
        store.put(route.key(), to_json_bytes(route.to_doc()))
        return route

    def test_watch_updates_table(self):
        clock, store, handle, sync = self.build()
        assert sync.start()
        self.put_route(store)
        assert (1234, "aa:aa:aa:aa:aa:aa") in sync.table.type2
        assert sync.table.cache_epoch == store.revision

    def test_seed_then_watch_no_gap(self):
        clock, store, handle, sync = self.build()
        self.put_route(store, mac="aa:aa:aa:aa:aa:01")
        assert sync.start()
        self.put_route(store, mac="aa:aa:aa:aa:aa:02")
        assert len(sync.table.type2) == 2
        revs = [rev for rev, _, _ in sync.log]
        assert revs == sorted(revs)

    def test_headless_freeze_and_heal_replay(self):
        clock, store, handle, sync = self.build()
        assert sync.start()
        route = self.put_route(store, mac="aa:aa:aa:aa:aa:01")
        store.set_partitioned("LC_A", True)
        sync.table.headless = True
        self.put_route(store, mac="aa:aa:aa:aa:aa:02")
        # frozen cache still answers
        assert sync.table.resolve_l2(1234, "aa:aa:aa:aa:aa:01") == route
        assert (1234, "aa:aa:aa:aa:aa:02") not in sync.table.type2
        store.set_partitioned("LC_A", False)
        sync.table.headless = False
        assert (1234, "aa:aa:aa:aa:aa:02") in sync.table.type2
        revs = [rev for rev, _, _ in sync.log]
        assert revs == sorted(revs)

    def test_start_unavailable_goes_headless(self):
        clock, store, handle, sync = self.build()
        store.set_partitioned("LC_A", True)
        assert not sync.start()
        assert sync.table.headless

    def test_withdraw_removes(self):
        clock, store, handle, sync = self.build()
        sync.start()
        route = self.put_route(store)
        store.delete(route.key())
        assert sync.table.type2 == {}
