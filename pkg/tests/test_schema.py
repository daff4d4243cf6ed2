"""Control schema: key grammar, registration, hunting, routes, policy."""

import random

import pytest

from ruta import schema
from ruta.kvstore import KvStore
from ruta.netsim import VirtualClock, seconds
from ruta.schema import (
    LinkStateRecord,
    NodeRecord,
    PolicyRule,
    ServiceRoute,
    Sloc,
    sloc_short,
)


@pytest.fixture
def clock():
    return VirtualClock()


@pytest.fixture
def store(clock):
    return KvStore(clock)


@pytest.fixture
def handle(store):
    return store.client("test")


def make_sloc(ip="10.0.0.1", port=17777, color="inet", bw=1e9):
    return Sloc(color=color, private_ip=ip, private_port=port,
                public_ip=ip, public_port=port, rx_bw=bw, tx_bw=bw)


def register(handle, clock, name, role="fabric", ttl=600):
    lease = handle.grant_lease(seconds(ttl))
    rec = schema.register_node(handle, role, name, site_id=1,
                               location=(0.0, 0.0), lease=lease)
    return rec, lease


class TestRegistration:
    def test_first_label_is_zero(self, handle, clock):
        rec, _ = register(handle, clock, "LC_A", role="linecard")
        assert rec.system_label == 0
        assert handle.get("/node/linecard/LC_A") is not None

    def test_smallest_unused(self, handle, clock):
        # oracle: sort the live labels and scan for the first gap
        for name in ["A", "B", "C", "D"]:
            register(handle, clock, name)
        handle.delete("/node/fabric/C")  # frees label 2
        used = sorted(
            schema.from_json_bytes(e.value)["system_label"]
            for e in handle.get_prefix("/node/")
        )
        expect = 0
        while expect in used:
            expect += 1
        rec, _ = register(handle, clock, "E")
        assert rec.system_label == expect == 2

    def test_duplicate_name(self, handle, clock):
        register(handle, clock, "F1")
        with pytest.raises(schema.DuplicateSystemName):
            register(handle, clock, "F1")

    def test_label_space_exhausted(self, handle, clock):
        register(handle, clock, "A")
        register(handle, clock, "B")
        lease = handle.grant_lease(seconds(60))
        with pytest.raises(schema.LabelSpaceExhausted):
            schema.register_node(handle, "fabric", "C", 1, (0, 0), lease,
                                 label_ceiling=2)

    def test_concurrent_registrations_unique(self, store, clock):
        rng = random.Random(42)
        records = []
        for i in range(50):
            h = store.client(f"n{i}")
            lease = h.grant_lease(seconds(600))
            at = rng.randrange(0, seconds(1))
            clock.call_at(at, lambda h=h, i=i, lease=lease: schema.register_node(
                h, "linecard", f"LC{i:02d}", 1, (0, 0), lease,
                clock=clock, hold_ns=1_000_000, done=records.append))
        clock.run_until_quiescent()
        labels = sorted(r.system_label for r in records)
        assert labels == list(range(50))

    def test_lock_released_on_error(self, handle, clock):
        register(handle, clock, "F1")
        with pytest.raises(schema.DuplicateSystemName):
            register(handle, clock, "F1")
        rec, _ = register(handle, clock, "F2")  # lock must be free again
        assert rec.system_label == 1


class TestServiceAnnounce:
    def test_announce_and_hunt(self, handle, clock):
        rec, lease = register(handle, clock, "F1")
        schema.announce_service(handle, rec, [make_sloc()], lease)
        found, warnings = schema.hunt(handle, "fabric")
        assert warnings == []
        assert [name for name, _ in found] == ["F1"]

    def test_two_uplinks_one_value(self, handle, clock):
        rec, lease = register(handle, clock, "LC_A", role="linecard")
        slocs = [make_sloc(port=5547, color="biz-internet"),
                 make_sloc(port=5548, color="mpls")]
        schema.announce_service(handle, rec, slocs, lease)
        found, _ = schema.hunt(handle, "linecard")
        assert [s.color for s in found[0][1]] == ["biz-internet", "mpls"]

    def test_lease_lapse_removes_service(self, handle, clock):
        rec, lease = register(handle, clock, "F1")
        schema.announce_service(handle, rec, [make_sloc()], lease)
        clock.run_until(seconds(601))
        found, _ = schema.hunt(handle, "fabric")
        assert found == []

    def test_not_registered(self, handle, clock):
        rec = NodeRecord("fabric", "ghost", 1, (0, 0), 9)
        lease = handle.grant_lease(seconds(60))
        with pytest.raises(schema.NotRegistered):
            schema.announce_service(handle, rec, [make_sloc()], lease)

    def test_hunt_sorted_and_warns_on_garbage(self, handle, clock):
        for name in ["S2", "S1"]:
            rec, lease = register(handle, clock, name, role="stun")
            schema.announce_service(handle, rec, [make_sloc()], lease)
        handle.put("/service/stun/S3", b"not json")
        found, warnings = schema.hunt(handle, "stun")
        assert [name for name, _ in found] == ["S1", "S2"]
        assert len(warnings) == 1 and "S3" in warnings[0]

    def test_hunt_empty_role(self, handle):
        found, warnings = schema.hunt(handle, "lsdb")
        assert found == [] and warnings == []


class TestRoutes:
    def test_type2_key(self, handle, clock):
        route = ServiceRoute(route_type=2, export_rt="100:1", rd="1:1",
                             mac="00:11:22:33:44:55", ip="10.0.0.88",
                             site_id=1, system_name="LC_A", policy_tag=0)
        assert route.key() == "/route/2/100:1/1:1/00:11:22:33:44:55/10.0.0.88"
        lease = handle.grant_lease(seconds(600))
        schema.announce_route(handle, route, lease)
        entry = handle.get(route.key())
        doc = schema.from_json_bytes(entry.value)
        assert doc == {"site_id": 1, "system_name": "LC_A", "policy_tag": 0,
                       "optional_tlvs": []}

    def test_type5_key(self):
        route = ServiceRoute(route_type=5, export_rt="200:1", rd="2:1",
                             prefix="10.1.0.0", mask=24,
                             site_id=1, system_name="LC_B", policy_tag=7)
        assert route.key() == "/route/5/200:1/2:1/10.1.0.0/24"

    def test_bad_mask(self):
        with pytest.raises(schema.MalformedRoute):
            ServiceRoute(route_type=5, export_rt="1:1", rd="1:1",
                         prefix="10.0.0.0", mask=33,
                         site_id=1, system_name="X", policy_tag=0)

    def test_withdraw(self, handle, clock):
        route = ServiceRoute(route_type=2, export_rt="1:1", rd="1:1",
                             mac="aa:bb:cc:dd:ee:ff", ip="1.2.3.4",
                             site_id=1, system_name="X", policy_tag=0)
        lease = handle.grant_lease(seconds(600))
        schema.announce_route(handle, route, lease)
        assert schema.withdraw_route(handle, route.key()) is True
        assert schema.withdraw_route(handle, route.key()) is False

    def test_key_round_trip_fuzz(self):
        rng = random.Random(9)
        for _ in range(300):
            if rng.random() < 0.5:
                route = ServiceRoute(
                    route_type=2, export_rt=f"{rng.randrange(999)}:1",
                    rd=f"{rng.randrange(99)}:{rng.randrange(99)}",
                    mac=":".join(f"{rng.randrange(256):02x}" for _ in range(6)),
                    ip=f"10.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(256)}",
                    site_id=rng.randrange(1 << 16), system_name=f"n{rng.randrange(99)}",
                    policy_tag=rng.randrange(1 << 32))
            else:
                mask = rng.randrange(0, 33)
                net = rng.getrandbits(32) & (0xFFFFFFFF << (32 - mask)) & 0xFFFFFFFF
                prefix = ".".join(str((net >> s) & 0xFF) for s in (24, 16, 8, 0))
                route = ServiceRoute(
                    route_type=5, export_rt=f"{rng.randrange(999)}:1", rd="1:1",
                    prefix=prefix, mask=mask, site_id=1,
                    system_name=f"n{rng.randrange(99)}", policy_tag=0)
            parsed = schema.parse_route_key(route.key(), route.to_doc())
            assert parsed == route


class TestLinkstate:
    def test_key_shape(self):
        rec = LinkStateRecord(
            src="F1|inet|10.0.0.1:17777", dst="F2|inet|10.0.0.2:17777",
            two_way_delay_us=40000.0, jitter_us=0.0, loss=0.0,
            utilization_rx=0.0, utilization_tx=0.0, status="up", sampled_at=0)
        assert rec.key() == ("/stats/linkstate/F1|inet|10.0.0.1:17777"
                             " - F2|inet|10.0.0.2:17777")
        src, dst = schema.parse_linkstate_key(rec.key())
        assert (src, dst) == (rec.src, rec.dst)

    def test_out_of_range_rejected(self):
        with pytest.raises(schema.ValidationError):
            LinkStateRecord(src="a", dst="b", two_way_delay_us=1.0, jitter_us=0.0,
                            loss=1.01, utilization_rx=0.0, utilization_tx=0.0,
                            status="up", sampled_at=0)

    def test_down_record_written_not_deleted(self, handle, clock):
        rec = LinkStateRecord(src="a|c|1.1.1.1:1", dst="b|c|2.2.2.2:2",
                              two_way_delay_us=0.0, jitter_us=0.0, loss=1.0,
                              utilization_rx=0.0, utilization_tx=0.0,
                              status="down", sampled_at=5)
        lease = handle.grant_lease(seconds(600))
        schema.report_linkstate(handle, rec, lease)
        stored = LinkStateRecord.from_doc(
            schema.from_json_bytes(handle.get(rec.key()).value))
        assert stored.status == "down"

    def test_sloc_short_round_trip(self):
        sloc = make_sloc(ip="10.0.0.9", port=5547, color="biz-internet")
        short = sloc_short("LC_A", sloc)
        assert short == "LC_A|biz-internet|10.0.0.9:5547"
        key = schema.linkstate_key(short, short.replace("LC_A", "LC_B"))
        src, dst = schema.parse_linkstate_key(key)
        assert src == short


class TestPolicy:
    def test_exact_deny(self):
        rules = {(10, 20): PolicyRule("deny")}
        assert schema.lookup_policy(rules, [10], [20]).action == "deny"

    def test_default_permit(self):
        assert schema.lookup_policy({}, [10], [20]).action == "permit"

    def test_dst_wildcard_steer(self):
        rules = {(10, "*"): PolicyRule("steer", ("F3|c|1.1.1.1:1",))}
        rule = schema.lookup_policy(rules, [10], [99])
        assert rule.action == "steer"
        assert rule.slocs == ("F3|c|1.1.1.1:1",)

    def test_precedence_table(self):
        # exact pair > (*, dst) > (src, *) > default
        exact = PolicyRule("deny")
        src_wild = PolicyRule("steer", ("a|c|1.1.1.1:1",))
        dst_wild = PolicyRule("steer", ("b|c|2.2.2.2:2",))
        rules = {(1, 2): exact, ("*", 2): src_wild, (1, "*"): dst_wild}
        assert schema.lookup_policy(rules, [1], [2]) is exact
        assert schema.lookup_policy(rules, [9], [2]) is src_wild
        assert schema.lookup_policy(rules, [1], [9]) is dst_wild
        assert schema.lookup_policy(rules, [9], [9]).action == "permit"

    def test_smallest_tag_wins(self):
        rules = {(5, 1): PolicyRule("deny"), (3, 1): PolicyRule("permit")}
        assert schema.lookup_policy(rules, [5, 3], [1]).action == "permit"

    def test_steer_requires_slocs(self):
        with pytest.raises(schema.ValidationError):
            PolicyRule("steer", ())
        with pytest.raises(schema.ValidationError):
            PolicyRule("permit", ("x|c|1.1.1.1:1",))

    def test_identity_groups(self, handle):
        handle.put(schema.identity_key("u1", "d1"),
                   schema.to_json_bytes({"groups": [10, 20]}))
        assert schema.resolve_identity_groups(handle, "u1", "d1") == [10, 20]
        assert schema.resolve_identity_groups(handle, "u2", "d1") == [0]

    def test_fetch_group_rules(self, handle):
        handle.put(schema.group_rule_key(10, 20),
                   schema.to_json_bytes(PolicyRule("deny").to_doc()))
        handle.put(schema.group_rule_key(10, "*"),
                   schema.to_json_bytes(
                       PolicyRule("steer", ("F|c|1.1.1.1:1",)).to_doc()))
        rules = schema.fetch_group_rules(handle)
        assert rules[(10, 20)].action == "deny"
        assert rules[(10, "*")].action == "steer"


class TestLeaseClassing:
    def test_node_service_lease1_route_stats_lease2(self, handle, clock):
        lease1 = handle.grant_lease(seconds(60))
        lease2 = handle.grant_lease(seconds(600))
        rec = schema.register_node(handle, "linecard", "LC_A", 1, (0, 0), lease1)
        schema.announce_service(handle, rec, [make_sloc()], lease1)
        route = ServiceRoute(route_type=2, export_rt="1:1", rd="1:1",
                             mac="aa:bb:cc:dd:ee:ff", ip="1.2.3.4",
                             site_id=1, system_name="LC_A", policy_tag=0)
        schema.announce_route(handle, route, lease2)
        ls = LinkStateRecord(src="a|c|1.1.1.1:1", dst="b|c|2.2.2.2:2",
                             two_way_delay_us=1.0, jitter_us=0.0, loss=0.0,
                             utilization_rx=0.0, utilization_tx=0.0,
                             status="up", sampled_at=0)
        schema.report_linkstate(handle, ls, lease2)

        for key in ("/node/linecard/LC_A", "/service/linecard/LC_A"):
            assert handle.get(key).lease_id == lease1.lease_id
        assert handle.get(route.key()).lease_id == lease2.lease_id
        assert handle.get(ls.key()).lease_id == lease2.lease_id
