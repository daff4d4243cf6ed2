"""Simulator: clock ordering, link delivery math, NAT translation, determinism."""

import pytest

from ruta.netsim import (
    Datagram,
    Network,
    Trace,
    VirtualClock,
    millis,
    seconds,
)


def star(seed=0, **link_kw):
    """client -- hub -- server topology with addresses bound."""
    clock = VirtualClock()
    net = Network(clock, Trace(), seed=seed)
    for n in ("client", "hub", "server"):
        net.add_node(n)
    net.add_link("client", "hub", millis(10), **link_kw)
    net.add_link("hub", "server", millis(30))
    inbox = []
    net.bind("client", "10.0.0.1", 1000, lambda p: inbox.append(("client", clock.now, p)))
    net.bind("server", "10.0.0.2", 2000, lambda p: inbox.append(("server", clock.now, p)))
    return clock, net, inbox


class TestClock:
    def test_equal_times_run_in_schedule_order(self):
        clock = VirtualClock()
        order = []
        clock.call_at(100, lambda: order.append("a"))
        clock.call_at(100, lambda: order.append("b"))
        clock.call_at(50, lambda: order.append("c"))
        clock.run_until(200)
        assert order == ["c", "a", "b"]

    def test_run_until_quiescent(self):
        clock = VirtualClock()
        clock.call_at(10, lambda: clock.call_later(5, lambda: None, "nested"))
        trace = clock.run_until_quiescent()
        assert [t for t, _, _ in trace] == [10, 15]
        assert clock.now == 15

    def test_cancel(self):
        clock = VirtualClock()
        fired = []
        ev = clock.call_at(10, lambda: fired.append(1))
        ev.cancel()
        clock.run_until(20)
        assert fired == []

    def test_no_scheduling_in_past(self):
        clock = VirtualClock()
        clock.run_until(100)
        with pytest.raises(Exception):
            clock.call_at(50, lambda: None)

    def test_same_seed_same_trace(self):
        def run():
            clock, net, inbox = star(seed=7, loss=0.3)
            for i in range(100):
                clock.call_at(i * millis(1), lambda i=i: net.send(
                    "client", Datagram("10.0.0.1", 1000, "10.0.0.2", 2000, bytes([i]))))
            trace = clock.run_until_quiescent()
            return trace, [(who, t, p.payload) for who, t, p in inbox]

        assert run() == run()


class TestLinks:
    def test_exact_delay(self):
        clock, net, inbox = star()
        net.send("client", Datagram("10.0.0.1", 1000, "10.0.0.2", 2000, b"x"))
        clock.run_until_quiescent()
        # two hops: 10ms + 30ms
        assert inbox == [("server", millis(40), inbox[0][2])]

    def test_total_loss(self):
        clock, net, inbox = star(loss=1.0)
        for _ in range(20):
            net.send("client", Datagram("10.0.0.1", 1000, "10.0.0.2", 2000, b"x"))
        clock.run_until_quiescent()
        assert inbox == []
        link = net.link_between("client", "hub")
        assert link.counters()["client->hub"]["lost"] == 20

    def test_seeded_loss_reproducible(self):
        delivered = []
        for _ in range(2):
            clock, net, inbox = star(seed=5, loss=0.05)
            for i in range(10_000):
                clock.call_at(i * 1000, lambda i=i: net.send(
                    "client", Datagram("10.0.0.1", 1000, "10.0.0.2", 2000, b"y")))
            clock.run_until_quiescent()
            delivered.append(len(inbox))
        assert delivered[0] == delivered[1]
        assert 9_300 < delivered[0] < 9_700

    def test_link_down_counts_drop(self):
        clock, net, inbox = star()
        net.link_between("client", "hub").up = False
        net.send("client", Datagram("10.0.0.1", 1000, "10.0.0.2", 2000, b"x"))
        clock.run_until_quiescent()
        assert inbox == []
        assert net.link_between("client", "hub").counters()["client->hub"]["dropped"] == 1

    def test_conservation(self):
        clock, net, inbox = star(seed=3, loss=0.2)
        for i in range(500):
            clock.call_at(i * 1000, lambda: net.send(
                "client", Datagram("10.0.0.1", 1000, "10.0.0.2", 2000, b"z")))
        clock.run_until_quiescent()
        for link in net.links:
            for c in link.counters().values():
                assert c["sent"] == c["delivered"] + c["lost"] + c["dropped"]

    def test_serialization_delay(self):
        clock = VirtualClock()
        net = Network(clock, seed=0)
        net.add_node("a")
        net.add_node("b")
        net.add_link("a", "b", millis(1), bandwidth_bps=8_000_000)  # 1 byte/us
        got = []
        net.bind("b", "10.0.0.2", 1, lambda p: got.append(clock.now))
        net.send("a", Datagram("10.0.0.1", 1, "10.0.0.2", 1, bytes(972)))
        clock.run_until_quiescent()
        # size = 972 + 28 overhead = 1000 bytes -> 1ms serialization + 1ms delay
        assert got == [millis(2)]

    def test_asymmetric_delay(self):
        clock = VirtualClock()
        net = Network(clock, seed=0)
        net.add_node("a")
        net.add_node("b")
        net.add_link("a", "b", millis(10), millis(30))
        got = []
        net.bind("a", "10.0.0.1", 1, lambda p: got.append(("a", clock.now)))
        net.bind("b", "10.0.0.2", 1, lambda p: got.append(("b", clock.now)))
        net.send("a", Datagram("10.0.0.1", 1, "10.0.0.2", 1, b"req"))
        clock.run_until_quiescent()
        net.send("b", Datagram("10.0.0.2", 1, "10.0.0.1", 1, b"resp"))
        clock.run_until_quiescent()
        assert got == [("b", millis(10)), ("a", millis(40))]


class TestUnderlayRouting:
    def test_min_hop_then_delay_then_name(self):
        clock = VirtualClock()
        net = Network(clock, seed=0)
        for n in ("lca", "lcb", "sa", "sb"):
            net.add_node(n)
        net.add_link("lca", "sa", millis(3))
        net.add_link("lca", "sb", millis(2))
        net.add_link("lcb", "sa", millis(3))
        net.add_link("lcb", "sb", millis(2))
        got = []
        net.bind("lcb", "10.0.0.2", 1, lambda p: got.append(clock.now))
        net.bind("lca", "10.0.0.1", 1, lambda p: None)
        net.send("lca", Datagram("10.0.0.1", 1, "10.0.0.2", 1, b"x"))
        clock.run_until_quiescent()
        assert got == [millis(4)]  # via sb (cheaper), not sa


class TestNat:
    def build(self):
        clock = VirtualClock()
        net = Network(clock, seed=0)
        net.add_node("inside_host")
        net.add_nat("nat", "10.9.9.0/24", "198.51.100.7")
        net.add_node("outside")
        net.add_link("inside_host", "nat", millis(1))
        net.add_link("nat", "outside", millis(1))
        seen = []
        net.bind("outside", "203.0.113.1", 7000, lambda p: seen.append(p))
        net.bind("inside_host", "10.9.9.2", 6000, lambda p: seen.append(p))
        return clock, net, seen

    def test_outbound_mapping_port_allocation(self):
        clock, net, seen = self.build()
        net.send("inside_host", Datagram("10.9.9.2", 6000, "203.0.113.1", 7000, b"x"))
        clock.run_until_quiescent()
        assert seen[0].src_ip == "198.51.100.7"
        assert seen[0].src_port == 40000
        nat = net.nodes["nat"].nat
        assert nat.mapping_table() == {"10.9.9.2:6000": 40000}

    def test_mapping_reused_and_inverse(self):
        clock, net, seen = self.build()
        net.send("inside_host", Datagram("10.9.9.2", 6000, "203.0.113.1", 7000, b"a"))
        net.send("inside_host", Datagram("10.9.9.2", 6000, "203.0.113.1", 7000, b"b"))
        clock.run_until_quiescent()
        assert {p.src_port for p in seen} == {40000}
        seen.clear()
        net.send("outside", Datagram("203.0.113.1", 7000, "198.51.100.7", 40000, b"r"))
        clock.run_until_quiescent()
        assert seen[0].dst_ip == "10.9.9.2" and seen[0].dst_port == 6000

    def test_unmapped_inbound_drops(self):
        clock, net, seen = self.build()
        net.send("outside", Datagram("203.0.113.1", 7000, "198.51.100.7", 49999, b"r"))
        clock.run_until_quiescent()
        assert seen == []
        assert net.nodes["nat"].nat.dropped_no_mapping == 1

    def test_second_source_next_port(self):
        clock, net, seen = self.build()
        net.bind("inside_host", "10.9.9.3", 6000, lambda p: None)
        net.send("inside_host", Datagram("10.9.9.2", 6000, "203.0.113.1", 7000, b"x"))
        net.send("inside_host", Datagram("10.9.9.3", 6000, "203.0.113.1", 7000, b"y"))
        clock.run_until_quiescent()
        nat = net.nodes["nat"].nat
        assert nat.mapping_table() == {"10.9.9.2:6000": 40000, "10.9.9.3:6000": 40001}


class TestNodeLifecycle:
    def test_killed_node_drops(self):
        clock, net, inbox = star()
        net.kill("server")
        net.send("client", Datagram("10.0.0.1", 1000, "10.0.0.2", 2000, b"x"))
        clock.run_until_quiescent()
        assert inbox == []
        assert net.nodes["server"].drops.get("not_alive") == 1

    def test_no_listener(self):
        clock, net, inbox = star()
        net.send("client", Datagram("10.0.0.1", 1000, "10.0.0.2", 9999, b"x"))
        clock.run_until_quiescent()
        assert net.nodes["server"].drops.get("no_listener") == 1
