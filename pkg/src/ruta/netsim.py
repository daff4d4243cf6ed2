"""Deterministic discrete-event network: virtual clock, lossy links, NAT boxes.

Everything runs on a single event loop ordered by (time, sequence).  All
randomness (loss, jitter) comes from per-link PRNGs derived from the run seed,
so a (topology, seed) pair fully determines every packet's fate.

Underlay forwarding between attachment points is hop-count shortest path
(ties broken by total configured delay, then by node-name sequence), frozen
when the topology is built.  Datagrams crossing a NAT node are translated;
nodes only see datagrams addressed to one of their bound (ip, port) sockets.
"""

from __future__ import annotations

import heapq
import ipaddress
import json
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_SEC = 1_000_000_000

# IPv4 + UDP overhead added to payload length for serialization
UDP_OVERHEAD_BYTES = 28

NAT_PORT_BASE = 40000


def seconds(x: float) -> int:
    """Seconds to integer nanoseconds."""
    return int(round(x * NS_PER_SEC))


def millis(x: float) -> int:
    return int(round(x * NS_PER_MS))


class SimError(Exception):
    pass


class LinkDown(SimError):
    pass


class NoMapping(SimError):
    pass


@dataclass
class ScheduledEvent:
    time: int
    seq: int
    fn: Callable[[], None]
    label: str = ""
    canceled: bool = False

    def cancel(self) -> None:
        self.canceled = True


class VirtualClock:
    """Event queue with 64-bit nanosecond timestamps.

    Events at equal times run in scheduling order; time never decreases.
    """

    def __init__(self, start: int = 0):
        self.now = start
        self._seq = 0
        self._heap: list[tuple[int, int, ScheduledEvent]] = []

    def call_at(self, at: int, fn: Callable[[], None], label: str = "") -> ScheduledEvent:
        if at < self.now:
            raise SimError(f"cannot schedule at {at} before now {self.now}")
        ev = ScheduledEvent(at, self._seq, fn, label)
        self._seq += 1
        heapq.heappush(self._heap, (at, ev.seq, ev))
        return ev

    def call_later(self, delay: int, fn: Callable[[], None], label: str = "") -> ScheduledEvent:
        return self.call_at(self.now + delay, fn, label)

    def _pop_due(self, limit: Optional[int]) -> Optional[ScheduledEvent]:
        while self._heap:
            at, _, ev = self._heap[0]
            if limit is not None and at > limit:
                return None
            heapq.heappop(self._heap)
            if not ev.canceled:
                return ev
        return None

    def run_until(self, until: int) -> list[tuple[int, int, str]]:
        """Execute every event with time <= until; returns the executed trace."""
        executed = []
        while True:
            ev = self._pop_due(until)
            if ev is None:
                break
            self.now = max(self.now, ev.time)
            executed.append((ev.time, ev.seq, ev.label))
            ev.fn()
        self.now = max(self.now, until)
        return executed

    def run_until_quiescent(self, max_events: int = 10_000_000) -> list[tuple[int, int, str]]:
        executed = []
        while True:
            ev = self._pop_due(None)
            if ev is None:
                break
            if len(executed) >= max_events:
                raise SimError(f"exceeded {max_events} events; runaway simulation?")
            self.now = max(self.now, ev.time)
            executed.append((ev.time, ev.seq, ev.label))
            ev.fn()
        return executed

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.canceled)


class Trace:
    """Append-only event log; rendered as line-delimited JSON records."""

    def __init__(self):
        self.records: list[dict] = []

    def emit(self, time: int, node: str, event: str, **detail) -> None:
        self.records.append({"time": time, "node": node, "event": event, "detail": detail})

    def select(self, event: str, node: Optional[str] = None) -> list[dict]:
        return [
            r
            for r in self.records
            if r["event"] == event and (node is None or r["node"] == node)
        ]

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records) + "\n"


@dataclass(frozen=True)
class Datagram:
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    payload: bytes

    @property
    def size(self) -> int:
        return UDP_OVERHEAD_BYTES + len(self.payload)


@dataclass
class _DirState:
    sent: int = 0
    delivered: int = 0
    lost: int = 0
    dropped: int = 0
    busy_until: int = 0
    queued_bytes: int = 0


class SimLink:
    """Point-to-point link with per-direction delay, jitter, loss, bandwidth.

    Bandwidth is serialization delay only unless queue_limit_bytes is set, in
    which case a per-direction FIFO with a byte cap is modeled and overflow
    packets are counted as dropped.
    """

    def __init__(self, a: str, b: str, delay_ab: int, delay_ba: int, jitter: int = 0,
                 loss: float = 0.0, loss_ab: Optional[float] = None,
                 loss_ba: Optional[float] = None, bandwidth_bps: Optional[float] = None,
                 queue_limit_bytes: Optional[int] = None, rng: Optional[random.Random] = None):
        self.a = a
        self.b = b
        self.delay_ab = delay_ab
        self.delay_ba = delay_ba
        self.jitter = jitter
        self.loss_ab = loss_ab if loss_ab is not None else loss
        self.loss_ba = loss_ba if loss_ba is not None else loss
        self.bandwidth_bps = bandwidth_bps
        self.queue_limit_bytes = queue_limit_bytes
        self.up = True
        self.rng = rng or random.Random(0)
        self.dirs = {(a, b): _DirState(), (b, a): _DirState()}

    def other(self, name: str) -> str:
        return self.b if name == self.a else self.a

    def delay(self, src: str) -> int:
        return self.delay_ab if src == self.a else self.delay_ba

    def loss(self, src: str) -> float:
        return self.loss_ab if src == self.a else self.loss_ba

    def set_loss(self, value: float) -> None:
        self.loss_ab = value
        self.loss_ba = value

    def counters(self) -> dict:
        out = {}
        for (s, d), st in self.dirs.items():
            out[f"{s}->{d}"] = {
                "sent": st.sent, "delivered": st.delivered,
                "lost": st.lost, "dropped": st.dropped,
            }
        return out


@dataclass
class _PortMapping:
    inside_ip: str
    inside_port: int
    public_port: int
    last_used: int


class SimNat:
    """Endpoint-independent (full cone) NAT.

    Outbound packets from the inside prefix get (public_ip, mapped port);
    the same inside source always reuses its mapping.  Inbound packets to an
    unmapped public port are dropped.  Public ports are allocated lowest-free
    from NAT_PORT_BASE upward.
    """

    def __init__(self, name: str, inside_cidr: str, public_ip: str,
                 idle_timeout: Optional[int] = None):
        self.name = name
        self.inside_net = ipaddress.ip_network(inside_cidr)
        self.public_ip = public_ip
        self.idle_timeout = idle_timeout
        self.by_inside: dict[tuple[str, int], _PortMapping] = {}
        self.by_port: dict[int, _PortMapping] = {}
        self.translated_out = 0
        self.translated_in = 0
        self.dropped_no_mapping = 0

    def _is_inside(self, ip: str) -> bool:
        return ipaddress.ip_address(ip) in self.inside_net

    def _expired(self, m: _PortMapping, now: int) -> bool:
        return self.idle_timeout is not None and now - m.last_used > self.idle_timeout

    def _allocate(self, inside_ip: str, inside_port: int, now: int) -> _PortMapping:
        port = NAT_PORT_BASE
        while port in self.by_port:
            port += 1
        m = _PortMapping(inside_ip, inside_port, port, now)
        self.by_inside[(inside_ip, inside_port)] = m
        self.by_port[port] = m
        return m

    def translate_out(self, pkt: Datagram, now: int) -> Datagram:
        key = (pkt.src_ip, pkt.src_port)
        m = self.by_inside.get(key)
        if m is not None and self._expired(m, now):
            del self.by_inside[key]
            del self.by_port[m.public_port]
            m = None
        if m is None:
            m = self._allocate(pkt.src_ip, pkt.src_port, now)
        m.last_used = now
        self.translated_out += 1
        return replace(pkt, src_ip=self.public_ip, src_port=m.public_port)

    def translate_in(self, pkt: Datagram, now: int) -> Optional[Datagram]:
        m = self.by_port.get(pkt.dst_port)
        if m is None or self._expired(m, now):
            self.dropped_no_mapping += 1
            return None
        m.last_used = now
        self.translated_in += 1
        return replace(pkt, dst_ip=m.inside_ip, dst_port=m.inside_port)

    def mapping_table(self) -> dict:
        return {
            f"{m.inside_ip}:{m.inside_port}": m.public_port
            for m in sorted(self.by_inside.values(), key=lambda m: m.public_port)
        }


class SimNode:
    """Attachment point: owns addresses, UDP bindings, and counters."""

    def __init__(self, name: str):
        self.name = name
        self.addrs: set[str] = set()
        self.bindings: dict[tuple[str, int], Callable[[Datagram], None]] = {}
        self.alive = True
        self.nat: Optional[SimNat] = None
        self.tx = 0
        self.rx = 0
        self.drops: dict[str, int] = {}

    def drop(self, reason: str) -> None:
        self.drops[reason] = self.drops.get(reason, 0) + 1

    def counters(self) -> dict:
        return {"tx": self.tx, "rx": self.rx, "drops": dict(sorted(self.drops.items()))}


class Network:
    """Topology of nodes and links; routes and delivers datagrams."""

    def __init__(self, clock: VirtualClock, trace: Optional[Trace] = None, seed: int = 0):
        self.clock = clock
        self.trace = trace or Trace()
        self.seed = seed
        self.nodes: dict[str, SimNode] = {}
        self.links: list[SimLink] = []
        self._adj: dict[str, list[SimLink]] = {}
        self._owner: dict[str, str] = {}
        self._routes: dict[str, dict[str, str]] = {}

    def add_node(self, name: str) -> SimNode:
        if name in self.nodes:
            raise SimError(f"duplicate node {name}")
        node = SimNode(name)
        self.nodes[name] = node
        self._adj[name] = []
        return node

    def add_nat(self, name: str, inside_cidr: str, public_ip: str,
                idle_timeout: Optional[int] = None) -> SimNode:
        node = self.add_node(name)
        node.nat = SimNat(name, inside_cidr, public_ip, idle_timeout)
        self.add_address(name, public_ip)
        return node

    def add_address(self, name: str, ip: str) -> None:
        if ip in self._owner and self._owner[ip] != name:
            raise SimError(f"address {ip} already owned by {self._owner[ip]}")
        self.nodes[name].addrs.add(ip)
        self._owner[ip] = name

    def add_link(self, a: str, b: str, delay_ab: int, delay_ba: Optional[int] = None,
                 jitter: int = 0, loss: float = 0.0, loss_ab: Optional[float] = None,
                 loss_ba: Optional[float] = None, bandwidth_bps: Optional[float] = None,
                 queue_limit_bytes: Optional[int] = None) -> SimLink:
        if a not in self.nodes or b not in self.nodes:
            raise SimError(f"link endpoints must exist: {a}, {b}")
        rng = random.Random(f"{self.seed}/link/{a}|{b}")
        link = SimLink(a, b, delay_ab, delay_ba if delay_ba is not None else delay_ab,
                       jitter, loss, loss_ab, loss_ba, bandwidth_bps,
                       queue_limit_bytes, rng)
        self.links.append(link)
        self._adj[a].append(link)
        self._adj[b].append(link)
        self._routes.clear()
        return link

    def link_between(self, a: str, b: str) -> Optional[SimLink]:
        for link in self._adj.get(a, []):
            if link.other(a) == b:
                return link
        return None

    def bind(self, name: str, ip: str, port: int, handler: Callable[[Datagram], None]) -> None:
        self.add_address(name, ip)
        self.nodes[name].bindings[(ip, port)] = handler

    def owner_of(self, ip: str) -> Optional[str]:
        return self._owner.get(ip)

    # -- underlay routing -------------------------------------------------

    def _routes_from(self, src: str) -> dict[str, str]:
        """Next-hop table: min (hop count, path delay, node-name path)."""
        if src in self._routes:
            return self._routes[src]
        best: dict[str, tuple[int, int, tuple[str, ...]]] = {src: (0, 0, (src,))}
        frontier = [(0, 0, (src,), src)]
        while frontier:
            hops, delay, path, at = heapq.heappop(frontier)
            if best.get(at) != (hops, delay, path):
                continue
            for link in self._adj[at]:
                nxt = link.other(at)
                cand = (hops + 1, delay + link.delay(at), path + (nxt,))
                if nxt not in best or cand < best[nxt]:
                    best[nxt] = cand
                    heapq.heappush(frontier, cand + (nxt,))
        table = {}
        for dst, (hops, _, path) in best.items():
            if hops > 0:
                table[dst] = path[1]
        self._routes[src] = table
        return table

    # -- datagram movement ------------------------------------------------

    def send(self, from_node: str, pkt: Datagram) -> None:
        node = self.nodes[from_node]
        if not node.alive:
            node.drop("not_alive")
            return
        node.tx += 1
        self._forward(from_node, pkt, arriving=False)

    def _forward(self, at_name: str, pkt: Datagram, arriving: bool) -> None:
        node = self.nodes[at_name]
        if arriving and not node.alive:
            node.drop("not_alive")
            return
        if node.nat is not None and arriving:
            pkt2 = self._nat_apply(node.nat, pkt)
            if pkt2 is None:
                node.drop("no_mapping")
                return
            pkt = pkt2
        owner = self.owner_of(pkt.dst_ip)
        if owner is None:
            node.drop("no_route")
            return
        if owner == at_name and node.nat is None:
            self._dispatch(node, pkt)
            return
        if owner == at_name and node.nat is not None:
            # NAT public address with no mapping already dropped above
            self._dispatch(node, pkt)
            return
        nxt = self._routes_from(at_name).get(owner)
        if nxt is None:
            node.drop("no_route")
            return
        link = self.link_between(at_name, nxt)
        self._transmit(link, at_name, pkt)

    def _nat_apply(self, nat: SimNat, pkt: Datagram) -> Optional[Datagram]:
        if pkt.dst_ip == nat.public_ip:
            return nat.translate_in(pkt, self.clock.now)
        if nat._is_inside(pkt.src_ip):
            return nat.translate_out(pkt, self.clock.now)
        return pkt

    def _dispatch(self, node: SimNode, pkt: Datagram) -> None:
        handler = node.bindings.get((pkt.dst_ip, pkt.dst_port))
        if handler is None:
            node.drop("no_listener")
            return
        node.rx += 1
        handler(pkt)

    def _transmit(self, link: SimLink, from_name: str, pkt: Datagram) -> None:
        st = link.dirs[(from_name, link.other(from_name))]
        st.sent += 1
        if not link.up:
            st.dropped += 1
            self.nodes[from_name].drop("link_down")
            return
        if link.rng.random() < link.loss(from_name):
            st.lost += 1
            return
        now = self.clock.now
        ser = 0
        if link.bandwidth_bps:
            ser = int(round(pkt.size * 8 * NS_PER_SEC / link.bandwidth_bps))
        if link.queue_limit_bytes is not None:
            if st.queued_bytes + pkt.size > link.queue_limit_bytes:
                st.dropped += 1
                self.nodes[from_name].drop("queue_full")
                return
            st.queued_bytes += pkt.size
            start = max(now, st.busy_until)
            st.busy_until = start + ser
            depart = st.busy_until
        else:
            depart = now + ser
        jit = 0
        if link.jitter:
            jit = max(0, int(round(link.rng.gauss(0.0, link.jitter))))
        arrival = depart + link.delay(from_name) + jit
        to_name = link.other(from_name)

        def deliver():
            if link.queue_limit_bytes is not None:
                st.queued_bytes -= pkt.size
            st.delivered += 1
            self._forward(to_name, pkt, arriving=True)

        self.clock.call_at(arrival, deliver, label=f"link:{from_name}->{to_name}")

    def kill(self, name: str) -> None:
        self.nodes[name].alive = False

    def counters(self) -> dict:
        out = {
            "nodes": {n: node.counters() for n, node in sorted(self.nodes.items())},
            "links": {f"{l.a}--{l.b}": l.counters() for l in self.links},
            "nats": {
                n.name: {
                    "mappings": n.nat.mapping_table(),
                    "translated_out": n.nat.translated_out,
                    "translated_in": n.nat.translated_in,
                    "dropped_no_mapping": n.nat.dropped_no_mapping,
                }
                for n in self.nodes.values()
                if n.nat is not None
            },
        }
        return out
