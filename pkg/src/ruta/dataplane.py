"""Node runtimes and the forwarding state machine.

Linecards encapsulate host frames after policy lookup and path selection,
execute End.DT2U / End.DT4 on arrival, and keep forwarding from cached state
when the store is unreachable.  Fabrics relay segments, filling a zeroed SRoU
source from the observed outer source on the first hop (NAT traversal) and
optionally admitting packets by a time-bucketed token carried in the 32-bit
flow id.  STUN nodes answer address-discovery OAM; LSDB nodes host a regional
link-state cache; the analytic role is a stats-watching counter sink.

Every runtime is a single-threaded event handler on the shared virtual
clock: packet arrivals, timers, and watch callbacks.  Runtimes never share
mutable state; they interact only through simulated packets and the store.

Host frames are the minimal tuple (src_mac, dst_mac, src_ip, dst_ip,
payload), serialized as 6+6+4+4 octets plus payload.
"""

from __future__ import annotations

import hashlib
import hmac
import ipaddress
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from . import schema, srou
from .kvstore import KvStore, StoreHandle, StoreUnavailable
from .netsim import Datagram, Network, Trace, VirtualClock, seconds
from .pathengine import (
    PATH_DIRECT,
    PATH_ENGINEERED,
    PATH_POLICY_STEER,
    ComputedPath,
    LinkStateSync,
    NoFeasiblePath,
    NoRoute,
    RouteSync,
    SlaPolicy,
    edge_cost_ms,
    evaluate_sla,
    shortest_constrained,
    to_segment_list,
)
from .prober import (
    EmptyWindow,
    MalformedOam,
    ProbeResponder,
    ProbeSession,
    StunExchange,
    full_mesh_targets,
)
from .schema import (
    LinkStateRecord,
    NodeRecord,
    PolicyRule,
    ServiceRoute,
    ServiceSloc,
    Sloc,
    from_json_bytes,
    parse_service_key,
    to_json_bytes,
)

ZERO_SOURCE = ("0.0.0.0", 0)

DEFAULT_LEASE1_S = 60
DEFAULT_LEASE2_S = 600


class DataplaneError(Exception):
    pass


class UnknownFunction(DataplaneError):
    pass


# ---------------------------------------------------------------------------
# host frames


@dataclass(frozen=True)
class HostFrame:
    src_mac: str
    dst_mac: str
    src_ip: str
    dst_ip: str
    payload: bytes


def encode_frame(frame: HostFrame) -> bytes:
    def mac(m: str) -> bytes:
        return bytes(int(p, 16) for p in m.split(":"))

    return (mac(frame.src_mac) + mac(frame.dst_mac)
            + ipaddress.IPv4Address(frame.src_ip).packed
            + ipaddress.IPv4Address(frame.dst_ip).packed
            + frame.payload)


def decode_frame(data: bytes) -> HostFrame:
    if len(data) < 20:
        raise DataplaneError(f"frame too short: {len(data)}")

    def mac(raw: bytes) -> str:
        return ":".join(f"{b:02x}" for b in raw)

    return HostFrame(
        src_mac=mac(data[0:6]),
        dst_mac=mac(data[6:12]),
        src_ip=str(ipaddress.IPv4Address(data[12:16])),
        dst_ip=str(ipaddress.IPv4Address(data[16:20])),
        payload=bytes(data[20:]),
    )


@dataclass(frozen=True)
class Postcard:
    node: str
    flow_id: int
    timestamp: int
    segments_left: int
    action: str


# ---------------------------------------------------------------------------
# token admission


class TokenAuthority:
    """Stateless time-bucketed admission tokens sized for the 32-bit flow id.

    token = first 4 octets of HMAC-SHA256(secret, client /24 bucket || time
    bucket); validation accepts the current bucket plus `window` previous
    ones.
    """

    def __init__(self, secret: str, bucket_s: int = 30, window: int = 1):
        self.secret = secret.encode()
        self.bucket_ns = seconds(bucket_s)
        self.window = window

    def _bucket(self, now_ns: int) -> int:
        return now_ns // self.bucket_ns

    def _compute(self, client_ip: str, bucket: int) -> int:
        net = ipaddress.ip_network(f"{client_ip}/24", strict=False)
        msg = f"{net.network_address}/{bucket}".encode()
        digest = hmac.new(self.secret, msg, hashlib.sha256).digest()
        return int.from_bytes(digest[:4], "big")

    def mint(self, client_public_ip: str, now_ns: int) -> int:
        return self._compute(client_public_ip, self._bucket(now_ns))

    def validate(self, flow_id: int, observed_ip: str, now_ns: int) -> bool:
        bucket = self._bucket(now_ns)
        for back in range(self.window + 1):
            if bucket - back < 0:
                break
            if flow_id == self._compute(observed_ip, bucket - back):
                return True
        return False


# ---------------------------------------------------------------------------
# native-socket demux


def native_demux(payload: bytes, observed_src: tuple[str, int]):
    """Classify one UDP payload: ("srou", header, inner) when the first octet
    is the all-zero magic, ("passthrough", payload) otherwise, ("drop",
    reason) for empty or malformed input."""
    if not payload:
        return ("drop", "empty")
    if payload[0] != srou.MAGIC:
        return ("passthrough", payload)
    msg, consumed = srou.decode_packet(payload)
    return ("srou", msg, payload[consumed:])


def stun_serve(req: srou.OamMessage, observed_src: tuple[str, int]) -> srou.OamMessage:
    """Answer a STUN request with the source address as this node saw it."""
    if req.oam_type != srou.OamType.STUN or req.oam_subtype != srou.STUN_REQUEST:
        raise MalformedOam("not a STUN request")
    return srou.OamMessage(
        oam_type=srou.OamType.STUN,
        oam_subtype=srou.STUN_RESPONSE,
        payload=srou.StunResponseData(observed_src[0], observed_src[1]),
        flow_id=req.flow_id,
        flow_id_type=req.flow_id_type,
    )


# ---------------------------------------------------------------------------
# shared runtime plumbing


@dataclass
class World:
    """Shared simulation context handed to every runtime."""

    clock: VirtualClock
    net: Network
    store: KvStore
    trace: Trace
    lsdb_nodes: dict[str, "LsdbRuntime"] = field(default_factory=dict)


@dataclass
class ProbeConfig:
    interval_ns: int = seconds(1)
    window: int = 100
    timeout_ns: int = seconds(2)
    down_after: int = 3
    report_interval_ns: int = seconds(10)
    whitelist: Optional[set[str]] = None


@dataclass
class TokenEdgeConfig:
    secret: str
    bucket_s: int = 30
    window: int = 1


class NodeRuntime:
    """Common onboarding, leases, OAM handling, and probe reporting."""

    role = "node"

    def __init__(self, world: World, name: str, slocs: list[Sloc], site_id: int = 0,
                 location: tuple[float, float] = (0.0, 0.0),
                 lease1_s: float = DEFAULT_LEASE1_S, lease2_s: float = DEFAULT_LEASE2_S,
                 probe: Optional[ProbeConfig] = None, use_stun: bool = False,
                 store_via: Optional[StoreHandle] = None):
        self.world = world
        self.clock = world.clock
        self.net = world.net
        self.trace = world.trace
        self.name = name
        self.site_id = site_id
        self.location = location
        self.slocs = [ServiceSloc(name, s) for s in slocs]
        self.handle = world.store.client(name, via=store_via)
        self.lease1_s = lease1_s
        self.lease2_s = lease2_s
        self.probe_cfg = probe or ProbeConfig()
        self.use_stun = use_stun
        self.record: Optional[NodeRecord] = None
        self.lease1 = None
        self.lease2 = None
        self.alive = True
        self.headless = False
        self.counts: dict[str, int] = {}
        self.postcards: list[Postcard] = []
        self.responder = ProbeResponder()
        self.sessions: dict[tuple[str, tuple[str, int]], ProbeSession] = {}
        self._timers = []
        self._watches = []
        self._stun_exchange = None
        self._linkstate_target = None  # (handle, lease) once an LSDB is chosen
        self._reported_state: dict[tuple[str, tuple[str, int]], str] = {}
        self._bytes_tx: dict[str, int] = {}
        self._bytes_rx: dict[str, int] = {}
        self._bytes_reported: dict[str, tuple[int, int]] = {}

    # -- bookkeeping --------------------------------------------------------

    def count(self, what: str, n: int = 1) -> None:
        self.counts[what] = self.counts.get(what, 0) + n

    def emit(self, event: str, **detail) -> None:
        self.trace.emit(self.clock.now, self.name, event, **detail)

    def every(self, interval_ns: int, fn: Callable[[], None], label: str,
              first_in: Optional[int] = None) -> None:
        def tick():
            if not self.alive:
                return
            fn()
            self._timers.append(self.clock.call_later(interval_ns, tick, label))

        self._timers.append(
            self.clock.call_later(first_in if first_in is not None else interval_ns,
                                  tick, label))

    def kill(self) -> None:
        self.alive = False
        for t in self._timers:
            t.cancel()
        for w in self._watches:
            w.cancel()
        self.net.kill(self.name)
        self.emit("killed")

    def watch(self, prefix: str, on_event, from_revision=None):
        w = self.handle.watch_prefix(prefix, from_revision=from_revision,
                                     on_event=on_event)
        self._watches.append(w)
        return w

    # -- onboarding ---------------------------------------------------------

    def start(self) -> None:
        for ss in self.slocs:
            self.net.bind(self.name, ss.sloc.private_ip, ss.sloc.private_port,
                          lambda pkt, ss=ss: self._on_datagram(ss, pkt))
        try:
            self.lease1 = self.handle.grant_lease(seconds(self.lease1_s))
            self.lease2 = self.handle.grant_lease(seconds(self.lease2_s))
            schema.register_node(self.handle, self.role, self.name, self.site_id,
                                 self.location, self.lease1, done=self._registered)
        except StoreUnavailable:
            self.headless = True
            self.emit("onboard_deferred")
            self._timers.append(self.clock.call_later(seconds(5), self.start,
                                                      "onboard-retry"))

    def _registered(self, record: NodeRecord) -> None:
        self.record = record
        self.emit("registered", system_label=record.system_label)
        if self.use_stun:
            self._discover_public()
        else:
            self._announce()

    def _discover_public(self) -> None:
        servers, _ = schema.hunt(self.handle, "stun")
        if not servers:
            self._announce()
            return
        _, slocs = servers[0]
        target = (slocs[0].public_ip, slocs[0].public_port)
        local = self.slocs[0]

        def send_request():
            msg = srou.OamMessage(srou.OamType.STUN, srou.STUN_REQUEST,
                                  srou.StunRequestData())
            self.send_from(local, target, srou.encode_oam(msg))

        def on_result(ip, port):
            updated = replace(local.sloc, public_ip=ip, public_port=port)
            self.slocs[0] = ServiceSloc(self.name, updated)
            self.emit("stun_resolved", public=f"{ip}:{port}")
            self._announce()

        def on_error(exc):
            self.emit("stun_failed", error=str(exc))
            self._announce()

        self._stun_exchange = StunExchange(self.clock, send_request, on_result, on_error)
        self._stun_exchange.start()

    def _announce(self) -> None:
        schema.announce_service(self.handle, self.record,
                                [ss.sloc for ss in self.slocs], self.lease1)
        self.emit("announced")
        keepalive_ns = seconds(min(self.lease1_s, self.lease2_s)) // 2
        self.every(keepalive_ns, self._keepalive, "keepalive")
        self.every(self.probe_cfg.report_interval_ns, self._report_linkstate, "report")
        self.role_start()

    def role_start(self) -> None:
        pass

    def _keepalive(self) -> None:
        try:
            self.handle.keepalive(self.lease1.lease_id)
            self.handle.keepalive(self.lease2.lease_id)
            self._mark_store(True)
        except StoreUnavailable:
            self._mark_store(False)
        if self._linkstate_target is not None:
            handle, lease = self._linkstate_target
            try:
                handle.keepalive(lease.lease_id)
            except StoreUnavailable:
                pass

    def _mark_store(self, ok: bool) -> None:
        if ok and self.headless:
            self.headless = False
            self.emit("headless_exit")
            self.on_store_recovered()
        elif not ok and not self.headless:
            self.headless = True
            self.emit("headless_enter")

    def on_store_recovered(self) -> None:
        pass

    # -- sending ------------------------------------------------------------

    def send_from(self, ss: ServiceSloc, dst: tuple[str, int], payload: bytes) -> None:
        pkt = Datagram(ss.sloc.private_ip, ss.sloc.private_port, dst[0], dst[1],
                       payload)
        self._bytes_tx[ss.short] = self._bytes_tx.get(ss.short, 0) + pkt.size
        self.net.send(self.name, pkt)

    # -- datagram dispatch ----------------------------------------------------

    def _on_datagram(self, ss: ServiceSloc, pkt: Datagram) -> None:
        if not self.alive:
            return
        self._bytes_rx[ss.short] = self._bytes_rx.get(ss.short, 0) + pkt.size
        try:
            msg, consumed = srou.decode_packet(pkt.payload)
        except srou.BadMagic:
            self.count("drop_bad_magic")
            return
        except srou.CodecError as exc:
            self.count("drop_malformed")
            self.emit("malformed", error=type(exc).__name__)
            return
        if isinstance(msg, srou.OamMessage):
            self.on_oam(ss, pkt, msg)
        else:
            self.on_data(ss, pkt, msg, pkt.payload[consumed:])

    def on_oam(self, ss: ServiceSloc, pkt: Datagram, msg: srou.OamMessage) -> None:
        if msg.oam_type == srou.OamType.LINKSTATE:
            if msg.oam_subtype == srou.LINKSTATE_REQUEST:
                resp = self.responder.on_probe_request(msg, self.clock.now)
                self.send_from(ss, (pkt.src_ip, pkt.src_port), srou.encode_oam(resp))
            else:
                session = self.sessions.get((ss.short, (pkt.src_ip, pkt.src_port)))
                if session is None:
                    self.count("probe_unmatched")
                    return
                out = session.on_response(msg, self.clock.now)
                if out is not None:
                    self.on_probe_outcome(session)
        elif msg.oam_type == srou.OamType.STUN:
            if msg.oam_subtype == srou.STUN_RESPONSE and self._stun_exchange:
                self._stun_exchange.on_response(msg)
            else:
                self.count("drop_oam_ignored")
        else:
            self.count("drop_oam_ignored")

    def on_data(self, ss: ServiceSloc, pkt: Datagram, hdr: srou.SRoUHeader,
                inner: bytes) -> None:
        self.count("drop_unexpected_data")

    # -- probing --------------------------------------------------------------

    def ensure_session(self, local: ServiceSloc, peer: ServiceSloc) -> None:
        key = (local.short, peer.public_addr)
        if key in self.sessions:
            return
        cfg = self.probe_cfg
        session = ProbeSession(local, peer, interval_ns=cfg.interval_ns,
                               window=cfg.window, timeout_ns=cfg.timeout_ns,
                               down_after=cfg.down_after)
        self.sessions[key] = session
        self.every(cfg.interval_ns, lambda: self._probe_tick(session),
                   f"probe:{peer.short}")

    def _probe_tick(self, session: ProbeSession) -> None:
        req = session.make_request(self.clock.now)
        seq = session.seq
        self.send_from(session.local, session.peer.public_addr, srou.encode_oam(req))

        def timeout():
            if session.on_timeout(seq):
                self.on_probe_outcome(session)

        self._timers.append(self.clock.call_later(session.timeout_ns, timeout,
                                                  "probe-timeout"))

    def sessions_to(self, system_name: str) -> list[ProbeSession]:
        return [s for s in self.sessions.values()
                if s.peer.system_name == system_name]

    def on_probe_outcome(self, session: ProbeSession) -> None:
        key = (session.local.short, session.peer.public_addr)
        state = session.status
        if self._reported_state.get(key) not in (None, state):
            self._report_session(session)  # up/down flip: push immediately
        elif key not in self._reported_state:
            self._report_session(session)  # first sample bootstraps the graph
        self._reported_state[key] = state

    def _linkstate_target_pair(self):
        """(handle, lease) of the nearest live LSDB cache, else the main store."""
        if self._linkstate_target is not None:
            return self._linkstate_target
        try:
            found, _ = schema.hunt(self.handle, "lsdb")
        except StoreUnavailable:
            return self.handle, self.lease2
        best = None
        for name, _ in found:
            lsdb = self.world.lsdb_nodes.get(name)
            if lsdb is None or not lsdb.alive:
                continue
            d = ((lsdb.location[0] - self.location[0]) ** 2
                 + (lsdb.location[1] - self.location[1]) ** 2)
            if best is None or (d, name) < best[:2]:
                best = (d, name, lsdb)
        if best is None:
            return self.handle, self.lease2
        cache_handle = best[2].cache.client(self.name)
        cache_lease = cache_handle.grant_lease(seconds(self.lease2_s))
        self._linkstate_target = (cache_handle, cache_lease)
        return self._linkstate_target

    def _report_session(self, session: ProbeSession,
                        byte_delta: tuple[int, int] = (0, 0)) -> None:
        try:
            rec = session.metrics(self.clock.now, bytes_rx=byte_delta[0],
                                  bytes_tx=byte_delta[1],
                                  interval_s=self.probe_cfg.report_interval_ns / 1e9)
        except EmptyWindow:
            return
        try:
            handle, lease = self._linkstate_target_pair()
            schema.report_linkstate(handle, rec, lease)
            self._mark_store(True)
        except StoreUnavailable:
            self._mark_store(False)

    def _report_linkstate(self) -> None:
        deltas = {}
        for short in {k[0] for k in self.sessions}:
            rx = self._bytes_rx.get(short, 0)
            tx = self._bytes_tx.get(short, 0)
            last_rx, last_tx = self._bytes_reported.get(short, (0, 0))
            deltas[short] = (rx - last_rx, tx - last_tx)
            self._bytes_reported[short] = (rx, tx)
        for key in sorted(self.sessions):
            session = self.sessions[key]
            self._report_session(session, deltas.get(key[0], (0, 0)))

    # -- segment relay (shared by fabric and linecard) -------------------------

    def relay(self, ss: ServiceSloc, pkt: Datagram, hdr: srou.SRoUHeader,
              inner: bytes) -> None:
        if (hdr.source_address, hdr.source_port) == ZERO_SOURCE:
            hdr = replace(hdr, source_address=pkt.src_ip, source_port=pkt.src_port)
            self.count("source_fill")
            self.emit("source_fill", filled=f"{pkt.src_ip}:{pkt.src_port}",
                      flow_id=hdr.flow_id)
        if hdr.segments_left == 0:
            self.count("drop_no_segments_left")
            return
        seg, hdr = srou.advance_segment(hdr)
        if isinstance(seg, srou.Waypoint):
            if hdr.t_bit:
                self.postcards.append(Postcard(self.name, hdr.flow_id,
                                               self.clock.now, hdr.segments_left,
                                               "relay"))
                self.emit("postcard", flow_id=hdr.flow_id, sl=hdr.segments_left)
            out = srou.encode_header(hdr) + inner
            self.send_from(ss, (seg.address, seg.port), out)
            self.count("relay")
            self.emit("relay", to=f"{seg.address}:{seg.port}", sl=hdr.segments_left,
                      flow_id=hdr.flow_id)
        else:
            self.execute_function(ss, pkt, hdr, seg, inner)

    def execute_function(self, ss: ServiceSloc, pkt: Datagram, hdr: srou.SRoUHeader,
                         seg: srou.Function, inner: bytes) -> None:
        self.count("drop_unknown_function")
        self.emit("unknown_function", code=seg.function)


# ---------------------------------------------------------------------------
# fabric


class FabricRuntime(NodeRuntime):
    role = "fabric"

    def __init__(self, *args, token_edge: Optional[TokenEdgeConfig] = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.token = (TokenAuthority(token_edge.secret, token_edge.bucket_s,
                                     token_edge.window)
                      if token_edge is not None else None)

    def role_start(self) -> None:
        # service watch keeps the fabric mesh current as peers onboard
        self.watch("/service/fabric/", self._on_fabric_service, from_revision=1)

    def _on_fabric_service(self, ev) -> None:
        if ev.kind != "put":
            return
        try:
            _, peer_name = parse_service_key(ev.entry.key)
            doc = from_json_bytes(ev.entry.value)
            slocs = [Sloc.from_doc(d) for d in doc["slocs"]]
        except Exception:
            return
        if peer_name == self.name:
            return
        wl = self.probe_cfg.whitelist
        if wl is not None and peer_name not in wl:
            return
        for local, peer in full_mesh_targets(self.slocs, [(peer_name, slocs)],
                                             self_name=self.name):
            self.ensure_session(local, peer)

    def on_data(self, ss, pkt, hdr, inner) -> None:
        if self.token is not None:
            if not self.token.validate(hdr.flow_id, pkt.src_ip, self.clock.now):
                self.count("token_reject")
                return
            self.count("token_admit")
        self.relay(ss, pkt, hdr, inner)


# ---------------------------------------------------------------------------
# linecard


@dataclass
class HostPort:
    """Access-port attachment: one host behind this linecard."""

    name: str
    mac: str
    ip: str
    vnid: Optional[int] = None
    vrf: Optional[int] = None
    identity: Optional[tuple[str, str]] = None  # (userid, device-id)
    deliver: Optional[Callable[[HostFrame], None]] = None


class LinecardRuntime(NodeRuntime):
    role = "linecard"

    def __init__(self, *args, imports_l2: Optional[dict[str, int]] = None,
                 imports_l3: Optional[dict[str, int]] = None,
                 l2_services: Optional[dict[int, tuple[str, str]]] = None,
                 l3_services: Optional[dict[int, tuple[str, str]]] = None,
                 sla: Optional[SlaPolicy] = None, refresh_ns: int = seconds(10),
                 **kwargs):
        super().__init__(*args, **kwargs)
        self.imports_l2 = imports_l2 or {}
        self.imports_l3 = imports_l3 or {}
        self.l2_services = l2_services or {}   # vnid -> (rt, rd)
        self.l3_services = l3_services or {}   # vrf  -> (rt, rd)
        self.sla = sla or SlaPolicy()
        self.refresh_ns = refresh_ns
        self.hosts: dict[str, HostPort] = {}
        self.l2_local: dict[tuple[int, str], HostPort] = {}
        self.l3_local: dict[int, dict[str, HostPort]] = {}
        self.announced: set[str] = set()
        self.route_sync = RouteSync(self.handle, self.imports_l2, self.imports_l3,
                                    on_delta=self._on_route_delta)
        self.ls_sync = LinkStateSync(self.handle, on_delta=self._on_ls_delta)
        self.service_dir: dict[str, list[ServiceSloc]] = {}
        self.short_index: dict[str, ServiceSloc] = {}
        self.policy_rules: dict = {}
        self.identity_cache: dict[str, list[int]] = {}
        self.path_cache: dict[str, tuple[ServiceSloc, ComputedPath]] = {}
        self._violation: dict[str, bool] = {}

    # -- wiring -----------------------------------------------------------

    def attach_host(self, host: HostPort) -> None:
        self.hosts[host.name] = host
        if host.vnid is not None:
            self.l2_local[(host.vnid, host.mac)] = host
        if host.vrf is not None:
            self.l3_local.setdefault(host.vrf, {})[host.ip] = host

    def role_start(self) -> None:
        self.route_sync.start()
        self.ls_sync.start()
        self.watch("/service/", self._on_service, from_revision=1)
        self.watch("/control/group/", self._on_policy, from_revision=1)
        self.watch("/identity/", self._on_identity, from_revision=1)
        for host in sorted(self.hosts.values(), key=lambda h: h.name):
            self._learn(host)
        self.every(self.refresh_ns, self._refresh, "path-refresh")

    def announce_static_route(self, route: ServiceRoute) -> None:
        schema.announce_route(self.handle, route, self.lease2)

    def _learn(self, host: HostPort) -> None:
        """Announce a type-2 route for a locally seen (mac, ip)."""
        if host.name in self.announced or host.vnid is None:
            return
        service = self.l2_services.get(host.vnid)
        if service is None:
            return
        rt, rd = service
        route = ServiceRoute(route_type=2, export_rt=rt, rd=rd, mac=host.mac,
                             ip=host.ip, site_id=self.site_id,
                             system_name=self.name,
                             policy_tag=self._host_groups(host)[0])
        try:
            schema.announce_route(self.handle, route, self.lease2)
            self.announced.add(host.name)
            self.emit("type2_announced", key=route.key())
        except StoreUnavailable:
            self._mark_store(False)

    def _host_groups(self, host: HostPort) -> list[int]:
        if host.identity is None:
            return [schema.DEFAULT_GROUP]
        key = schema.identity_key(*host.identity)
        return self.identity_cache.get(key, [schema.DEFAULT_GROUP])

    # -- watch handlers ------------------------------------------------------

    def _on_service(self, ev) -> None:
        try:
            role, name = parse_service_key(ev.entry.key)
        except Exception:
            return
        if ev.kind == "delete":
            for ss in self.service_dir.pop(name, []):
                self.short_index.pop(ss.short, None)
            return
        try:
            doc = from_json_bytes(ev.entry.value)
            slocs = [ServiceSloc(name, Sloc.from_doc(d)) for d in doc["slocs"]]
        except Exception:
            self.emit("service_parse_warning", key=ev.entry.key)
            return
        self.service_dir[name] = slocs
        for ss in slocs:
            self.short_index[ss.short] = ss
        if role == "fabric" and name != self.name:
            for local in self.slocs:
                for peer in slocs:
                    self.ensure_session(local, peer)
        self._probe_destinations()

    def _on_policy(self, ev) -> None:
        try:
            pair = schema.parse_group_rule_key(ev.entry.key)
        except Exception:
            return
        if ev.kind == "delete":
            self.policy_rules.pop(pair, None)
        else:
            try:
                self.policy_rules[pair] = PolicyRule.from_doc(
                    from_json_bytes(ev.entry.value))
            except Exception:
                return

    def _on_identity(self, ev) -> None:
        if ev.kind == "delete":
            self.identity_cache.pop(ev.entry.key, None)
            return
        try:
            doc = from_json_bytes(ev.entry.value)
            self.identity_cache[ev.entry.key] = [int(g) for g in doc["groups"]]
        except Exception:
            return

    def _on_route_delta(self, kind: str, route: ServiceRoute) -> None:
        self.path_cache.pop(route.key(), None)
        self._probe_destinations()

    def _on_ls_delta(self, src: str, dst: str) -> None:
        for key, (_, path) in list(self.path_cache.items()):
            shorts = {w.short for w in path.waypoints}
            if src in shorts or dst in shorts or path.source == PATH_ENGINEERED:
                self.path_cache.pop(key, None)

    def _refresh(self) -> None:
        self.path_cache.clear()
        if not self.route_sync.started:
            self.route_sync.start()
        if not self.ls_sync.started:
            self.ls_sync.start()

    def on_store_recovered(self) -> None:
        self.route_sync.table.headless = False

    def _probe_destinations(self) -> None:
        """Linecards actively probe each destination service node."""
        systems = {r.system_name for r in self.route_sync.table.type2.values()}
        for lpm in self.route_sync.table.type5.values():
            for table in lpm._by_mask.values():
                systems.update(r.system_name for r in table.values())
        for system in sorted(systems):
            if system == self.name:
                continue
            for peer in self.service_dir.get(system, []):
                for local in self.slocs:
                    self.ensure_session(local, peer)

    # -- SLA / path selection ---------------------------------------------

    def on_probe_outcome(self, session: ProbeSession) -> None:
        super().on_probe_outcome(session)
        system = session.peer.system_name
        try:
            rec = session.metrics(self.clock.now)
        except EmptyWindow:
            return
        violated = not evaluate_sla(rec, self.sla).ok
        if self._violation.get(system) != violated:
            self._violation[system] = violated
            self._report_session(session)
            for key, (_, path) in list(self.path_cache.items()):
                if path.waypoints and path.waypoints[-1].system_name == system:
                    self.path_cache.pop(key, None)
            self.emit("sla_change", system=system, violated=violated)

    def _best_direct(self, system: str):
        """Lowest-cost probed (local, peer) pair for a destination system."""
        best = None
        for session in self.sessions_to(system):
            try:
                rec = session.metrics(self.clock.now)
                cost = edge_cost_ms(rec, self.sla)
            except EmptyWindow:
                rec, cost = None, float("inf")
            key = (cost, session.local.short, session.peer.short)
            if best is None or key < best[0]:
                best = (key, session.local, session.peer, rec)
        if best is None:
            return None, None, None
        return best[1], best[2], best[3]

    def _path_for(self, route: ServiceRoute):
        key = route.key()
        cached = self.path_cache.get(key)
        if cached is not None:
            return cached
        system = route.system_name
        local, peer, rec = self._best_direct(system)
        if peer is None:
            slocs = self.service_dir.get(system)
            if not slocs:
                raise NoRoute(f"no announced service for {system}")
            local, peer = self.slocs[0], slocs[0]
        verdict = evaluate_sla(rec, self.sla)
        chosen = None
        if not verdict.ok:
            chosen = self._engineer(system)
            if chosen is None:
                self.count("sla_unmet_direct")
        if chosen is None:
            cost = edge_cost_ms(rec, self.sla) if rec is not None else 0.0
            chosen = (local, ComputedPath(waypoints=(peer,), cost_ms=cost,
                                          computed_at=self.clock.now,
                                          source=PATH_DIRECT, dst_key=key))
        self.path_cache[key] = chosen
        self.emit("path_selected", dst=key, source=chosen[1].source,
                  waypoints=[w.short for w in chosen[1].waypoints],
                  cost_ms=round(chosen[1].cost_ms, 3))
        return chosen

    def _engineer(self, system: str):
        dst_shorts = {ss.short for ss in self.service_dir.get(system, [])}
        src_shorts = {ss.short for ss in self.slocs}
        if not dst_shorts:
            return None
        edges = self.ls_sync.edges(self.sla)
        try:
            cost, node_path = shortest_constrained(edges, src_shorts, dst_shorts,
                                                   self.sla.max_segments)
        except NoFeasiblePath:
            return None
        waypoints = []
        for short in node_path[1:]:
            ss = self.short_index.get(short)
            if ss is None:
                return None
            waypoints.append(ss)
        local = next((ss for ss in self.slocs if ss.short == node_path[0]),
                     self.slocs[0])
        return (local, ComputedPath(waypoints=tuple(waypoints), cost_ms=cost,
                                    computed_at=self.clock.now,
                                    source=PATH_ENGINEERED))

    # -- encap / decap -------------------------------------------------------

    def inject_host_frame(self, host_name: str, frame: HostFrame,
                          t_bit: bool = False) -> Optional[bytes]:
        """Host frame entering the access port; returns the wire bytes sent
        (None when dropped or delivered locally)."""
        if not self.alive:
            return None
        host = self.hosts.get(host_name)
        if host is None:
            raise DataplaneError(f"unknown host {host_name}")
        self._learn(host)

        # same-segment delivery without encapsulation
        if host.vnid is not None:
            local = self.l2_local.get((host.vnid, frame.dst_mac))
            if local is not None:
                self._deliver_local(local, frame)
                return None

        try:
            route = self.route_sync.table.resolve(
                vnid=host.vnid, mac=frame.dst_mac, vrf=host.vrf, ip=frame.dst_ip)
        except NoRoute:
            self.count("drop_no_route")
            return None

        rule = schema.lookup_policy(self.policy_rules, self._host_groups(host),
                                    [route.policy_tag])
        if rule.action == schema.ACTION_DENY:
            self.count("drop_policy_deny")
            self.emit("policy_deny", dst=route.key())
            return None

        if rule.action == schema.ACTION_STEER:
            path_pair = self._steer_path(route, rule)
            if path_pair is None:
                self.count("drop_steer_unresolved")
                return None
        else:
            try:
                path_pair = self._path_for(route)
            except NoRoute:
                self.count("drop_no_service")
                return None
        local, path = path_pair

        if route.route_type == 2:
            function, args = srou.FUNC_END_DT2U, host.vnid
        else:
            function, args = srou.FUNC_END_DT4, host.vrf
        outer, segments, sl = to_segment_list(path, function, args,
                                              self.sla.max_segments)
        hdr = srou.SRoUHeader(
            protocol_id=srou.ProtocolId.IPV4,
            source_address=local.sloc.private_ip,
            source_port=local.sloc.private_port,
            segment_list=segments,
            segments_left=sl,
            flow_id=route.policy_tag & 0xFFFFFFFF,
            t_bit=t_bit,
        )
        wire = srou.encode_header(hdr) + encode_frame(frame)
        self.send_from(local, outer.public_addr, wire)
        self.count("encap")
        if t_bit:
            self.postcards.append(Postcard(self.name, hdr.flow_id, self.clock.now,
                                           sl, "encap"))
            self.emit("postcard", flow_id=hdr.flow_id, sl=sl)
        self.emit("encap", dst=route.key(), outer_src=f"{local.sloc.private_ip}:"
                  f"{local.sloc.private_port}",
                  outer_dst=f"{outer.public_addr[0]}:{outer.public_addr[1]}",
                  sl=sl, flow_id=hdr.flow_id, path=path.source,
                  function=srou.FUNCTION_NAMES.get(function, hex(function)),
                  args=args)
        return wire

    def _steer_path(self, route: ServiceRoute, rule: PolicyRule):
        waypoints = []
        for short in rule.slocs:
            ss = self.short_index.get(short)
            if ss is None:
                return None
            waypoints.append(ss)
        _, peer, _ = self._best_direct(route.system_name)
        if peer is None:
            slocs = self.service_dir.get(route.system_name)
            if not slocs:
                return None
            peer = slocs[0]
        waypoints.append(peer)
        path = ComputedPath(waypoints=tuple(waypoints), cost_ms=0.0,
                            computed_at=self.clock.now, source=PATH_POLICY_STEER,
                            dst_key=route.key())
        return (self.slocs[0], path)

    def _deliver_local(self, host: HostPort, frame: HostFrame) -> None:
        self.count("deliver_host")
        self.emit("deliver", host=host.name, dst_ip=frame.dst_ip)
        if host.deliver is not None:
            host.deliver(frame)

    def on_data(self, ss, pkt, hdr, inner) -> None:
        self.relay(ss, pkt, hdr, inner)

    def execute_function(self, ss, pkt, hdr, seg: srou.Function, inner) -> None:
        if hdr.t_bit:
            self.postcards.append(Postcard(self.name, hdr.flow_id, self.clock.now,
                                           hdr.segments_left, "function"))
        if seg.function == srou.FUNC_END_DT2U:
            self._end_dt2u(seg.args, inner)
        elif seg.function == srou.FUNC_END_DT4:
            self._end_dt4(seg.args, inner)
        else:
            self.count("drop_unknown_function")
            self.emit("unknown_function", code=seg.function)

    def _end_dt2u(self, vnid: int, inner: bytes) -> None:
        try:
            frame = decode_frame(inner)
        except DataplaneError:
            self.count("drop_malformed_frame")
            return
        host = self.l2_local.get((vnid, frame.dst_mac))
        if host is not None:
            self._deliver_local(host, frame)
            return
        try:
            route = self.route_sync.table.resolve_l2(vnid, frame.dst_mac)
        except NoRoute:
            self.count("drop_no_l2_entry")
            return
        self._reencap(route, frame, vnid=vnid)

    def _end_dt4(self, vrf: int, inner: bytes) -> None:
        try:
            frame = decode_frame(inner)
        except DataplaneError:
            self.count("drop_malformed_frame")
            return
        host = self.l3_local.get(vrf, {}).get(frame.dst_ip)
        if host is not None:
            self._deliver_local(host, frame)
            return
        try:
            route = self.route_sync.table.resolve_l3(vrf, frame.dst_ip)
        except NoRoute:
            self.count("drop_no_vrf_route")
            return
        self._reencap(route, frame, vrf=vrf)

    def _reencap(self, route: ServiceRoute, frame: HostFrame,
                 vnid: Optional[int] = None, vrf: Optional[int] = None) -> None:
        """Forward toward the remote owner of a non-local destination."""
        try:
            local, path = self._path_for(route)
        except NoRoute:
            self.count("drop_no_service")
            return
        function = srou.FUNC_END_DT2U if vnid is not None else srou.FUNC_END_DT4
        args = vnid if vnid is not None else vrf
        outer, segments, sl = to_segment_list(path, function, args,
                                              self.sla.max_segments)
        hdr = srou.SRoUHeader(
            protocol_id=srou.ProtocolId.IPV4,
            source_address=local.sloc.private_ip,
            source_port=local.sloc.private_port,
            segment_list=segments,
            segments_left=sl,
            flow_id=route.policy_tag & 0xFFFFFFFF,
        )
        self.send_from(local, outer.public_addr, srou.encode_header(hdr)
                       + encode_frame(frame))
        self.count("reencap")


# ---------------------------------------------------------------------------
# other roles


class StunRuntime(NodeRuntime):
    role = "stun"

    def on_oam(self, ss, pkt, msg) -> None:
        if msg.oam_type == srou.OamType.STUN and msg.oam_subtype == srou.STUN_REQUEST:
            resp = stun_serve(msg, (pkt.src_ip, pkt.src_port))
            self.count("stun_served")
            self.send_from(ss, (pkt.src_ip, pkt.src_port), srou.encode_oam(resp))
        else:
            super().on_oam(ss, pkt, msg)


class LsdbRuntime(NodeRuntime):
    """Regional link-state cache: an in-process store other nodes write to."""

    role = "lsdb"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cache = KvStore(self.clock)

    def linkstate_records(self):
        return self.cache.get_prefix(schema.LINKSTATE_PREFIX)


class AnalyticRuntime(NodeRuntime):
    """Stats consumer: counts what flows through the /stats prefix."""

    role = "analytic"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.stats_events = {"put": 0, "delete": 0}

    def role_start(self) -> None:
        self.watch("/stats/", self._on_stats, from_revision=1)

    def _on_stats(self, ev) -> None:
        self.stats_events[ev.kind] += 1


class EtcdRuntime(NodeRuntime):
    """Placeholder role: the store itself is in-process, so this node only
    registers and keeps its lease alive."""

    role = "etcd"


# ---------------------------------------------------------------------------
# native-socket application endpoints


@dataclass
class ReplyContext:
    outer: tuple[str, int]
    srou_source: tuple[str, int]
    flow_id: int
    raw: bool = False


class AppEndpoint:
    """Native-socket shim for an application: one UDP port carrying both
    SRoU-encapsulated and plain datagrams, demultiplexed by the magic byte.

    Servers record each SRoU packet's embedded source as the flow's reply
    address and answer with reversed segments; clients send Table-style
    packets with a zeroed source, relying on the first-hop fabric fill.
    """

    def __init__(self, world: World, name: str, ip: str, port: int,
                 on_app: Optional[Callable[[bytes, ReplyContext], None]] = None,
                 echo: bool = False,
                 reply_via: Optional[list[tuple[str, int]]] = None):
        self.world = world
        self.clock = world.clock
        self.net = world.net
        self.trace = world.trace
        self.name = name
        self.ip = ip
        self.port = port
        self.on_app = on_app
        self.echo = echo
        self.reply_via = reply_via or []
        self.received: list[bytes] = []
        self.counts: dict[str, int] = {}

    def count(self, what: str) -> None:
        self.counts[what] = self.counts.get(what, 0) + 1

    def start(self) -> None:
        self.net.bind(self.name, self.ip, self.port, self._on_datagram)

    def send_srou(self, payload: bytes, edge: tuple[str, int],
                  server: tuple[str, int], transit: tuple[str, int],
                  flow_id: int = 0) -> None:
        """Client-mode send: zeroed source, segment list [server, transit],
        outer destination the edge fabric."""
        hdr = srou.SRoUHeader(
            protocol_id=srou.ProtocolId.IPV4,
            source_address=ZERO_SOURCE[0],
            source_port=ZERO_SOURCE[1],
            segment_list=(srou.Waypoint(*server), srou.Waypoint(*transit)),
            segments_left=2,
            flow_id=flow_id,
        )
        self.net.send(self.name, Datagram(self.ip, self.port, edge[0], edge[1],
                                          srou.encode_header(hdr) + payload))
        self.count("tx_srou")

    def send_raw(self, payload: bytes, dst: tuple[str, int]) -> None:
        self.net.send(self.name, Datagram(self.ip, self.port, dst[0], dst[1], payload))
        self.count("tx_raw")

    def reply(self, ctx: ReplyContext, payload: bytes) -> None:
        if ctx.raw:
            self.send_raw(payload, ctx.outer)
            return
        visit = list(self.reply_via) + [ctx.srou_source]
        segments = tuple(srou.Waypoint(*addr) for addr in reversed(visit))
        hdr = srou.SRoUHeader(
            protocol_id=srou.ProtocolId.IPV4,
            source_address=self.ip,
            source_port=self.port,
            segment_list=segments,
            segments_left=len(segments),
            flow_id=ctx.flow_id,
        )
        self.net.send(self.name, Datagram(self.ip, self.port, ctx.outer[0],
                                          ctx.outer[1],
                                          srou.encode_header(hdr) + payload))
        self.count("tx_reply")

    def _on_datagram(self, pkt: Datagram) -> None:
        try:
            verdict = native_demux(pkt.payload, (pkt.src_ip, pkt.src_port))
        except srou.CodecError as exc:
            self.count("drop_malformed")
            self.trace.emit(self.clock.now, self.name, "malformed",
                            error=type(exc).__name__)
            return
        if verdict[0] == "drop":
            self.count("drop_empty")
            return
        if verdict[0] == "passthrough":
            payload = verdict[1]
            ctx = ReplyContext(outer=(pkt.src_ip, pkt.src_port),
                               srou_source=(pkt.src_ip, pkt.src_port),
                               flow_id=0, raw=True)
            self.count("rx_passthrough")
            self.trace.emit(self.clock.now, self.name, "passthrough",
                            nbytes=len(payload))
            self._deliver(payload, ctx)
            return
        msg, inner = verdict[1], verdict[2]
        if isinstance(msg, srou.OamMessage):
            self.count("drop_oam")
            return
        ctx = ReplyContext(outer=(pkt.src_ip, pkt.src_port),
                           srou_source=(msg.source_address, msg.source_port),
                           flow_id=msg.flow_id)
        self.count("rx_srou")
        self.trace.emit(self.clock.now, self.name, "app_rx",
                        source=f"{msg.source_address}:{msg.source_port}",
                        nbytes=len(inner))
        self._deliver(inner, ctx)

    def _deliver(self, payload: bytes, ctx: ReplyContext) -> None:
        self.received.append(payload)
        if self.on_app is not None:
            self.on_app(payload, ctx)
        if self.echo:
            self.reply(ctx, payload)
