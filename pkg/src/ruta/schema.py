"""Control-plane schema: every key path and value document, plus the
registration, announcement, hunting, and policy-lookup procedures.

Key grammar:

    /node/<role>/<systemName>                  node registration
    /service/<role>/<systemName>               service locator announcement
    /route/2/<RT>/<RD>/<MAC>/<IP>              EVPN type-2 host route
    /route/5/<RT>/<RD>/<IPPrefix>/<Mask>       EVPN type-5 prefix route
    /stats/linkstate/<SLoC_src - SLoC_dst>     probe results
    /identity/<userid>/<device-id>             endpoint group tags
    /control/group/<srcGroup>/<dstGroup>       group policy rule
    /control/RT/2/<sMAC>/<sIP>/<dMAC>/<dIP>    route-control rule (L2)
    /control/RT/5/<sPfx>/<sMask>/<dPfx>/<dMask> route-control rule (L3)

Values are canonical JSON documents (UTF-8, sorted keys); see docs/schema.md
for one example per type.  /node and /service keys are written under the
node-keepalive lease (class 1), /route and /stats under the slower route
lease (class 2).
"""

from __future__ import annotations

import ipaddress
import json
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

from .kvstore import Lease, StoreHandle

ROLES = ("etcd", "fabric", "linecard", "stun", "analytic", "lsdb")

LABEL_LOCK = "system-label"
LABEL_BITS = 24

ACTION_PERMIT = "permit"
ACTION_DENY = "deny"
ACTION_STEER = "steer"
ACTIONS = (ACTION_PERMIT, ACTION_DENY, ACTION_STEER)

STATUS_UP = "up"
STATUS_DOWN = "down"

_MAC_RE = re.compile(r"^[0-9a-f]{2}(:[0-9a-f]{2}){5}$")
_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")


class SchemaError(Exception):
    pass


class ValidationError(SchemaError):
    pass


class MalformedRoute(SchemaError):
    pass


class DuplicateSystemName(SchemaError):
    pass


class LabelSpaceExhausted(SchemaError):
    pass


class NotRegistered(SchemaError):
    pass


def to_json_bytes(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def from_json_bytes(raw: bytes):
    return json.loads(raw.decode("utf-8"))


def _check_name(name: str, what: str) -> None:
    if not name or not _NAME_RE.match(name):
        raise ValidationError(f"{what} {name!r} must match {_NAME_RE.pattern}")


def _check_ipv4(ip: str, what: str) -> None:
    try:
        ipaddress.IPv4Address(ip)
    except ValueError as exc:
        raise ValidationError(f"{what} {ip!r}: {exc}") from None


def normalize_mac(mac: str) -> str:
    mac = mac.lower()
    if not _MAC_RE.match(mac):
        raise ValidationError(f"bad MAC {mac!r}")
    return mac


# ---------------------------------------------------------------------------
# node records


@dataclass(frozen=True)
class NodeRecord:
    role: str
    system_name: str
    site_id: int
    location: tuple[float, float]  # (lat, lon) degrees
    system_label: int

    def key(self) -> str:
        return node_key(self.role, self.system_name)

    def to_doc(self) -> dict:
        return {
            "site_id": self.site_id,
            "location": {"lat": self.location[0], "lon": self.location[1]},
            "system_label": self.system_label,
        }

    @classmethod
    def from_doc(cls, role: str, system_name: str, doc: dict) -> "NodeRecord":
        return cls(role, system_name, int(doc["site_id"]),
                   (float(doc["location"]["lat"]), float(doc["location"]["lon"])),
                   int(doc["system_label"]))


def node_key(role: str, system_name: str) -> str:
    if role not in ROLES:
        raise ValidationError(f"unknown role {role!r}")
    _check_name(system_name, "system name")
    return f"/node/{role}/{system_name}"


def parse_node_key(key: str) -> tuple[str, str]:
    parts = key.split("/")
    if len(parts) != 4 or parts[0] or parts[1] != "node" or parts[2] not in ROLES:
        raise ValidationError(f"bad node key {key!r}")
    return parts[2], parts[3]


# ---------------------------------------------------------------------------
# service locators


@dataclass(frozen=True)
class Sloc:
    """One service interface: color tag, private/public endpoint, bandwidths."""

    color: str
    private_ip: str
    private_port: int
    public_ip: str
    public_port: int
    interface_name: Optional[str] = None
    rx_bw: float = 0.0
    tx_bw: float = 0.0

    def __post_init__(self):
        _check_name(self.color, "color")
        _check_ipv4(self.private_ip, "private ip")
        _check_ipv4(self.public_ip, "public ip")
        for port, what in ((self.private_port, "private"), (self.public_port, "public")):
            if not 1 <= port <= 65535:
                raise ValidationError(f"{what} port {port} out of 1..65535")

    def short(self, system_name: str) -> str:
        return sloc_short(system_name, self)

    def to_doc(self) -> dict:
        return {
            "color": self.color,
            "private_ip": self.private_ip,
            "private_port": self.private_port,
            "public_ip": self.public_ip,
            "public_port": self.public_port,
            "interface_name": self.interface_name,
            "rx_bw": self.rx_bw,
            "tx_bw": self.tx_bw,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Sloc":
        return cls(
            color=doc["color"],
            private_ip=doc["private_ip"],
            private_port=int(doc["private_port"]),
            public_ip=doc["public_ip"],
            public_port=int(doc["public_port"]),
            interface_name=doc.get("interface_name"),
            rx_bw=float(doc.get("rx_bw", 0.0)),
            tx_bw=float(doc.get("tx_bw", 0.0)),
        )


def sloc_short(system_name: str, sloc: Sloc) -> str:
    """Canonical shortened form: <systemName>|<color>|<privateIP:port>."""
    return f"{system_name}|{sloc.color}|{sloc.private_ip}:{sloc.private_port}"


@dataclass(frozen=True)
class ServiceSloc:
    """A SLoC together with the system name that announced it."""

    system_name: str
    sloc: Sloc

    @property
    def short(self) -> str:
        return sloc_short(self.system_name, self.sloc)

    @property
    def addr(self) -> tuple[str, int]:
        return self.sloc.private_ip, self.sloc.private_port

    @property
    def public_addr(self) -> tuple[str, int]:
        return self.sloc.public_ip, self.sloc.public_port


def service_key(role: str, system_name: str) -> str:
    if role not in ROLES:
        raise ValidationError(f"unknown role {role!r}")
    _check_name(system_name, "system name")
    return f"/service/{role}/{system_name}"


def parse_service_key(key: str) -> tuple[str, str]:
    parts = key.split("/")
    if len(parts) != 4 or parts[0] or parts[1] != "service" or parts[2] not in ROLES:
        raise ValidationError(f"bad service key {key!r}")
    return parts[2], parts[3]


# ---------------------------------------------------------------------------
# EVPN service routes


@dataclass(frozen=True)
class ServiceRoute:
    """Type-2 (MAC+IP) or type-5 (prefix) route keyed by RT and RD.

    The value carries the three mandatory fields plus an opaque extension
    list for future TLV-style additions.
    """

    route_type: int  # 2 | 5
    export_rt: str
    rd: str
    site_id: int
    system_name: str
    policy_tag: int
    mac: Optional[str] = None
    ip: Optional[str] = None
    prefix: Optional[str] = None
    mask: Optional[int] = None
    optional_tlvs: tuple = ()

    def __post_init__(self):
        if self.route_type == 2:
            if self.mac is None or self.ip is None:
                raise MalformedRoute("type-2 route needs mac and ip")
            object.__setattr__(self, "mac", normalize_mac(self.mac))
            _check_ipv4(self.ip, "route ip")
        elif self.route_type == 5:
            if self.prefix is None or self.mask is None:
                raise MalformedRoute("type-5 route needs prefix and mask")
            if not 0 <= self.mask <= 32:
                raise MalformedRoute(f"mask {self.mask} out of 0..32")
            _check_ipv4(self.prefix, "route prefix")
            try:
                ipaddress.ip_network(f"{self.prefix}/{self.mask}")
            except ValueError as exc:
                raise MalformedRoute(str(exc)) from None
        else:
            raise MalformedRoute(f"route type {self.route_type} unsupported")
        for part in (self.export_rt, self.rd):
            if not part or "/" in part:
                raise MalformedRoute(f"bad RT/RD component {part!r}")

    def key(self) -> str:
        if self.route_type == 2:
            return f"/route/2/{self.export_rt}/{self.rd}/{self.mac}/{self.ip}"
        return f"/route/5/{self.export_rt}/{self.rd}/{self.prefix}/{self.mask}"

    def to_doc(self) -> dict:
        return {
            "site_id": self.site_id,
            "system_name": self.system_name,
            "policy_tag": self.policy_tag,
            "optional_tlvs": list(self.optional_tlvs),
        }


def route_prefix(route_type: int, export_rt: str) -> str:
    """Watch/fetch prefix implementing RT import."""
    return f"/route/{route_type}/{export_rt}/"


def parse_route_key(key: str, doc: dict) -> ServiceRoute:
    parts = key.split("/")
    if len(parts) != 7 or parts[0] or parts[1] != "route":
        raise MalformedRoute(f"bad route key {key!r}")
    rtype = parts[2]
    common = dict(
        export_rt=parts[3],
        rd=parts[4],
        site_id=int(doc["site_id"]),
        system_name=doc["system_name"],
        policy_tag=int(doc["policy_tag"]),
        optional_tlvs=tuple(doc.get("optional_tlvs", ())),
    )
    if rtype == "2":
        return ServiceRoute(route_type=2, mac=parts[5], ip=parts[6], **common)
    if rtype == "5":
        return ServiceRoute(route_type=5, prefix=parts[5], mask=int(parts[6]), **common)
    raise MalformedRoute(f"route type {rtype!r} unsupported")


# ---------------------------------------------------------------------------
# link state


@dataclass(frozen=True)
class LinkStateRecord:
    src: str  # SLoC-short
    dst: str
    two_way_delay_us: float
    jitter_us: float
    loss: float
    utilization_rx: float
    utilization_tx: float
    status: str
    sampled_at: int

    def __post_init__(self):
        for name, frac in (("loss", self.loss), ("utilization_rx", self.utilization_rx),
                           ("utilization_tx", self.utilization_tx)):
            if not 0.0 <= frac <= 1.0:
                raise ValidationError(f"{name}={frac} outside [0,1]")
        if self.status not in (STATUS_UP, STATUS_DOWN):
            raise ValidationError(f"bad status {self.status!r}")

    def key(self) -> str:
        return linkstate_key(self.src, self.dst)

    def to_doc(self) -> dict:
        return {
            "src": self.src,
            "dst": self.dst,
            "two_way_delay_us": self.two_way_delay_us,
            "jitter_us": self.jitter_us,
            "loss": self.loss,
            "utilization_rx": self.utilization_rx,
            "utilization_tx": self.utilization_tx,
            "status": self.status,
            "sampled_at": self.sampled_at,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "LinkStateRecord":
        return cls(
            src=doc["src"], dst=doc["dst"],
            two_way_delay_us=float(doc["two_way_delay_us"]),
            jitter_us=float(doc["jitter_us"]),
            loss=float(doc["loss"]),
            utilization_rx=float(doc["utilization_rx"]),
            utilization_tx=float(doc["utilization_tx"]),
            status=doc["status"],
            sampled_at=int(doc["sampled_at"]),
        )


LINKSTATE_PREFIX = "/stats/linkstate/"


def linkstate_key(src_short: str, dst_short: str) -> str:
    # spaces around the dash are part of the canonical key
    return f"{LINKSTATE_PREFIX}{src_short} - {dst_short}"


def parse_linkstate_key(key: str) -> tuple[str, str]:
    if not key.startswith(LINKSTATE_PREFIX):
        raise ValidationError(f"bad linkstate key {key!r}")
    rest = key[len(LINKSTATE_PREFIX):]
    src, sep, dst = rest.partition(" - ")
    if not sep or not src or not dst:
        raise ValidationError(f"bad linkstate key {key!r}")
    return src, dst


# ---------------------------------------------------------------------------
# identity and policy


GroupTag = Union[int, str]  # int or "*" wildcard


def identity_key(userid: str, device_id: str) -> str:
    _check_name(userid, "userid")
    _check_name(device_id, "device id")
    return f"/identity/{userid}/{device_id}"


def group_rule_key(src_group: GroupTag, dst_group: GroupTag) -> str:
    for g in (src_group, dst_group):
        if g != "*" and not isinstance(g, int):
            raise ValidationError(f"group tag {g!r} must be int or '*'")
    return f"/control/group/{src_group}/{dst_group}"


def parse_group_rule_key(key: str) -> tuple[GroupTag, GroupTag]:
    parts = key.split("/")
    if len(parts) != 5 or parts[1] != "control" or parts[2] != "group":
        raise ValidationError(f"bad group rule key {key!r}")

    def tag(s: str) -> GroupTag:
        return "*" if s == "*" else int(s)

    return tag(parts[3]), tag(parts[4])


@dataclass(frozen=True)
class PolicyRule:
    """Group rule value: an action plus (for steer) relay SLoC-shorts."""

    action: str
    slocs: tuple[str, ...] = ()

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValidationError(f"bad action {self.action!r}")
        if self.action == ACTION_STEER and not self.slocs:
            raise ValidationError("steer requires a non-empty SLoC list")
        if self.action != ACTION_STEER and self.slocs:
            raise ValidationError(f"{self.action} forbids a SLoC list")

    def to_doc(self) -> dict:
        return {"action": self.action, "slocs": list(self.slocs)}

    @classmethod
    def from_doc(cls, doc: dict) -> "PolicyRule":
        return cls(doc["action"], tuple(doc.get("slocs", ())))


def route_control_key_l2(src_mac: str, src_ip: str, dst_mac: str, dst_ip: str) -> str:
    return f"/control/RT/2/{src_mac}/{src_ip}/{dst_mac}/{dst_ip}"


def route_control_key_l3(src_prefix: str, src_mask: int, dst_prefix: str, dst_mask: int) -> str:
    return f"/control/RT/5/{src_prefix}/{src_mask}/{dst_prefix}/{dst_mask}"


DEFAULT_GROUP = 0


def lookup_policy(rules: dict[tuple[GroupTag, GroupTag], PolicyRule],
                  src_groups: list[int], dst_groups: list[int]) -> PolicyRule:
    """Most-specific match wins: exact pair, then src-wildcard (*, dst), then
    dst-wildcard (src, *); numerically smallest tags break ties; default permit.
    """
    src_groups = sorted(src_groups) or [DEFAULT_GROUP]
    dst_groups = sorted(dst_groups) or [DEFAULT_GROUP]
    for s in src_groups:
        for d in dst_groups:
            rule = rules.get((s, d))
            if rule is not None:
                return rule
    for d in dst_groups:
        rule = rules.get(("*", d))
        if rule is not None:
            return rule
    for s in src_groups:
        rule = rules.get((s, "*"))
        if rule is not None:
            return rule
    return PolicyRule(ACTION_PERMIT)


def fetch_group_rules(handle: StoreHandle) -> dict[tuple[GroupTag, GroupTag], PolicyRule]:
    rules = {}
    for entry in handle.get_prefix("/control/group/"):
        try:
            pair = parse_group_rule_key(entry.key)
            rules[pair] = PolicyRule.from_doc(from_json_bytes(entry.value))
        except (ValidationError, ValueError, KeyError):
            continue
    return rules


# ---------------------------------------------------------------------------
# procedures


def register_node(handle: StoreHandle, role: str, system_name: str, site_id: int,
                  location: tuple[float, float], lease: Lease, *,
                  clock=None, hold_ns: int = 0,
                  done: Optional[Callable[[NodeRecord], None]] = None,
                  label_ceiling: int = 1 << LABEL_BITS) -> Optional[NodeRecord]:
    """Register under the label lock, assigning the smallest unused 24-bit
    SystemLabel.

    The critical section (scan, choose, write) runs while holding the
    distributed lock; hold_ns > 0 keeps the lock across a scheduled delay to
    model store round trips.  Returns the record when the whole procedure
    completed synchronously, else None with `done` invoked on completion.
    """
    key = node_key(role, system_name)
    result: dict = {}

    def critical(guard):
        try:
            used = set()
            for entry in handle.get_prefix("/node/"):
                r, name = parse_node_key(entry.key)
                if name == system_name:
                    raise DuplicateSystemName(f"{system_name} already registered as {r}")
                used.add(int(from_json_bytes(entry.value)["system_label"]))
            label = 0
            while label in used:
                label += 1
            if label >= label_ceiling:
                raise LabelSpaceExhausted(f"no label below {label_ceiling}")
        except Exception:
            handle.release_lock(guard)
            raise

        def finish():
            record = NodeRecord(role, system_name, site_id, location, label)
            try:
                handle.put(key, to_json_bytes(record.to_doc()), lease.lease_id)
            finally:
                handle.release_lock(guard)
            result["record"] = record
            if done is not None:
                done(record)

        if hold_ns > 0 and clock is not None:
            clock.call_later(hold_ns, finish, label=f"register:{system_name}")
        else:
            finish()

    handle.acquire_lock(LABEL_LOCK, lease.lease_id, critical)
    return result.get("record")


def announce_service(handle: StoreHandle, record: NodeRecord,
                     slocs: list[Sloc], lease: Lease) -> int:
    """Publish the node's SLoC list; re-announcing replaces in place."""
    if handle.get(record.key()) is None:
        raise NotRegistered(f"{record.system_name} has no live /node record")
    doc = {"slocs": [s.to_doc() for s in slocs]}
    return handle.put(service_key(record.role, record.system_name),
                      to_json_bytes(doc), lease.lease_id)


def hunt(handle: StoreHandle, role: str) -> tuple[list[tuple[str, list[Sloc]]], list[str]]:
    """Prefix-fetch /service/<role>; unparseable values become warnings."""
    results = []
    warnings = []
    for entry in handle.get_prefix(f"/service/{role}/"):
        try:
            _, system_name = parse_service_key(entry.key)
            doc = from_json_bytes(entry.value)
            slocs = [Sloc.from_doc(d) for d in doc["slocs"]]
        except (SchemaError, ValueError, KeyError, TypeError) as exc:
            warnings.append(f"{entry.key}: unparseable service record ({exc})")
            continue
        results.append((system_name, slocs))
    return results, warnings


def announce_route(handle: StoreHandle, route: ServiceRoute, lease: Lease) -> int:
    return handle.put(route.key(), to_json_bytes(route.to_doc()), lease.lease_id)


def withdraw_route(handle: StoreHandle, key: str) -> bool:
    return handle.delete(key)


def report_linkstate(target: StoreHandle, rec: LinkStateRecord, lease: Lease) -> int:
    """Upsert a probe record; `target` is the LSDB cache when one is hunted,
    otherwise the main store."""
    return target.put(rec.key(), to_json_bytes(rec.to_doc()), lease.lease_id)


def resolve_identity_groups(handle: StoreHandle, userid: str, device_id: str) -> list[int]:
    entry = handle.get(identity_key(userid, device_id))
    if entry is None:
        return [DEFAULT_GROUP]
    doc = from_json_bytes(entry.value)
    groups = [int(g) for g in doc.get("groups", ())]
    return groups or [DEFAULT_GROUP]
