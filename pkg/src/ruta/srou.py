"""Bit-exact SRoU wire codec: data headers, OAM messages, segments, TLVs.

Data packet header (network byte order):

     0                   1                   2                   3
     0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
    +---------------+---------------+-----+---+-+-+-+---------------+
    | magic (0x00)  | SRoU Length   | RRR |FT |C|F|T|  Protocol-ID  |
    +---------------+---------------+-----+---+-+-+-+---------------+
    |        Flow ID  (32 / 64 / 96 bits, per FT)                   |
    +---------------------------------------------------------------+
    |        Source Address  (IPv4: 4B / IPv6: 16B; absent for OAM) |
    +-------------------------------+---------------+---------------+
    |         Source Port           |   SLoC Type   |  SR Hdr Len   |
    +---------------+---------------+---------------+---------------+
    |  Last Entry   | Segments Left |   Segment List ...            |
    +---------------+---------------+---------------+---------------+
    |            ... optional TLVs (type, len, value) ...           |
    +---------------------------------------------------------------+

SR Hdr Len covers the four-octet (SLoC Type, SR Hdr Len, Last Entry,
Segments Left) quartet plus the segment list plus TLVs.  SRoU Length covers
the whole header.  Segments are 48 bits: either an IPv4 waypoint
(address + UDP port) or, when the first octet is 0xFF, a network function
(24-bit args, 16-bit function code).

OAM messages reuse the first four octets with Protocol-ID 0x00, then carry
(flow id, OAM type, OAM subtype, payload) instead of source/segment fields.

All values are immutable; encode/decode are pure functions and the decoder
never reads past the length byte it was given.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional, Union

MAGIC = 0x00
FUNCTION_MARKER = 0xFF
SEGMENT_OCTETS = 6
FLAG_QUARTET_OCTETS = 4
MAX_HEADER_OCTETS = 255


class CodecError(Exception):
    pass


class BadMagic(CodecError):
    pass


class TruncatedHeader(CodecError):
    pass


class TruncatedPayload(CodecError):
    pass


class UnsupportedSlocType(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


class InvariantViolation(CodecError):
    pass


class UnknownOamType(CodecError):
    pass


class NoSegmentsLeft(CodecError):
    pass


class FlowIdType(IntEnum):
    FT32 = 0x0
    FT64 = 0x1
    FT96 = 0x2

    @property
    def octets(self) -> int:
        return 4 * (self.value + 1)


class ProtocolId(IntEnum):
    OAM = 0x0
    IPV4 = 0x1
    IPV6 = 0x2


class SlocType(IntEnum):
    RESERVED = 0x0
    IPV4_PORT = 0x1   # 48-bit IPv4 + UDP port
    SRV6 = 0x2        # 128-bit, rejected
    COMPRESSED = 0x3  # rejected


class TlvType(IntEnum):
    PADDING = 0x0
    SR_INTEGRITY = 0x1
    PATH_TELEMETRY = 0x2


class OamType(IntEnum):
    LINKSTATE = 0x0
    TRACEROUTE = 0x1  # reserved, rejected at decode
    STUN = 0x2


LINKSTATE_REQUEST = 0x0
LINKSTATE_RESPONSE = 0x1
STUN_REQUEST = 0x0
STUN_RESPONSE = 0x1

LINKSTATE_PAYLOAD_OCTETS = 32  # seq(4) ts(8) rx_ts(8) sender_seq(4) sender_ts(8)
STUN_RESPONSE_PAYLOAD_OCTETS = 6

# Well-known network function codes (registry-driven; args carry VNID / VRF)
FUNC_END_DT2U = 0x0001
FUNC_END_DT4 = 0x0002
FUNCTION_NAMES = {FUNC_END_DT2U: "End.DT2U", FUNC_END_DT4: "End.DT4"}


@dataclass(frozen=True)
class Waypoint:
    """48-bit segment: IPv4 address + UDP port of the next relay."""

    address: str
    port: int


@dataclass(frozen=True)
class Function:
    """48-bit segment starting 0xFF: (24-bit args, 16-bit function code)."""

    args: int
    function: int


Segment = Union[Waypoint, Function]


@dataclass(frozen=True)
class Tlv:
    tlv_type: int
    value: bytes


def _pack_ip(address: str, expect_v6: bool) -> bytes:
    try:
        ip = ipaddress.ip_address(address)
    except ValueError as exc:
        raise InvariantViolation(f"bad address {address!r}: {exc}") from None
    if expect_v6 != (ip.version == 6):
        raise InvariantViolation(f"address {address} does not match protocol family")
    return ip.packed


def _check_port(port: int, what: str) -> None:
    if not 0 <= port <= 0xFFFF:
        raise InvariantViolation(f"{what} {port} out of range")


def _pack_flags(rrr: int, ft: FlowIdType, c: bool, f: bool, t: bool) -> int:
    return (rrr & 0x7) << 5 | (ft & 0x3) << 3 | int(c) << 2 | int(f) << 1 | int(t)


def _pack_flow_id(flow_id: int, ft: FlowIdType) -> bytes:
    width = ft.octets
    if not 0 <= flow_id < 1 << (8 * width):
        raise InvariantViolation(f"flow_id does not fit {8 * width} bits")
    return flow_id.to_bytes(width, "big")


def _encode_segment(seg: Segment) -> bytes:
    if isinstance(seg, Function):
        if not 0 <= seg.args < 1 << 24:
            raise InvariantViolation("function args exceed 24 bits")
        if not 0 <= seg.function < 1 << 16:
            raise InvariantViolation("function code exceeds 16 bits")
        return bytes([FUNCTION_MARKER]) + seg.args.to_bytes(3, "big") + seg.function.to_bytes(2, "big")
    packed = _pack_ip(seg.address, expect_v6=False)
    if packed[0] == FUNCTION_MARKER:
        raise InvariantViolation("waypoint address may not start with octet 0xFF (function marker)")
    _check_port(seg.port, "waypoint port")
    return packed + seg.port.to_bytes(2, "big")


def _decode_segment(raw: bytes) -> Segment:
    if raw[0] == FUNCTION_MARKER:
        return Function(args=int.from_bytes(raw[1:4], "big"),
                        function=int.from_bytes(raw[4:6], "big"))
    return Waypoint(address=str(ipaddress.IPv4Address(raw[0:4])),
                    port=int.from_bytes(raw[4:6], "big"))


def _encode_tlvs(tlvs: tuple) -> bytes:
    out = bytearray()
    for tlv in tlvs:
        if not 0 <= tlv.tlv_type <= 0xFF:
            raise InvariantViolation("tlv type out of range")
        if len(tlv.value) > 0xFF:
            raise InvariantViolation("tlv value longer than 255 octets")
        out.append(tlv.tlv_type)
        out.append(len(tlv.value))
        out.extend(tlv.value)
    return bytes(out)


def _decode_tlvs(raw: bytes) -> tuple:
    tlvs = []
    off = 0
    while off < len(raw):
        if len(raw) - off < 2:
            raise LengthMismatch("dangling TLV bytes")
        ttype, tlen = raw[off], raw[off + 1]
        off += 2
        if off + tlen > len(raw):
            raise TruncatedHeader("TLV value exceeds header")
        tlvs.append(Tlv(ttype, bytes(raw[off:off + tlen])))
        off += tlen
    return tuple(tlvs)


@dataclass(frozen=True)
class SRoUHeader:
    """Parsed SRoU data-packet header.

    segment_list is stored in reverse visit order: index 0 is the final
    segment, higher indexes are visited earlier.  The first waypoint of a
    path is carried only in the outer UDP/IP destination.
    """

    protocol_id: ProtocolId
    source_address: str
    source_port: int
    segment_list: tuple[Segment, ...]
    segments_left: int
    flow_id: int = 0
    flow_id_type: FlowIdType = FlowIdType.FT32
    c_bit: bool = False
    f_bit: bool = False
    t_bit: bool = False
    sloc_type: SlocType = SlocType.IPV4_PORT
    tlvs: tuple[Tlv, ...] = ()
    reserved_rrr: int = 0
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def last_entry(self) -> int:
        return len(self.segment_list) - 1

    @property
    def sr_hdr_len(self) -> int:
        tlv_len = sum(2 + len(t.value) for t in self.tlvs)
        return FLAG_QUARTET_OCTETS + SEGMENT_OCTETS * len(self.segment_list) + tlv_len

    @property
    def srou_length(self) -> int:
        src = 6 if self.protocol_id == ProtocolId.IPV4 else 18
        return 4 + self.flow_id_type.octets + src + self.sr_hdr_len


def encode_header(hdr: SRoUHeader) -> bytes:
    """Serialize a data-packet header; length fields are computed, not trusted."""
    if hdr.protocol_id == ProtocolId.OAM:
        raise InvariantViolation("OAM messages use encode_oam")
    if hdr.protocol_id not in (ProtocolId.IPV4, ProtocolId.IPV6):
        raise InvariantViolation(f"unknown protocol id {hdr.protocol_id}")
    if hdr.sloc_type != SlocType.IPV4_PORT:
        raise UnsupportedSlocType(f"sloc type {int(hdr.sloc_type):#x} not supported")
    if hdr.reserved_rrr != 0:
        raise InvariantViolation("reserved RRR bits must be zero on encode")
    if not hdr.segment_list:
        raise InvariantViolation("segment list may not be empty")
    if len(hdr.segment_list) > 256:
        raise InvariantViolation("more than 256 segments")
    if not 0 <= hdr.segments_left <= hdr.last_entry + 1:
        raise InvariantViolation(
            f"segments_left {hdr.segments_left} exceeds last_entry+1 {hdr.last_entry + 1}")
    if hdr.source_port is None or hdr.source_address is None:
        raise InvariantViolation("data packets carry source address and port")
    _check_port(hdr.source_port, "source port")

    flow = _pack_flow_id(hdr.flow_id, hdr.flow_id_type)
    source = _pack_ip(hdr.source_address, expect_v6=hdr.protocol_id == ProtocolId.IPV6)
    segs = b"".join(_encode_segment(s) for s in hdr.segment_list)
    tlvs = _encode_tlvs(hdr.tlvs)
    sr_hdr_len = FLAG_QUARTET_OCTETS + len(segs) + len(tlvs)
    total = 4 + len(flow) + len(source) + 2 + sr_hdr_len
    if sr_hdr_len > 0xFF or total > MAX_HEADER_OCTETS:
        raise InvariantViolation(f"header too long ({total} octets)")

    out = bytearray()
    out.append(MAGIC)
    out.append(total)
    out.append(_pack_flags(0, hdr.flow_id_type, hdr.c_bit, hdr.f_bit, hdr.t_bit))
    out.append(hdr.protocol_id)
    out.extend(flow)
    out.extend(source)
    out.extend(hdr.source_port.to_bytes(2, "big"))
    out.append(hdr.sloc_type)
    out.append(sr_hdr_len)
    out.append(hdr.last_entry)
    out.append(hdr.segments_left)
    out.extend(segs)
    out.extend(tlvs)
    assert len(out) == total
    return bytes(out)


def _parse_prefix(data: bytes):
    """Common first-four-octets parse; returns fields plus the bounded view."""
    if len(data) < 4:
        raise TruncatedHeader(f"need at least 4 octets, have {len(data)}")
    if data[0] != MAGIC:
        raise BadMagic(f"first octet {data[0]:#04x} != 0x00")
    total = data[1]
    if total < 4:
        raise LengthMismatch(f"srou_length {total} below minimum")
    if total > len(data):
        raise TruncatedHeader(f"srou_length {total} exceeds available {len(data)}")
    flags = data[2]
    rrr = flags >> 5
    try:
        ft = FlowIdType((flags >> 3) & 0x3)
    except ValueError:
        raise InvariantViolation(f"flow id type {(flags >> 3) & 0x3:#x} unknown") from None
    c, f, t = bool(flags & 0x4), bool(flags & 0x2), bool(flags & 0x1)
    proto = data[3]
    return data[:total], total, rrr, ft, c, f, t, proto


def decode_header(data: bytes) -> tuple[SRoUHeader, int]:
    """Decode a data-packet header; returns (header, consumed octets)."""
    view, total, rrr, ft, c_bit, f_bit, t_bit, proto = _parse_prefix(data)
    if proto == ProtocolId.OAM:
        raise InvariantViolation("OAM message; use decode_oam")
    if proto not in (ProtocolId.IPV4, ProtocolId.IPV6):
        raise InvariantViolation(f"unknown protocol id {proto:#x}")
    proto = ProtocolId(proto)
    warnings = ("nonzero reserved bits",) if rrr else ()

    off = 4
    flow_octets = ft.octets
    src_octets = 4 if proto == ProtocolId.IPV4 else 16
    if off + flow_octets + src_octets + 2 + FLAG_QUARTET_OCTETS > total:
        raise TruncatedHeader("header shorter than fixed fields")
    flow_id = int.from_bytes(view[off:off + flow_octets], "big")
    off += flow_octets
    if proto == ProtocolId.IPV4:
        source_address = str(ipaddress.IPv4Address(view[off:off + 4]))
    else:
        source_address = str(ipaddress.IPv6Address(view[off:off + 16]))
    off += src_octets
    source_port = int.from_bytes(view[off:off + 2], "big")
    off += 2

    sloc_raw, sr_hdr_len, last_entry, segments_left = view[off:off + 4]
    if sloc_raw != SlocType.IPV4_PORT:
        raise UnsupportedSlocType(f"sloc type {sloc_raw:#04x} not supported")
    if total != off + sr_hdr_len:
        raise LengthMismatch(
            f"srou_length {total} != {off} + sr_hdr_len {sr_hdr_len}")
    off += 4

    seg_count = last_entry + 1
    seg_bytes = SEGMENT_OCTETS * seg_count
    if FLAG_QUARTET_OCTETS + seg_bytes > sr_hdr_len:
        raise LengthMismatch(
            f"{seg_count} segments do not fit sr_hdr_len {sr_hdr_len}")
    if segments_left > seg_count:
        raise InvariantViolation(
            f"segments_left {segments_left} exceeds segment count {seg_count}")
    segments = tuple(
        _decode_segment(view[off + i * SEGMENT_OCTETS:off + (i + 1) * SEGMENT_OCTETS])
        for i in range(seg_count)
    )
    off += seg_bytes
    tlvs = _decode_tlvs(view[off:total])

    hdr = SRoUHeader(
        protocol_id=proto,
        source_address=source_address,
        source_port=source_port,
        segment_list=segments,
        segments_left=segments_left,
        flow_id=flow_id,
        flow_id_type=ft,
        c_bit=c_bit,
        f_bit=f_bit,
        t_bit=t_bit,
        sloc_type=SlocType.IPV4_PORT,
        tlvs=tlvs,
        reserved_rrr=rrr,
        warnings=warnings,
    )
    return hdr, total


def advance_segment(hdr: SRoUHeader) -> tuple[Segment, SRoUHeader]:
    """Decrement segments_left and return the now-active segment.

    The list is reverse-ordered, so successive calls visit segments from the
    highest index down to index 0 (the final segment).
    """
    if hdr.segments_left < 1:
        raise NoSegmentsLeft("segments_left is 0")
    sl = hdr.segments_left - 1
    return hdr.segment_list[sl], replace(hdr, segments_left=sl)


# ---------------------------------------------------------------------------
# OAM messages


@dataclass(frozen=True)
class LinkstateData:
    """Two-way measurement payload (all timestamps are 64-bit nanoseconds)."""

    seq: int
    timestamp: int
    received_timestamp: int = 0
    sender_seq: int = 0
    sender_timestamp: int = 0


@dataclass(frozen=True)
class StunRequestData:
    pass


@dataclass(frozen=True)
class StunResponseData:
    observed_address: str
    observed_port: int


OamPayload = Union[LinkstateData, StunRequestData, StunResponseData]


@dataclass(frozen=True)
class OamMessage:
    oam_type: OamType
    oam_subtype: int
    payload: OamPayload
    flow_id: int = 0
    flow_id_type: FlowIdType = FlowIdType.FT32
    c_bit: bool = False
    f_bit: bool = False
    t_bit: bool = False
    reserved_rrr: int = 0
    warnings: tuple[str, ...] = field(default=(), compare=False)


def _encode_oam_payload(msg: OamMessage) -> bytes:
    if msg.oam_type == OamType.LINKSTATE:
        p = msg.payload
        if not isinstance(p, LinkstateData):
            raise InvariantViolation("linkstate message needs LinkstateData payload")
        if msg.oam_subtype not in (LINKSTATE_REQUEST, LINKSTATE_RESPONSE):
            raise UnknownOamType(f"linkstate subtype {msg.oam_subtype:#x}")
        if msg.oam_subtype == LINKSTATE_REQUEST and (
                p.received_timestamp or p.sender_seq or p.sender_timestamp):
            raise InvariantViolation("linkstate request must zero echo fields")
        try:
            return struct.pack(">IQQIQ", p.seq, p.timestamp, p.received_timestamp,
                               p.sender_seq, p.sender_timestamp)
        except struct.error as exc:
            raise InvariantViolation(f"linkstate field out of range: {exc}") from None
    if msg.oam_type == OamType.STUN:
        if msg.oam_subtype == STUN_REQUEST:
            if not isinstance(msg.payload, StunRequestData):
                raise InvariantViolation("stun request payload must be empty")
            return b""
        if msg.oam_subtype == STUN_RESPONSE:
            p = msg.payload
            if not isinstance(p, StunResponseData):
                raise InvariantViolation("stun response needs StunResponseData")
            _check_port(p.observed_port, "observed port")
            return _pack_ip(p.observed_address, expect_v6=False) + p.observed_port.to_bytes(2, "big")
        raise UnknownOamType(f"stun subtype {msg.oam_subtype:#x}")
    raise UnknownOamType(f"oam type {int(msg.oam_type):#x} not supported")


def encode_oam(msg: OamMessage) -> bytes:
    if msg.reserved_rrr != 0:
        raise InvariantViolation("reserved RRR bits must be zero on encode")
    payload = _encode_oam_payload(msg)
    flow = _pack_flow_id(msg.flow_id, msg.flow_id_type)
    total = 4 + len(flow) + 2 + len(payload)
    if total > MAX_HEADER_OCTETS:
        raise InvariantViolation(f"OAM message too long ({total} octets)")
    out = bytearray()
    out.append(MAGIC)
    out.append(total)
    out.append(_pack_flags(0, msg.flow_id_type, msg.c_bit, msg.f_bit, msg.t_bit))
    out.append(ProtocolId.OAM)
    out.extend(flow)
    out.append(msg.oam_type)
    out.append(msg.oam_subtype)
    out.extend(payload)
    return bytes(out)


def decode_oam(data: bytes) -> tuple[OamMessage, int]:
    view, total, rrr, ft, c_bit, f_bit, t_bit, proto = _parse_prefix(data)
    if proto != ProtocolId.OAM:
        raise InvariantViolation(f"protocol id {proto:#x} is not OAM")
    warnings = ("nonzero reserved bits",) if rrr else ()
    off = 4
    flow_octets = ft.octets
    if off + flow_octets + 2 > total:
        raise TruncatedHeader("OAM message shorter than fixed fields")
    flow_id = int.from_bytes(view[off:off + flow_octets], "big")
    off += flow_octets
    oam_type_raw, subtype = view[off], view[off + 1]
    off += 2
    body = view[off:total]

    if oam_type_raw == OamType.LINKSTATE:
        if subtype not in (LINKSTATE_REQUEST, LINKSTATE_RESPONSE):
            raise UnknownOamType(f"linkstate subtype {subtype:#x}")
        if len(body) < LINKSTATE_PAYLOAD_OCTETS:
            raise TruncatedPayload(
                f"linkstate payload {len(body)} < {LINKSTATE_PAYLOAD_OCTETS}")
        if len(body) > LINKSTATE_PAYLOAD_OCTETS:
            raise LengthMismatch("trailing bytes after linkstate payload")
        seq, ts, rx_ts, s_seq, s_ts = struct.unpack(">IQQIQ", body)
        payload: OamPayload = LinkstateData(seq, ts, rx_ts, s_seq, s_ts)
    elif oam_type_raw == OamType.STUN:
        if subtype == STUN_REQUEST:
            if body:
                raise LengthMismatch("stun request carries no payload")
            payload = StunRequestData()
        elif subtype == STUN_RESPONSE:
            if len(body) < STUN_RESPONSE_PAYLOAD_OCTETS:
                raise TruncatedPayload(f"stun response payload {len(body)} < 6")
            if len(body) > STUN_RESPONSE_PAYLOAD_OCTETS:
                raise LengthMismatch("trailing bytes after stun payload")
            payload = StunResponseData(
                observed_address=str(ipaddress.IPv4Address(body[0:4])),
                observed_port=int.from_bytes(body[4:6], "big"),
            )
        else:
            raise UnknownOamType(f"stun subtype {subtype:#x}")
    elif oam_type_raw == OamType.TRACEROUTE:
        raise UnknownOamType("oam type 0x1 (traceroute) is reserved")
    else:
        raise UnknownOamType(f"oam type {oam_type_raw:#x}")

    msg = OamMessage(
        oam_type=OamType(oam_type_raw),
        oam_subtype=subtype,
        payload=payload,
        flow_id=flow_id,
        flow_id_type=ft,
        c_bit=c_bit,
        f_bit=f_bit,
        t_bit=t_bit,
        reserved_rrr=rrr,
        warnings=warnings,
    )
    return msg, total


def decode_packet(data: bytes) -> tuple[Union[SRoUHeader, OamMessage], int]:
    """Decode either kind of SRoU message, dispatching on the protocol octet."""
    if len(data) < 4:
        raise TruncatedHeader(f"need at least 4 octets, have {len(data)}")
    if data[3] == ProtocolId.OAM:
        return decode_oam(data)
    return decode_header(data)
