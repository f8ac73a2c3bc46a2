"""Packet records, IPv4 encode/decode and flow keys.

Records carry at most PAYLOAD_PREFIX_MAX payload bytes; full payloads
only ever live in trace files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

from .net import int_to_ip, ip_to_int, pack_ip

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10
TCP_URG = 0x20
TCP_ECE = 0x40
TCP_CWR = 0x80

FLAG_NAMES = [
    (TCP_FIN, "FIN"),
    (TCP_SYN, "SYN"),
    (TCP_RST, "RST"),
    (TCP_PSH, "PSH"),
    (TCP_ACK, "ACK"),
    (TCP_URG, "URG"),
    (TCP_ECE, "ECE"),
    (TCP_CWR, "CWR"),
]

LINK_ETHERNET = 1
LINK_RAW_IPV4 = 101

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806

PAYLOAD_PREFIX_MAX = 256

ORIGIN_DARKNET = "darknet"
ORIGIN_RESPONDER = "responder"


class DecodeError(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class FlowKey(NamedTuple):
    """Standard 5-tuple; NamedTuple ordering gives the deterministic sort."""

    src_ip: str
    dst_ip: str
    proto: int
    src_port: int
    dst_port: int

    def sort_key(self):
        return (
            ip_to_int(self.src_ip),
            ip_to_int(self.dst_ip),
            self.proto,
            self.src_port,
            self.dst_port,
        )

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst_ip, self.src_ip, self.proto, self.dst_port, self.src_port)


@dataclass(slots=True)
class PacketRecord:
    """One observed packet."""

    ts: int  # microseconds since the Unix epoch
    src_ip: str
    dst_ip: str
    proto: int
    src_port: int = 0
    dst_port: int = 0
    tcp_flags: int = 0
    payload_len: int = 0
    payload_prefix: bytes = b""
    capture_origin: str = ORIGIN_DARKNET

    def flow_key(self) -> FlowKey:
        return FlowKey(self.src_ip, self.dst_ip, self.proto, self.src_port, self.dst_port)

    def flag_names(self) -> str:
        return "|".join(name for bit, name in FLAG_NAMES if self.tcp_flags & bit)


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f">{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_ipv4(proto: int, src_ip: str, dst_ip: str, payload: bytes, ttl: int = 64) -> bytes:
    total_len = 20 + len(payload)
    header = struct.pack(
        ">BBHHHBBH4s4s",
        0x45,
        0,
        total_len,
        0,
        0,
        ttl,
        proto,
        0,
        pack_ip(src_ip),
        pack_ip(dst_ip),
    )
    checksum = _checksum(header)
    header = header[:10] + struct.pack(">H", checksum) + header[12:]
    return header + payload


def _transport_checksum(src_ip: str, dst_ip: str, proto: int, segment: bytes) -> int:
    pseudo = pack_ip(src_ip) + pack_ip(dst_ip) + struct.pack(">BBH", 0, proto, len(segment))
    return _checksum(pseudo + segment)


def build_tcp(
    src_ip: str,
    dst_ip: str,
    src_port: int,
    dst_port: int,
    seq: int,
    ack: int,
    flags: int,
    payload: bytes = b"",
    window: int = 65535,
    options: bytes = b"",
) -> bytes:
    if len(options) % 4:
        options += b"\x00" * (4 - len(options) % 4)
    doff = 5 + len(options) // 4
    header = struct.pack(
        ">HHIIBBHHH",
        src_port,
        dst_port,
        seq & 0xFFFFFFFF,
        ack & 0xFFFFFFFF,
        doff << 4,
        flags,
        window,
        0,
        0,
    )
    segment = header + options + payload
    csum = _transport_checksum(src_ip, dst_ip, PROTO_TCP, segment)
    segment = segment[:16] + struct.pack(">H", csum) + segment[18:]
    return build_ipv4(PROTO_TCP, src_ip, dst_ip, segment)


MSS_OPTION_1460 = struct.pack(">BBH", 2, 4, 1460)


def build_udp(src_ip: str, dst_ip: str, src_port: int, dst_port: int, payload: bytes = b"") -> bytes:
    length = 8 + len(payload)
    header = struct.pack(">HHHH", src_port, dst_port, length, 0)
    csum = _transport_checksum(src_ip, dst_ip, PROTO_UDP, header + payload)
    header = header[:6] + struct.pack(">H", csum or 0xFFFF)
    return build_ipv4(PROTO_UDP, src_ip, dst_ip, header + payload)


def build_icmp(src_ip: str, dst_ip: str, icmp_type: int, code: int = 0, payload: bytes = b"") -> bytes:
    header = struct.pack(">BBHI", icmp_type, code, 0, 0)
    csum = _checksum(header + payload)
    header = struct.pack(">BBHI", icmp_type, code, csum, 0)
    return build_ipv4(PROTO_ICMP, src_ip, dst_ip, header + payload)


def wrap_ethernet(ip_packet: bytes, src_mac: bytes = b"\x02\x00\x00\x00\x00\x01", dst_mac: bytes = b"\x02\x00\x00\x00\x00\x02") -> bytes:
    return dst_mac + src_mac + struct.pack(">H", ETHERTYPE_IPV4) + ip_packet


def decode(raw_bytes: bytes, link_type: int, ts: int = 0, capture_origin: str = ORIGIN_DARKNET) -> PacketRecord:
    """Parse one captured frame into a PacketRecord.

    Truncated or garbage input raises DecodeError; a record is only ever
    returned fully populated.
    """
    if link_type == LINK_ETHERNET:
        if len(raw_bytes) < 14:
            raise DecodeError("ethernet frame shorter than header")
        (ethertype,) = struct.unpack_from(">H", raw_bytes, 12)
        if ethertype != ETHERTYPE_IPV4:
            raise DecodeError(f"unsupported ethertype 0x{ethertype:04x}")
        packet = raw_bytes[14:]
    elif link_type == LINK_RAW_IPV4:
        packet = raw_bytes
    else:
        raise DecodeError(f"unsupported link type {link_type}")

    if len(packet) < 20:
        raise DecodeError("short IPv4 header")
    vihl = packet[0]
    if vihl >> 4 != 4:
        raise DecodeError(f"not IPv4 (version {vihl >> 4})")
    ihl = (vihl & 0x0F) * 4
    if ihl < 20 or ihl > len(packet):
        raise DecodeError("IPv4 header length exceeds frame")
    total_len = struct.unpack_from(">H", packet, 2)[0]
    if total_len < ihl or total_len > len(packet):
        raise DecodeError("IPv4 total length inconsistent with frame")
    frag = struct.unpack_from(">H", packet, 6)[0]
    frag_offset = frag & 0x1FFF
    proto = packet[9]
    src_ip = int_to_ip(struct.unpack_from(">I", packet, 12)[0])
    dst_ip = int_to_ip(struct.unpack_from(">I", packet, 16)[0])
    body = packet[ihl:total_len]

    src_port = dst_port = 0
    tcp_flags = 0
    payload = body
    # Non-first fragments carry no transport header: record as-is, portless.
    if frag_offset == 0:
        if proto == PROTO_TCP:
            if len(body) < 20:
                raise DecodeError("short TCP header")
            src_port, dst_port = struct.unpack_from(">HH", body, 0)
            doff = (body[12] >> 4) * 4
            if doff < 20 or doff > len(body):
                raise DecodeError("TCP data offset exceeds segment")
            tcp_flags = body[13]
            payload = body[doff:]
        elif proto == PROTO_UDP:
            if len(body) < 8:
                raise DecodeError("short UDP header")
            src_port, dst_port, udp_len, _ = struct.unpack_from(">HHHH", body, 0)
            if udp_len < 8 or udp_len > len(body):
                raise DecodeError("UDP length inconsistent with segment")
            payload = body[8:udp_len]
        elif proto == PROTO_ICMP:
            if len(body) < 8:
                raise DecodeError("short ICMP header")
            payload = body[8:]

    return PacketRecord(
        ts=ts,
        src_ip=src_ip,
        dst_ip=dst_ip,
        proto=proto,
        src_port=src_port,
        dst_port=dst_port,
        tcp_flags=tcp_flags,
        payload_len=len(payload),
        payload_prefix=bytes(payload[:PAYLOAD_PREFIX_MAX]),
        capture_origin=capture_origin,
    )


def encode_record(record: PacketRecord) -> bytes:
    """Rebuild a raw IPv4 packet from a record (payload truncated at the prefix)."""
    payload = record.payload_prefix
    if record.proto == PROTO_TCP:
        return build_tcp(
            record.src_ip,
            record.dst_ip,
            record.src_port,
            record.dst_port,
            0,
            0,
            record.tcp_flags,
            payload,
        )
    if record.proto == PROTO_UDP:
        return build_udp(record.src_ip, record.dst_ip, record.src_port, record.dst_port, payload)
    if record.proto == PROTO_ICMP:
        return build_icmp(record.src_ip, record.dst_ip, 8, 0, payload)
    return build_ipv4(record.proto, record.src_ip, record.dst_ip, payload)
