"""Minimal classic-pcap reading and writing (magic 0xa1b2c3d4, microsecond stamps)."""

from __future__ import annotations

import struct
from pathlib import Path

PCAP_MAGIC = 0xA1B2C3D4
GLOBAL_HEADER = struct.Struct(">IHHiIII")
PACKET_HEADER = struct.Struct(">IIII")

from .packets import LINK_ETHERNET, LINK_RAW_IPV4  # noqa: E402


def global_header(link_type: int = LINK_RAW_IPV4, snaplen: int = 65535) -> bytes:
    return GLOBAL_HEADER.pack(PCAP_MAGIC, 2, 4, 0, 0, snaplen, link_type)


def packet_header(ts_us: int, length: int, orig_len: int | None = None) -> bytes:
    return PACKET_HEADER.pack(ts_us // 1_000_000, ts_us % 1_000_000, length, orig_len or length)


def read_pcap(path):
    """Yield (ts_us, raw_bytes, link_type) for every packet in the file."""
    data = Path(path).read_bytes()
    if len(data) < GLOBAL_HEADER.size:
        raise ValueError(f"{path}: not a pcap file")
    magic, _, _, _, _, _, link_type = GLOBAL_HEADER.unpack_from(data, 0)
    swapped = False
    if magic != PCAP_MAGIC:
        magic_le = struct.unpack("<I", data[:4])[0]
        if magic_le != PCAP_MAGIC:
            raise ValueError(f"{path}: bad pcap magic 0x{magic:08x}")
        swapped = True
        _, _, _, _, _, link_type = struct.unpack_from("<HHiIII", data, 4)
    pos = GLOBAL_HEADER.size
    hdr = struct.Struct("<IIII") if swapped else PACKET_HEADER
    while pos + hdr.size <= len(data):
        sec, usec, incl, _orig = hdr.unpack_from(data, pos)
        pos += hdr.size
        raw = data[pos : pos + incl]
        if len(raw) != incl:
            raise ValueError(f"{path}: truncated packet at offset {pos}")
        pos += incl
        yield sec * 1_000_000 + usec, raw, link_type


def write_pcap(path, packets, link_type: int = LINK_RAW_IPV4) -> int:
    """Write (ts_us, raw_bytes) pairs; returns the packet count."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(global_header(link_type))
        for ts_us, raw in packets:
            fh.write(packet_header(ts_us, len(raw)))
            fh.write(raw)
            count += 1
    return count
