"""Per-page compression and 4 KiB-aligned page packing.

Every database page is stored small but read back with exactly one 4 KiB
slot access. Slots carry an inline directory at the head and payload bytes
packed from the tail; an incompressible page spills raw and owns its slot.

On-slot layout (little-endian, bit-exact):
    byte 0          entry count n (1..64)
    bytes 1..1+13n  directory entries {pid: u64, offset: u16, len: u16, flags: u8}
    payloads        grow downward from byte 4096
A raw-spilled slot is the 4096-byte page image itself (self-describing via
its header; the directory is implicit).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from zstoresim.errors import IntegrityError, NotFoundError

PAGE_BYTES = 4096

_HEADER = struct.Struct("<QQQQQQII")  # pid, write_lsn, wh[4], tree_id, crc
HEADER_BYTES = _HEADER.size  # 56
BODY_BYTES = PAGE_BYTES - HEADER_BYTES
_CRC_OFFSET = 52

_ENTRY = struct.Struct("<QHHB")
ENTRY_BYTES = _ENTRY.size  # 13
MAX_SLOT_ENTRIES = 64
MAX_STORED = PAGE_BYTES - 1 - ENTRY_BYTES  # largest payload that can share a slot

FLAG_COMPRESSED = 1
FLAG_RAW = 2


@dataclass
class PageImage:
    """A 4 KiB logical page: header (pid, write history, checksum) + body."""

    pid: int
    body: bytes
    write_lsn: int = 0
    write_history: tuple[int, ...] = ()  # up to 4 persist LSNs, oldest first
    tree_id: int = 0

    def __post_init__(self):
        if len(self.body) != BODY_BYTES:
            raise ValueError(f"body must be {BODY_BYTES} bytes, got {len(self.body)}")
        if len(self.write_history) > 4:
            raise ValueError("write history holds at most 4 entries")

    def to_bytes(self) -> bytes:
        wh = (0,) * (4 - len(self.write_history)) + tuple(self.write_history)
        buf = bytearray(_HEADER.pack(self.pid, self.write_lsn, *wh, self.tree_id, 0))
        buf += self.body
        crc = zlib.crc32(buf)
        buf[_CRC_OFFSET:_CRC_OFFSET + 4] = struct.pack("<I", crc)
        return bytes(buf)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PageImage":
        if len(raw) != PAGE_BYTES:
            raise IntegrityError(f"page image must be {PAGE_BYTES} bytes")
        pid, lsn, w1, w2, w3, w4, tree_id, crc = _HEADER.unpack_from(raw)
        check = bytearray(raw)
        check[_CRC_OFFSET:_CRC_OFFSET + 4] = b"\x00\x00\x00\x00"
        if zlib.crc32(bytes(check)) != crc:
            raise IntegrityError(f"checksum mismatch for pid {pid}")
        wh = tuple(x for x in (w1, w2, w3, w4) if x != 0)
        return cls(pid=pid, body=raw[HEADER_BYTES:], write_lsn=lsn,
                   write_history=wh, tree_id=tree_id)


def validate_page_bytes(raw: bytes) -> int:
    """Checksum-validate a 4096-byte image; returns its pid."""
    if len(raw) != PAGE_BYTES:
        raise IntegrityError("page image has wrong size")
    pid, _, _, _, _, _, _, crc = _HEADER.unpack_from(raw)
    check = bytearray(raw)
    check[_CRC_OFFSET:_CRC_OFFSET + 4] = b"\x00\x00\x00\x00"
    if zlib.crc32(bytes(check)) != crc:
        raise IntegrityError(f"checksum mismatch for pid {pid}")
    return pid


class IdentityCodec:
    """No-op codec: every page spills raw, one page per slot."""

    name = "identity"

    def compress(self, data: bytes) -> bytes:
        return data

    def decompress(self, data: bytes) -> bytes:
        return data


class DeflateCodec:
    """Fast general-purpose block codec (stdlib zlib, level 1)."""

    name = "deflate"
    level = 1

    def compress(self, data: bytes) -> bytes:
        return zlib.compress(data, self.level)

    def decompress(self, data: bytes) -> bytes:
        try:
            out = zlib.decompress(data)
        except zlib.error as exc:
            raise IntegrityError(f"corrupt compressed payload: {exc}") from exc
        if len(out) != PAGE_BYTES:
            raise IntegrityError("decompressed payload has wrong size")
        return out


_CODECS = {c.name: c for c in (IdentityCodec(), DeflateCodec())}


def get_codec(name: str):
    try:
        return _CODECS[name]
    except KeyError:
        raise ValueError(f"unknown codec {name!r}; have {sorted(_CODECS)}") from None


def compress_page(raw: bytes, codec) -> tuple[bytes, int]:
    """Compress one checksummed 4096-byte image.

    Returns codec output when it fits a shared slot alongside its directory
    entry, else the raw image flagged for spilling.
    """
    validate_page_bytes(raw)
    out = codec.compress(raw)
    if len(out) <= MAX_STORED:
        return out, FLAG_COMPRESSED
    return raw, FLAG_RAW


@dataclass
class SlotEntry:
    pid: int
    offset: int
    length: int
    flags: int


@dataclass
class PackedSlot:
    entries: list[SlotEntry] = field(default_factory=list)
    payloads: list[bytes] = field(default_factory=list)
    raw: bytes | None = None  # raw-spilled page owning the whole slot

    @property
    def used_bytes(self) -> int:
        if self.raw is not None:
            return PAGE_BYTES
        return 1 + ENTRY_BYTES * len(self.entries) + sum(len(p) for p in self.payloads)

    @property
    def free_bytes(self) -> int:
        return PAGE_BYTES - self.used_bytes

    def fits(self, length: int) -> bool:
        if self.raw is not None or len(self.entries) >= MAX_SLOT_ENTRIES:
            return False
        return self.free_bytes >= length + ENTRY_BYTES

    def add(self, pid: int, stored: bytes):
        offset = PAGE_BYTES - sum(len(p) for p in self.payloads) - len(stored)
        self.entries.append(SlotEntry(pid, offset, len(stored), FLAG_COMPRESSED))
        self.payloads.append(stored)

    def pids(self) -> list[int]:
        return [e.pid for e in self.entries]

    def to_bytes(self) -> bytes:
        if self.raw is not None:
            return self.raw
        buf = bytearray(PAGE_BYTES)
        buf[0] = len(self.entries)
        pos = 1
        for e in self.entries:
            _ENTRY.pack_into(buf, pos, e.pid, e.offset, e.length, e.flags)
            pos += ENTRY_BYTES
        for e, payload in zip(self.entries, self.payloads):
            buf[e.offset:e.offset + e.length] = payload
        return bytes(buf)


def pack(batch: list[tuple[int, bytes, int]]) -> list[PackedSlot]:
    """Best-fit-decreasing packing of stored pages into 4 KiB slots.

    Raw-spilled items each own a slot; compressed items are sorted by stored
    length descending and placed into the open slot with the smallest
    sufficient residual, opening a new slot when none fits.
    """
    slots: list[PackedSlot] = []
    compressed = []
    for seq, (pid, stored, flag) in enumerate(batch):
        if len(stored) > PAGE_BYTES:
            raise ValueError(f"stored length {len(stored)} exceeds a slot")
        if flag == FLAG_RAW:
            if len(stored) != PAGE_BYTES:
                raise ValueError("raw-spilled entries must be full page images")
            slot = PackedSlot(raw=stored)
            slot.entries.append(SlotEntry(pid, 0, PAGE_BYTES, FLAG_RAW))
            slots.append(slot)
        else:
            compressed.append((pid, stored, seq))

    compressed.sort(key=lambda item: (-len(item[1]), item[2]))
    open_slots: list[PackedSlot] = []
    for pid, stored, _ in compressed:
        need = len(stored)
        best = None
        best_residual = None
        for slot in open_slots:
            if slot.fits(need):
                residual = slot.free_bytes - (need + ENTRY_BYTES)
                if best_residual is None or residual < best_residual:
                    best = slot
                    best_residual = residual
        if best is None:
            best = PackedSlot()
            open_slots.append(best)
            slots.append(best)
        best.add(pid, stored)
    return slots


def _parse_directory(slot: bytes) -> list[SlotEntry] | None:
    """Parse an inline directory; None if the head is not a sane directory."""
    n = slot[0]
    if not 1 <= n <= MAX_SLOT_ENTRIES:
        return None
    dir_end = 1 + ENTRY_BYTES * n
    if dir_end > PAGE_BYTES:
        return None
    entries = []
    for i in range(n):
        pid, offset, length, flags = _ENTRY.unpack_from(slot, 1 + i * ENTRY_BYTES)
        if flags != FLAG_COMPRESSED:
            return None
        if offset < dir_end or offset + length > PAGE_BYTES or length == 0:
            return None
        entries.append(SlotEntry(pid, offset, length, flags))
    return entries


def unpack_read(slot: bytes, pid: int, codec) -> PageImage:
    """Extract and checksum-verify one page from a 4096-byte slot."""
    if len(slot) != PAGE_BYTES:
        raise IntegrityError("slot must be 4096 bytes")
    entries = _parse_directory(slot)
    if entries is not None:
        for e in entries:
            if e.pid == pid:
                raw = codec.decompress(slot[e.offset:e.offset + e.length])
                page = PageImage.from_bytes(raw)
                if page.pid != pid:
                    raise IntegrityError(f"slot entry for {pid} decoded pid {page.pid}")
                return page
        # fall through: head looked like a directory but pid absent; it may
        # still be a raw page whose leading bytes mimic one
    try:
        page = PageImage.from_bytes(slot)
    except IntegrityError:
        if entries is not None:
            raise NotFoundError(f"pid {pid} not present in slot directory") from None
        raise
    if page.pid != pid:
        raise NotFoundError(f"slot holds pid {page.pid}, wanted {pid}")
    return page


def synthetic_page_body(seed: int, pid: int, version: int, target_ratio: float) -> bytes:
    """Seeded page body whose deflate ratio tracks ``target_ratio``.

    A prefix of random bytes (incompressible) followed by a repeated run;
    the prefix fraction steers the compressed size.
    """
    frac = min(max(target_ratio - 0.015, 0.0), 1.0)
    n_random = int(frac * BODY_BYTES)
    gen = np.random.Generator(np.random.PCG64((seed * 0x9E3779B1 + pid) * 0x85EBCA77 + version))
    head = gen.bytes(n_random)
    return head + bytes(BODY_BYTES - n_random)
