"""Zone-structured logical space.

Owns the forward pid->slot mapping, the reverse per-slot occupant index,
per-zone metadata (fill, invalidation counts, average EDT, lifecycle state),
and the active-group history that write-pattern maintenance consumes.

Checkpoint snapshot format (consumed by engine.recover): magic ``ZSSM`` +
version byte, length-prefixed binary records {pid, slot_lba, offset, len},
followed by the serialized active-group history.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from zstoresim.errors import IntegrityError, NotFoundError, PlacementError, ResourceError

SNAPSHOT_MAGIC = b"ZSSM"
SNAPSHOT_VERSION = 1

_REC = struct.Struct("<QQHH")  # pid, slot_lba, offset, length
_SEG = struct.Struct("<IIIQQB")  # zone, start, end, end_seq, appended, closed


class ZoneState(IntEnum):
    EMPTY = 0
    ACTIVE = 1
    PARTIAL = 2
    FULL = 3


@dataclass
class MapRecord:
    slot_lba: int
    offset: int
    length: int
    edt: float | None = None  # estimated EDT at install; None = excluded from means


@dataclass
class ZoneMeta:
    zone_id: int
    lba_base: int
    zone_pages: int
    write_ptr: int = 0
    state: ZoneState = ZoneState.EMPTY
    valid_pages: int = 0     # live pids mapped into the zone
    invalid_pages: int = 0   # pids that died here since the last reclaim
    live_slots: int = 0      # slots with at least one live occupant
    reclaim_count: int = 0   # times the zone was emptied by GC
    edt_range_rank: int = 0
    plid: int | None = None  # fdp handle while active
    _edt_sum: float = 0.0
    _edt_n: int = 0

    @property
    def avg_edt(self) -> float | None:
        if self._edt_n == 0:
            return None
        return self._edt_sum / self._edt_n

    @property
    def dead_slots(self) -> int:
        return self.write_ptr - self.live_slots

    @property
    def room(self) -> int:
        return self.zone_pages - self.write_ptr


@dataclass
class GroupSegment:
    """One activation epoch of a zone inside an active group."""

    zone_id: int
    start: int
    end: int | None = None   # frontier when the segment closed
    end_seq: int = 0         # global write sequence at close
    appended: int = 0
    closed: bool = False


@dataclass
class ActiveGroup:
    group_id: int
    segments: list[GroupSegment] = field(default_factory=list)
    retired: bool = False

    @property
    def members(self) -> set[int]:
        return {s.zone_id for s in self.segments}

    @property
    def closed(self) -> bool:
        return all(s.closed for s in self.segments) and bool(self.segments)

    def appended_of(self, zone_id: int) -> int:
        return sum(s.appended for s in self.segments if s.zone_id == zone_id)


class ActiveGroupHistory:
    def __init__(self):
        self.groups: list[ActiveGroup] = []
        self._next_id = 0

    def begin(self) -> ActiveGroup:
        g = ActiveGroup(self._next_id)
        self._next_id += 1
        self.groups.append(g)
        return g

    @property
    def current(self) -> ActiveGroup | None:
        return self.groups[-1] if self.groups else None

    def live_groups(self) -> list[ActiveGroup]:
        return [g for g in self.groups if not g.retired]


class StorageSpace:
    """Single-writer zone space over a contiguous LBA range starting at 0."""

    def __init__(self, zone_pages: int, n_zones: int):
        self.zone_pages = zone_pages
        self.n_zones = n_zones
        self.zones = [ZoneMeta(z, z * zone_pages, zone_pages) for z in range(n_zones)]
        self.pid2offset: dict[int, MapRecord] = {}
        self.occupants: dict[int, list[int]] = {}  # slot_lba -> live pids
        self.groups = ActiveGroupHistory()
        self.write_seq = np.zeros((n_zones, zone_pages), dtype=np.int64)
        self.seq = 0
        self._open: list[int] = []  # active zone ids in activation order
        self._zone_segment: dict[int, GroupSegment] = {}

    # ------------------------------------------------------------------
    # zone lifecycle

    def zone_of(self, lba: int) -> ZoneMeta:
        return self.zones[lba // self.zone_pages]

    @property
    def open_zones(self) -> list[int]:
        return list(self._open)

    def zones_in(self, state: ZoneState) -> list[ZoneMeta]:
        return [z for z in self.zones if z.state == state]

    def empty_zone_count(self) -> int:
        return sum(1 for z in self.zones if z.state == ZoneState.EMPTY)

    def list_for_open(self, source: str) -> list[ZoneMeta]:
        """Candidate zones ordered by EDT-range rank, then id."""
        if source == "empty":
            pool = self.zones_in(ZoneState.EMPTY)
        elif source == "partial":
            pool = self.zones_in(ZoneState.PARTIAL)
        elif source == "full":
            pool = self.zones_in(ZoneState.FULL)
        else:
            raise ValueError(f"unknown open source {source!r}")
        return sorted(pool, key=lambda z: (z.edt_range_rank, z.zone_id))

    def activate_zone(self, zone_id: int, max_open: int) -> ZoneMeta:
        """Open a zone for appends and register it with the current group.

        A fresh group record begins whenever no group exists yet or every
        member of the current one has been deactivated.
        """
        zone = self.zones[zone_id]
        if zone.state == ZoneState.ACTIVE:
            return zone
        if zone.state == ZoneState.FULL:
            raise PlacementError(f"zone {zone_id} is full; reclaim it first")
        if len(self._open) >= max_open:
            raise ResourceError(f"open-zone limit {max_open} reached")
        zone.state = ZoneState.ACTIVE
        self._open.append(zone_id)
        group = self.groups.current
        if group is None or group.closed:
            group = self.groups.begin()
        seg = GroupSegment(zone_id, start=zone.write_ptr)
        group.segments.append(seg)
        self._zone_segment[zone_id] = (group, seg)
        return zone

    def deactivate_zone(self, zone_id: int):
        zone = self.zones[zone_id]
        if zone.state != ZoneState.ACTIVE:
            return
        if zone.write_ptr == zone.zone_pages:
            zone.state = ZoneState.FULL
        elif zone.write_ptr == 0:
            zone.state = ZoneState.EMPTY
        else:
            zone.state = ZoneState.PARTIAL
        self._open.remove(zone_id)
        entry = self._zone_segment.pop(zone_id, None)
        if entry is not None:
            group, seg = entry
            if seg.appended == 0:
                # a zone that received nothing has no presence in the
                # group's physical span: it was never really a member
                group.segments.remove(seg)
            else:
                seg.end = zone.write_ptr
                seg.end_seq = self.seq
                seg.closed = True
        zone.plid = None

    def reclaim_zone(self, zone_id: int):
        """Return an emptied zone to the empty list (all live pids moved out)."""
        zone = self.zones[zone_id]
        if zone.valid_pages != 0:
            raise IntegrityError(f"zone {zone_id} still holds {zone.valid_pages} live pages")
        if zone.state == ZoneState.ACTIVE:
            self.deactivate_zone(zone_id)
        zone.state = ZoneState.EMPTY
        zone.write_ptr = 0
        zone.invalid_pages = 0
        zone.live_slots = 0
        zone.reclaim_count += 1
        zone._edt_sum = 0.0
        zone._edt_n = 0

    # ------------------------------------------------------------------
    # mapping

    def append_slot(self, zone_id: int,
                    entries: list[tuple[int, int, int, float | None]]) -> int:
        """Place one slot at the zone frontier; entries are (pid, off, len, edt).

        An empty entry list appends a dead slot (padding).
        """
        zone = self.zones[zone_id]
        if zone.state != ZoneState.ACTIVE:
            raise PlacementError(f"zone {zone_id} is not active")
        if zone.write_ptr >= zone.zone_pages:
            raise PlacementError(f"zone {zone_id} frontier past the end")
        slot_off = zone.write_ptr
        lba = zone.lba_base + slot_off
        zone.write_ptr += 1
        self.seq += 1
        self.write_seq[zone_id, slot_off] = self.seq
        entry = self._zone_segment.get(zone_id)
        if entry is not None:
            entry[1].appended += 1
        stale = self.occupants.pop(lba, None)
        if stale:
            raise IntegrityError(f"slot {lba} reused while still occupied")
        if entries:
            zone.live_slots += 1
            self.occupants[lba] = []
            for pid, off, length, edt in entries:
                self.install_mapping(pid, MapRecord(lba, off, length, edt))
        return lba

    def install_mapping(self, pid: int, rec: MapRecord) -> MapRecord | None:
        """Atomically repoint pid to rec; returns the previous record."""
        old = self.pid2offset.get(pid)
        if old is not None:
            old_zone = self.zone_of(old.slot_lba)
            occ = self.occupants.get(old.slot_lba)
            if occ is not None:
                occ.remove(pid)
                if not occ:
                    del self.occupants[old.slot_lba]
                    old_zone.live_slots -= 1
            old_zone.valid_pages -= 1
            old_zone.invalid_pages += 1
            if old.edt is not None:
                old_zone._edt_sum -= old.edt
                old_zone._edt_n -= 1
        new_zone = self.zone_of(rec.slot_lba)
        self.pid2offset[pid] = rec
        self.occupants.setdefault(rec.slot_lba, []).append(pid)
        new_zone.valid_pages += 1
        if rec.edt is not None:
            new_zone._edt_sum += rec.edt
            new_zone._edt_n += 1
        return old

    def lookup(self, pid: int) -> MapRecord:
        try:
            return self.pid2offset[pid]
        except KeyError:
            raise NotFoundError(f"pid {pid} is not mapped") from None

    def slot_pids(self, lba: int) -> list[int]:
        return list(self.occupants.get(lba, ()))

    def mark_rewrite(self, zone_id: int, slot_off: int):
        """Record an in-place slot rewrite (compensation) in the write sequence."""
        self.seq += 1
        self.write_seq[zone_id, slot_off] = self.seq

    # ------------------------------------------------------------------
    # EDT range ranks

    def reassign_edt_ranks(self):
        """Total rank order: emptied lowest, partial middle, full highest."""

        def full_key(z: ZoneMeta):
            avg = z.avg_edt
            return (-(avg if avg is not None else float("inf")), z.zone_id)

        def mid_key(z: ZoneMeta):
            avg = z.avg_edt
            return ((avg if avg is not None else float("inf")), z.zone_id)

        ordered = (
            sorted(self.zones_in(ZoneState.EMPTY), key=lambda z: z.zone_id)
            + sorted(self.zones_in(ZoneState.ACTIVE) + self.zones_in(ZoneState.PARTIAL),
                     key=mid_key)
            + sorted(self.zones_in(ZoneState.FULL), key=full_key)
        )
        for rank, zone in enumerate(ordered):
            zone.edt_range_rank = rank

    # ------------------------------------------------------------------
    # group maintenance queries

    def add_group_span(self, zone_id: int, start: int, end: int):
        """Attach an in-place rewrite span to the current group."""
        group = self.groups.current
        if group is None or group.closed:
            group = self.groups.begin()
        group.segments.append(GroupSegment(zone_id, start, end, self.seq,
                                           appended=end - start, closed=True))

    def segment_dead(self, seg: GroupSegment) -> bool:
        end = seg.end if seg.end is not None else self.zones[seg.zone_id].write_ptr
        if end <= seg.start:
            return True
        window = self.write_seq[seg.zone_id, seg.start:end]
        return bool(window.min() > seg.end_seq)

    def group_status(self, group: ActiveGroup) -> tuple[set[int], set[int]]:
        """(rewritten members, still-live members) of a closed group."""
        dead: set[int] = set()
        alive: set[int] = set()
        for zid in group.members:
            segs = [s for s in group.segments if s.zone_id == zid]
            if all(self.segment_dead(s) for s in segs):
                dead.add(zid)
            else:
                alive.add(zid)
        return dead, alive

    # ------------------------------------------------------------------
    # checkpoint snapshot

    def snapshot_bytes(self) -> bytes:
        out = bytearray()
        out += SNAPSHOT_MAGIC
        out.append(SNAPSHOT_VERSION)
        out += struct.pack("<Q", len(self.pid2offset))
        for pid in sorted(self.pid2offset):
            rec = self.pid2offset[pid]
            payload = _REC.pack(pid, rec.slot_lba, rec.offset, rec.length)
            out += struct.pack("<H", len(payload))
            out += payload
        groups = self.groups.groups
        out += struct.pack("<I", len(groups))
        for g in groups:
            out += struct.pack("<QBI", g.group_id, int(g.retired), len(g.segments))
            for s in g.segments:
                end = s.end if s.end is not None else 0xFFFFFFFF
                out += _SEG.pack(s.zone_id, s.start, end, s.end_seq, s.appended,
                                 int(s.closed))
        return bytes(out)

    @classmethod
    def from_snapshot(cls, data: bytes, zone_pages: int, n_zones: int) -> "StorageSpace":
        if data[:4] != SNAPSHOT_MAGIC:
            raise IntegrityError("bad snapshot magic")
        if data[4] != SNAPSHOT_VERSION:
            raise IntegrityError(f"unsupported snapshot version {data[4]}")
        space = cls(zone_pages, n_zones)
        pos = 5
        (n_rec,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        for _ in range(n_rec):
            (plen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            pid, lba, off, length = _REC.unpack_from(data, pos)
            pos += plen
            space.restore_mapping(pid, MapRecord(lba, off, length))
        (n_groups,) = struct.unpack_from("<I", data, pos)
        pos += 4
        for _ in range(n_groups):
            gid, retired, n_segs = struct.unpack_from("<QBI", data, pos)
            pos += 13
            g = ActiveGroup(gid, retired=bool(retired))
            for _ in range(n_segs):
                zid, start, end, end_seq, appended, closed = _SEG.unpack_from(data, pos)
                pos += _SEG.size
                g.segments.append(GroupSegment(
                    zid, start, None if end == 0xFFFFFFFF else end,
                    end_seq, appended, bool(closed)))
            space.groups.groups.append(g)
            space.groups._next_id = max(space.groups._next_id, gid + 1)
        return space

    def restore_mapping(self, pid: int, rec: MapRecord):
        """Install a mapping during recovery, bypassing frontier checks."""
        old = self.pid2offset.get(pid)
        if old is not None:
            occ = self.occupants.get(old.slot_lba)
            if occ is not None:
                occ.remove(pid)
                if not occ:
                    del self.occupants[old.slot_lba]
        self.pid2offset[pid] = rec
        self.occupants.setdefault(rec.slot_lba, []).append(pid)

    def rebuild_zone_meta(self, frontiers: dict[int, int],
                          states: dict[int, ZoneState]):
        """Reconstruct per-zone counters purely from the forward table plus
        replayed zone events (frontiers and lifecycle states)."""
        for zone in self.zones:
            zone.write_ptr = frontiers.get(zone.zone_id, 0)
            zone.state = states.get(zone.zone_id, ZoneState.EMPTY)
            zone.valid_pages = 0
            zone.invalid_pages = 0
            zone.live_slots = 0
            zone._edt_sum = 0.0
            zone._edt_n = 0
        for lba, pids in self.occupants.items():
            zone = self.zone_of(lba)
            zone.valid_pages += len(pids)
            zone.live_slots += 1
            off = lba - zone.lba_base
            if off >= zone.write_ptr:
                zone.write_ptr = off + 1
        for zone in self.zones:
            if zone.state == ZoneState.EMPTY and zone.write_ptr > 0:
                zone.state = ZoneState.PARTIAL
            if zone.write_ptr == zone.zone_pages and zone.state not in (
                    ZoneState.ACTIVE, ZoneState.FULL):
                zone.state = ZoneState.FULL
