"""Out-of-place storage engine over the simulated flash device.

Implements the flush write path (EDT estimation, compression, EDT-grouped
packing, zone placement), deathtime-aware DB-level GC with a crash-safe
chained evacuation, the NoWA write discipline (cohort opens + compensation
writes), the in-place + doublewrite baseline, and mapping-WAL checkpoint
recovery.

Mapping WAL framing: ``u32 payload_len | u8 type | payload | u32 crc32``
with crc over type+payload. Record types: mapping updates {lsn, pid,
slot_lba, offset, len} and zone events {lsn, event, zone, frontier}.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from zstoresim import codec as codec_mod
from zstoresim.codec import (
    FLAG_RAW,
    PAGE_BYTES,
    PageImage,
    compress_page,
    get_codec,
    pack,
    unpack_read,
)
from zstoresim.deathtime import DeathtimeTracker, Edt, EdtClass
from zstoresim.errors import (
    ConfigError,
    InvariantBreach,
    NotFoundError,
    ResourceError,
)
from zstoresim.flashsim import MODE_FDP, MODE_STANDARD, MODE_ZNS, FlashDevice
from zstoresim.spacemap import MapRecord, StorageSpace, ZoneState

MODE_INPLACE = "inplace_dwb"
MODE_OOP = "oop"

GC_GREEDY = "greedy"
GC_GDT = "gdt"

# numeric projection of EDT classes for distance/means; estimated values are
# LSN-scale and stay far below the class bases at desk scale
_FALLBACK_BASE = 1e18
_COLD_BASE = 2e18


def edt_float(e: Edt) -> float:
    if e.klass == EdtClass.ESTIMATED:
        return e.value
    if e.klass == EdtClass.FALLBACK_BY_TREE:
        return _FALLBACK_BASE + e.value
    return _COLD_BASE


@dataclass
class EngineConfig:
    mode: str = MODE_OOP
    zone_pages: int = 256
    max_open_zones: int = 4
    gc_policy: str = GC_GDT
    nowa_enabled: bool = False
    compression_enabled: bool = False
    fdp_hints_enabled: bool = False
    gc_trigger_free_zones: int = 1
    edt_group_count: int = 4
    usable_fraction: float = 1.0
    dwb_pages: int = 128

    def __post_init__(self):
        if self.mode not in (MODE_INPLACE, MODE_OOP):
            raise ConfigError(f"unknown engine mode {self.mode!r}")
        if self.gc_policy not in (GC_GREEDY, GC_GDT):
            raise ConfigError(f"unknown gc policy {self.gc_policy!r}")
        if self.nowa_enabled and self.mode != MODE_OOP:
            raise ConfigError("nowa requires out-of-place mode")
        if not 0.0 < self.usable_fraction <= 1.0:
            raise ConfigError("usable_fraction must be in (0, 1]")
        if self.zone_pages <= 0 or self.max_open_zones < 1:
            raise ConfigError("zone_pages and max_open_zones must be positive")
        if self.edt_group_count < 1:
            raise ConfigError("edt_group_count must be >= 1")


@dataclass
class EngineCounters:
    user_slots: int = 0
    dwb_slots: int = 0
    db_gc_slots: int = 0
    comp_slots: int = 0
    pages_flushed: int = 0
    page_reads: int = 0

    def db_issued(self) -> int:
        return self.user_slots + self.dwb_slots + self.db_gc_slots + self.comp_slots

    def copy(self) -> "EngineCounters":
        return EngineCounters(**self.__dict__)


@dataclass
class GcReport:
    victims: list[int] = field(default_factory=list)
    victim_valid_ratio: float = 0.0
    relocated_pages: int = 0
    compensation_pages: int = 0
    freed_zones: int = 0

    @property
    def cycle_waf(self) -> float:
        return 1.0 / (1.0 - self.victim_valid_ratio)


# ----------------------------------------------------------------------
# mapping WAL

_FRAME_HEAD = struct.Struct("<IB")
_MAP_REC = struct.Struct("<QQQHH")   # lsn, pid, slot_lba, offset, length
_ZONE_REC = struct.Struct("<QBII")   # lsn, event, zone, frontier

WAL_MAP = 1
WAL_ZONE = 2

ZEV_OPEN = 0
ZEV_CLOSE = 1
ZEV_RESET = 2


class MappingWal:
    def __init__(self, path: Path):
        self.path = Path(path)
        self._f = open(self.path, "ab")

    def _frame(self, rtype: int, payload: bytes) -> bytes:
        crc = zlib.crc32(bytes([rtype]) + payload)
        return _FRAME_HEAD.pack(len(payload), rtype) + payload + struct.pack("<I", crc)

    def append_mapping(self, lsn: int, pid: int, slot_lba: int, offset: int, length: int):
        self._f.write(self._frame(WAL_MAP, _MAP_REC.pack(lsn, pid, slot_lba, offset, length)))

    def append_zone_event(self, lsn: int, event: int, zone: int, frontier: int):
        self._f.write(self._frame(WAL_ZONE, _ZONE_REC.pack(lsn, event, zone, frontier)))

    def flush(self):
        self._f.flush()

    def truncate(self):
        self._f.close()
        self._f = open(self.path, "wb")

    def close(self):
        self._f.close()

    @staticmethod
    def replay(path: Path):
        """Yield (type, fields) for every intact record; a torn tail record
        ends replay silently."""
        try:
            data = Path(path).read_bytes()
        except FileNotFoundError:
            return
        pos = 0
        n = len(data)
        while pos + _FRAME_HEAD.size <= n:
            plen, rtype = _FRAME_HEAD.unpack_from(data, pos)
            end = pos + _FRAME_HEAD.size + plen + 4
            if end > n:
                return
            payload = data[pos + _FRAME_HEAD.size : end - 4]
            (crc,) = struct.unpack_from("<I", data, end - 4)
            if zlib.crc32(bytes([rtype]) + payload) != crc:
                return
            if rtype == WAL_MAP and plen == _MAP_REC.size:
                yield WAL_MAP, _MAP_REC.unpack(payload)
            elif rtype == WAL_ZONE and plen == _ZONE_REC.size:
                yield WAL_ZONE, _ZONE_REC.unpack(payload)
            else:
                return
            pos = end


# ----------------------------------------------------------------------
# engine


class Engine:
    def __init__(self, device: FlashDevice, config: EngineConfig,
                 run_dir: Path | None = None, pool_peek=None,
                 _recovering: bool = False):
        self.device = device
        self.config = config
        self.pool_peek = pool_peek
        self.codec = get_codec("deflate" if config.compression_enabled else "identity")
        self.counters = EngineCounters()
        self.tracker = DeathtimeTracker()
        self.current_lsn = 0

        self._validate_against_device()

        if config.mode == MODE_OOP:
            cap = device.config.capacity_pages
            total_zones = cap // config.zone_pages
            usable = int(total_zones * config.usable_fraction)
            if usable < config.max_open_zones + 2:
                raise ConfigError("too few usable zones for the open-zone limit")
            self.space = StorageSpace(config.zone_pages, usable)
        else:
            self.space = None
            self._dwb_base = device.config.capacity_pages - config.dwb_pages
            self._dwb_cursor = 0

        self._free_handles: list[int] = (
            sorted(range(device.config.ruh_count)) if config.fdp_hints_enabled else [])

        # per-EDT-band GC destination zones, persistent across cycles; the
        # greedy baseline relocates into a single undifferentiated chain
        n_bands = config.edt_group_count if config.gc_policy == GC_GDT else 1
        if config.fdp_hints_enabled:
            n_bands = max(1, min(n_bands, device.config.ruh_count - config.max_open_zones))
        self._gc_bands: list[int | None] = [None] * n_bands
        self._rr_cursor = 0
        # user placement streams: one zone per EDT band (NoWA binds them to
        # the cohort zones instead); boundaries are running interval
        # quantiles so band membership is stable across batches
        self._user_band_count = (config.max_open_zones if config.nowa_enabled
                                 else min(config.edt_group_count, config.max_open_zones))
        self._user_bands: list[int | None] = [None] * self._user_band_count
        self._interval_bounds: list[float] = []
        self._zone_band: dict[int, int] = {}  # zone -> band that last filled it

        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.wal: MappingWal | None = None
        if self.run_dir is not None and config.mode == MODE_OOP:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            wal_path = self.run_dir / "mapping.wal"
            if not _recovering and wal_path.exists():
                wal_path.unlink()
            self.wal = MappingWal(wal_path)

    def _validate_against_device(self):
        cfg, dev = self.config, self.device.config
        if cfg.fdp_hints_enabled:
            if dev.mode != MODE_FDP:
                raise ConfigError("placement hints require an fdp-mode device")
            if cfg.max_open_zones + 1 > dev.ruh_count:
                raise ConfigError("need ruh_count >= max_open_zones + 1 (one handle for GC refill)")
            if cfg.zone_pages != dev.effective_ru_pages:
                raise ConfigError("zone size must equal the reclaim-unit size")
        if cfg.nowa_enabled:
            if dev.mode != MODE_STANDARD:
                raise ConfigError("the NoWA discipline targets standard devices")
            if (cfg.max_open_zones * cfg.zone_pages) % dev.superblock_pages:
                raise ConfigError("max_open_zones x zone_pages must be a multiple of the GC unit")
        if dev.mode == MODE_ZNS and cfg.mode == MODE_OOP:
            if cfg.zone_pages != dev.superblock_pages:
                raise ConfigError("engine zone size must equal the device zone size")
        if cfg.mode == MODE_INPLACE and dev.mode != MODE_STANDARD:
            raise ConfigError("the in-place baseline runs on a standard device")

    # ------------------------------------------------------------------
    # in-place + DWB baseline

    def inplace_write(self, page: PageImage):
        """Write the page to the doublewrite staging ring, then to its home."""
        raw = page.to_bytes()
        dwb_lba = self._dwb_base + self._dwb_cursor
        self._dwb_cursor = (self._dwb_cursor + 1) % self.config.dwb_pages
        self.device.host_write([dwb_lba], [raw])
        self.device.host_write([page.pid], [raw])
        self.counters.dwb_slots += 1
        self.counters.user_slots += 1
        self.counters.pages_flushed += 1

    # ------------------------------------------------------------------
    # flush path

    def flush_batch(self, pages: list[PageImage], current_lsn: int):
        """Persist a batch of dirty pages (eviction granularity)."""
        self.current_lsn = max(self.current_lsn, current_lsn)
        if self.config.mode == MODE_INPLACE:
            for page in pages:
                page.write_lsn = current_lsn
                self.inplace_write(page)
            return

        while (self.space.empty_zone_count() <= self.config.gc_trigger_free_zones
               and self._gc_possible()):
            self.db_gc()

        items = []
        for page in pages:
            wh = self.tracker.record_write(page.pid, current_lsn, tree_id=page.tree_id)
            page.write_lsn = current_lsn
            page.write_history = wh.lsns
            raw = page.to_bytes()
            stored, flag = compress_page(raw, self.codec)
            edt = self.tracker.estimate_edt(page.pid, current_lsn)
            items.append((page.pid, stored, flag, edt))

        if self.config.gc_policy == GC_GREEDY and not self.config.nowa_enabled:
            # baseline: writes scatter round-robin over the open zones, the
            # multiplexing a multi-threaded appender would produce
            self._top_up_open_zones(0.0)
            items.sort(key=lambda it: (it[3].sort_key, it[0]))
            self._write_scattered(items, current_lsn)
        else:
            self._update_interval_bounds(items, current_lsn)
            bands: list[list] = [[] for _ in range(self._user_band_count)]
            for it in items:
                bands[self._band_of(it[3], current_lsn)].append(it)
            for b, chunk in enumerate(bands):
                if chunk:
                    self._write_band(b, chunk, current_lsn)

        self.counters.pages_flushed += len(pages)
        if self.wal:
            self.wal.flush()
        if self.config.nowa_enabled:
            self.nowa_maintain()

    # ------------------------------------------------------------------
    # deathtime banding

    def _update_interval_bounds(self, items, lsn: int):
        """Track running quantile boundaries of predicted write intervals so
        band membership stays stable across batches."""
        k = self._user_band_count
        if k < 2:
            return
        ests = sorted(it[3].value - lsn for it in items
                      if it[3].klass == EdtClass.ESTIMATED)
        if len(ests) < k:
            return
        fresh = [float(ests[(i * len(ests)) // k]) for i in range(1, k)]
        if not self._interval_bounds:
            self._interval_bounds = fresh
        else:
            alpha = 0.2
            self._interval_bounds = [
                (1 - alpha) * old + alpha * new
                for old, new in zip(self._interval_bounds, fresh)]

    def _band_of(self, edt: Edt, lsn: int) -> int:
        """Map an EDT to a placement band: 0 = soonest-dying."""
        k = self._user_band_count
        if k == 1:
            return 0
        if edt.klass == EdtClass.COLD_MAX:
            return k - 1
        if edt.klass == EdtClass.FALLBACK_BY_TREE:
            return int(edt.value) % k  # colocate first writes by tree
        if not self._interval_bounds:
            return 0
        interval = edt.value - lsn
        band = 0
        for bound in self._interval_bounds:
            if interval <= bound:
                break
            band += 1
        return min(band, k - 1)

    def _write_band(self, band: int, items, lsn: int) -> int:
        """Pack one band's pages and append them to the band's stream zone."""
        items = sorted(items, key=lambda it: (it[3].sort_key, it[0]))
        slots = pack([(pid, stored, flag) for pid, stored, flag, _ in items])
        edt_by_pid = {pid: edt for pid, _, _, edt in items}
        written = 0
        i = 0
        while i < len(slots):
            zone = self._band_zone(band)
            take = min(zone.room, len(slots) - i)
            for slot in slots[i : i + take]:
                self._append_slot_to_zone(zone, slot, edt_by_pid, lsn)
            written += take
            i += take
            if zone.room == 0:
                if self._user_bands[band] == zone.zone_id:
                    self._user_bands[band] = None
                self._close_zone(zone.zone_id)
        self.counters.user_slots += written
        return written

    def _band_zone(self, band: int):
        """Resume or acquire the zone backing one user placement band."""
        space = self.space
        zid = self._user_bands[band]
        if zid is not None:
            zone = space.zones[zid]
            if zone.room > 0:
                if zone.state == ZoneState.ACTIVE:
                    return zone
                if zone.state == ZoneState.PARTIAL:
                    return self._activate(zid)
            self._user_bands[band] = None

        if self.config.nowa_enabled:
            # rule 1: no new zones until the whole cohort is fully written;
            # spill into whichever cohort zone still has room
            opens = [space.zones[z] for z in space.open_zones
                     if space.zones[z].room > 0]
            if not opens:
                for z in list(space.open_zones):
                    self._close_zone(z)
                self.nowa_maintain()
                self._ensure_empty_zones(self.config.max_open_zones
                                         + self.config.gc_trigger_free_zones)
                opened = [self._open_zone("empty")
                          for _ in range(self.config.max_open_zones)]
                for b in range(self._user_band_count):
                    self._user_bands[b] = opened[min(b, len(opened) - 1)].zone_id
                opens = opened
            bound = {z: b for b, z in enumerate(self._user_bands) if z is not None}
            zone = min(opens, key=lambda z: (abs(bound.get(z.zone_id, band) - band),
                                             z.zone_id))
            self._user_bands[band] = zone.zone_id
            return zone

        trigger = self.config.gc_trigger_free_zones
        reserved = {z for z in self._gc_bands if z is not None}
        empties = space.list_for_open("empty")
        if len(empties) > trigger:
            # emptied zones carry the lowest EDT-range ranks: hot bands take
            # the front of the list, cold bands the back
            idx = (band * len(empties)) // self._user_band_count
            zone = self._activate(empties[min(idx, len(empties) - 1)].zone_id)
            self._zone_band[zone.zone_id] = band
            self._user_bands[band] = zone.zone_id
            return zone
        partials = [z for z in space.list_for_open("partial")
                    if z.zone_id not in reserved and z.zone_id not in self._user_bands]
        if partials:
            # resume a tail this band filled earlier; crossing band tags
            # re-mixes deathtimes, so that is the last resort
            key = self._band_key(band)
            zone = min(partials, key=lambda z: (
                abs(self._zone_band.get(z.zone_id, band) - band),
                self._zone_distance(z, key), z.zone_id))
            zone = self._activate(zone.zone_id)
            self._zone_band[zone.zone_id] = band
            self._user_bands[band] = zone.zone_id
            return zone
        self._ensure_empty_zones(trigger + 1)
        zone = self._open_zone("empty")
        self._zone_band[zone.zone_id] = band
        self._user_bands[band] = zone.zone_id
        return zone

    def _band_key(self, band: int) -> float:
        """Representative absolute EDT for a band, for distance matching."""
        if not self._interval_bounds:
            return float(self.current_lsn)
        k = self._user_band_count
        if band == 0:
            iv = self._interval_bounds[0] / 2
        elif band >= len(self._interval_bounds):
            iv = self._interval_bounds[-1] * 1.5
        else:
            iv = (self._interval_bounds[band - 1] + self._interval_bounds[band]) / 2
        return self.current_lsn + iv

    def _write_scattered(self, items, lsn: int) -> int:
        """Round-robin slot placement across the open zones (greedy baseline)."""
        slots = pack([(pid, stored, flag) for pid, stored, flag, _ in items])
        edt_by_pid = {pid: edt for pid, _, _, edt in items}
        written = 0
        for slot in slots:
            actives = [self.space.zones[z] for z in self.space.open_zones
                       if self.space.zones[z].room > 0]
            if not actives:
                zone = self._select_zone(float(lsn))
            else:
                self._rr_cursor += 1
                zone = actives[self._rr_cursor % len(actives)]
            self._append_slot_to_zone(zone, slot, edt_by_pid, lsn)
            written += 1
            if zone.room == 0:
                self._close_zone(zone.zone_id)
        self.counters.user_slots += written
        return written

    def _append_slot_to_zone(self, zone, slot, edt_by_pid, lsn):
        lba = zone.lba_base + zone.write_ptr
        payload = slot.to_bytes()
        self._device_write(zone, [lba], [payload])
        entries = []
        for e in slot.entries:
            edt = edt_by_pid.get(e.pid)
            val = edt.value if (edt is not None and edt.klass == EdtClass.ESTIMATED) else None
            entries.append((e.pid, e.offset, e.length, val))
        got = self.space.append_slot(zone.zone_id, entries)
        assert got == lba
        if self.wal:
            for e in slot.entries:
                self.wal.append_mapping(lsn, e.pid, lba, e.offset, e.length)

    def _device_write(self, zone, lbas, payloads):
        dev_mode = self.device.config.mode
        if dev_mode == MODE_ZNS:
            first = self.device.zone_append(zone.zone_id, payloads)
            assert first == lbas[0]
        elif self.config.fdp_hints_enabled:
            self.device.host_write_hinted(lbas, zone.plid, payloads)
        else:
            self.device.host_write(lbas, payloads)

    # ------------------------------------------------------------------
    # zone selection

    def _zone_distance(self, zone, key: float) -> float:
        avg = zone.avg_edt
        if avg is None:
            # a zone with no estimated pages carries no affinity: fresh
            # zones are reached via rank assignment, not by distance
            return float("inf") if zone.write_ptr == 0 else abs(_COLD_BASE - key)
        return abs(avg - key)

    def _top_up_open_zones(self, key: float):
        """Deathtime placement spreads groups over several open zones; keep
        the active set at the open limit while space allows."""
        space = self.space
        trigger = self.config.gc_trigger_free_zones
        reserved = {z for z in self._gc_bands if z is not None}
        while len(space.open_zones) < self.config.max_open_zones:
            if space.empty_zone_count() > trigger:
                self._open_zone("empty")
                continue
            partials = [z for z in space.list_for_open("partial")
                        if z.zone_id not in reserved]
            if partials:
                zone = min(partials,
                           key=lambda z: (self._zone_distance(z, key), z.zone_id))
                self._activate(zone.zone_id)
                continue
            break

    def _select_zone(self, key: float):
        space = self.space
        candidates = [space.zones[z] for z in space.open_zones]
        with_room = [z for z in candidates if z.room > 0]
        if with_room:
            return min(with_room, key=lambda z: (self._zone_distance(z, key), z.zone_id))

        trigger = self.config.gc_trigger_free_zones
        if self.config.nowa_enabled:
            # cohort boundary: defer any new opens until every open zone is
            # fully written, then open the next cohort at once
            for z in list(space.open_zones):
                self._close_zone(z)
            self.nowa_maintain()
            self._ensure_empty_zones(self.config.max_open_zones + trigger)
            opened = []
            for _ in range(self.config.max_open_zones):
                opened.append(self._open_zone("empty"))
            return min(opened, key=lambda z: (self._zone_distance(z, key), z.zone_id))

        # ad-hoc open: an emptied zone (lowest EDT-range rank first), else a
        # partial zone with matching data; never consume the GC seed reserve
        if len(space.open_zones) >= self.config.max_open_zones:
            for z in list(space.open_zones):
                self._close_zone(z)
        if space.empty_zone_count() > trigger:
            return self._open_zone("empty")
        reserved = {z for z in self._gc_bands if z is not None}
        partials = [z for z in space.list_for_open("partial")
                    if z.zone_id not in reserved]
        if partials:
            zone = min(partials, key=lambda z: (self._zone_distance(z, key), z.zone_id))
            return self._activate(zone.zone_id)
        self._ensure_empty_zones(trigger + 1)
        return self._open_zone("empty")

    def _ensure_empty_zones(self, needed: int):
        guard = 4 * self.space.n_zones
        while self.space.empty_zone_count() < needed:
            self.db_gc()
            guard -= 1
            if guard <= 0:
                raise InvariantBreach("GC cannot free enough zones")

    def _open_zone(self, source: str):
        pool = self.space.list_for_open(source)
        if not pool:
            raise ResourceError(f"no {source} zone available")
        return self._activate(pool[0].zone_id)

    def _activate(self, zone_id: int, internal: bool = False):
        limit = self.config.max_open_zones + (len(self._gc_bands) if internal else 0)
        zone = self.space.activate_zone(zone_id, max_open=limit)
        if self.config.fdp_hints_enabled and zone.plid is None:
            zone.plid = self._acquire_handle(zone_id)
            self.device.ruh_update(zone.plid)
        if self.wal:
            self.wal.append_zone_event(self.current_lsn, ZEV_OPEN, zone_id, zone.write_ptr)
        return zone

    def _close_zone(self, zone_id: int):
        zone = self.space.zones[zone_id]
        if zone.plid is not None:
            self._free_handles.append(zone.plid)
            self._free_handles.sort()
        self.space.deactivate_zone(zone_id)
        if self.wal:
            self.wal.append_zone_event(self.current_lsn, ZEV_CLOSE, zone_id, zone.write_ptr)

    def _acquire_handle(self, zone_id: int) -> int:
        if not self._free_handles:
            raise ResourceError("no free reclaim-unit handle")
        want = zone_id % self.device.config.ruh_count
        if want in self._free_handles:
            self._free_handles.remove(want)
            return want
        return self._free_handles.pop(0)

    # ------------------------------------------------------------------
    # reads

    def read_page(self, pid: int) -> PageImage:
        """Fetch one page with exactly one 4 KiB device access."""
        self.counters.page_reads += 1
        if self.config.mode == MODE_INPLACE:
            raw = self.device.read_slot(pid)
            page = PageImage.from_bytes(raw)
            if page.pid != pid:
                raise NotFoundError(f"home slot holds pid {page.pid}")
            return page
        rec = self.space.lookup(pid)
        slot = self.device.read_slot(rec.slot_lba)
        return unpack_read(slot, pid, self.codec)

    # ------------------------------------------------------------------
    # DB-level GC

    def _gc_possible(self) -> bool:
        return any(z.state in (ZoneState.FULL, ZoneState.PARTIAL) and z.dead_slots > 0
                   for z in self.space.zones)

    def _select_victims(self) -> list:
        space = self.space
        reserved = {z for z in self._gc_bands if z is not None}
        candidates = [z for z in space.zones
                      if z.state in (ZoneState.FULL, ZoneState.PARTIAL)
                      and z.dead_slots > 0 and z.zone_id not in reserved]
        if not candidates:
            # the GC working set is all that's left: release it
            self._gc_bands = [None] * len(self._gc_bands)
            candidates = [z for z in space.zones
                          if z.state in (ZoneState.FULL, ZoneState.PARTIAL)
                          and z.dead_slots > 0]
        if not candidates:
            raise InvariantBreach("no GC candidates hold any dead slots")

        def greedy_key(z):
            return (z.valid_pages, z.zone_id)

        if self.config.gc_policy == GC_GDT and self.config.nowa_enabled:
            # prefer victims that complete a partially-dead group: trading a
            # little extra copyback (within the band) for avoided
            # compensation writes only pays off under the NoWA discipline
            completing = self._group_completing_zones()
            min_valid = min(z.valid_pages for z in candidates)
            band = min_valid + max(1, int(0.10 * self.config.zone_pages))

            def key(z):
                in_band = z.valid_pages <= band
                return (not (in_band and z.zone_id in completing),) + greedy_key(z)
        else:
            key = greedy_key

        # accumulate until the victims' dead slots cover one zone; when the
        # candidates run short, reclaim whatever dead space exists
        ordered = sorted(candidates, key=key)
        victims = []
        dead = 0
        for z in ordered:
            victims.append(z)
            dead += z.dead_slots
            if dead >= self.config.zone_pages:
                break
        return victims

    def _group_completing_zones(self) -> set[int]:
        """Zones whose rewrite would complete a partially-dead group."""
        out: set[int] = set()
        for g in self.space.groups.live_groups():
            if not g.closed:
                continue
            dead, alive = self.space.group_status(g)
            if dead and alive:
                out |= alive
        return out

    def _harvest_zone(self, zone) -> list:
        """Read every live page of a zone; one device read per live slot."""
        items = []
        for off in range(zone.write_ptr):
            lba = zone.lba_base + off
            pids = self.space.slot_pids(lba)
            if not pids:
                continue
            slot_bytes = None
            for pid in pids:
                page = self.pool_peek(pid) if self.pool_peek else None
                if page is None:
                    if slot_bytes is None:
                        slot_bytes = self.device.read_slot(lba)
                    page = unpack_read(slot_bytes, pid, self.codec)
                if self.tracker.history(pid).count == 0:
                    self.tracker.seed_history(pid, page.write_history, page.tree_id)
                if self.tracker.history(pid).count < 2:
                    self.tracker.note_gc_survival(pid)
                edt = self.tracker.estimate_edt(pid, self.current_lsn)
                self.tracker.record_write(pid, self.current_lsn, is_gc_write=True)
                raw = page.to_bytes()
                stored, flag = compress_page(raw, self.codec)
                items.append((pid, stored, flag, edt))
        return items

    def db_gc(self) -> GcReport:
        """Reclaim at least one zone.

        Victims are evacuated one at a time into a chain of destinations
        seeded by an empty zone; a victim's slots are only reused after all
        of its live pages have been rewritten and logged, which keeps every
        acknowledged mapping readable across a crash at any point.
        """
        space = self.space
        if self.wal:
            self.wal.flush()  # no slot freed by a buffered record may be reused
        victims = self._select_victims()
        total_slots = sum(z.write_ptr for z in victims)
        live_slots = sum(z.live_slots for z in victims)

        # one destination cursor per EDT band keeps relocated survivors of
        # different coldness in different zones; cursors persist across
        # cycles and draw from the reclaim chain (zones already evacuated)
        n_bands = len(self._gc_bands)
        band_dest: list = [None] * n_bands
        carry_room = 0
        for b, zid in enumerate(self._gc_bands):
            if zid is None:
                continue
            zone = space.zones[zid]
            if zone.state == ZoneState.PARTIAL and zone.room > 0:
                carry_room += zone.room
            else:
                self._gc_bands[b] = None

        dest_queue: list[int] = []
        if carry_room < self.config.zone_pages:
            seeds = space.list_for_open("empty")
            if not seeds:
                raise InvariantBreach("GC needs one empty seed zone")
            dest_queue.append(seeds[0].zone_id)
        relocated = 0

        def resume(band: int):
            zid = self._gc_bands[band]
            band_dest[band] = self._activate(zid, internal=True)
            return band_dest[band]

        def band_next_dest(band: int):
            cur = band_dest[band]
            if cur is not None and cur.room > 0:
                return cur
            if cur is not None:
                self._close_zone(cur.zone_id)
                self._gc_bands[band] = None
                band_dest[band] = None
            if self._gc_bands[band] is not None:
                return resume(band)
            if dest_queue:
                zid = dest_queue.pop(0)
                self._gc_bands[band] = zid
                self._zone_band[zid] = (band * self._user_band_count) // n_bands
                return resume(band)
            # chain not grown yet: share any cursor or resumable band zone
            for b2 in range(n_bands):
                if band_dest[b2] is not None and band_dest[b2].room > 0:
                    return band_dest[b2]
            for b2 in range(n_bands):
                if band_dest[b2] is None and self._gc_bands[b2] is not None:
                    return resume(b2)
            raise InvariantBreach("GC destination chain ran dry")

        user_k = self._user_band_count
        for victim in victims:
            items = self._harvest_zone(victim)
            chunks: list[list] = [[] for _ in range(n_bands)]
            for it in items:
                b = (self._band_of(it[3], self.current_lsn) * n_bands) // user_k
                chunks[min(b, n_bands - 1)].append(it)
            for band in reversed(range(n_bands)):  # coldest band first
                chunk = sorted(chunks[band], key=lambda it: (it[3].sort_key, it[0]),
                               reverse=True)
                if not chunk:
                    continue
                slots = pack([(pid, stored, flag) for pid, stored, flag, _ in chunk])
                edt_by_pid = {pid: edt for pid, _, _, edt in chunk}
                for slot in slots:
                    target = band_next_dest(band)
                    self._append_slot_to_zone(target, slot, edt_by_pid, self.current_lsn)
                    relocated += 1
                    self.counters.db_gc_slots += 1
            # all live data of this victim is rewritten and durably logged
            # before any of its slots can be overwritten
            if self.wal:
                self.wal.flush()
            space.reclaim_zone(victim.zone_id)
            self._zone_band.pop(victim.zone_id, None)
            if self.device.config.mode == MODE_ZNS:
                self.device.zone_reset(victim.zone_id)
            if self.wal:
                self.wal.append_zone_event(self.current_lsn, ZEV_RESET, victim.zone_id, 0)
            dest_queue.append(victim.zone_id)

        for cur in band_dest:
            if cur is not None:
                self._close_zone(cur.zone_id)  # tail destinations stay partial

        space.reassign_edt_ranks()
        if self.wal:
            self.wal.flush()

        report = GcReport(
            victims=[z.zone_id for z in victims],
            victim_valid_ratio=(live_slots / total_slots) if total_slots else 0.0,
            relocated_pages=relocated,
        )
        report.freed_zones = sum(1 for z in victims
                                 if space.zones[z.zone_id].state == ZoneState.EMPTY)
        if self.config.nowa_enabled:
            report.compensation_pages = self.nowa_maintain()
        return report

    # ------------------------------------------------------------------
    # NoWA maintenance

    def nowa_maintain(self) -> int:
        """Compensate write-frequency imbalance inside historical groups.

        A closed group with some members fully rewritten and others not has
        its surviving member spans rewritten in place (live slots byte-for-
        byte, dead slots padded), fully invalidating the group's physical
        superblocks.
        """
        if not self.config.nowa_enabled:
            return 0
        if self.wal:
            self.wal.flush()  # compensation overwrites slots in place
        space = self.space
        total = 0
        for g in space.groups.live_groups():
            if not g.closed:
                continue
            dead, alive = space.group_status(g)
            if not alive:
                g.retired = True
                continue
            if not dead:
                continue
            blocked = [z for z in alive if space.zones[z].state == ZoneState.ACTIVE]
            for zid in sorted(alive):
                if zid in blocked:
                    continue
                for seg in g.segments:
                    if seg.zone_id != zid or space.segment_dead(seg):
                        continue
                    total += self._compensate_span(zid, seg.start,
                                                   seg.end if seg.end is not None else
                                                   space.zones[zid].write_ptr)
            if not blocked:
                d2, a2 = space.group_status(g)
                if not a2:
                    g.retired = True
        return total

    def _compensate_span(self, zone_id: int, start: int, end: int) -> int:
        """Rewrite a zone span in place: same content for live slots, zero
        padding for dead ones. Mappings are unchanged."""
        zone = self.space.zones[zone_id]
        count = 0
        pad = bytes(PAGE_BYTES)
        for off in range(start, end):
            lba = zone.lba_base + off
            if self.space.slot_pids(lba):
                payload = self.device.read_slot(lba)
            else:
                payload = pad
            self.device.host_write([lba], [payload])
            self.space.mark_rewrite(zone_id, off)
            count += 1
        if count:
            self.space.add_group_span(zone_id, start, end)
        self.counters.comp_slots += count
        return count

    # ------------------------------------------------------------------
    # checkpoint / recovery

    def checkpoint(self) -> int:
        """Persist the mapping and group-history snapshot; truncate the WAL."""
        if self.run_dir is None or self.space is None:
            raise ConfigError("checkpointing needs a run directory in oop mode")
        blob = self.space.snapshot_bytes()
        tmp = self.run_dir / "checkpoint.zssm.tmp"
        final = self.run_dir / "checkpoint.zssm"
        tmp.write_bytes(blob)
        os.replace(tmp, final)
        self.wal.truncate()
        return self.current_lsn

    @classmethod
    def recover(cls, device: FlashDevice, config: EngineConfig, run_dir: Path,
                pool_peek=None) -> "Engine":
        """Rebuild engine state from the latest snapshot plus the mapping WAL."""
        run_dir = Path(run_dir)
        eng = cls(device, config, run_dir=None, pool_peek=pool_peek)
        cap = device.config.capacity_pages
        total_zones = cap // config.zone_pages
        usable = int(total_zones * config.usable_fraction)

        snap_path = run_dir / "checkpoint.zssm"
        if snap_path.exists():
            space = StorageSpace.from_snapshot(snap_path.read_bytes(),
                                               config.zone_pages, usable)
        else:
            space = StorageSpace(config.zone_pages, usable)
        for g in space.groups.groups:
            g.retired = True  # write-sequence state is not checkpointed

        frontiers: dict[int, int] = {}
        states: dict[int, ZoneState] = {}
        last_lsn = 0
        for rtype, fields_ in MappingWal.replay(run_dir / "mapping.wal"):
            if rtype == WAL_MAP:
                lsn, pid, slot_lba, offset, length = fields_
                space.restore_mapping(pid, MapRecord(slot_lba, offset, length))
                zid = slot_lba // config.zone_pages
                frontiers[zid] = max(frontiers.get(zid, 0), slot_lba % config.zone_pages + 1)
                last_lsn = max(last_lsn, lsn)
            else:
                lsn, event, zone, frontier = fields_
                if event == ZEV_RESET:
                    frontiers[zone] = 0
                    states[zone] = ZoneState.EMPTY
                else:
                    # open/close both leave the zone resumable; rebuild
                    # promotes full frontiers to FULL afterwards
                    frontiers[zone] = max(frontiers.get(zone, 0), frontier)
                    states[zone] = ZoneState.PARTIAL
                last_lsn = max(last_lsn, lsn)

        space.rebuild_zone_meta(frontiers, states)
        if device.config.mode == MODE_ZNS:
            # the device write pointer may be ahead of the replayed state
            # (slots written whose mapping records were lost); skip past them
            for zone in space.zones:
                dev_wp = int(device.sb_wp[zone.zone_id])
                if dev_wp > zone.write_ptr:
                    zone.write_ptr = dev_wp
                    if dev_wp == zone.zone_pages:
                        zone.state = ZoneState.FULL
                    elif zone.state == ZoneState.EMPTY:
                        zone.state = ZoneState.PARTIAL
        eng.space = space
        eng.current_lsn = last_lsn
        eng.run_dir = run_dir
        eng.wal = MappingWal(run_dir / "mapping.wal")
        return eng

    # ------------------------------------------------------------------
    # audit helpers

    def audit_against_device(self):
        """Device host writes must equal the engine's categorized writes."""
        c = self.counters
        host = self.device.counters.host_write_pages
        if host != c.db_issued():
            raise InvariantBreach(
                f"device host writes {host} != engine issued {c.db_issued()}")
