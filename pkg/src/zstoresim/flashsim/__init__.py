"""Deterministic simulated flash device.

Exposes standard, ZNS, and FDP modes over the same superblock state:
append streams, greedy internal GC, and physical-write counters that stand
in for OCP telemetry. The per-page append/GC inner loop is the hot kernel;
a compiled version is used when available and a pure-Python twin otherwise
(set ZSTORESIM_PURE=1 to force the fallback).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from zstoresim.errors import (
    AddressError,
    ConfigError,
    DeviceFullError,
    HintError,
    ModeError,
    ResourceError,
    ZoneStateError,
)

if os.environ.get("ZSTORESIM_PURE"):
    from zstoresim.flashsim import _pykernel as _kernel
else:
    try:
        from zstoresim.flashsim import _ckernel as _kernel  # type: ignore
    except ImportError:
        from zstoresim.flashsim import _pykernel as _kernel

KERNEL_NAME = _kernel.KERNEL_NAME

PAGE_BYTES = 4096

MODE_STANDARD = "standard"
MODE_ZNS = "zns"
MODE_FDP = "fdp"

SB_FREE = 0
SB_ACTIVE = 1
SB_CLOSED = 2

_S_HOST = 0
_S_NAND = 1
_S_GCREL = 2
_S_ERASE = 3
_S_FREE = 4
_S_READS = 5

_STATE_NAMES = {SB_FREE: "free", SB_ACTIVE: "active", SB_CLOSED: "closed"}


@dataclass
class DeviceConfig:
    capacity_pages: int
    superblock_pages: int = 256
    op_fraction: float = 0.10
    free_sb_threshold: int = 2
    mode: str = MODE_STANDARD
    ruh_count: int = 1
    ru_pages: int | None = None
    gc_stream_separate: bool = True
    max_open_zones: int | None = None  # zns only; None = unlimited

    def __post_init__(self):
        if self.capacity_pages <= 0 or self.superblock_pages <= 0:
            raise ConfigError("capacity_pages and superblock_pages must be positive")
        if self.mode not in (MODE_STANDARD, MODE_ZNS, MODE_FDP):
            raise ConfigError(f"unknown device mode {self.mode!r}")
        if not 0.0 <= self.op_fraction <= 1.0:
            raise ConfigError("op_fraction must be in [0, 1]")
        if self.free_sb_threshold < 1:
            raise ConfigError("free_sb_threshold must be >= 1")
        if self.mode == MODE_ZNS and self.capacity_pages % self.superblock_pages:
            raise ConfigError("zns capacity must be a multiple of the zone size")
        if self.mode == MODE_FDP:
            if self.ruh_count < 1:
                raise ConfigError("fdp requires ruh_count >= 1")
            ru = self.ru_pages if self.ru_pages is not None else self.superblock_pages
            if ru <= 0 or ru % self.superblock_pages:
                raise ConfigError("ru_pages must be a positive multiple of superblock_pages")

    @property
    def effective_ru_pages(self) -> int:
        if self.mode == MODE_FDP and self.ru_pages is not None:
            return self.ru_pages
        return self.superblock_pages

    @property
    def logical_superblocks(self) -> int:
        return math.ceil(self.capacity_pages / self.superblock_pages)

    @property
    def physical_superblocks(self) -> int:
        if self.mode == MODE_ZNS:
            # host-managed zones: no internal GC, no OP space
            return self.logical_superblocks
        sized = math.ceil(self.logical_superblocks * (1.0 + self.op_fraction))
        return max(sized, self.logical_superblocks + self.free_sb_threshold)


@dataclass(frozen=True)
class FlashCounters:
    host_write_pages: int
    nand_write_pages: int
    gc_relocated_pages: int
    erase_count: int
    read_pages: int

    @property
    def ssd_waf(self) -> float:
        if self.host_write_pages == 0:
            return 1.0
        return self.nand_write_pages / self.host_write_pages


class FlashDevice:
    """A single simulated device instance. All calls externally serialized."""

    def __init__(self, config: DeviceConfig):
        self.config = config
        self.sb_pages = config.superblock_pages
        self.n_superblocks = config.physical_superblocks
        n_phys = self.n_superblocks * self.sb_pages

        self.sb_state = np.zeros(self.n_superblocks, dtype=np.int8)
        self.sb_wp = np.zeros(self.n_superblocks, dtype=np.int32)
        self.sb_valid = np.zeros(self.n_superblocks, dtype=np.int32)
        self.p2l = np.full(n_phys, -1, dtype=np.int64)
        self.l2p = np.full(config.capacity_pages, -1, dtype=np.int64)

        if config.mode == MODE_FDP:
            self._n_streams = config.ruh_count + 1
            self._gc_stream = config.ruh_count if config.gc_stream_separate else 0
        else:
            self._n_streams = 2
            self._gc_stream = 1 if config.gc_stream_separate else 0
        self.stream_sb = np.full(self._n_streams, -1, dtype=np.int32)
        self.stream_ru_left = np.zeros(self._n_streams, dtype=np.int32)
        self._ru_pages = config.effective_ru_pages if config.mode == MODE_FDP else (1 << 30)

        self.stats = np.zeros(8, dtype=np.int64)
        self.stats[_S_FREE] = self.n_superblocks

        self._media: np.ndarray | None = None
        self._zns_open: set[int] = set()

    # ------------------------------------------------------------------
    # helpers

    def _check_lbas(self, lbas: np.ndarray):
        if lbas.size and (int(lbas.min()) < 0 or int(lbas.max()) >= self.config.capacity_pages):
            raise AddressError("lba out of range")

    def _media_array(self) -> np.ndarray:
        if self._media is None:
            self._media = np.zeros((self.config.capacity_pages, PAGE_BYTES), dtype=np.uint8)
        return self._media

    def _store_payloads(self, lbas, payloads):
        if payloads is None:
            return
        media = self._media_array()
        for lba, buf in zip(lbas, payloads):
            media[lba] = np.frombuffer(buf, dtype=np.uint8)

    def _append_stream(self, lbas: np.ndarray, stream: int, run_gc: bool):
        pos = 0
        n = lbas.shape[0]
        while pos < n:
            chunk = lbas[pos : pos + self.sb_pages]
            rc = _kernel.append_pages(
                self.sb_state, self.sb_wp, self.sb_valid, self.p2l, self.l2p,
                self.stream_sb, self.stream_ru_left, self.stats, chunk,
                stream, self.sb_pages, self._ru_pages, 0,
            )
            if rc == -1:
                raise DeviceFullError("no free superblock for host append")
            pos += chunk.shape[0]
            if run_gc:
                self._gc_to_threshold()

    def _gc_to_threshold(self):
        guard = 4 * self.n_superblocks
        while self.stats[_S_FREE] < self.config.free_sb_threshold:
            self.device_gc_step()
            guard -= 1
            if guard <= 0:
                raise DeviceFullError("device GC cannot restore the free threshold")

    # ------------------------------------------------------------------
    # host interface

    def host_write(self, lbas, payloads=None):
        """Append 4 KiB pages in order to the single host stream."""
        if self.config.mode == MODE_ZNS:
            raise ModeError("host_write not available in zns mode")
        arr = np.asarray(lbas, dtype=np.int64)
        self._check_lbas(arr)
        self._store_payloads(arr, payloads)
        self._append_stream(arr, 0, run_gc=True)

    def host_write_hinted(self, lbas, plid: int, payloads=None):
        """Append pages to the reclaim-unit stream owned by handle plid."""
        if self.config.mode != MODE_FDP:
            raise ModeError("placement hints require fdp mode")
        if not 0 <= plid < self.config.ruh_count:
            raise HintError(f"plid {plid} out of range")
        arr = np.asarray(lbas, dtype=np.int64)
        self._check_lbas(arr)
        self._store_payloads(arr, payloads)
        self._append_stream(arr, plid, run_gc=True)

    def ruh_update(self, plid: int):
        """Start a fresh reclaim unit for handle plid (NVMe I/O-management update)."""
        if self.config.mode != MODE_FDP:
            raise ModeError("ruh_update requires fdp mode")
        if not 0 <= plid < self.config.ruh_count:
            raise HintError(f"plid {plid} out of range")
        sb = self.stream_sb[plid]
        if sb >= 0:
            self.sb_state[sb] = SB_CLOSED
            self.stream_sb[plid] = -1
        self.stream_ru_left[plid] = 0

    # ------------------------------------------------------------------
    # zns interface

    def _zns_check(self, zone_id: int):
        if self.config.mode != MODE_ZNS:
            raise ModeError("zone commands require zns mode")
        if not 0 <= zone_id < self.n_superblocks:
            raise AddressError(f"zone {zone_id} out of range")

    def zone_append(self, zone_id: int, payloads) -> int:
        """Append pages at the zone write pointer; returns the first LBA."""
        self._zns_check(zone_id)
        if isinstance(payloads, int):
            count, bufs = payloads, None
        else:
            count, bufs = len(payloads), payloads
        wp = int(self.sb_wp[zone_id])
        if wp + count > self.sb_pages:
            raise ZoneStateError(f"zone {zone_id} full ({wp}+{count}>{self.sb_pages})")
        if wp == 0 and count > 0:
            limit = self.config.max_open_zones
            if limit is not None and zone_id not in self._zns_open and len(self._zns_open) >= limit:
                raise ResourceError("open-zone limit exceeded")
            self._zns_open.add(zone_id)
        base = zone_id * self.sb_pages
        lbas = np.arange(base + wp, base + wp + count, dtype=np.int64)
        self._store_payloads(lbas, bufs)
        self.p2l[base + wp : base + wp + count] = lbas
        self.l2p[base + wp : base + wp + count] = lbas
        self.sb_valid[zone_id] += count
        new_wp = wp + count
        self.sb_wp[zone_id] = new_wp
        if wp == 0 and count > 0:
            self.sb_state[zone_id] = SB_ACTIVE
            self.stats[_S_FREE] -= 1
        if new_wp == self.sb_pages:
            self.sb_state[zone_id] = SB_CLOSED
            self._zns_open.discard(zone_id)
        self.stats[_S_HOST] += count
        self.stats[_S_NAND] += count
        return base + wp

    def zone_reset(self, zone_id: int):
        """Reset the zone write pointer; all its pages become invalid."""
        self._zns_check(zone_id)
        wp = int(self.sb_wp[zone_id])
        if wp == 0:
            return  # idempotent on an empty zone
        base = zone_id * self.sb_pages
        live = self.p2l[base : base + wp]
        self.l2p[live[live >= 0]] = -1
        self.p2l[base : base + wp] = -1
        self.sb_valid[zone_id] = 0
        self.sb_wp[zone_id] = 0
        self.sb_state[zone_id] = SB_FREE
        self._zns_open.discard(zone_id)
        self.stats[_S_ERASE] += 1
        self.stats[_S_FREE] += 1

    # ------------------------------------------------------------------
    # internal GC and maintenance

    def device_gc_step(self) -> int:
        """Erase the min-valid closed superblock; returns relocated pages."""
        if self.config.mode == MODE_ZNS:
            raise ModeError("no device GC in zns mode")
        r = _kernel.gc_step(
            self.sb_state, self.sb_wp, self.sb_valid, self.p2l, self.l2p,
            self.stream_sb, self.stream_ru_left, self.stats,
            self._gc_stream, self.sb_pages, self._ru_pages,
        )
        if r == -2:
            raise DeviceFullError("no closed superblock to erase")
        if r == -1:
            raise DeviceFullError("no free superblock for GC relocation")
        return int(r)

    def discard(self, lbas):
        """Clear valid bits for the given addresses (experiment setup only)."""
        arr = np.asarray(lbas, dtype=np.int64)
        self._check_lbas(arr)
        phys = self.l2p[arr]
        phys = phys[phys >= 0]
        if phys.size:
            self.p2l[phys] = -1
            np.subtract.at(self.sb_valid, phys // self.sb_pages, 1)
            self.l2p[arr] = -1
        dead = (self.sb_valid == 0) & (self.sb_wp > 0)
        if dead.any():
            idx = np.nonzero(dead)[0]
            for sb in idx:
                base = sb * self.sb_pages
                self.p2l[base : base + self.sb_pages] = -1
            self.sb_wp[dead] = 0
            self.sb_state[dead] = SB_FREE
            self.stats[_S_FREE] = int((self.sb_state == SB_FREE).sum())
            drop = set(int(i) for i in idx)
            for s in range(self._n_streams):
                if int(self.stream_sb[s]) in drop:
                    self.stream_sb[s] = -1
                    self.stream_ru_left[s] = 0
            self._zns_open -= drop

    def discard_all(self):
        """Whole-device reset: discard every LBA and zero the counters."""
        self.discard(np.arange(self.config.capacity_pages, dtype=np.int64))
        self.stream_sb[:] = -1
        self.stream_ru_left[:] = 0
        self.stats[:] = 0
        self.stats[_S_FREE] = self.n_superblocks

    # ------------------------------------------------------------------
    # reads, counters, introspection

    def read_slot(self, lba: int) -> bytes:
        if not 0 <= lba < self.config.capacity_pages:
            raise AddressError("lba out of range")
        if self.l2p[lba] < 0:
            raise AddressError(f"read of unwritten lba {lba}")
        self.stats[_S_READS] += 1
        if self._media is None:
            return bytes(PAGE_BYTES)
        return self._media[lba].tobytes()

    @property
    def counters(self) -> FlashCounters:
        s = self.stats
        return FlashCounters(int(s[_S_HOST]), int(s[_S_NAND]), int(s[_S_GCREL]),
                             int(s[_S_ERASE]), int(s[_S_READS]))

    def free_superblocks(self) -> int:
        return int(self.stats[_S_FREE])

    def dump(self) -> str:
        lines = []
        for i in range(self.n_superblocks):
            state = _STATE_NAMES[int(self.sb_state[i])]
            lines.append(f"sb={i} state={state} wp={int(self.sb_wp[i])} valid={int(self.sb_valid[i])}")
        return "\n".join(lines)

    def snapshot(self):
        """Copy of placement state and counters, for determinism checks."""
        return (self.sb_state.copy(), self.sb_wp.copy(), self.sb_valid.copy(),
                self.p2l.copy(), self.l2p.copy(), tuple(int(x) for x in self.stats))
