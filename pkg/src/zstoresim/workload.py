"""Seeded page-access generator and a minimal buffer-pool model.

YCSB-A style: a fixed page population, zipfian access skew, a configurable
update fraction. A clock (second-chance) pool turns updates into dirty
pages and evicts them in batches through the engine flush path. The driver
runs the load phase, warms until cumulative device writes reach at least
four times the device capacity, then measures over the final quarter of
operations.

Page bodies are synthesized from (seed, pid, version) with the version
embedded in the first eight body bytes, so a page reloaded from disk
reproduces its exact on-disk content.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from zstoresim.codec import PageImage, synthetic_page_body
from zstoresim.errors import ConfigError

_DRAW_CHUNK = 4096


@dataclass
class WorkloadConfig:
    page_count: int
    zipf_theta: float = 0.8
    update_fraction: float = 0.5
    total_ops: int = 50_000
    seed: int = 1
    pool_fraction: float = 0.10
    eviction_batch: int = 64
    compress_target: float = 0.5
    tree_count: int = 8
    steady_capacity_multiple: float = 4.0

    def __post_init__(self):
        if self.page_count <= 0:
            raise ConfigError("page_count must be positive")
        if self.zipf_theta < 0:
            raise ConfigError("zipf_theta must be >= 0")
        if not 0.0 <= self.update_fraction <= 1.0:
            raise ConfigError("update_fraction must be in [0, 1]")
        if not 0.0 < self.pool_fraction < 1.0:
            raise ConfigError("pool_fraction must be in (0, 1)")
        if self.eviction_batch < 1:
            raise ConfigError("eviction_batch must be >= 1")


@dataclass
class PoolStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    dirty_flushes: int = 0

    @property
    def accesses(self) -> int:
        return self.hits + self.misses

    @property
    def hit_ratio(self) -> float:
        if self.accesses == 0:
            return 0.0
        return self.hits / self.accesses

    def copy(self) -> "PoolStats":
        return PoolStats(self.hits, self.misses, self.evictions, self.dirty_flushes)


def make_body(seed: int, pid: int, version: int, target_ratio: float) -> bytes:
    raw = synthetic_page_body(seed, pid, version, target_ratio)
    return struct.pack("<Q", version) + raw[8:]


def body_version(body: bytes) -> int:
    return struct.unpack_from("<Q", body)[0]


class ZipfGenerator:
    """Draws pids with P(rank r) proportional to 1/r^theta over a fixed
    seeded permutation of the page population."""

    def __init__(self, page_count: int, theta: float, rng: np.random.Generator):
        self.page_count = page_count
        ranks = np.arange(1, page_count + 1, dtype=np.float64)
        weights = ranks ** (-theta)
        self._cdf = np.cumsum(weights / weights.sum())
        self._perm = rng.permutation(page_count)
        self._rng = rng
        self._buf = np.empty(0, dtype=np.int64)
        self._pos = 0

    def sample(self) -> int:
        if self._pos >= len(self._buf):
            u = self._rng.random(_DRAW_CHUNK)
            self._buf = np.searchsorted(self._cdf, u, side="left")
            self._pos = 0
        rank = self._buf[self._pos]
        self._pos += 1
        return int(self._perm[rank])

    def top_rank_pid(self) -> int:
        return int(self._perm[0])


class BufferPool:
    """Clock (second-chance) replacement with a dirty bit per frame.

    Dirty victims enter a pending write-back list that flushes in batches;
    an access that misses the frames but hits the pending list readmits the
    unflushed version instead of rereading stale data from the device.
    """

    HIT = "hit"
    MISS = "miss"

    def __init__(self, capacity: int, eviction_batch: int):
        self.capacity = capacity
        self.eviction_batch = eviction_batch
        self.frame_of: dict[int, int] = {}
        self.pid = np.full(capacity, -1, dtype=np.int64)
        self.ref = np.zeros(capacity, dtype=np.int8)
        self.dirty = np.zeros(capacity, dtype=np.int8)
        self.version = np.zeros(capacity, dtype=np.int64)
        self.hand = 0
        self.used = 0
        self.stats = PoolStats()
        self.pending: dict[int, int] = {}  # pid -> dirty version awaiting flush

    def contains(self, pid: int) -> bool:
        return pid in self.frame_of

    def version_of(self, pid: int) -> int:
        return int(self.version[self.frame_of[pid]])

    def is_dirty(self, pid: int) -> bool:
        return bool(self.dirty[self.frame_of[pid]])

    def access(self, pid: int, make_dirty: bool) -> str:
        frame = self.frame_of.get(pid)
        if frame is not None:
            self.stats.hits += 1
            self.ref[frame] = 1
            if make_dirty:
                self.dirty[frame] = 1
                self.version[frame] += 1
            return self.HIT
        pending = self.pending.pop(pid, None)
        if pending is not None:
            self.stats.hits += 1
            self.admit(pid, pending + (1 if make_dirty else 0), dirty=True)
            return self.HIT
        self.stats.misses += 1
        return self.MISS

    def admit(self, pid: int, version: int, dirty: bool):
        frame = self._free_frame()
        self.frame_of[pid] = frame
        self.pid[frame] = pid
        self.ref[frame] = 1
        self.dirty[frame] = 1 if dirty else 0
        self.version[frame] = version

    def _free_frame(self) -> int:
        if self.used < self.capacity:
            frame = self.used
            self.used += 1
            return frame
        while True:
            frame = self.hand
            self.hand = (self.hand + 1) % self.capacity
            if self.ref[frame]:
                self.ref[frame] = 0
                continue
            victim = int(self.pid[frame])
            self.stats.evictions += 1
            if self.dirty[frame]:
                self.pending[victim] = int(self.version[frame])
            del self.frame_of[victim]
            self.pid[frame] = -1
            self.dirty[frame] = 0
            return frame

    def drain(self, force: bool = False) -> list[tuple[int, int]]:
        if len(self.pending) >= self.eviction_batch or (force and self.pending):
            batch = list(self.pending.items())
            self.pending.clear()
            self.stats.dirty_flushes += len(batch)
            return batch
        return []


@dataclass
class RunResult:
    pool: PoolStats
    window_ops: int
    total_ops: int
    engine_window: object = None
    device_window: tuple = ()
    steady_state: bool = False


class WorkloadDriver:
    def __init__(self, engine, device, config: WorkloadConfig):
        self.engine = engine
        self.device = device
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.zipf = ZipfGenerator(config.page_count, config.zipf_theta, self.rng)
        pool_frames = max(1, int(config.page_count * config.pool_fraction))
        self.pool = BufferPool(pool_frames, config.eviction_batch)
        self.lsn = 0
        engine.pool_peek = self._peek_clean

    def _peek_clean(self, pid: int):
        """GC reads from the pool only when the cached copy matches disk."""
        if self.pool.contains(pid) and not self.pool.is_dirty(pid):
            return self._page(pid, self.pool.version_of(pid))
        return None

    def _page(self, pid: int, version: int) -> PageImage:
        body = make_body(self.config.seed, pid, version, self.config.compress_target)
        return PageImage(pid=pid, body=body,
                         tree_id=pid % self.config.tree_count)

    def _flush(self, batch: list[tuple[int, int]]):
        # the LSN clock advances with operations, giving write histories
        # operation-granular intervals
        self.lsn += 1
        pages = [self._page(pid, version) for pid, version in batch]
        self.engine.flush_batch(pages, self.lsn)

    def _tick(self):
        self.lsn += 1

    def load(self):
        """Write every pid exactly once before measurement begins."""
        cfg = self.config
        step = cfg.eviction_batch
        for start in range(0, cfg.page_count, step):
            self._flush([(pid, 0)
                         for pid in range(start, min(start + step, cfg.page_count))])

    def _one_op(self):
        cfg = self.config
        self._tick()
        pid = self.zipf.sample()
        is_update = self.rng.random() < cfg.update_fraction
        if self.pool.access(pid, is_update) == BufferPool.MISS:
            page = self.engine.read_page(pid)
            version = body_version(page.body)
            self.pool.admit(pid, version + (1 if is_update else 0), dirty=is_update)
        batch = self.pool.drain()
        if batch:
            self._flush(batch)

    def run(self) -> RunResult:
        """Load, warm until steady state, measure the final quarter of ops."""
        cfg = self.config
        self.load()

        steady_target = int(self.device.config.capacity_pages
                            * cfg.steady_capacity_multiple)
        ops = 0
        while ops < cfg.total_ops or (
                self.device.counters.host_write_pages < steady_target):
            self._one_op()
            ops += 1
            if ops > 200 * cfg.total_ops:
                break  # refuse to spin forever on a misconfigured run
        steady = self.device.counters.host_write_pages >= steady_target

        window_ops = max(1, ops // 3)  # final 25% of the total run
        pool_snap = self.pool.stats.copy()
        engine_snap = self.engine.counters.copy()
        dev_snap = self.device.counters
        for _ in range(window_ops):
            self._one_op()
        batch = self.pool.drain(force=True)
        if batch:
            self._flush(batch)

        pool_end = self.pool.stats
        window_pool = PoolStats(
            hits=pool_end.hits - pool_snap.hits,
            misses=pool_end.misses - pool_snap.misses,
            evictions=pool_end.evictions - pool_snap.evictions,
            dirty_flushes=pool_end.dirty_flushes - pool_snap.dirty_flushes,
        )
        eng_end = self.engine.counters
        dev_end = self.device.counters
        engine_window = type(engine_snap)(**{
            k: getattr(eng_end, k) - getattr(engine_snap, k)
            for k in engine_snap.__dict__})
        device_window = (
            dev_end.host_write_pages - dev_snap.host_write_pages,
            dev_end.nand_write_pages - dev_snap.nand_write_pages,
            dev_end.gc_relocated_pages - dev_snap.gc_relocated_pages,
        )
        return RunResult(pool=window_pool, window_ops=window_ops,
                         total_ops=ops + window_ops,
                         engine_window=engine_window,
                         device_window=device_window,
                         steady_state=steady)
