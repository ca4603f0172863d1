"""Per-page write history and expected deathtime (EDT) estimation.

The tracker keeps the last four persist LSNs per page and extrapolates the
next write time from the observed interval. GC relocations never touch the
history. Pages with too little signal fall back to grouping by tree id;
pages that keep surviving GC without a second write are treated as the
coldest data.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

from zstoresim.errors import OrderingError

HISTORY_DEPTH = 4


class EdtClass(IntEnum):
    ESTIMATED = 0
    FALLBACK_BY_TREE = 1
    COLD_MAX = 2


@dataclass(frozen=True)
class Edt:
    klass: EdtClass
    value: float  # LSN estimate, tree id, or 0 for cold-max

    @property
    def sort_key(self) -> tuple[int, float]:
        return (int(self.klass), self.value)

    def __lt__(self, other: "Edt") -> bool:
        return self.sort_key < other.sort_key

    def __le__(self, other: "Edt") -> bool:
        return self.sort_key <= other.sort_key


COLD_MAX = Edt(EdtClass.COLD_MAX, 0.0)


@dataclass(frozen=True)
class WriteHistory:
    lsns: tuple[int, ...]  # oldest first, at most HISTORY_DEPTH entries

    @property
    def count(self) -> int:
        return len(self.lsns)


class DeathtimeTracker:
    """Owns per-pid write histories; single-writer per pid."""

    def __init__(self):
        self._hist: dict[int, list[int]] = {}
        self._tree: dict[int, int] = {}
        self._cold: set[int] = set()
        self._gc_survivals: dict[int, int] = {}

    def record_write(self, pid: int, lsn: int, is_gc_write: bool = False,
                     tree_id: int | None = None) -> WriteHistory:
        hist = self._hist.get(pid)
        if is_gc_write:
            return WriteHistory(tuple(hist or ()))
        if hist is None:
            hist = []
            self._hist[pid] = hist
        elif hist and lsn < hist[-1]:
            raise OrderingError(f"lsn {lsn} regresses below {hist[-1]} for pid {pid}")
        hist.append(lsn)
        if len(hist) > HISTORY_DEPTH:
            del hist[0]
        if tree_id is not None:
            self._tree[pid] = tree_id
        self._cold.discard(pid)
        self._gc_survivals.pop(pid, None)
        return WriteHistory(tuple(hist))

    def history(self, pid: int) -> WriteHistory:
        return WriteHistory(tuple(self._hist.get(pid, ())))

    def seed_history(self, pid: int, lsns: tuple[int, ...], tree_id: int):
        """Adopt a history read back from a persisted page header."""
        if pid not in self._hist and lsns:
            self._hist[pid] = list(lsns[-HISTORY_DEPTH:])
            self._tree[pid] = tree_id

    def note_gc_survival(self, pid: int):
        """Called when GC relocates a page that still lacks interval signal.

        Surviving a second GC cycle without any rewrite flags the page as
        never-rewritten (cold-max).
        """
        n = self._gc_survivals.get(pid, 0) + 1
        self._gc_survivals[pid] = n
        if n >= 2:
            self._cold.add(pid)

    def mark_cold(self, pid: int):
        self._cold.add(pid)

    def estimate_edt(self, pid: int, current_lsn: int) -> Edt:
        if pid in self._cold:
            return COLD_MAX
        hist = self._hist.get(pid)
        if hist and len(hist) >= 2:
            k = len(hist)
            return Edt(EdtClass.ESTIMATED,
                       current_lsn + (hist[-1] - hist[0]) / (k - 1))
        return Edt(EdtClass.FALLBACK_BY_TREE, float(self._tree.get(pid, 0)))
