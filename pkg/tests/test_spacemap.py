import numpy as np
import pytest

from zstoresim.errors import NotFoundError, PlacementError, ResourceError
from zstoresim.spacemap import (
    MapRecord,
    StorageSpace,
    ZoneState,
)


def active_space(zone_pages=8, n_zones=6, opens=(0,)):
    space = StorageSpace(zone_pages, n_zones)
    for z in opens:
        space.activate_zone(z, max_open=4)
    return space


def test_first_mapping_returns_none_and_counts():
    space = active_space()
    space.append_slot(0, [(42, 0, 4096, None)])
    assert space.zones[0].valid_pages == 1
    assert space.lookup(42).slot_lba == 0


def test_remap_within_zone_counts_both_sides():
    space = active_space()
    space.append_slot(0, [(42, 0, 4096, None)])
    space.append_slot(0, [(42, 0, 4096, None)])
    z = space.zones[0]
    assert z.valid_pages == 1
    assert z.invalid_pages == 1
    assert space.lookup(42).slot_lba == 1


def test_lookup_unmapped_raises():
    space = active_space()
    with pytest.raises(NotFoundError):
        space.lookup(7)


def test_append_outside_active_zone_rejected():
    space = active_space()
    with pytest.raises(PlacementError):
        space.append_slot(3, [(1, 0, 100, None)])


def test_open_zone_limit():
    space = StorageSpace(4, 8)
    for z in range(3):
        space.activate_zone(z, max_open=3)
    with pytest.raises(ResourceError):
        space.activate_zone(3, max_open=3)


def test_new_group_after_previous_fully_closes():
    space = StorageSpace(2, 8)
    space.activate_zone(0, 4)
    space.activate_zone(1, 4)
    assert len(space.groups.groups) == 1
    space.append_slot(0, [(1, 0, 10, None)])
    space.deactivate_zone(0)
    space.activate_zone(2, 4)  # group 0 still has zone 1 active: joins it
    assert len(space.groups.groups) == 1
    space.deactivate_zone(1)
    space.deactivate_zone(2)
    space.activate_zone(3, 4)  # all members closed: a fresh group record
    assert len(space.groups.groups) == 2


def test_group_append_counters():
    space = StorageSpace(4, 4)
    space.activate_zone(0, 2)
    space.activate_zone(1, 2)
    for _ in range(3):
        space.append_slot(0, [])
    space.append_slot(1, [])
    g = space.groups.current
    assert g.appended_of(0) == 3
    assert g.appended_of(1) == 1


def test_random_trace_conservation_against_recount_oracle():
    rng = np.random.default_rng(13)
    zone_pages, n_zones = 16, 8
    space = StorageSpace(zone_pages, n_zones)
    space.activate_zone(0, 2)
    current = 0
    for _ in range(10_000):
        zone = space.zones[current]
        if zone.room == 0:
            space.deactivate_zone(current)
            # reclaim the deadest full zone if no empty zone remains
            empties = space.zones_in(ZoneState.EMPTY)
            if not empties:
                victim = min(space.zones_in(ZoneState.FULL),
                             key=lambda z: (z.valid_pages, z.zone_id))
                for lba in [victim.lba_base + o for o in range(victim.zone_pages)]:
                    for pid in space.slot_pids(lba):
                        # relocate into the current slot later; drop here
                        del space.pid2offset[pid]
                        space.occupants[lba].remove(pid)
                        if not space.occupants[lba]:
                            del space.occupants[lba]
                        victim.valid_pages -= 1
                        victim.live_slots -= 1
                space.reclaim_zone(victim.zone_id)
                empties = [victim]
            current = empties[0].zone_id
            space.activate_zone(current, 2)
            continue
        n_entries = int(rng.integers(0, 4))
        pids = rng.integers(0, 400, size=n_entries)
        entries = [(int(p), 56 + 13 * i, 512, float(rng.integers(1, 100)))
                   for i, p in enumerate(dict.fromkeys(pids.tolist()))]
        space.append_slot(current, entries)

    # brute-force recount
    assert sum(z.valid_pages for z in space.zones) == len(space.pid2offset)
    per_zone = {z.zone_id: 0 for z in space.zones}
    per_slot: dict[int, int] = {}
    for pid, rec in space.pid2offset.items():
        per_zone[rec.slot_lba // zone_pages] += 1
        per_slot[rec.slot_lba] = per_slot.get(rec.slot_lba, 0) + 1
    for z in space.zones:
        assert z.valid_pages == per_zone[z.zone_id]
    # reverse index is the exact inverse of the forward table
    for lba, pids in space.occupants.items():
        assert sorted(pids) == sorted(
            p for p, rec in space.pid2offset.items() if rec.slot_lba == lba)
        assert per_slot[lba] == len(pids)
    # live slot counters agree
    for z in space.zones:
        live = sum(1 for lba in space.occupants
                   if lba // zone_pages == z.zone_id)
        assert z.live_slots == live


def test_reassign_ranks_basic_order():
    space = StorageSpace(4, 3)
    space.activate_zone(0, 3)
    for _ in range(4):
        space.append_slot(0, [(10, 0, 100, 5.0)])
    space.deactivate_zone(0)          # zone 0 full
    space.activate_zone(1, 3)
    space.append_slot(1, [(11, 0, 100, 7.0)])
    space.deactivate_zone(1)          # zone 1 partial
    space.reassign_edt_ranks()        # zone 2 empty
    by_zone = {z.zone_id: z.edt_range_rank for z in space.zones}
    assert by_zone == {2: 0, 1: 1, 0: 2}


def test_reassign_ranks_all_full_desc_avg_edt():
    space = StorageSpace(2, 3)
    for z, edt in zip(range(3), (10.0, 30.0, 20.0)):
        space.activate_zone(z, 3)
        space.append_slot(z, [(100 + z, 0, 64, edt)])
        space.append_slot(z, [(200 + z, 0, 64, edt)])
        space.deactivate_zone(z)
    space.reassign_edt_ranks()
    ranks = {z.zone_id: z.edt_range_rank for z in space.zones}
    assert ranks == {1: 0, 2: 1, 0: 2}  # descending avg EDT


def test_reassign_ranks_tie_by_zone_id():
    space = StorageSpace(2, 4)
    space.reassign_edt_ranks()
    ranks = [z.edt_range_rank for z in space.zones]
    assert ranks == [0, 1, 2, 3]


def test_segment_death_tracking():
    space = StorageSpace(4, 4)
    space.activate_zone(0, 2)
    for _ in range(4):
        space.append_slot(0, [])
    space.deactivate_zone(0)
    g = space.groups.groups[0]
    seg = g.segments[0]
    assert not space.segment_dead(seg)
    # simulate the zone being reclaimed and fully overwritten
    space.reclaim_zone(0)
    space.activate_zone(0, 2)
    for _ in range(4):
        space.append_slot(0, [])
    assert space.segment_dead(seg)


def test_snapshot_round_trip():
    space = active_space(zone_pages=4, n_zones=4)
    space.append_slot(0, [(5, 56, 1000, 3.0), (9, 1100, 800, None)])
    space.append_slot(0, [(5, 56, 900, 4.0)])
    space.deactivate_zone(0)
    blob = space.snapshot_bytes()
    assert blob[:4] == b"ZSSM"
    again = StorageSpace.from_snapshot(blob, 4, 4)
    assert set(again.pid2offset) == {5, 9}
    assert again.pid2offset[5].slot_lba == 1
    assert again.pid2offset[9].offset == 1100
    groups = again.groups.groups
    assert len(groups) == 1
    assert groups[0].segments[0].appended == 2
