"""Pure-Python device kernel.

Semantics-twin of the compiled kernel in ``_ckernel.pyx``; both mutate the
same numpy state arrays and must stay behaviourally identical (checked by
tests/test_kernel_equivalence.py). Keep edits mirrored.

Stats slots: 0=host, 1=nand, 2=gc_relocated, 3=erase, 4=free_sb, 5=reads.
Superblock states: 0=free, 1=active, 2=closed.
"""

KERNEL_NAME = "python"

S_HOST = 0
S_NAND = 1
S_GCREL = 2
S_ERASE = 3
S_FREE = 4
S_READS = 5


def append_pages(sb_state, sb_wp, sb_valid, p2l, l2p, stream_sb, stream_ru_left,
                 stats, lbas, stream, sb_pages, ru_pages, reloc):
    """Append each lba in order to the stream's active superblock.

    Invalidates the previous physical copy of every lba. Does not trigger
    GC; the wrapper owns the free-threshold policy. Returns 0 on success,
    -1 if a free superblock was needed and none existed.
    """
    n_sb = sb_state.shape[0]
    for i in range(lbas.shape[0]):
        lba = lbas[i]
        sb = stream_sb[stream]
        if sb >= 0 and (sb_wp[sb] >= sb_pages or stream_ru_left[stream] <= 0):
            sb_state[sb] = 2
            sb = -1
        if sb < 0:
            for j in range(n_sb):
                if sb_state[j] == 0:
                    sb = j
                    break
            if sb < 0:
                stream_sb[stream] = -1
                return -1
            sb_state[sb] = 1
            stats[S_FREE] -= 1
            stream_sb[stream] = sb
            if stream_ru_left[stream] <= 0:
                stream_ru_left[stream] = ru_pages
        wp = sb_wp[sb]
        phys = sb * sb_pages + wp
        sb_wp[sb] = wp + 1
        stream_ru_left[stream] -= 1
        old = l2p[lba]
        if old >= 0:
            p2l[old] = -1
            sb_valid[old // sb_pages] -= 1
        l2p[lba] = phys
        p2l[phys] = lba
        sb_valid[sb] += 1
        if wp + 1 >= sb_pages:
            sb_state[sb] = 2
            stream_sb[stream] = -1
        stats[S_NAND] += 1
        if reloc:
            stats[S_GCREL] += 1
        else:
            stats[S_HOST] += 1
    return 0


def gc_step(sb_state, sb_wp, sb_valid, p2l, l2p, stream_sb, stream_ru_left,
            stats, gc_stream, sb_pages, ru_pages):
    """Erase the closed superblock with the fewest valid pages.

    Valid pages are relocated to the GC stream first. Returns the number of
    relocated pages, -2 if no closed superblock exists, -1 if relocation ran
    out of free superblocks.
    """
    n_sb = sb_state.shape[0]
    victim = -1
    best = 1 << 62
    for j in range(n_sb):
        if sb_state[j] == 2 and sb_valid[j] < best:
            best = sb_valid[j]
            victim = j
    if victim < 0:
        return -2

    base = victim * sb_pages
    relocated = 0
    for off in range(sb_wp[victim]):
        lba = p2l[base + off]
        if lba < 0:
            continue
        # inline single-page append to the GC stream
        sb = stream_sb[gc_stream]
        if sb >= 0 and (sb_wp[sb] >= sb_pages or stream_ru_left[gc_stream] <= 0):
            sb_state[sb] = 2
            sb = -1
        if sb < 0:
            for j in range(n_sb):
                if sb_state[j] == 0:
                    sb = j
                    break
            if sb < 0:
                stream_sb[gc_stream] = -1
                return -1
            sb_state[sb] = 1
            stats[S_FREE] -= 1
            stream_sb[gc_stream] = sb
            if stream_ru_left[gc_stream] <= 0:
                stream_ru_left[gc_stream] = ru_pages
        wp = sb_wp[sb]
        phys = sb * sb_pages + wp
        sb_wp[sb] = wp + 1
        stream_ru_left[gc_stream] -= 1
        p2l[base + off] = -1
        sb_valid[victim] -= 1
        l2p[lba] = phys
        p2l[phys] = lba
        sb_valid[sb] += 1
        if wp + 1 >= sb_pages:
            sb_state[sb] = 2
            stream_sb[gc_stream] = -1
        stats[S_NAND] += 1
        stats[S_GCREL] += 1
        relocated += 1

    sb_wp[victim] = 0
    sb_valid[victim] = 0
    sb_state[victim] = 0
    stats[S_FREE] += 1
    stats[S_ERASE] += 1
    return relocated
