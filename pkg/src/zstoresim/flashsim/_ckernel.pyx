# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled device kernel.

Semantics-twin of ``_pykernel.py``; both mutate the same numpy state arrays
and must stay behaviourally identical (tests/test_kernel_equivalence.py).
Keep edits mirrored.
"""

KERNEL_NAME = "cython"

cdef enum:
    S_HOST = 0
    S_NAND = 1
    S_GCREL = 2
    S_ERASE = 3
    S_FREE = 4
    S_READS = 5


def append_pages(signed char[::1] sb_state, int[::1] sb_wp, int[::1] sb_valid,
                 long long[::1] p2l, long long[::1] l2p,
                 int[::1] stream_sb, int[::1] stream_ru_left,
                 long long[::1] stats, long long[::1] lbas,
                 int stream, int sb_pages, int ru_pages, int reloc):
    cdef Py_ssize_t n_sb = sb_state.shape[0]
    cdef Py_ssize_t i, j
    cdef long long lba, old, phys
    cdef int sb, wp
    for i in range(lbas.shape[0]):
        lba = lbas[i]
        sb = stream_sb[stream]
        if sb >= 0 and (sb_wp[sb] >= sb_pages or stream_ru_left[stream] <= 0):
            sb_state[sb] = 2
            sb = -1
        if sb < 0:
            for j in range(n_sb):
                if sb_state[j] == 0:
                    sb = <int>j
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
        phys = <long long>sb * sb_pages + wp
        sb_wp[sb] = wp + 1
        stream_ru_left[stream] -= 1
        old = l2p[lba]
        if old >= 0:
            p2l[old] = -1
            sb_valid[<Py_ssize_t>(old // sb_pages)] -= 1
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


def gc_step(signed char[::1] sb_state, int[::1] sb_wp, int[::1] sb_valid,
            long long[::1] p2l, long long[::1] l2p,
            int[::1] stream_sb, int[::1] stream_ru_left,
            long long[::1] stats, int gc_stream, int sb_pages, int ru_pages):
    cdef Py_ssize_t n_sb = sb_state.shape[0]
    cdef Py_ssize_t j
    cdef int victim = -1
    cdef long long best = <long long>1 << 62
    cdef long long lba, phys, base
    cdef int sb, wp, off, relocated = 0
    for j in range(n_sb):
        if sb_state[j] == 2 and sb_valid[j] < best:
            best = sb_valid[j]
            victim = <int>j
    if victim < 0:
        return -2

    base = <long long>victim * sb_pages
    for off in range(sb_wp[victim]):
        lba = p2l[base + off]
        if lba < 0:
            continue
        sb = stream_sb[gc_stream]
        if sb >= 0 and (sb_wp[sb] >= sb_pages or stream_ru_left[gc_stream] <= 0):
            sb_state[sb] = 2
            sb = -1
        if sb < 0:
            for j in range(n_sb):
                if sb_state[j] == 0:
                    sb = <int>j
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
        phys = <long long>sb * sb_pages + wp
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
