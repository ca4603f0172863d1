"""The compiled kernel and the pure-Python fallback must be bit-identical."""

import numpy as np
import pytest

from zstoresim.flashsim import _pykernel

try:
    from zstoresim.flashsim import _ckernel
except ImportError:
    _ckernel = None

pytestmark = pytest.mark.skipif(_ckernel is None, reason="compiled kernel not built")


def fresh_state(n_sb=12, sb_pages=8, capacity=64, n_streams=3):
    return dict(
        sb_state=np.zeros(n_sb, dtype=np.int8),
        sb_wp=np.zeros(n_sb, dtype=np.int32),
        sb_valid=np.zeros(n_sb, dtype=np.int32),
        p2l=np.full(n_sb * sb_pages, -1, dtype=np.int64),
        l2p=np.full(capacity, -1, dtype=np.int64),
        stream_sb=np.full(n_streams, -1, dtype=np.int32),
        stream_ru_left=np.zeros(n_streams, dtype=np.int32),
        stats=np.zeros(8, dtype=np.int64),
    )


def run_trace(kernel, trace, sb_pages=8, ru_pages=16):
    st = fresh_state(sb_pages=sb_pages)
    st["stats"][4] = st["sb_state"].shape[0]
    rcs = []
    for op, arg in trace:
        if op == "append":
            lbas, stream = arg
            rcs.append(kernel.append_pages(
                st["sb_state"], st["sb_wp"], st["sb_valid"], st["p2l"], st["l2p"],
                st["stream_sb"], st["stream_ru_left"], st["stats"],
                np.asarray(lbas, dtype=np.int64), stream, sb_pages, ru_pages, 0))
        else:
            rcs.append(kernel.gc_step(
                st["sb_state"], st["sb_wp"], st["sb_valid"], st["p2l"], st["l2p"],
                st["stream_sb"], st["stream_ru_left"], st["stats"],
                2, sb_pages, ru_pages))
    return st, rcs


def random_trace(seed, n_ops=300):
    rng = np.random.default_rng(seed)
    trace = []
    for _ in range(n_ops):
        if rng.random() < 0.15:
            trace.append(("gc", None))
        else:
            n = int(rng.integers(1, 10))
            stream = int(rng.integers(0, 2))
            trace.append(("append", (rng.integers(0, 64, size=n), stream)))
    return trace


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_kernels_agree_on_random_traces(seed):
    trace = random_trace(seed)
    py_state, py_rcs = run_trace(_pykernel, trace)
    cy_state, cy_rcs = run_trace(_ckernel, trace)
    assert py_rcs == cy_rcs
    for key in py_state:
        assert np.array_equal(py_state[key], cy_state[key]), key


def test_kernels_agree_with_ru_boundaries():
    # ru_pages spanning two superblocks exercises the RU cut path
    trace = random_trace(9, n_ops=200)
    py_state, py_rcs = run_trace(_pykernel, trace, ru_pages=16)
    cy_state, cy_rcs = run_trace(_ckernel, trace, ru_pages=16)
    assert py_rcs == cy_rcs
    for key in py_state:
        assert np.array_equal(py_state[key], cy_state[key]), key
