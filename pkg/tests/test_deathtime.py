import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zstoresim.deathtime import COLD_MAX, DeathtimeTracker, Edt, EdtClass
from zstoresim.errors import OrderingError


def test_record_appends_in_order():
    t = DeathtimeTracker()
    for lsn in (10, 20, 30):
        t.record_write(1, lsn)
    assert t.record_write(1, 40).lsns == (10, 20, 30, 40)


def test_gc_write_leaves_history_unchanged():
    t = DeathtimeTracker()
    t.record_write(1, 10)
    t.record_write(1, 20)
    before = t.history(1)
    t.record_write(1, 999, is_gc_write=True)
    assert t.history(1) == before


def test_history_keeps_last_four():
    t = DeathtimeTracker()
    for lsn in (1, 2, 3, 4, 5, 6):
        t.record_write(7, lsn)
    assert t.history(7).lsns == (3, 4, 5, 6)


def test_lsn_regression_rejected():
    t = DeathtimeTracker()
    t.record_write(1, 50)
    with pytest.raises(OrderingError):
        t.record_write(1, 40)


def test_edt_formula_direct():
    t = DeathtimeTracker()
    for lsn in (0, 10, 20, 30):
        t.record_write(1, lsn) if lsn else t.record_write(1, lsn)
    e = t.estimate_edt(1, 40)
    assert e.klass == EdtClass.ESTIMATED
    assert e.value == 40 + 30 / 3  # == 50


def test_partial_history_uses_available_signal():
    t = DeathtimeTracker()
    t.record_write(1, 100)
    t.record_write(1, 160)
    e = t.estimate_edt(1, 200)
    assert e.klass == EdtClass.ESTIMATED
    assert e.value == 200 + 60


def test_single_write_falls_back_by_tree():
    t = DeathtimeTracker()
    t.record_write(1, 10, tree_id=5)
    e = t.estimate_edt(1, 20)
    assert e.klass == EdtClass.FALLBACK_BY_TREE
    assert e.value == 5.0


def test_never_rewritten_page_gets_cold_max():
    t = DeathtimeTracker()
    t.record_write(1, 10, tree_id=2)
    t.note_gc_survival(1)
    assert t.estimate_edt(1, 50).klass == EdtClass.FALLBACK_BY_TREE
    t.note_gc_survival(1)
    assert t.estimate_edt(1, 60) == COLD_MAX


def test_rewrite_clears_cold_flag():
    t = DeathtimeTracker()
    t.record_write(1, 10)
    t.note_gc_survival(1)
    t.note_gc_survival(1)
    assert t.estimate_edt(1, 20) == COLD_MAX
    t.record_write(1, 30)
    assert t.estimate_edt(1, 40).klass != EdtClass.COLD_MAX


def test_ordering_across_classes():
    est = Edt(EdtClass.ESTIMATED, 1e15)
    fb = Edt(EdtClass.FALLBACK_BY_TREE, 0.0)
    assert est < fb < COLD_MAX


def test_seed_history_from_header():
    t = DeathtimeTracker()
    t.seed_history(4, (5, 9), tree_id=1)
    e = t.estimate_edt(4, 20)
    assert e.klass == EdtClass.ESTIMATED
    assert e.value == 20 + 4
    # seeding never overwrites live state
    t.record_write(4, 30)
    t.seed_history(4, (1, 2, 3), tree_id=9)
    assert t.history(4).lsns == (5, 9, 30)


@settings(max_examples=60, deadline=None)
@given(
    lsns=st.lists(st.integers(min_value=1, max_value=10**6), min_size=2,
                  max_size=4),
    now=st.integers(min_value=10**6, max_value=10**7),
    c=st.integers(min_value=2, max_value=50),
)
def test_scale_covariance(lsns, now, c):
    lsns = sorted(lsns)
    a, b = DeathtimeTracker(), DeathtimeTracker()
    for lsn in lsns:
        a.record_write(1, lsn)
        b.record_write(1, lsn * c)
    ea = a.estimate_edt(1, now)
    eb = b.estimate_edt(1, now * c)
    assert eb.value == pytest.approx(ea.value * c)


@settings(max_examples=60, deadline=None)
@given(
    first=st.integers(min_value=1, max_value=1000),
    width=st.integers(min_value=1, max_value=1000),
    extra=st.integers(min_value=1, max_value=1000),
)
def test_monotone_extrapolation(first, width, extra):
    # widening the history window strictly increases the estimate
    a, b = DeathtimeTracker(), DeathtimeTracker()
    a.record_write(1, first)
    a.record_write(1, first + width)
    b.record_write(1, first)
    b.record_write(1, first + width + extra)
    now = first + width + extra + 10
    assert b.estimate_edt(1, now).value > a.estimate_edt(1, now).value


@settings(max_examples=40, deadline=None)
@given(
    user=st.lists(st.integers(min_value=1, max_value=100), min_size=1,
                  max_size=6),
    gc_points=st.lists(st.integers(min_value=0, max_value=6), max_size=4),
)
def test_gc_transparency(user, gc_points):
    user = sorted(user)
    plain = DeathtimeTracker()
    interleaved = DeathtimeTracker()
    for lsn in user:
        plain.record_write(1, lsn)
    seq = list(user)
    for i in sorted(gc_points, reverse=True):
        seq.insert(min(i, len(seq)), ("gc", 10**9))
    for item in seq:
        if isinstance(item, tuple):
            interleaved.record_write(1, item[1], is_gc_write=True)
        else:
            interleaved.record_write(1, item)
    assert plain.estimate_edt(1, 2000) == interleaved.estimate_edt(1, 2000)
