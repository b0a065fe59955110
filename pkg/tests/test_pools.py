"""Byte accounting for the two-pool meter."""

import pytest

from slidelab.engine.pools import FAST, HOST, PoolMeter
from slidelab.errors import BudgetError, ContractError


def test_alloc_free_restores_live():
    m = PoolMeter()
    m.alloc(FAST, 1000)
    m.alloc(HOST, 500)
    assert m.total_live_bytes == 1500
    m.free(FAST, 1000)
    m.free(HOST, 500)
    assert m.fast_live_bytes == 0
    assert m.host_live_bytes == 0
    assert m.fast_peak_bytes == 1000


def test_peak_tracks_high_water():
    m = PoolMeter()
    m.alloc(FAST, 300)
    m.free(FAST, 300)
    m.alloc(FAST, 200)
    assert m.fast_peak_bytes == 300
    assert m.fast_live_bytes == 200


def test_move_accounting_identity():
    # 1 KiB FAST -> HOST: fast -1024, host +1024, f2h counter +1024
    m = PoolMeter()
    m.alloc(FAST, 1024)
    m.move(FAST, HOST, 1024)
    assert m.fast_live_bytes == 0
    assert m.host_live_bytes == 1024
    assert m.transfer_bytes_fast_to_host == 1024
    assert m.transfer_bytes_host_to_fast == 0
    m.move(HOST, FAST, 1024)
    assert m.transfer_bytes_host_to_fast == 1024
    assert m.fast_live_bytes == 1024


def test_move_to_same_pool_is_noop():
    m = PoolMeter()
    m.alloc(FAST, 64)
    m.move(FAST, FAST, 64)
    assert m.transfer_bytes_fast_to_host == 0
    assert m.fast_live_bytes == 64


def test_budget_enforced_on_alloc():
    m = PoolMeter(fast_budget_bytes=100)
    m.alloc(FAST, 90)
    with pytest.raises(BudgetError):
        m.alloc(FAST, 20)
    # the failed alloc must not have been booked
    assert m.fast_live_bytes == 90


def test_budget_enforced_on_move_back():
    m = PoolMeter(fast_budget_bytes=100)
    m.alloc(FAST, 80)
    m.move(FAST, HOST, 80)
    m.alloc(FAST, 90)
    with pytest.raises(BudgetError):
        m.move(HOST, FAST, 80)


def test_host_is_unbounded():
    m = PoolMeter(fast_budget_bytes=10)
    m.alloc(HOST, 10**9)
    assert m.host_peak_bytes == 10**9


def test_negative_live_rejected():
    m = PoolMeter()
    m.alloc(FAST, 10)
    with pytest.raises(ContractError):
        m.free(FAST, 20)


def test_unknown_pool_rejected():
    m = PoolMeter()
    with pytest.raises(ContractError):
        m.alloc("GPU", 1)


def test_counters_dict_matches_fields():
    m = PoolMeter()
    m.alloc(FAST, 5)
    m.alloc(HOST, 7)
    m.move(FAST, HOST, 5)
    c = m.counters()
    assert c["fast_live_bytes"] == 0
    assert c["host_live_bytes"] == 12
    assert c["fast_peak_bytes"] == 5
    assert c["transfer_bytes_fast_to_host"] == 5
