import threading

import pytest

from offloadsim.errors import DeadlockError, LaunchRejected, OutOfMemory, RegionFault
from offloadsim.machine import Machine, MachineConfig
from offloadsim.runtime import (
    RegionDescriptor, StaticBlock, StaticCyclic, global_thread_id, worksharing_bounds,
)

from oracles import check_partition


def small(**kw):
    cfg = dict(device_capacity=8 << 20, host_capacity=1 << 20)
    cfg.update(kw)
    return Machine(MachineConfig(**cfg))


def test_global_thread_id_examples():
    assert global_thread_id(3, 2, 4) == 14
    assert global_thread_id(0, 0, 7) == 0
    assert sorted(global_thread_id(t, l, 4) for t in range(4) for l in range(4)) == list(range(16))
    with pytest.raises(ValueError):
        global_thread_id(0, 4, 4)


def test_worksharing_examples():
    sets = [list(r for rng in worksharing_bounds(g, 4, 10) for r in rng) for g in range(4)]
    assert sets == [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9]]
    assert all(worksharing_bounds(g, 4, 0) == [] for g in range(4))
    cyc = [[i for r in worksharing_bounds(g, 4, 8, StaticCyclic(1)) for i in r] for g in range(4)]
    assert cyc == [[0, 4], [1, 5], [2, 6], [3, 7]]
    chunked = [i for r in worksharing_bounds(1, 3, 20, StaticCyclic(2)) for i in r]
    assert chunked == [2, 3, 8, 9, 14, 15]


@pytest.mark.parametrize("schedule", [StaticBlock, StaticCyclic(1), StaticCyclic(3)])
def test_worksharing_partitions_small(schedule):
    for total in (1, 2, 5, 7):
        for trip in range(0, 40):
            sets = [worksharing_bounds(g, total, trip, schedule) for g in range(total)]
            assert check_partition(sets, trip)


def test_program_without_regions_runs_on_one_agent():
    with small() as m:
        names = []
        assert m.runtime.run_main(lambda ctx: names.append(threading.current_thread().name)) == 0
        assert names == ["initial-agent"] and m.runtime.launches == []
        assert m.runtime.run_main(lambda ctx: 7) == 7


def test_one_region_is_one_launch_with_continuous_ids():
    with small() as m:
        out = m.allocator.allocate(16 * 8)

        def body(ctx):
            ctx.memory.store(out + 8 * ctx.global_id, "i64", ctx.team * 100 + ctx.local)

        region = m.runtime.register(RegionDescriptor(1, body))
        launch = m.runtime.run_main(lambda ctx: ctx.parallel(region, (), 4, 4) and None)
        assert launch == 0
        assert len(m.runtime.launches) == 1
        assert (m.runtime.launches[0].num_teams, m.runtime.launches[0].threads_per_team) == (4, 4)
        got = [m.device_memory.load(out + 8 * g, "i64") for g in range(16)]
        assert got == [(g // 4) * 100 + g % 4 for g in range(16)]


def test_arguments_reach_the_kernel():
    with small() as m:
        cell = m.allocator.allocate(8)

        def body(ctx):
            ctx.memory.atomic_add(ctx.arg_ptr(0), ctx.arg_int(1))

        region = RegionDescriptor(2, body)
        m.runtime.run_main(lambda ctx: ctx.parallel(region, (cell, -3), 2, 3))
        assert m.device_memory.load(cell, "i64") == -18


def test_sum_into_array_every_element_once():
    with small() as m:
        n = 1000
        arr = m.allocator.allocate(8 * n)

        def body(ctx):
            for i in ctx.iterations():
                ctx.memory.atomic_add(arr + 8 * i, 1)

        region = RegionDescriptor(3, body, trip_count=n)
        m.runtime.run_main(lambda ctx: ctx.parallel(region, (), 4, 4))
        assert all(m.device_memory.load(arr + 8 * i, "i64") == 1 for i in range(n))


def test_single_agent_degenerates_to_sequential():
    with small() as m:
        seen = []
        region = RegionDescriptor(4, lambda ctx: seen.append((ctx.global_id, ctx.total,
                                                              list(ctx.iterations()))),
                                  trip_count=5)
        m.runtime.run_main(lambda ctx: ctx.parallel(region, (), 1, 1))
        assert seen == [(0, 1, [0, 1, 2, 3, 4])]


def test_nested_launch_rejected():
    with small() as m:
        inner = m.runtime.register(RegionDescriptor(6, lambda ctx: None))
        outer = RegionDescriptor(5, lambda ctx: ctx.parallel(inner, (), 1, 1))
        with pytest.raises(RegionFault) as e:
            m.runtime.run_main(lambda ctx: ctx.parallel(outer, (), 1, 2))
        assert e.value.region_id == 5
        assert isinstance(e.value.cause, LaunchRejected)


def test_agent_limit_rejects_launch():
    with small(agent_limit=16) as m:
        region = RegionDescriptor(7, lambda ctx: None)
        with pytest.raises(LaunchRejected):
            m.runtime.run_main(lambda ctx: ctx.parallel(region, (), 4, 5))
        m.runtime.run_main(lambda ctx: ctx.parallel(region, (), 4, 4))


def test_region_fault_carries_region_id():
    with small() as m:
        def body(ctx):
            if ctx.global_id == 3:
                ctx.allocate(1 << 40)

        with pytest.raises(RegionFault) as e:
            m.runtime.run_main(lambda ctx: ctx.parallel(RegionDescriptor(8, body), (), 2, 2))
        assert e.value.region_id == 8 and isinstance(e.value.cause, OutOfMemory)


def test_barrier_phases_and_visibility():
    with small() as m:
        cell = m.allocator.allocate(8)
        bad = m.allocator.allocate(8)

        def body(ctx):
            for phase in range(1, 6):
                if ctx.global_id == 0:
                    ctx.memory.store(cell, "i64", phase)
                ctx.barrier()
                if ctx.memory.load(cell, "i64") != phase:
                    ctx.memory.atomic_add(bad, 1)
                ctx.barrier()

        region = RegionDescriptor(9, body, uses_barrier=True)
        m.runtime.run_main(lambda ctx: ctx.parallel(region, (), 2, 4))
        assert m.device_memory.load(bad, "i64") == 0


def test_single_agent_barrier_is_a_no_op():
    with small() as m:
        region = RegionDescriptor(10, lambda ctx: (ctx.barrier(), ctx.barrier()),
                                  uses_barrier=True)
        m.runtime.run_main(lambda ctx: ctx.parallel(region, (), 1, 1))


def test_mismatched_barriers_hit_the_watchdog():
    with small(watchdog_s=0.5) as m:
        def body(ctx):
            if ctx.global_id != 0:
                ctx.barrier()

        region = RegionDescriptor(11, body, uses_barrier=True)
        with pytest.raises(RegionFault) as e:
            m.runtime.run_main(lambda ctx: ctx.parallel(region, (), 1, 3))
        assert isinstance(e.value.cause, DeadlockError)


def test_barrier_without_declaration_is_an_error():
    with small() as m:
        region = RegionDescriptor(12, lambda ctx: ctx.barrier())
        with pytest.raises(RegionFault):
            m.runtime.run_main(lambda ctx: ctx.parallel(region, (), 1, 2))


def test_generator_bodies_are_co_resident():
    with small(pool_width=2) as m:
        order = []

        def body(ctx):
            order.append(("a", ctx.global_id))
            yield
            order.append(("b", ctx.global_id))

        m.runtime.run_main(lambda ctx: ctx.parallel(RegionDescriptor(13, body), (), 1, 6))
        firsts = [i for i, (k, _) in enumerate(order) if k == "a"]
        seconds = [i for i, (k, _) in enumerate(order) if k == "b"]
        assert len(firsts) == len(seconds) == 6
        # per worker every agent reached its first yield before any resumed
        for w in range(2):
            mine = [i for i, (_, g) in enumerate(order) if g % 2 == w]
            kinds = [order[i][0] for i in mine]
            assert kinds == ["a"] * 3 + ["b"] * 3
