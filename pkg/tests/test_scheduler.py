"""Scheduling tests: chain arithmetic, separation choices, exactness.

The branch-and-bound solvers are certified against brute-force enumeration
over every before/after assignment, run through an independent longest-path
oracle written here.
"""

import math

import numpy as np
import pytest

from corridor.kinematics import Limits
from corridor.network import build_network, conflict_runs
from corridor.scheduler import (
    CentralizedEntry,
    DisjunctiveModel,
    HorizonRequired,
    Infeasible,
    RunConstraint,
    ScheduleTuple,
    SchedulingInstance,
    ZoneBounds,
    build_instance,
    enumerate_exact,
    solve,
    solve_centralized,
    solve_fifo,
    to_model,
    traversal_bounds,
)

LIM = Limits(-1.0, 1.0, 5.0, 25.0)
V_MERGE = 15.0
H = 1.5

NET = build_network()
EB = NET.path_for("EB", "through")
WB = NET.path_for("WB", "through")
SB2 = NET.path_for("SB2", "through")
NB1_RT = NET.path_for("NB1", "right-through")


def assert_feasible(model: DisjunctiveModel, times):
    assert abs(times[0] - model.t0) <= 1e-9
    for k, w in enumerate(model.windows):
        dt = times[k + 1] - times[k]
        assert dt >= w.release - 1e-9
        if w.deadline is not None:
            assert dt <= w.deadline + 1e-9
    for b in model.blocks:
        after = all(times[q] >= c + H - 1e-9 for q, c in zip(b.var_indices, b.other_times))
        before = all(times[q] <= c - H + 1e-9 for q, c in zip(b.var_indices, b.other_times))
        if b.fixed_order == 0:
            assert after
        else:
            assert after or before


def chain_times(path, t0, entry_speed):
    bounds = traversal_bounds(path, entry_speed, LIM, V_MERGE)
    times = [t0]
    for b in bounds:
        times.append(times[-1] + b.release)
    return times


def test_unconflicted_chain_is_cumulative_release():
    inst = build_instance(1, EB, 10.0, 15.0, [], LIM, V_MERGE, H)
    sched, stats = solve(to_model(inst))
    expected = chain_times(EB, 10.0, 15.0)
    assert sched.zone_ids == EB.zone_ids
    np.testing.assert_allclose(sched.times, expected, atol=1e-9)
    assert stats.free_runs == 0
    assert stats.optimal


def test_same_path_follower_shifts_by_headway():
    lead_inst = build_instance(1, EB, 0.0, 15.0, [], LIM, V_MERGE, H)
    lead, _ = solve(to_model(lead_inst))
    foll_inst = build_instance(2, EB, 1.5, 15.0, [(lead, EB)], LIM, V_MERGE, H)
    foll, _ = solve(to_model(foll_inst))
    # identical speed profile: the follower rides exactly one headway behind
    np.testing.assert_allclose(foll.times, np.asarray(lead.times) + 1.5, atol=1e-9)
    # and the conflict is order-fixed, no binary spent on it
    assert all(b.fixed_order == 0 for b in to_model(foll_inst).blocks)


def test_fast_follower_pinned_to_headway_recurrence():
    lead_inst = build_instance(1, EB, 0.0, 15.0, [], LIM, V_MERGE, H)
    lead, _ = solve(to_model(lead_inst))
    inst = build_instance(2, EB, 1.6, 20.0, [(lead, EB)], LIM, V_MERGE, H)
    sched, _ = solve(to_model(inst))
    bounds = traversal_bounds(EB, 20.0, LIM, V_MERGE)
    expected = [1.6]
    for k, b in enumerate(bounds):
        expected.append(max(expected[-1] + b.release, lead.times[k + 1] + H))
    np.testing.assert_allclose(sched.times, expected, atol=1e-9)


def test_same_origin_gap_below_headway_is_infeasible():
    lead_inst = build_instance(1, EB, 0.0, 15.0, [], LIM, V_MERGE, H)
    lead, _ = solve(to_model(lead_inst))
    inst = build_instance(2, EB, 1.0, 15.0, [(lead, EB)], LIM, V_MERGE, H)
    with pytest.raises(Infeasible):
        solve(to_model(inst))


def test_cross_conflict_prefers_free_slot_over_fifo():
    lead_inst = build_instance(1, EB, 0.0, 15.0, [], LIM, V_MERGE, H)
    lead, _ = solve(to_model(lead_inst))
    inst = build_instance(2, SB2, 0.0, 15.0, [(lead, EB)], LIM, V_MERGE, H)
    model = to_model(inst)
    assert [b.fixed_order for b in model.blocks] == [None]
    opt, stats = solve(model)
    fifo, _ = solve_fifo(model)
    free = chain_times(SB2, 0.0, 15.0)
    # crossing ahead of the other vehicle costs nothing here
    np.testing.assert_allclose(opt.times, free, atol=1e-9)
    assert fifo.exit_time > opt.exit_time + 1.0
    assert fifo.time_at(7) >= lead.time_at(7) + H - 1e-9
    ref, _ = enumerate_exact(model)
    assert abs(ref.exit_time - opt.exit_time) <= 1e-9


def test_merge_run_ties_zones_to_one_side():
    lead_inst = build_instance(1, EB, 0.0, 15.0, [], LIM, V_MERGE, H)
    lead, _ = solve(to_model(lead_inst))
    # NB1 right-through merges into EB's lane for the rest of the corridor
    runs = conflict_runs(NB1_RT, EB)
    assert [r.relation for r in runs] == ["merge"]
    inst = build_instance(2, NB1_RT, 0.2, 15.0, [(lead, EB)], LIM, V_MERGE, H)
    model = to_model(inst)
    sched, _ = solve(model)
    assert_feasible(model, sched.times)
    run = model.blocks[0]
    d = [sched.times[q] - c for q, c in zip(run.var_indices, run.other_times)]
    assert all(x >= H - 1e-9 for x in d) or all(x <= -H + 1e-9 for x in d)


def test_horizon_required_when_deadline_unbounded():
    lim0 = Limits(-1.0, 1.0, 0.0, 25.0)
    inst = build_instance(1, EB, 0.0, 15.0, [], lim0, V_MERGE, H)
    assert any(b.deadline is None for b in inst.bounds)
    with pytest.raises(HorizonRequired):
        to_model(inst)
    model = to_model(inst, horizon=600.0)
    assert math.isfinite(model.big_m)
    sched, _ = solve(model)
    np.testing.assert_allclose(sched.times, chain_times(EB, 0.0, 15.0), atol=1e-9)


def test_schedule_tuple_json_roundtrip():
    s = ScheduleTuple(7, (10, 3, 4), (1.0, 2.5, 4.0, 6.0))
    assert ScheduleTuple.from_json(s.to_json()) == s
    with pytest.raises(ValueError):
        ScheduleTuple(7, (10, 3), (1.0, 2.0))
    model = to_model(build_instance(1, SB2, 0.0, 14.0, [], LIM, V_MERGE, H))
    data = model.to_json()
    assert data["zone_ids"] == list(SB2.zone_ids)
    assert len(data["windows"]) == len(SB2.zone_ids)


def _random_instance(rng) -> SchedulingInstance:
    n = int(rng.integers(2, 6))
    releases = rng.uniform(2.0, 10.0, n)
    deadlines = releases + rng.uniform(1.0, 25.0, n)
    zone_ids = tuple(int(z) for z in rng.choice(100, n, replace=False))
    conflicts = []
    for other in range(int(rng.integers(0, 5))):
        run_len = int(rng.integers(1, n + 1))
        start = int(rng.integers(0, n - run_len + 1))
        base = float(rng.uniform(0.0, 45.0))
        gaps = np.cumsum(rng.uniform(1.0, 8.0, run_len))
        conflicts.append(
            RunConstraint(
                other_id=100 + other,
                zones=zone_ids[start : start + run_len],
                other_times=tuple(float(base + g) for g in gaps),
                relation="merge" if run_len > 1 else "cross",
                order_fixed=bool(rng.random() < 0.25),
            )
        )
    return SchedulingInstance(
        vehicle_id=1,
        zone_ids=zone_ids,
        t0=float(rng.uniform(0.0, 5.0)),
        entry_speed=15.0,
        bounds=tuple(ZoneBounds(float(r), float(d)) for r, d in zip(releases, deadlines)),
        conflicts=tuple(conflicts),
        headway=H,
    )


@pytest.mark.parametrize("seed", range(8))
def test_solve_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    solved = 0
    for _ in range(60):
        model = to_model(_random_instance(rng))
        ref, _leaves = enumerate_exact(model)
        if ref is None:
            with pytest.raises(Infeasible):
                solve(model)
            continue
        sched, stats = solve(model)
        assert abs(sched.exit_time - ref.exit_time) <= 1e-9
        assert_feasible(model, sched.times)
        try:
            fifo, _ = solve_fifo(model)
        except Infeasible:
            # yield-everywhere can die on a deadline even when passing
            # before is free; the optimal solver is not bound by that
            fifo = None
        if fifo is not None:
            assert fifo.exit_time >= sched.exit_time - 1e-9
        assert stats.optimal
        solved += 1
    assert solved >= 30  # generator must exercise real instances


def test_sequential_pipeline_against_enumeration():
    # commit vehicles one at a time over the real network, certifying each
    rng = np.random.default_rng(42)
    paths = NET.all_paths()
    committed = []
    t0 = 0.0
    for vid in range(10):
        path = paths[int(rng.integers(0, len(paths)))]
        t0 += float(rng.uniform(1.6, 4.0))
        speed = float(rng.uniform(13.0, 16.0))
        inst = build_instance(vid, path, t0, speed, committed, LIM, V_MERGE, H)
        model = to_model(inst)
        sched, _ = solve(model)
        ref, _ = enumerate_exact(model)
        assert abs(sched.exit_time - ref.exit_time) <= 1e-9
        assert_feasible(model, sched.times)
        committed.append((sched, path))


# ---------------------------------------------------------------------------
# centralized
# ---------------------------------------------------------------------------


def _joint_oracle(entries, h):
    """Brute-force joint optimum: every order assignment, longest path each."""
    offsets, total = [], 0
    for e in entries:
        offsets.append(total)
        total += len(e.path.zone_ids) + 1
    origin = total
    base = []
    for k, e in enumerate(entries):
        off = offsets[k]
        base += [(origin, off, e.t0), (off, origin, -e.t0)]
        for i, w in enumerate(e.windows):
            base.append((off + i, off + i + 1, w.release))
            if w.deadline is not None:
                base.append((off + i + 1, off + i, -w.deadline))
    free = []
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            pi, pj = entries[i].path, entries[j].path
            for run in conflict_runs(pi, pj):
                vi = [offsets[i] + pi.index_of(z) for z in run.zones]
                vj = [offsets[j] + pj.index_of(z) for z in run.zones]
                if run.relation in ("merge", "same-path"):
                    # a shared lane admits no overtaking through its far end
                    vi.append(offsets[i] + pi.index_of(run.zones[-1]) + 1)
                    vj.append(offsets[j] + pj.index_of(run.zones[-1]) + 1)
                fixed = run.relation == "same-path" or (
                    run.zones[0] == pi.zone_ids[0] and run.zones[0] == pj.zone_ids[0]
                )
                if fixed:
                    base += [(a, b, h) for a, b in zip(vi, vj)]
                else:
                    free.append((vi, vj))

    def longest(edges):
        dist = [-math.inf] * (total + 1)
        dist[origin] = 0.0
        for _ in range(total + 2):
            changed = False
            for u, v, w in edges:
                if dist[u] != -math.inf and dist[u] + w > dist[v] + 1e-12:
                    dist[v] = dist[u] + w
                    changed = True
            if not changed:
                return dist
        return None

    best = None
    for mask in range(1 << len(free)):
        edges = list(base)
        for idx, (vi, vj) in enumerate(free):
            if (mask >> idx) & 1:
                edges += [(b, a, h) for a, b in zip(vi, vj)]
            else:
                edges += [(a, b, h) for a, b in zip(vi, vj)]
        dist = longest(edges)
        if dist is None:
            continue
        obj = sum(dist[offsets[k] + len(entries[k].path.zone_ids)] for k in range(len(entries)))
        if best is None or obj < best - 1e-12:
            best = obj
    return best, len(free)


def _entries_from(rng, n_veh, speed=None):
    paths = NET.all_paths()
    t0 = 0.0
    entries = []
    for vid in range(n_veh):
        t0 += float(rng.uniform(2.0, 5.0))
        path = paths[int(rng.integers(0, len(paths)))]
        v0 = float(rng.uniform(13.0, 16.0)) if speed is None else speed
        entries.append(CentralizedEntry(vid, path, t0, traversal_bounds(path, v0, LIM, V_MERGE)))
    return entries


def test_centralized_two_crossing_vehicles_exact():
    e1 = CentralizedEntry(1, EB, 0.0, traversal_bounds(EB, 15.0, LIM, V_MERGE))
    e2 = CentralizedEntry(2, SB2, 0.3, traversal_bounds(SB2, 15.0, LIM, V_MERGE))
    scheds, stats = solve_centralized([e1, e2], H)
    ref, n_free = _joint_oracle([e1, e2], H)
    assert n_free == 1
    obj = scheds[1].exit_time + scheds[2].exit_time
    assert abs(obj - ref) <= 1e-9
    assert stats.optimal


@pytest.mark.parametrize("seed", range(6))
def test_centralized_matches_joint_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    checked = 0
    while checked < 4:
        entries = _entries_from(rng, 3)
        ref, n_free = _joint_oracle(entries, H)
        if n_free > 10 or ref is None:
            continue
        scheds, stats = solve_centralized(entries, H)
        obj = sum(scheds[e.vehicle_id].exit_time for e in entries)
        assert abs(obj - ref) <= 1e-9
        assert stats.optimal
        # pairwise separation holds on every shared run
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                pi, pj = entries[i].path, entries[j].path
                si, sj = scheds[entries[i].vehicle_id], scheds[entries[j].vehicle_id]
                for run in conflict_runs(pi, pj):
                    d = [sj.time_at(z) - si.time_at(z) for z in run.zones]
                    assert all(x >= H - 1e-9 for x in d) or all(x <= -H + 1e-9 for x in d)
        checked += 1


def test_centralized_never_worse_than_sequential_seed():
    rng = np.random.default_rng(7)
    for _ in range(4):
        entries = _entries_from(rng, 4)
        committed = []
        seed_scheds = {}
        for e in entries:
            inst = SchedulingInstance(
                vehicle_id=e.vehicle_id,
                zone_ids=e.path.zone_ids,
                t0=e.t0,
                entry_speed=15.0,
                bounds=e.windows,
                conflicts=build_instance(
                    e.vehicle_id, e.path, e.t0, 15.0, committed, LIM, V_MERGE, H
                ).conflicts,
                headway=H,
            )
            sched, _ = solve(to_model(inst))
            committed.append((sched, e.path))
            seed_scheds[e.vehicle_id] = sched
        seq_obj = sum(s.exit_time for s in seed_scheds.values())
        scheds, _stats = solve_centralized(entries, H, seed_schedules=seed_scheds)
        obj = sum(scheds[e.vehicle_id].exit_time for e in entries)
        assert obj <= seq_obj + 1e-9


def test_centralized_budget_returns_seed():
    rng = np.random.default_rng(11)
    entries = _entries_from(rng, 3, speed=15.0)
    committed = []
    seed_scheds = {}
    for e in entries:
        inst = build_instance(e.vehicle_id, e.path, e.t0, 15.0, committed, LIM, V_MERGE, H)
        sched, _ = solve(to_model(inst))
        committed.append((sched, e.path))
        seed_scheds[e.vehicle_id] = sched
    scheds, stats = solve_centralized(entries, H, node_budget=0, seed_schedules=seed_scheds)
    assert not stats.optimal
    assert scheds == seed_scheds


def test_centralized_rejects_unsorted_entries():
    e1 = CentralizedEntry(1, EB, 5.0, traversal_bounds(EB, 15.0, LIM, V_MERGE))
    e2 = CentralizedEntry(2, SB2, 0.0, traversal_bounds(SB2, 15.0, LIM, V_MERGE))
    with pytest.raises(ValueError):
        solve_centralized([e1, e2], H)
