"""Zone-entry scheduling as a disjunctive temporal problem.

Each vehicle's schedule is the vector of its zone entry times plus the final
exit time.  Consecutive times are tied by the closed-form traversal bounds
[release, deadline] of the zone between them, the first time is pinned to the
vehicle's control-zone entry, and every conflict with another vehicle adds a
two-sided separation disjunction (pass at least a headway after it in every
zone of the shared run, or at least a headway before it in all of them).

With the disjunctions decided, what remains is a system of difference
constraints; its componentwise-minimal solution (earliest times) exists iff
the constraint graph has no positive cycle and is found by longest-path
relaxation from a fixed origin node.  Minimality in every component means the
exit time, or any monotone objective, is minimized at once.  Branch-and-bound
over undecided runs therefore yields exact optima: a relaxation that violates
no disjunction is already feasible, and its value lower-bounds every
completion.

Runs over a stretch both paths travel in the same lane order share one
binary; forcing it to "pass after" encodes overtaking being impossible when
the stretch starts at both vehicles' entry approach or the paths coincide.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .kinematics import BoundaryState, Limits, deadline, release_time
from .network import PathSpec, conflict_runs

_EPS = 1e-9


class Infeasible(RuntimeError):
    """No schedule satisfies the bounds and separation constraints."""


class HorizonRequired(ValueError):
    """An unbounded deadline needs a configured horizon to emit big-M data."""


@dataclass(frozen=True)
class ZoneBounds:
    """Traversal-time window for one zone; deadline None means unbounded."""

    release: float
    deadline: float | None


@dataclass(frozen=True)
class RunConstraint:
    """Separation against one committed vehicle over one conflict run.

    Same-direction runs carry the committed vehicle's boundary time after
    the run in other_exit: a single lane admits no overtaking anywhere along
    the stretch, leaving it included.  Cross runs separate entries only.
    """

    other_id: int
    zones: tuple[int, ...]
    other_times: tuple[float, ...]
    relation: str
    order_fixed: bool  # True: must pass after (no overtaking on a shared lane)
    other_exit: float | None = None


@dataclass(frozen=True)
class SchedulingInstance:
    vehicle_id: int
    zone_ids: tuple[int, ...]
    t0: float
    entry_speed: float
    bounds: tuple[ZoneBounds, ...]
    conflicts: tuple[RunConstraint, ...]
    headway: float


@dataclass(frozen=True)
class ScheduleTuple:
    """Committed schedule: entry time per zone plus the control-zone exit."""

    vehicle_id: int
    zone_ids: tuple[int, ...]
    times: tuple[float, ...]

    def __post_init__(self):
        if len(self.times) != len(self.zone_ids) + 1:
            raise ValueError("times must hold one entry per zone plus the exit")

    @property
    def exit_time(self) -> float:
        return self.times[-1]

    def time_at(self, zone_id: int) -> float:
        return self.times[self.zone_ids.index(zone_id)]

    def to_json(self) -> dict:
        return {
            "vehicle_id": self.vehicle_id,
            "zone_ids": list(self.zone_ids),
            "times": list(self.times),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ScheduleTuple":
        return cls(int(data["vehicle_id"]), tuple(data["zone_ids"]), tuple(data["times"]))


@dataclass(frozen=True)
class DisjunctiveBlock:
    """One run's big-M disjunction: variables against committed constants."""

    other_id: int
    var_indices: tuple[int, ...]
    other_times: tuple[float, ...]
    fixed_order: int | None  # 0 forces pass-after; None leaves the binary free


@dataclass(frozen=True)
class DisjunctiveModel:
    vehicle_id: int
    zone_ids: tuple[int, ...]
    t0: float
    windows: tuple[ZoneBounds, ...]
    blocks: tuple[DisjunctiveBlock, ...]
    headway: float
    big_m: float

    @property
    def n_vars(self) -> int:
        # one entry time per zone plus the exit time
        return len(self.zone_ids) + 1

    def to_json(self) -> dict:
        return {
            "vehicle_id": self.vehicle_id,
            "zone_ids": list(self.zone_ids),
            "t0": self.t0,
            "windows": [[w.release, w.deadline] for w in self.windows],
            "headway": self.headway,
            "big_m": self.big_m,
            "blocks": [
                {
                    "other_id": b.other_id,
                    "var_indices": list(b.var_indices),
                    "other_times": list(b.other_times),
                    "fixed_order": b.fixed_order,
                }
                for b in self.blocks
            ],
        }


@dataclass
class SolveStats:
    nodes: int = 0
    candidates: int = 0
    wall_ms: float = 0.0
    free_runs: int = 0
    optimal: bool = True


def traversal_bounds(
    path: PathSpec,
    entry_speed: float,
    lim: Limits,
    v_merge: float,
    exit_speed: float | None = None,
) -> tuple[ZoneBounds, ...]:
    """Closed-form [release, deadline] per zone along a path.

    Boundary speeds: measured entry speed at the control-zone entry, the
    common merging speed at every interior zone boundary, and exit_speed
    (defaulting to the merging speed) at the control-zone exit.
    """
    if not (lim.v_min < v_merge < lim.v_max):
        raise ValueError("v_merge must lie strictly inside the speed limits")
    n = len(path.zone_ids)
    speeds = [entry_speed] + [v_merge] * (n - 1) + [exit_speed if exit_speed is not None else v_merge]
    out = []
    for k, seg in enumerate(path.seg_lengths):
        start = BoundaryState(0.0, speeds[k])
        end = BoundaryState(seg, speeds[k + 1])
        rel = release_time(start, end, lim)
        ddl = deadline(start, end, lim)
        out.append(ZoneBounds(rel.time, None if ddl.is_unbounded() else ddl.time))
    return tuple(out)


def build_instance(
    vehicle_id: int,
    path: PathSpec,
    t0: float,
    entry_speed: float,
    committed: list[tuple[ScheduleTuple, PathSpec]],
    lim: Limits,
    v_merge: float,
    headway: float,
    exit_speed: float | None = None,
) -> SchedulingInstance:
    """Assemble the scheduling problem for one vehicle against committed ones.

    Runs anchored at both vehicles' first zone mean a shared entry approach,
    where overtaking is impossible, so their order is fixed to pass-after;
    likewise identical paths.  All other merge and cross runs keep a free
    before/after binary.
    """
    bounds = traversal_bounds(path, entry_speed, lim, v_merge, exit_speed)
    conflicts: list[RunConstraint] = []
    for sched, other_path in committed:
        for run in conflict_runs(path, other_path):
            fixed = run.relation == "same-path" or (
                run.zones[0] == path.zone_ids[0] and run.zones[0] == other_path.zone_ids[0]
            )
            other_exit = None
            if run.relation in ("merge", "same-path"):
                other_exit = sched.times[other_path.index_of(run.zones[-1]) + 1]
            conflicts.append(
                RunConstraint(
                    other_id=sched.vehicle_id,
                    zones=run.zones,
                    other_times=tuple(sched.time_at(z) for z in run.zones),
                    relation=run.relation,
                    order_fixed=fixed,
                    other_exit=other_exit,
                )
            )
    return SchedulingInstance(
        vehicle_id=vehicle_id,
        zone_ids=path.zone_ids,
        t0=t0,
        entry_speed=entry_speed,
        bounds=bounds,
        conflicts=tuple(conflicts),
        headway=headway,
    )


def to_model(instance: SchedulingInstance, horizon: float | None = None) -> DisjunctiveModel:
    """Emit the explicit disjunctive program (big-M form) for one instance.

    big_m bounds every time the model can produce: the chain can defer at
    most the sum of deadlines past t0, and separation can push past the last
    committed time by one headway.
    """
    ddl_sum = 0.0
    for b in instance.bounds:
        if b.deadline is None:
            if horizon is None:
                raise HorizonRequired(
                    "zone deadline is unbounded; configure a horizon to emit big-M data"
                )
            ddl_sum += horizon
        else:
            ddl_sum += b.deadline
    big_m = instance.t0 + ddl_sum + instance.headway
    zone_pos = {z: i for i, z in enumerate(instance.zone_ids)}
    blocks = []
    for c in instance.conflicts:
        var_indices = tuple(zone_pos[z] for z in c.zones)
        other_times = c.other_times
        if c.other_exit is not None:
            # tie the boundary after a shared-lane stretch into the run
            var_indices += (zone_pos[c.zones[-1]] + 1,)
            other_times += (c.other_exit,)
        blocks.append(
            DisjunctiveBlock(
                other_id=c.other_id,
                var_indices=var_indices,
                other_times=other_times,
                fixed_order=0 if c.order_fixed else None,
            )
        )
        big_m = max(big_m, max(other_times) + instance.headway + 1.0)
    blocks.sort(key=lambda b: (b.var_indices[0], b.other_id))
    return DisjunctiveModel(
        vehicle_id=instance.vehicle_id,
        zone_ids=instance.zone_ids,
        t0=instance.t0,
        windows=instance.bounds,
        blocks=tuple(blocks),
        headway=instance.headway,
        big_m=big_m,
    )


def _earliest_times(n_vars: int, edges: list[tuple[int, int, float]]) -> list[float] | None:
    """Componentwise-minimal solution of the difference constraints.

    Longest-path relaxation from the origin node (index n_vars); returns None
    on a positive cycle (infeasible system).
    """
    origin = n_vars
    dist = [-math.inf] * (n_vars + 1)
    dist[origin] = 0.0
    for _ in range(n_vars + 1):
        changed = False
        for u, v, w in edges:
            du = dist[u]
            if du == -math.inf:
                continue
            nv = du + w
            if nv > dist[v] + 1e-12:
                dist[v] = nv
                changed = True
        if not changed:
            return dist[:n_vars]
    return None


def _base_edges(model: DisjunctiveModel) -> list[tuple[int, int, float]]:
    n = model.n_vars
    origin = n
    edges = [(origin, 0, model.t0), (0, origin, -model.t0)]
    for k, w in enumerate(model.windows):
        edges.append((k, k + 1, w.release))
        if w.deadline is not None:
            edges.append((k + 1, k, -w.deadline))
    h = model.headway
    for b in model.blocks:
        if b.fixed_order == 0:
            for q, c in zip(b.var_indices, b.other_times):
                edges.append((origin, q, c + h))
    return edges


def _block_edges(block: DisjunctiveBlock, order: int, h: float, origin: int):
    if order == 0:  # pass after the committed vehicle everywhere on the run
        return [(origin, q, c + h) for q, c in zip(block.var_indices, block.other_times)]
    # pass before it everywhere on the run
    return [(q, origin, h - c) for q, c in zip(block.var_indices, block.other_times)]


def _block_state(times: list[float], block: DisjunctiveBlock, h: float) -> int:
    """+1 if the times clear the run on the after side, -1 before, 0 violated."""
    after = all(times[q] >= c + h - _EPS for q, c in zip(block.var_indices, block.other_times))
    if after:
        return 1
    before = all(times[q] <= c - h + _EPS for q, c in zip(block.var_indices, block.other_times))
    return -1 if before else 0


def solve(model: DisjunctiveModel) -> tuple[ScheduleTuple, SolveStats]:
    """Exact minimum-exit-time schedule by branch-and-bound on run binaries.

    Branches only on runs the current relaxation violates; a relaxation
    violating none is feasible outright and its exit time is exact for that
    subtree.  Deterministic: blocks are pre-sorted, pass-after explored
    first, and ties never replace an incumbent.
    """
    t_start = time.perf_counter()
    base = _base_edges(model)
    free = [b for b in model.blocks if b.fixed_order is None]
    stats = SolveStats(free_runs=len(free))
    h = model.headway
    origin = model.n_vars
    best: list[float] | None = None
    best_exit = math.inf

    def visit(decided: dict[int, int]):
        nonlocal best, best_exit
        stats.nodes += 1
        extra = []
        for idx, order in decided.items():
            extra.extend(_block_edges(free[idx], order, h, origin))
        times = _earliest_times(model.n_vars, base + extra)
        if times is None:
            return
        if times[-1] >= best_exit - 1e-12:
            return
        branch_idx = -1
        for idx, block in enumerate(free):
            if idx in decided:
                continue
            if _block_state(times, block, h) == 0:
                branch_idx = idx
                break
        if branch_idx < 0:
            best = times
            best_exit = times[-1]
            stats.candidates += 1
            return
        for order in (0, 1):
            visit({**decided, branch_idx: order})

    visit({})
    stats.wall_ms = (time.perf_counter() - t_start) * 1e3
    if best is None:
        raise Infeasible(f"vehicle {model.vehicle_id}: no schedule satisfies the constraints")
    sched = ScheduleTuple(model.vehicle_id, model.zone_ids, tuple(best))
    return sched, stats


def solve_fifo(model: DisjunctiveModel) -> tuple[ScheduleTuple, SolveStats]:
    """First-in-first-out policy: yield to every committed conflict."""
    t_start = time.perf_counter()
    edges = _base_edges(model)
    h = model.headway
    origin = model.n_vars
    free = 0
    for b in model.blocks:
        if b.fixed_order is None:
            free += 1
            edges.extend(_block_edges(b, 0, h, origin))
    times = _earliest_times(model.n_vars, edges)
    stats = SolveStats(nodes=1, candidates=1 if times else 0, free_runs=free)
    stats.wall_ms = (time.perf_counter() - t_start) * 1e3
    if times is None:
        raise Infeasible(f"vehicle {model.vehicle_id}: FIFO schedule infeasible")
    return ScheduleTuple(model.vehicle_id, model.zone_ids, tuple(times)), stats


def enumerate_exact(model: DisjunctiveModel) -> tuple[ScheduleTuple | None, int]:
    """Reference solver: try every binary assignment, keep the best leaf.

    Exponential in the number of free runs; used to certify the
    branch-and-bound.  Returns (best schedule or None, leaves solved).
    """
    free = [b for b in model.blocks if b.fixed_order is None]
    base = _base_edges(model)
    h = model.headway
    origin = model.n_vars
    best = None
    leaves = 0
    for mask in range(1 << len(free)):
        edges = list(base)
        for idx, block in enumerate(free):
            edges.extend(_block_edges(block, (mask >> idx) & 1, h, origin))
        times = _earliest_times(model.n_vars, edges)
        leaves += 1
        if times is None:
            continue
        if best is None or times[-1] < best[-1] - 1e-12:
            best = times
    if best is None:
        return None, leaves
    return ScheduleTuple(model.vehicle_id, model.zone_ids, tuple(best)), leaves


# ---------------------------------------------------------------------------
# centralized (joint) scheduling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CentralizedEntry:
    vehicle_id: int
    path: PathSpec
    t0: float
    windows: tuple[ZoneBounds, ...]


@dataclass
class CentralizedStats:
    nodes: int = 0
    candidates: int = 0
    wall_ms: float = 0.0
    free_runs: int = 0
    optimal: bool = True


class _JointRuns:
    """Flat arrays describing every free pair run for vectorized checks."""

    def __init__(self):
        self.vi: list[int] = []
        self.vj: list[int] = []
        self.starts: list[int] = []
        self.sizes: list[int] = []

    def add(self, vi: list[int], vj: list[int]):
        self.starts.append(len(self.vi))
        self.sizes.append(len(vi))
        self.vi.extend(vi)
        self.vj.extend(vj)

    def freeze(self):
        self.vi = np.asarray(self.vi, dtype=np.int64)
        self.vj = np.asarray(self.vj, dtype=np.int64)
        self.starts = np.asarray(self.starts, dtype=np.int64)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)

    def __len__(self):
        return len(self.starts)


def solve_centralized(
    entries: list[CentralizedEntry],
    headway: float,
    node_budget: int = 4000,
    seed_schedules: dict[int, ScheduleTuple] | None = None,
) -> tuple[dict[int, ScheduleTuple], CentralizedStats]:
    """Joint schedule minimizing the sum of exit times over all vehicles.

    Branch-and-bound over pair-run binaries on one temporal network holding
    every vehicle's chain.  The earliest joint solution is componentwise
    minimal, so it bounds the objective of every completion.  An incumbent
    seeded from per-vehicle sequential schedules guarantees the result never
    degrades below them; if the node budget runs out the best incumbent is
    returned with optimal=False.

    entries must come in queue order (non-decreasing t0): shared-lane runs
    are order-fixed to that sequence.
    """
    t_begin = time.perf_counter()
    stats = CentralizedStats()
    n_veh = len(entries)
    for a, b in zip(entries, entries[1:]):
        if b.t0 < a.t0 - _EPS:
            raise ValueError("entries must be sorted by queue order")

    offsets = []
    total = 0
    for e in entries:
        offsets.append(total)
        total += len(e.path.zone_ids) + 1
    origin = total
    n_nodes = total + 1
    exit_idx = np.asarray([offsets[k] + len(entries[k].path.zone_ids) for k in range(n_veh)])

    adj: list[list[tuple[int, float]]] = [[] for _ in range(n_nodes)]

    def add_edge(u: int, v: int, w: float):
        adj[u].append((v, w))

    for k, e in enumerate(entries):
        off = offsets[k]
        add_edge(origin, off, e.t0)
        add_edge(off, origin, -e.t0)
        for i, wnd in enumerate(e.windows):
            add_edge(off + i, off + i + 1, wnd.release)
            if wnd.deadline is not None:
                add_edge(off + i + 1, off + i, -wnd.deadline)

    runs = _JointRuns()
    h = headway
    for i in range(n_veh):
        for j in range(i + 1, n_veh):
            pi, pj = entries[i].path, entries[j].path
            for run in conflict_runs(pi, pj):
                vi = [offsets[i] + pi.index_of(z) for z in run.zones]
                vj = [offsets[j] + pj.index_of(z) for z in run.zones]
                if run.relation in ("merge", "same-path"):
                    # no overtaking through the end of a shared-lane stretch
                    vi.append(offsets[i] + pi.index_of(run.zones[-1]) + 1)
                    vj.append(offsets[j] + pj.index_of(run.zones[-1]) + 1)
                fixed = run.relation == "same-path" or (
                    run.zones[0] == pi.zone_ids[0] and run.zones[0] == pj.zone_ids[0]
                )
                if fixed:
                    # later queue entry yields on the shared lane
                    for a, b in zip(vi, vj):
                        add_edge(a, b, h)
                else:
                    runs.add(vi, vj)
    runs.freeze()
    stats.free_runs = len(runs)

    NEG = -math.inf

    def propagate(dist: np.ndarray, new_edges: list[tuple[int, int, float]], overlay: dict[int, list[tuple[int, float]]]) -> bool:
        """SPFA longest-path update after adding edges; False on positive cycle."""
        q = deque()
        inq = bytearray(n_nodes)
        counts = [0] * n_nodes
        for u, v, w in new_edges:
            du = dist[u]
            if du != NEG and du + w > dist[v] + 1e-12:
                dist[v] = du + w
                if not inq[v]:
                    q.append(v)
                    inq[v] = 1
        while q:
            u = q.popleft()
            inq[u] = 0
            du = dist[u]
            for v, w in adj[u]:
                if du + w > dist[v] + 1e-12:
                    dist[v] = du + w
                    counts[v] += 1
                    if counts[v] > n_nodes:
                        return False
                    if not inq[v]:
                        q.append(v)
                        inq[v] = 1
            extra = overlay.get(u)
            if extra:
                for v, w in extra:
                    if du + w > dist[v] + 1e-12:
                        dist[v] = du + w
                        counts[v] += 1
                        if counts[v] > n_nodes:
                            return False
                        if not inq[v]:
                            q.append(v)
                            inq[v] = 1
        return True

    # root relaxation from scratch
    root = np.full(n_nodes, NEG)
    root[origin] = 0.0
    seeds = [(origin, v, w) for v, w in adj[origin]]
    if not propagate(root, seeds, {}):
        raise Infeasible("joint schedule infeasible under forced lane order")

    # incumbent from the sequential schedules, if provided
    best_obj = math.inf
    best_schedules: dict[int, ScheduleTuple] | None = None
    if seed_schedules is not None:
        best_obj = sum(seed_schedules[e.vehicle_id].exit_time for e in entries)
        best_schedules = dict(seed_schedules)

    h_eps = h - _EPS

    def run_states(dist: np.ndarray, decided: np.ndarray) -> int:
        """Index of the first undecided violated run, or -1 if none."""
        if len(runs) == 0:
            return -1
        d = dist[runs.vj] - dist[runs.vi]
        after = np.add.reduceat((d >= h_eps).astype(np.int8), runs.starts) == runs.sizes
        before = np.add.reduceat((d <= -h_eps).astype(np.int8), runs.starts) == runs.sizes
        viol = (~(after | before)) & (decided == 0)
        idx = np.flatnonzero(viol)
        return int(idx[0]) if idx.size else -1

    def extract(dist: np.ndarray) -> dict[int, ScheduleTuple]:
        out = {}
        for k, e in enumerate(entries):
            off = offsets[k]
            n = len(e.path.zone_ids)
            times = tuple(float(dist[off + i]) for i in range(n + 1))
            out[e.vehicle_id] = ScheduleTuple(e.vehicle_id, e.path.zone_ids, times)
        return out

    # DFS stack: (dist snapshot, decided snapshot, overlay chain)
    stack = [(root, np.zeros(len(runs), dtype=np.int8), {})]
    budget_hit = False
    while stack:
        dist, decided, overlay = stack.pop()
        stats.nodes += 1
        if stats.nodes > node_budget:
            budget_hit = True
            break
        obj = float(dist[exit_idx].sum())
        if obj >= best_obj - 1e-9:
            continue
        branch = run_states(dist, decided)
        if branch < 0:
            best_obj = obj
            best_schedules = extract(dist)
            stats.candidates += 1
            continue
        s = runs.starts[branch]
        n = runs.sizes[branch]
        vi = runs.vi[s : s + n]
        vj = runs.vj[s : s + n]
        # push pass-before second so pass-after is explored first
        for order in (1, 0):
            if order == 0:
                new_edges = [(int(a), int(b), h) for a, b in zip(vi, vj)]
            else:
                new_edges = [(int(b), int(a), h) for a, b in zip(vi, vj)]
            child = dist.copy()
            child_overlay = {u: list(es) for u, es in overlay.items()}
            for u, v, w in new_edges:
                child_overlay.setdefault(u, []).append((v, w))
            if not propagate(child, new_edges, child_overlay):
                stats.nodes += 1
                continue
            child_decided = decided.copy()
            child_decided[branch] = 1 if order == 0 else -1
            stack.append((child, child_decided, child_overlay))

    stats.optimal = not budget_hit
    stats.wall_ms = (time.perf_counter() - t_begin) * 1e3
    if best_schedules is None:
        raise Infeasible("no feasible joint schedule found")
    return best_schedules, stats
