"""Weighted fair queueing replay with time-varying per-flow weights.

Each clique is an independent non-preemptive server of fixed capacity.
Packets get a virtual finish tag at arrival:

    F = max(V(arrival), F_prev_of_flow) + len / (weight * capacity)

and the server always picks the queued packet with the smallest tag. V is the
self-clocked virtual time: the tag of the packet most recently put into
service (0 before any service). Weight changes apply to packets tagged after
the change instant; already-tagged packets keep their tags.

Delay of a packet is the wait until service start; the completion instant is
also logged. Buffers are unbounded and the server is work-conserving.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from flowgate.trace import BENIGN, Trace


@dataclass(frozen=True)
class GateConfig:
    """Reversible weight gate: drop to omega_minus for at least t_g_s."""

    omega_0: float = 1.0
    omega_minus: float = 0.05
    t_g_s: float = 30.0

    def validate(self) -> None:
        if not (0.0 < self.omega_minus < self.omega_0):
            raise ValueError("need 0 < omega_minus < omega_0")
        if self.t_g_s < 0:
            raise ValueError("t_g_s must be nonnegative")


class WeightSchedule:
    """Per-flow piecewise-constant weights over microsecond time."""

    def __init__(self, default_weight: float = 1.0):
        self.default_weight = float(default_weight)
        self._entries: dict[int, list[tuple[int, float]]] = {}

    def set_entries(self, flow_id: int, entries: list[tuple[int, float]]) -> None:
        """Entries are (from_us, weight), sorted, first at 0."""
        if not entries or entries[0][0] != 0:
            raise ValueError("schedule for a flow must start at t=0")
        froms = [e[0] for e in entries]
        if froms != sorted(froms):
            raise ValueError("schedule entries must be sorted by from_us")
        if any(w <= 0 for _, w in entries):
            raise ValueError("weights must be positive")
        self._entries[flow_id] = [(int(t), float(w)) for t, w in entries]

    def entries(self, flow_id: int) -> list[tuple[int, float]]:
        return self._entries.get(flow_id, [(0, self.default_weight)])

    def weight_at(self, flow_id: int, t_us: int) -> float:
        ent = self._entries.get(flow_id)
        if ent is None:
            return self.default_weight
        w = ent[0][1]
        for t0, wt in ent:
            if t0 <= t_us:
                w = wt
            else:
                break
        return w

    def flows(self) -> list[int]:
        return sorted(self._entries)


class QueueEventLog:
    """Per-packet service log, aligned with the replayed trace's packet order."""

    __slots__ = ("flow_id", "clique_id", "enqueue_us", "dequeue_us",
                 "complete_us", "benign")

    def __init__(self, flow_id, clique_id, enqueue_us, dequeue_us, complete_us, benign):
        self.flow_id = np.asarray(flow_id, dtype=np.int64)
        self.clique_id = np.asarray(clique_id, dtype=np.int64)
        self.enqueue_us = np.asarray(enqueue_us, dtype=np.int64)
        self.dequeue_us = np.asarray(dequeue_us, dtype=np.float64)
        self.complete_us = np.asarray(complete_us, dtype=np.float64)
        self.benign = np.asarray(benign, dtype=bool)

    @property
    def n(self) -> int:
        return int(self.flow_id.shape[0])

    def delays_us(self) -> np.ndarray:
        return self.dequeue_us - self.enqueue_us


def replay(trace: Trace, capacity_bps: float,
           schedule: WeightSchedule | None = None) -> QueueEventLog:
    """Replay a trace through one WFQ server per clique.

    capacity_bps is in bytes per second. Returns a log whose rows align with
    the trace's packet order.
    """
    if capacity_bps <= 0:
        raise ValueError("capacity must be positive")
    if schedule is None:
        schedule = WeightSchedule()
    n = trace.n_packets
    dequeue = np.empty(n, dtype=np.float64)
    complete = np.empty(n, dtype=np.float64)

    ts = trace.ts_us
    fid = trace.flow_id
    ln = trace.len_bytes
    cq = trace.clique_id
    cap = float(capacity_bps)

    benign_flows = {f for f, info in trace.flow_table.items() if info.label == BENIGN}

    for c in np.unique(cq):
        idx = np.flatnonzero(cq == c)
        _replay_clique(idx, ts, fid, ln, cap, schedule, dequeue, complete)

    benign = np.array([int(f) in benign_flows for f in fid], dtype=bool)
    return QueueEventLog(fid, cq, ts, dequeue, complete, benign)


def _replay_clique(idx, ts, fid, ln, cap, schedule, dequeue, complete) -> None:
    n = idx.shape[0]
    heap: list[tuple[float, int, int]] = []
    last_finish: dict[int, float] = {}
    # per-flow cursor into its weight schedule; arrivals are time-ordered per flow
    sched_pos: dict[int, int] = {}
    virtual = 0.0
    t_free = 0.0
    i = 0
    seq = 0
    us = 1e6 / cap  # service microseconds per byte

    while i < n or heap:
        if not heap:
            nxt = float(ts[idx[i]])
            if nxt > t_free:
                t_free = nxt
        while i < n and ts[idx[i]] <= t_free:
            j = int(idx[i])
            f = int(fid[j])
            ent = schedule._entries.get(f)
            if ent is None:
                w = schedule.default_weight
            else:
                p = sched_pos.get(f, 0)
                t_arr = int(ts[j])
                while p + 1 < len(ent) and ent[p + 1][0] <= t_arr:
                    p += 1
                sched_pos[f] = p
                w = ent[p][1]
            tag = max(virtual, last_finish.get(f, 0.0)) + ln[j] / (w * cap)
            last_finish[f] = tag
            heapq.heappush(heap, (tag, seq, j))
            seq += 1
            i += 1
        if not heap:
            continue
        tag, _, j = heapq.heappop(heap)
        virtual = tag
        dequeue[j] = t_free
        t_free = t_free + ln[j] * us
        complete[j] = t_free


def gate_controller(actionable: dict[int, np.ndarray], config: GateConfig,
                    window_us: int) -> WeightSchedule:
    """Turn per-flow actionable flags into a weight schedule.

    actionable maps flow_id to a boolean array indexed by window. The gate
    drops the flow's weight to omega_minus at the start of the first flagged
    window and holds it until max(flag-clear time, activation + t_g);
    re-activation restarts the quarantine clock, overlapping spans merge.
    """
    config.validate()
    sched = WeightSchedule(default_weight=config.omega_0)
    t_g_us = config.t_g_s * 1e6
    for flow_id in sorted(actionable):
        z = np.asarray(actionable[flow_id], dtype=bool)
        spans = []
        for start_w, end_w in _runs(z):
            start_us = start_w * window_us
            clear_us = (end_w + 1) * window_us
            release_us = max(float(clear_us), start_us + t_g_us)
            spans.append((start_us, release_us))
        merged = []
        for s, e in spans:
            if merged and s <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((s, e))
        entries = [(0, config.omega_0)]
        for s, e in merged:
            if s == 0:
                entries[0] = (0, config.omega_minus)
            else:
                entries.append((int(s), config.omega_minus))
            entries.append((int(math.ceil(e)), config.omega_0))
        sched.set_entries(flow_id, entries)
    return sched


def _runs(z: np.ndarray):
    """Maximal runs of True as (start, end) inclusive window indices."""
    if z.size == 0:
        return
    padded = np.concatenate([[False], z, [False]])
    d = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    for s, e in zip(starts, ends):
        yield int(s), int(e)


def delay_percentile(log: QueueEventLog, pct: float,
                     benign_only: bool = False,
                     clique_id: int | None = None) -> float:
    """Nearest-rank percentile of per-packet delay (microseconds)."""
    if not (0.0 < pct <= 100.0):
        raise ValueError("pct must be in (0, 100]")
    mask = np.ones(log.n, dtype=bool)
    if benign_only:
        mask &= log.benign
    if clique_id is not None:
        mask &= log.clique_id == clique_id
    d = np.sort(log.delays_us()[mask])
    if d.size == 0:
        raise ValueError("no packets match the filter")
    rank = min(d.size, max(1, math.ceil(pct / 100.0 * d.size)))
    return float(d[rank - 1])


def clique_mean_delay(log: QueueEventLog, clique_id: int) -> float:
    """Mean packet delay of one clique, in seconds."""
    mask = log.clique_id == clique_id
    if not mask.any():
        raise ValueError(f"no packets in clique {clique_id}")
    return float(log.delays_us()[mask].mean()) * 1e-6


# ---------------------------------------------------------------------------
# On-disk formats

QUEUE_LOG_HEADER = "flow_id,clique_id,enqueue_us,dequeue_us,complete_us,benign"
SCHEDULE_HEADER = "flow_id,from_us,weight"


def write_queue_log(path, log: QueueEventLog) -> None:
    cols = np.column_stack([log.flow_id, log.clique_id, log.enqueue_us,
                            log.dequeue_us, log.complete_us,
                            log.benign.astype(np.int64)])
    np.savetxt(path, cols, fmt=["%d", "%d", "%d", "%.17g", "%.17g", "%d"],
               delimiter=",", header=QUEUE_LOG_HEADER, comments="")


def read_queue_log(path) -> QueueEventLog:
    raw = np.loadtxt(path, dtype=np.float64, delimiter=",", skiprows=1, ndmin=2)
    if raw.size == 0:
        raw = raw.reshape(0, 6)
    return QueueEventLog(raw[:, 0].astype(np.int64), raw[:, 1].astype(np.int64),
                         raw[:, 2].astype(np.int64), raw[:, 3], raw[:, 4],
                         raw[:, 5] != 0)


def write_schedule(path, schedule: WeightSchedule) -> None:
    lines = [SCHEDULE_HEADER]
    for f in schedule.flows():
        for t, w in schedule.entries(f):
            lines.append(f"{f},{t},{w!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_schedule(path, default_weight: float = 1.0) -> WeightSchedule:
    sched = WeightSchedule(default_weight=default_weight)
    per_flow: dict[int, list[tuple[int, float]]] = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            line = line.strip()
            if not line:
                continue
            f, t, w = line.split(",")
            per_flow.setdefault(int(f), []).append((int(t), float(w)))
    for f, entries in per_flow.items():
        sched.set_entries(f, entries)
    return sched
