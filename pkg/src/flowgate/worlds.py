"""Synthetic world generation with budget-constrained evasive episodes.

A world is a deterministic function of (config, seed): benign device flows
grouped into contention cliques, a nonnegative coupling matrix W scaled into
a target spectral-radius band, and malicious episodes whose traffic is forced
through three auditable budgets before it is emitted:

  floor      total episode bytes >= r_min_bytes
  distortion mean per-window W1 between the flow's IATs and a pooled benign
             reference <= epsilon_s
  stealth    clique mean queueing delay rises by at most delta_q_s under a
             no-gating replay

Enforcement projects window timing onto the reference (order-preserving
quantile interpolation), repairs sizes to hold the floor, and thins load
against replayed delay until the budgets hold or i_max is exhausted.
Infeasibility is a first-class outcome, not an error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flowgate.features import FEATURE_CONTRACT
from flowgate.trace import (
    BENIGN,
    EPISODE_KINDS,
    MALICIOUS,
    Budgets,
    EpisodeLabel,
    FlowInfo,
    FlowKey,
    PROTO_TCP,
    RunManifest,
    Trace,
    config_hash,
    read_flow_table,
    read_labels,
    read_manifest,
    read_trace_csv,
    write_flow_table,
    write_labels,
    write_manifest,
    write_trace_csv,
)
from flowgate.wfq import clique_mean_delay, replay

BENIGN_KINDS = ("periodic_telemetry", "bulk_stream", "interactive_burst")

REF_CAP = 10_000
I_MAX_DEFAULT = 16
THIN_FACTOR = 0.8
REPLAY_TICK_S = 1e-6
W1_SLACK_S = 1e-9

# rng stream salts so parallel flow generation stays order-independent
_SALT_BENIGN = 1
_SALT_EPISODE = 2
_SALT_THIN = 3
_SALT_GRAPH = 4


class GenerationError(Exception):
    pass


class LocalInfeasibility(Exception):
    """A single window cannot be projected inside its bounds."""


class FloorUnreachable(Exception):
    """count * len_max < r_min_bytes: no size assignment can hit the floor."""


# ---------------------------------------------------------------------------
# exact 1-D Wasserstein-1


def w1_empirical(a, b) -> float:
    """Exact W1 between the empirical distributions of two samples.

    Integrates |F_a - F_b| over the merged support; equals the quantile
    coupling integral, so for equal sizes it reduces to the mean absolute
    difference of the sorted samples.
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("w1_empirical needs nonempty samples")
    xs = np.sort(np.concatenate([a, b]))
    if xs[0] == xs[-1]:
        return 0.0
    fa = np.searchsorted(a, xs, side="right") / a.size
    fb = np.searchsorted(b, xs, side="right") / b.size
    return float(np.sum(np.abs(fa[:-1] - fb[:-1]) * np.diff(xs)))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class BenignFlowSpec:
    flow_id: int
    device_class: str
    clique_id: int
    kind: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"flow_id": self.flow_id, "device_class": self.device_class,
                "clique_id": self.clique_id, "kind": self.kind,
                "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "BenignFlowSpec":
        return cls(int(d["flow_id"]), d["device_class"], int(d["clique_id"]),
                   d["kind"], dict(d.get("params", {})))


@dataclass
class EpisodeSpec:
    """Malicious flow: cover traffic mimicking its device class over the full
    horizon plus a kind-specific overlay inside [start_window, end_window]."""

    flow_id: int
    device_class: str
    clique_id: int
    kind: str
    start_window: int
    end_window: int  # inclusive
    budgets: Budgets
    cover_kind: str
    cover_params: dict = field(default_factory=dict)
    overlay_params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"flow_id": self.flow_id, "device_class": self.device_class,
                "clique_id": self.clique_id, "kind": self.kind,
                "start_window": self.start_window, "end_window": self.end_window,
                "budgets": self.budgets.to_dict(), "cover_kind": self.cover_kind,
                "cover_params": dict(self.cover_params),
                "overlay_params": dict(self.overlay_params)}

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSpec":
        return cls(int(d["flow_id"]), d["device_class"], int(d["clique_id"]),
                   d["kind"], int(d["start_window"]), int(d["end_window"]),
                   Budgets.from_dict(d["budgets"]), d["cover_kind"],
                   dict(d.get("cover_params", {})),
                   dict(d.get("overlay_params", {})))


@dataclass
class WorldConfig:
    world_id: str
    seed: int
    horizon_windows: int
    window_us: int
    capacity_bps: float
    benign_flows: list[BenignFlowSpec] = field(default_factory=list)
    episodes: list[EpisodeSpec] = field(default_factory=list)
    len_bounds: tuple[int, int] = (64, 1500)
    rho_band: tuple[float, float] = (0.4, 0.6)
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    i_max: int = I_MAX_DEFAULT

    def validate(self) -> None:
        if self.horizon_windows <= 0 or self.window_us <= 0:
            raise ValueError("horizon_windows and window_us must be positive")
        if self.capacity_bps <= 0:
            raise ValueError("capacity_bps must be positive")
        lo, hi = self.len_bounds
        if not (0 < lo <= hi):
            raise ValueError("need 0 < len_min <= len_max")
        rlo, rhi = self.rho_band
        if not (0 <= rlo <= rhi):
            raise ValueError("need 0 <= rho_lo <= rho_hi")
        if len(self.split) != 3 or any(s <= 0 for s in self.split) \
                or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split must be three positive fractions summing to 1")
        if self.i_max < 0:
            raise ValueError("i_max must be nonnegative")
        ids = [f.flow_id for f in self.benign_flows] \
            + [e.flow_id for e in self.episodes]
        if len(ids) != len(set(ids)):
            raise ValueError("flow ids must be unique across benign and episodes")
        if not ids:
            raise ValueError("world needs at least one flow")
        for f in self.benign_flows:
            if f.kind not in BENIGN_KINDS:
                raise ValueError(f"unknown benign kind {f.kind!r}")
        benign_classes = {f.device_class for f in self.benign_flows}
        for e in self.episodes:
            if e.kind not in EPISODE_KINDS:
                raise ValueError(f"unknown episode kind {e.kind!r}")
            if e.cover_kind not in BENIGN_KINDS:
                raise ValueError(f"unknown cover kind {e.cover_kind!r}")
            if not (0 <= e.start_window <= e.end_window < self.horizon_windows):
                raise ValueError(f"episode window span invalid for flow {e.flow_id}")
            if e.budgets.r_min_bytes < 0 or e.budgets.epsilon_s < 0 \
                    or e.budgets.delta_q_s < 0:
                raise ValueError("budgets must be nonnegative")
            if e.device_class not in benign_classes:
                raise ValueError(
                    f"episode flow {e.flow_id} mimics class {e.device_class!r} "
                    "with no benign flows to pool a reference from")

    def to_dict(self) -> dict:
        return {
            "world_id": self.world_id, "seed": self.seed,
            "horizon_windows": self.horizon_windows, "window_us": self.window_us,
            "capacity_bps": self.capacity_bps,
            "benign_flows": [f.to_dict() for f in self.benign_flows],
            "episodes": [e.to_dict() for e in self.episodes],
            "len_bounds": list(self.len_bounds),
            "rho_band": list(self.rho_band),
            "split": list(self.split),
            "i_max": self.i_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(
            world_id=d["world_id"], seed=int(d["seed"]),
            horizon_windows=int(d["horizon_windows"]),
            window_us=int(d["window_us"]),
            capacity_bps=float(d["capacity_bps"]),
            benign_flows=[BenignFlowSpec.from_dict(x)
                          for x in d.get("benign_flows", [])],
            episodes=[EpisodeSpec.from_dict(x) for x in d.get("episodes", [])],
            len_bounds=tuple(int(x) for x in d.get("len_bounds", (64, 1500))),
            rho_band=tuple(float(x) for x in d.get("rho_band", (0.4, 0.6))),
            split=tuple(float(x) for x in d.get("split", (0.6, 0.2, 0.2))),
            i_max=int(d.get("i_max", I_MAX_DEFAULT)),
        )

    @classmethod
    def from_json(cls, path) -> "WorldConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    def hash(self) -> str:
        return config_hash(self.to_dict())


# ---------------------------------------------------------------------------
# benign generators


def gen_benign_flow(kind: str, params: dict, rng, horizon_us: int,
                    len_bounds: tuple[int, int]):
    """Dispatch to a device-class generator; returns (ts_us, len_bytes)."""
    if kind == "periodic_telemetry":
        return _gen_periodic(params, rng, horizon_us, len_bounds)
    if kind == "bulk_stream":
        return _gen_bulk(params, rng, horizon_us, len_bounds)
    if kind == "interactive_burst":
        return _gen_interactive(params, rng, horizon_us, len_bounds)
    raise ValueError(f"unknown benign kind {kind!r}")


def _size_range(params, len_bounds, lo_key, hi_key, lo_def, hi_def):
    lo = int(params.get(lo_key, lo_def))
    hi = int(params.get(hi_key, hi_def))
    if not (len_bounds[0] <= lo <= hi <= len_bounds[1]):
        raise ValueError(f"size range [{lo}, {hi}] outside len bounds {len_bounds}")
    return lo, hi


def _finish(ts_f, sizes, horizon_us):
    ts = np.rint(ts_f).astype(np.int64)
    keep = (ts >= 0) & (ts < horizon_us)
    ts, sizes = ts[keep], np.asarray(sizes, dtype=np.int64)[keep]
    order = np.argsort(ts, kind="stable")
    return ts[order], sizes[order]


def _gen_periodic(params, rng, horizon_us, len_bounds):
    period_us = float(params["period_s"]) * 1e6
    if period_us <= 0:
        raise ValueError("period_s must be positive")
    jf = float(params.get("jitter_frac", 0.0))
    if not (0.0 <= jf <= 0.5):
        raise ValueError("jitter_frac must be in [0, 0.5]")
    s_lo, s_hi = _size_range(params, len_bounds, "size_min", "size_max", 80, 220)
    phase = rng.uniform(0.0, period_us)
    n = int(math.ceil((horizon_us - phase) / period_us))
    if n <= 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    k = np.arange(n, dtype=np.float64)
    ts_f = phase + k * period_us + rng.uniform(-jf, jf, n) * period_us
    sizes = rng.integers(s_lo, s_hi + 1, n)
    return _finish(ts_f, sizes, horizon_us)


def _gen_bulk(params, rng, horizon_us, len_bounds):
    rate = float(params["rate_bps"])
    pkt_len = int(params.get("pkt_len", 600))
    if rate <= 0:
        raise ValueError("rate_bps must be positive")
    if not (len_bounds[0] <= pkt_len <= len_bounds[1]):
        raise ValueError(f"pkt_len {pkt_len} outside len bounds {len_bounds}")
    jf = float(params.get("jitter_frac", 0.1))
    if not (0.0 <= jf <= 0.5):
        raise ValueError("jitter_frac must be in [0, 0.5]")
    iat_us = pkt_len / rate * 1e6
    n = int(rate * (horizon_us * 1e-6) // pkt_len)
    if n <= 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    k = np.arange(n, dtype=np.float64)
    # fixed count at jittered slots keeps the byte total exactly on rate
    ts_f = (k + 0.5 + rng.uniform(-jf, jf, n)) * iat_us
    ts_f = np.minimum(ts_f, horizon_us - 1)
    return _finish(ts_f, np.full(n, pkt_len), horizon_us)


def _gen_interactive(params, rng, horizon_us, len_bounds):
    cycle_us = float(params["cycle_s"]) * 1e6
    off = float(params["off_fraction"])
    if cycle_us <= 0:
        raise ValueError("cycle_s must be positive")
    if not (0.0 <= off <= 1.0):
        raise ValueError("off_fraction must be in [0, 1]")
    iat_us = float(params.get("iat_s", 0.05)) * 1e6
    if iat_us <= 0:
        raise ValueError("iat_s must be positive")
    s_lo, s_hi = _size_range(params, len_bounds, "size_min", "size_max", 100, 400)
    on_us = cycle_us * (1.0 - off)
    per_cycle = int(on_us // iat_us)
    if per_cycle <= 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    phase = rng.uniform(0.0, cycle_us)
    n_cycles = int(math.ceil((horizon_us - phase) / cycle_us)) + 1
    starts = phase + np.arange(n_cycles, dtype=np.float64) * cycle_us
    j = np.arange(per_cycle, dtype=np.float64)
    ts_f = (starts[:, None] + (j + 0.5)[None, :] * iat_us).ravel()
    ts_f = ts_f + rng.uniform(-0.25, 0.25, ts_f.size) * iat_us
    sizes = rng.integers(s_lo, s_hi + 1, ts_f.size)
    return _finish(ts_f, sizes, horizon_us)


# ---------------------------------------------------------------------------
# episode overlays (pre-projection proposals)


def _gen_overlay(kind: str, params: dict, rng, span_us: tuple[int, int],
                 len_bounds) -> tuple[np.ndarray, np.ndarray]:
    t0, t1 = span_us
    span = t1 - t0
    if kind == "exfiltration":
        ts, ln = _gen_bulk({"rate_bps": params["rate_bps"],
                            "pkt_len": params.get("pkt_len", 600),
                            "jitter_frac": params.get("jitter_frac", 0.1)},
                           rng, span, len_bounds)
    elif kind == "beaconing":
        ts, ln = _gen_periodic({"period_s": params["period_s"],
                                "jitter_frac": params.get("jitter_frac", 0.05),
                                "size_min": params.get("size_min", 80),
                                "size_max": params.get("size_max", 160)},
                               rng, span, len_bounds)
    elif kind == "scan":
        rate = float(params.get("rate_pps", 50.0))
        pkt_len = int(params.get("pkt_len", 64))
        if not (len_bounds[0] <= pkt_len <= len_bounds[1]):
            raise ValueError(f"pkt_len {pkt_len} outside len bounds {len_bounds}")
        iats = rng.exponential(1e6 / rate, max(1, int(rate * span * 1e-6)))
        ts_f = np.cumsum(iats)
        ts_f = ts_f[ts_f < span]
        ts, ln = _finish(ts_f, np.full(ts_f.size, pkt_len), span)
    elif kind == "evasive_c2":
        every_us = float(params.get("burst_every_s", 5.0)) * 1e6
        burst = int(params.get("burst_pkts", 12))
        intra_us = float(params.get("intra_iat_s", 0.002)) * 1e6
        pkt_len = int(params.get("pkt_len", 200))
        if not (len_bounds[0] <= pkt_len <= len_bounds[1]):
            raise ValueError(f"pkt_len {pkt_len} outside len bounds {len_bounds}")
        phase = rng.uniform(0.0, every_us)
        starts = np.arange(phase, span, every_us)
        j = np.arange(burst, dtype=np.float64)
        ts_f = (starts[:, None] + j[None, :] * intra_us).ravel()
        ts_f = ts_f[ts_f < span]
        ts, ln = _finish(ts_f, np.full(ts_f.size, pkt_len), span)
    else:
        raise ValueError(f"unknown episode kind {kind!r}")
    return ts + t0, ln


# ---------------------------------------------------------------------------
# contention graph


class ContentionGraph:
    """Symmetric nonnegative within-clique weights with rho(W) in a band."""

    def __init__(self, flow_ids, weights, cliques: dict[int, list[int]],
                 spectral_radius: float, rho_band: tuple[float, float]):
        self.flow_ids = [int(f) for f in flow_ids]
        self.weights = np.asarray(weights, dtype=np.float64)
        self.cliques = {int(c): [int(f) for f in fs] for c, fs in cliques.items()}
        self.spectral_radius = float(spectral_radius)
        self.rho_band = (float(rho_band[0]), float(rho_band[1]))
        self.flow_pos = {f: i for i, f in enumerate(self.flow_ids)}
        self.clique_of = {f: c for c, fs in self.cliques.items() for f in fs}

    def to_dict(self) -> dict:
        return {"flow_ids": self.flow_ids,
                "weights": self.weights.tolist(),
                "cliques": {str(c): fs for c, fs in sorted(self.cliques.items())},
                "spectral_radius": self.spectral_radius,
                "rho_band": list(self.rho_band)}

    @classmethod
    def from_dict(cls, d: dict) -> "ContentionGraph":
        return cls(d["flow_ids"], d["weights"],
                   {int(c): fs for c, fs in d["cliques"].items()},
                   d["spectral_radius"], tuple(d["rho_band"]))


def spectral_radius_power(W, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Largest eigenvalue magnitude by power iteration (ones start vector)."""
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    if n == 0:
        return 0.0
    v = np.ones(n) / math.sqrt(n)
    lam = 0.0
    for _ in range(max_iter):
        w = W @ v
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam_new = float(v @ (W @ v))
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    return lam


def build_contention_graph(clique_of: dict[int, int],
                           rho_band: tuple[float, float],
                           rng) -> ContentionGraph:
    flow_ids = sorted(clique_of)
    pos = {f: i for i, f in enumerate(flow_ids)}
    cliques: dict[int, list[int]] = {}
    for f in flow_ids:
        cliques.setdefault(clique_of[f], []).append(f)
    n = len(flow_ids)
    W = np.zeros((n, n))
    for cid in sorted(cliques):
        members = cliques[cid]
        for ai in range(len(members)):
            for bi in range(ai + 1, len(members)):
                w = rng.uniform(0.5, 1.0)
                i, j = pos[members[ai]], pos[members[bi]]
                W[i, j] = W[j, i] = w
    lo, hi = rho_band
    target = 0.5 * (lo + hi)
    rho_raw = spectral_radius_power(W)
    if rho_raw == 0.0:
        if target > 0.0:
            raise GenerationError(
                f"cannot reach rho band [{lo}, {hi}]: all cliques are singletons")
        rho = 0.0
    else:
        W *= target / rho_raw
        rho = spectral_radius_power(W)
    if not (lo <= rho <= hi):
        raise GenerationError(
            f"scaled spectral radius {rho:.6g} missed band [{lo}, {hi}]")
    return ContentionGraph(flow_ids, W, cliques, rho, rho_band)


# ---------------------------------------------------------------------------
# benign IAT reference


class BenignIatReference:
    """Pooled positive IATs of a device class, for one malicious flow."""

    def __init__(self, flow_id: int, sorted_iats_us):
        self.flow_id = int(flow_id)
        self.sorted_iats_us = np.asarray(sorted_iats_us, dtype=np.int64)
        if self.sorted_iats_us.size == 0:
            raise GenerationError(f"empty IAT reference for flow {flow_id}")
        if int(self.sorted_iats_us.min()) <= 0:
            raise GenerationError("reference IATs must be positive")

    @property
    def sorted_iats_s(self) -> np.ndarray:
        return self.sorted_iats_us.astype(np.float64) * 1e-6

    def __eq__(self, other):
        return (isinstance(other, BenignIatReference)
                and self.flow_id == other.flow_id
                and np.array_equal(self.sorted_iats_us, other.sorted_iats_us))


def pool_class_iats(ts_by_flow: list[np.ndarray]) -> np.ndarray:
    """Pooled positive IATs (us) across flows, sorted, capped at REF_CAP by
    evenly spaced order statistics."""
    parts = []
    for ts in ts_by_flow:
        if ts.size >= 2:
            d = np.diff(ts)
            parts.append(d[d > 0])
    if not parts:
        return np.empty(0, np.int64)
    pooled = np.sort(np.concatenate(parts))
    if pooled.size > REF_CAP:
        idx = np.round(np.linspace(0, pooled.size - 1, REF_CAP)).astype(np.int64)
        pooled = pooled[idx]
    return pooled


# ---------------------------------------------------------------------------
# projection-based budget enforcement


def project_iats(ts_us, reference: BenignIatReference, epsilon_s: float,
                 window_bounds: tuple[int, int]) -> np.ndarray:
    """Order-preserving time-warp of one window onto the IAT reference.

    Rank-matches the window's IATs to nearest-rank reference quantiles and
    bisects the interpolation factor tau so the quantized (whole-microsecond)
    result passes the same W1 check the audit applies. The first arrival is
    pinned; if the warped window overflows its bounds one uniform rescale is
    attempted before declaring the window locally infeasible.
    """
    ts = np.asarray(ts_us, dtype=np.int64)
    n = ts.size
    if n < 2:
        raise ValueError("projection needs at least two packets in the window")
    lo, hi = window_bounds
    ref_s = reference.sorted_iats_s
    tol = epsilon_s + W1_SLACK_S
    x = np.diff(ts).astype(np.float64)
    if w1_empirical(x * 1e-6, ref_s) <= tol:
        return ts.copy()
    m = x.size
    nref = reference.sorted_iats_us.size
    u = (np.arange(1, m + 1) - 0.5) / m
    ranks = np.ceil(u * nref).astype(np.int64)
    ranks = np.clip(ranks, 1, nref) - 1
    targets = reference.sorted_iats_us[ranks].astype(np.float64)
    q = np.empty(m)
    q[np.argsort(x, kind="stable")] = targets
    span = hi - 1 - int(ts[0])

    def candidate(tau: float):
        y = x + tau * (q - x)
        iats = np.maximum(1, np.rint(y)).astype(np.int64)
        total = int(iats.sum())
        if total > span:
            if span < m:
                return None
            iats = np.maximum(1, np.rint(y * (span / total))).astype(np.int64)
            if int(iats.sum()) > span:
                return None
        return iats

    def fits(iats) -> bool:
        return iats is not None and \
            w1_empirical(iats.astype(np.float64) * 1e-6, ref_s) <= tol

    best = candidate(1.0)
    if not fits(best):
        raise LocalInfeasibility(
            f"window [{lo}, {hi}) cannot reach distortion {epsilon_s} "
            f"with {n} packets")
    t_lo, t_hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (t_lo + t_hi)
        cand = candidate(mid)
        if fits(cand):
            t_hi, best = mid, cand
        else:
            t_lo = mid
    out = np.empty(n, dtype=np.int64)
    out[0] = ts[0]
    out[1:] = ts[0] + np.cumsum(best)
    return out


def repair_sizes(ts_us, sizes, r_min_bytes: int, bounds: tuple[int, int],
                 window_us: int) -> np.ndarray:
    """Clip sizes into bounds, then grow them to meet the byte floor.

    The deficit is split across windows proportionally to window headroom
    (largest-remainder rounding), then across packets inside each window the
    same way, so the result lands on the floor exactly.
    """
    lo, hi = bounds
    ts = np.asarray(ts_us, dtype=np.int64)
    sizes = np.clip(np.asarray(sizes, dtype=np.int64), lo, hi)
    n = sizes.size
    total = int(sizes.sum())
    if total >= r_min_bytes:
        return sizes
    if n * hi < r_min_bytes:
        raise FloorUnreachable(
            f"{n} packets at len_max {hi} cannot reach floor {r_min_bytes}")
    deficit = r_min_bytes - total
    head = (hi - sizes).astype(np.int64)
    win = ts // window_us
    # ts sorted, so windows are contiguous slices
    cuts = np.flatnonzero(np.diff(win)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [n]])
    win_head = np.add.reduceat(head, starts)
    win_add = _largest_remainder(deficit, win_head)
    for wi in np.flatnonzero(win_add):
        s, e = int(starts[wi]), int(ends[wi])
        sizes[s:e] += _largest_remainder(int(win_add[wi]), head[s:e])
    return sizes


def _largest_remainder(amount: int, weights: np.ndarray) -> np.ndarray:
    """Integer split of amount proportional to weights; sum is exact."""
    total = int(weights.sum())
    if amount == 0 or total == 0:
        return np.zeros(weights.size, dtype=np.int64)
    prod = amount * weights.astype(np.int64)
    base = prod // total
    left = amount - int(base.sum())
    if left:
        rem = prod % total
        order = np.argsort(-rem, kind="stable")
        base[order[:left]] += 1
    return base


@dataclass
class FeasibilityOutcome:
    flow_id: int
    budgets: Budgets
    feasible: bool
    iterations_used: int
    final_distortion: float
    final_delay_delta: float

    def to_dict(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "budgets": self.budgets.to_dict(),
            "feasible": self.feasible,
            "iterations_used": self.iterations_used,
            "final_distortion": self.final_distortion,
            "final_delay_delta": (None if math.isnan(self.final_delay_delta)
                                  else self.final_delay_delta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeasibilityOutcome":
        dd = d["final_delay_delta"]
        return cls(int(d["flow_id"]), Budgets.from_dict(d["budgets"]),
                   bool(d["feasible"]), int(d["iterations_used"]),
                   float(d["final_distortion"]),
                   math.nan if dd is None else float(dd))


@dataclass
class CliqueContext:
    """Shared state for enforcing one episode against its clique."""

    clique_id: int
    flow_id: int
    benign_ts: np.ndarray
    benign_fid: np.ndarray
    benign_len: np.ndarray
    capacity_bps: float
    window_us: int
    horizon_windows: int
    reference: BenignIatReference
    len_bounds: tuple[int, int]
    flow_table: dict
    d_ben_s: float  # benign-only clique mean delay, cached


def clique_baseline_delay(*, ts, fid, ln, clique_id, capacity_bps, window_us,
                          horizon_windows, flow_table) -> float:
    if np.asarray(ts).size == 0:
        return 0.0
    trace = Trace(ts, fid, ln, np.full(np.asarray(ts).shape, clique_id,
                                       dtype=np.int64),
                  flow_table, horizon_windows, window_us)
    log = replay(trace, capacity_bps)
    return clique_mean_delay(log, clique_id)


def window_distortions(ts_us, reference: BenignIatReference,
                       window_us: int) -> list[float]:
    """Per-window W1 (seconds) for windows holding at least two packets."""
    ts = np.asarray(ts_us, dtype=np.int64)
    ref_s = reference.sorted_iats_s
    out = []
    for _, s, e in _window_slices(ts, window_us):
        if e - s >= 2:
            out.append(w1_empirical(np.diff(ts[s:e]).astype(np.float64) * 1e-6,
                                    ref_s))
    return out


def mean_distortion(ts_us, reference, window_us: int) -> float:
    ds = window_distortions(ts_us, reference, window_us)
    return float(np.mean(ds)) if ds else 0.0


def _window_slices(ts: np.ndarray, window_us: int):
    if ts.size == 0:
        return
    w = ts // window_us
    cuts = np.flatnonzero(np.diff(w)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [ts.size]])
    for s, e in zip(starts, ends):
        yield int(w[s]), int(s), int(e)


def _project_pass(ts, sizes, ctx: CliqueContext, budgets: Budgets):
    """One projection + size-repair sweep; returns (ts, sizes, proj_ok)."""
    wus = ctx.window_us
    if not math.isinf(budgets.epsilon_s):
        pieces = []
        proj_ok = True
        for w, s, e in _window_slices(ts, wus):
            seg = ts[s:e]
            if e - s >= 2:
                try:
                    seg = project_iats(seg, ctx.reference, budgets.epsilon_s,
                                       (w * wus, (w + 1) * wus))
                except LocalInfeasibility:
                    proj_ok = False
            pieces.append(seg)
        ts = np.concatenate(pieces) if pieces else ts
    else:
        proj_ok = True
    sizes = repair_sizes(ts, sizes, budgets.r_min_bytes, ctx.len_bounds, wus)
    return ts, sizes, proj_ok


def _attack_delta(ts, sizes, ctx: CliqueContext) -> float:
    merged_ts = np.concatenate([ctx.benign_ts, ts])
    merged_fid = np.concatenate(
        [ctx.benign_fid, np.full(ts.shape, ctx.flow_id, dtype=np.int64)])
    merged_len = np.concatenate([ctx.benign_len, sizes])
    order = np.argsort(merged_ts, kind="stable")
    d_atk = clique_baseline_delay(
        ts=merged_ts[order], fid=merged_fid[order], ln=merged_len[order],
        clique_id=ctx.clique_id, capacity_bps=ctx.capacity_bps,
        window_us=ctx.window_us, horizon_windows=ctx.horizon_windows,
        flow_table=ctx.flow_table)
    return d_atk - ctx.d_ben_s


def enforce_contention(ts_us, sizes, ctx: CliqueContext, budgets: Budgets,
                       i_max: int = I_MAX_DEFAULT, rng=None):
    """Drive one episode's packets through the three budgets.

    Projects timing and repairs sizes, then alternates replayed delay checks
    with 0.8x load thinning until the clique delay budget holds or i_max
    thinnings have been spent. Returns the final packets either way; the
    outcome records feasibility, iterations, and the final measured slack.
    """
    ts = np.asarray(ts_us, dtype=np.int64)
    sizes = np.asarray(sizes, dtype=np.int64)

    def outcome(feasible, its, dist, delta):
        return FeasibilityOutcome(ctx.flow_id, budgets, feasible, its,
                                  dist, delta)

    try:
        ts, sizes, proj_ok = _project_pass(ts, sizes, ctx, budgets)
    except FloorUnreachable:
        return ts, sizes, outcome(
            False, 0, mean_distortion(ts, ctx.reference, ctx.window_us),
            math.nan)
    iterations = 0
    while True:
        delta = _attack_delta(ts, sizes, ctx)
        dist = mean_distortion(ts, ctx.reference, ctx.window_us)
        if proj_ok and delta <= budgets.delta_q_s + REPLAY_TICK_S:
            return ts, sizes, outcome(True, iterations, dist, delta)
        if iterations >= i_max:
            return ts, sizes, outcome(False, iterations, dist, delta)
        iterations += 1
        keep = int(THIN_FACTOR * ts.size)
        if keep < ts.size:
            if keep == 0:
                ts = ts[:0]
                sizes = sizes[:0]
            else:
                sel = np.sort(rng.choice(ts.size, size=keep, replace=False))
                ts, sizes = ts[sel], sizes[sel]
        try:
            ts, sizes, proj_ok = _project_pass(ts, sizes, ctx, budgets)
        except FloorUnreachable:
            return ts, sizes, outcome(
                False, iterations,
                mean_distortion(ts, ctx.reference, ctx.window_us), math.nan)


# ---------------------------------------------------------------------------
# world assembly


class World:
    def __init__(self, trace, graph, labels, references, manifest, feasibility,
                 config):
        self.trace = trace
        self.graph = graph
        self.labels = labels
        self.references = references
        self.manifest = manifest
        self.feasibility = feasibility
        self.config = config


def _flow_key(flow_id: int, clique_id: int) -> FlowKey:
    return FlowKey(
        src_ip=f"10.{clique_id % 250}.{(flow_id >> 8) % 250}.{flow_id % 250}",
        dst_ip="172.16.0.1",
        src_port=20000 + flow_id % 40000,
        dst_port=443,
        proto=PROTO_TCP,
    )


def build_world(config: WorldConfig, seed: int) -> World:
    """Deterministically realize a world from its config and seed."""
    config.validate()
    horizon_us = config.horizon_windows * config.window_us
    bounds = config.len_bounds

    flow_table: dict[int, FlowInfo] = {}
    clique_of: dict[int, int] = {}
    packets: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    for spec in config.benign_flows:
        rng = np.random.default_rng([seed, spec.flow_id, _SALT_BENIGN])
        ts, ln = gen_benign_flow(spec.kind, spec.params, rng, horizon_us, bounds)
        packets[spec.flow_id] = (ts, ln)
        flow_table[spec.flow_id] = FlowInfo(
            _flow_key(spec.flow_id, spec.clique_id), spec.device_class, BENIGN)
        clique_of[spec.flow_id] = spec.clique_id
    for ep in config.episodes:
        flow_table[ep.flow_id] = FlowInfo(
            _flow_key(ep.flow_id, ep.clique_id), ep.device_class, MALICIOUS)
        clique_of[ep.flow_id] = ep.clique_id

    graph = build_contention_graph(
        clique_of, config.rho_band, np.random.default_rng([seed, _SALT_GRAPH]))

    class_pools: dict[str, np.ndarray] = {}
    for cls_name in sorted({e.device_class for e in config.episodes}):
        pool = pool_class_iats(
            [packets[f.flow_id][0] for f in config.benign_flows
             if f.device_class == cls_name])
        if pool.size == 0:
            raise GenerationError(
                f"device class {cls_name!r} yields no benign IATs to reference")
        class_pools[cls_name] = pool

    # benign-only clique arrays and baseline delays, shared across episodes
    clique_benign: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    clique_dben: dict[int, float] = {}

    def benign_of(cid: int):
        if cid not in clique_benign:
            members = [f.flow_id for f in config.benign_flows
                       if f.clique_id == cid]
            if members:
                ts = np.concatenate([packets[f][0] for f in members])
                fid = np.concatenate(
                    [np.full(packets[f][0].shape, f, dtype=np.int64)
                     for f in members])
                ln = np.concatenate([packets[f][1] for f in members])
                order = np.argsort(ts, kind="stable")
                ts, fid, ln = ts[order], fid[order], ln[order]
            else:
                ts = np.empty(0, np.int64)
                fid = np.empty(0, np.int64)
                ln = np.empty(0, np.int64)
            clique_benign[cid] = (ts, fid, ln)
            clique_dben[cid] = clique_baseline_delay(
                ts=ts, fid=fid, ln=ln, clique_id=cid,
                capacity_bps=config.capacity_bps, window_us=config.window_us,
                horizon_windows=config.horizon_windows, flow_table=flow_table)
        return clique_benign[cid], clique_dben[cid]

    labels: list[EpisodeLabel] = []
    references: list[BenignIatReference] = []
    feasibility: list[FeasibilityOutcome] = []

    for ep in sorted(config.episodes, key=lambda e: e.flow_id):
        rng_ep = np.random.default_rng([seed, ep.flow_id, _SALT_EPISODE])
        cover_ts, cover_ln = gen_benign_flow(
            ep.cover_kind, ep.cover_params, rng_ep, horizon_us, bounds)
        span = (ep.start_window * config.window_us,
                (ep.end_window + 1) * config.window_us)
        over_ts, over_ln = _gen_overlay(ep.kind, ep.overlay_params, rng_ep,
                                        span, bounds)
        ts = np.concatenate([cover_ts, over_ts])
        ln = np.concatenate([cover_ln, over_ln])
        order = np.argsort(ts, kind="stable")
        ts, ln = ts[order], ln[order]

        reference = BenignIatReference(ep.flow_id, class_pools[ep.device_class])
        references.append(reference)
        (bts, bfid, bln), d_ben = benign_of(ep.clique_id)
        ctx = CliqueContext(
            clique_id=ep.clique_id, flow_id=ep.flow_id,
            benign_ts=bts, benign_fid=bfid, benign_len=bln,
            capacity_bps=config.capacity_bps, window_us=config.window_us,
            horizon_windows=config.horizon_windows, reference=reference,
            len_bounds=bounds, flow_table=flow_table, d_ben_s=d_ben)
        ts, ln, out = enforce_contention(
            ts, ln, ctx, ep.budgets, config.i_max,
            np.random.default_rng([seed, ep.flow_id, _SALT_THIN]))
        packets[ep.flow_id] = (ts, ln)
        feasibility.append(out)
        labels.append(EpisodeLabel(ep.flow_id, ep.start_window, ep.end_window,
                                   ep.kind, ep.budgets, out.feasible))

    all_ids = sorted(packets)
    ts = np.concatenate([packets[f][0] for f in all_ids])
    fid = np.concatenate([np.full(packets[f][0].shape, f, dtype=np.int64)
                          for f in all_ids])
    ln = np.concatenate([packets[f][1] for f in all_ids])
    cq = np.concatenate([np.full(packets[f][0].shape, clique_of[f],
                                 dtype=np.int64) for f in all_ids])
    order = np.argsort(ts, kind="stable")
    trace = Trace(ts[order], fid[order], ln[order], cq[order], flow_table,
                  config.horizon_windows, config.window_us)

    manifest = RunManifest(
        world_id=config.world_id, seed=seed, config_hash=config.hash(),
        feature_contract=FEATURE_CONTRACT, split=config.split)
    return World(trace, graph, labels, references, manifest, feasibility,
                 config)


# ---------------------------------------------------------------------------
# independent budget audit


def audit_budgets(world: World) -> list[dict]:
    """Recompute all three budget constraints per episode from the trace.

    floor exactly; distortion within 1e-9 s; delay delta within one replay
    tick. Entries carry measured values so failures are diagnosable.
    """
    trace = world.trace
    cfg = world.config
    refs = {r.flow_id: r for r in world.references}
    out = []
    for label in world.labels:
        fid = label.flow_id
        mask = trace.flow_id == fid
        ts = trace.ts_us[mask]
        ln = trace.len_bytes[mask]
        b = label.budgets
        floor_ok = int(ln.sum()) >= b.r_min_bytes
        ds = window_distortions(ts, refs[fid], trace.window_us)
        mean_d = float(np.mean(ds)) if ds else 0.0
        eps_ok = (not ds) or mean_d <= b.epsilon_s + W1_SLACK_S

        cid = world.graph.clique_of[fid]
        in_clique = trace.clique_id == cid
        benign_flows = {f for f, info in trace.flow_table.items()
                        if info.label == BENIGN}
        ben_mask = in_clique & np.isin(
            trace.flow_id, np.array(sorted(benign_flows), dtype=np.int64))
        atk_mask = ben_mask | mask
        d_ben = clique_baseline_delay(
            ts=trace.ts_us[ben_mask], fid=trace.flow_id[ben_mask],
            ln=trace.len_bytes[ben_mask], clique_id=cid,
            capacity_bps=cfg.capacity_bps, window_us=trace.window_us,
            horizon_windows=trace.horizon_windows, flow_table=trace.flow_table)
        d_atk = clique_baseline_delay(
            ts=trace.ts_us[atk_mask], fid=trace.flow_id[atk_mask],
            ln=trace.len_bytes[atk_mask], clique_id=cid,
            capacity_bps=cfg.capacity_bps, window_us=trace.window_us,
            horizon_windows=trace.horizon_windows, flow_table=trace.flow_table)
        delta = d_atk - d_ben
        dq_ok = delta <= b.delta_q_s + REPLAY_TICK_S
        out.append({
            "flow_id": fid,
            "feasible": label.feasible,
            "floor_ok": bool(floor_ok),
            "distortion_ok": bool(eps_ok),
            "delay_ok": bool(dq_ok),
            "all_ok": bool(floor_ok and eps_ok and dq_ok),
            "total_bytes": int(ln.sum()),
            "mean_distortion_s": mean_d,
            "delay_delta_s": float(delta),
        })
    return out


# ---------------------------------------------------------------------------
# on-disk layout


def write_world(out_dir, world: World) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trace_csv(out / "trace.csv", world.trace)
    write_flow_table(out / "flows.csv", world.trace.flow_table)
    write_labels(out / "labels.csv", world.labels)
    write_manifest(out / "manifest.json", world.manifest)
    world.config.to_json(out / "config.json")
    (out / "contention.json").write_text(
        json.dumps(world.graph.to_dict(), sort_keys=True, indent=2) + "\n")
    (out / "feasibility.json").write_text(json.dumps(
        {"i_max": world.config.i_max,
         "outcomes": [o.to_dict() for o in world.feasibility]},
        sort_keys=True, indent=2) + "\n")
    (out / "references.json").write_text(json.dumps(
        {str(r.flow_id): r.sorted_iats_us.tolist() for r in world.references},
        sort_keys=True) + "\n")


def load_world(world_dir) -> World:
    d = Path(world_dir)
    config = WorldConfig.from_dict(json.loads((d / "config.json").read_text()))
    flow_table = read_flow_table(d / "flows.csv")
    trace = read_trace_csv(d / "trace.csv", flow_table,
                           config.horizon_windows, config.window_us)
    labels = read_labels(d / "labels.csv")
    manifest = read_manifest(d / "manifest.json")
    graph = ContentionGraph.from_dict(
        json.loads((d / "contention.json").read_text()))
    feas_doc = json.loads((d / "feasibility.json").read_text())
    feasibility = [FeasibilityOutcome.from_dict(x) for x in feas_doc["outcomes"]]
    refs_doc = json.loads((d / "references.json").read_text())
    references = [BenignIatReference(int(f), v)
                  for f, v in sorted(refs_doc.items(), key=lambda kv: int(kv[0]))]
    return World(trace, graph, labels, references, manifest, feasibility,
                 config)
