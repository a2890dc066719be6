"""Reported quantities, all computed from persisted artifacts.

Detection quality (achieved FPR at alarm and actionable level, incident
recall, time-to-detect), queue outcomes (nearest-rank delay tails of base vs
gated replays of the identical trace), world feasibility rate, and per-row
scoring cost. Labels enter here and nowhere upstream.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flowgate.wfq import delay_percentile

DEFAULT_GRACE_WINDOWS = 8  # persistence window length M


# ---------------------------------------------------------------------------
# detection metrics


def achieved_fpr(records, labels, burn_in_windows: int,
                 thresholds: dict) -> tuple[float, float]:
    """False-positive rates over benign test pairs with a set threshold.

    A pair is one (flow, window) record with window >= burn_in_windows,
    flow not named by any episode label, and a non-null detector threshold.
    Returns (alarm_rate, actionable_rate); raises if nothing is eligible.
    """
    malicious = {l.flow_id for l in labels}
    eligible = alarms = actionable = 0
    for r in records:
        if r.window < burn_in_windows or r.flow_id in malicious:
            continue
        th = thresholds.get(r.flow_id)
        if th is None or th["detector"] is None:
            continue
        eligible += 1
        alarms += r.a
        actionable += r.z
    if eligible == 0:
        raise ValueError("no eligible benign test pairs to rate")
    return alarms / eligible, actionable / eligible


def _z_windows_by_flow(records) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for r in records:
        if r.z:
            out.setdefault(r.flow_id, []).append(r.window)
    return out


def _first_hit(z_windows: dict, episode, grace_windows: int):
    lo = episode.start_window
    hi = episode.end_window + grace_windows
    for w in z_windows.get(episode.flow_id, ()):
        if lo <= w <= hi:
            return w
    return None


def incident_recall(records, episodes, grace_windows: int =
                    DEFAULT_GRACE_WINDOWS) -> float:
    """Fraction of episodes whose flow goes actionable inside the episode
    span extended by grace_windows."""
    if not episodes:
        raise ValueError("incident_recall needs at least one episode")
    zw = _z_windows_by_flow(records)
    hits = sum(1 for ep in episodes
               if _first_hit(zw, ep, grace_windows) is not None)
    return hits / len(episodes)


def time_to_detect(records, episode, grace_windows: int =
                   DEFAULT_GRACE_WINDOWS,
                   window_s: float = 0.25) -> float | None:
    """(first actionable window - start_window) * window_s, or None if the
    episode is never detected inside its grace-extended span."""
    w = _first_hit(_z_windows_by_flow(records), episode, grace_windows)
    if w is None:
        return None
    return (w - episode.start_window) * window_s


def feasibility_rate(outcomes) -> float:
    """Fraction of episodes whose budgets were certified; vacuously 1."""
    if not outcomes:
        return 1.0
    return sum(1 for o in outcomes if o.feasible) / len(outcomes)


# ---------------------------------------------------------------------------
# queue metrics


def queue_impact(base_log, gated_log) -> tuple[float, float]:
    """(delta p99.9 delay, delta p99.9 benign-only delay), gated minus base,
    in milliseconds. Both logs must replay the identical trace."""
    d = (delay_percentile(gated_log, 99.9)
         - delay_percentile(base_log, 99.9)) * 1e-3
    c = (delay_percentile(gated_log, 99.9, benign_only=True)
         - delay_percentile(base_log, 99.9, benign_only=True)) * 1e-3
    return d, c


# ---------------------------------------------------------------------------
# scoring cost


def _nearest_rank(values: np.ndarray, pct: float) -> float:
    v = np.sort(values)
    rank = min(v.size, max(1, math.ceil(pct / 100.0 * v.size)))
    return float(v[rank - 1])


def bench_scoring(session, stream, batch_rows: int = 1000,
                  warmup_batches: int = 1) -> tuple[float, float, float]:
    """Wall-clock cost per scored row, in microseconds.

    stream yields (window, rows) groups; timing is aggregated into batches of
    batch_rows rows and the first warmup_batches batches are dropped. Returns
    (mean, p90, max) where mean is over all counted rows and the tail stats
    are nearest-rank over per-batch per-row values.
    """
    times: list[float] = []
    counts: list[int] = []
    acc_t = 0.0
    acc_n = 0
    for window, rows in stream:
        t0 = time.perf_counter()
        session.process_window(window, rows)
        acc_t += time.perf_counter() - t0
        acc_n += len(rows)
        if acc_n >= batch_rows:
            times.append(acc_t)
            counts.append(acc_n)
            acc_t = 0.0
            acc_n = 0
    times = times[warmup_batches:]
    counts = counts[warmup_batches:]
    if not times:
        raise ValueError("stream too short to benchmark after warm-up")
    per_row_us = np.array(times) / np.array(counts, dtype=np.float64) * 1e6
    mean_us = float(sum(times) / sum(counts) * 1e6)
    return mean_us, _nearest_rank(per_row_us, 90.0), float(per_row_us.max())


def synthetic_feature_stream(n_rows: int, n_flows: int = 50, seed: int = 0):
    """Deterministic (window, rows) stream for benchmarking: n_flows flows
    per window with mildly varying dense features."""
    rng = np.random.default_rng(seed)
    n_windows = (n_rows + n_flows - 1) // n_flows
    flows = list(range(1, n_flows + 1))
    buckets = ["a", "b", "c"]
    base = rng.uniform(0.5, 2.0, (n_flows, 7))
    for w in range(n_windows):
        jitter = rng.uniform(-0.1, 0.1, (n_flows, 7))
        rows = []
        for i, f in enumerate(flows):
            x = tuple(float(v) for v in (base[i] + jitter[i]))
            rows.append((f, buckets[i % len(buckets)], x))
        yield w, rows


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class MetricsReport:
    achieved_fpr_alarm: float
    achieved_fpr_actionable: float
    incident_recall: float | None
    ttd_s: list[float] = field(default_factory=list)
    p99_delay_ms_base: float = math.nan
    p99_delay_ms_gated: float = math.nan
    p999_delay_ms_base: float = math.nan
    p999_delay_ms_gated: float = math.nan
    p999_collateral_ms_base: float = math.nan
    p999_collateral_ms_gated: float = math.nan
    delta_p999_delay_ms: float = math.nan
    delta_p999_collateral_ms: float = math.nan
    feasibility_rate: float = 1.0
    mean_us_per_row: float = math.nan
    p90_us_per_row: float = math.nan
    max_us_per_row: float = math.nan

    def to_dict(self) -> dict:
        def num(x):
            return None if (isinstance(x, float) and math.isnan(x)) else x
        return {
            "achieved_fpr_alarm": self.achieved_fpr_alarm,
            "achieved_fpr_actionable": self.achieved_fpr_actionable,
            "incident_recall": self.incident_recall,
            "ttd_s": list(self.ttd_s),
            "p99_delay_ms": {"base": num(self.p99_delay_ms_base),
                             "gated": num(self.p99_delay_ms_gated)},
            "p999_delay_ms": {"base": num(self.p999_delay_ms_base),
                              "gated": num(self.p999_delay_ms_gated)},
            "p999_collateral_ms": {"base": num(self.p999_collateral_ms_base),
                                   "gated": num(self.p999_collateral_ms_gated)},
            "delta_p999_delay_ms": num(self.delta_p999_delay_ms),
            "delta_p999_collateral_ms": num(self.delta_p999_collateral_ms),
            "feasibility_rate": self.feasibility_rate,
            "timing_us_per_row": {"mean": num(self.mean_us_per_row),
                                  "p90": num(self.p90_us_per_row),
                                  "max": num(self.max_us_per_row)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        def num(x):
            return math.nan if x is None else float(x)
        return cls(
            achieved_fpr_alarm=float(d["achieved_fpr_alarm"]),
            achieved_fpr_actionable=float(d["achieved_fpr_actionable"]),
            incident_recall=(None if d["incident_recall"] is None
                             else float(d["incident_recall"])),
            ttd_s=[float(x) for x in d["ttd_s"]],
            p99_delay_ms_base=num(d["p99_delay_ms"]["base"]),
            p99_delay_ms_gated=num(d["p99_delay_ms"]["gated"]),
            p999_delay_ms_base=num(d["p999_delay_ms"]["base"]),
            p999_delay_ms_gated=num(d["p999_delay_ms"]["gated"]),
            p999_collateral_ms_base=num(d["p999_collateral_ms"]["base"]),
            p999_collateral_ms_gated=num(d["p999_collateral_ms"]["gated"]),
            delta_p999_delay_ms=num(d["delta_p999_delay_ms"]),
            delta_p999_collateral_ms=num(d["delta_p999_collateral_ms"]),
            feasibility_rate=float(d["feasibility_rate"]),
            mean_us_per_row=num(d["timing_us_per_row"]["mean"]),
            p90_us_per_row=num(d["timing_us_per_row"]["p90"]),
            max_us_per_row=num(d["timing_us_per_row"]["max"]),
        )


def compute_report(records, labels, thresholds_doc: dict, feasibility,
                   base_log, gated_log, grace_windows: int =
                   DEFAULT_GRACE_WINDOWS, window_s: float = 0.25,
                   timing=(math.nan, math.nan, math.nan)) -> MetricsReport:
    """Assemble every detection and queue metric from persisted artifacts.

    thresholds_doc is the parsed thresholds JSON (burn_in_windows plus the
    per-flow threshold map); timing is an optional bench_scoring result.
    """
    fpr_a, fpr_z = achieved_fpr(records, labels,
                                thresholds_doc["burn_in_windows"],
                                thresholds_doc["flows"])
    if labels:
        recall = incident_recall(records, labels, grace_windows)
        ttds = [t for ep in labels
                if (t := time_to_detect(records, ep, grace_windows,
                                        window_s)) is not None]
    else:
        recall = None
        ttds = []
    d999, c999 = queue_impact(base_log, gated_log)
    return MetricsReport(
        achieved_fpr_alarm=fpr_a,
        achieved_fpr_actionable=fpr_z,
        incident_recall=recall,
        ttd_s=ttds,
        p99_delay_ms_base=delay_percentile(base_log, 99.0) * 1e-3,
        p99_delay_ms_gated=delay_percentile(gated_log, 99.0) * 1e-3,
        p999_delay_ms_base=delay_percentile(base_log, 99.9) * 1e-3,
        p999_delay_ms_gated=delay_percentile(gated_log, 99.9) * 1e-3,
        p999_collateral_ms_base=delay_percentile(base_log, 99.9,
                                                 benign_only=True) * 1e-3,
        p999_collateral_ms_gated=delay_percentile(gated_log, 99.9,
                                                  benign_only=True) * 1e-3,
        delta_p999_delay_ms=d999,
        delta_p999_collateral_ms=c999,
        feasibility_rate=feasibility_rate(feasibility),
        mean_us_per_row=timing[0],
        p90_us_per_row=timing[1],
        max_us_per_row=timing[2],
    )


def write_report(path, report: MetricsReport, manifest) -> None:
    doc = {"manifest": manifest.to_dict(), "metrics": report.to_dict()}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_report(path) -> tuple[MetricsReport, dict]:
    doc = json.loads(Path(path).read_text())
    return MetricsReport.from_dict(doc["metrics"]), doc["manifest"]


def write_episode_table(path, records, labels, grace_windows: int =
                        DEFAULT_GRACE_WINDOWS, window_s: float = 0.25) -> None:
    """Per-episode CSV: episode_id,detected,ttd_s (empty ttd when missed)."""
    lines = ["episode_id,detected,ttd_s"]
    for ep in labels:
        ttd = time_to_detect(records, ep, grace_windows, window_s)
        lines.append(f"{ep.flow_id},{int(ttd is not None)},"
                     f"{'' if ttd is None else repr(ttd)}")
    Path(path).write_text("\n".join(lines) + "\n")
