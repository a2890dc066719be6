"""Packet trace data model and on-disk formats.

A trace is the ground truth a world publishes: integer-microsecond packet
arrivals tagged with flow and clique ids, plus a flow table describing each
flow. Everything downstream (features, detection, replay) consumes this model,
so validation and deterministic serialization live here.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TOOL_VERSION = "0.1.0"

PROTO_TCP = 6
PROTO_UDP = 17

BENIGN = "benign"
MALICIOUS = "malicious"

EPISODE_KINDS = ("exfiltration", "beaconing", "scan", "evasive_c2")


@dataclass(frozen=True)
class FlowKey:
    """Directed five-tuple identifying a flow."""

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    proto: int

    def to_dict(self) -> dict:
        return {
            "src_ip": self.src_ip,
            "dst_ip": self.dst_ip,
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "proto": self.proto,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowKey":
        return cls(d["src_ip"], d["dst_ip"], int(d["src_port"]),
                   int(d["dst_port"]), int(d["proto"]))


@dataclass(frozen=True)
class FlowInfo:
    key: FlowKey
    device_class: str
    label: str  # BENIGN or MALICIOUS


@dataclass(frozen=True)
class PacketRecord:
    ts_us: int
    flow_id: int
    len_bytes: int
    clique_id: int


@dataclass(frozen=True)
class Budgets:
    """Evasion budget triple. Unconstrained entries are +inf."""

    r_min_bytes: int
    epsilon_s: float
    delta_q_s: float

    def to_dict(self) -> dict:
        return {
            "r_min_bytes": self.r_min_bytes,
            "epsilon_s": None if math.isinf(self.epsilon_s) else self.epsilon_s,
            "delta_q_s": None if math.isinf(self.delta_q_s) else self.delta_q_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Budgets":
        eps = d.get("epsilon_s")
        dq = d.get("delta_q_s")
        return cls(
            r_min_bytes=int(d["r_min_bytes"]),
            epsilon_s=math.inf if eps is None else float(eps),
            delta_q_s=math.inf if dq is None else float(dq),
        )


@dataclass(frozen=True)
class EpisodeLabel:
    flow_id: int
    start_window: int
    end_window: int  # inclusive
    kind: str
    budgets: Budgets
    feasible: bool

    def to_dict(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "start_window": self.start_window,
            "end_window": self.end_window,
            "kind": self.kind,
            "budgets": self.budgets.to_dict(),
            "feasible": self.feasible,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeLabel":
        return cls(
            flow_id=int(d["flow_id"]),
            start_window=int(d["start_window"]),
            end_window=int(d["end_window"]),
            kind=d["kind"],
            budgets=Budgets.from_dict(d["budgets"]),
            feasible=bool(d["feasible"]),
        )


@dataclass(frozen=True)
class RunManifest:
    world_id: str
    seed: int
    config_hash: str
    feature_contract: str
    split: tuple[float, float, float]
    tool_version: str = TOOL_VERSION
    digest: str = "sha256"

    def to_dict(self) -> dict:
        return {
            "world_id": self.world_id,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "feature_contract": self.feature_contract,
            "split": list(self.split),
            "tool_version": self.tool_version,
            "digest": self.digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            world_id=d["world_id"],
            seed=int(d["seed"]),
            config_hash=d["config_hash"],
            feature_contract=d["feature_contract"],
            split=tuple(float(x) for x in d["split"]),
            tool_version=d.get("tool_version", TOOL_VERSION),
            digest=d.get("digest", "sha256"),
        )


class Trace:
    """Immutable packet trace backed by parallel int64 arrays.

    Packets are sorted by ts_us with ties keeping insertion order; the arrays
    are the canonical representation and PacketRecord views are built lazily.
    """

    __slots__ = ("ts_us", "flow_id", "len_bytes", "clique_id", "flow_table",
                 "horizon_windows", "window_us")

    def __init__(self, ts_us, flow_id, len_bytes, clique_id,
                 flow_table: dict[int, FlowInfo],
                 horizon_windows: int, window_us: int):
        self.ts_us = np.asarray(ts_us, dtype=np.int64)
        self.flow_id = np.asarray(flow_id, dtype=np.int64)
        self.len_bytes = np.asarray(len_bytes, dtype=np.int64)
        self.clique_id = np.asarray(clique_id, dtype=np.int64)
        self.flow_table = flow_table
        self.horizon_windows = int(horizon_windows)
        self.window_us = int(window_us)

    @classmethod
    def from_records(cls, records, flow_table, horizon_windows, window_us) -> "Trace":
        ts = np.array([r.ts_us for r in records], dtype=np.int64)
        fid = np.array([r.flow_id for r in records], dtype=np.int64)
        ln = np.array([r.len_bytes for r in records], dtype=np.int64)
        cq = np.array([r.clique_id for r in records], dtype=np.int64)
        order = np.argsort(ts, kind="stable")
        return cls(ts[order], fid[order], ln[order], cq[order],
                   flow_table, horizon_windows, window_us)

    @property
    def n_packets(self) -> int:
        return int(self.ts_us.shape[0])

    @property
    def horizon_us(self) -> int:
        return self.horizon_windows * self.window_us

    def iter_packets(self):
        for i in range(self.n_packets):
            yield PacketRecord(int(self.ts_us[i]), int(self.flow_id[i]),
                               int(self.len_bytes[i]), int(self.clique_id[i]))

    def subset(self, mask) -> "Trace":
        """Sub-trace selected by boolean mask; shares the flow table."""
        return Trace(self.ts_us[mask], self.flow_id[mask], self.len_bytes[mask],
                     self.clique_id[mask], self.flow_table,
                     self.horizon_windows, self.window_us)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (self.horizon_windows == other.horizon_windows
                and self.window_us == other.window_us
                and self.flow_table == other.flow_table
                and np.array_equal(self.ts_us, other.ts_us)
                and np.array_equal(self.flow_id, other.flow_id)
                and np.array_equal(self.len_bytes, other.len_bytes)
                and np.array_equal(self.clique_id, other.clique_id))


@dataclass
class ValidationReport:
    issues: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues


def validate_trace(trace: Trace, len_bounds: tuple[int, int]) -> ValidationReport:
    """Structural checks: ordering, bounds, referential integrity.

    Returns a report listing every violation found (empty means valid).
    """
    rep = ValidationReport()
    lo, hi = len_bounds
    ts, fid, ln, cq = trace.ts_us, trace.flow_id, trace.len_bytes, trace.clique_id

    if trace.n_packets:
        if np.any(np.diff(ts) < 0):
            rep.issues.append("timestamps not sorted ascending")
        if int(ts.min()) < 0:
            rep.issues.append("negative timestamp")
        if int(ts.max()) >= trace.horizon_us:
            rep.issues.append("timestamp at or beyond horizon end")
        if int(ln.min()) < lo or int(ln.max()) > hi:
            rep.issues.append(f"len_bytes outside [{lo}, {hi}]")
        known = set(trace.flow_table)
        present = set(int(f) for f in np.unique(fid))
        unknown = present - known
        if unknown:
            rep.issues.append(f"packets reference unknown flow ids {sorted(unknown)}")
        # clique id must be constant per flow
        for f in sorted(present & known):
            cqs = np.unique(cq[fid == f])
            if cqs.shape[0] > 1:
                rep.issues.append(f"flow {f} appears in multiple cliques {cqs.tolist()}")
    if trace.horizon_windows <= 0:
        rep.issues.append("horizon_windows must be positive")
    if trace.window_us <= 0:
        rep.issues.append("window_us must be positive")
    return rep


def canonical_json(obj) -> bytes:
    """Stable JSON encoding: sorted keys, compact separators, no NaN/inf."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")


def manifest_hash(payload: bytes) -> str:
    """Hex digest binding a manifest to its exact input bytes."""
    return hashlib.sha256(payload).hexdigest()


def config_hash(config_dict: dict) -> str:
    return manifest_hash(canonical_json(config_dict))


# ---------------------------------------------------------------------------
# On-disk formats

TRACE_HEADER = "ts_us,flow_id,len_bytes,clique_id"


def write_trace_csv(path, trace: Trace) -> None:
    cols = np.column_stack([trace.ts_us, trace.flow_id,
                            trace.len_bytes, trace.clique_id])
    np.savetxt(path, cols, fmt="%d", delimiter=",",
               header=TRACE_HEADER, comments="")


def read_trace_csv(path, flow_table, horizon_windows, window_us) -> Trace:
    with warnings.catch_warnings():
        # a header-only trace (zero packets) is valid; loadtxt warns on it
        warnings.simplefilter("ignore", UserWarning)
        raw = np.loadtxt(path, dtype=np.int64, delimiter=",", skiprows=1,
                         ndmin=2)
    if raw.size == 0:
        raw = raw.reshape(0, 4)
    return Trace(raw[:, 0], raw[:, 1], raw[:, 2], raw[:, 3],
                 flow_table, horizon_windows, window_us)


def write_flow_table(path, flow_table: dict[int, FlowInfo]) -> None:
    out = {
        str(fid): {
            "key": info.key.to_dict(),
            "device_class": info.device_class,
            "label": info.label,
        }
        for fid, info in flow_table.items()
    }
    Path(path).write_text(json.dumps(out, sort_keys=True, indent=2) + "\n")


def read_flow_table(path) -> dict[int, FlowInfo]:
    raw = json.loads(Path(path).read_text())
    return {
        int(fid): FlowInfo(FlowKey.from_dict(d["key"]), d["device_class"], d["label"])
        for fid, d in raw.items()
    }


def write_labels(path, labels: list[EpisodeLabel]) -> None:
    Path(path).write_text(
        json.dumps([lab.to_dict() for lab in labels], sort_keys=True, indent=2) + "\n")


def read_labels(path) -> list[EpisodeLabel]:
    return [EpisodeLabel.from_dict(d) for d in json.loads(Path(path).read_text())]


def write_manifest(path, manifest: RunManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n")


def read_manifest(path) -> RunManifest:
    return RunManifest.from_dict(json.loads(Path(path).read_text()))
