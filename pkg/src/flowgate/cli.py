"""Command-line pipeline: gen-world, detect, replay, report, bench.

Every command prints its resolved knobs as key=value lines (precedence:
explicit flag, then config file, then built-in default) and writes a manifest
next to its outputs. Detection and replay never open the labels file; labels
enter only through the report command.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from flowgate.detector import (
    DetectorParams,
    DetectorSession,
    read_scores_csv,
    read_thresholds,
    write_scores_csv,
    write_thresholds,
)
from flowgate.features import windowize
from flowgate.metrics import (
    bench_scoring,
    compute_report,
    synthetic_feature_stream,
    write_episode_table,
    write_report,
)
from flowgate.trace import (
    read_flow_table,
    read_labels,
    read_manifest,
    read_trace_csv,
)
from flowgate.wfq import (
    GateConfig,
    gate_controller,
    read_queue_log,
    replay,
    write_queue_log,
    write_schedule,
)
from flowgate.worlds import (
    ContentionGraph,
    FeasibilityOutcome,
    GenerationError,
    WorldConfig,
    build_world,
    write_world,
)


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _resolve(name, flag_value, file_value, default):
    if flag_value is not None:
        value = flag_value
    elif file_value is not None:
        value = file_value
    else:
        value = default
    print(f"{name}={value}")
    return value


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _world_core(world_dir):
    """Detection-side world artifacts: config, flow table, trace, graph.

    Deliberately never touches labels.csv or feasibility.json.
    """
    d = Path(world_dir)
    config = WorldConfig.from_dict(_load_json(d / "config.json"))
    flow_table = read_flow_table(d / "flows.csv")
    trace = read_trace_csv(d / "trace.csv", flow_table,
                           config.horizon_windows, config.window_us)
    graph = ContentionGraph.from_dict(_load_json(d / "contention.json"))
    return config, trace, graph


# ---------------------------------------------------------------------------
# gen-world


def cmd_gen_world(args) -> int:
    config = WorldConfig.from_json(args.config)
    seed = _resolve("seed", args.seed, config.seed, None)
    world = build_world(config, seed)
    out = Path(args.out)
    write_world(out, world)
    n_feasible = sum(1 for o in world.feasibility if o.feasible)
    print(f"world_id={config.world_id}")
    print(f"config_hash={config.hash()}")
    print(f"packets={world.trace.n_packets}")
    print(f"episodes={len(world.labels)}")
    print(f"feasible_episodes={n_feasible}")
    print(f"out={out}")
    return 0


# ---------------------------------------------------------------------------
# detect


def cmd_detect(args) -> int:
    config, trace, graph = _world_core(args.world)
    manifest = read_manifest(Path(args.world) / "manifest.json")

    doc = _load_json(args.params) if args.params else {}
    params = DetectorParams.from_dict(doc.get("detector", {}))
    quantile = float(_resolve("quantile", args.quantile,
                              doc.get("quantile"), 0.99))
    k = int(_resolve("k", args.k, doc.get("k"), 3))
    m = int(_resolve("m", args.m, doc.get("m"), 8))
    w_min = int(_resolve("w_min", args.w_min, doc.get("w_min"), 50))
    if not (0.0 < quantile < 1.0):
        raise ArgumentContractError("quantile must be in (0, 1)")
    if not (1 <= k <= m):
        raise ArgumentContractError("need 1 <= k <= m")

    burn_in = int(round(manifest.split[0] * config.horizon_windows))
    print(f"burn_in_windows={burn_in}")

    session = DetectorSession(params, burn_in_windows=burn_in,
                              quantile=quantile, k_persist=k, m_persist=m,
                              w_min=w_min, graph=graph, seed=args.seed)
    table = windowize(trace, graph)
    bucket_of = {f: trace.flow_table[f].device_class for f in table.flow_ids}
    records = []
    for w in range(table.horizon_windows):
        rows = [(f, bucket_of[f], table.row(fi, w).vector())
                for fi, f in enumerate(table.flow_ids)]
        records.extend(session.process_window(w, rows))
    session.finalize()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out / "scores.csv", records)
    write_thresholds(out / "thresholds.json", session)
    detect_manifest = {
        "world": manifest.to_dict(),
        "detector_params": params.to_dict(),
        "quantile": quantile, "k": k, "m": m, "w_min": w_min,
        "burn_in_windows": burn_in,
        "n_records": len(records),
    }
    (out / "detect_manifest.json").write_text(
        json.dumps(detect_manifest, sort_keys=True, indent=2) + "\n")
    print(f"flows={len(table.flow_ids)}")
    print(f"records={len(records)}")
    print(f"alarms={sum(1 for r in records if r.a)}")
    print(f"actionable={sum(1 for r in records if r.z)}")
    print(f"out={out}")
    return 0


# ---------------------------------------------------------------------------
# replay


def cmd_replay(args) -> int:
    if args.mode == "gated" and not args.scores:
        raise ArgumentContractError("--scores is required when --mode=gated")
    config, trace, _ = _world_core(args.world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    schedule = None
    gate_doc = {}
    if args.mode == "gated":
        file_doc = _load_json(args.gate_config) if args.gate_config else {}
        gc = GateConfig(
            omega_0=float(_resolve("omega_0", args.omega_0,
                                   file_doc.get("omega_0"), 1.0)),
            omega_minus=float(_resolve("omega_minus", args.omega_minus,
                                       file_doc.get("omega_minus"), 0.05)),
            t_g_s=float(_resolve("t_g_s", args.t_g,
                                 file_doc.get("t_g_s"), 30.0)),
        )
        gc.validate()
        records = read_scores_csv(args.scores)
        actionable: dict[int, np.ndarray] = {}
        for r in records:
            z = actionable.setdefault(
                r.flow_id, np.zeros(config.horizon_windows, dtype=bool))
            if r.z:
                z[r.window] = True
        schedule = gate_controller(actionable, gc, config.window_us)
        write_schedule(out / "schedule.csv", schedule)
        gate_doc = {"omega_0": gc.omega_0, "omega_minus": gc.omega_minus,
                    "t_g_s": gc.t_g_s}

    log = replay(trace, config.capacity_bps, schedule)
    write_queue_log(out / "queue_log.csv", log)
    replay_manifest = {
        "world_id": config.world_id,
        "config_hash": config.hash(),
        "mode": args.mode,
        "capacity_bps": config.capacity_bps,
        "gate": gate_doc,
        "packets": log.n,
    }
    (out / "replay_manifest.json").write_text(
        json.dumps(replay_manifest, sort_keys=True, indent=2) + "\n")
    print(f"mode={args.mode}")
    print(f"packets={log.n}")
    print(f"out={out}")
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    d = Path(args.world)
    config = WorldConfig.from_dict(_load_json(d / "config.json"))
    manifest = read_manifest(d / "manifest.json")
    labels = read_labels(d / "labels.csv")
    feas_doc = _load_json(d / "feasibility.json")
    feasibility = [FeasibilityOutcome.from_dict(x)
                   for x in feas_doc["outcomes"]]

    records = read_scores_csv(args.scores)
    thresholds_path = args.thresholds or str(
        Path(args.scores).parent / "thresholds.json")
    thresholds_doc = read_thresholds(thresholds_path)
    base_log = read_queue_log(args.base_log)
    gated_log = read_queue_log(args.gated_log)

    grace = thresholds_doc["m"]
    window_s = config.window_us * 1e-6
    timing = bench_scoring(
        DetectorSession(DetectorParams(), burn_in_windows=40, quantile=0.99,
                        w_min=10),
        synthetic_feature_stream(args.bench_rows))
    rep = compute_report(records, labels, thresholds_doc, feasibility,
                         base_log, gated_log, grace_windows=grace,
                         window_s=window_s, timing=timing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", rep, manifest)
    write_episode_table(out / "episodes.csv", records, labels,
                        grace_windows=grace, window_s=window_s)
    for key, val in rep.to_dict().items():
        print(f"{key}={json.dumps(val)}")
    print(f"out={out}")
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    doc = _load_json(args.params) if args.params else {}
    params = DetectorParams.from_dict(doc.get("detector", {}))
    session = DetectorSession(params, burn_in_windows=40, quantile=0.99,
                              w_min=10)
    mean, p90, mx = bench_scoring(session,
                                  synthetic_feature_stream(args.rows))
    print(f"rows={args.rows}")
    print(f"mean_us_per_row={mean:.3f}")
    print(f"p90_us_per_row={p90:.3f}")
    print(f"max_us_per_row={mx:.3f}")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"rows": args.rows, "mean_us_per_row": mean,
             "p90_us_per_row": p90, "max_us_per_row": mx}, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser


class ArgumentContractError(Exception):
    """Bad argument values detected after parsing; exits with code 2."""


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flowgate",
        description="Flow scoring, calibration, gating, and replay pipeline.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-world", help="realize a synthetic world")
    g.add_argument("--config", required=True, help="world config JSON")
    g.add_argument("--seed", type=int, default=None,
                   help="override the config's seed")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_world)

    d = sub.add_parser("detect", help="score a world's trace")
    d.add_argument("--world", required=True, help="world directory")
    d.add_argument("--params", default=None,
                   help="detector config JSON (detector/quantile/k/m/w_min)")
    d.add_argument("--quantile", type=float, default=None)
    d.add_argument("--k", type=int, default=None)
    d.add_argument("--m", type=int, default=None)
    d.add_argument("--w-min", dest="w_min", type=int, default=None)
    d.add_argument("--seed", type=int, default=None,
                   help="rng seed (needed only when noise_std > 0)")
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=cmd_detect)

    r = sub.add_parser("replay", help="replay a trace through WFQ")
    r.add_argument("--world", required=True)
    r.add_argument("--mode", choices=["base", "gated"], required=True)
    r.add_argument("--scores", default=None,
                   help="scores CSV (required for gated mode)")
    r.add_argument("--gate-config", default=None, help="gate config JSON")
    r.add_argument("--omega-0", dest="omega_0", type=float, default=None)
    r.add_argument("--omega-minus", dest="omega_minus", type=float,
                   default=None)
    r.add_argument("--t-g", dest="t_g", type=float, default=None,
                   help="quarantine hold in seconds")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_replay)

    rep = sub.add_parser("report", help="compute metrics from artifacts")
    rep.add_argument("--world", required=True)
    rep.add_argument("--scores", required=True)
    rep.add_argument("--thresholds", default=None,
                     help="defaults to thresholds.json beside the scores")
    rep.add_argument("--base-log", required=True)
    rep.add_argument("--gated-log", required=True)
    rep.add_argument("--bench-rows", type=int, default=100_000)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)

    b = sub.add_parser("bench", help="per-row scoring cost")
    b.add_argument("--rows", type=int, default=100_000)
    b.add_argument("--params", default=None)
    b.add_argument("--out", default=None, help="optional JSON result path")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "cmd", None) == "bench" and args.rows < 100_000:
        parser.error("--rows must be at least 100000")
    try:
        return args.func(args)
    except ArgumentContractError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, KeyError, GenerationError,
            json.JSONDecodeError) as exc:
        return _fail(f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
