"""Command-line entry points: run, serve, replay, metrics, gen-world."""

import argparse
import json
import os
import sys

from . import world as worldmod

OUT_ENV = "FORESTSURVEY_OUT"


def _load_config(args):
    from . import mission

    if args.config:
        with open(args.config) as f:
            data = json.load(f)
    else:
        data = {"seed": 0}
    if args.seed is not None:
        data["seed"] = args.seed
    out = args.out or os.environ.get(OUT_ENV) or data.get("out_dir")
    if out:
        data["out_dir"] = out
    return mission.load_config(data)


def cmd_run(args):
    from . import mission

    config = _load_config(args)
    artifacts = mission.run_mission(config)
    print(f"mission {config.mission_id}: {artifacts.status}")
    print(f"artifacts in {artifacts.out_dir}")
    return 0 if artifacts.status == "completed" else 1


def cmd_serve(args):
    from . import service

    config = _load_config(args)
    frontend = args.frontend if args.frontend and os.path.isdir(args.frontend) else None
    print(f"serving mission control on ws://{args.host}:{args.port}/ws")
    if frontend:
        print(f"console assets from {frontend}")
    service.serve(config, port=args.port, host_addr=args.host, frontend_dir=frontend)
    return 0


def cmd_replay(args):
    from . import metrics as metricsmod
    from . import mission
    from .records import write_inventory_csv

    out = mission.replay(args.dir, recompute_inventory=not args.no_inventory)
    row = out["metrics_row"]
    print(",".join(metricsmod.METRICS_HEADER))
    print(",".join(str(row[k]) for k in metricsmod.METRICS_HEADER))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        metricsmod.write_metrics_csv([row], os.path.join(args.out, "metrics.csv"))
        if out["inventory"] is not None:
            write_inventory_csv(out["inventory"],
                                os.path.join(args.out, "inventory.csv"))
        print(f"replay outputs in {args.out}")
    return 0


def cmd_metrics(args):
    from . import metrics as metricsmod

    log = metricsmod.load_mission_log(args.log, mission_id=args.mission_id or "")
    events = metricsmod.aggregate_interventions(log)
    m = metricsmod.compute_autonomy_metrics(log, events)
    area = metricsmod.coverage_area(log.path_xy(), args.effective_range)
    row = {
        "mission": args.mission_id or "mission",
        "time_s": m.total_time,
        "distance_m": m.total_distance,
        "interventions": m.intervention_count,
        "mdbi_m": m.mdbi,
        "mtbi_s": m.mtbi,
        "area_ha": area,
        "trees": args.trees,
    }
    print(f"time {m.total_time:.1f} s  distance {m.total_distance:.1f} m  "
          f"interventions {m.intervention_count}  MDBI {m.mdbi:.1f} m  "
          f"MTBI {m.mtbi:.1f} s  area {area:.2f} ha")
    if args.out:
        metricsmod.write_metrics_csv([row], args.out)
        print(f"wrote {args.out}")
    if args.plots:
        os.makedirs(args.plots, exist_ok=True)
        report = metricsmod.intervention_histograms([(log, events)])
        metricsmod.write_histogram_csv(
            report, os.path.join(args.plots, "intervention_histograms.csv")
        )
        if report.notice:
            print(report.notice)
        paths = metricsmod.plot_histograms(report, args.plots)
        for p in paths:
            print(f"wrote {p}")
    return 0


def cmd_gen_world(args):
    patches = []
    for spec in args.patch or []:
        kind, count, severity = spec.split(":")
        patches.append({
            "kind": kind,
            "count": int(count),
            "severity": float(severity),
        })
    world = worldmod.generate_forest(
        extent=tuple(args.extent),
        stem_density=args.density,
        dbh_distribution=(args.dbh_mean, args.dbh_stddev),
        patch_spec=patches or None,
        seed=args.seed if args.seed is not None else 0,
        terrain_preset=args.preset,
        crown_occlusion=args.crown_occlusion,
        clutter_returns=args.clutter,
    )
    out = args.out or os.environ.get(OUT_ENV) or "scene.json"
    worldmod.save_scene(world, out)
    print(f"{len(world.trees)} stems, {len(world.patches)} patches -> {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="forestsurvey",
        description="Deterministic forest-survey robot simulator and toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a headless mission")
    run.add_argument("--config", help="mission config JSON")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help=f"output dir (or ${OUT_ENV})")
    run.set_defaults(fn=cmd_run)

    srv = sub.add_parser("serve", help="host the mission control endpoint")
    srv.add_argument("--config", help="mission config JSON")
    srv.add_argument("--seed", type=int)
    srv.add_argument("--out", help=f"output dir (or ${OUT_ENV})")
    srv.add_argument("--port", type=int, default=8750)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--frontend", help="static console assets to mount at /")
    srv.set_defaults(fn=cmd_serve)

    rep = sub.add_parser("replay", help="recompute metrics/inventory from artifacts")
    rep.add_argument("--dir", required=True, help="mission artifact directory")
    rep.add_argument("--out", help="write recomputed CSVs here")
    rep.add_argument("--no-inventory", action="store_true",
                     help="skip the payload replay, metrics only")
    rep.set_defaults(fn=cmd_replay)

    met = sub.add_parser("metrics", help="autonomy metrics from a mission log")
    met.add_argument("--log", required=True, help="mission_log.jsonl")
    met.add_argument("--out", help="metrics CSV path")
    met.add_argument("--plots", help="directory for histogram CSV + SVGs")
    met.add_argument("--mission-id")
    met.add_argument("--effective-range", type=float, default=15.0)
    met.add_argument("--trees", type=int, default=0)
    met.set_defaults(fn=cmd_metrics)

    gen = sub.add_parser("gen-world", help="generate a synthetic forest scene")
    gen.add_argument("--extent", type=float, nargs=2, default=[40.0, 25.0],
                     metavar=("W", "H"))
    gen.add_argument("--density", type=float, default=220.0, help="stems/ha")
    gen.add_argument("--dbh-mean", type=float, default=0.3)
    gen.add_argument("--dbh-stddev", type=float, default=0.07)
    gen.add_argument("--preset", choices=sorted(worldmod.TERRAIN_PRESETS),
                     default="flat")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--patch", action="append",
                     metavar="KIND:COUNT:SEVERITY",
                     help="e.g. undergrowth:3:0.7 (repeatable)")
    gen.add_argument("--crown-occlusion", action="store_true")
    gen.add_argument("--clutter", action="store_true")
    gen.add_argument("--out")
    gen.set_defaults(fn=cmd_gen_world)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
