"""``electricsight`` command line: measure, simulate, eval, register.

Option values resolve as command-line flag, then config file (``--config``,
JSON; a section named after the verb overrides top-level keys), then the
built-in default.  ``ELECTRICSIGHT_LOG`` sets the log level (DEBUG, INFO,
WARNING, ERROR; default WARNING).

Exit codes: 0 success (no alarm), 2 alarm raised (``measure`` only),
1 error.
"""
import argparse
import dataclasses
import hashlib
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfg
from . import io
from . import scenesim
from .errors import ElectricSightError, SchemaError
from .estimators import ClearanceMonitor, PoseRegistration
from .keypoints import CRANE_LIKE, LIFT_LIKE

log = logging.getLogger("electricsight")

EXIT_OK, EXIT_ERROR, EXIT_ALARM = 0, 1, 2

DEFAULTS = {
    "threshold": cfg.DEFAULT_THRESHOLD_M,
    "method": "ours",
    "methods": "ours,mobileye",
    "use_depth_constraint": True,
    "use_arm_box": True,
    "use_gmm_ht": True,
    "search_radius": cfg.DEFAULT_SEARCH_RADIUS_PX,
    "seed": 0,
    "out": None,
    "preset": "mixed",
    "count": 10,
    "noiseless": False,
    "spec": None,
    "image": True,
    "jobs": 1,
    "camera": None,
    "initial_pose": None,
}

PRESETS = ("lift", "crane", "mixed", "sloped", "sweep", "sweep-crane")
CLASS_GROUPS = {"crane-like": CRANE_LIKE, "lifts-like": LIFT_LIKE}


def setup_logging():
    level = os.environ.get("ELECTRICSIGHT_LOG", "WARNING").strip().upper()
    numeric = int(level) if level.isdigit() else getattr(logging, level, None)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


# argument parsing ---------------------------------------------------------

def _add_pipeline_flags(p):
    p.add_argument("--threshold", type=float, help="alarm threshold in meters (default 10)")
    p.add_argument("--no-depth-constraint", dest="use_depth_constraint",
                   action="store_const", const=False, help="skip the depth-constraint plane")
    p.add_argument("--no-arm-box", dest="use_arm_box", action="store_const", const=False,
                   help="ignore boom-arm detections")
    p.add_argument("--no-gmm-ht", dest="use_gmm_ht", action="store_const", const=False,
                   help="apex at the top-edge midpoint instead of GMM + Hough")
    p.add_argument("--search-radius", type=float, help="table hole-filling radius (px)")


def _common(p):
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--seed", type=int, help="random seed (non-negative)")
    p.add_argument("--out", type=Path, help="output file or directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="electricsight",
        description="Power-line clearance measurement from a camera frame and a survey cloud.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("measure", help="measure hazard clearances in one scene file")
    p.add_argument("scene", type=Path)
    p.add_argument("--method", choices=("ours", "mobileye"))
    _add_pipeline_flags(p)
    _common(p)

    p = sub.add_parser("simulate", help="generate synthetic corridor scenes")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--count", type=int, help="number of scenes (ignored by sweep presets)")
    p.add_argument("--spec", type=Path, help="JSON file with corridor spec fields")
    p.add_argument("--noiseless", action="store_const", const=True,
                   help="zero detection, cloud and image noise")
    p.add_argument("--no-image", dest="image", action="store_const", const=False,
                   help="do not render frames (GMM + Hough then falls back)")
    _common(p)

    p = sub.add_parser("eval", help="evaluate methods on a simulated dataset")
    p.add_argument("dataset", type=Path)
    p.add_argument("--method", choices=("ours", "mobileye"),
                   help="evaluate a single method")
    p.add_argument("--methods", help="comma-separated methods (default ours,mobileye)")
    p.add_argument("--jobs", type=int, help="worker processes")
    _add_pipeline_flags(p)
    _common(p)

    p = sub.add_parser("register", help="estimate extrinsics from 2D-3D correspondences")
    p.add_argument("correspondences", type=Path,
                   help="JSON with correspondences (and camera unless --camera)")
    p.add_argument("--camera", type=Path, help="JSON camera intrinsics")
    p.add_argument("--initial-pose", type=Path, help="JSON extrinsics used as a second start")
    _common(p)
    return parser


def resolve_options(args):
    """Merge flags > config file > defaults into a plain dict."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None) is not None:
        conf = io.read_json(args.config)
        if not isinstance(conf, dict):
            raise SchemaError("config file must hold a JSON object", "")
        section = conf.get(args.verb, {})
        for source in (conf, section):
            for k, v in source.items():
                if k in DEFAULTS:
                    opts[k] = v
    for k, v in vars(args).items():
        if v is not None and k in DEFAULTS:
            opts[k] = v
    if opts["seed"] is not None and int(opts["seed"]) < 0:
        raise SchemaError("seed must be non-negative", "seed")
    return opts


def _monitor(opts, method=None):
    return ClearanceMonitor(method=method or opts["method"], d_thres=float(opts["threshold"]),
                            use_depth_constraint=bool(opts["use_depth_constraint"]),
                            use_arm_box=bool(opts["use_arm_box"]),
                            use_gmm_ht=bool(opts["use_gmm_ht"]),
                            search_radius=float(opts["search_radius"]),
                            seed=int(opts["seed"]))


def _config_echo(opts, keys):
    return {k: (str(opts[k]) if isinstance(opts[k], Path) else opts[k]) for k in keys}


# measure ------------------------------------------------------------------

def _scene_extrinsics(scene):
    if scene.extrinsics is not None:
        return scene.extrinsics
    if scene.correspondences is None:
        raise SchemaError("scene needs extrinsics or correspondences", "extrinsics")
    return PoseRegistration(camera=scene.camera).fit(
        scene.correspondences[0], scene.correspondences[1], scene.correspondences[2]).pose_


def measure_scene_file(scene, monitor):
    extrinsics = _scene_extrinsics(scene)
    monitor.refit_if_needed(scene.cloud, scene.camera, extrinsics, scene.power_lines)
    return monitor.measure(scene.detections, scene.image())


def report_document(scene_path, reports, opts, method):
    return {"schema": io.REPORT_SCHEMA, "version": io.SCHEMA_VERSION,
            "scene": str(scene_path), "method": method,
            "threshold": float(opts["threshold"]),
            "config": _config_echo(opts, ("use_depth_constraint", "use_arm_box", "use_gmm_ht",
                                          "search_radius", "seed")),
            "alarm": any(r.alarm for r in reports),
            "hazards": [r.to_dict() for r in reports]}


def cmd_measure(args, opts):
    scene = io.load_scene(args.scene)
    reports = measure_scene_file(scene, _monitor(opts))
    doc = report_document(args.scene, reports, opts, opts["method"])
    if opts["out"] is not None:
        io.write_json(opts["out"], doc)
    else:
        sys.stdout.write(io.dumps(doc))
    for r in reports:
        state = "ALARM" if r.alarm else "ok"
        print(f"{r.hazard_id} {r.cls}: d_min={r.d_min:.3f} m [{state}]", file=sys.stderr)
    return EXIT_ALARM if doc["alarm"] else EXIT_OK


# simulate -----------------------------------------------------------------

def _corridor(opts):
    spec = scenesim.CorridorSpec()
    if opts["spec"] is not None:
        fields = io.read_json(opts["spec"]) if not isinstance(opts["spec"], dict) else opts["spec"]
        try:
            spec = dataclasses.replace(spec, **fields)
        except TypeError as exc:
            raise SchemaError(f"spec: {exc}", "spec") from exc
    if opts["preset"] == "sloped" and (opts["spec"] is None or "slope_deg" not in fields):
        spec = dataclasses.replace(spec, slope_deg=5.0)
    if opts["noiseless"]:
        spec = spec.noiseless()
    return spec


def scene_seeds(master, count):
    """Per-scene seeds derived from the master seed."""
    children = np.random.SeedSequence(int(master)).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def _preset_hazards(preset, spec, count, master_seed):
    if preset in ("sweep", "sweep-crane"):
        kind = "lift_like" if preset == "sweep" else "crane_like"
        return [(scenesim.sweep_hazard(spec, kind, float(d)), s)
                for d, s in zip(scenesim.sweep_distances(),
                                scene_seeds(master_seed, len(scenesim.sweep_distances())))]
    out = []
    for k, s in enumerate(scene_seeds(master_seed, count)):
        rng = np.random.default_rng(s)
        if preset == "lift":
            kind = "lift_like"
        elif preset == "crane":
            kind = "crane_like"
        else:
            kind = "lift_like" if rng.random() < 0.5 else "crane_like"
        out.append((scenesim.random_hazard(spec, kind, rng), s))
    return out


def write_scene(out_dir, name, scene, env_ref, render_image=True):
    """Write ``scene`` as ``name.json`` plus its ground-truth sidecar and frame."""
    out_dir = Path(out_dir)
    gt_name = f"{name}.gt.json"
    img_name = f"{name}.png" if (render_image and scene.image is not None) else None
    if img_name:
        io.write_image(out_dir / img_name, scene.image)
    io.write_json(out_dir / gt_name, {
        "schema": io.GT_SCHEMA, "version": io.SCHEMA_VERSION,
        "hazards": [g.to_dict() for g in scene.ground_truth],
        "hazard_specs": [h.to_dict() for h in scene.hazards],
        "extrinsics": scene.extrinsics.to_dict(), "seed": int(scene.seed),
        "corridor": scene.spec.to_dict()})
    doc = io.scene_dict(scene.camera, scene.extrinsics, [scene.power_line], scene.detections,
                        {"path": env_ref}, img_name, gt_name,
                        meta={"seed": int(scene.seed)})
    return io.write_json(out_dir / f"{name}.json", doc)


def _env_name(spec):
    key = io.dumps(scenesim._environment_key(spec).to_dict()).encode()
    return f"env-{hashlib.sha256(key).hexdigest()[:12]}.ply"


def cmd_simulate(args, opts):
    out = Path(opts["out"] or "scenes")
    out.mkdir(parents=True, exist_ok=True)
    spec = _corridor(opts)
    count = int(opts["count"])
    if count < 0:
        raise SchemaError("count must be non-negative", "count")
    jobs = _preset_hazards(opts["preset"], spec, count, opts["seed"])
    entries = []
    env_name = None
    if jobs:
        env_name = _env_name(spec)
        if not (out / env_name).exists():
            cloud, _ = scenesim.generate_environment(spec)
            io.write_ply(out / env_name, cloud)
    for k, (hazard, seed) in enumerate(jobs):
        name = f"scene_{k:04d}"
        scene = scenesim.generate_scene(spec, hazard, seed=seed,
                                        render_image=bool(opts["image"]))
        write_scene(out, name, scene, env_name, bool(opts["image"]))
        entries.append({"scene": f"{name}.json", "ground_truth": f"{name}.gt.json",
                        "seed": seed, "kind": hazard.kind, "class": hazard.cls})
        log.info("wrote %s", name)
    io.write_json(out / "manifest.json", {
        "schema": io.MANIFEST_SCHEMA, "version": io.SCHEMA_VERSION, "preset": opts["preset"],
        "master_seed": int(opts["seed"]), "count": len(entries), "environment": env_name,
        "corridor": spec.to_dict(), "scenes": entries})
    print(f"wrote {len(entries)} scenes to {out}", file=sys.stderr)
    return EXIT_OK


# eval ---------------------------------------------------------------------

def dataset_scenes(root):
    root = Path(root)
    manifest = root / "manifest.json"
    if manifest.is_file():
        return [root / e["scene"] for e in io.read_json(manifest).get("scenes", [])]
    return sorted(p for p in root.glob("*.json")
                  if not p.name.endswith((".gt.json", ".report.json"))
                  and p.name not in ("manifest.json", "summary.json"))


def _eval_chunk(paths, opts, methods):
    """Measure a group of scenes; returns one row per (scene, method, hazard)."""
    monitors = {m: _monitor(opts, m) for m in methods}
    clouds = {}
    rows, skipped, failures = [], [], []
    for path in paths:
        scene = io.load_scene(path, require_cloud=False)
        gt = scene.ground_truth()
        if gt is None:
            skipped.append(str(path))
            continue
        if scene.cloud_path is not None:
            if scene.cloud_path not in clouds:
                clouds[scene.cloud_path] = io.read_ply(scene.cloud_path)
            scene._cloud = clouds[scene.cloud_path]
        truth = {h["id"]: h for h in gt["hazards"]}
        for m in methods:
            try:
                reports = measure_scene_file(scene, monitors[m])
            except ElectricSightError as exc:
                failures.append({"scene": str(path), "method": m, "error": str(exc)})
                continue
            for r in reports:
                t = truth.get(r.hazard_id)
                if t is None:
                    continue
                rows.append({"scene": str(path), "method": m, "hazard_id": r.hazard_id,
                             "class": r.cls, "d_min": r.d_min, "oracle": t["distance"],
                             "error": abs(r.d_min - t["distance"]), "alarm": r.alarm,
                             "report": r.to_dict()})
    return rows, skipped, failures


def _group_stats(rows, threshold):
    if not rows:
        return {"count": 0, "mean_error": None, "std_error": None, "alarm_accuracy": None}
    err = np.array([r["error"] for r in rows])
    correct = [r["alarm"] == (r["oracle"] < threshold) for r in rows]
    return {"count": len(rows), "mean_error": float(err.mean()),
            "std_error": float(err.std(ddof=1)) if len(err) > 1 else 0.0,
            "alarm_accuracy": 100.0 * float(np.mean(correct))}


def summarize(rows, methods, threshold):
    out = {}
    for m in methods:
        mrows = [r for r in rows if r["method"] == m]
        groups = {name: _group_stats([r for r in mrows if r["class"] in classes], threshold)
                  for name, classes in CLASS_GROUPS.items()}
        groups["all"] = _group_stats(mrows, threshold)
        out[m] = groups
    return out


def _format_table(summary):
    lines = [f"{'method':<10} {'group':<11} {'n':>4} {'mean err (m)':>16} {'alarm acc':>10}"]
    for m, groups in summary.items():
        for g, s in groups.items():
            if s["count"] == 0:
                lines.append(f"{m:<10} {g:<11} {0:>4} {'-':>16} {'-':>10}")
                continue
            err = f"{s['mean_error']:.3f}+-{s['std_error']:.3f}"
            lines.append(f"{m:<10} {g:<11} {s['count']:>4} {err:>16} "
                         f"{s['alarm_accuracy']:>9.1f}%")
    return "\n".join(lines)


def cmd_eval(args, opts):
    methods = [opts["method"]] if args.method else \
        [m.strip() for m in str(opts["methods"]).split(",") if m.strip()]
    for m in methods:
        if m not in ("ours", "mobileye"):
            raise SchemaError(f"unknown method {m!r}", "methods")
    threshold = float(opts["threshold"])
    paths = dataset_scenes(args.dataset)
    out = Path(opts["out"] or (Path(args.dataset) / "eval"))

    # scenes that share a survey stay in one chunk so the table is built once
    groups = {}
    for p in paths:
        ref = io.read_json(p).get("point_cloud", {})
        key = ref.get("path") if isinstance(ref, dict) else None
        groups.setdefault(key or str(p), []).append(p)
    jobs = max(1, int(opts["jobs"]))
    chunks = [g[i::jobs] for g in groups.values() for i in range(min(jobs, len(g)))]
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_eval_chunk, chunks, [opts] * len(chunks),
                                  [methods] * len(chunks)))
    else:
        results = [_eval_chunk(c, opts, methods) for c in chunks]
    rows = sorted((r for res in results for r in res[0]),
                  key=lambda r: (r["method"], r["scene"], r["hazard_id"]))
    skipped = sorted(s for res in results for s in res[1])
    failures = [f for res in results for f in res[2]]
    if skipped:
        log.warning("skipped %d scenes without ground truth", len(skipped))

    for m in methods:
        per_scene = {}
        for r in rows:
            if r["method"] == m:
                per_scene.setdefault(r["scene"], []).append(r)
        for scene_path, srows in per_scene.items():
            name = Path(scene_path).name.removesuffix(".json")
            io.write_json(out / "reports" / m / f"{name}.report.json", {
                "schema": io.REPORT_SCHEMA, "version": io.SCHEMA_VERSION,
                "scene": io.relpath(scene_path, out), "method": m, "threshold": threshold,
                "alarm": any(r["alarm"] for r in srows),
                "hazards": [r["report"] for r in srows]})

    scene_count = len({r["scene"] for r in rows})
    summary = {"schema": io.SUMMARY_SCHEMA, "version": io.SCHEMA_VERSION,
               "dataset": str(args.dataset), "scene_count": scene_count,
               "skipped_without_ground_truth": len(skipped), "failures": failures,
               "methods": summarize(rows, methods, threshold),
               "config": _config_echo(opts, ("threshold", "use_depth_constraint",
                                             "use_arm_box", "use_gmm_ht", "search_radius",
                                             "seed")) | {"methods": methods}}
    io.write_json(out / "summary.json", summary)
    print(_format_table(summary["methods"]))
    if scene_count == 0:
        print("error: no evaluable scenes", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


# register -----------------------------------------------------------------

def cmd_register(args, opts):
    d = io.read_json(args.correspondences)
    if opts["camera"] is not None:
        camera = io.parse_camera(io.read_json(opts["camera"]), "camera")
    else:
        camera = io.parse_camera(d.get("camera"), "camera")
    if "correspondences" not in d:
        raise SchemaError("missing required field correspondences", "correspondences")
    px, pts, w = io.parse_correspondences(d["correspondences"])
    initial = None
    if opts["initial_pose"] is not None:
        initial = io.parse_extrinsics(io.read_json(opts["initial_pose"]), "initial_pose")
    est = PoseRegistration(camera=camera, initial_pose=initial).fit(px, pts, w)
    doc = {"schema": "electricsight.extrinsics", "version": io.SCHEMA_VERSION,
           **est.pose_.to_dict(), "rms_px": est.rms_, "cost": est.cost_,
           "n_correspondences": est.n_correspondences_}
    if opts["out"] is not None:
        io.write_json(opts["out"], doc)
    else:
        sys.stdout.write(io.dumps(doc))
    print(f"registered {est.n_correspondences_} pairs, rms {est.rms_:.4f} px", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"measure": cmd_measure, "simulate": cmd_simulate, "eval": cmd_eval,
            "register": cmd_register}


def main(argv=None):
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    try:
        opts = resolve_options(args)
        return COMMANDS[args.verb](args, opts)
    except SchemaError as exc:
        where = f" (field: {exc.field})" if exc.field else ""
        print(f"error: {exc}{where}", file=sys.stderr)
    except ElectricSightError as exc:
        stage = f" [stage: {exc.stage}]" if getattr(exc, "stage", None) else ""
        print(f"error: {type(exc).__name__}: {exc}{stage}", file=sys.stderr)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
