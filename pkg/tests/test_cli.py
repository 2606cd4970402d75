import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from electricsight import cli, io, scenesim
from electricsight.geometry import CameraModel

from conftest import corridor_pairs, corridor_pose, pose_errors

SMALL_SPEC = {"length": 160.0, "width": 24.0, "density": 100.0}


def small_spec(**kw):
    return scenesim.CorridorSpec(**{**SMALL_SPEC, **kw})


def write_hazard_scene(out, name, hazard, spec=None):
    spec = spec or small_spec()
    scene = scenesim.generate_scene(spec, hazard)
    env = cli._env_name(spec)
    if not (out / env).exists():
        io.write_ply(out / env, scene.cloud)
    return cli.write_scene(out, name, scene, env)


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes")
    near = write_hazard_scene(out, "near", scenesim.HazardSpec(
        "lift_like", 50.0, -3.0, platform_height=12.0, hazard_id="lift-near"))
    far = write_hazard_scene(out, "far", scenesim.HazardSpec(
        "lift_like", 50.0, -11.0, platform_height=6.0, hazard_id="lift-far"))
    return {"near": near, "far": far, "dir": out}


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    if capsys is not None:
        return code, capsys.readouterr()
    return code


def test_measure_alarm_exit_2(scenes, capsys):
    code, cap = run(["measure", scenes["near"]], capsys)
    assert code == 2
    doc = json.loads(cap.out)
    assert doc["alarm"] is True
    assert doc["hazards"][0]["hazard_id"] == "lift-near"
    assert doc["hazards"][0]["d_min"] < 10


def test_measure_no_alarm_exit_0(scenes, capsys):
    code, cap = run(["measure", scenes["far"]], capsys)
    assert code == 0
    assert json.loads(cap.out)["alarm"] is False


def test_measure_threshold_flag(scenes, capsys):
    assert run(["measure", scenes["far"], "--threshold", "100"], capsys)[0] == 2
    assert run(["measure", scenes["near"], "--threshold", "0.5"], capsys)[0] == 0


def test_measure_writes_identical_reports(scenes, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run(["measure", scenes["near"], "--out", a])
    run(["measure", scenes["near"], "--out", b])
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("flags", [["--method", "mobileye"], ["--no-depth-constraint"],
                                   ["--no-arm-box"], ["--no-gmm-ht"]])
def test_measure_flags(scenes, capsys, flags):
    code, cap = run(["measure", scenes["near"], *flags], capsys)
    assert code == 2
    doc = json.loads(cap.out)
    if "--no-depth-constraint" in flags:
        assert doc["hazards"][0]["constraint_applied"] is False
    if "--method" in flags:
        assert doc["method"] == "mobileye"


def test_missing_point_cloud(scenes, tmp_path, capsys):
    d = json.loads(Path(scenes["near"]).read_text())
    d["point_cloud"] = {"path": "nowhere.ply"}
    d["image"] = None
    d["ground_truth"] = None
    p = tmp_path / "broken.json"
    p.write_text(json.dumps(d))
    code, cap = run(["measure", p], capsys)
    assert code == 1
    assert "point_cloud.path" in cap.err


def test_measure_from_correspondences(scenes, tmp_path, capsys):
    d = json.loads(Path(scenes["near"]).read_text())
    spec = small_spec()
    cam, ext = spec.camera, spec.extrinsics
    px, pts = corridor_pairs(np.random.default_rng(0), cam, ext, n=30, noise=0.0)
    d["correspondences"] = [{"pixel": list(p), "point": list(q)} for p, q in zip(px, pts)]
    del d["extrinsics"]
    for k in ("point_cloud", "image", "ground_truth"):
        if isinstance(d.get(k), dict):
            d[k]["path"] = str(Path(scenes["dir"]) / d[k]["path"])
        elif isinstance(d.get(k), str):
            d[k] = str(Path(scenes["dir"]) / d[k])
    p = tmp_path / "corr.json"
    p.write_text(json.dumps(d))
    code_c, cap_c = run(["measure", p], capsys)
    code_e, cap_e = run(["measure", scenes["near"]], capsys)
    assert code_c == code_e == 2
    dc = json.loads(cap_c.out)["hazards"][0]["d_min"]
    de = json.loads(cap_e.out)["hazards"][0]["d_min"]
    assert dc == pytest.approx(de, abs=1e-3)


def test_config_precedence(scenes, tmp_path, capsys):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"threshold": 100.0}))
    # config over default
    assert run(["measure", scenes["far"], "--config", conf], capsys)[0] == 2
    # flag over config
    assert run(["measure", scenes["far"], "--config", conf, "--threshold", "1"], capsys)[0] == 0
    # verb section over top level
    conf.write_text(json.dumps({"threshold": 100.0, "measure": {"threshold": 1.0}}))
    assert run(["measure", scenes["far"], "--config", conf], capsys)[0] == 0


def test_config_boolean_flag_precedence(scenes, tmp_path, capsys):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"use_depth_constraint": False}))
    _, cap = run(["measure", scenes["near"], "--config", conf], capsys)
    assert json.loads(cap.out)["config"]["use_depth_constraint"] is False
    _, cap = run(["measure", scenes["near"]], capsys)
    assert json.loads(cap.out)["config"]["use_depth_constraint"] is True


def test_log_env(scenes, capsys, monkeypatch):
    monkeypatch.setenv("ELECTRICSIGHT_LOG", "DEBUG")
    _, cap = run(["measure", scenes["near"]], capsys)
    assert "DEBUG" in cap.err
    monkeypatch.setenv("ELECTRICSIGHT_LOG", "ERROR")
    _, cap = run(["measure", scenes["near"]], capsys)
    assert "DEBUG" not in cap.err


def test_usage_errors(capsys):
    assert run(["frobnicate"], capsys)[0] == 1
    assert run(["measure", "/nonexistent/scene.json"], capsys)[0] == 1
    assert run(["simulate", "--seed", "-3", "--count", "0", "--out", "/tmp/x"], capsys)[0] == 1


def _tree_digest(root):
    h = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return h


def _spec_file(tmp_path):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(SMALL_SPEC))
    return p


def test_simulate_count_zero(tmp_path, capsys):
    out = tmp_path / "empty"
    assert run(["simulate", "--count", "0", "--out", out], capsys)[0] == 0
    man = io.read_json(out / "manifest.json")
    assert man["count"] == 0 and man["scenes"] == []


def test_simulate_deterministic(tmp_path, capsys):
    spec = _spec_file(tmp_path)
    for name in ("a", "b"):
        assert run(["simulate", "--count", "3", "--seed", "42", "--spec", spec,
                    "--out", tmp_path / name], capsys)[0] == 0
    da, db = _tree_digest(tmp_path / "a"), _tree_digest(tmp_path / "b")
    assert da == db
    assert len([k for k in da if k.endswith(".gt.json")]) == 3


def test_simulate_large_seed(tmp_path, capsys):
    spec = _spec_file(tmp_path)
    assert run(["simulate", "--count", "1", "--seed", str(2 ** 64 - 1), "--spec", spec,
                "--no-image", "--out", tmp_path / "s"], capsys)[0] == 0


def test_simulate_sweep_preset(tmp_path, capsys):
    spec = _spec_file(tmp_path)
    out = tmp_path / "sweep"
    assert run(["simulate", "--preset", "sweep", "--spec", spec, "--no-image",
                "--out", out], capsys)[0] == 0
    man = io.read_json(out / "manifest.json")
    assert man["count"] == 13
    xs = [io.read_json(out / e["ground_truth"])["hazard_specs"][0]["x"] for e in man["scenes"]]
    assert xs == list(np.arange(20.0, 141.0, 10.0))


def test_eval_empty(tmp_path, capsys):
    (tmp_path / "ds").mkdir()
    code, cap = run(["eval", tmp_path / "ds"], capsys)
    assert code == 1
    assert io.read_json(tmp_path / "ds" / "eval" / "summary.json")["scene_count"] == 0


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec = root / "spec.json"
    spec.write_text(json.dumps(SMALL_SPEC))
    assert cli.main(["simulate", "--preset", "mixed", "--count", "6", "--seed", "7",
                     "--spec", str(spec), "--out", str(root / "data")]) == 0
    return root / "data"


def test_eval_self_audit(dataset, tmp_path, capsys):
    out = tmp_path / "ev"
    code, cap = run(["eval", dataset, "--out", out], capsys)
    assert code == 0
    summary = io.read_json(out / "summary.json")
    assert summary["scene_count"] == 6
    for method in ("ours", "mobileye"):
        errors, correct = [], []
        for rp in sorted((out / "reports" / method).glob("*.report.json")):
            rep = io.read_json(rp)
            gt = io.read_json(dataset / rp.name.replace(".report.json", ".gt.json"))
            truth = {h["id"]: h["distance"] for h in gt["hazards"]}
            for h in rep["hazards"]:
                errors.append(abs(h["d_min"] - truth[h["hazard_id"]]))
                correct.append(h["alarm"] == (truth[h["hazard_id"]] < rep["threshold"]))
        stats = summary["methods"][method]["all"]
        assert stats["count"] == len(errors) == 6
        assert stats["mean_error"] == pytest.approx(np.mean(errors), rel=1e-12)
        assert stats["alarm_accuracy"] == pytest.approx(100 * np.mean(correct))
        assert 0 <= stats["alarm_accuracy"] <= 100
        groups = summary["methods"][method]
        assert groups["crane-like"]["count"] + groups["lifts-like"]["count"] == 6
    assert "lifts-like" in cap.out


def test_eval_parallel_matches_serial(dataset, tmp_path, capsys):
    run(["eval", dataset, "--method", "ours", "--out", tmp_path / "s"], capsys)
    run(["eval", dataset, "--method", "ours", "--jobs", "2", "--out", tmp_path / "p"], capsys)
    a = io.read_json(tmp_path / "s" / "summary.json")
    b = io.read_json(tmp_path / "p" / "summary.json")
    assert a["methods"] == b["methods"]


def test_eval_skips_scenes_without_truth(dataset, tmp_path, capsys):
    ds = tmp_path / "partial"
    ds.mkdir()
    man = io.read_json(dataset / "manifest.json")
    for e in man["scenes"][:2]:
        d = io.read_json(dataset / e["scene"])
        d["point_cloud"]["path"] = str(dataset / d["point_cloud"]["path"])
        d["image"]["path"] = str(dataset / d["image"]["path"])
        if e is man["scenes"][0]:
            d.pop("ground_truth")
        else:
            d["ground_truth"] = str(dataset / d["ground_truth"])
        io.write_json(ds / e["scene"], d)
    code, _ = run(["eval", ds, "--method", "ours"], capsys)
    summary = io.read_json(ds / "eval" / "summary.json")
    assert code == 0
    assert summary["scene_count"] == 1 and summary["skipped_without_ground_truth"] == 1


def _write_pairs(path, n, noise, seed=0, camera_inline=True):
    cam = CameraModel(1000.0, 1000.0, 960.0, 540.0, 1920, 1080)
    px, pts = corridor_pairs(np.random.default_rng(seed), cam, corridor_pose(), n=n,
                             noise=noise)
    doc = {"correspondences": [{"pixel": list(p), "point": list(q), "weight": 1.0}
                               for p, q in zip(px, pts)]}
    if camera_inline:
        doc["camera"] = cam.to_dict()
    path.write_text(json.dumps(doc))
    return path


def test_register_noiseless(tmp_path, capsys):
    p = _write_pairs(tmp_path / "c.json", 50, 0.0)
    code, cap = run(["register", p], capsys)
    assert code == 0
    doc = json.loads(cap.out)
    assert doc["rms_px"] < 1e-6
    assert doc["n_correspondences"] == 50


def test_register_noisy(tmp_path, capsys):
    from electricsight.geometry import RigidTransform

    dts, drs = [], []
    for seed in range(10):
        p = _write_pairs(tmp_path / f"c{seed}.json", 50, 1.0, seed)
        out = tmp_path / f"e{seed}.json"
        assert run(["register", p, "--out", out], capsys)[0] == 0
        d = io.read_json(out)
        dt, dr = pose_errors(RigidTransform(d["rotation"], d["translation"]), corridor_pose())
        dts.append(dt)
        drs.append(dr)
    assert np.median(dts) <= 0.1 and np.median(drs) <= 0.3


def test_register_separate_camera(tmp_path, capsys):
    p = _write_pairs(tmp_path / "c.json", 20, 0.0, camera_inline=False)
    cam = tmp_path / "cam.json"
    cam.write_text(json.dumps(CameraModel(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).to_dict()))
    assert run(["register", p, "--camera", cam], capsys)[0] == 0
    assert run(["register", p], capsys)[0] == 1


def test_register_too_few(tmp_path, capsys):
    p = _write_pairs(tmp_path / "c.json", 5, 0.0)
    code, cap = run(["register", p], capsys)
    assert code == 1
    assert "InsufficientCorrespondences" in cap.err


def test_console_entry_point(scenes):
    proc = subprocess.run([sys.executable, "-m", "electricsight.cli", "measure",
                           str(scenes["far"])], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["schema"] == io.REPORT_SCHEMA
