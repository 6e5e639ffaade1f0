import json
import shutil
from dataclasses import asdict, replace

import numpy as np
import pytest

from fivelab import five_acc as fa
from fivelab._io import read_png
from fivelab.bench import EDIT_TYPES, ToyConfig, frame_name, generate_toy_benchmark, load_manifest
from fivelab.cli import main
from fivelab.metrics import HttpFeatureProvider
from fivelab.harness import (
    METRIC_COLUMNS,
    RunConfig,
    ValidationError,
    cmd_acc,
    cmd_edit,
    cmd_eval,
    cmd_report,
    recompute,
    report_hash,
)

FAST = ("structure", "psnr", "mse", "ssim", "lpips", "clip", "clip_edit")


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    m = generate_toy_benchmark(ToyConfig(num_frames=9), seed=0, out_dir=root)
    return m


@pytest.fixture(scope="module")
def wan_run(bench, tmp_path_factory):
    out = tmp_path_factory.mktemp("wan")
    log = cmd_edit(bench.root / "manifest.json", RunConfig("wan-edit"), out)
    return out, log


def all_correct_mock(m, path, pattern=None):
    table = {}
    for e in m.edits:
        q = fa.build_questions(asdict(e), 0)
        yn, mc = (True, True) if pattern is None else pattern(e)
        table.update(fa.mock_answers_for(asdict(e), q, yn, mc))
    path.write_text(json.dumps(table))
    return path


# ---- config ----

def test_run_config_validation(tmp_path):
    with pytest.raises(ValidationError):
        RunConfig("dreambooth")
    assert RunConfig("pyramid_edit").method == "pyramid-edit"
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"method": "flowedit", "bogus": 1}))
    with pytest.raises(ValidationError):
        RunConfig.from_file(p)
    p.write_text(json.dumps({"steps": 20}))
    cfg = RunConfig.from_file(p, method="flowedit", seed=4)
    assert (cfg.method, cfg.steps, cfg.seed) == ("flowedit", 20, 4)


def test_guidance_defaults():
    assert RunConfig("wan-edit").guidance() == (1.0, 1.0, 1.0)
    assert RunConfig("wan-edit", model="x.npz").guidance() == (5.0, 12.0, 5.0)
    assert RunConfig("pyramid-edit", model="x.npz").guidance() == (5.0, 10.0, 7.0)


# ---- edit ----

def test_analytic_edit_reaches_oracle(bench, wan_run):
    out, log = wan_run
    assert all(r["status"] == "ok" for r in log["records"])
    for e in bench.edits:
        for i in (0, 8):
            got = read_png(out / "edits" / e.id / "frames" / frame_name(i))
            want = read_png(bench.path(e.oracle_dir) / frame_name(i))
            assert np.abs(got - want).max() <= 1 / 255 + 1e-12


@pytest.mark.parametrize("method", ["flowedit", "pyramid-edit", "wan-edit"])
def test_identity_prompt_returns_source(bench, tmp_path, method):
    label_map = {e.target_prompt: e.source_prompt for e in bench.edits}
    log = cmd_edit(bench.root / "manifest.json", RunConfig(method, label_map=label_map, frame_cap=3), tmp_path)
    for r in log["records"]:
        for i in range(3):
            got = read_png(tmp_path / r["frames_dir"] / frame_name(i))
            src = read_png(bench.path(bench.video(r["video_id"]).frames_dir) / frame_name(i))
            assert np.abs(got - src).max() <= 1 / 255 + 1e-12


def test_rerun_is_hash_identical(bench, wan_run, tmp_path):
    out, _ = wan_run
    cmd_edit(bench.root / "manifest.json", RunConfig("wan-edit"), tmp_path)
    a = cmd_eval(out, metrics=list(FAST))
    b = cmd_eval(tmp_path, metrics=list(FAST))
    assert a["report_hash"] == b["report_hash"] == report_hash(b)
    for e in bench.edits:
        for i in range(9):
            f = f"edits/{e.id}/frames/{frame_name(i)}"
            assert (out / f).read_bytes() == (tmp_path / f).read_bytes()


def test_failure_is_isolated(bench, wan_run, tmp_path):
    root = tmp_path / "bench"
    shutil.copytree(bench.root, root)
    m = load_manifest(root / "manifest.json")
    broken = m.edits[2]
    shutil.rmtree(root / broken.oracle_dir)
    out = tmp_path / "run"
    log = cmd_edit(root / "manifest.json", RunConfig("wan-edit"), out)
    status = {r["edit_id"]: r["status"] for r in log["records"]}
    assert status[broken.id] == "failed"
    assert sum(s == "ok" for s in status.values()) == len(status) - 1
    bad = cmd_eval(out, metrics=list(FAST))
    good = cmd_eval(wan_run[0], metrics=list(FAST))
    assert bad["missing"] == [broken.id]
    for eid, rec in bad["per_record"].items():
        if eid != broken.id:
            assert rec["metrics"] == good["per_record"][eid]["metrics"]
        else:
            assert all(v is None for v in rec["metrics"].values())


# ---- eval ----

def test_eval_full_report(wan_run):
    out, _ = wan_run
    rep = cmd_eval(out)
    assert set(rep["per_type"]) == set(EDIT_TYPES)
    assert all(not r["unavailable"] for r in rep["per_record"].values())
    per_type, overall = recompute(rep)
    for k in rep["metrics"]:
        assert overall[k] == pytest.approx(rep["overall"][k], abs=1e-9)
    # the analytic editor reproduces the oracle, so the background is untouched
    assert rep["overall"]["mse"] <= 1e-9
    assert rep["overall"]["psnr"] == 100.0


def test_source_self_eval(wan_run):
    out, _ = wan_run
    rep = cmd_eval(out, against_source=True)
    o = rep["overall"]
    assert o["structure"] == 0.0 and o["mse"] == 0.0 and o["lpips"] == 0.0
    assert o["psnr"] == 100.0
    assert o["ssim"] == pytest.approx(100.0, abs=1e-9)
    assert o["motion"] == pytest.approx(100.0, abs=1e-9)
    assert (out / "report_source.csv").exists()


def test_csv_golden_header_and_subset(wan_run):
    out, _ = wan_run
    cmd_eval(out, metrics=["mse", "psnr"])
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == ("method,edit_type,Dist.x1e3,PSNR,LPIPS.x1e3,MSE.x1e4,SSIM.x1e2,CLIPS,CLIPS.edit,NIQE,"
                        "MotionFidelity.x1e2,Time.per.frame")
    assert [h for _, h, _ in METRIC_COLUMNS] == lines[0].split(",")[2:]
    assert len(lines) == 1 + len(EDIT_TYPES) + 1
    text, _ = cmd_report([out], "csv", ["mse", "PSNR"])
    head = text.splitlines()[0]
    assert head == "method,edit_type,PSNR,MSE.x1e4"


def test_eval_rejects_unknown_metric(wan_run):
    with pytest.raises(ValidationError):
        cmd_eval(wan_run[0], metrics=["fid"])


def test_provider_outage_marks_unavailable(wan_run):
    down = HttpFeatureProvider("http://127.0.0.1:9/", timeout=0.5, retries=0)
    rep = cmd_eval(wan_run[0], metrics=["mse", "lpips"], provider=down)
    r = next(iter(rep["per_record"].values()))
    assert r["metrics"]["lpips"] is None and "ProviderError" in r["unavailable"]["lpips"]
    assert r["metrics"]["mse"] is not None


# ---- acc ----

def test_acc_all_correct(bench, wan_run, tmp_path):
    out, _ = wan_run
    mock = all_correct_mock(bench, tmp_path / "mock.json")
    rep = cmd_acc(out, f"mock:{mock}")
    assert rep["overall"]["FiVE-Acc"] == 100.0
    assert all(rep["per_type"][et]["present"] for et in EDIT_TYPES)
    assert (out / "acc.csv").read_text().splitlines()[-1].startswith("wan-edit,overall,100.00")


def test_acc_mixed_validity(bench, wan_run, tmp_path):
    out, _ = wan_run
    mock = all_correct_mock(bench, tmp_path / "mock.json")
    table = json.loads(mock.read_text())
    e = bench.edits[0]
    table[f"{e.video_id}/{e.id}/mc"] = "no idea"
    mock.write_text(json.dumps(table))
    rep = cmd_acc(out, f"mock:{mock}")
    assert rep["overall"]["invalid"] == 1
    assert rep["per_type"][e.edit_type]["present"] is False
    assert rep["archive"][e.id]["raw"]["mc"] == "no idea"


def test_acc_reproduces_wan_edit_pattern(bench, tmp_path):
    counts = {"object_rigid": (41, 62, 41, 99), "object_nonrigid": (36, 67, 35, 99), "color": (62, 63, 57, 99),
              "material": (19, 43, 17, 99), "add": (8, 7, 7, 9), "remove": (0, 0, 0, 9)}
    base = {e.edit_type: e for e in bench.edits}
    edits, records, table = [], [], {}
    for et, (yn, mc, inter, n) in counts.items():
        pattern = [(1, 1)] * inter + [(1, 0)] * (yn - inter) + [(0, 1)] * (mc - inter)
        pattern += [(0, 0)] * (n - len(pattern))
        for i, (y, c) in enumerate(pattern):
            e = replace(base[et], id=f"{et}_{i:03d}")
            edits.append(e)
            records.append({"edit_id": e.id, "video_id": e.video_id, "edit_type": et, "status": "ok",
                            "n_frames": 9, "frames_dir": f"videos/{e.video_id}/frames"})
            table.update(fa.mock_answers_for(asdict(e), fa.build_questions(asdict(e), 0), bool(y), bool(c)))
    m = replace(bench, edits=edits)
    mpath = m.save(tmp_path / "manifest.json")
    # the manifest paths are relative to its folder; reuse the bench assets through symlinks
    for sub in ("videos", "edits"):
        (tmp_path / sub).symlink_to(bench.root / sub)
    (tmp_path / "run.json").write_text(json.dumps({"tool_version": "t", "method": "wan-edit", "config_hash": "x",
                                                   "manifest": str(mpath), "records": records}))
    (tmp_path / "mock.json").write_text(json.dumps(table))
    rep = cmd_acc(tmp_path, f"mock:{tmp_path / 'mock.json'}")
    o = rep["overall"]
    for col, want in zip(fa.ACC_COLUMNS, (41.41, 52.53, 55.72, 38.22, 46.97)):
        assert abs(o[col] - want) <= 0.005, col


# ---- report ----

def test_report_single_and_pair(bench, wan_run, tmp_path):
    out, _ = wan_run
    rep = cmd_eval(out, metrics=list(FAST))
    text, warns = cmd_report([out], "json")
    merged = json.loads(text)
    assert not warns
    assert merged["runs"][0]["overall"] == {k: rep["overall"][k] for k in rep["metrics"]}
    twin = tmp_path / "twin"
    shutil.copytree(out, twin)
    csv_text, _ = cmd_report([out, twin], "csv")
    block = csv_text.split("\n\n")[0].splitlines()
    n = len(EDIT_TYPES) + 1
    assert block[1 : 1 + n] == block[1 + n : 1 + 2 * n]


def test_report_flags_version_mismatch(wan_run, tmp_path):
    out, _ = wan_run
    cmd_eval(out, metrics=["mse"])
    twin = tmp_path / "twin"
    shutil.copytree(out, twin)
    rep = json.loads((twin / "report.json").read_text())
    rep["tool_version"] = "9.9.9"
    (twin / "report.json").write_text(json.dumps(rep))
    _, warns = cmd_report([out, twin])
    assert any("different tool versions" in w for w in warns)


def test_report_needs_reports(tmp_path):
    with pytest.raises(ValidationError):
        cmd_report([tmp_path])
    with pytest.raises(ValidationError):
        cmd_report([])


# ---- CLI ----

def test_cli_exit_codes(bench, tmp_path, capsys):
    mpath = str(bench.root / "manifest.json")
    assert main(["edit", "--manifest", mpath, "--method", "wan-edit", "--out", str(tmp_path / "r"),
                 "--config", str(_config(tmp_path, {"frame_cap": 2}))]) == 0
    assert main(["eval", "--run", str(tmp_path / "r"), "--metrics", "mse,psnr"]) == 0
    assert "PSNR" in capsys.readouterr().out
    assert main(["report", "--runs", str(tmp_path / "r"), "--format", "json"]) == 0
    assert main(["edit", "--manifest", str(tmp_path / "nope.json"), "--method", "wan-edit",
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["edit", "--manifest", mpath, "--method", "wan-edit", "--out", str(tmp_path / "x"),
                 "--config", str(_config(tmp_path, {"colour": 1}))]) == 2
    assert main(["eval", "--run", str(tmp_path / "r"), "--metrics", "fid"]) == 2
    assert main(["acc", "--run", str(tmp_path / "r")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["edit", "--manifest", mpath, "--method", "sdedit", "--out", "x"])
    assert exc.value.code == 2


def test_cli_partial_failure(bench, tmp_path):
    root = tmp_path / "bench"
    shutil.copytree(bench.root, root)
    shutil.rmtree(root / bench.edits[0].oracle_dir)
    code = main(["edit", "--manifest", str(root / "manifest.json"), "--method", "flowedit",
                 "--out", str(tmp_path / "r"), "--config", str(_config(tmp_path, {"frame_cap": 1}))])
    assert code == 3


def test_cli_generate_and_acc(tmp_path, capsys, monkeypatch):
    assert main(["generate", "--out", str(tmp_path / "b"), "--frames", "2"]) == 0
    m = load_manifest(tmp_path / "b/manifest.json")
    assert main(["edit", "--manifest", str(tmp_path / "b/manifest.json"), "--method", "pyramid-edit",
                 "--out", str(tmp_path / "r")]) == 0
    mock = all_correct_mock(m, tmp_path / "mock.json")
    monkeypatch.setenv("FIVE_VLM_URL", f"mock:{mock}")
    assert main(["acc", "--run", str(tmp_path / "r")]) == 0
    assert "overall,100.00" in capsys.readouterr().out


def _config(tmp_path, d):
    p = tmp_path / f"cfg{len(d)}{sorted(d)[0]}.json"
    p.write_text(json.dumps(d))
    return p
