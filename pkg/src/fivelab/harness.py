"""End-to-end runs: edit every manifest record, evaluate, ask the VLM judge, merge reports.

Run directory layout::

    run.json                      config, hashes and per-record status
    edits/<edit_id>/frames/*.png  decoded edited frames
    edits/<edit_id>/trajectory.jsonl
    report.json / report.csv      metric table (cmd_eval)
    acc.json / acc.csv            question-answering accuracy (cmd_acc)
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import five_acc as fa
from ._io import sha256_of, write_png
from .bench import (EDIT_TYPES, Manifest, frame_name, load_frames_dir, load_manifest, load_masks, load_video,
                    read_tracklets)
from .flowedit import EditSession, framewise_edit_run, joint_edit_run
from .metrics import (NoBackgroundError, ProviderError, clip_similarity, fit_pristine_model, frame_mean,
                      make_provider, masked_mse, masked_psnr, masked_ssim, motion_fidelity, niqe,
                      perceptual_distance, runtime_per_frame, sample_frames, structure_distance, track_points)
from .metrics.niqe import PristineModel
from .pyramid import (AnalyticPyramidField, PyramidSession, StageSchedule, default_schedule, down,
                      pyramid_edit_run, stack_final, up)
from .rf_core import AnalyticPointMassField, Condition, TimeGrid, load_checkpoint

METHODS = ("flowedit", "pyramid-edit", "wan-edit")
FRAME_CAP = 41

# (key, CSV header, scale) in the order of the standard comparison table
METRIC_COLUMNS = (
    ("structure", "Dist.x1e3", 1e3),
    ("psnr", "PSNR", 1.0),
    ("lpips", "LPIPS.x1e3", 1e3),
    ("mse", "MSE.x1e4", 1e4),
    ("ssim", "SSIM.x1e2", 1e2),
    ("clip", "CLIPS", 1e2),
    ("clip_edit", "CLIPS.edit", 1e2),
    ("niqe", "NIQE", 1.0),
    ("motion", "MotionFidelity.x1e2", 1e2),
    ("time", "Time.per.frame", 1.0),
)
METRIC_KEYS = tuple(k for k, _, _ in METRIC_COLUMNS)
VOLATILE = {"time", "elapsed", "started", "finished", "report_hash", "timestamps", "run_dir"}


class ValidationError(ValueError):
    """Bad CLI input or config; mapped to exit code 2."""


@dataclass
class RunConfig:
    method: str = "wan-edit"
    model: str = "analytic"  # "analytic" or a checkpoint path
    seed: int = 0
    latent_factor: int = 1
    frame_cap: int = FRAME_CAP
    steps: int | None = None
    skip: int | None = None
    cfg_src: float | None = None
    cfg_tgt: float | None = None
    cfg_src_first: float | None = None
    n_avg: int = 1
    history_len: int = 1
    schedule: dict | None = None
    label_map: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        self.method = self.method.replace("_", "-")
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.latent_factor < 1 or self.frame_cap < 1 or self.n_avg < 1:
            raise ValidationError("latent_factor, frame_cap and n_avg must be >= 1")

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        data = json.loads(Path(path).read_text()) if path else {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    def hashed(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        return d

    def analytic(self) -> bool:
        return self.model == "analytic"

    def guidance(self):
        # analytic point-mass fields have a zero null branch, so any scale != 1 would
        # rescale the target; they default to 1 (plain conditional velocities)
        if self.analytic():
            base = (1.0, 1.0, 1.0)
        elif self.method == "pyramid-edit":
            base = (5.0, 10.0, 7.0)
        else:
            base = (5.0, 12.0, 5.0)
        pick = lambda v, d: d if v is None else float(v)  # noqa: E731
        return pick(self.cfg_src, base[0]), pick(self.cfg_tgt, base[1]), pick(self.cfg_src_first, base[2])


def encode(frames, factor: int) -> np.ndarray:
    return down(frames, factor)


def decode(latent, factor: int) -> np.ndarray:
    return np.clip(up(latent, factor), 0.0, 1.0)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _workers(n) -> int:
    env = os.environ.get("FIVE_WORKERS")
    return max(1, int(env) if env else int(n))


def _map(fn, items, workers):
    """Ordered parallel map; results are folded in input order."""
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def manifest_hash(m: Manifest) -> str:
    return sha256_of(m.to_json())


# ---- edit ----

def _schedules(cfg: RunConfig):
    if cfg.schedule:
        first = StageSchedule.from_dict(cfg.schedule.get("first", cfg.schedule))
        nxt = StageSchedule.from_dict(cfg.schedule.get("next", cfg.schedule))
        return first, nxt
    return default_schedule(True), default_schedule(False)


def _model(cfg: RunConfig, src_lat, tgt_lat, c_src, c_tgt, schedule=None):
    if cfg.analytic():
        means = {c_src.id: src_lat}
        if c_tgt.id != c_src.id:
            means[c_tgt.id] = tgt_lat
        if cfg.method == "pyramid-edit":
            return AnalyticPyramidField(means, schedule)
        return AnalyticPointMassField(means)
    return load_checkpoint(cfg.model)


def edit_record(m: Manifest, edit, cfg: RunConfig, out: Path) -> dict:
    t0 = time.perf_counter()
    video = m.video(edit.video_id)
    src = load_video(m, video, cfg.frame_cap)
    n = src.shape[0]
    tgt = src if not edit.oracle_dir else load_frames_dir(m.path(edit.oracle_dir), n)
    src_lat, tgt_lat = encode(src, cfg.latent_factor), encode(tgt, cfg.latent_factor)
    c_src = Condition(cfg.label_map.get(edit.source_prompt, edit.source_prompt))
    c_tgt = Condition(cfg.label_map.get(edit.target_prompt, edit.target_prompt))
    cfg_src, cfg_tgt, cfg_first = cfg.guidance()
    seed = cfg.seed
    if cfg.method == "pyramid-edit":
        first, nxt = _schedules(cfg)
        model = _model(cfg, src_lat, tgt_lat, c_src, c_tgt, first)
        sess = PyramidSession(model, src_lat, c_src, c_tgt, first, nxt, cfg_first, cfg_src, cfg_tgt, seed,
                              cfg.history_len, cfg.n_avg, per_frame_conditions=True)
        trajs = pyramid_edit_run(sess)
        edited = stack_final(trajs)
    else:
        grid = TimeGrid.uniform(cfg.steps or 50, 15 if cfg.skip is None else cfg.skip)
        model = _model(cfg, src_lat, tgt_lat, c_src, c_tgt)
        sess = EditSession(model, src_lat, c_src, c_tgt, grid, cfg_src, cfg_tgt, seed, cfg.n_avg, keep_states=False)
        if cfg.method == "wan-edit":
            trajs = [joint_edit_run(sess)]
            edited = trajs[0].final
        else:
            trajs = framewise_edit_run(sess)
            edited = np.concatenate([t.final for t in trajs], axis=0)
    frames = decode(edited, cfg.latent_factor)
    d = out / "edits" / edit.id
    for i, f in enumerate(frames):
        write_png(d / "frames" / frame_name(i), f)
    with (d / "trajectory.jsonl").open("w") as fh:
        for fi, tr in enumerate(trajs):
            for step, t in enumerate(tr.times):
                dv = tr.dv_norms[step - 1] if step else 0.0
                fh.write(json.dumps({"frame": fi if len(trajs) > 1 else None, "step": step, "t": t,
                                     "dv_norm": dv}, sort_keys=True) + "\n")
    return {"edit_id": edit.id, "video_id": edit.video_id, "edit_type": edit.edit_type, "status": "ok",
            "n_frames": n, "frames_dir": f"edits/{edit.id}/frames", "elapsed": time.perf_counter() - t0}


def cmd_edit(manifest_path, cfg: RunConfig, out) -> dict:
    m = load_manifest(manifest_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()

    def one(edit):
        try:
            return edit_record(m, edit, cfg, out)
        except Exception as exc:  # isolate the failure to this record
            return {"edit_id": edit.id, "video_id": edit.video_id, "edit_type": edit.edit_type,
                    "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                    "traceback": traceback.format_exc(limit=3)}

    records = _map(one, m.edits, _workers(cfg.workers))
    log = {
        "tool_version": __version__,
        "method": cfg.method,
        "config": cfg.hashed(),
        "config_hash": sha256_of({"config": cfg.hashed(), "manifest": manifest_hash(m)}),
        "manifest": str(Path(manifest_path).resolve()),
        "manifest_hash": manifest_hash(m),
        "records": records,
        "started": started,
        "finished": _now(),
    }
    (out / "run.json").write_text(json.dumps(log, indent=2, sort_keys=True) + "\n")
    return log


def load_run(run_dir) -> dict:
    p = Path(run_dir) / "run.json"
    if not p.exists():
        raise ValidationError(f"{run_dir} is not a run directory (no run.json)")
    return json.loads(p.read_text())


# ---- eval ----

def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k not in VOLATILE}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


def report_hash(report: dict) -> str:
    """Hash of everything except wall-clock fields (timings and timestamps)."""
    return sha256_of(_strip(report))


def _metric_fns(provider, pristine):
    def bg(kernel, scale):
        def f(ctx):
            return scale * frame_mean(kernel, ctx["src"], ctx["edit"], ctx["masks_all"], ctx["idx"])
        return f

    def lp(a, b, mk):
        return perceptual_distance(a, b, mk, provider)

    return {
        "structure": lambda c: 1e3 * structure_distance([c["src"][i] for i in c["idx"]],
                                                        [c["edit"][i] for i in c["idx"]], provider),
        "psnr": bg(masked_psnr, 1.0),
        "lpips": bg(lp, 1e3),
        "mse": bg(masked_mse, 1e4),
        "ssim": bg(masked_ssim, 1e2),
        "clip": lambda c: 1e2 * clip_similarity([c["edit"][i] for i in c["idx"]], c["prompt"], provider),
        "clip_edit": lambda c: 1e2 * clip_similarity([c["edit"][i] for i in c["idx"]], c["prompt"], provider,
                                                     masks=[c["masks_all"][i] for i in c["idx"]]),
        "niqe": lambda c: niqe(list(c["edit"]), pristine()),
        "motion": lambda c: 1e2 * motion_fidelity(c["src_tracks"](), c["edit_tracks"]()),
        "time": lambda c: runtime_per_frame(c["elapsed"], len(c["edit"])),
    }


def _aggregate(per_record: dict, keys) -> tuple[dict, dict]:
    """Mean per edit type, then unweighted mean over the types that have a value."""
    per_type = {}
    for et in EDIT_TYPES:
        rows = [r for r in per_record.values() if r["edit_type"] == et]
        entry = {"n": len(rows)}
        for k in keys:
            vals = [r["metrics"][k] for r in rows if r["metrics"].get(k) is not None]
            entry[k] = math.fsum(vals) / len(vals) if vals else None
        per_type[et] = entry
    overall = {"n": len(per_record)}
    for k in keys:
        vals = [per_type[et][k] for et in EDIT_TYPES if per_type[et][k] is not None]
        overall[k] = math.fsum(vals) / len(vals) if vals else None
    return per_type, overall


def recompute(report: dict) -> tuple[dict, dict]:
    return _aggregate(report["per_record"], report["metrics"])


def cmd_eval(run_dir, manifest_path=None, metrics=None, provider="builtin", stride: int = 8,
             pristine_path=None, against_source: bool = False) -> dict:
    run_dir = Path(run_dir)
    run = load_run(run_dir)
    m = load_manifest(manifest_path or run["manifest"])
    keys = list(METRIC_KEYS if not metrics else metrics)
    bad = [k for k in keys if k not in METRIC_KEYS]
    if bad:
        raise ValidationError(f"unknown metrics {bad}; choose from {list(METRIC_KEYS)}")
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    prov = make_provider(provider) if provider is None or isinstance(provider, str) else provider
    cache = {}

    def pristine():
        if "p" not in cache:
            if pristine_path:
                cache["p"] = PristineModel.load(pristine_path)
            else:
                frames = [f for v in m.videos for f in load_video(m, v, FRAME_CAP)]
                cache["p"] = fit_pristine_model(frames)
        return cache["p"]

    fns = _metric_fns(prov, pristine)
    edits = {e.id: e for e in m.edits}
    per_record, missing = {}, []
    for rec in run["records"]:
        eid = rec["edit_id"]
        entry = {"edit_type": rec["edit_type"], "video_id": rec["video_id"], "metrics": {}, "unavailable": {}}
        per_record[eid] = entry
        if rec["status"] != "ok" or eid not in edits:
            for k in keys:
                entry["metrics"][k] = None
                entry["unavailable"][k] = rec.get("error", "edit missing from manifest")
            missing.append(eid)
            continue
        edit = edits[eid]
        video = m.video(edit.video_id)
        n = rec["n_frames"]
        src = load_video(m, video, n)
        try:
            ed = src if against_source else load_frames_dir(run_dir / rec["frames_dir"], n)
        except FileNotFoundError as exc:
            missing.append(eid)
            for k in keys:
                entry["metrics"][k] = None
                entry["unavailable"][k] = str(exc)
            continue
        idx = sample_frames(n, stride)
        masks_all = {i: mk for i, mk in zip(range(n), load_masks(m, edit, range(n)))}

        def src_tracks(video=video, n=n):
            if not video.tracklets:
                raise ValueError("video has no tracklets")
            tr = read_tracklets(m.path(video.tracklets))
            return [tr[k][:n] for k in sorted(tr)]

        def edit_tracks(ed=ed, src_tracks=src_tracks):
            starts = [t[0] for t in src_tracks()]
            return list(track_points(ed, starts))

        ctx = {"src": src, "edit": ed, "idx": idx, "masks_all": masks_all,
               "prompt": edit.target_prompt if not against_source else edit.source_prompt,
               "src_tracks": src_tracks, "edit_tracks": edit_tracks,
               "elapsed": rec.get("elapsed", float("nan"))}
        for k in keys:
            try:
                v = float(fns[k](ctx))
                if not math.isfinite(v):
                    raise ValueError("non-finite value")
                entry["metrics"][k] = v
            except (ProviderError, NoBackgroundError, ValueError, KeyError, OSError) as exc:
                entry["metrics"][k] = None
                entry["unavailable"][k] = f"{type(exc).__name__}: {exc}"
    per_type, overall = _aggregate(per_record, keys)
    report = {
        "tool_version": run["tool_version"],
        "method": "source" if against_source else run["method"],
        "config_hash": run["config_hash"],
        "manifest_hash": manifest_hash(m),
        "eval": {"metrics": keys, "provider": _provider_name(prov, provider), "stride": stride},
        "metrics": keys,
        "per_record": per_record,
        "per_type": per_type,
        "overall": overall,
        "missing": missing,
    }
    report["report_hash"] = report_hash(report)
    name = "report_source" if against_source else "report"
    (run_dir / f"{name}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (run_dir / f"{name}.csv").write_text(metrics_csv([report]))
    return report


def _provider_name(prov, spec) -> str:
    if getattr(prov, "provider_id", None):
        return prov.provider_id
    return spec if isinstance(spec, str) else getattr(prov, "url", type(prov).__name__)


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.2f}"


def metrics_csv(reports, columns=None) -> str:
    cols = [(k, h) for k, h, _ in METRIC_COLUMNS if (columns is None or k in columns or h in columns)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "edit_type"] + [h for _, h in cols])
    for rep in reports:
        keys = rep["metrics"]
        for et in list(EDIT_TYPES) + ["overall"]:
            row = rep["overall"] if et == "overall" else rep["per_type"][et]
            w.writerow([rep["method"], et] + [_fmt(row.get(k)) if k in keys else "NA" for k, _ in cols])
    return buf.getvalue()


# ---- acc ----

def cmd_acc(run_dir, vlm, manifest_path=None, seed: int = 0, stride: int = 8, workers: int = 1) -> dict:
    run_dir = Path(run_dir)
    run = load_run(run_dir)
    m = load_manifest(manifest_path or run["manifest"])
    client = fa.make_vlm(vlm) if isinstance(vlm, str) else vlm
    edits = {e.id: e for e in m.edits}

    def one(rec):
        eid = rec["edit_id"]
        if rec["status"] != "ok" or eid not in edits:
            return fa.ItemResult(eid, rec["video_id"], rec["edit_type"], None, rec.get("error", "missing")), {}
        edit = edits[eid]
        q = fa.build_questions(asdict(edit), seed)
        n = rec["n_frames"]
        frames = load_frames_dir(run_dir / rec["frames_dir"], n)
        sampled = [frames[i] for i in sample_frames(n, stride)]
        ans, raw, err = fa.query_vlm(client, edit.video_id, eid, sampled, q)
        flags = None if ans is None else fa.judge_item(ans, q)
        return fa.ItemResult(eid, edit.video_id, edit.edit_type, flags, err), {"questions": asdict(q), "raw": raw}

    results = _map(one, run["records"], _workers(workers))
    items = [r for r, _ in results]
    agg = fa.aggregate(items)
    report = {
        "tool_version": run["tool_version"],
        "method": run["method"],
        "config_hash": run["config_hash"],
        "vlm": getattr(client, "endpoint_id", "unknown"),
        "template_version": fa.TEMPLATE_VERSION,
        "items": fa.item_table(items),
        "archive": {it.edit_id: a for it, a in zip(items, (a for _, a in results))},
        **agg,
    }
    report["report_hash"] = report_hash(report)
    (run_dir / "acc.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (run_dir / "acc.csv").write_text(fa.report_csv(agg, run["method"]))
    return report


# ---- report ----

def cmd_report(run_dirs, fmt: str = "csv", columns=None) -> tuple[str, list]:
    """Merge the metric and accuracy reports of several runs into one table."""
    if not run_dirs:
        raise ValidationError("need at least one run directory")
    if fmt not in ("csv", "json"):
        raise ValidationError("format must be csv or json")
    reports, accs, warnings = [], [], []
    for d in run_dirs:
        d = Path(d)
        if (d / "report.json").exists():
            reports.append(json.loads((d / "report.json").read_text()))
        if (d / "acc.json").exists():
            accs.append(json.loads((d / "acc.json").read_text()))
        if not (d / "report.json").exists() and not (d / "acc.json").exists():
            raise ValidationError(f"{d} has no report.json or acc.json")
    versions = sorted({r["tool_version"] for r in reports + accs})
    if len(versions) > 1:
        warnings.append(f"runs come from different tool versions: {versions}")
    acc_cols = [c for c in fa.ACC_COLUMNS if columns is None or c in columns]
    if fmt == "json":
        merged = {"tool_versions": versions, "warnings": warnings, "runs": []}
        for rep in reports:
            keep = [k for k in rep["metrics"] if columns is None or k in columns]
            merged["runs"].append({
                "method": rep["method"], "config_hash": rep["config_hash"],
                "overall": {k: rep["overall"][k] for k in keep},
                "per_type": {et: {k: rep["per_type"][et][k] for k in keep} for et in EDIT_TYPES},
            })
        for acc in accs:
            merged["runs"].append({
                "method": acc["method"], "config_hash": acc["config_hash"], "kind": "accuracy",
                "overall": {c: acc["overall"].get(c) for c in acc_cols},
                "per_type": {et: {c: acc["per_type"][et].get(c) for c in acc_cols} for et in EDIT_TYPES},
            })
        return json.dumps(merged, indent=2, sort_keys=True) + "\n", warnings
    parts = []
    if reports:
        parts.append(metrics_csv(reports, columns))
    if accs and acc_cols:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "edit_type"] + acc_cols)
        for acc in accs:
            for et in list(EDIT_TYPES) + ["overall"]:
                row = acc["overall"] if et == "overall" else acc["per_type"][et]
                w.writerow([acc["method"], et] + [_fmt(row.get(c)) for c in acc_cols])
        parts.append(buf.getvalue())
    return "\n".join(parts), warnings


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)
