"""Benchmark manifests, masks, tracklets and the synthetic moving-shapes benchmark."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from ._io import read_png, write_png

SCHEMA_VERSION = 1
EDIT_TYPES = ("object_rigid", "object_nonrigid", "color", "material", "add", "remove")


class ManifestError(ValueError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer


@dataclass(frozen=True)
class VideoEntry:
    id: str
    frames_dir: str
    num_frames: int
    fps: float = 8.0
    width: int | None = None
    height: int | None = None
    caption: str = ""
    source: str = "generated"
    non_rigid: bool = False
    tracklets: str | None = None


@dataclass(frozen=True)
class EditRecord:
    id: str
    video_id: str
    edit_type: str
    source_prompt: str
    target_prompt: str
    source_object: str
    target_object: str
    mask_dir: str
    instruction: str = ""
    oracle_dir: str | None = None


@dataclass
class Manifest:
    root: Path
    videos: list
    edits: list
    name: str = ""

    def video(self, vid: str) -> VideoEntry:
        for v in self.videos:
            if v.id == vid:
                return v
        raise KeyError(vid)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def to_json(self) -> dict:
        def clean(d):
            return {k: v for k, v in asdict(d).items() if v is not None}
        return {"schema_version": SCHEMA_VERSION, "name": self.name,
                "videos": [clean(v) for v in self.videos], "edits": [clean(e) for e in self.edits]}

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path


def _schema() -> dict:
    return json.loads(resources.files("fivelab").joinpath("schemas/manifest.json").read_text())


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def _from_dict(cls, d):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


def frame_name(i: int) -> str:
    return f"{i:05d}.png"


def validate_manifest(obj: dict, strict: bool = False) -> None:
    """Schema check; ``strict`` also rejects unknown keys. Errors carry a JSON pointer."""
    schema = _schema()
    if strict:
        schema["additionalProperties"] = False
        for key in ("videos", "edits"):
            schema["properties"][key]["items"]["additionalProperties"] = False
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ManifestError(e.message, _pointer(e.absolute_path))


def load_manifest(path, strict: bool = False, check_assets: bool = True) -> Manifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"not valid JSON: {exc}") from exc
    validate_manifest(obj, strict)
    videos = [_from_dict(VideoEntry, v) for v in obj["videos"]]
    edits = [_from_dict(EditRecord, e) for e in obj["edits"]]
    ids = [v.id for v in videos]
    for i, v in enumerate(ids):
        if ids.index(v) != i:
            raise ManifestError(f"duplicate video id {v!r}", f"/videos/{i}/id")
    eids = [e.id for e in edits]
    for i, e in enumerate(edits):
        if eids.index(e.id) != i:
            raise ManifestError(f"duplicate edit id {e.id!r}", f"/edits/{i}/id")
        if e.video_id not in ids:
            raise ManifestError(f"unknown video_id {e.video_id!r}", f"/edits/{i}/video_id")
    m = Manifest(path.parent.resolve(), videos, edits, obj.get("name", ""))
    if check_assets:
        check_manifest_assets(m)
    return m


def check_manifest_assets(m: Manifest) -> None:
    dims = {}
    for i, v in enumerate(m.videos):
        first = m.path(v.frames_dir) / frame_name(0)
        if not first.exists():
            raise ManifestError(f"missing frame {first}", f"/videos/{i}/frames_dir")
        shape = read_png(first, gray=True).shape
        if (v.height, v.width) != (None, None) and shape != (v.height, v.width):
            raise ManifestError(f"frames are {shape}, manifest says {(v.height, v.width)}", f"/videos/{i}")
        missing = [k for k in range(v.num_frames) if not (m.path(v.frames_dir) / frame_name(k)).exists()]
        if missing:
            raise ManifestError(f"missing frames {missing}", f"/videos/{i}/frames_dir")
        dims[v.id] = shape
    for i, e in enumerate(m.edits):
        first = m.path(e.mask_dir) / frame_name(0)
        if not first.exists():
            raise ManifestError(f"missing mask {first}", f"/edits/{i}/mask_dir")
        mshape = read_png(first, gray=True).shape
        if mshape != dims[e.video_id]:
            raise ManifestError(f"mask dims {mshape} differ from frame dims {dims[e.video_id]}", f"/edits/{i}/mask_dir")


def load_video(m: Manifest, video: VideoEntry, cap: int | None = None) -> np.ndarray:
    n = video.num_frames if cap is None else min(video.num_frames, cap)
    return np.stack([read_png(m.path(video.frames_dir) / frame_name(i)) for i in range(n)])


def load_frames_dir(path, n: int) -> np.ndarray:
    path = Path(path)
    missing = [i for i in range(n) if not (path / frame_name(i)).exists()]
    if missing:
        raise FileNotFoundError(f"{path}: missing frames {missing}")
    return np.stack([read_png(path / frame_name(i)) for i in range(n)])


def load_masks(m: Manifest, edit: EditRecord, indices, max_ambiguous: float | None = None) -> list:
    """Binary masks (value >= 128 is edited) for the given frame indices."""
    d = m.path(edit.mask_dir)
    missing = [i for i in indices if not (d / frame_name(i)).exists()]
    if missing:
        raise ManifestError(f"edit {edit.id}: missing mask frames {missing}")
    out = []
    for i in indices:
        raw = read_png(d / frame_name(i), gray=True)
        if max_ambiguous is not None:
            frac = float(np.mean((raw > 16) & (raw < 240)))
            if frac > max_ambiguous:
                raise ManifestError(f"edit {edit.id}: mask frame {i} is not binary ({frac:.1%} grey pixels)")
        out.append(raw >= 128)
    return out


def write_tracklets(path, tracks: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "x", "y", "track_id"])
        for tid in sorted(tracks):
            for f, (x, y) in enumerate(np.asarray(tracks[tid])):
                w.writerow([f, repr(float(x)), repr(float(y)), tid])


def read_tracklets(path) -> dict:
    rows: dict = {}
    with Path(path).open() as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["track_id"]), []).append((int(r["frame"]), float(r["x"]), float(r["y"])))
    out = {}
    for tid, pts in rows.items():
        pts.sort()
        if [p[0] for p in pts] != list(range(len(pts))):
            raise ValueError(f"track {tid}: frames are not contiguous from 0")
        out[tid] = np.array([(x, y) for _, x, y in pts])
    return out


# ---- synthetic benchmark ----

@dataclass(frozen=True)
class ToyObject:
    name: str
    shape: str = "square"  # square | disk
    color: tuple = (0.85, 0.15, 0.15)
    material: str = "plain"  # plain | checker
    half: int = 4
    start: tuple = (8, 10)
    velocity: tuple = (1, 0)
    pulse: int = 0
    period: int = 8

    def center(self, f: int):
        return self.start[0] + self.velocity[0] * f, self.start[1] + self.velocity[1] * f

    def radius(self, f: int) -> float:
        if not self.pulse:
            return float(self.half)
        return self.half + self.pulse * math.sin(2 * math.pi * f / self.period)


@dataclass(frozen=True)
class ToyEdit:
    edit_type: str
    target: tuple  # objects of the edited scene
    source_object: str
    target_object: str
    instruction: str = ""
    target_prompt: str = ""


@dataclass(frozen=True)
class ToyVideo:
    id: str
    objects: tuple
    edits: tuple
    non_rigid: bool = False
    caption: str = ""


@dataclass
class ToyConfig:
    height: int = 32
    width: int = 64
    num_frames: int = 40
    fps: float = 8.0
    videos: list = field(default_factory=lambda: default_toy_videos())
    n_background_tracks: int = 4


def default_toy_videos() -> list:
    red = ToyObject("red square", "square", (0.85, 0.15, 0.15), half=4, start=(8, 10))
    blob = ToyObject("green disk", "disk", (0.15, 0.75, 0.2), half=6, start=(10, 20), pulse=1)
    star = ToyObject("yellow square", "square", (0.9, 0.85, 0.1), half=4, start=(56, 6), velocity=(0, 0))
    v0 = ToyVideo("v000", (red,), (
        ToyEdit("object_rigid", (replace(red, name="red disk", shape="disk"),), "red square", "red disk",
                "turn the square into a disk"),
        ToyEdit("color", (replace(red, name="blue square", color=(0.15, 0.25, 0.9)),), "red square", "blue square",
                "paint the square blue"),
        ToyEdit("material", (replace(red, name="red checkered square", material="checker"),), "red square",
                "red checkered square", "make the square checkered"),
    ), caption="a red square slides to the right over a speckled floor")
    v1 = ToyVideo("v001", (blob,), (
        ToyEdit("object_nonrigid", (replace(blob, name="green square", shape="square"),), "green disk",
                "green square", "turn the pulsing disk into a pulsing square"),
        ToyEdit("add", (blob, star), "empty corner", "yellow square", "add a yellow square in the corner"),
        ToyEdit("remove", (), "green disk", "empty floor", "remove the disk", "an empty speckled floor"),
    ), non_rigid=True, caption="a green disk pulses while drifting to the right")
    return [v0, v1]


def footprint(obj: ToyObject, f: int, height: int, width: int) -> np.ndarray:
    cx, cy = obj.center(f)
    r = obj.radius(f)
    yy, xx = np.mgrid[0:height, 0:width]
    if obj.shape == "square":
        h = int(round(r))
        return (xx >= cx - h) & (xx < cx + h) & (yy >= cy - h) & (yy < cy + h)
    if obj.shape == "disk":
        return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    raise ValueError(f"unknown shape {obj.shape!r}")


def _object_texture(seed: int, size: int = 64) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    return rng.uniform(0.0, 1.0, (size, size))


def _background(seed: int, vid_index: int, height: int, width: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(vid_index, 1)))
    coarse = rng.uniform(0.3, 0.7, (3, (height + 3) // 4, (width + 3) // 4))
    coarse = coarse.repeat(4, axis=1).repeat(4, axis=2)[:, :height, :width]
    fine = rng.uniform(-0.15, 0.15, (1, height, width))
    return np.clip(coarse + fine, 0.0, 1.0)


def render_scene(objects, bg: np.ndarray, f: int, tex: np.ndarray) -> np.ndarray:
    frame = bg.copy()
    _, height, width = bg.shape
    for obj in objects:
        m = footprint(obj, f, height, width)
        cx, cy = obj.center(f)
        yy, xx = np.nonzero(m)
        u = (xx - cx) % tex.shape[1]
        v = (yy - cy) % tex.shape[0]
        shade = 0.7 + 0.3 * tex[v, u]
        if obj.material == "checker":
            shade = shade * np.where(((xx - cx) // 2 + (yy - cy) // 2) % 2 == 0, 1.0, 0.45)
        for c in range(3):
            frame[c, yy, xx] = obj.color[c] * shade
    return frame


def _check_scene(objects, cfg: ToyConfig, vid: str) -> None:
    for f in range(cfg.num_frames):
        union = np.zeros((cfg.height, cfg.width), dtype=int)
        for obj in objects:
            cx, cy = obj.center(f)
            r = obj.radius(f)
            if cx - r < 0 or cy - r < 0 or cx + r > cfg.width or cy + r > cfg.height:
                raise ValueError(f"{vid}: object {obj.name!r} leaves the canvas at frame {f}")
            union += footprint(obj, f, cfg.height, cfg.width)
        if union.max() > 1:
            raise ValueError(f"{vid}: objects overlap at frame {f}")


def _background_points(scenes, cfg: ToyConfig, radius: int = 3, search: int = 3) -> list:
    """Grid points whose tracking window never touches any object in any scene."""
    busy = np.zeros((cfg.height, cfg.width), dtype=bool)
    for objs in scenes:
        for obj in objs:
            for f in range(cfg.num_frames):
                busy |= footprint(obj, f, cfg.height, cfg.width)
    pad = radius + search
    pts = []
    for y in range(pad, cfg.height - pad, 6):
        for x in range(pad, cfg.width - pad, 6):
            if not busy[y - pad : y + pad + 1, x - pad : x + pad + 1].any():
                pts.append((x, y))
    step = max(1, len(pts) // max(cfg.n_background_tracks, 1))
    return pts[::step][: cfg.n_background_tracks]


def _prompt(caption: str, src_obj: str, tgt_obj: str) -> str:
    return caption.replace(src_obj, tgt_obj) if src_obj in caption else f"{caption}, with a {tgt_obj}"


def generate_toy_benchmark(config: ToyConfig | None = None, seed: int = 0, out_dir=".") -> Manifest:
    """Render videos, masks, oracle edits and ground-truth tracklets; write and return the manifest."""
    cfg = config or ToyConfig()
    out = Path(out_dir).resolve()
    tex = _object_texture(seed)
    videos, edits = [], []
    for vi, tv in enumerate(cfg.videos):
        _check_scene(tv.objects, cfg, tv.id)
        for te in tv.edits:
            if te.edit_type not in EDIT_TYPES:
                raise ValueError(f"unknown edit type {te.edit_type!r}")
            _check_scene(te.target, cfg, tv.id)
        bg = _background(seed, vi, cfg.height, cfg.width)
        fdir = f"videos/{tv.id}/frames"
        for f in range(cfg.num_frames):
            write_png(out / fdir / frame_name(f), render_scene(tv.objects, bg, f, tex))
        tracks = {}
        for obj in tv.objects:
            tracks[len(tracks)] = np.array([obj.center(f) for f in range(cfg.num_frames)], dtype=float)
        for p in _background_points([tv.objects] + [te.target for te in tv.edits], cfg):
            tracks[len(tracks)] = np.tile(np.array(p, dtype=float), (cfg.num_frames, 1))
        tpath = f"videos/{tv.id}/tracklets.csv"
        write_tracklets(out / tpath, tracks)
        videos.append(VideoEntry(tv.id, fdir, cfg.num_frames, cfg.fps, cfg.width, cfg.height, tv.caption,
                                 "generated", tv.non_rigid, tpath))
        for ei, te in enumerate(tv.edits):
            eid = f"{tv.id}_e{ei}"
            changed = [o for o in tv.objects if o not in te.target] + [o for o in te.target if o not in tv.objects]
            mdir, odir = f"edits/{eid}/masks", f"edits/{eid}/oracle"
            for f in range(cfg.num_frames):
                m = np.zeros((cfg.height, cfg.width), dtype=bool)
                for o in changed:
                    m |= footprint(o, f, cfg.height, cfg.width)
                write_png(out / mdir / frame_name(f), (m * 255).astype(np.uint8))
                write_png(out / odir / frame_name(f), render_scene(te.target, bg, f, tex))
            edits.append(EditRecord(eid, tv.id, te.edit_type, tv.caption,
                                    te.target_prompt or _prompt(tv.caption, te.source_object, te.target_object),
                                    te.source_object, te.target_object, mdir, te.instruction, odir))
    m = Manifest(out, videos, edits, name=f"toy-seed{seed}")
    m.save()
    return m


def render_footprints(obj: ToyObject, cfg: ToyConfig) -> np.ndarray:
    return np.stack([footprint(obj, f, cfg.height, cfg.width) for f in range(cfg.num_frames)])
