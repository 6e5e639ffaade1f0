"""Question-answering accuracy for object edits.

Every edit is checked with two yes/no questions (source object gone, target
object present) and one two-way multiple-choice question. Per-item flags are
combined into YN, MC, union and intersection accuracies per edit type, then
averaged over types.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import math
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import requests

from ._io import png_bytes, stable_int

TEMPLATE_VERSION = "1"
YN_TEMPLATE = "Is there a {obj} in the video?"
MC_TEMPLATE = "Which object appears in the video? {opts}"
EDIT_TYPES = ("object_rigid", "object_nonrigid", "color", "material", "add", "remove")
ACC_COLUMNS = ("FiVE-YN", "FiVE-MC", "FiVE-U", "FiVE-N", "FiVE-Acc")


class UnparseableAnswer(ValueError):
    pass


class VLMError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuestionSet:
    yn_source: str
    yn_target: str
    mc: str
    options: tuple
    target_index: int
    template_version: str = TEMPLATE_VERSION


def build_questions(record, seed: int = 0) -> QuestionSet:
    """Fill the fixed templates; the MC option order comes from a seeded coin flip per record."""
    src = (record.get("source_object") if isinstance(record, dict) else record.source_object) or ""
    tgt = (record.get("target_object") if isinstance(record, dict) else record.target_object) or ""
    src, tgt = src.strip(), tgt.strip()
    if not src or not tgt:
        raise ValueError("record needs non-empty source_object and target_object")
    if src.lower() == tgt.lower():
        raise ValueError(f"source and target objects are identical: {src!r}")
    rid = record.get("id", "") if isinstance(record, dict) else getattr(record, "id", "")
    flip = stable_int("mc-order", seed, rid, src, tgt) & 1
    options = (tgt, src) if flip else (src, tgt)
    opts = " ".join(f"({chr(65 + i)}) {o}" for i, o in enumerate(options))
    return QuestionSet(
        yn_source=YN_TEMPLATE.format(obj=src),
        yn_target=YN_TEMPLATE.format(obj=tgt),
        mc=MC_TEMPLATE.format(opts=opts),
        options=options,
        target_index=options.index(tgt),
    )


def _norm(text: str) -> str:
    return re.sub(r"[^a-z0-9 ]+", " ", str(text).lower()).strip()


def parse_yes_no(text: str) -> str:
    words = _norm(text).split()
    if not words or words[0] not in ("yes", "no"):
        raise UnparseableAnswer(f"not a yes/no answer: {text!r}")
    return words[0]


def parse_choice(text: str, options) -> int:
    """Accept an option letter, 1-based index, or the option text itself."""
    raw = str(text).strip()
    n = _norm(raw)
    normed = [_norm(o) for o in options]
    for i, o in enumerate(normed):
        if n == o:
            return i
    m = re.fullmatch(r"\(?([A-Za-z]|\d+)\)?[.:)]?(\s.*)?", raw)
    if m:
        tok = m.group(1)
        if tok.isdigit():
            k = int(tok) - 1
        elif len(tok) == 1:
            k = ord(tok.upper()) - 65
        else:
            k = -1
        if 0 <= k < len(options):
            return k
    hits = [i for i, o in enumerate(normed) if re.search(rf"\b{re.escape(o)}\b", n)]
    if len(hits) == 1:
        return hits[0]
    raise UnparseableAnswer(f"cannot map {text!r} to one of {list(options)}")


@dataclass
class AnswerRecord:
    yn_source_ans: str
    yn_target_ans: str
    mc_ans: int
    provenance: str = "mock"
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.yn_source_ans not in ("yes", "no") or self.yn_target_ans not in ("yes", "no"):
            raise ValueError("yes/no answers must be 'yes' or 'no'")


def judge_item(ans: AnswerRecord, questions: QuestionSet) -> tuple:
    if not 0 <= ans.mc_ans < len(questions.options):
        raise ValueError("mc answer outside option range")
    yn = ans.yn_source_ans == "no" and ans.yn_target_ans == "yes"
    mc = ans.mc_ans == questions.target_index
    return int(yn), int(mc), int(yn or mc), int(yn and mc)


@dataclass
class ItemResult:
    edit_id: str
    video_id: str
    edit_type: str
    flags: tuple | None
    error: str | None = None


def _mean4(rows):
    return [100.0 * math.fsum(r[j] for r in rows) / len(rows) for j in range(4)]


def aggregate(items) -> dict:
    """Per-type percentages and the unweighted mean over the types that have valid items."""
    per_type = {}
    invalid = {}
    for it in items:
        if it.edit_type not in EDIT_TYPES:
            raise ValueError(f"unknown edit type {it.edit_type!r}")
        if it.flags is None:
            invalid[it.edit_type] = invalid.get(it.edit_type, 0) + 1
        else:
            per_type.setdefault(it.edit_type, []).append(it.flags)
    types = {}
    for et in EDIT_TYPES:
        rows = per_type.get(et)
        if not rows:
            types[et] = {"present": False, "n": 0, "invalid": invalid.get(et, 0)}
            continue
        acc = _mean4(rows)
        types[et] = {"present": True, "n": len(rows), "invalid": invalid.get(et, 0),
                     **dict(zip(ACC_COLUMNS[:4], acc)), "FiVE-Acc": math.fsum(acc) / 4}
    present = [types[et] for et in EDIT_TYPES if types[et]["present"]]
    overall = {"n_types": len(present), "invalid": sum(invalid.values())}
    if present:
        acc = [math.fsum(t[c] for t in present) / len(present) for c in ACC_COLUMNS[:4]]
        overall.update(dict(zip(ACC_COLUMNS[:4], acc)))
        overall["FiVE-Acc"] = five_acc_from(acc)
    return {"per_type": types, "overall": overall}


def five_acc_from(four) -> float:
    four = list(four)
    if len(four) != 4:
        raise ValueError("need YN, MC, union, intersection")
    return math.fsum(four) / 4.0


# ---- VLM clients ----

def question_key(video_id: str, edit_id: str, kind: str) -> str:
    """Key used by mock answer files: ``video_id/edit_id/kind`` with kind in yn_source, yn_target, mc."""
    return f"{video_id}/{edit_id}/{kind}"


class MockVLM:
    """Scripted answers from a JSON map ``question_key -> answer``; missing keys are errors."""

    endpoint_id = "mock"

    def __init__(self, table: dict):
        self.table = dict(table)

    @classmethod
    def from_file(cls, path) -> "MockVLM":
        return cls(json.loads(Path(path).read_text()))

    def ask(self, key, frames, question, kind, options=None) -> str:
        if key not in self.table:
            raise VLMError(f"mock has no answer for {key!r}")
        return str(self.table[key])


class HttpVLM:
    """POST {frames, question, kind, options?} and read {answer}; retries with exponential backoff."""

    def __init__(self, url: str, timeout: float = 60.0, retries: int = 3, backoff: float = 0.5):
        self.url = url
        self.endpoint_id = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def ask(self, key, frames, question, kind, options=None) -> str:
        body = {"frames": [base64.b64encode(png_bytes(f)).decode("ascii") for f in frames],
                "question": question, "kind": "mc" if kind == "mc" else "yn"}
        if options is not None:
            body["options"] = list(options)
        last = None
        for attempt in range(self.retries + 1):
            try:
                r = requests.post(self.url, json=body, timeout=self.timeout)
                if r.status_code >= 500:
                    raise requests.HTTPError(f"server error {r.status_code}")
                r.raise_for_status()
                return str(r.json()["answer"])
            except (requests.RequestException, ValueError, KeyError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise VLMError(f"VLM at {self.url} failed: {last}")


def make_vlm(spec: str):
    if spec.startswith("mock:"):
        return MockVLM.from_file(spec[5:])
    if spec.startswith("http:") and not spec.startswith("http://"):
        spec = spec[5:]
    if spec.startswith(("http://", "https://")):
        return HttpVLM(spec)
    raise ValueError(f"unknown VLM spec {spec!r}")


def query_vlm(vlm, video_id, edit_id, frames, questions: QuestionSet):
    """Ask the three questions; returns (AnswerRecord | None, raw responses, error)."""
    raw = {}
    try:
        for kind, q, opts in (("yn_source", questions.yn_source, None),
                              ("yn_target", questions.yn_target, None),
                              ("mc", questions.mc, questions.options)):
            raw[kind] = vlm.ask(question_key(video_id, edit_id, kind), frames, q, kind, opts)
        rec = AnswerRecord(parse_yes_no(raw["yn_source"]), parse_yes_no(raw["yn_target"]),
                           parse_choice(raw["mc"], questions.options),
                           provenance=getattr(vlm, "endpoint_id", "unknown"), raw=raw)
        return rec, raw, None
    except (UnparseableAnswer, VLMError) as exc:
        return None, raw, f"{type(exc).__name__}: {exc}"


# ---- reports ----

def report_rows(report: dict) -> list[list]:
    rows = []
    for et in EDIT_TYPES:
        t = report["per_type"][et]
        rows.append([et] + ([t[c] for c in ACC_COLUMNS] if t["present"] else [None] * 5) + [t["n"], t["invalid"]])
    o = report["overall"]
    rows.append(["overall"] + [o.get(c) for c in ACC_COLUMNS] + [sum(r[-2] for r in rows), o["invalid"]])
    return rows


def report_csv(report: dict, label: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "edit_type", *ACC_COLUMNS, "n", "invalid"])
    for r in report_rows(report):
        w.writerow([label, r[0]] + ["" if v is None else f"{v:.2f}" for v in r[1:6]] + r[6:])
    return buf.getvalue()


def item_table(items) -> list[dict]:
    return [asdict(it) for it in items]


def flags_from_table(rows) -> list[ItemResult]:
    return [ItemResult(r["edit_id"], r["video_id"], r["edit_type"],
                       None if r["flags"] is None else tuple(r["flags"]), r.get("error")) for r in rows]


def printed_score_consistent(four, printed: float, tol: float = 0.005) -> bool:
    """Does the printed overall score equal the mean of the four printed accuracies?"""
    return abs(five_acc_from(four) - printed) <= tol + 1e-9


def mock_answers_for(edit, questions: QuestionSet, yn_ok: bool, mc_ok: bool) -> dict:
    """Scripted answers that make an item succeed or fail on each question type."""
    vid, eid = edit["video_id"], edit["id"]
    wrong = 1 - questions.target_index
    return {
        question_key(vid, eid, "yn_source"): "No." if yn_ok else "Yes.",
        question_key(vid, eid, "yn_target"): "Yes." if yn_ok else "No.",
        question_key(vid, eid, "mc"): chr(65 + (questions.target_index if mc_ok else wrong)),
    }

