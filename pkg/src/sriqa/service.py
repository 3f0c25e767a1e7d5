"""HTTP rating sessions: double-stimulus scoring against pristine references.

Subjects rate the anchor image of each (content, method, factor) group
on a 0..10 scale while the pristine source is shown pinned at 10. State
lives in an append-only JSONL journal whose replay reconstructs the
store exactly; finalize screens the panel, fits the decay curves, and
writes the labeled manifest through the same code path the offline
`label` command uses, so the two outputs are byte-identical.
"""

from __future__ import annotations

import io
import json
import math
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import HTMLResponse, PlainTextResponse, Response
from pydantic import BaseModel, Field

from .dataset import read_manifest, source_copy_name, write_manifest
from .errors import ManifestError
from .imaging import load_image
from .labeling import SubjectScores, label_records

MIN_SCORES_TO_FINALIZE = 5


@dataclass
class RatingTask:
    task_id: str          # the group key
    group: str
    sample_id: str        # anchor record being scored
    reference_path: str   # manifest-relative
    test_path: str


def build_tasks(records, manifest_dir) -> list:
    """One task per group: its anchor iteration ceil(t_max / 2), shown
    against the group's pristine source copy."""
    groups: dict[str, list] = {}
    for rec in records:
        key = f"{rec.content_id}__{rec.sr_method}__f{rec.factor:g}"
        groups.setdefault(key, []).append(rec)
    tasks = []
    for key in sorted(groups):
        recs = groups[key]
        anchor_t = math.ceil(max(r.iteration for r in recs) / 2)
        anchors = [r for r in recs if r.iteration == anchor_t]
        if not anchors:
            raise ManifestError(f"group {key} has no record at iteration {anchor_t}")
        anchor = anchors[0]
        ref = source_copy_name(anchor.content_id)
        if not (Path(manifest_dir) / ref).exists():
            raise ManifestError(f"group {key}: pristine reference {ref} not found")
        tasks.append(RatingTask(task_id=key, group=key, sample_id=anchor.sample_id,
                                reference_path=ref, test_path=anchor.hr_path))
    return tasks


class SessionStore:
    """In-memory rating state backed by a JSONL journal.

    Mutations append one journal line before taking effect, under a
    single lock; loading replays the journal through the same apply
    methods, minus the writes.
    """

    def __init__(self, tasks, journal_path, seed=0):
        self.tasks = tasks
        self.by_task = {t.task_id: t for t in tasks}
        self.journal_path = Path(journal_path)
        self.seed = seed
        self.lock = threading.RLock()
        self.sessions: dict[str, dict] = {}   # id -> {name, order}
        self.scores: dict[str, dict[str, float]] = {}  # session -> task -> score
        self.finalized: dict | None = None
        if self.journal_path.exists():
            self._replay()

    # -- journal ------------------------------------------------------

    def _append(self, event: dict):
        with open(self.journal_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def _replay(self):
        for line in self.journal_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            ev = json.loads(line)
            kind = ev.pop("event")
            if kind == "session":
                self._apply_session(ev["session_id"], ev["name"])
            elif kind == "score":
                self._apply_score(ev["session_id"], ev["task_id"], ev["score"])
            elif kind == "finalize":
                self.finalized = ev["result"]
            else:
                raise ManifestError(f"unknown journal event {kind!r}")

    # -- mutations ----------------------------------------------------

    def _apply_session(self, session_id, name):
        order = np.random.default_rng([self.seed, len(self.sessions)])
        self.sessions[session_id] = {
            "name": name,
            "order": [self.tasks[i].task_id
                      for i in order.permutation(len(self.tasks))],
        }
        self.scores.setdefault(session_id, {})

    def _apply_score(self, session_id, task_id, score):
        self.scores[session_id][task_id] = float(score)

    def create_session(self, name: str) -> str:
        with self.lock:
            if self.finalized is not None:
                raise HTTPException(409, "study is finalized")
            session_id = f"s{len(self.sessions) + 1:04d}"
            self._append({"event": "session", "session_id": session_id, "name": name})
            self._apply_session(session_id, name)
            return session_id

    def next_task(self, session_id):
        with self.lock:
            sess = self.sessions.get(session_id)
            if sess is None:
                raise HTTPException(404, f"unknown session {session_id}")
            done = self.scores[session_id]
            pending = [t for t in sess["order"] if t not in done]
            if self.finalized is not None or not pending:
                return None, 0
            return self.by_task[pending[0]], len(pending)

    def submit_score(self, session_id, task_id, score):
        with self.lock:
            if self.finalized is not None:
                raise HTTPException(409, "study is finalized")
            if session_id not in self.sessions:
                raise HTTPException(404, f"unknown session {session_id}")
            if task_id not in self.by_task:
                raise HTTPException(404, f"unknown task {task_id}")
            if task_id in self.scores[session_id]:
                raise HTTPException(409, f"task {task_id} already scored in this session")
            self._append({"event": "score", "session_id": session_id,
                          "task_id": task_id, "score": score})
            self._apply_score(session_id, task_id, score)

    def progress(self):
        with self.lock:
            return {
                "tasks": [{"task_id": t.task_id,
                           "n_scores": sum(1 for s in self.scores.values()
                                           if t.task_id in s)}
                          for t in self.tasks],
                "subjects": len(self.sessions),
                "finalized": self.finalized is not None,
            }

    def panel(self):
        """Subject scores keyed by the scored sample ids."""
        with self.lock:
            return [
                SubjectScores(
                    subject_id=sess["name"],
                    scores={self.by_task[tid].sample_id: sc
                            for tid, sc in self.scores[sid].items()},
                )
                for sid, sess in self.sessions.items()
            ]

    def record_finalized(self, result: dict):
        with self.lock:
            self._append({"event": "finalize", "result": result})
            self.finalized = result


def export_scores(panel, path):
    """Scores file consumed by the offline labeling command."""
    blob = {"subjects": [{"subject_id": s.subject_id, "scores": s.scores}
                         for s in panel]}
    Path(path).write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_scores(path):
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    return [SubjectScores(subject_id=s["subject_id"], scores=dict(s["scores"]))
            for s in blob["subjects"]]


def finalize_labels(records, panel, manifest_out):
    """Shared by the service and the offline command: screen, fit,
    relabel, write. Returns (curves, rejected_subjects)."""
    records, curves, rejected = label_records(records, panel)
    write_manifest(records, manifest_out)
    return curves, rejected


class SessionRequest(BaseModel):
    name: str = Field(min_length=1, max_length=80)


class ScoreRequest(BaseModel):
    session_id: str
    task_id: str
    score: float = Field(ge=0.0, le=10.0)


def _png_bytes(img) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(img.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _fallback_page() -> str:
    return (resources.files("sriqa") / "static" / "index.html").read_text("utf-8")


def create_app(manifest_path, seed=0, journal_path=None, ui_dir=None,
               expected_subjects=None) -> FastAPI:
    """Rating service over one manifest. The journal defaults to
    `rating_journal.jsonl` next to the manifest; outputs land beside it
    (scores.json, <manifest stem>.labeled.jsonl)."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = read_manifest(manifest_path)
    tasks = build_tasks(records, base)
    if journal_path is None:
        journal_path = base / "rating_journal.jsonl"
    store = SessionStore(tasks, journal_path, seed=seed)

    app = FastAPI(title="sriqa rating service")
    app.state.store = store

    @app.post("/api/session")
    def create_session(req: SessionRequest):
        return {"session_id": store.create_session(req.name)}

    @app.get("/api/task")
    def get_task(session_id: str):
        task, remaining = store.next_task(session_id)
        if task is None:
            return {"done": True}
        return {
            "task_id": task.task_id,
            "ref_url": f"/images/{task.reference_path}",
            "test_url": f"/images/{task.test_path}",
            "remaining": remaining,
        }

    @app.post("/api/score")
    def post_score(req: ScoreRequest):
        store.submit_score(req.session_id, req.task_id, req.score)
        return {"ok": True}

    @app.get("/api/progress")
    def get_progress():
        out = store.progress()
        if expected_subjects is not None:
            out["expected_subjects"] = expected_subjects
        return out

    @app.post("/api/finalize")
    def finalize():
        with store.lock:
            if store.finalized is not None:
                return store.finalized
            short = [t for t in store.progress()["tasks"]
                     if t["n_scores"] < MIN_SCORES_TO_FINALIZE]
            if short:
                raise HTTPException(409, {
                    "message": f"every task needs at least {MIN_SCORES_TO_FINALIZE} scores",
                    "tasks": short,
                })
            panel = store.panel()
            scores_path = base / "scores.json"
            export_scores(panel, scores_path)
            labeled_path = base / f"{manifest_path.stem}.labeled.jsonl"
            try:
                curves, rejected = finalize_labels(records, panel, labeled_path)
            except Exception as e:
                raise HTTPException(409, f"labeling failed: {e}")
            result = {
                "rejected_subjects": rejected,
                "curves": [{"group": g, "b": c.b} for g, c in sorted(curves.items())],
                "manifest_path": str(labeled_path),
                "scores_path": str(scores_path),
            }
            store.record_finalized(result)
            return result

    @app.get("/images/{rel_path:path}")
    def get_image(rel_path: str):
        full = (base / rel_path).resolve()
        if base.resolve() not in full.parents and full != base.resolve():
            raise HTTPException(404, "image outside the manifest directory")
        if not full.exists():
            raise HTTPException(404, f"no such image {rel_path}")
        return Response(content=_png_bytes(load_image(full)), media_type="image/png")

    @app.get("/", response_class=HTMLResponse)
    def index():
        if ui_dir is not None:
            built = Path(ui_dir) / "index.html"
            if built.exists():
                return built.read_text(encoding="utf-8")
        return _fallback_page()

    @app.get("/ui/{rel_path:path}")
    def ui_asset(rel_path: str):
        if ui_dir is None:
            raise HTTPException(404, "no ui assets directory configured")
        full = (Path(ui_dir) / rel_path).resolve()
        if Path(ui_dir).resolve() not in full.parents or not full.exists():
            raise HTTPException(404, f"no such asset {rel_path}")
        media = {"js": "text/javascript", "css": "text/css",
                 "html": "text/html", "map": "application/json"}
        ext = full.suffix.lstrip(".")
        if ext not in media:
            return PlainTextResponse(full.read_text(encoding="utf-8"))
        return Response(content=full.read_bytes(), media_type=media[ext])

    return app
