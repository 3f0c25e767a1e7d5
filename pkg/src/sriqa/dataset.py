"""Sample records, the JSONL manifest, and the dataset builder.

A sample is one (content, SR method, factor, iteration) cell: the HR
image produced after that many degradation rounds plus the LR image
that generated it. The builder is resumable: every written file's hash
is recorded in a sidecar, and a rerun recomputes only what is missing
or changed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError, PluginError, ShapeError
from .imaging import ImageRGB, SrMethod, decode_ppm, ds_sr_step, encode_ppm, load_image
from .labeling import DecayCurve, group_key

CONTENT_CLASSES = ("animals", "buildings", "humans", "sports", "plants", "scenery")

MANIFEST_FIELDS = ("sample_id", "content_id", "content_class", "sr_method",
                   "factor", "iteration", "hr_path", "lr_path", "imos", "split")

DEFAULT_FACTOR_CAPS = {1.5: 8, 2.0: 7, 2.7: 6}

HASH_SIDECAR = ".build_hashes.json"


@dataclass
class SampleRecord:
    sample_id: str
    content_id: str
    content_class: str
    sr_method: str
    factor: float
    iteration: int
    hr_path: str
    lr_path: str
    imos: float = None
    split: str = None


def sample_stem(content_id, method_name, factor, iteration) -> str:
    return f"{content_id}__{method_name}__f{factor:g}__t{iteration}"


def validate_records(records):
    seen_ids, seen_keys = set(), set()
    for rec in records:
        if rec.content_class not in CONTENT_CLASSES:
            raise ManifestError(f"{rec.sample_id}: unknown content_class {rec.content_class!r}")
        if rec.factor <= 1.0:
            raise ManifestError(f"{rec.sample_id}: factor must exceed 1, got {rec.factor}")
        if rec.iteration < 1:
            raise ManifestError(f"{rec.sample_id}: iteration must be >= 1, got {rec.iteration}")
        if rec.imos is not None and not 0.0 <= rec.imos <= 1.0:
            raise ManifestError(f"{rec.sample_id}: imos {rec.imos} outside [0, 1]")
        if rec.split not in (None, "train", "test"):
            raise ManifestError(f"{rec.sample_id}: bad split {rec.split!r}")
        if rec.sample_id in seen_ids:
            raise ManifestError(f"duplicate sample_id {rec.sample_id}")
        key = (rec.content_id, rec.sr_method, rec.factor, rec.iteration)
        if key in seen_keys:
            raise ManifestError(f"duplicate sample key {key}")
        seen_ids.add(rec.sample_id)
        seen_keys.add(key)


def record_to_line(rec: SampleRecord) -> str:
    return json.dumps({name: getattr(rec, name) for name in MANIFEST_FIELDS})


def write_manifest(records, path):
    validate_records(records)
    text = "".join(record_to_line(r) + "\n" for r in records)
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path):
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: bad json: {e}") from e
        if set(obj) != set(MANIFEST_FIELDS):
            extra = set(obj) - set(MANIFEST_FIELDS)
            missing = set(MANIFEST_FIELDS) - set(obj)
            raise ManifestError(f"{path}:{lineno}: wrong fields"
                                f"{' extra ' + str(sorted(extra)) if extra else ''}"
                                f"{' missing ' + str(sorted(missing)) if missing else ''}")
        records.append(SampleRecord(**{k: obj[k] for k in MANIFEST_FIELDS}))
    validate_records(records)
    return records


def resolve_path(manifest_path, rec_path) -> Path:
    """Record paths are stored relative to the manifest's directory."""
    return Path(manifest_path).parent / rec_path


def source_copy_name(content_id: str) -> str:
    return f"{content_id}__source.ppm"


# ---------------------------------------------------------------------------
# build plans

@dataclass
class PlanSource:
    path: str
    content_id: str
    content_class: str


@dataclass
class BuildPlan:
    sources: list
    methods: list
    factor_caps: dict = field(default_factory=lambda: dict(DEFAULT_FACTOR_CAPS))

    def __post_init__(self):
        if not self.sources or not self.methods or not self.factor_caps:
            raise ConfigError("plan needs sources, methods, and factors")
        if len({s.content_id for s in self.sources}) != len(self.sources):
            raise ConfigError("duplicate content_id in plan sources")
        if len({m.name for m in self.methods}) != len(self.methods):
            raise ConfigError("duplicate method name in plan")
        for s in self.sources:
            if s.content_class not in CONTENT_CLASSES:
                raise ConfigError(f"source {s.content_id}: unknown class {s.content_class!r}")
        for f, cap in self.factor_caps.items():
            if f <= 1.0:
                raise ConfigError(f"factor must exceed 1, got {f}")
            if cap < 1:
                raise ConfigError(f"iteration cap must be >= 1, got {cap} for factor {f}")

    @classmethod
    def from_json(cls, text: str) -> "BuildPlan":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad plan json: {e}") from e
        try:
            sources = [PlanSource(s["path"], s["content_id"], s["content_class"])
                       for s in obj["sources"]]
            methods = [SrMethod(m["name"], m.get("command")) for m in obj["methods"]]
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad plan structure: {e}") from e
        caps = obj.get("factors")
        factor_caps = {float(k): int(v) for k, v in caps.items()} if caps else None
        if factor_caps is None:
            return cls(sources=sources, methods=methods)
        return cls(sources=sources, methods=methods, factor_caps=factor_caps)


@dataclass
class BuildFailure:
    content_id: str
    sr_method: str
    factor: float
    message: str


@dataclass
class BuildResult:
    records: list
    failures: list
    manifest_path: Path
    files_written: int


class _HashedWriter:
    """Writes files once: an existing file whose recorded hash matches
    its current content is left alone."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.sidecar = out_dir / HASH_SIDECAR
        self.hashes = {}
        if self.sidecar.exists():
            self.hashes = json.loads(self.sidecar.read_text())
        self.written = 0

    def up_to_date(self, name: str) -> bool:
        path = self.out_dir / name
        if name not in self.hashes or not path.exists():
            return False
        return hashlib.sha256(path.read_bytes()).hexdigest() == self.hashes[name]

    def write(self, name: str, data: bytes):
        if self.up_to_date(name):
            digest = hashlib.sha256(data).hexdigest()
            if digest == self.hashes[name]:
                return
        (self.out_dir / name).write_bytes(data)
        self.hashes[name] = hashlib.sha256(data).hexdigest()
        self.written += 1

    def save_sidecar(self):
        self.sidecar.write_text(json.dumps(self.hashes, sort_keys=True, indent=0))


def build(plan: BuildPlan, out_dir) -> BuildResult:
    """Run every (source, method, factor) group through the DS-SR loop.

    A group whose SR method fails is skipped and reported in failures;
    the rest of the build continues. Reruns skip all up-to-date files,
    resuming interrupted groups from the last intact iteration.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = _HashedWriter(out_dir)
    records, failures = [], []

    for src in plan.sources:
        source_img = load_image(src.path)
        writer.write(source_copy_name(src.content_id), encode_ppm(source_img))
        for method in plan.methods:
            for factor in sorted(plan.factor_caps):
                cap = plan.factor_caps[factor]
                try:
                    records.extend(_build_group(writer, src, method, factor, cap, source_img))
                except (PluginError, ShapeError) as e:
                    failures.append(BuildFailure(src.content_id, method.name, factor, str(e)))

    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(records, manifest_path)
    writer.save_sidecar()
    return BuildResult(records=records, failures=failures,
                       manifest_path=manifest_path, files_written=writer.written)


def _build_group(writer, src, method, factor, cap, source_img):
    recs = []
    current = source_img  # HR of iteration t-1
    current_stale = False  # True while `current` is a skipped file we have not loaded
    for t in range(1, cap + 1):
        stem = sample_stem(src.content_id, method.name, factor, t)
        hr_name, lr_name = f"{stem}.ppm", f"{stem}__lr.ppm"
        if writer.up_to_date(hr_name) and writer.up_to_date(lr_name):
            current, current_stale = hr_name, True
        else:
            if current_stale:
                current = decode_ppm((writer.out_dir / current).read_bytes())
                current_stale = False
            lr, hr = ds_sr_step(current, factor, method)
            writer.write(lr_name, encode_ppm(lr))
            writer.write(hr_name, encode_ppm(hr))
            current = hr
        recs.append(SampleRecord(
            sample_id=stem, content_id=src.content_id, content_class=src.content_class,
            sr_method=method.name, factor=factor, iteration=t,
            hr_path=hr_name, lr_path=lr_name))
    return recs


# ---------------------------------------------------------------------------
# labels and splits

def attach_labels(records, curves: dict) -> list:
    """Set each record's imos from its group's decay curve; every group
    present in the records must have a curve."""
    missing = sorted({group_key(r) for r in records} - set(curves))
    if missing:
        raise ManifestError(f"no curve for groups: {', '.join(missing)}")
    for rec in records:
        rec.imos = curves[group_key(rec)].at(rec.iteration)
    return records


def split_dataset(records, ratio: float, seed: int = 0):
    """Assign train/test splits by content so no content straddles both.

    The train side gets floor(ratio * n_contents + 0.5) contents, chosen
    by a seeded shuffle. Returns (train_records, test_records); the
    records' split fields are set in place.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    contents = sorted({r.content_id for r in records})
    if len(contents) < 2:
        raise ManifestError(f"need at least 2 contents to split, got {len(contents)}")
    n_train = int(math.floor(ratio * len(contents) + 0.5))
    if n_train < 1 or n_train >= len(contents):
        raise ConfigError(f"ratio {ratio} leaves an empty side for {len(contents)} contents")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(contents))
    train_contents = {contents[i] for i in perm[:n_train]}
    train, test = [], []
    for rec in records:
        if rec.content_id in train_contents:
            rec.split = "train"
            train.append(rec)
        else:
            rec.split = "test"
            test.append(rec)
    return train, test
