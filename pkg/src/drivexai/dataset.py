"""Line-delimited JSON manifests, BDD-OIA / nu-AR importers and class counts.

Manifest layout: the first line is a header object::

    {"format": "drivexai-manifest", "version": 1, "split": "train",
     "actions": [...4 names...], "reasons": [...21 names...], "fingerprint": "<sha256>"}

followed by one record per line::

    {"id": "...", "image_path": "relative/path.png", "actions": [4 bits], "reasons": [21 bits]}

Accepted source layouts
-----------------------
BDD-OIA (``--format bdd-oia``), under ``annotation_root``:

* ``{split}_25k_images_actions.json`` -- COCO style,
  ``{"images": [{"id", "file_name"}], "annotations": [{"id" or "image_id", "category": [bits]}]}``.
  Only the first four action bits are used (forward, stop, left, right).
* ``{split}_25k_images_reasons.json`` -- either ``{file_name: [21 bits]}`` or a
  list of ``{"file_name", "reason": [21 bits]}``.
* images under ``data/`` (recorded as ``data/<file_name>``).

nu-AR (``--format nu-ar``), under ``annotation_root``: ``{split}.json``, a list
of ``{"image": path, "actions": [names], "reasons": [names]}`` using the names
in :data:`drivexai.labels.ACTIONS` / :data:`drivexai.labels.REASONS`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import ACTIONS, N_ACTIONS, N_REASONS, REASONS

SPLITS = ("train", "val", "test")
FORMAT = "drivexai-manifest"
VERSION = 1


class DatasetError(ValueError):
    pass


def vocab_fingerprint(actions=ACTIONS, reasons=REASONS) -> str:
    blob = json.dumps([list(actions), list(reasons)], separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class AnnotationRecord:
    id: str
    image_path: str
    actions: tuple[int, ...]
    reasons: tuple[int, ...]

    def __post_init__(self):
        if not self.image_path:
            raise DatasetError(f"record {self.id!r}: empty image_path")
        acts, reas = tuple(int(x) for x in self.actions), tuple(int(x) for x in self.reasons)
        if len(acts) != N_ACTIONS or len(reas) != N_REASONS:
            raise DatasetError("label arity mismatch")
        if any(b not in (0, 1) for b in acts + reas):
            raise DatasetError(f"record {self.id!r}: labels must be 0/1")
        object.__setattr__(self, "actions", acts)
        object.__setattr__(self, "reasons", reas)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "actions": list(self.actions),
            "reasons": list(self.reasons),
        }


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[AnnotationRecord, ...] = ()
    split: str = "train"
    fingerprint: str = field(default_factory=vocab_fingerprint)
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate record id in manifest")

    def __len__(self):
        return len(self.records)

    def action_matrix(self) -> np.ndarray:
        return np.array([r.actions for r in self.records], dtype=np.int8).reshape(-1, N_ACTIONS)

    def reason_matrix(self) -> np.ndarray:
        return np.array([r.reasons for r in self.records], dtype=np.int8).reshape(-1, N_REASONS)

    def resolve(self, record: AnnotationRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def concat(self, other: "DatasetManifest") -> "DatasetManifest":
        if other.fingerprint != self.fingerprint:
            raise DatasetError("vocabulary fingerprint mismatch")
        return DatasetManifest(self.records + other.records, self.split, self.fingerprint, self.root)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    header = {
        "format": FORMAT,
        "version": VERSION,
        "split": manifest.split,
        "actions": list(ACTIONS),
        "reasons": list(REASONS),
        "fingerprint": manifest.fingerprint,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise DatasetError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
    except ValueError as exc:
        raise DatasetError(f"{path}: line 1: malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise DatasetError(f"{path}: line 1: not a {FORMAT} header")
    if header.get("version") != VERSION:
        raise DatasetError(f"{path}: line 1: unsupported manifest version {header.get('version')}")
    fp = vocab_fingerprint(header.get("actions", ()), header.get("reasons", ()))
    if fp != vocab_fingerprint() or header.get("fingerprint") != fp:
        raise DatasetError(f"{path}: vocabulary fingerprint mismatch")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = AnnotationRecord(obj["id"], obj["image_path"], obj["actions"], obj["reasons"])
        except DatasetError as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}: line {lineno}: malformed record: {exc}") from exc
        records.append(rec)
    return DatasetManifest(tuple(records), header["split"], fp, path.parent)


def class_counts(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Positive counts per action and per reason."""
    return (
        manifest.action_matrix().sum(0, dtype=np.int64),
        manifest.reason_matrix().sum(0, dtype=np.int64),
    )


# importers -------------------------------------------------------------------

def _missing(path: Path):
    raise DatasetError(f"dataset not found; see docs for acquisition ({path} missing)")


def _load_json(path: Path):
    if not path.exists():
        _missing(path)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def import_bdd_oia(annotation_root: str | Path, split: str) -> DatasetManifest:
    root = Path(annotation_root)
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    actions_doc = _load_json(root / f"{split}_25k_images_actions.json")
    reasons_doc = _load_json(root / f"{split}_25k_images_reasons.json")

    if isinstance(reasons_doc, list):
        reasons_by_file = {d["file_name"]: d["reason"] for d in reasons_doc}
    else:
        reasons_by_file = dict(reasons_doc)

    names = {img["id"]: img["file_name"] for img in actions_doc["images"]}
    records = []
    for ann in actions_doc["annotations"]:
        image_id = ann.get("image_id", ann.get("id"))
        if image_id not in names:
            raise DatasetError(f"BDD-OIA annotation references unknown image id {image_id!r}")
        fname = names[image_id]
        if fname not in reasons_by_file:
            raise DatasetError(f"BDD-OIA: no reason annotation for {fname}")
        acts = [int(b) for b in ann["category"][:N_ACTIONS]]
        reas = [int(b) for b in reasons_by_file[fname]]
        records.append(AnnotationRecord(Path(fname).stem, f"data/{fname}", acts, reas))
    records.sort(key=lambda r: r.id)
    return DatasetManifest(tuple(records), split, root=root)


def import_nu_ar(annotation_root: str | Path, split: str) -> DatasetManifest:
    root = Path(annotation_root)
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    doc = _load_json(root / f"{split}.json")
    a_index = {n: i for i, n in enumerate(ACTIONS)}
    r_index = {n: i for i, n in enumerate(REASONS)}
    records = []
    for entry in doc:
        unknown = [n for n in entry.get("actions", []) if n not in a_index]
        unknown += [n for n in entry.get("reasons", []) if n not in r_index]
        if unknown:
            raise DatasetError(f"unknown category name(s): {', '.join(sorted(set(unknown)))}")
        acts = [0] * N_ACTIONS
        reas = [0] * N_REASONS
        for n in entry.get("actions", []):
            acts[a_index[n]] = 1
        for n in entry.get("reasons", []):
            reas[r_index[n]] = 1
        image = entry["image"]
        records.append(AnnotationRecord(entry.get("id", Path(image).stem), image, acts, reas))
    records.sort(key=lambda r: r.id)
    return DatasetManifest(tuple(records), split, root=root)


IMPORTERS = {"bdd-oia": import_bdd_oia, "nu-ar": import_nu_ar}
