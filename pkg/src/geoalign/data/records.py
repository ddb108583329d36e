"""Sample records, their JSONL wire format and schema validation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..regions import BBox
from .imageio import read_pixels

SPLITS = ("train", "test")
NEGATIVE_KINDS = ("attribute", "orientation", "category")
FIELDS = ("id", "image", "brief_caption", "detail_caption", "regions", "split")


class RecordError(ValueError):
    """Malformed or invalid dataset record."""

    def __init__(self, message: str, line: int | None = None, record_id: str | None = None,
                 violations=()):
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if record_id is not None:
            prefix.append(f"record {record_id}")
        super().__init__(f"{', '.join(prefix)}: {message}" if prefix else message)
        self.message = message
        self.line = line
        self.record_id = record_id
        self.violations = list(violations)


@dataclass(frozen=True)
class Violation:
    field: str
    code: str

    def __str__(self) -> str:
        return f"{self.field}: {self.code}"


@dataclass
class HardNegative:
    text: str
    kind: str

    def to_dict(self) -> dict:
        return {"text": self.text, "kind": self.kind}


@dataclass
class RegionAnnotation:
    bbox: BBox
    phrase: str
    hard_negatives: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bbox": self.bbox.to_list(),
            "phrase": self.phrase,
            "hard_negatives": [n.to_dict() for n in self.hard_negatives],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionAnnotation":
        return cls(
            bbox=BBox.from_list(d["bbox"]),
            phrase=d["phrase"],
            hard_negatives=[HardNegative(n["text"], n["kind"]) for n in d.get("hard_negatives", [])],
        )


@dataclass
class SampleRecord:
    id: str
    image: object  # relative path string, or {"seed": int} for an inline procedural scene
    brief_caption: str
    detail_caption: str
    regions: list = field(default_factory=list)
    split: str = "train"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image": self.image,
            "brief_caption": self.brief_caption,
            "detail_caption": self.detail_caption,
            "regions": [r.to_dict() for r in self.regions],
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict, validate: bool = True) -> "SampleRecord":
        if validate:
            bad = schema_validate(d)
            if bad:
                raise RecordError(
                    "; ".join(str(v) for v in bad), record_id=_id_of(d), violations=bad
                )
        return cls(
            id=d["id"],
            image=d["image"],
            brief_caption=d["brief_caption"],
            detail_caption=d["detail_caption"],
            regions=[RegionAnnotation.from_dict(r) for r in d.get("regions", [])],
            split=d["split"],
        )


def _id_of(d) -> str | None:
    return d.get("id") if isinstance(d, dict) and isinstance(d.get("id"), str) else None


def _nonempty(s) -> bool:
    return isinstance(s, str) and s.strip() != ""


def schema_validate(record) -> list[Violation]:
    """All invariant violations of one record (empty list means valid)."""
    d = record.to_dict() if isinstance(record, SampleRecord) else record
    if not isinstance(d, dict):
        return [Violation("record", "not an object")]
    out = []
    for key in d:
        if key not in FIELDS:
            out.append(Violation(key, "unknown field"))
    if not _nonempty(d.get("id")):
        out.append(Violation("id", "id empty"))
    img = d.get("image")
    if not (_nonempty(img) or (isinstance(img, dict) and isinstance(img.get("seed"), int))):
        out.append(Violation("image", "image reference"))
    brief, detail = d.get("brief_caption"), d.get("detail_caption")
    if not _nonempty(brief):
        out.append(Violation("brief_caption", "caption empty"))
    if not _nonempty(detail):
        out.append(Violation("detail_caption", "caption empty"))
    if _nonempty(brief) and _nonempty(detail) and len(brief.split()) > len(detail.split()):
        out.append(Violation("brief_caption", "caption length"))
    if d.get("split") not in SPLITS:
        out.append(Violation("split", "split"))
    regions = d.get("regions", [])
    if not isinstance(regions, list):
        return out + [Violation("regions", "not a list")]
    for i, r in enumerate(regions):
        out.extend(_region_violations(f"regions[{i}]", r))
    return out


def _region_violations(where: str, r) -> list[Violation]:
    if not isinstance(r, dict):
        return [Violation(where, "not an object")]
    out = []
    bbox = r.get("bbox")
    if (
        not isinstance(bbox, (list, tuple))
        or len(bbox) != 4
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox)
    ):
        out.append(Violation(f"{where}.bbox", "bbox format"))
    else:
        out.extend(Violation(f"{where}.bbox", code) for code in BBox.from_list(bbox).violations())
    phrase = r.get("phrase")
    if not _nonempty(phrase):
        out.append(Violation(f"{where}.phrase", "phrase empty"))
    negs = r.get("hard_negatives", [])
    if not isinstance(negs, list):
        return out + [Violation(f"{where}.hard_negatives", "not a list")]
    seen = set()
    for j, n in enumerate(negs):
        loc = f"{where}.hard_negatives[{j}]"
        if not isinstance(n, dict) or not _nonempty(n.get("text")):
            out.append(Violation(loc, "negative empty"))
            continue
        if n.get("kind") not in NEGATIVE_KINDS:
            out.append(Violation(loc, "negative kind"))
        if n["text"] == phrase:
            out.append(Violation(loc, "negative equals phrase"))
        if n["text"] in seen:
            out.append(Violation(loc, "negative duplicate"))
        seen.add(n["text"])
    return out


def canonical(record) -> dict:
    """Normalized dict form used for structural comparison (floats as repr-stable)."""
    d = record.to_dict() if isinstance(record, SampleRecord) else dict(record)
    return json.loads(json.dumps(d, sort_keys=True))


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            d = r.to_dict() if isinstance(r, SampleRecord) else r
            fh.write(json.dumps(d, ensure_ascii=False, separators=(",", ":")) + "\n")


def read_jsonl(path, validate: bool = True) -> list[SampleRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"malformed JSON ({exc.msg})", line=lineno) from exc
            try:
                out.append(SampleRecord.from_dict(d, validate=validate))
            except RecordError as exc:
                raise RecordError(exc.message, line=lineno, record_id=exc.record_id,
                                  violations=exc.violations) from exc
            except (KeyError, TypeError) as exc:
                raise RecordError(f"missing or mistyped field {exc}", line=lineno,
                                  record_id=_id_of(d)) from exc
    return out


def load_pixels(record: SampleRecord, base_dir=".") -> np.ndarray:
    """Decoded ``(H, W, 3)`` uint8 pixels of a record's image."""
    if isinstance(record.image, dict):
        from .synth import render_inline

        return render_inline(record.image)
    return read_pixels(os.path.join(base_dir, record.image))
