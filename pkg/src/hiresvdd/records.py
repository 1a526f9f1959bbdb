"""Dataset manifests and score sets, with their TSV file formats."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DuplicateId, IoError, ParseError

LABELS = ("bonafide", "deepfake")
SPLITS = ("train", "valid", "testA", "testB")
MANIFEST_HEADER = ("id", "path", "label", "split", "singer")
SCORE_HEADER = ("id", "label", "score")


def label_to_int(label: str) -> int:
    """Polarity convention: deepfake is the positive class."""
    return LABELS.index(label)


@dataclass(frozen=True)
class ManifestRow:
    id: str
    path: str
    label: str
    split: str
    singer: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ParseError(f"row {self.id!r}: label must be one of {LABELS}, got {self.label!r}")
        if self.split not in SPLITS:
            raise ParseError(f"row {self.id!r}: split must be one of {SPLITS}, got {self.split!r}")

    @property
    def y(self) -> int:
        return label_to_int(self.label)


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=lambda: Path("."))

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.id in seen:
                raise DuplicateId(f"duplicate utterance id {row.id!r}")
            seen.add(row.id)
        self.root = Path(self.root)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def split(self, *names: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.rows if r.split in names], self.root)

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p

    def labels(self) -> list[int]:
        return [r.y for r in self.rows]

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in self.rows:
            w.writerow((r.id, r.path, r.label, r.split, r.singer))
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()

    def write(self, path) -> None:
        _write_text(path, self.to_tsv())

    @classmethod
    def from_tsv(cls, text: str, root=".") -> "DatasetManifest":
        reader = csv.reader(io.StringIO(text), delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_HEADER:
            raise ParseError(f"manifest header must be {MANIFEST_HEADER}, got {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(MANIFEST_HEADER):
                raise ParseError(f"manifest line {lineno}: expected 5 fields, got {len(rec)}")
            rows.append(ManifestRow(*rec))
        return cls(rows, Path(root))

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_tsv(_read_text(path), root=path.parent)


@dataclass(frozen=True)
class ScoreEntry:
    id: str
    label: str
    score: float


@dataclass
class ScoreSet:
    entries: list[ScoreEntry] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise DuplicateId(f"duplicate score id {e.id!r}")
            if e.label not in LABELS:
                raise ParseError(f"score {e.id!r}: bad label {e.label!r}")
            if not math.isfinite(e.score):
                raise ValueError(f"score {e.id!r} is not finite")
            seen.add(e.id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def as_dict(self) -> dict[str, float]:
        return {e.id: e.score for e in self.entries}

    def arrays(self):
        import numpy as np

        scores = np.array([e.score for e in self.entries], dtype=np.float64)
        labels = np.array([label_to_int(e.label) for e in self.entries], dtype=np.int64)
        return scores, labels

    def to_tsv(self) -> str:
        lines = ["\t".join(SCORE_HEADER)]
        lines += [f"{e.id}\t{e.label}\t{e.score:.17g}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        _write_text(path, self.to_tsv())

    @classmethod
    def from_tsv(cls, text: str) -> "ScoreSet":
        lines = text.splitlines()
        if not lines or tuple(lines[0].split("\t")) != SCORE_HEADER:
            raise ParseError(f"score file header must be {SCORE_HEADER}")
        entries = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"score line {lineno}: expected 3 fields")
            try:
                score = float(parts[2])
            except ValueError as exc:
                raise ParseError(f"score line {lineno}: bad score {parts[2]!r}") from exc
            entries.append(ScoreEntry(parts[0], parts[1], score))
        return cls(entries)

    @classmethod
    def read(cls, path) -> "ScoreSet":
        return cls.from_tsv(_read_text(Path(path)))


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
