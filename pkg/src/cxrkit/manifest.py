"""Scan manifests: ingestion, exclusion rules, and patient-level splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

POSITIVE = "positive"
NEGATIVE = "negative"
LABELS = (POSITIVE, NEGATIVE)
VIEWS = ("frontal", "lateral")
SEXES = ("male", "female", "unknown")

MANIFEST_COLUMNS = [
    "scan_id",
    "patient_id",
    "label",
    "image_path",
    "view",
    "artifact_flag",
    "machine_id",
    "age",
    "sex",
]


class ManifestError(ValueError):
    """Raised for unreadable or ill-formed manifests."""


@dataclass(frozen=True)
class ScanRecord:
    """One radiograph: identity, label, and the metadata exclusion flags."""

    scan_id: str
    patient_id: str
    label: str
    image_path: str
    view: str = "frontal"
    artifact_flag: bool = False
    machine_id: str = ""
    age: int | None = None
    sex: str = "unknown"

    def __post_init__(self):
        if self.label not in LABELS:
            raise ManifestError(f"invalid label {self.label!r} for scan {self.scan_id!r}")
        if self.view not in VIEWS:
            raise ManifestError(f"invalid view {self.view!r} for scan {self.scan_id!r}")
        if self.sex not in SEXES:
            raise ManifestError(f"invalid sex {self.sex!r} for scan {self.scan_id!r}")

    @property
    def is_positive(self) -> bool:
        return self.label == POSITIVE


@dataclass
class DatasetManifest:
    records: list[ScanRecord]
    source_note: str = ""

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.scan_id in seen:
                raise ManifestError(f"duplicate scan_id {rec.scan_id!r}")
            seen.add(rec.scan_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def scan_ids(self) -> list[str]:
        return [rec.scan_id for rec in self.records]

    def patient_ids(self) -> set[str]:
        return {rec.patient_id for rec in self.records}

    def by_id(self) -> dict[str, ScanRecord]:
        return {rec.scan_id: rec for rec in self.records}


@dataclass(frozen=True)
class ExclusionEntry:
    scan_id: str
    reasons: tuple[str, ...]


@dataclass
class ExclusionLog:
    entries: list[ExclusionEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def scan_ids(self) -> list[str]:
        return [e.scan_id for e in self.entries]


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int
    test_fraction: float

    def __post_init__(self):
        if self.train_ids & self.test_ids:
            raise ManifestError("train and test scan ids overlap")


def _parse_bool(text: str, row_num: int) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no", ""):
        return False
    raise ManifestError(f"row {row_num}: cannot parse artifact_flag {text!r}")


def load_manifest(path: str | Path, source_note: str = "") -> DatasetManifest:
    """Read a manifest CSV (header row, columns per MANIFEST_COLUMNS).

    Row order is preserved. Errors name the offending row number or scan id.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    records: list[ScanRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"manifest {path} is empty (no header row)")
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"manifest {path} missing columns: {', '.join(missing)}")
        for row_num, row in enumerate(reader, start=2):
            try:
                scan_id = (row["scan_id"] or "").strip()
                if not scan_id:
                    raise ManifestError(f"row {row_num}: empty scan_id")
                if scan_id in seen:
                    raise ManifestError(f"duplicate scan_id {scan_id!r} at row {row_num}")
                seen.add(scan_id)
                age_text = (row.get("age") or "").strip()
                rec = ScanRecord(
                    scan_id=scan_id,
                    patient_id=(row["patient_id"] or "").strip(),
                    label=(row["label"] or "").strip(),
                    image_path=(row["image_path"] or "").strip(),
                    view=(row["view"] or "frontal").strip(),
                    artifact_flag=_parse_bool(row.get("artifact_flag") or "", row_num),
                    machine_id=(row.get("machine_id") or "").strip(),
                    age=int(age_text) if age_text else None,
                    sex=(row.get("sex") or "").strip() or "unknown",
                )
            except ManifestError:
                raise
            except (KeyError, ValueError, TypeError) as exc:
                raise ManifestError(f"row {row_num}: malformed ({exc})") from exc
            records.append(rec)
    return DatasetManifest(records=records, source_note=source_note or str(path))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest.records:
            writer.writerow(
                [
                    rec.scan_id,
                    rec.patient_id,
                    rec.label,
                    rec.image_path,
                    rec.view,
                    "true" if rec.artifact_flag else "false",
                    rec.machine_id,
                    "" if rec.age is None else rec.age,
                    rec.sex,
                ]
            )
    return path


def apply_exclusions(manifest: DatasetManifest) -> tuple[DatasetManifest, ExclusionLog]:
    """Drop lateral-view and rectangular-artifact records.

    Returns the retained manifest (order preserved) and a log with one entry
    per removed scan; |retained| + |excluded| = |input|.
    """
    kept: list[ScanRecord] = []
    log = ExclusionLog()
    for rec in manifest.records:
        reasons = []
        if rec.view != "frontal":
            reasons.append("lateral_view")
        if rec.artifact_flag:
            reasons.append("rectangular_artifact")
        if reasons:
            log.entries.append(ExclusionEntry(scan_id=rec.scan_id, reasons=tuple(reasons)))
        else:
            kept.append(rec)
    return DatasetManifest(records=kept, source_note=manifest.source_note), log


def patient_level_split(
    manifest: DatasetManifest, test_fraction: float = 0.15, seed: int = 0
) -> SplitAssignment:
    """Split scans into train/test with all of a patient's scans on one side.

    Patients are shuffled by seed and assigned to the test side until the
    test image count first reaches ceil(test_fraction * n_images).
    """
    if len(manifest) == 0:
        raise ManifestError("cannot split an empty manifest")
    if not 0.0 < test_fraction < 1.0:
        raise ManifestError(f"test_fraction must be in (0, 1), got {test_fraction}")

    by_patient: dict[str, list[str]] = {}
    for rec in manifest.records:
        by_patient.setdefault(rec.patient_id, []).append(rec.scan_id)

    patients = sorted(by_patient)
    rng = np.random.default_rng(seed)
    rng.shuffle(patients)

    n_images = len(manifest)
    # 1e-9 guard: fraction*n can land epsilon above an integer in float.
    quota = math.ceil(test_fraction * n_images - 1e-9)

    test_ids: set[str] = set()
    for patient in patients:
        if len(test_ids) >= quota:
            break
        test_ids.update(by_patient[patient])
    train_ids = {rec.scan_id for rec in manifest.records} - test_ids
    return SplitAssignment(
        train_ids=frozenset(train_ids),
        test_ids=frozenset(test_ids),
        seed=seed,
        test_fraction=test_fraction,
    )


def split_records(
    manifest: DatasetManifest, split: SplitAssignment
) -> tuple[list[ScanRecord], list[ScanRecord]]:
    """Partition manifest records by a split, preserving manifest order."""
    train = [r for r in manifest.records if r.scan_id in split.train_ids]
    test = [r for r in manifest.records if r.scan_id in split.test_ids]
    return train, test


def save_split(split: SplitAssignment, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "seed": split.seed,
        "test_fraction": split.test_fraction,
        "train_ids": sorted(split.train_ids),
        "test_ids": sorted(split.test_ids),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_split(path: str | Path) -> SplitAssignment:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"split file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return SplitAssignment(
        train_ids=frozenset(payload["train_ids"]),
        test_ids=frozenset(payload["test_ids"]),
        seed=int(payload["seed"]),
        test_fraction=float(payload["test_fraction"]),
    )


def save_exclusion_log(log: ExclusionLog, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log.entries:
            fh.write(json.dumps({"scan_id": entry.scan_id, "reasons": list(entry.reasons)}))
            fh.write("\n")
    return path
