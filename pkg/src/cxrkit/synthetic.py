"""Procedural two-class radiograph-like dataset for desk-scale verification.

Every image carries two elliptical "lung" fields on a noisy background
inside a black border frame. Positive-class images additionally show bright
round opacities scattered inside the lung fields; negative images stay
clean. Labels are assigned per patient and each patient contributes a fixed
number of scans, so patient-level splitting is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import (
    NEGATIVE,
    POSITIVE,
    DatasetManifest,
    ScanRecord,
    save_manifest,
)


@dataclass(frozen=True)
class SyntheticSpec:
    n_patients: int = 130
    scans_per_patient: int = 2
    image_height: int = 260
    image_width: int = 240
    border: int = 10
    positive_patient_fraction: float = 0.5
    n_lateral: int = 0
    n_artifact: int = 0
    seed: int = 0


def synthetic_image(
    rng: np.random.Generator,
    positive: bool,
    height: int = 260,
    width: int = 240,
    border: int = 10,
) -> np.ndarray:
    """One 8-bit grayscale image; the class signal is the blob pattern."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = rng.normal(0.14, 0.035, (height, width))

    lung_mask = np.zeros((height, width), dtype=bool)
    centers = []
    for side in (-1, 1):
        cy = height * rng.uniform(0.45, 0.55)
        cx = width * (0.5 + side * rng.uniform(0.19, 0.26))
        ry = height * rng.uniform(0.20, 0.28)
        rx = width * rng.uniform(0.11, 0.16)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        lung_mask |= inside
        centers.append((cy, cx, ry, rx))
    img[lung_mask] += 0.45 + rng.normal(0.0, 0.04, int(lung_mask.sum()))

    if positive:
        n_blobs = int(rng.integers(5, 9))
        for _ in range(n_blobs):
            cy, cx, ry, rx = centers[int(rng.integers(0, 2))]
            by = cy + rng.uniform(-0.6, 0.6) * ry
            bx = cx + rng.uniform(-0.6, 0.6) * rx
            radius = rng.uniform(5.0, 11.0)
            bump = np.exp(-(((yy - by) ** 2 + (xx - bx) ** 2) / (2.0 * radius**2)))
            img += 0.30 * bump

    img *= rng.uniform(0.82, 1.08)  # acquisition brightness jitter
    img = np.clip(img, 0.0, 1.0)
    if border > 0:
        img[:border, :] = 0.0
        img[-border:, :] = 0.0
        img[:, :border] = 0.0
        img[:, -border:] = 0.0
    return np.round(img * 255.0).astype(np.uint8)


def generate_dataset(root: str | Path, spec: SyntheticSpec = SyntheticSpec()) -> Path:
    """Write PNGs plus a manifest CSV under root; returns the manifest path."""
    from PIL import Image

    root = Path(root)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    n_positive_patients = round(spec.n_patients * spec.positive_patient_fraction)
    records: list[ScanRecord] = []
    for p in range(spec.n_patients):
        positive = p < n_positive_patients
        patient_id = f"patient{p:04d}"
        for s in range(spec.scans_per_patient):
            scan_id = f"scan{p:04d}_{s}"
            img = synthetic_image(
                rng, positive, spec.image_height, spec.image_width, spec.border
            )
            path = image_dir / f"{scan_id}.png"
            Image.fromarray(img, mode="L").save(path)
            records.append(
                ScanRecord(
                    scan_id=scan_id,
                    patient_id=patient_id,
                    label=POSITIVE if positive else NEGATIVE,
                    image_path=str(path),
                    view="frontal",
                    artifact_flag=False,
                    machine_id=f"machine{p % 4}",
                    age=int(rng.integers(25, 90)),
                    sex=["male", "female", "unknown"][int(rng.integers(0, 3))],
                )
            )

    # Optional excluded rows exercise the ingestion filters.
    extra = []
    for i in range(spec.n_lateral):
        extra.append(("lateral", i))
    for i in range(spec.n_artifact):
        extra.append(("artifact", i))
    for kind, i in extra:
        scan_id = f"excl_{kind}{i:03d}"
        img = synthetic_image(rng, False, spec.image_height, spec.image_width, spec.border)
        path = image_dir / f"{scan_id}.png"
        Image.fromarray(img, mode="L").save(path)
        records.append(
            ScanRecord(
                scan_id=scan_id,
                patient_id=f"patient_excl_{kind}{i:03d}",
                label=NEGATIVE,
                image_path=str(path),
                view="lateral" if kind == "lateral" else "frontal",
                artifact_flag=kind == "artifact",
                machine_id="machine0",
            )
        )

    manifest = DatasetManifest(records=records, source_note="synthetic")
    return save_manifest(manifest, root / "manifest.csv")
