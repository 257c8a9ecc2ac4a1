"""Shared fixtures: synthetic manifests and an in-memory image loader."""

import numpy as np
import pytest

from cxrkit.augment import derive_seed
from cxrkit.manifest import NEGATIVE, POSITIVE, DatasetManifest, ScanRecord
from cxrkit.preprocess import RawImage
from cxrkit.synthetic import synthetic_image


def patient_manifest(n_patients=12, scans_per_patient=2, label_per_patient=False):
    """Small in-memory manifest. By default each patient carries both labels
    so any patient-level split keeps both classes on both sides."""
    records = []
    for p in range(n_patients):
        for s in range(scans_per_patient):
            if label_per_patient:
                label = POSITIVE if p % 2 == 0 else NEGATIVE
            else:
                label = POSITIVE if s % 2 == 0 else NEGATIVE
            records.append(
                ScanRecord(
                    scan_id=f"scan{p:03d}_{s}",
                    patient_id=f"patient{p:03d}",
                    label=label,
                    image_path="",
                )
            )
    return DatasetManifest(records=records, source_note="in-memory synthetic")


def synthetic_loader(height=200, width=180, border=8):
    """Record -> RawImage generator keyed on scan_id; no disk involved."""

    def load(record):
        rng = np.random.default_rng(derive_seed("loader", record.scan_id))
        arr = synthetic_image(
            rng, positive=record.label == POSITIVE, height=height, width=width, border=border
        )
        return RawImage(pixels=arr.astype(np.float64), bit_depth=8)

    return load


@pytest.fixture(scope="session")
def toy_manifest_session():
    return patient_manifest()


@pytest.fixture(scope="session")
def toy_loader_session():
    return synthetic_loader()
