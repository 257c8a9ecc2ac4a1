"""Wiring between manifest records and model inputs.

The pipeline owns the per-record plumbing: load the raw image, canonicalize
(or raw-resize when preprocessing is disabled), optionally augment with the
per-(epoch, scan) seed, run mask inference, and stack the 3-channel input.
Canonical images can be cached on disk so repeated epochs skip the
canonicalization cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentationPolicy, apply_plan, derive_seed, sample_plan
from .manifest import ScanRecord
from .model import TrainedModel, predict_batch
from .preprocess import (
    CanonicalImage,
    PreprocessParams,
    canonicalize,
    load_canonical,
    load_image,
    resize_raw_only,
    save_canonical,
)
from .retrieval import EmbeddingEntry
from .segmentation import MaskModel, ModelInput, compose_input, segment_lungs, zero_mask


@dataclass
class ScoredScan:
    scan_id: str
    score: float
    label: str

    @property
    def is_positive(self) -> bool:
        return self.label == "positive"


class InputPipeline:
    """Record -> ModelInput plumbing shared by training, evaluation, the
    experiment harness, and the service."""

    def __init__(
        self,
        params: PreprocessParams = PreprocessParams(),
        mask_model: MaskModel | None = None,
        policy: AugmentationPolicy | None = None,
        preprocessing_enabled: bool = True,
        cache_dir: str | Path | None = None,
        loader=None,
    ):
        self.params = params
        self.mask_model = mask_model
        self.policy = policy
        self.preprocessing_enabled = preprocessing_enabled
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.loader = loader if loader is not None else (lambda rec: load_image(rec.image_path))

    def _cache_path(self, record: ScanRecord) -> Path | None:
        if self.cache_dir is None:
            return None
        suffix = "canon" if self.preprocessing_enabled else "raw"
        return self.cache_dir / f"{record.scan_id}.{suffix}.cxi"

    def canonical_for(self, record: ScanRecord) -> CanonicalImage:
        cache = self._cache_path(record)
        if cache is not None and cache.exists():
            return load_canonical(cache)
        raw = self.loader(record)
        if self.preprocessing_enabled:
            canonical = canonicalize(raw, self.params)
        else:
            canonical = resize_raw_only(raw)
        if cache is not None:
            save_canonical(canonical, cache)
        return canonical

    def warm_cache(self, records: list[ScanRecord]) -> int:
        """Canonicalize and persist every record; returns the number written."""
        if self.cache_dir is None:
            raise ValueError("pipeline has no cache directory")
        written = 0
        for rec in records:
            cache = self._cache_path(rec)
            if cache is not None and not cache.exists():
                self.canonical_for(rec)
                written += 1
        return written

    def model_input(
        self,
        record: ScanRecord,
        epoch: int | None = None,
        global_seed: int | None = None,
        augment: bool = False,
    ) -> ModelInput:
        canonical = self.canonical_for(record)
        if augment and self.policy is not None:
            plan = sample_plan(self.policy, derive_seed(global_seed, epoch, record.scan_id))
            canonical = apply_plan(canonical, plan)
        if self.preprocessing_enabled and self.mask_model is not None:
            mask = segment_lungs(canonical, self.mask_model)
        else:
            # No-preprocessing variant: zeros stand in for the mask channel.
            mask = zero_mask()
        return compose_input(canonical, mask)


def score_records(
    model: TrainedModel,
    records: list[ScanRecord],
    pipeline: InputPipeline,
    batch_size: int = 16,
) -> list[ScoredScan]:
    """Inference scores for records (no augmentation at inference)."""
    out: list[ScoredScan] = []
    for start in range(0, len(records), batch_size):
        batch = records[start : start + batch_size]
        inputs = [pipeline.model_input(rec, augment=False) for rec in batch]
        scores, _ = predict_batch(model, inputs)
        for rec, score in zip(batch, scores):
            out.append(ScoredScan(scan_id=rec.scan_id, score=float(score), label=rec.label))
    return out


def embed_records(
    model: TrainedModel,
    records: list[ScanRecord],
    pipeline: InputPipeline,
    split: str,
    batch_size: int = 16,
) -> tuple[list[EmbeddingEntry], list[ScoredScan]]:
    """Embeddings plus scores for records, tagged with their split."""
    entries: list[EmbeddingEntry] = []
    scored: list[ScoredScan] = []
    for start in range(0, len(records), batch_size):
        batch = records[start : start + batch_size]
        inputs = [pipeline.model_input(rec, augment=False) for rec in batch]
        scores, embeddings = predict_batch(model, inputs)
        for rec, score, emb in zip(batch, scores, embeddings):
            entries.append(
                EmbeddingEntry(
                    scan_id=rec.scan_id,
                    label=rec.label,
                    vector=tuple(float(v) for v in emb),
                    split=split,
                )
            )
            scored.append(ScoredScan(scan_id=rec.scan_id, score=float(score), label=rec.label))
    return entries, scored


def scored_pairs(scored: list[ScoredScan]) -> list[tuple[float, bool]]:
    """(score, is_positive) pairs for the metrics layer."""
    return [(s.score, s.is_positive) for s in scored]


def save_scores(scored: list[ScoredScan], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["scan_id\tscore\tlabel"]
    for s in sorted(scored, key=lambda s: s.scan_id):
        lines.append(f"{s.scan_id}\t{s.score:.9g}\t{s.label}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_scores(path: str | Path) -> list[ScoredScan]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scores file not found: {path}")
    out = []
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        scan_id, score, label = line.split("\t")
        out.append(ScoredScan(scan_id=scan_id, score=float(score), label=label))
    return out
