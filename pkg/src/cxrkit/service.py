"""HTTP serving: classification and similar-case retrieval.

Read-mostly: endpoints never retrain; the only mutation is the session
store of uploaded-scan embeddings, which never enters the curated training
index. Model, index, and projection are immutable snapshots swapped
atomically by /admin/reload.
"""

import io
import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, HTTPException, Query, UploadFile
from fastapi.responses import JSONResponse, Response

from .manifest import DatasetManifest, load_manifest
from .model import TrainedModel, classify, load_checkpoint, predict_batch
from .preprocess import (
    CanonicalImage,
    PreprocessError,
    PreprocessParams,
    RawImage,
    canonicalize,
    load_canonical,
    load_image,
    save_canonical,
)
from .retrieval import (
    EmbeddingIndex,
    EmbeddingEntry,
    ProjectedPoint,
    build_index,
    load_embeddings,
    load_projection,
    query_knn,
)
from .segmentation import (
    ConstantMaskModel,
    MaskModel,
    compose_input,
    load_mask_model,
    segment_lungs,
)

REGISTRY_VERSION = 1


class ServiceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Model registry: file-backed, atomic-rename updates, one active model.

@dataclass
class ModelRegistryEntry:
    model_id: str
    checkpoint_path: str
    config_summary: dict
    created: str
    is_active: bool


def load_registry(path: str | Path) -> list[ModelRegistryEntry]:
    path = Path(path)
    if not path.exists():
        return []
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("version") != REGISTRY_VERSION:
        raise ServiceError(f"unsupported registry version in {path}")
    return [ModelRegistryEntry(**e) for e in payload["entries"]]


def save_registry(entries: list[ModelRegistryEntry], path: str | Path) -> Path:
    active = [e for e in entries if e.is_active]
    if entries and len(active) != 1:
        raise ServiceError("registry must have exactly one active model")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": REGISTRY_VERSION,
        "entries": [e.__dict__ for e in entries],
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def register_model(
    registry_path: str | Path,
    model_id: str,
    checkpoint_path: str | Path,
    config_summary: dict,
    activate: bool = True,
) -> list[ModelRegistryEntry]:
    entries = [e for e in load_registry(registry_path) if e.model_id != model_id]
    if activate:
        for e in entries:
            e.is_active = False
    entries.append(
        ModelRegistryEntry(
            model_id=model_id,
            checkpoint_path=str(checkpoint_path),
            config_summary=config_summary,
            created=datetime.now(timezone.utc).isoformat(),
            is_active=activate or not entries,
        )
    )
    save_registry(entries, registry_path)
    return entries


def active_model_entry(entries: list[ModelRegistryEntry]) -> ModelRegistryEntry | None:
    for e in entries:
        if e.is_active:
            return e
    return None


# ---------------------------------------------------------------------------
# Service state.

@dataclass
class SessionScan:
    canonical: CanonicalImage
    embedding: np.ndarray
    score: float
    label: str


@dataclass
class ServiceState:
    model: TrainedModel | None = None
    model_id: str | None = None
    mask_model: MaskModel | None = None
    params: PreprocessParams = field(default_factory=PreprocessParams)
    threshold: float = 0.5
    index: EmbeddingIndex | None = None
    known_embeddings: dict[str, EmbeddingEntry] = field(default_factory=dict)
    projection: list[ProjectedPoint] | None = None
    manifest: DatasetManifest | None = None
    cache_dir: Path | None = None
    sessions: dict[str, SessionScan] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def records_by_id(self):
        return self.manifest.by_id() if self.manifest else {}


@dataclass
class ServicePaths:
    registry: Path
    index: Path
    embeddings: Path
    projection: Path
    manifest: Path
    mask_weights: Path | None = None
    cache_dir: Path | None = None


def load_service_state(paths: ServicePaths, threshold: float = 0.5,
                       params: PreprocessParams = PreprocessParams()) -> ServiceState:
    """Assemble the serving snapshot from files; missing pieces stay None."""
    state = ServiceState(threshold=threshold, params=params, cache_dir=paths.cache_dir)
    entries = load_registry(paths.registry) if paths.registry.exists() else []
    active = active_model_entry(entries)
    if active is not None:
        model, _ = load_checkpoint(active.checkpoint_path)
        state.model = model
        state.model_id = active.model_id
    if paths.mask_weights is not None and Path(paths.mask_weights).exists():
        state.mask_model = load_mask_model(paths.mask_weights)
    else:
        state.mask_model = ConstantMaskModel(0.5)
    if paths.index.exists():
        from .retrieval import load_index

        state.index = load_index(paths.index)
    if paths.embeddings.exists():
        state.known_embeddings = {e.scan_id: e for e in load_embeddings(paths.embeddings)}
    if paths.projection.exists():
        state.projection = load_projection(paths.projection)
    if paths.manifest.exists():
        state.manifest = load_manifest(paths.manifest)
    return state


def _decode_upload(data: bytes, filename: str) -> RawImage:
    if not data:
        raise PreprocessError("empty upload")
    if filename.lower().endswith((".dcm", ".dicom")) or (len(data) > 132 and data[128:132] == b"DICM"):
        import tempfile

        with tempfile.NamedTemporaryFile(suffix=".dcm") as tmp:
            tmp.write(data)
            tmp.flush()
            return load_image(tmp.name)
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(data)) as pil:
            if pil.mode in ("I;16", "I;16L", "I;16B", "I"):
                arr = np.asarray(pil, dtype=np.float64)
                bit_depth = 16
            else:
                arr = np.asarray(pil.convert("L"), dtype=np.float64)
                bit_depth = 8
    except UnidentifiedImageError as exc:
        raise PreprocessError(f"cannot decode upload {filename!r}: {exc}") from exc
    return RawImage(pixels=arr, bit_depth=bit_depth)


def _canonical_for_known_scan(state: ServiceState, scan_id: str) -> CanonicalImage:
    if state.cache_dir is not None:
        cached = state.cache_dir / f"{scan_id}.canon.cxi"
        if cached.exists():
            return load_canonical(cached)
    record = state.records_by_id.get(scan_id)
    if record is None or not record.image_path:
        raise ServiceError(f"no image available for scan {scan_id}")
    canonical = canonicalize(load_image(record.image_path), state.params)
    if state.cache_dir is not None:
        state.cache_dir.mkdir(parents=True, exist_ok=True)
        save_canonical(canonical, state.cache_dir / f"{scan_id}.canon.cxi")
    return canonical


def _canonical_png_bytes(canonical: CanonicalImage) -> bytes:
    from PIL import Image

    arr = np.round(canonical.pixels * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def create_app(state: ServiceState, reload_fn=None, static_dir: str | Path | None = None):
    """Build the FastAPI application over a service state snapshot.

    reload_fn, when given, returns a fresh ServiceState for /admin/reload.
    static_dir, when given, is served at /ui (the case-browser build).
    """
    app = FastAPI(title="cxr classification and similar-case service")
    app.state.svc = state

    def svc() -> ServiceState:
        return app.state.svc

    def neighbor_payload(result):
        return {
            "query_id": result.query_id,
            "k": len(result.neighbors),
            "neighbors": [
                {
                    "scan_id": n.scan_id,
                    "label": n.label,
                    "distance": n.distance,
                    "image_url": f"/scans/{n.scan_id}/image",
                }
                for n in result.neighbors
            ],
        }

    @app.get("/health")
    def health():
        s = svc()
        return {
            "status": "ok",
            "model_id": s.model_id,
            "model_loaded": s.model is not None,
            "index_size": len(s.index) if s.index else 0,
            "projection_available": s.projection is not None,
        }

    @app.post("/classify")
    async def classify_upload(file: UploadFile = File(...)):
        s = svc()
        if s.model is None:
            raise HTTPException(status_code=503, detail="no active model")
        data = await file.read()
        try:
            raw = _decode_upload(data, file.filename or "upload")
            canonical = canonicalize(raw, s.params)
        except PreprocessError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        mask = segment_lungs(canonical, s.mask_model or ConstantMaskModel(0.5))
        scores, embeddings = predict_batch(s.model, [compose_input(canonical, mask)])
        score = float(scores[0])
        label = classify(score, s.threshold)
        scan_id = f"upload-{uuid.uuid4().hex[:12]}"
        with s.lock:
            s.sessions[scan_id] = SessionScan(
                canonical=canonical, embedding=embeddings[0], score=score, label=label
            )
        return {
            "scan_id": scan_id,
            "score": score,
            "label": label,
            "threshold": s.threshold,
            "model_id": s.model_id,
        }

    @app.get("/scans/{scan_id}")
    def scan_metadata(scan_id: str):
        s = svc()
        record = s.records_by_id.get(scan_id)
        if record is not None:
            return {
                "scan_id": scan_id,
                "source": "manifest",
                "label": record.label,
                "patient_id": record.patient_id,
                "view": record.view,
                "machine_id": record.machine_id,
                "image_url": f"/scans/{scan_id}/image",
                "has_embedding": scan_id in s.known_embeddings,
            }
        session = s.sessions.get(scan_id)
        if session is not None:
            return {
                "scan_id": scan_id,
                "source": "upload",
                "label": session.label,
                "patient_id": None,
                "view": None,
                "machine_id": None,
                "image_url": f"/scans/{scan_id}/image",
                "has_embedding": True,
            }
        raise HTTPException(status_code=404, detail=f"unknown scan {scan_id}")

    @app.get("/scans/{scan_id}/image")
    def scan_image(scan_id: str):
        s = svc()
        session = s.sessions.get(scan_id)
        try:
            if session is not None:
                canonical = session.canonical
            elif scan_id in s.records_by_id:
                canonical = _canonical_for_known_scan(s, scan_id)
            else:
                raise HTTPException(status_code=404, detail=f"unknown scan {scan_id}")
        except (ServiceError, PreprocessError) as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return Response(content=_canonical_png_bytes(canonical), media_type="image/png")

    @app.get("/scans/{scan_id}/similar")
    def similar(scan_id: str, k: int = Query(default=4)):
        s = svc()
        if k < 1:
            raise HTTPException(status_code=422, detail="k must be >= 1")
        if s.index is None or len(s.index) == 0:
            raise HTTPException(status_code=503, detail="no embedding index loaded")
        session = s.sessions.get(scan_id)
        if session is not None:
            vector = session.embedding
            exclude = None
        elif scan_id in s.known_embeddings:
            vector = np.asarray(s.known_embeddings[scan_id].vector)
            # A known scan is never its own precedent.
            exclude = scan_id
        else:
            raise HTTPException(status_code=404, detail=f"unknown scan {scan_id}")
        result = query_knn(s.index, vector, k=k, exclude_scan_id=exclude, query_id=scan_id)
        return JSONResponse(neighbor_payload(result))

    @app.get("/projection")
    def projection():
        s = svc()
        if s.projection is None:
            raise HTTPException(status_code=404, detail="no projection computed")
        return {
            "points": [
                {"scan_id": p.scan_id, "label": p.label, "x": p.xy[0], "y": p.xy[1]}
                for p in s.projection
            ]
        }

    @app.post("/admin/reload")
    def admin_reload():
        if reload_fn is None:
            raise HTTPException(status_code=503, detail="reload not configured")
        fresh = reload_fn()
        with app.state.svc.lock:
            fresh.sessions = app.state.svc.sessions
            app.state.svc = fresh
        return {
            "status": "reloaded",
            "model_id": fresh.model_id,
            "index_size": len(fresh.index) if fresh.index else 0,
        }

    if static_dir is not None and Path(static_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
