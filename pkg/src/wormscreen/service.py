"""HTTP service backing the interactive annotation workflow.

The service exposes the filesystem workspace over a small JSON API: image
listing and viewing (with the log-intensity view used for annotation), worm
annotation round-trips with optimistic version counters, fluorescence blob
outlines and stripe labels, hard-negative review candidates, and training
triggers. One training job runs at a time; model files are swapped
atomically so readers never see a half-written model.
"""

from __future__ import annotations

import json
import os
import threading
import time
import traceback
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel, Field

from .config import PipelineConfig
from .densescan import dense_score
from .fluor import blob_outline, detect_blobs, prepare_fl
from .imagecore import GrayImage, filter_bank
from .imageio import png_bytes, read_image
from .pipeline import (SegmenterBundle, TrainImage, model_id,
                       train_segmenter_workflow, train_stripe_workflow)
from .segmenter import (WormAnnotation, annotations_from_json,
                        annotations_to_json, hard_negative_mine,
                        threshold_segment, validate_annotation)

API = "/api/v1"


class WormPayload(BaseModel):
    worm_id: str
    midline: list[list[float]]
    side_a: list[list[float]]
    side_b: list[list[float]]


class AnnotationPayload(BaseModel):
    image_id: str
    version: int = 0
    worms: list[WormPayload] = Field(default_factory=list)


class BlobOut(BaseModel):
    blob_id: int
    outline: list[list[int]]
    area: int
    centroid: list[float]
    worm_overlap: float


class StripeLabelPayload(BaseModel):
    image_id: str
    version: int = 0
    labels: dict[int, str] = Field(default_factory=dict)


class SegmentOut(BaseModel):
    x: float
    y: float
    angle: float
    length: float
    score: float


class TrainStatus(BaseModel):
    running: bool
    kind: str | None = None
    started: float | None = None
    finished: float | None = None
    error: str | None = None
    detail: str = ""


class ImageInfo(BaseModel):
    image_id: str
    path: str
    width: int
    height: int


class ModelInfo(BaseModel):
    name: str
    model_id: str
    path: str


class Workspace:
    """Filesystem layout the service and CLI share."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        for sub in ("images", "annotations", "labels", "models", "results"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    @property
    def images(self) -> Path:
        return self.root / "images"

    @property
    def annotations(self) -> Path:
        return self.root / "annotations"

    @property
    def labels(self) -> Path:
        return self.root / "labels"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def results(self) -> Path:
        return self.root / "results"

    def image_path(self, image_id: str) -> Path | None:
        for ext in (".pgm", ".png"):
            p = self.images / f"{image_id}{ext}"
            if p.exists():
                return p
        return None

    def atomic_write(self, path: Path, text: str) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)


def create_app(workspace: str | Path,
               config: PipelineConfig | None = None) -> FastAPI:
    cfg = config or PipelineConfig()
    ws = Workspace(workspace)
    app = FastAPI(title="wormscreen", version="1")
    app.state.workspace = ws
    app.state.config = cfg

    write_lock = threading.Lock()
    train_lock = threading.Lock()
    status = TrainStatus(running=False)
    image_cache: dict[str, GrayImage] = {}

    def load_image(image_id: str) -> GrayImage:
        if image_id in image_cache:
            return image_cache[image_id]
        path = ws.image_path(image_id)
        if path is None:
            raise HTTPException(404, f"no image {image_id!r}")
        img = read_image(path)
        if len(image_cache) > 32:
            image_cache.clear()
        image_cache[image_id] = img
        return img

    def current_segmenter() -> SegmenterBundle:
        path = ws.models / "segmenter.json"
        if not path.exists():
            raise HTTPException(409, "no trained segmenter model")
        return SegmenterBundle.load(path)

    def load_annotation_file(image_id: str) -> AnnotationPayload:
        path = ws.annotations / f"{image_id}.json"
        if not path.exists():
            return AnnotationPayload(image_id=image_id, version=0)
        iid, version, worms = annotations_from_json(path.read_text())
        return AnnotationPayload(
            image_id=iid or image_id, version=version,
            worms=[WormPayload(worm_id=w.worm_id,
                               midline=w.midline.tolist(),
                               side_a=w.side_a.tolist(),
                               side_b=w.side_b.tolist()) for w in worms])

    @app.get(API + "/images", response_model=list[ImageInfo])
    def list_images():
        out = []
        for p in sorted(ws.images.iterdir()):
            if p.suffix.lower() not in (".pgm", ".png"):
                continue
            img = load_image(p.stem)
            out.append(ImageInfo(image_id=p.stem, path=str(p),
                                 width=img.width, height=img.height))
        return out

    @app.get(API + "/images/{image_id}")
    def get_image(image_id: str, log: bool = False,
                  region: str | None = Query(None,
                                             pattern=r"^\d+,\d+,\d+,\d+$")):
        img = load_image(image_id)
        if region:
            x, y, w, h = (int(v) for v in region.split(","))
            if w < 1 or h < 1 or x + w > img.width or y + h > img.height:
                raise HTTPException(400, "region out of bounds")
            img = GrayImage(img.data[y:y + h, x:x + w])
        return Response(content=png_bytes(img, log_view=log),
                        media_type="image/png")

    @app.get(API + "/annotations/{image_id}",
             response_model=AnnotationPayload)
    def get_annotations(image_id: str):
        return load_annotation_file(image_id)

    @app.put(API + "/annotations/{image_id}",
             response_model=AnnotationPayload)
    def put_annotations(image_id: str, payload: AnnotationPayload):
        worms = []
        for w in payload.worms:
            ann = WormAnnotation(worm_id=w.worm_id,
                                 midline=np.asarray(w.midline),
                                 side_a=np.asarray(w.side_a),
                                 side_b=np.asarray(w.side_b),
                                 image_id=image_id)
            try:
                validate_annotation(ann)
            except ValueError as exc:
                raise HTTPException(422, str(exc))
            worms.append(ann)
        with write_lock:
            current = load_annotation_file(image_id)
            if payload.version != current.version:
                raise HTTPException(
                    409, f"stale version {payload.version}, "
                         f"current is {current.version}")
            new_version = current.version + 1
            ws.atomic_write(ws.annotations / f"{image_id}.json",
                            annotations_to_json(image_id, worms,
                                                version=new_version))
        out = load_annotation_file(image_id)
        return out

    @app.get(API + "/fluor/{image_id}/blobs", response_model=list[BlobOut])
    def get_blobs(image_id: str):
        fl = load_image(image_id)
        worm_mask = None
        bf_id = image_id.replace("_fl", "_bf")
        seg_path = ws.models / "segmenter.json"
        if bf_id != image_id and ws.image_path(bf_id) and seg_path.exists():
            bundle = SegmenterBundle.load(seg_path)
            stack = filter_bank(load_image(bf_id), cfg.filter_bank)
            scores = dense_score(stack, bundle.model, cfg.segmenter)
            worm_mask = threshold_segment(
                scores, bundle.threshold,
                cfg.segmenter.min_region_area).mask
        blobs = detect_blobs(prepare_fl(fl, cfg.blobs), cfg.blobs,
                             worm_mask=worm_mask)
        return [BlobOut(blob_id=i,
                        outline=[[int(x), int(y)]
                                 for x, y in blob_outline(b)],
                        area=b.area,
                        centroid=[b.centroid[0], b.centroid[1]],
                        worm_overlap=b.worm_overlap)
                for i, b in enumerate(blobs)]

    @app.get(API + "/fluor/{image_id}/labels",
             response_model=StripeLabelPayload)
    def get_labels(image_id: str):
        path = ws.labels / f"{image_id}.json"
        if not path.exists():
            return StripeLabelPayload(image_id=image_id, version=0)
        from .fluor import stripe_labels_from_json
        iid, version, labels = stripe_labels_from_json(path.read_text())
        return StripeLabelPayload(image_id=iid or image_id, version=version,
                                  labels=labels)

    @app.put(API + "/fluor/{image_id}/labels",
             response_model=StripeLabelPayload)
    def put_labels(image_id: str, payload: StripeLabelPayload):
        for v in payload.labels.values():
            if v not in ("stripe", "other"):
                raise HTTPException(422, f"bad label {v!r}")
        from .fluor import stripe_labels_to_json
        with write_lock:
            current = get_labels(image_id)
            if payload.version != current.version:
                raise HTTPException(
                    409, f"stale version {payload.version}, "
                         f"current is {current.version}")
            ws.atomic_write(ws.labels / f"{image_id}.json",
                            stripe_labels_to_json(image_id, payload.labels,
                                                  version=current.version + 1))
        return get_labels(image_id)

    @app.get(API + "/hard-negatives", response_model=list[SegmentOut])
    def get_hard_negatives(image_id: str, top_m: int = 20):
        bundle = current_segmenter()
        img = load_image(image_id)
        _, _, worms = (lambda p: annotations_from_json(p.read_text())
                       if p.exists() else ("", 0, []))(
            ws.annotations / f"{image_id}.json")
        stack = filter_bank(img, cfg.filter_bank)
        mined = hard_negative_mine(bundle.model, [(stack, worms)],
                                   top_m=top_m, cfg=cfg.segmenter)
        return [SegmentOut(x=m.segment.cx, y=m.segment.cy,
                           angle=m.segment.angle, length=m.segment.length,
                           score=m.score) for m in mined]

    def _run_training(kind: str):
        nonlocal status
        try:
            if kind == "segmenter":
                items = []
                for path in sorted(ws.annotations.glob("*.json")):
                    iid, _, worms = annotations_from_json(path.read_text())
                    if not worms:
                        continue
                    img_path = ws.image_path(iid or path.stem)
                    if img_path is None:
                        continue
                    items.append(TrainImage(
                        stack=filter_bank(read_image(img_path),
                                          cfg.filter_bank),
                        annotations=worms))
                if not items:
                    raise ValueError("no annotated images in the workspace")
                bundle = train_segmenter_workflow(items, cfg)
                target = ws.models / "segmenter.json"
                bundle.save(target.with_suffix(".tmp"))
                os.replace(target.with_suffix(".tmp"), target)
                status.detail = f"model {model_id(target)}"
            elif kind == "stripe":
                from .fluor import save_stripe_model, stripe_labels_from_json
                images, labels = [], []
                for path in sorted(ws.labels.glob("*.json")):
                    iid, _, labs = stripe_labels_from_json(path.read_text())
                    img_path = ws.image_path(iid or path.stem)
                    if img_path is None or not labs:
                        continue
                    images.append(read_image(img_path))
                    labels.append(labs)
                if not images:
                    raise ValueError("no labeled images in the workspace")
                model = train_stripe_workflow(images, labels, cfg)
                target = ws.models / "stripe.json"
                save_stripe_model(target.with_suffix(".tmp"), model)
                os.replace(target.with_suffix(".tmp"), target)
                status.detail = f"model {model_id(target)}"
            else:
                raise ValueError(f"unknown training kind {kind!r}")
            status.error = None
        except Exception as exc:
            status.error = f"{exc}"
            traceback.print_exc()
        finally:
            status.finished = time.time()
            status.running = False
            train_lock.release()

    @app.post(API + "/train/{kind}", response_model=TrainStatus)
    def trigger_training(kind: str):
        nonlocal status
        if kind not in ("segmenter", "stripe"):
            raise HTTPException(404, f"unknown training kind {kind!r}")
        if not train_lock.acquire(blocking=False):
            raise HTTPException(409, "a training job is already running")
        status = TrainStatus(running=True, kind=kind, started=time.time())
        threading.Thread(target=_run_training, args=(kind,),
                         daemon=True).start()
        return status

    @app.get(API + "/train/status", response_model=TrainStatus)
    def train_status():
        return status

    @app.get(API + "/models", response_model=list[ModelInfo])
    def list_models():
        out = []
        for p in sorted(ws.models.glob("*.json")):
            out.append(ModelInfo(name=p.stem, model_id=model_id(p),
                                 path=str(p)))
        return out

    @app.get(API + "/report")
    def get_report():
        path = ws.results / "report.json"
        if not path.exists():
            raise HTTPException(404, "no report available")
        return json.loads(path.read_text())

    return app
