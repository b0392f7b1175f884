"""HTTP inference service with request monitoring and drift detection.

The service serves whichever registry version is active, running the exact
offline pipeline (forward + postprocessing) so served counts and masks are
bit-identical to batch evaluation. Request logs feed fixed-size monitoring
windows; each full window is scored with the population stability index
against reference histograms stored alongside the model artifact. Two
consecutive windows above the trigger threshold raise the drift flag that
the run store's retraining policy consumes.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as model_io
from .explain import GradCam, overlay, save_png
from .postproc import PostprocConfig, count_cells
from .runstore import RunStore

logger = logging.getLogger(__name__)

PSI_WARN = 0.2
PSI_TRIGGER = 0.25
PSI_MASS_FLOOR = 1e-4
DEFAULT_WINDOW_SIZE = 100
MIN_WINDOW_SIZE = 10


def encode_rle(mask: np.ndarray) -> list[int]:
    """Row-major run lengths of a binary mask, starting with a (possibly 0) run of zeros."""
    flat = np.asarray(mask).ravel().astype(bool)
    if flat.size == 0:
        return []
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:  # first run must describe zeros
        runs = [0] + runs
    return [int(r) for r in runs]


def decode_rle(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=np.uint8)
    pos, value = 0, 0
    for run in runs:
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    if pos != total:
        raise ValueError(f"run lengths sum to {pos}, expected {total}")
    return flat.reshape(shape)


def psi(reference_mass, window_mass, floor: float = PSI_MASS_FLOOR) -> float:
    """Population stability index with bin masses floored at ``floor``."""
    p = np.maximum(np.asarray(reference_mass, dtype=np.float64), floor)
    q = np.maximum(np.asarray(window_mass, dtype=np.float64), floor)
    return float(np.sum((p - q) * np.log(p / q)))


@dataclass
class DriftReport:
    window_id: int
    input_psi: float
    count_psi: float
    status: str  # ok | warn | trigger
    window_size: int

    def to_dict(self) -> dict:
        return {
            "window_id": self.window_id,
            "input_psi": self.input_psi,
            "count_psi": self.count_psi,
            "status": self.status,
            "window_size": self.window_size,
        }


class RequestMonitor:
    """Scores fixed-size request windows against training-time references."""

    def __init__(
        self,
        reference: dict,
        window_size: int = DEFAULT_WINDOW_SIZE,
        warn_threshold: float = PSI_WARN,
        trigger_threshold: float = PSI_TRIGGER,
        on_trigger=None,
        log_path=None,
    ):
        if window_size < MIN_WINDOW_SIZE:
            raise ValueError(f"window_size must be >= {MIN_WINDOW_SIZE}")
        self.reference = reference
        self.window_size = window_size
        self.warn_threshold = warn_threshold
        self.trigger_threshold = trigger_threshold
        self.on_trigger = on_trigger
        self.log_path = log_path
        self._pending: list[dict] = []
        self._consecutive_high = {"input": 0, "count": 0}
        self._windows_seen = 0
        self.reports: list[DriftReport] = []
        self._lock = threading.Lock()

    def record(self, entry: dict) -> DriftReport | None:
        """Append one request log entry; returns a report when a window fills."""
        with self._lock:
            if self.log_path is not None:
                with open(self.log_path, "a") as fh:
                    fh.write(json.dumps(entry) + "\n")
            self._pending.append(entry)
            if len(self._pending) < self.window_size:
                return None
            window, self._pending = self._pending[: self.window_size], self._pending[self.window_size :]
            return self._score_window(window)

    def monitor_tick(self, window: list[dict]) -> DriftReport | None:
        """Score an explicit window of request logs (deferred below 10 requests)."""
        if len(window) < MIN_WINDOW_SIZE:
            logger.info("monitor window of %d deferred (< %d requests)", len(window), MIN_WINDOW_SIZE)
            return None
        with self._lock:
            return self._score_window(window)

    def _score_window(self, window: list[dict]) -> DriftReport:
        self._windows_seen += 1
        ref_int = self.reference["intensity_hist"]
        ref_cnt = self.reference["count_hist"]

        pooled = np.sum([e["intensity_hist"] for e in window], axis=0).astype(np.float64)
        input_mass = pooled / pooled.sum() if pooled.sum() > 0 else pooled
        input_psi = psi(ref_int["mass"], input_mass)

        counts = np.asarray([e["count"] for e in window], dtype=np.float64)
        cnt_hist = np.histogram(counts, bins=np.asarray(ref_cnt["edges"]))[0].astype(np.float64)
        count_mass = cnt_hist / cnt_hist.sum() if cnt_hist.sum() > 0 else cnt_hist
        count_psi = psi(ref_cnt["mass"], count_mass)

        for key, value in (("input", input_psi), ("count", count_psi)):
            if value > self.trigger_threshold:
                self._consecutive_high[key] += 1
            else:
                self._consecutive_high[key] = 0

        if max(self._consecutive_high.values()) >= 2:
            status = "trigger"
        elif max(input_psi, count_psi) > self.warn_threshold:
            status = "warn"
        else:
            status = "ok"

        report = DriftReport(
            window_id=self._windows_seen,
            input_psi=input_psi,
            count_psi=count_psi,
            status=status,
            window_size=len(window),
        )
        self.reports.append(report)
        event = {"event": "drift_window", **report.to_dict()}
        logger.info("%s", json.dumps(event))
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(event) + "\n")
        if status == "trigger" and self.on_trigger is not None:
            self.on_trigger(report)
        return report

    @property
    def last_report(self) -> DriftReport | None:
        return self.reports[-1] if self.reports else None


def intensity_mass(image: np.ndarray, edges) -> list[float]:
    hist = np.histogram(image, bins=np.asarray(edges))[0].astype(np.float64)
    total = hist.sum()
    return (hist / total if total > 0 else hist).tolist()


@dataclass
class ModelSnapshot:
    version: int
    net: object
    sidecar: dict
    postproc: PostprocConfig
    cam: GradCam = None

    def grad_cam_engine(self) -> GradCam:
        if self.cam is None:
            self.cam = GradCam(self.net)
        return self.cam


class ServiceState:
    def __init__(self, store: RunStore, window_size: int = DEFAULT_WINDOW_SIZE, log_path=None):
        self.store = store
        self.window_size = window_size
        self.log_path = log_path
        self.started = time.monotonic()
        self.counters = {"requests_total": 0, "predict_errors": 0, "explains_total": 0}
        self._snapshot: ModelSnapshot | None = None
        self._monitor: RequestMonitor | None = None
        self._lock = threading.Lock()
        self._cam_lock = threading.Lock()

    def current_snapshot(self) -> ModelSnapshot | None:
        """Latest active model; reloads when the registry advances."""
        entry = self.store.active_entry()
        if entry is None:
            return None
        with self._lock:
            if self._snapshot is not None and self._snapshot.version == entry["model_version"]:
                return self._snapshot
            record = self.store.get(entry["run_id"])
            net, sidecar = model_io.load(record.artifacts["weights"])
            snapshot = ModelSnapshot(
                version=entry["model_version"],
                net=net,
                sidecar=sidecar,
                postproc=PostprocConfig.from_dict(sidecar.get("postproc", {})),
            )
            reference = sidecar.get("reference_histograms")
            if reference:
                self._monitor = RequestMonitor(
                    reference,
                    window_size=self.window_size,
                    on_trigger=self._flag_drift,
                    log_path=self.log_path,
                )
            else:
                self._monitor = None
                logger.warning("model artifact has no reference histograms; drift monitoring off")
            self._snapshot = snapshot
            return snapshot

    def _flag_drift(self, report: DriftReport) -> None:
        self.store.set_drift_flag(
            f"psi above {PSI_TRIGGER} for 2 consecutive windows "
            f"(input_psi={report.input_psi:.3f}, count_psi={report.count_psi:.3f})"
        )

    @property
    def monitor(self) -> RequestMonitor | None:
        return self._monitor

    @property
    def cam_lock(self):
        return self._cam_lock


def decode_image_payload(payload_b64: str) -> np.ndarray:
    from PIL import Image

    raw = base64.b64decode(payload_b64, validate=True)
    img = Image.open(io.BytesIO(raw)).convert("RGB")
    return (np.asarray(img).astype(np.float32) / 255.0).clip(0.0, 1.0)


def create_app(store_dir, window_size: int = DEFAULT_WINDOW_SIZE, request_log=None):
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import PlainTextResponse, Response
    from pydantic import BaseModel

    store = RunStore(store_dir)
    state = ServiceState(store, window_size=window_size, log_path=request_log)
    app = FastAPI(title="cellcount service")
    app.state.service = state

    class PredictRequest(BaseModel):
        image: str  # base64 PNG

    class ExplainRequest(BaseModel):
        image: str
        layer: str | None = None

    def _require_snapshot() -> ModelSnapshot:
        snapshot = state.current_snapshot()
        if snapshot is None:
            raise HTTPException(status_code=503, detail="no model: registry has no active version")
        return snapshot

    def _decode(payload: str) -> np.ndarray:
        try:
            return decode_image_payload(payload)
        except Exception as exc:
            raise HTTPException(status_code=400, detail=f"undecodable image payload: {exc}")

    @app.post("/predict")
    def predict(req: PredictRequest):
        snapshot = _require_snapshot()
        image = _decode(req.image)
        state.counters["requests_total"] += 1
        t0 = time.monotonic()
        try:
            logits = model_io.predict_logits(snapshot.net, image)
            objects = count_cells(logits, snapshot.postproc)
        except Exception as exc:
            state.counters["predict_errors"] += 1
            raise HTTPException(status_code=500, detail=f"inference failed: {exc}")
        latency_ms = (time.monotonic() - t0) * 1000.0
        mask = (objects.label_map > 0).astype(np.uint8)
        monitor = state.monitor
        if monitor is not None:
            edges = monitor.reference["intensity_hist"]["edges"]
            monitor.record(
                {
                    "ts": time.time(),
                    "latency_ms": latency_ms,
                    "count": objects.count,
                    "mean_intensity": float(image.mean()),
                    "intensity_hist": intensity_mass(image, edges),
                }
            )
        return {
            "count": objects.count,
            "mask_rle": encode_rle(mask),
            "mask_shape": list(mask.shape),
            "centroids": [list(c) for c in objects.centroids],
            "model_version": snapshot.version,
            "latency_ms": latency_ms,
        }

    @app.post("/explain")
    def explain_endpoint(req: ExplainRequest):
        snapshot = _require_snapshot()
        image = _decode(req.image)
        state.counters["explains_total"] += 1
        engine = snapshot.grad_cam_engine()
        layer = req.layer
        if layer is not None and layer not in engine.layer_names():
            raise HTTPException(
                status_code=400,
                detail=f"unknown layer {layer!r}; valid layers: {', '.join(engine.layer_names())}",
            )
        with state.cam_lock:  # gradient buffers are per-engine, serialize them
            heatmap = engine.compute(image, target_layer=layer)
        rendered = overlay(image, heatmap)
        buf = io.BytesIO()
        from PIL import Image as PILImage

        PILImage.fromarray(rendered).save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/health")
    def health():
        snapshot = state.current_snapshot()
        return {
            "status": "ok" if snapshot is not None else "degraded",
            "model_version": snapshot.version if snapshot else None,
            "uptime_s": time.monotonic() - state.started,
        }

    @app.get("/metrics", response_class=PlainTextResponse)
    def metrics():
        lines = [f"{key} {value}" for key, value in sorted(state.counters.items())]
        monitor = state.monitor
        if monitor is not None and monitor.last_report is not None:
            rep = monitor.last_report
            lines += [
                f"drift_input_psi {rep.input_psi:.6f}",
                f"drift_count_psi {rep.count_psi:.6f}",
                f"drift_status {rep.status}",
                f"drift_windows {rep.window_id}",
            ]
        snapshot = state.current_snapshot()
        lines.append(f"model_version {snapshot.version if snapshot else 0}")
        return "\n".join(lines) + "\n"

    return app
