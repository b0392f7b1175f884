"""Local experiment tracking and model registry.

One JSON document per run under ``<root>/runs/``, a single ``registry.json``,
and a drift flag file written by the monitoring side. Writers hold a store
lock per operation; documents are written to a temp file and renamed so a
crash mid-append leaves either a complete record or nothing.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

from filelock import FileLock

from . import model as model_io

logger = logging.getLogger(__name__)

DEFAULT_PROMOTION_DET_F1 = 0.8


class RunStoreError(RuntimeError):
    pass


class PromotionError(RunStoreError):
    """Promotion refused; the message names the failed criterion."""


@dataclass
class RunRecord:
    run_id: str
    created_at: str  # ISO-8601 UTC
    config: dict  # full TrainConfig snapshot incl. config_hash
    split_hash: str
    seed: int
    status: str = "running"  # running | completed | failed
    epoch_series: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    emissions: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "created_at": self.created_at,
            "config": self.config,
            "split_hash": self.split_hash,
            "seed": self.seed,
            "status": self.status,
            "epoch_series": self.epoch_series,
            "final_metrics": self.final_metrics,
            "emissions": self.emissions,
            "artifacts": self.artifacts,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunRecord":
        return cls(**raw)

    @property
    def loss_kind(self) -> str:
        return self.config.get("loss", {}).get("kind", "")

    @property
    def det_f1(self):
        return self.final_metrics.get("aggregate", {}).get("det_f1")


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def _atomic_write(path: Path, payload: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(json.dumps(payload, indent=2))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunStore:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.runs_dir = self.root / "runs"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.registry_path = self.root / "registry.json"
        self.drift_flag_path = self.root / "drift_flag.json"
        self._lock = FileLock(str(self.root / ".store.lock"))

    # -- run records ---------------------------------------------------

    def _run_path(self, run_id: str) -> Path:
        return self.runs_dir / f"{run_id}.json"

    def append(self, record: RunRecord) -> str:
        with self._lock:
            path = self._run_path(record.run_id)
            if path.exists():
                raise RunStoreError(f"run_id already present: {record.run_id}")
            _atomic_write(path, record.to_dict())
        return record.run_id

    def update(self, record: RunRecord) -> None:
        """Rewrite a run document; only legal while the stored status is 'running'."""
        with self._lock:
            path = self._run_path(record.run_id)
            if not path.exists():
                raise RunStoreError(f"unknown run_id: {record.run_id}")
            current = json.loads(path.read_text())
            if current["status"] in ("completed", "failed"):
                raise RunStoreError(
                    f"run {record.run_id} is {current['status']} and immutable"
                )
            _atomic_write(path, record.to_dict())

    def get(self, run_id: str) -> RunRecord:
        path = self._run_path(run_id)
        if not path.exists():
            raise RunStoreError(f"unknown run_id: {run_id}")
        return RunRecord.from_dict(json.loads(path.read_text()))

    def all_runs(self) -> list[RunRecord]:
        records = []
        for path in self.runs_dir.glob("*.json"):
            try:
                records.append(RunRecord.from_dict(json.loads(path.read_text())))
            except (json.JSONDecodeError, TypeError) as exc:
                logger.warning("skipping unreadable run document %s: %s", path, exc)
        return sorted(records, key=lambda r: (r.created_at, r.run_id))

    def query(self, loss=None, seed=None, status=None, min_det_f1=None) -> list[RunRecord]:
        out = []
        for rec in self.all_runs():
            if loss is not None and rec.loss_kind != loss:
                continue
            if seed is not None and rec.seed != seed:
                continue
            if status is not None and rec.status != status:
                continue
            if min_det_f1 is not None and (rec.det_f1 is None or rec.det_f1 < min_det_f1):
                continue
            out.append(rec)
        return out

    # -- registry ------------------------------------------------------

    def _read_registry(self) -> dict:
        if not self.registry_path.exists():
            return {"versions": []}
        return json.loads(self.registry_path.read_text())

    def registry_entries(self) -> list[dict]:
        return self._read_registry()["versions"]

    def active_entry(self) -> dict | None:
        active = [v for v in self.registry_entries() if v["active"]]
        return active[0] if active else None

    def promote(
        self,
        run_id: str,
        note: str = "",
        det_f1_threshold: float = DEFAULT_PROMOTION_DET_F1,
    ) -> dict:
        """Create a new active registry version from a completed, verified run."""
        record = self.get(run_id)
        if record.status != "completed":
            raise PromotionError(f"run {run_id} is {record.status}, not completed")
        det = record.det_f1
        if det is None or det < det_f1_threshold:
            raise PromotionError(
                f"run {run_id} detection F1 {det} is below promotion threshold {det_f1_threshold}"
            )
        weights = record.artifacts.get("weights", "")
        if not weights or not Path(weights).exists():
            raise PromotionError(f"run {run_id} weight artifact missing: {weights!r}")
        if not model_io.verify_artifact(weights):
            raise PromotionError(f"run {run_id} weight artifact failed hash verification")

        with self._lock:
            registry = self._read_registry()
            version = 1 + max((v["model_version"] for v in registry["versions"]), default=0)
            for v in registry["versions"]:
                v["active"] = False
            entry = {
                "model_version": version,
                "run_id": run_id,
                "promoted_at": utc_now_iso(),
                "promotion_note": note,
                "active": True,
            }
            registry["versions"].append(entry)
            _atomic_write(self.registry_path, registry)
        logger.info("promoted run %s as model version %d", run_id, version)
        return entry

    # -- retraining triggers --------------------------------------------

    def set_drift_flag(self, reason: str) -> None:
        _atomic_write(
            self.drift_flag_path,
            {"drift": True, "reason": reason, "flagged_at": utc_now_iso()},
        )

    def clear_drift_flag(self) -> None:
        if self.drift_flag_path.exists():
            self.drift_flag_path.unlink()

    def drift_flag(self) -> dict | None:
        if not self.drift_flag_path.exists():
            return None
        return json.loads(self.drift_flag_path.read_text())

    def retrain_due(self, periodic_days: float | None = None, now: datetime | None = None):
        """(due, reason): drift flag wins, then run age against the periodic policy."""
        flag = self.drift_flag()
        if flag and flag.get("drift"):
            return True, "drift"
        if periodic_days is not None:
            completed = [r for r in self.all_runs() if r.status == "completed"]
            now = now or datetime.now(timezone.utc)
            if not completed:
                return True, "periodic"
            last = max(datetime.fromisoformat(r.created_at) for r in completed)
            if now - last >= timedelta(days=periodic_days):
                return True, "periodic"
        return False, "none"
