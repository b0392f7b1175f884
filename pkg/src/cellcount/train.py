"""Training protocol: LR range test, warmup + patience early stopping, ablation.

Runs train under a fixed recipe: optional learning-rate range test, Adam,
per-epoch random crop + augmentation, validation loss tracked every epoch.
Early stopping arms only after the warmup head start (100 epochs for
replication runs) and then fires after 50 epochs without improvement;
best-validation weights are restored at the end. The whole call is wrapped
by the energy meter and persisted as a RunRecord.
"""

from __future__ import annotations

import logging
import math
import uuid
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import model as model_io
from .data import AugmentConfig, SplitSpec, augment, make_split, random_crop, select
from .energy import DEFAULT_CARBON_INTENSITY, EnergyMeter, StubProbe, TdpEstimateProbe
from .hashes import digest_json
from .losses import LossConfig
from .metrics import EvalReport, evaluate
from .model import NetworkConfig, predict_logits
from .postproc import PostprocConfig
from .runstore import RunRecord, RunStore, utc_now_iso

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    batch_size: int = 8
    max_epochs: int = 400
    warmup_epochs_before_es: int = 100
    es_patience: int = 50
    es_min_delta: float = 1e-5
    lr: float | str = "auto"  # float or "auto" for the LR range test
    seed: int = 0
    split_fraction: float = 0.75
    deterministic: bool = False
    carbon_intensity: float = DEFAULT_CARBON_INTENSITY
    energy_probe: str = "auto"  # auto | stub | tdp-estimate

    def to_dict(self) -> dict:
        d = {
            "loss": self.loss.to_dict(),
            "network": self.network.to_dict(),
            "augment": self.augment.to_dict(),
            "postproc": self.postproc.to_dict(),
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "warmup_epochs_before_es": self.warmup_epochs_before_es,
            "es_patience": self.es_patience,
            "es_min_delta": self.es_min_delta,
            "lr": self.lr,
            "seed": self.seed,
            "split_fraction": self.split_fraction,
            "deterministic": self.deterministic,
            "carbon_intensity": self.carbon_intensity,
            "energy_probe": self.energy_probe,
        }
        d["config_hash"] = digest_json({k: v for k, v in d.items()})
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        raw.pop("config_hash", None)
        return cls(
            loss=LossConfig.from_dict(raw.pop("loss", {})),
            network=NetworkConfig.from_dict(raw.pop("network", NetworkConfig().to_dict())),
            augment=AugmentConfig.from_dict(raw.pop("augment", {})),
            postproc=PostprocConfig.from_dict(raw.pop("postproc", {})),
            **raw,
        )


class EarlyStopper:
    """Best-loss tracker; the patience window arms only after the warmup epochs.

    A plateau from epoch 1 therefore stops at exactly warmup + patience.
    """

    def __init__(self, warmup: int = 100, patience: int = 50, min_delta: float = 1e-5):
        self.warmup = warmup
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = math.inf
        self.best_epoch = 0
        self._stale = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss <= self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self._stale = 0
            return False
        if epoch > self.warmup:
            self._stale += 1
        return self._stale >= self.patience


def lr_find(
    net,
    batches,
    loss_fn,
    lr_min: float = 1e-7,
    lr_max: float = 10.0,
    steps: int = 100,
    smoothing: float = 0.98,
) -> float:
    """Geometric LR ramp; suggests the LR at the steepest loss descent / 10.

    The ramp aborts once the smoothed loss exceeds 4x the minimum seen. With
    no descending stretch at all (a flat loss curve) the suggestion falls
    back to lr_min * 100 with a warning.
    """
    if not batches:
        raise ValueError("lr_find needs at least one batch")
    saved_state = {k: v.clone() for k, v in net.state_dict().items()}
    opt = torch.optim.Adam(net.parameters(), lr=lr_min)
    ratio = lr_max / lr_min
    lrs, smoothed = [], []
    ema, best = 0.0, math.inf
    net.train()
    for i in range(steps):
        lr = lr_min * ratio ** (i / (steps - 1))
        for group in opt.param_groups:
            group["lr"] = lr
        x, y = batches[i % len(batches)]
        opt.zero_grad()
        probs = torch.sigmoid(net(x))
        loss = loss_fn(probs, y)
        if not torch.isfinite(loss):
            if i == 0:
                raise ValueError(
                    "loss is not finite on the first LR step; check input scaling/normalization"
                )
            break
        loss.backward()
        opt.step()
        ema = smoothing * ema + (1.0 - smoothing) * loss.item()
        corrected = ema / (1.0 - smoothing ** (i + 1))
        lrs.append(lr)
        smoothed.append(corrected)
        best = min(best, corrected)
        if corrected > 4.0 * best:
            break
    net.load_state_dict(saved_state)
    net.eval()

    if len(smoothed) >= 2:
        slopes = np.gradient(np.asarray(smoothed))
        idx = int(np.argmin(slopes))
        if slopes[idx] < 0:
            return float(min(max(lrs[idx] / 10.0, lr_min), lr_max))
    logger.warning("lr_find saw no descending loss; falling back to lr_min * 100")
    return float(min(lr_min * 100.0, lr_max))


def _seed_everything(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _to_batch(samples) -> tuple[torch.Tensor, torch.Tensor]:
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples])
    masks = np.stack([s.mask[None, :, :] for s in samples]).astype(np.float32)
    return torch.from_numpy(images).float(), torch.from_numpy(masks)


def _epoch_batches(samples, cfg: TrainConfig, rng: np.random.Generator):
    """Crop + augment each sample once, shuffled into batches."""
    order = rng.permutation(len(samples))
    prepared = []
    for idx in order:
        s = samples[idx]
        crop = (min(cfg.augment.crop_size[0], s.height), min(cfg.augment.crop_size[1], s.width))
        if crop != (s.height, s.width):
            s = random_crop(s, crop, rng)
        prepared.append(augment(s, cfg.augment, rng))
    for i in range(0, len(prepared), cfg.batch_size):
        yield _to_batch(prepared[i : i + cfg.batch_size])


def _val_loss(net, val_samples, cfg: TrainConfig, loss_fn) -> float:
    net.eval()
    losses, weights = [], []
    with torch.no_grad():
        for i in range(0, len(val_samples), cfg.batch_size):
            x, y = _to_batch(val_samples[i : i + cfg.batch_size])
            probs = torch.sigmoid(net(x))
            losses.append(float(loss_fn(probs, y)))
            weights.append(len(val_samples[i : i + cfg.batch_size]))
    return float(np.average(losses, weights=weights))


def _make_probe(cfg: TrainConfig):
    if cfg.energy_probe == "stub":
        return StubProbe()
    if cfg.energy_probe == "tdp-estimate":
        return TdpEstimateProbe()
    return None  # EnergyMeter picks measured-or-estimate


def intensity_histogram(images, bins: int = 10) -> dict:
    """Pooled 10-bin histogram of pixel intensities over [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.zeros(bins, dtype=np.float64)
    for img in images:
        counts += np.histogram(img, bins=edges)[0]
    mass = counts / counts.sum() if counts.sum() > 0 else counts
    return {"edges": edges.tolist(), "mass": mass.tolist()}


def count_histogram(counts, bins: int = 10) -> dict:
    """Reference histogram of predicted counts; edges fixed from the reference."""
    counts = np.asarray(list(counts), dtype=np.float64)
    upper = max(float(counts.max()) * 2.0, 10.0) if counts.size else 10.0
    edges = np.linspace(0.0, upper, bins + 1)
    hist = np.histogram(counts, bins=edges)[0].astype(np.float64)
    mass = hist / hist.sum() if hist.sum() > 0 else hist
    return {"edges": edges.tolist(), "mass": mass.tolist()}


def train(
    samples,
    cfg: TrainConfig,
    store: RunStore | None = None,
    artifacts_dir=None,
    sinks=(),
    split: SplitSpec | None = None,
    run_id: str | None = None,
) -> RunRecord:
    """One training run; returns the persisted RunRecord."""
    from pathlib import Path

    _seed_everything(cfg.seed, cfg.deterministic)
    split = split or make_split(samples, cfg.split_fraction, cfg.seed)
    train_samples = select(samples, split.train_ids)
    val_samples = select(samples, split.val_ids)

    run_id = run_id or f"{cfg.loss.kind}-s{cfg.seed}-{uuid.uuid4().hex[:8]}"
    record = RunRecord(
        run_id=run_id,
        created_at=utc_now_iso(),
        config=cfg.to_dict(),
        split_hash=split.split_hash,
        seed=cfg.seed,
        status="running",
    )
    if store is not None:
        store.append(record)

    artifacts_dir = Path(artifacts_dir) if artifacts_dir else (
        store.root / "artifacts" / run_id if store is not None else None
    )

    meter_ = EnergyMeter(
        probe=_make_probe(cfg),
        carbon_intensity=cfg.carbon_intensity,
        sample_period_s=1.0,
    )
    try:
        with meter_:
            _fit(record, cfg, train_samples, val_samples, sinks, artifacts_dir)
    except Exception as exc:
        record.status = "failed"
        record.error = str(exc)
        logger.exception("run %s failed", run_id)
    record.emissions = meter_.report.to_dict() if meter_.report else {}
    if store is not None:
        store.update(record)
    if record.status == "failed" and store is None:
        raise RuntimeError(f"training run failed: {record.error}")
    return record


def _fit(record, cfg, train_samples, val_samples, sinks, artifacts_dir):
    net = model_io.build(cfg.network, seed=cfg.seed)
    loss_fn = cfg.loss.build()
    data_rng = np.random.default_rng(cfg.seed)

    lr = cfg.lr
    if lr == "auto":
        probe_batches = [b for b in _epoch_batches(train_samples, cfg, np.random.default_rng(cfg.seed))]
        lr = lr_find(net, probe_batches, loss_fn)
        logger.info("lr range test suggests %.3g", lr)
    lr = float(lr)

    opt = torch.optim.Adam(net.parameters(), lr=lr)
    stopper = EarlyStopper(cfg.warmup_epochs_before_es, cfg.es_patience, cfg.es_min_delta)
    best_state = {k: v.clone() for k, v in net.state_dict().items()}

    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        train_losses = []
        for x, y in _epoch_batches(train_samples, cfg, data_rng):
            opt.zero_grad()
            probs = torch.sigmoid(net(x))
            loss = loss_fn(probs, y)
            loss.backward()
            opt.step()
            train_losses.append(loss.item())
        val_loss = _val_loss(net, val_samples, cfg, loss_fn)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(train_losses)),
            "val_loss": val_loss,
            "lr": lr,
        }
        record.epoch_series.append(entry)
        for sink in sinks:
            sink(entry)
        if math.isnan(val_loss):
            raise RuntimeError(f"validation loss diverged (NaN) at epoch {epoch}")
        stop = stopper.step(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
        if stop:
            logger.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    net.load_state_dict(best_state)
    net.eval()

    eval_report = evaluate(
        lambda img: predict_logits(net, img),
        val_samples,
        postproc_cfg=cfg.postproc,
    )
    record.final_metrics = {
        "aggregate": eval_report.aggregate,
        "best_epoch": stopper.best_epoch,
        "best_val_loss": None if math.isinf(stopper.best_loss) else stopper.best_loss,
        "stopped_epoch": record.epoch_series[-1]["epoch"] if record.epoch_series else 0,
    }

    if artifacts_dir is not None:
        from pathlib import Path

        artifacts_dir = Path(artifacts_dir)
        artifacts_dir.mkdir(parents=True, exist_ok=True)
        weights_path = artifacts_dir / "weights.pt"
        reference = {
            "intensity_hist": intensity_histogram([s.image for s in train_samples]),
            "count_hist": count_histogram(
                r["pred_count"] for r in eval_report.per_image if "pred_count" in r
            ),
        }
        sidecar = model_io.save(
            net,
            weights_path,
            training_run_id=record.run_id,
            extra={"postproc": cfg.postproc.to_dict(), "reference_histograms": reference},
        )
        report_path = artifacts_dir / "report.json"
        eval_report.save(report_path)
        record.artifacts = {
            "weights": str(weights_path),
            "weights_hash": sidecar["weights_hash"],
            "report": str(report_path),
        }
    record.status = "completed"


def ablation(
    samples,
    seeds,
    losses,
    base_cfg: TrainConfig,
    store: RunStore,
    sinks=(),
) -> tuple[list[RunRecord], list[dict]]:
    """Cross product of losses x seeds with identical other hyperparameters.

    The same seed list is reused for every loss (paired design). Returns the
    records plus per-loss summary rows (mean and std of every aggregate
    metric); failed runs are flagged and excluded from aggregation with a
    warning.
    """
    records = []
    for loss_kind in losses:
        for seed in seeds:
            cfg = replace(base_cfg, loss=replace(base_cfg.loss, kind=loss_kind), seed=seed)
            records.append(train(samples, cfg, store=store, sinks=sinks))
    summary = summarize_ablation(records)
    return records, summary


def summarize_ablation(records) -> list[dict]:
    rows = []
    for loss_kind in sorted({r.loss_kind for r in records}):
        group = [r for r in records if r.loss_kind == loss_kind]
        ok = [r for r in group if r.status == "completed"]
        failed = [r.run_id for r in group if r.status != "completed"]
        if failed:
            logger.warning("ablation summary for %s excludes failed runs: %s", loss_kind, failed)
        row = {"loss": loss_kind, "n_runs": len(group), "n_failed": len(failed)}
        metric_keys = ("seg_f1", "det_f1", "mpe_signed", "mape")
        for key in metric_keys:
            values = [
                r.final_metrics["aggregate"][key]
                for r in ok
                if r.final_metrics.get("aggregate", {}).get(key) is not None
            ]
            row[f"{key}_mean"] = float(np.mean(values)) if values else None
            row[f"{key}_std"] = float(np.std(values)) if values else None
        co2 = [r.emissions.get("co2_kg") for r in ok if r.emissions.get("co2_kg") is not None]
        row["co2_kg_mean"] = float(np.mean(co2)) if co2 else None
        rows.append(row)
    return rows
