"""Command-line entry point orchestrating the whole lifecycle."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import config as config_mod
from . import figures
from .data import load_dataset, make_split

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)


class Ctx:
    def __init__(self, config: dict):
        self.config = config
        self.hash = config_mod.config_hash(config)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), default=None, help="TOML config file.")
@click.option("--set", "overrides", multiple=True, metavar="KEY.PATH=VALUE", help="Dotted-path override; wins over the file.")
@click.pass_context
def main(ctx, config_path, overrides):
    """Cell counting pipeline: data, training, evaluation, serving."""
    try:
        resolved = config_mod.load_config(config_path, overrides)
    except Exception as exc:
        raise click.ClickException(f"bad configuration: {exc}")
    ctx.obj = Ctx(resolved)
    click.echo(f"config_hash: {ctx.obj.hash}")


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--n", default=20, show_default=True, type=int)
@click.option("--seed", default=None, type=int, help="Overrides synth.seed from config.")
@click.option("--non-overlapping/--overlapping", default=None)
@click.pass_obj
def synth(obj, out_dir, n, seed, non_overlapping):
    """Generate a synthetic dataset with exact ground truth."""
    from .synth import SynthConfig, write_dataset

    section = dict(obj.config["synth"])
    if seed is not None:
        section["seed"] = seed
    if non_overlapping is not None:
        section["non_overlapping"] = non_overlapping
    cfg = SynthConfig(
        image_size=tuple(section["image_size"]),
        cell_count_mean=section["cell_count_mean"],
        radius_range=tuple(section["radius_range"]),
        intensity_range=tuple(section["intensity_range"]),
        background_noise_sigma=section["background_noise_sigma"],
        non_overlapping=section["non_overlapping"],
        seed=section["seed"],
    )
    try:
        write_dataset(cfg, n, out_dir)
    except Exception as exc:
        _fail(str(exc))
    click.echo(f"wrote {n} samples to {out_dir}")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--fraction", default=0.75, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_file", required=True, type=click.Path(path_type=Path))
def split(data_dir, fraction, seed, out_file):
    """Write a deterministic train/validation split file."""
    try:
        samples = load_dataset(data_dir)
        spec = make_split(samples, fraction, seed)
        spec.save(out_file)
    except Exception as exc:
        _fail(str(exc))
    click.echo(f"split_hash: {spec.split_hash} ({len(spec.train_ids)} train / {len(spec.val_ids)} val)")


def _train_cfg_from(obj, **updates):
    from .train import TrainConfig

    section = json.loads(json.dumps(obj.config["train"]))
    for key, value in updates.items():
        if value is not None:
            if key in ("loss_kind",):
                section["loss"]["kind"] = value
            else:
                section[key] = value
    return TrainConfig.from_dict(section)


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--store", "store_dir", required=True, type=click.Path(path_type=Path))
@click.option("--loss", "loss_kind", type=click.Choice(["dice", "focal"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--lr", default=None, help='Learning rate or "auto".')
@click.option("--epochs", "max_epochs", type=int, default=None)
@click.pass_obj
def train(obj, data_dir, store_dir, loss_kind, seed, lr, max_epochs):
    """Run one training run and persist its RunRecord."""
    from .runstore import RunStore
    from .train import train as run_train

    lr_value = lr
    if lr is not None and lr != "auto":
        lr_value = float(lr)
    cfg = _train_cfg_from(obj, loss_kind=loss_kind, seed=seed, lr=lr_value, max_epochs=max_epochs)
    try:
        samples = load_dataset(data_dir)
        store = RunStore(store_dir)
        record = run_train(samples, cfg, store=store)
    except Exception as exc:
        _fail(str(exc))
    if record.status != "completed":
        _fail(f"run {record.run_id} {record.status}: {record.error}")
    _write_run_outputs(record, store_dir)
    agg = record.final_metrics["aggregate"]
    click.echo(
        f"run {record.run_id}: det_f1={agg['det_f1']:.3f} seg_f1={agg['seg_f1']:.3f} "
        f"mape={agg['mape']:.1f}%"
    )


def _write_run_outputs(record, store_dir):
    import pandas as pd

    run_dir = Path(store_dir) / "artifacts" / record.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    if record.epoch_series:
        pd.DataFrame(record.epoch_series).to_csv(run_dir / "epochs.csv", index=False)
        figures.loss_curves(record.epoch_series, run_dir / "loss_curve.png", title=record.run_id)


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--store", "store_dir", required=True, type=click.Path(path_type=Path))
@click.option("--seeds", default="1,2,3", show_default=True)
@click.option("--losses", default="dice,focal", show_default=True)
@click.option("--jobs", default=1, show_default=True, type=int, help="Parallel child runs.")
@click.pass_obj
def ablate(obj, data_dir, store_dir, seeds, losses, jobs):
    """Loss-function ablation: the losses x seeds cross product."""
    import pandas as pd

    from .runstore import RunStore
    from .train import ablation, summarize_ablation

    seed_list = [int(s) for s in seeds.split(",") if s]
    loss_list = [s.strip() for s in losses.split(",") if s.strip()]
    cfg = _train_cfg_from(obj)
    try:
        samples = load_dataset(data_dir)
        store = RunStore(store_dir)
        if jobs > 1:
            records = _parallel_ablation(data_dir, store_dir, cfg, seed_list, loss_list, jobs)
            summary = summarize_ablation(records)
        else:
            records, summary = ablation(samples, seed_list, loss_list, cfg, store)
    except Exception as exc:
        _fail(str(exc))
    for record in records:
        _write_run_outputs(record, store_dir)
    out_dir = Path(store_dir)
    df = pd.DataFrame(summary)
    df.to_csv(out_dir / "ablation_summary.csv", index=False)
    figures.ablation_summary(summary, out_dir / "ablation_summary.png")
    click.echo(df.to_string(index=False))


def _parallel_ablation(data_dir, store_dir, cfg, seed_list, loss_list, jobs):
    from concurrent.futures import ProcessPoolExecutor

    from .runstore import RunStore

    tasks = [(str(data_dir), str(store_dir), cfg.to_dict(), loss, seed) for loss in loss_list for seed in seed_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        run_ids = list(pool.map(_ablation_worker, tasks))
    store = RunStore(store_dir)
    return [store.get(run_id) for run_id in run_ids]


def _ablation_worker(task):
    from dataclasses import replace

    from .runstore import RunStore
    from .train import TrainConfig, train as run_train

    data_dir, store_dir, cfg_dict, loss_kind, seed = task
    cfg = TrainConfig.from_dict(cfg_dict)
    cfg = replace(cfg, loss=replace(cfg.loss, kind=loss_kind), seed=seed)
    samples = load_dataset(data_dir)
    record = run_train(samples, cfg, store=RunStore(store_dir))
    return record.run_id


@main.command()
@click.option("--weights", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_file", required=True, type=click.Path(path_type=Path))
@click.option("--csv/--no-csv", "write_csv", default=True, show_default=True)
@click.pass_obj
def evaluate(obj, weights, data_dir, out_file, write_csv):
    """Three-tier evaluation of a weight artifact against a labeled dataset."""
    import pandas as pd

    from . import model as model_io
    from .metrics import evaluate as run_eval
    from .postproc import PostprocConfig

    try:
        net, sidecar = model_io.load(weights)
        samples = load_dataset(data_dir)
        report = run_eval(
            lambda img: model_io.predict_logits(net, img),
            samples,
            postproc_cfg=PostprocConfig.from_dict(sidecar.get("postproc", {})),
        )
        out_file = Path(out_file)
        out_file.parent.mkdir(parents=True, exist_ok=True)
        report.save(out_file)
        if write_csv:
            pd.DataFrame(report.per_image).to_csv(out_file.with_suffix(".csv"), index=False)
        figures.eval_scatter(report.per_image, out_file.with_name(out_file.stem + "_scatter.png"))
    except Exception as exc:
        _fail(str(exc))
    agg = report.aggregate
    click.echo(json.dumps(agg, indent=2))


@main.command()
@click.option("--weights", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--image", "image_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--layer", default=None)
@click.option("--out", "out_file", required=True, type=click.Path(path_type=Path))
@click.option("--alpha", default=0.4, show_default=True, type=float)
def explain(weights, image_path, layer, out_file, alpha):
    """Write a Grad-CAM heatmap overlay for one image."""
    from . import model as model_io
    from .data import load_image
    from .explain import GradCam, overlay, save_png

    try:
        net, _ = model_io.load(weights)
        image = load_image(image_path)
        engine = GradCam(net)
        heatmap = engine.compute(image, target_layer=layer)
        rendered = overlay(image, heatmap, alpha=alpha)
        Path(out_file).parent.mkdir(parents=True, exist_ok=True)
        save_png(rendered, out_file)
    except Exception as exc:
        _fail(str(exc))
    click.echo(f"wrote {out_file} (layer {heatmap.target_layer})")


@main.command("emissions-report")
@click.option("--runs", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_file", default=None, type=click.Path(path_type=Path))
def emissions_report(store_dir, out_file):
    """Aggregate per-loss energy and CO2 across completed runs."""
    from .energy import EmissionsReport, compare
    from .runstore import RunStore

    try:
        store = RunStore(store_dir)
        labeled = [
            (rec.loss_kind, EmissionsReport.from_dict(rec.emissions))
            for rec in store.query(status="completed")
            if rec.emissions
        ]
        df = compare(labeled)
        if out_file is not None:
            out_file = Path(out_file)
            out_file.parent.mkdir(parents=True, exist_ok=True)
            df.to_csv(out_file, index=False)
            if len(df):
                figures.emissions_bars(df, out_file.with_suffix(".png"))
    except Exception as exc:
        _fail(str(exc))
    click.echo(df.to_string(index=False) if len(df) else "no completed runs with emissions")


@main.group()
def registry():
    """Inspect and change the model registry."""


@registry.command("list")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
def registry_list(store_dir):
    from .runstore import RunStore

    entries = RunStore(store_dir).registry_entries()
    if not entries:
        click.echo("registry empty")
        return
    for e in entries:
        marker = "*" if e["active"] else " "
        click.echo(f"{marker} v{e['model_version']} run={e['run_id']} promoted={e['promoted_at']}")


@registry.command("active")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
def registry_active(store_dir):
    from .runstore import RunStore

    entry = RunStore(store_dir).active_entry()
    click.echo(json.dumps(entry) if entry else "no active version")


@registry.command("promote")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--run-id", required=True)
@click.option("--note", default="")
@click.option("--threshold", default=None, type=float, help="Detection-F1 promotion gate.")
@click.pass_obj
def registry_promote(obj, store_dir, run_id, note, threshold):
    from .runstore import RunStore

    gate = threshold if threshold is not None else obj.config["registry"]["promotion_det_f1"]
    try:
        entry = RunStore(store_dir).promote(run_id, note=note, det_f1_threshold=gate)
    except Exception as exc:
        _fail(str(exc))
    click.echo(f"promoted {run_id} as v{entry['model_version']}")


@main.command()
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--port", default=None, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.pass_obj
def serve(obj, store_dir, port, host):
    """Serve /predict, /explain, /health, and /metrics over HTTP."""
    import uvicorn

    from .service import create_app

    section = obj.config["service"]
    app = create_app(
        store_dir,
        window_size=section["window_size"],
        request_log=Path(store_dir) / "requests.jsonl",
    )
    uvicorn.run(app, host=host, port=port or section["port"])


if __name__ == "__main__":
    main()
