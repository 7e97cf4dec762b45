import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
from loguru import logger
from pydantic import ValidationError

from carspeed.config import MODEL_NAMES, RunConfig, field_help, load_run_config, settings
from carspeed.errors import CarSpeedError
from carspeed.utils import setup_logging


def _int_list(ctx, param, value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{value}'")


def _name_list(ctx, param, value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    names = [x.strip() for x in value.split(",") if x.strip()]
    unknown = [n for n in names if n not in MODEL_NAMES]
    if unknown:
        raise click.BadParameter(f"unknown models {unknown}; choose from {', '.join(MODEL_NAMES)}")
    return names


OPTIONS = {
    "config": click.option("--config", type=click.Path(dir_okay=False), default=None,
                           help="JSON run config [default: carspeed/configs/config.json]"),
    "log_level": click.option("--log-level", default=None,
                              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
                              help=f"Log level [default: {settings.LOG_LEVEL}]"),
    "precision": click.option("--precision", default=None, type=click.Choice(["narrow", "wide"]),
                              help=field_help("precision")),
    "data": click.option("--data", default=None, help=field_help("data_dir")),
    "out": click.option("--out", default=None, help="Output file or directory [default: derived from the subcommand]"),
    "model": click.option("--model", default=None, type=click.Choice(MODEL_NAMES), help=field_help("model")),
    "window": click.option("--window", type=int, default=None, help=field_help("window_size", "samples")),
    "seed": click.option("--seed", type=int, default=None, help=field_help("seed")),
    "epochs": click.option("--epochs", type=int, default=None, help=field_help("max_epochs", section="train")),
    "batch_size": click.option("--batch-size", type=int, default=None, help=field_help("batch_size", section="train")),
    "lr": click.option("--lr", type=float, default=None, help=field_help("initial_lr", section="train")),
    "decay_steps": click.option("--decay-steps", type=int, default=None,
                                help=field_help("decay_steps", "steps", section="train")),
    "decay_rate": click.option("--decay-rate", type=float, default=None, help=field_help("decay_rate", section="train")),
    "patience": click.option("--patience", type=int, default=None,
                             help=field_help("early_stop_patience", "epochs", section="train")),
    "cutoff_hz": click.option("--cutoff-hz", type=float, default=None, help=field_help("cutoff_hz", "Hz")),
    "gdop_max": click.option("--gdop-max", type=float, default=None, help=field_help("gdop_max")),
    "sizes": click.option("--sizes", default=None, callback=_int_list, help=field_help("sizes", "samples")),
    "models": click.option("--models", default=None, callback=_name_list, help=field_help("models")),
    "hours": click.option("--hours", type=float, default=None, help=field_help("hours", "h")),
    "weights": click.option("--weights", type=click.Path(dir_okay=False), required=True,
                            help="Weights file written by train"),
    "session": click.option("--session", default=None, help="Session id inside --data [default: every session]"),
    "speed_limit": click.option("--speed-limit", type=float, default=None,
                                help="Report sustained predictions above this speed [m/s]"),
}

COMMON = ("config", "log_level", "precision")
PIPELINE = ("data", "cutoff_hz", "gdop_max", "seed")
TRAINING = ("model", "window", "epochs", "batch_size", "lr", "decay_steps", "decay_rate", "patience")


def with_options(*names):
    def decorate(f):
        for name in reversed(COMMON + names):
            f = OPTIONS[name](f)
        return f

    return decorate


def resolve(opts: Dict[str, Any]) -> RunConfig:
    """Set up logging, merge the config file with flags (flags win) and log the result."""
    setup_logging(opts.get("log_level") or settings.LOG_LEVEL)
    overrides = {
        "data_dir": opts.get("data"),
        "out": opts.get("out"),
        "model": opts.get("model"),
        "window_size": opts.get("window"),
        "seed": opts.get("seed"),
        "precision": opts.get("precision"),
        "cutoff_hz": opts.get("cutoff_hz"),
        "gdop_max": opts.get("gdop_max"),
        "sizes": opts.get("sizes"),
        "models": opts.get("models"),
        "hours": opts.get("hours"),
        "train": {
            "max_epochs": opts.get("epochs"),
            "batch_size": opts.get("batch_size"),
            "initial_lr": opts.get("lr"),
            "decay_steps": opts.get("decay_steps"),
            "decay_rate": opts.get("decay_rate"),
            "early_stop_patience": opts.get("patience"),
        },
    }
    try:
        cfg = load_run_config(opts.get("config"), overrides)
    except (ValidationError, json.JSONDecodeError) as e:
        raise click.UsageError(f"invalid configuration:\n{e}")
    logger.info("Resolved config: {}", cfg.model_dump_json())
    logger.info("Seeds: data={} train={}", cfg.seed, cfg.train.seed)
    return cfg


def _echo_csv(frame):
    click.echo(frame.to_csv(index=False, lineterminator="\n"), nl=False)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Accelerometer-only car speed estimation: synthesize, preprocess, train, evaluate."""


@cli.command()
@with_options("hours", "seed", "out")
def synth(**opts):
    """Generate a synthetic drive corpus (session file pairs) in --out."""
    from carspeed.synthetic import synth_corpus

    cfg = resolve(opts)
    summary = synth_corpus(cfg.hours, cfg.seed, cfg.out or cfg.data_dir)
    click.echo(f"{len(summary.session_ids)} sessions, {summary.hours:.2f} h, {summary.stationary_fraction:.1%} stationary")


@cli.command()
@with_options(*PIPELINE, "window", "out")
def preprocess(**opts):
    """Window every session in --data and cache the result as a compressed .npz."""
    from carspeed.data_utils import WindowedDataset, build_datasets

    cfg = resolve(opts)
    datasets = build_datasets(cfg.data_dir, cfg, cfg.window_size)
    merged = WindowedDataset.concat(list(datasets.values()), cfg.window_size)
    out = cfg.out or f"windows_w{cfg.window_size}.npz"
    merged.save_npz(out)
    click.echo(f"{len(merged)} windows from {len(datasets)} sessions -> {out}")


@cli.command()
@with_options(*PIPELINE, *TRAINING, "out")
def train(**opts):
    """Train one architecture and write its weights file to --out."""
    from carspeed.evaluate import evaluate_model
    from carspeed.train import train_from_config
    from carspeed.utils import save_weights

    cfg = resolve(opts)
    out = Path(cfg.out or f"{cfg.model}_w{cfg.window_size}.csnw")
    out.parent.mkdir(parents=True, exist_ok=True)
    setup_logging(opts.get("log_level") or settings.LOG_LEVEL, out.parent / "train.log")
    run = train_from_config(cfg)
    save_weights(run.model, out)
    run.history.to_csv(out.with_suffix(".history.csv"))
    report, _ = evaluate_model(run.model, run.test, latency_reps=cfg.latency_reps)
    click.echo(
        f"{cfg.model} w={cfg.window_size}: {len(run.history.epochs)} epochs ({run.history.stop_reason}), "
        f"test rmse {report.rmse:.4f} m/s, mae {report.mae:.4f} m/s -> {out}"
    )


@cli.command(name="eval")
@with_options(*PIPELINE, "weights", "out")
def evaluate(**opts):
    """Evaluate a weights file on the held-out test sessions of --data."""
    import pandas as pd

    from carspeed.evaluate import evaluate_model, speed_band_report
    from carspeed.train import prepare_splits
    from carspeed.utils import load_weights

    cfg = resolve(opts)
    model = load_weights(opts["weights"])
    _, _, test = prepare_splits(cfg, model.window_size)
    report, pred = evaluate_model(model, test, latency_reps=cfg.latency_reps)
    row = pd.DataFrame([report.to_row()])
    if cfg.out:
        row.to_csv(cfg.out, index=False, lineterminator="\n")
    _echo_csv(row)
    _echo_csv(speed_band_report(test.labels, pred))


@cli.command()
@with_options(*PIPELINE, *TRAINING, "sizes", "out")
def sweep(**opts):
    """Train and evaluate one model per window size; Table-shaped CSV on stdout or --out."""
    from carspeed.evaluate import sweep_windows

    cfg = resolve(opts)
    trace_dir = Path(cfg.out).parent / "traces" if cfg.out else None
    _echo_csv(sweep_windows(cfg, out=cfg.out, trace_dir=trace_dir))


@cli.command()
@with_options(*PIPELINE, *TRAINING, "models", "out")
def compare(**opts):
    """Train and evaluate several architectures on one split (default window 20)."""
    from carspeed.evaluate import COMPARE_WINDOW, compare_models

    cfg = resolve(opts)
    window = opts.get("window") or COMPARE_WINDOW
    _echo_csv(compare_models(cfg, window_size=window, out=cfg.out))


def _session_datasets(cfg: RunConfig, session: Optional[str], window_size: int):
    from carspeed.data_utils import WindowedDataset, build_session_dataset, list_sessions

    ids = [session] if session else list_sessions(cfg.data_dir)
    parts = [build_session_dataset(cfg.data_dir, sid, cfg, window_size, skip_rejected=False) for sid in ids]
    return WindowedDataset.concat(parts, window_size)


@cli.command()
@with_options("data", "cutoff_hz", "gdop_max", "weights", "session")
def infer(**opts):
    """Run the pipeline and the model on a session; trace CSV on stdout."""
    from carspeed.evaluate import emit_trace
    from carspeed.utils import load_weights

    cfg = resolve(opts)
    model = load_weights(opts["weights"])
    _echo_csv(emit_trace(model, _session_datasets(cfg, opts.get("session"), model.window_size)))


@cli.command()
@with_options("data", "cutoff_hz", "gdop_max", "weights", "session", "out", "speed_limit")
def trace(**opts):
    """Write a t,gt_speed,pred_speed trace; optionally report over-speed intervals."""
    from carspeed.evaluate import detect_overspeed, emit_trace, stationary_mean
    from carspeed.utils import load_weights

    cfg = resolve(opts)
    model = load_weights(opts["weights"])
    dataset = _session_datasets(cfg, opts.get("session"), model.window_size)
    out = cfg.out or f"trace_{model.name}_w{model.window_size}.csv"
    frame = emit_trace(model, dataset, out)
    click.echo(f"{len(frame)} rows -> {out}; mean prediction at standstill {stationary_mean(frame):.3f} m/s")
    if opts.get("speed_limit") is not None:
        for event in detect_overspeed(frame, opts["speed_limit"]):
            click.echo(f"over {opts['speed_limit']:g} m/s from t={event.start:g} to t={event.end:g} s (peak {event.peak_mps:.2f})")


def run(argv: Optional[List[str]] = None) -> int:
    """Invoke the CLI and return its exit code: 2 for usage errors, 1 for operational failures."""
    try:
        rv = cli.main(args=argv, prog_name="carspeed", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        return 1
    except (CarSpeedError, OSError) as e:
        logger.error("{}", e)
        return 1
    return rv if isinstance(rv, int) else 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
