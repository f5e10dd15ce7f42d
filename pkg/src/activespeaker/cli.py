"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every subcommand accepts ``--config FILE`` with ``key=value`` lines naming
its options; flags given on the command line win.
"""

from __future__ import annotations

import logging
import os
import re
import sys
import tempfile
from pathlib import Path

import click
import numpy as np

from .adapt import (
    HarvestConfig,
    harvest_samples,
    harvest_to_csv,
    TRAIN_MODES,
    make_train_fn,
    train_specific_models,
)
from .data import SynthConfig, generate_synthetic, load_dataset, read_key_values, save_dataset
from .errors import ActiveSpeakerError, DataError, NumericalError
from .evaluation import (
    SMOOTH_MODES,
    EvalReport,
    export_timeline,
    fscore_curve,
    loocv,
    odd_window,
    per_track_auc,
    score_dataset,
    threshold_at_diagonal,
)
from .latent import LOSS_KINDS, TrainConfig, train_latent
from .model import ModelWeights, dumps_model, format_float, load_model
from .online import OnlineSchedule, run_online

log = logging.getLogger("activespeaker")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
MODEL_FILE = "track_{}.model"
MODEL_RE = re.compile(r"track_(\d+)\.model$")


def _write(path, text: str) -> None:
    """Write via a temporary file so a failed run leaves no partial artifact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_config(ctx, param, value):
    if value is None:
        return None
    kv = read_key_values(value)
    names = {p.name for p in ctx.command.params if p.name != "config"}
    defaults = {}
    for key, v in kv.items():
        name = key.lstrip("-").replace("-", "_")
        if name not in names:
            raise click.BadParameter(f"unknown key {key!r} in config file", ctx=ctx, param=param)
        defaults[name] = v
    ctx.default_map = {**(ctx.default_map or {}), **defaults}
    return value


config_option = click.option(
    "--config", type=click.Path(exists=True, dir_okay=False), is_eager=True, expose_value=False,
    callback=_load_config, help="key=value file of option defaults.")


def _train_options(f):
    f = click.option("--C", "C", type=float, default=1.0, show_default=True, help="Regularization constant.")(f)
    f = click.option("--beta", type=float, default=2.0, show_default=True, help="Soft-max sharpness.")(f)
    f = click.option("--max-iters", type=int, default=500, show_default=True)(f)
    f = click.option("--grad-tol", type=float, default=1e-6, show_default=True)(f)
    f = click.option("--seed", type=int, default=0, show_default=True)(f)
    return f


def _train_cfg(C, beta, max_iters, grad_tol, seed, loss="softmax"):
    return TrainConfig(C=C, beta=beta, max_iters=max_iters, grad_tol=grad_tol, loss_kind=loss, seed=seed)


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
def cli(verbose):
    """Audio-supervised active speaker detection."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Manifest path to write.")
@click.option("--num-speakers", type=int, default=3, show_default=True)
@click.option("--dim", type=int, default=64, show_default=True)
@click.option("--frames", type=int, default=2000, show_default=True)
@click.option("--frame-rate-hz", type=float, default=10.0, show_default=True)
@click.option("--turn-persistence", type=float, default=0.97, show_default=True)
@click.option("--silence-prob", type=float, default=0.2, show_default=True)
@click.option("--speaker-shift", type=float, default=0.5, show_default=True)
@click.option("--noise-sigma", type=float, default=0.5, show_default=True)
@click.option("--vad-error-rate", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--world-seed", type=int, default=0, show_default=True)
@click.option("--first-speaker", type=int, default=0, show_default=True)
@click.option("--normalize/--no-normalize", default=False, show_default=True)
def gen(out, **params):
    """Generate a synthetic meeting dataset."""
    try:
        cfg = SynthConfig(**params)
    except DataError as exc:
        raise click.UsageError(str(exc))
    data = generate_synthetic(cfg)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out)
    click.echo(f"wrote {out} ({len(data)} frames, {len(data.track_ids)} tracks, dim {data.dim})")


def _require_labels(data, path):
    vad = data.packed.vad
    if len(data) == 0:
        raise DataError(f"{path} has no frames")
    if not (np.any(vad == 1) and np.any(vad == -1)):
        raise DataError(f"{path} needs both VAD-positive and VAD-negative frames")


@cli.command("train-generic")
@config_option
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="Dataset manifest.")
@click.option("--loss", type=click.Choice(LOSS_KINDS), default="softmax", show_default=True)
@_train_options
@click.option("--out-model", required=True, type=click.Path(dir_okay=False))
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None,
              help="Trace CSV path [default: <out-model>.trace.csv].")
def train_generic(data, loss, C, beta, max_iters, grad_tol, seed, out_model, trace_path):
    """Train the generic model from frame-level VAD labels."""
    ds = load_dataset(data)
    _require_labels(ds, data)
    cfg = _train_cfg(C, beta, max_iters, grad_tol, seed, loss)
    model, trace = train_latent(ds, cfg)
    trace_path = trace_path or str(out_model) + ".trace.csv"
    _write(out_model, dumps_model(model))
    _write(trace_path, trace.to_csv())
    click.echo(f"{trace.stop_reason} after {len(trace) - 1} iterations; "
               f"objective {trace.objective[-1]:.6g}, grad norm {trace.grad_norm[-1]:.3g}")


@cli.command("train-specific")
@config_option
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--generic-model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--window-seconds", type=float, default=3.0, show_default=True)
@click.option("--no-temporal-weighting", is_flag=True, default=False)
@click.option("--include-vad-negative", is_flag=True, default=False,
              help="Also harvest VAD-negative frames as negatives.")
@_train_options
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def train_specific_cmd(data, generic_model, window_seconds, no_temporal_weighting, include_vad_negative,
                       C, beta, max_iters, grad_tol, seed, out_dir):
    """Harvest samples with the generic model and train one model per track."""
    ds = load_dataset(data)
    w_gen = load_model(generic_model)
    hcfg = HarvestConfig(window_seconds, not no_temporal_weighting, include_vad_negative)
    samples = harvest_samples(w_gen, ds, hcfg)
    models, skipped = train_specific_models(samples, _train_cfg(C, beta, max_iters, grad_tol, seed))
    out = Path(out_dir)
    for track in skipped:
        click.echo(f"warning: track {track} has single-class samples; skipped", err=True)
    for track, model in models.items():
        _write(out / MODEL_FILE.format(track), dumps_model(model))
    _write(out / "harvest.csv", harvest_to_csv(samples))
    click.echo(f"trained {len(models)} speaker models in {out}")


@cli.command()
@config_option
@click.option("--target-data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--generic-model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--budget-seconds", type=float, default=10.0, show_default=True)
@click.option("--batch-frames", type=int, default=None, help="Frames per iteration [default: one second].")
@click.option("--window-seconds", type=float, default=3.0, show_default=True)
@click.option("--no-temporal-weighting", is_flag=True, default=False)
@click.option("--no-balance", is_flag=True, default=False)
@click.option("--warm-start", is_flag=True, default=False)
@_train_options
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def online(target_data, generic_model, budget_seconds, batch_frames, window_seconds, no_temporal_weighting,
           no_balance, warm_start, C, beta, max_iters, grad_tol, seed, out_dir):
    """Adapt the generic model online to the speakers of a new recording."""
    if batch_frames is not None and batch_frames < 1:
        raise click.UsageError("--batch-frames must be positive")
    if budget_seconds <= 0:
        raise click.UsageError("--budget-seconds must be positive")
    ds = load_dataset(target_data)
    w_gen = load_model(generic_model)
    schedule = OnlineSchedule(batch_frames, budget_seconds, not no_balance, warm_start)
    models, curve = run_online(ds, w_gen, schedule, HarvestConfig(window_seconds, not no_temporal_weighting),
                               _train_cfg(C, beta, max_iters, grad_tol, seed))
    out = Path(out_dir)
    for track, model in models.items():
        _write(out / MODEL_FILE.format(track), dumps_model(model))
    _write(out / "curve.csv", curve.to_csv())
    click.echo(f"{len(curve) - 1} iterations; mean AUC {curve[0].mean_auc:.4f} -> {curve[-1].mean_auc:.4f}")


def load_model_dir(path) -> dict[int, ModelWeights]:
    models = {}
    for p in sorted(Path(path).iterdir()):
        m = MODEL_RE.search(p.name)
        if m:
            models[int(m.group(1))] = load_model(p)
    if not models:
        raise DataError(f"no track_<id>.model files in {path}")
    return models


@cli.command("eval")
@config_option
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--model", type=click.Path(exists=True, dir_okay=False), help="One model for every track.")
@click.option("--model-dir", type=click.Path(exists=True, file_okay=False), help="Directory of track_<id>.model.")
@click.option("--prior", type=click.Path(exists=True, dir_okay=False),
              help="Generic model whose scores are added (online models).")
@click.option("--smooth-seconds", type=float, default=3.0, show_default=True,
              help="Largest smoothing window for the F-score curve and timeline.")
@click.option("--smooth-mode", type=click.Choice(SMOOTH_MODES), default="vote", show_default=True,
              help="vote: threshold then majority vote; mean: average scores then threshold.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
def eval_cmd(data, model, model_dir, prior, smooth_seconds, smooth_mode, out):
    """Per-speaker AUC, F-score vs smoothing window, and a timeline CSV."""
    if (model is None) == (model_dir is None):
        raise click.UsageError("give exactly one of --model and --model-dir")
    if smooth_seconds < 0:
        raise click.UsageError("--smooth-seconds must be non-negative")
    ds = load_dataset(data)
    if not ds.has_gt:
        raise DataError(f"{data} carries no ground-truth box labels; eval needs them")
    models = load_model(model) if model else load_model_dir(model_dir)
    series = score_dataset(models, ds, prior=load_model(prior) if prior else None)

    report = EvalReport()
    for t in ds.track_ids:
        s = series.for_track(t)
        g = s.gt
        if not (np.any(g > 0) and np.any(g < 0)):
            click.echo(f"warning: track {t} lacks one ground-truth class; not evaluated", err=True)
            continue
        report.fold_auc[t] = [per_track_auc(s, [t])[t]]
        report.thresholds[t] = threshold_at_diagonal(s)
    if not report.fold_auc:
        raise DataError("no track has both ground-truth classes")
    largest = odd_window(smooth_seconds, ds.frame_rate_hz)
    windows = list(range(1, largest + 1, 2))
    evaluated = series.for_tracks(report.speakers)
    report.fscore_curve = fscore_curve(evaluated, report.thresholds, windows, mode=smooth_mode)

    out = Path(out)
    _write(out / "auc.csv", report.auc_csv())
    _write(out / "summary.csv", report.summary_csv())
    _write(out / "fscore.csv", report.fscore_csv())
    _write(out / "thresholds.csv", "speaker,threshold\n" + "".join(
        f"{t},{format_float(th)}\n" for t, th in sorted(report.thresholds.items())))
    _write(out / "timeline.csv", export_timeline(evaluated, report.thresholds, largest, mode=smooth_mode))
    click.echo(report.table())




@cli.command()
@config_option
@click.option("--data", "folds", required=True, multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="One manifest per recording; repeat for every fold.")
@click.option("--mode", type=click.Choice(TRAIN_MODES), default="generic", show_default=True)
@click.option("--window-seconds", type=float, default=3.0, show_default=True)
@_train_options
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def report(folds, mode, window_seconds, C, beta, max_iters, grad_tol, seed, out_dir):
    """Leave-one-recording-out AUC table."""
    datasets = [load_dataset(p) for p in folds]
    cfg = _train_cfg(C, beta, max_iters, grad_tol, seed)
    rep = loocv(datasets, make_train_fn(mode, window_seconds), cfg)
    out = Path(out_dir)
    _write(out / "auc.csv", rep.auc_csv())
    _write(out / "summary.csv", rep.summary_csv())
    click.echo(rep.table())


def main(argv=None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="activespeaker", standalone_mode=False)
    except click.exceptions.NoArgsIsHelpError as exc:
        click.echo(exc.ctx.get_help() if exc.ctx else str(exc), err=True)
        return EXIT_USAGE
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except NumericalError as exc:
        click.echo(f"error: numerical failure: {exc}", err=True)
        return EXIT_NUMERIC
    except (ActiveSpeakerError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    return rv if isinstance(rv, int) else 0


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
