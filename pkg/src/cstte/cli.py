"""Command-line pipeline: synth -> preprocess -> pretrain -> embed -> eval.

Each command writes into its own run directory: the resolved config, a log,
metric and figure files, and any model artifacts, so the directory alone is
enough to audit or replay the run. Exit codes: 0 ok, 2 config error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from cstte import __version__
from cstte import downstream as ds
from cstte import pretrain
from cstte import report
from cstte import synthgen
from cstte import trajdata as td
from cstte.config import RunConfig
from cstte.errors import ConfigError, CstteError, DataError, NumericError
from cstte.gradcheck import full_suite
from cstte.numcore import set_deterministic
from cstte.trajdata import GridSpec

log = logging.getLogger("cstte")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CHECKPOINT_NAME = "model.ckpt"
CONFIG_COPY_NAME = "config.toml"
LOG_NAME = "run.log"


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def common_options(fn):
    fn = click.option(
        "--run-name", default=None, help="run directory name (default <command>-seed<seed>)"
    )(fn)
    fn = click.option(
        "--deterministic/--no-deterministic",
        "deterministic",
        default=None,
        help="bit-stable numeric paths (single-threaded); overrides the config",
    )(fn)
    fn = click.option("--threads", type=int, default=None, help="worker cap, overrides config")(fn)
    fn = click.option(
        "--output-dir", type=click.Path(), default=None, help="output root, overrides config"
    )(fn)
    fn = click.option("--seed", type=int, default=None, help="seed, overrides config")(fn)
    fn = click.option(
        "--config",
        "config_path",
        type=click.Path(),
        default=None,
        help="TOML run config (defaults apply when omitted)",
    )(fn)
    return fn


def load_config(config_path, seed, output_dir, threads, deterministic) -> RunConfig:
    config = RunConfig.from_toml(config_path) if config_path else RunConfig()
    if seed is not None:
        config.seed = seed
    if output_dir is not None:
        config.output_dir = output_dir
    if threads is not None:
        if threads < 1:
            raise ConfigError(f"threads must be >= 1, got {threads}")
        config.threads = threads
    if deterministic is not None:
        config.deterministic = deterministic
    return config


def _attach_run_log(path: Path) -> None:
    root = logging.getLogger("cstte")
    root.setLevel(logging.INFO)
    for handler in list(root.handlers):
        if isinstance(handler, logging.FileHandler):
            root.removeHandler(handler)
            handler.close()
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)


def start_run(config: RunConfig, command: str, run_name) -> Path:
    run_dir = config.resolved_output_root() / (run_name or f"{command}-seed{config.seed}")
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / CONFIG_COPY_NAME)
    _attach_run_log(run_dir / LOG_NAME)
    set_deterministic(config.deterministic)
    log.info("%s: seed=%d deterministic=%s -> %s", command, config.seed, config.deterministic, run_dir)
    return run_dir


def _worker_threads(config: RunConfig) -> int:
    return 1 if config.deterministic else config.threads


def _check_finite(what: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {what}")


def _require(value, message: str) -> str:
    if not value:
        raise ConfigError(message)
    return value


def _check_vocabulary(trajs, encoder_config) -> None:
    # raw CSVs must already use the checkpoint's location vocabulary; the
    # canonical route for fresh data is preprocess -> embed --processed
    if not encoder_config.use_location:
        return
    n_locations = encoder_config.n_locations
    for traj in trajs:
        lo, hi = int(traj.loc.min()), int(traj.loc.max())
        if lo < 0 or hi >= n_locations:
            bad = lo if lo < 0 else hi
            raise DataError(
                f"trajectory {traj.traj_id!r}: location index {bad} outside the "
                f"checkpoint vocabulary [0, {n_locations}); preprocess the data "
                "with the same grid first"
            )


def _load_checkpoint(path) -> pretrain.Checkpoint:
    path = Path(_require(path, "this command needs --checkpoint"))
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return pretrain.load_checkpoint(path)


def _read_processed(config: RunConfig) -> td.ProcessedDataset:
    path = _require(
        config.processed, "this command needs a processed dataset (config `processed` or --processed)"
    )
    return td.read_processed(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


@click.group()
@click.version_option(__version__, prog_name="cstte")
def cli():
    """Trajectory-embedding pipeline: data, pretraining, and evaluation."""


@cli.command()
@common_options
def synth(config_path, seed, output_dir, threads, deterministic, run_name):
    """Generate the synthetic hub-travel benchmark dataset."""
    config = load_config(config_path, seed, output_dir, threads, deterministic)
    run_dir = start_run(config, "synth", run_name)
    trajs, truth = synthgen.generate(config.synth_config())
    data_path = run_dir / "synthetic.csv"
    synthgen.write_dataset_csv(data_path, trajs)
    synthgen.write_ground_truth_csv(run_dir / "ground_truth.csv", truth)
    report.dataset_overview_figure(trajs, run_dir / "overview.png", title="synthetic trajectories")
    report.write_metrics_kv(
        run_dir / "dataset.kv",
        {
            "n_trajectories": len(trajs),
            "n_records": sum(t.n for t in trajs),
            "n_hubs": len(truth.hubs_lonlat),
            "seed": config.seed,
        },
    )
    log.info("synth: %d trajectories -> %s", len(trajs), data_path)
    click.echo(f"wrote {data_path}")


@cli.command()
@common_options
@click.option("--dataset", "dataset_path", type=click.Path(), default=None, help="raw CSV, overrides config")
def preprocess(config_path, seed, output_dir, threads, deterministic, run_name, dataset_path):
    """Resample, grid-index, split, and persist a raw trajectory CSV."""
    config = load_config(config_path, seed, output_dir, threads, deterministic)
    if dataset_path is not None:
        config.dataset = dataset_path
    _require(config.dataset, "preprocess needs a raw dataset (config `dataset` or --dataset)")
    run_dir = start_run(config, "preprocess", run_name)

    parsed = td.parse_trajectories(config.dataset)
    resampled, dropped_short = td.resample_and_filter(
        parsed.trajectories,
        config.trajdata["interval_seconds"],
        int(config.trajdata["min_length"]),
    )
    if not resampled:
        raise DataError("no trajectories left after resampling and the length filter")
    lons = np.concatenate([t.lon for t in resampled])
    lats = np.concatenate([t.lat for t in resampled])
    grid = GridSpec(
        min_lon=float(lons.min()),
        min_lat=float(lats.min()),
        max_lon=float(lons.max()),
        max_lat=float(lats.max()),
        cell_size_meters=config.trajdata["cell_size_meters"],
    )
    gridded = td.assign_grid_index(resampled, grid)
    split = td.chronological_split(gridded, config.split_ratios())
    normalization, _ = td.normalize_features(split.train)
    dataset = td.ProcessedDataset(
        split=split,
        grid=grid,
        normalization=normalization,
        n_locations=grid.n_cells,
        meta={"source": str(config.dataset)},
    )
    out_path = run_dir / "processed.csv"
    td.write_processed(out_path, dataset)
    report.dataset_overview_figure(
        split.test, run_dir / "overview.png", title="processed test split"
    )
    report.write_metrics_kv(
        run_dir / "dataset.kv",
        {
            "rows_total": parsed.rows_total,
            "rows_malformed": parsed.rows_malformed,
            "dropped_short": parsed.groups_dropped_short + dropped_short,
            "n_train": len(split.train),
            "n_val": len(split.val),
            "n_test": len(split.test),
            "n_locations": dataset.n_locations,
        },
    )
    log.info(
        "preprocess: %d/%d/%d train/val/test over %d grid cells -> %s",
        len(split.train), len(split.val), len(split.test), dataset.n_locations, out_path,
    )
    click.echo(f"wrote {out_path}")


@cli.command("pretrain")
@common_options
@click.option("--processed", "processed_path", type=click.Path(), default=None, help="processed dataset, overrides config")
def pretrain_cmd(config_path, seed, output_dir, threads, deterministic, run_name, processed_path):
    """Contrastive pretraining; writes the best-epoch checkpoint."""
    config = load_config(config_path, seed, output_dir, threads, deterministic)
    if processed_path is not None:
        config.processed = processed_path
    dataset = _read_processed(config)
    run_dir = start_run(config, "pretrain", run_name)

    encoder_config = config.encoder_config(dataset.n_locations)
    train_config = config.train_config()
    normalization = dataset.normalization
    train_trajs = [normalization.apply(t) for t in dataset.split.train]
    val_trajs = [normalization.apply(t) for t in dataset.split.val]

    t_start = time.perf_counter()

    def on_epoch(stats: pretrain.EpochStats) -> None:
        if not (np.isfinite(stats.train_loss) and np.isfinite(stats.val_loss)):
            raise NumericError(f"non-finite loss at epoch {stats.epoch}")
        log.info("epoch %d: train %.6f val %.6f (%.2fs)", stats.epoch, stats.train_loss, stats.val_loss, stats.seconds)

    ckpt, history = pretrain.train(
        train_trajs, val_trajs, encoder_config, train_config, normalization, on_epoch=on_epoch
    )
    wall = time.perf_counter() - t_start

    ckpt_path = run_dir / CHECKPOINT_NAME
    pretrain.save_checkpoint(ckpt_path, ckpt)
    with open(run_dir / "training_log.csv", "w") as fh:
        fh.write(pretrain.TRAIN_LOG_HEADER + "\n")
        for stats in history:
            fh.write(stats.log_line() + "\n")
    report.loss_curve_figure(history, run_dir / "loss_curve.png")
    (run_dir / "training_report.txt").write_text(
        report.format_training_report(history, ckpt.epoch, ckpt.val_loss, wall)
    )
    report.write_metrics_kv(
        run_dir / "training.kv",
        {"epochs_run": len(history), "best_epoch": ckpt.epoch, "best_val_loss": ckpt.val_loss},
    )
    log.info("pretrain: best epoch %d (val %.6f) -> %s", ckpt.epoch, ckpt.val_loss, ckpt_path)
    click.echo(f"wrote {ckpt_path}")


@cli.command()
@common_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--processed", "processed_path", type=click.Path(), default=None, help="embed every split of this processed dataset")
@click.option("--dataset", "dataset_path", type=click.Path(), default=None, help="embed a raw CSV as-is (no resampling)")
def embed(config_path, seed, output_dir, threads, deterministic, run_name, checkpoint_path, processed_path, dataset_path):
    """Embed trajectories with a pretrained checkpoint."""
    config = load_config(config_path, seed, output_dir, threads, deterministic)
    if (processed_path is None) == (dataset_path is None):
        raise ConfigError("embed needs exactly one of --processed or --dataset")
    ckpt = _load_checkpoint(checkpoint_path)
    run_dir = start_run(config, "embed", run_name)

    if processed_path is not None:
        trajs = td.read_processed(processed_path).split.all()
    else:
        trajs = td.parse_trajectories(dataset_path).trajectories
        _check_vocabulary(trajs, ckpt.encoder_config)
    if not trajs:
        raise DataError("nothing to embed")
    embeddings = pretrain.embed_dataset(ckpt, trajs)
    matrix = np.stack(list(embeddings.values()))
    _check_finite("embeddings", matrix)
    csv_path = run_dir / "embeddings.csv"
    pretrain.write_embeddings_csv(csv_path, embeddings)
    pretrain.write_embeddings_container(run_dir / "embeddings.bin", embeddings)
    report.write_metrics_kv(
        run_dir / "dataset.kv",
        {"n_embeddings": len(embeddings), "dim": matrix.shape[1]},
    )
    log.info("embed: %d trajectories, width %d -> %s", len(embeddings), matrix.shape[1], csv_path)
    click.echo(f"wrote {csv_path}")


@cli.command("eval-search")
@common_options
@click.option("--method", type=click.Choice(["encoder", "mean", "dtw"]), default="encoder")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None)
@click.option("--processed", "processed_path", type=click.Path(), default=None, help="processed dataset, overrides config")
def eval_search(config_path, seed, output_dir, threads, deterministic, run_name, method, checkpoint_path, processed_path):
    """Similar-trajectory search on the test split (odd/even halves)."""
    config = load_config(config_path, seed, output_dir, threads, deterministic)
    if processed_path is not None:
        config.processed = processed_path
    dataset = _read_processed(config)
    run_dir = start_run(config, f"eval-search-{method}", run_name)

    sets = ds.build_search_sets(dataset.split.test)
    t_start = time.perf_counter()
    if method == "encoder":
        ckpt = _load_checkpoint(checkpoint_path)
        result = ds.search_eval(ds.checkpoint_embedder(ckpt), sets)
    elif method == "mean":
        baseline = ds.MeanBaseline(
            config.encoder_config(dataset.n_locations), dataset.normalization, seed=config.seed
        )
        result = ds.search_eval(baseline.embed, sets)
    else:
        result = ds.dtw_search_eval(sets, n_threads=_worker_threads(config))
    wall = time.perf_counter() - t_start

    kv = report.metrics_to_kv(
        result.metrics,
        extra={"task": "search", "method": method, "n_queries": len(result.query_ids)},
    )
    report.write_metrics_kv(run_dir / "metrics.kv", kv)
    text = report.format_eval_report(
        "similar-trajectory search", method, result.metrics, len(result.query_ids), wall
    )
    (run_dir / "report.txt").write_text(text)
    report.rank_histogram_figure(result, run_dir / "rank_histogram.png")
    report.metric_bars_figure(
        {method: result.metrics}, run_dir / "metric_bars.png", title="similar-trajectory search"
    )
    log.info("eval-search[%s]: acc@1 %.4f over %d queries", method, result.metrics.acc_at[1], len(result.query_ids))
    click.echo(text, nl=False)


@cli.command("eval-dest")
@common_options
@click.option("--method", type=click.Choice(["encoder", "mean", "markov"]), default="encoder")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None)
@click.option("--processed", "processed_path", type=click.Path(), default=None, help="processed dataset, overrides config")
def eval_dest(config_path, seed, output_dir, threads, deterministic, run_name, method, checkpoint_path, processed_path):
    """Destination prediction on the test split (last record held out)."""
    config = load_config(config_path, seed, output_dir, threads, deterministic)
    if processed_path is not None:
        config.processed = processed_path
    dataset = _read_processed(config)
    run_dir = start_run(config, f"eval-dest-{method}", run_name)

    n_locations = dataset.n_locations
    head_config = config.head_config()
    test_trunc, test_labels = ds.destination_dataset(dataset.split.test)

    t_start = time.perf_counter()
    if method == "markov":
        chain = ds.MarkovChain(n_locations).fit(dataset.split.train)
        metrics = ds.markov_destination_eval(chain, dataset.split.test)
        n_eval = len(test_labels)
    else:
        train_trunc, train_labels = ds.destination_dataset(dataset.split.train)
        val_trunc, val_labels = ds.destination_dataset(dataset.split.val)
        if method == "encoder":
            ckpt = _load_checkpoint(checkpoint_path)
            if head_config.fine_tune:
                tuned, head = ds.fine_tune_destination(
                    ckpt, train_trunc, train_labels, val_trunc, val_labels,
                    n_locations, head_config, seed=config.seed,
                )
                encoder_arrays = {k: v for k, v in tuned.items() if not k.startswith("head.")}
                tuned_ckpt = replace(ckpt, params=encoder_arrays)
                test_emb = ds.embedding_matrix(ds.checkpoint_embedder(tuned_ckpt), test_trunc)
            else:
                embed_fn = ds.checkpoint_embedder(ckpt)
                train_emb = ds.embedding_matrix(embed_fn, train_trunc)
                val_emb = ds.embedding_matrix(embed_fn, val_trunc)
                test_emb = ds.embedding_matrix(embed_fn, test_trunc)
                head = ds.train_destination_head(
                    train_emb, train_labels, val_emb, val_labels,
                    n_locations, head_config, seed=config.seed,
                )
            logits = head.predict_logits(test_emb)
        else:  # mean
            baseline = ds.MeanBaseline(
                config.encoder_config(n_locations), dataset.normalization, seed=config.seed
            )
            model = ds.train_mean_destination(
                baseline,
                baseline.feature_matrix(train_trunc), train_labels,
                baseline.feature_matrix(val_trunc), val_labels,
                n_locations, head_config, seed=config.seed,
            )
            logits = model.predict_logits(baseline.feature_matrix(test_trunc))
        _check_finite("destination logits", logits)
        metrics = ds.destination_eval(logits, test_labels)
        n_eval = logits.shape[0]
    wall = time.perf_counter() - t_start

    majority = ds.majority_class_rate(test_labels)
    kv = report.metrics_to_kv(
        metrics,
        extra={
            "task": "destination",
            "method": method,
            "n_queries": n_eval,
            "majority_rate": majority,
        },
    )
    report.write_metrics_kv(run_dir / "metrics.kv", kv)
    text = report.format_eval_report(
        "destination prediction", method, metrics, n_eval, wall,
        notes=[f"majority_rate: {majority:.4f}"],
    )
    (run_dir / "report.txt").write_text(text)
    report.metric_bars_figure(
        {method: metrics}, run_dir / "metric_bars.png", title="destination prediction"
    )
    log.info("eval-dest[%s]: acc@1 %.4f over %d queries", method, metrics.acc_at[1], n_eval)
    click.echo(text, nl=False)


@cli.command("gradcheck")
@click.option("--seed", type=int, default=13, help="seed for the random instances")
@click.option("--step", type=float, default=1e-5, help="finite-difference step")
def gradcheck_cmd(seed, step):
    """Finite-difference check of every operator and the composed model."""
    results = full_suite(seed=seed, step=step)
    width = max(len(r.name) for r in results)
    for r in results:
        verdict = "ok" if r.passed else "FAIL"
        click.echo(f"{r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}  tol={r.tolerance:.0e}  {verdict}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        click.echo("FAIL")
        raise NumericError(f"gradient check failed: {', '.join(failed)}")
    click.echo("PASS")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except NumericError as exc:
        click.echo(f"numeric error: {exc}", err=True)
        return EXIT_NUMERIC
    except CstteError as exc:  # shape and other numeric-contract failures
        click.echo(f"numeric error: {exc}", err=True)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
