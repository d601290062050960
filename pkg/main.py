import functools
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click

from unshuffle.config import (
    ConfigError,
    DataSection,
    ExperimentConfig,
    configure_logging,
    load_config,
    load_settings,
    write_echo,
)
from unshuffle.datagen import gen_spurious, token_groups_splits
from unshuffle.dataset import Dataset, read_dataset, write_dataset
from unshuffle.evaluation import accuracy, compare_methods, ensemble_accuracy, sweep
from unshuffle.model import MERGED, HeadSelector, load_params, save_params
from unshuffle.optimizer import Objective, TrainingDivergedError, train
from unshuffle.partitioning import (
    INDEX_STRATEGIES,
    EnvironmentPartition,
    build_environments,
    group_rand_index,
    index_partition,
    partition_summary,
)

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def print_json(data: Any) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def _write_json(data: Any, path: Path) -> Path:
    with path.open("w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def handle_errors(func):
    """Map configuration problems to exit code 2 and everything else to 1."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except ConfigError as e:
            click.echo(f"Error: {e}", err=True)
            raise SystemExit(EXIT_USAGE)
        except TrainingDivergedError as e:
            click.echo(f"Error: training diverged: {e}", err=True)
            raise SystemExit(EXIT_RUNTIME)
        except Exception as e:
            click.echo(f"Error: {e}", err=True)
            raise SystemExit(EXIT_RUNTIME)

    return wrapper


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path is not a directory: {path}")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _finish(
    out: Path, config: Optional[ExperimentConfig], command: str, files: Dict[str, Any], **details: Any
) -> None:
    if config is not None:
        write_echo(config, out)
    _write_json({"command": command, "files": files, **details}, out / "manifest.json")


# ---------------------------------------------------------------------------
# Data resolution
# ---------------------------------------------------------------------------

def generate(data: DataSection) -> Tuple[List[Dataset], Dataset, Dataset]:
    """Training datasets, validation set and OOD test set from the configured generator."""
    if data.generator == "spurious":
        return gen_spurious(data.spurious, data.seed)
    if data.generator == "token_groups":
        return token_groups_splits(data.token_groups, data.seed, data.n_val, data.n_test)
    raise ConfigError("data.generator is not set")


def _read_manifest(directory: Path) -> Dict[str, Any]:
    with (directory / "manifest.json").open(encoding="utf-8") as f:
        manifest = json.load(f)
    files = manifest.get("files", {})
    if "train" not in files:
        raise ConfigError(f"{directory}/manifest.json lists no training files")
    return files


def _datasets_from_dir(directory: Path, num_classes: Optional[int]):
    files = _read_manifest(directory)
    datasets = [read_dataset(directory / name, num_classes) for name in files["train"]]
    val = read_dataset(directory / files["val"], num_classes) if files.get("val") else None
    test = read_dataset(directory / files["test"], num_classes) if files.get("test") else None
    return datasets, val, test


def _holdout(datasets: List[Dataset], n_holdout: int, seed: int) -> Tuple[List[Dataset], Dataset]:
    kept, held = [], []
    share, extra = divmod(n_holdout, len(datasets))
    for k, ds in enumerate(datasets):
        remaining, val = ds.split(share + (1 if k < extra else 0), seed + k)
        kept.append(remaining)
        held.append(val)
    return kept, Dataset.concat(held)


def load_data(config: ExperimentConfig) -> Tuple[List[Dataset], Dataset, Optional[Dataset]]:
    data = config.data
    if data.dir is not None:
        datasets, val, test = _datasets_from_dir(Path(data.dir), data.num_classes)
    elif data.train:
        datasets = [read_dataset(p, data.num_classes) for p in data.train]
        val, test = None, None
    elif data.generator is not None:
        datasets, val, test = generate(data)
    else:
        raise ConfigError("data needs a generator, a gen output dir or training files")
    if data.val is not None:
        val = read_dataset(data.val, data.num_classes)
    if data.test is not None:
        test = read_dataset(data.test, data.num_classes)
    if data.sample_fraction is not None:
        datasets = [ds.sample_fraction(data.sample_fraction, data.seed + k) for k, ds in enumerate(datasets)]
    if val is None:
        if data.holdout < 1:
            raise ConfigError("no validation set: set data.val or data.holdout")
        datasets, val = _holdout(datasets, data.holdout, data.seed)
    return datasets, val, test


def _load_input(path: Path, num_classes: Optional[int]) -> List[Dataset]:
    if path.is_dir():
        return _datasets_from_dir(path, num_classes)[0]
    return [read_dataset(path, num_classes)]


def _index_partition(config: ExperimentConfig, datasets: List[Dataset]) -> Tuple[Dataset, EnvironmentPartition]:
    part = config.partition
    if part.strategy not in INDEX_STRATEGIES:
        raise ConfigError(f"partition.strategy {part.strategy!r} does not produce an index partition")
    return index_partition(
        part.strategy,
        datasets,
        E=part.E,
        seed=part.seed,
        K=part.K,
        key=part.key,
        min_count=part.min_count,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@click.group()
@click.option("--log-level", default=None, help="Overrides UNSHUFFLE_LOG_LEVEL")
@click.pass_context
def cli(ctx, log_level):
    """Multi-environment training with head-variance regularization"""
    try:
        settings = load_settings()
    except ConfigError as e:
        click.echo(f"Error: {e}", err=True)
        raise SystemExit(EXIT_USAGE)
    configure_logging((log_level or settings.log_level).upper())
    ctx.obj = settings


def _config_options(func):
    func = click.option("--force", is_flag=True, help="Overwrite a non-empty output directory")(func)
    func = click.option("--out", "out", default=None, type=click.Path(), help="Output directory")(func)
    func = click.option("--config", "config_path", required=True, type=click.Path(), help="Experiment config JSON")(func)
    return func


@cli.command()
@_config_options
@handle_errors
def gen(config_path, out, force):
    """Generate a synthetic benchmark"""
    config = load_config(config_path)
    out = _prepare_out(Path(out or config.output.dir), force)
    datasets, val, test = generate(config.data)

    names = [f"train_env{e}.jsonl" for e in range(len(datasets))] if len(datasets) > 1 else ["train.jsonl"]
    for name, ds in zip(names, datasets):
        write_dataset(ds, out / name)
    write_dataset(val, out / "val.jsonl")
    write_dataset(test, out / "test.jsonl")
    _finish(
        out,
        config,
        "gen",
        {
            "generator": config.data.generator,
            "seed": config.data.seed,
            "train": names,
            "val": "val.jsonl",
            "test": "test.jsonl",
            "sizes": {"train": [len(ds) for ds in datasets], "val": len(val), "test": len(test)},
        },
    )
    click.echo(f"Wrote {len(names)} training file(s) to {out}")


@cli.command()
@_config_options
@click.option("--in", "in_path", required=True, type=click.Path(exists=True), help="JSONL dataset or gen directory")
@handle_errors
def partition(config_path, out, force, in_path):
    """Partition a training set into environments"""
    config = load_config(config_path)
    datasets = _load_input(Path(in_path), config.data.num_classes)
    pooled, part = _index_partition(config, datasets)
    out = _prepare_out(Path(out or config.output.dir), force)

    part.save(out / "partition.json")
    summary = partition_summary(part, pooled)
    summary.to_csv(out / "summary.csv", index=False)
    rand = group_rand_index(part, pooled)
    _finish(out, config, "partition", {"partition": "partition.json", "summary": "summary.csv"}, rand_index=rand)
    click.echo(summary.to_string(index=False))
    if rand is not None:
        click.echo(f"rand_index={rand:.4f}")


def _resolve_envs(config: ExperimentConfig, datasets: List[Dataset]) -> List[Dataset]:
    part = config.partition
    if part.file is not None:
        try:
            stored = EnvironmentPartition.load(part.file)
        except FileNotFoundError:
            raise ConfigError(f"partition.file: file not found: {part.file}")
        envs = build_environments(part.strategy, datasets, partition=stored)
    else:
        envs = build_environments(
            part.strategy,
            datasets,
            E=part.E,
            seed=part.seed,
            K=part.K,
            key=part.key,
            min_count=part.min_count,
        )
    if config.train.objective is Objective.ERM and len(envs) > 1:
        envs = [Dataset.concat(envs)]
    return envs


@cli.command(name="train")
@_config_options
@handle_errors
def train_cmd(config_path, out, force):
    """Train one model"""
    config = load_config(config_path)
    out = _prepare_out(Path(out or config.output.dir), force)
    datasets, val, test = load_data(config)
    envs = _resolve_envs(config, datasets)

    params, report = train(config.train, envs, val, test)
    save_params(params, out / "model.json")
    _write_json(report.to_dict(), out / "report.json")
    report.trace_frame().to_csv(out / "trace.csv", index=False)
    _finish(out, config, "train", {"model": "model.json", "report": "report.json", "trace": "trace.csv"})

    ood = "n/a" if report.best_ood_acc is None else f"{report.best_ood_acc:.2f}"
    click.echo(f"val_acc={report.best_val_acc:.2f} ood_acc={ood} best_epoch={report.best_epoch}")


def _parse_head(head: str) -> HeadSelector:
    if head == MERGED:
        return MERGED
    try:
        index = int(head)
    except ValueError:
        index = -1
    if index < 0:
        raise click.BadParameter(f"expected 'merged' or an environment index, got {head!r}", param_hint="--head")
    return index


@cli.command(name="eval")
@click.option("--model", "models", multiple=True, required=True, type=click.Path(exists=True), help="Model JSON (repeatable)")
@click.option("--data", "data_paths", multiple=True, required=True, type=click.Path(exists=True), help="JSONL dataset (repeatable)")
@click.option("--ensemble", is_flag=True, help="Average the models' predictions")
@click.option("--head", default=MERGED, help="Head to evaluate: 'merged' or an environment index")
@click.option("--num-classes", type=int, default=None)
@click.option("--out", default=None, type=click.Path(), help="Write the metrics JSON here as well")
@handle_errors
def eval_cmd(models, data_paths, ensemble, head, num_classes, out):
    """Evaluate models on datasets"""
    selector = _parse_head(head)
    loaded = [load_params(p) for p in models]
    if isinstance(selector, int) and any(selector >= params.num_envs for params in loaded):
        raise click.BadParameter(f"head {selector} is out of range for the given models", param_hint="--head")
    results = []
    for path in data_paths:
        dataset = read_dataset(path, num_classes)
        if ensemble:
            results.append({"model": "ensemble", "dataset": path, "accuracy": ensemble_accuracy(loaded, selector, dataset)})
            continue
        for model_path, params in zip(models, loaded):
            results.append({"model": model_path, "dataset": path, "accuracy": accuracy(params, selector, dataset)})
    metrics = {"ensemble": ensemble, "head": head, "models": list(models), "results": results}
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        _write_json(metrics, Path(out))
    print_json(metrics)


@cli.command(name="sweep")
@_config_options
@click.pass_obj
@handle_errors
def sweep_cmd(settings, config_path, out, force):
    """Sweep lambda, E or K"""
    config = load_config(config_path)
    spec = config.sweep.spec(config.train, config.partition.spec())
    out = _prepare_out(Path(out or config.output.dir), force)
    datasets, val, test = load_data(config)
    report = sweep(spec, datasets, val, test, out_csv=out / "sweep.csv", workers=settings.threads)
    report.save(out / "report.json")
    _finish(out, config, "sweep", {"table": "sweep.csv", "report": "report.json"})
    click.echo(report.to_frame().to_string(index=False))


@cli.command()
@_config_options
@click.pass_obj
@handle_errors
def compare(settings, config_path, out, force):
    """Compare the method with its baselines and ablations"""
    config = load_config(config_path)
    out = _prepare_out(Path(out or config.output.dir), force)
    datasets, val, test = load_data(config)
    report = compare_methods(
        config.train,
        config.partition.spec(),
        datasets,
        val,
        test,
        repeats=config.eval.repeats,
        ensemble_size=config.eval.ensemble_size,
        irm_lambda=config.eval.irm_lambda,
        workers=settings.threads,
    )
    report.to_frame().to_csv(out / "comparison.csv", index=False)
    report.save(out / "comparison.json")
    _finish(out, config, "compare", {"table": "comparison.csv", "report": "comparison.json"})
    click.echo(report.to_frame().to_string(index=False))


if __name__ == "__main__":
    cli()
