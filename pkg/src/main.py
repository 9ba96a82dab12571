#!/usr/bin/env python3
"""
VisionGuard command line: train the classifier, generate attacks, calibrate
and run the detector, reproduce the AUC tables and benchmark.
"""

import csv
import functools
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
from rich.panel import Panel
from rich.table import Table

from . import __version__
from . import classifier as clf
from .attacks import AttackRecord, generate_adversarial_set
from .config import RunConfig
from .dataset_io import (
    Dataset, load_archive, load_checkpoint, load_mnist_split, save_archive, save_checkpoint, split_dataset,
    subset, synthetic_dataset,
)
from .detector import (
    DetectorConfig, detection_lines, encode_tau, load_threshold, save_threshold, score_batch, transform_score_stats,
    vg_detect, write_detection_report,
)
from .errors import ConfigError, FormatError, IntegrityError, VisionGuardError
from .evaluation import (
    ResultRow, benchmark, build_labels, calibrate_noise_sigma, choose_threshold, evaluate_detector,
    evaluate_kde, group_records, latency_scaling, noise_robustness_eval, roc_curve, write_results_csv,
    write_roc_csv,
)
from .image_codec import RandomPool, apply_transform, format_transform, parse_transform, read_pnm, write_pnm
from .kde_baseline import kde_fit, load_kde, save_kde, select_bandwidth
from .logging_setup import configure_logging, console, err_console

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INTEGRITY = 4
EXIT_ERROR = 5

CHECKPOINT_NAME = "model.vgm"
ARCHIVE_NAME = "archive"
KDE_NAME = "kde.bin"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, IntegrityError):
        return EXIT_INTEGRITY
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    return EXIT_ERROR


def handle_errors(fn):
    """Map VisionGuard and I/O failures onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (VisionGuardError, OSError) as e:
            err_console.print(f"[red]Error: {e}[/red]", highlight=False)
            sys.exit(exit_code_for(e))

    return wrapper


def _require(path: Optional[str], what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing {what}")
    if not Path(path).exists():
        raise ConfigError(f"{what} {path} does not exist")
    return Path(path)


def _load_dataset(cfg: RunConfig, dataset: str, split: str, limit: Optional[int]) -> Dataset:
    """``synthetic`` or a directory with the MNIST IDX files; the first ``limit`` images are kept."""
    if dataset == "synthetic":
        opts = cfg.synthetic_options()
        data = synthetic_dataset(opts.n_per_class, opts.num_classes, opts.shape, opts.separation,
                                 seed=cfg.seed + (0 if split == "train" else 1), noise=opts.noise)
        data = Dataset(data.images, data.labels, data.num_classes, name=f"{data.name}-{split}")
    else:
        data = load_mnist_split(_require(dataset, "dataset directory"), split)
    limit = limit if limit is not None else cfg.eval_options().limit
    if limit is not None and limit < len(data):
        data = subset(data, np.arange(limit))
    return data


def _load_model(path: Optional[str]) -> clf.Mlp:
    model, _ = load_checkpoint(_require(path, "checkpoint"))
    return model


def _load_archives(paths: Sequence[str], model: clf.Mlp, clean: Dataset) -> List[AttackRecord]:
    if not paths:
        raise ConfigError("at least one --archive is required")
    records: List[AttackRecord] = []
    for path in paths:
        archive = load_archive(_require(path, "archive"), expected_checksum=clf.checksum(model))
        if archive.dataset_name != clean.name or archive.dataset_size != len(clean):
            raise IntegrityError(
                f"{path} was generated on {archive.dataset_name} ({archive.dataset_size} images), "
                f"not {clean.name} ({len(clean)} images)"
            )
        records.extend(archive.records)
    return records


def _prepare_out(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(f"Failed to create output directory {out}: {e}") from e
    cfg.save_snapshot(out)
    return out


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise IOError(f"Failed to write {path}: {e}") from e
    return path


def _write_json(path: Path, payload: Dict) -> Path:
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IOError(f"Failed to write {path}: {e}") from e
    return path


def _result_table(rows: Sequence[ResultRow]) -> Table:
    table = Table(title="Detection AUC")
    for column in ("attack", "param", "transform", "AUC", "tau", "TPR", "FPR", "ms/img"):
        table.add_column(column, justify="left" if column in ("attack", "transform") else "right")
    for r in rows:
        table.add_row(r.attack, f"{r.parameter:g}", r.transform, f"{r.auc:.4f}", f"{r.tau:.4g}",
                      f"{r.tpr:.3f}", f"{r.fpr:.3f}", f"{r.mean_ms:.3f}")
    return table


@click.group(invoke_without_command=True)
@click.option('--config', '-c', 'config_path', type=click.Path(dir_okay=False), help='JSON run configuration')
@click.option('--config-show', is_flag=True, help='Print the resolved configuration and exit')
@click.option('--seed', type=int, help='Global seed (overrides the config file)')
@click.option('--out', '-o', 'out_dir', type=click.Path(file_okay=False), help='Output directory')
@click.option('--verbose', '-v', is_flag=True, help='Enable debug logging')
@click.version_option(__version__, prog_name="visionguard")
@click.pass_context
@handle_errors
def main(ctx: click.Context, config_path: Optional[str], config_show: bool, seed: Optional[int],
         out_dir: Optional[str], verbose: bool):
    """VisionGuard: flag adversarial images by comparing softmax outputs before and after lossy compression."""
    configure_logging(verbose)
    cfg = RunConfig(config_path)
    cfg.set("seed", seed)
    cfg.set("out_dir", out_dir)
    ctx.obj = cfg
    if config_show:
        console.print(Panel(json.dumps(cfg.validate().resolved(), indent=2, sort_keys=True),
                            title="Configuration"))
        ctx.exit(EXIT_OK)
    if ctx.invoked_subcommand is None:
        console.print(ctx.get_help())


dataset_option = click.option('--dataset', '-d', default="synthetic", show_default=True,
                              help='MNIST IDX directory or "synthetic"')
limit_option = click.option('--limit', type=int, help='Use only the first N images')
model_option = click.option('--model', '-m', 'model_path', help='Checkpoint written by "train"')


def split_option(default: str):
    return click.option('--split', type=click.Choice(["train", "test"]), default=default, show_default=True)


@main.command()
@dataset_option
@limit_option
@click.option('--epochs', type=int, help='Override train.epochs')
@click.pass_obj
@handle_errors
def train(cfg: RunConfig, dataset: str, limit: Optional[int], epochs: Optional[int]):
    """Train the MLP classifier and write a checkpoint."""
    cfg.set("train.epochs", epochs)
    cfg.validate()
    train_set = _load_dataset(cfg, dataset, "train", limit)
    test_set = _load_dataset(cfg, dataset, "test", limit)
    out = _prepare_out(cfg)
    result = clf.train(train_set, cfg.train_config(), heldout=test_set)
    test_accuracy = clf.accuracy(result.model, test_set)
    path = save_checkpoint(result.model, out / CHECKPOINT_NAME, {
        "dataset": train_set.name,
        "test_accuracy": test_accuracy,
        "epochs": len(result.history),
    })
    _write_csv(out / "train_metrics.csv", ["epoch", "loss", "train_accuracy", "heldout_accuracy"], [
        [m.epoch, f"{m.loss:.6f}", f"{m.train_accuracy:.6f}",
         "" if m.heldout_accuracy is None else f"{m.heldout_accuracy:.6f}"]
        for m in result.history
    ])
    console.print(f"[green]Checkpoint written to {path}[/green] (test accuracy {test_accuracy:.4f})")


@main.command()
@model_option
@dataset_option
@split_option("test")
@limit_option
@click.option('--attack', '-a', 'attacks', multiple=True, help='Attack kind (repeatable); replaces the config list')
@click.option('--epsilon', type=float, help='Epsilon for every attack')
@click.option('--kde', 'kde_path', help='KDE store, needed by cw_whitebox_kde')
@click.pass_obj
@handle_errors
def attack(cfg: RunConfig, model_path: Optional[str], dataset: str, split: str, limit: Optional[int],
           attacks: Tuple[str, ...], epsilon: Optional[float], kde_path: Optional[str]):
    """Generate adversarial images and archive them with a runtime summary."""
    cfg.override_attacks(attacks, epsilon)
    cfg.validate()
    model = _load_model(model_path)
    configs = cfg.attack_configs()
    store = load_kde(_require(kde_path, "KDE store"), clf.checksum(model)) if kde_path else None
    if store is None and any(c.kind == "cw_whitebox_kde" for c in configs):
        raise ConfigError("cw_whitebox_kde needs --kde")
    clean = _load_dataset(cfg, dataset, split, limit)
    out = _prepare_out(cfg)
    result = generate_adversarial_set(model, clean, configs, kde=store)
    summaries = [s.as_dict() for s in result.summaries]
    save_archive(out / ARCHIVE_NAME, result.records, clf.checksum(model), clean.name, len(clean), summaries)
    _write_csv(out / "attack_summary.csv",
               ["attack", "parameter", "count", "success_rate", "mean_seconds", "median_seconds", "failures"],
               [[s.attack, f"{s.parameter:g}", s.count, f"{s.success_rate:.6f}", f"{s.mean_seconds:.6g}",
                 f"{s.median_seconds:.6g}", s.failures] for s in result.summaries])
    table = Table(title="Attack runtime")
    for column in ("attack", "param", "images", "success", "s/img", "failures"):
        table.add_column(column, justify="left" if column == "attack" else "right")
    for s in result.summaries:
        table.add_row(s.attack, f"{s.parameter:g}", str(s.count), f"{s.success_rate:.3f}",
                      f"{s.mean_seconds:.5f}", str(s.failures))
    console.print(table)


@main.command()
@model_option
@dataset_option
@split_option("train")
@limit_option
@click.option('--bandwidth', type=float, help='Kernel bandwidth; selected on held-out data when omitted')
@click.pass_obj
@handle_errors
def kde(cfg: RunConfig, model_path: Optional[str], dataset: str, split: str, limit: Optional[int],
        bandwidth: Optional[float]):
    """Fit and store the KDE baseline on training embeddings."""
    options = cfg.validate().eval_options()
    model = _load_model(model_path)
    data = _load_dataset(cfg, dataset, split, limit)
    if bandwidth is None:
        validation, fit_part = split_dataset(data, options.kde_validation_fraction, cfg.seed)
        bandwidth = select_bandwidth(model, fit_part, validation, options.kde_bandwidths)
    out = _prepare_out(cfg)
    store = kde_fit(model, data, bandwidth)
    path = save_kde(store, out / KDE_NAME)
    console.print(f"[green]KDE store written to {path}[/green] "
                  f"(bandwidth {bandwidth:g}, {store.payload_bytes} bytes of embeddings)")


@main.command()
@model_option
@dataset_option
@split_option("test")
@limit_option
@click.option('--archive', 'archives', multiple=True, help='Archive written by "attack" (repeatable)')
@click.option('--transform', '-t', help='e.g. jpeg:92, median:3, pool:jpeg75,jpeg92')
@click.pass_obj
@handle_errors
def calibrate(cfg: RunConfig, model_path: Optional[str], dataset: str, split: str, limit: Optional[int],
              archives: Tuple[str, ...], transform: Optional[str]):
    """Pick tau as the ROC point closest to (0, 1) and write the ROC points."""
    cfg.set("detector.transform", transform)
    detector = cfg.validate().detector_config()
    model = _load_model(model_path)
    clean = _load_dataset(cfg, dataset, split, limit)
    records = _load_archives(archives, model, clean)
    out = _prepare_out(cfg)
    labeled = build_labels(model, clean, records)
    seed = cfg.seed if isinstance(detector.transform, RandomPool) else None
    labeled = labeled.with_scores(
        score_batch(model, labeled.images(clean, records), detector.transform, seed, detector.prob_floor)
    )
    curve = roc_curve(labeled)
    choice = choose_threshold(curve)
    write_roc_csv(curve, out / "roc.csv")
    calibrated = DetectorConfig(detector.transform, choice.tau, detector.prob_floor)
    save_threshold(calibrated, out / "threshold.json", {
        "fpr": choice.fpr,
        "tpr": choice.tpr,
        "distance": choice.distance,
        "auc": curve.auc,
        "positives": labeled.n_positive,
        "negatives": labeled.n_negative,
    })
    console.print(f"tau = {choice.tau:.6g} (TPR {choice.tpr:.3f}, FPR {choice.fpr:.3f}, AUC {curve.auc:.4f})")


@main.command()
@model_option
@click.argument('images', nargs=-1, type=click.Path(dir_okay=False))
@click.option('--dataset', '-d', help='Score a dataset instead of image files')
@split_option("test")
@limit_option
@click.option('--transform', '-t', help='e.g. jpeg:92, median:3, pool:jpeg75,jpeg92')
@click.option('--tau', type=float, help='Detection threshold in nats')
@click.option('--threshold', 'threshold_path', help='threshold.json written by "calibrate"')
@click.pass_obj
@handle_errors
def detect(cfg: RunConfig, model_path: Optional[str], images: Tuple[str, ...], dataset: Optional[str], split: str,
           limit: Optional[int], transform: Optional[str], tau: Optional[float], threshold_path: Optional[str]):
    """Print one verdict line per image: id, J, tau, verdict, transform, ms.

    ``--threshold`` loads a calibrated transform and tau; explicit ``--transform``
    and ``--tau`` still win.
    """
    if threshold_path:
        calibrated = load_threshold(_require(threshold_path, "threshold file"))
        cfg.set("detector.transform", format_transform(calibrated.transform))
        cfg.set("detector.tau", encode_tau(calibrated.tau))
        cfg.set("detector.prob_floor", calibrated.prob_floor)
    cfg.set("detector.transform", transform)
    cfg.set("detector.tau", tau)
    config: DetectorConfig = cfg.validate().detector_config()
    model = _load_model(model_path)
    if images:
        inputs = [(Path(p).name, read_pnm(_require(p, "image"))) for p in images]
    elif dataset:
        data = _load_dataset(cfg, dataset, split, limit)
        inputs = [(f"{data.name}:{i}", img) for i, img in enumerate(data.images)]
    else:
        raise ConfigError("give image paths or --dataset")
    out = _prepare_out(cfg)
    rows = [(image_id, vg_detect(model, img, config, seed=cfg.seed + i))
            for i, (image_id, img) in enumerate(inputs)]
    write_detection_report(rows, config.tau, out / "detections.csv")
    for line in detection_lines(rows, config.tau):
        console.print(line, markup=False, highlight=False, soft_wrap=True)


@main.command(name="eval")
@model_option
@dataset_option
@split_option("test")
@limit_option
@click.option('--archive', 'archives', multiple=True, help='Archive written by "attack" (repeatable)')
@click.option('--transform', '-t', 'transforms', multiple=True, help='Transform to evaluate (repeatable)')
@click.option('--kde', 'kde_path', help='KDE store for the baseline rows')
@click.option('--mixture/--no-mixture', default=None, help='Add a row over all archives together')
@click.pass_obj
@handle_errors
def evaluate(cfg: RunConfig, model_path: Optional[str], dataset: str, split: str, limit: Optional[int],
             archives: Tuple[str, ...], transforms: Tuple[str, ...], kde_path: Optional[str],
             mixture: Optional[bool]):
    """AUC table: one row per attack group and transform, plus KDE rows."""
    if transforms:
        cfg.set("evaluation.transforms", list(transforms))
    cfg.set("evaluation.mixture", mixture)
    options = cfg.validate().eval_options()
    model = _load_model(model_path)
    store = load_kde(_require(kde_path, "KDE store"), clf.checksum(model)) if kde_path else None
    clean = _load_dataset(cfg, dataset, split, limit)
    records = _load_archives(archives, model, clean)
    out = _prepare_out(cfg)
    roc_dir = out / "roc"
    roc_dir.mkdir(exist_ok=True)
    groups = list(group_records(records).items())
    if options.mixture and len(groups) > 1:
        groups.append((("mixture", 0.0), records))
    rows: List[ResultRow] = []
    stats_rows: List[Sequence] = []
    for (attack_name, parameter), group in groups:
        adversarial = np.stack([r.adversarial for r in group])
        stats = transform_score_stats(model, adversarial, options.transforms, seed=cfg.seed,
                                      prob_floor=cfg.detector_config().prob_floor)
        for name, (mean_j, var_j) in stats.items():
            stats_rows.append([attack_name, f"{parameter:g}", name, len(group), f"{mean_j:.6g}", f"{var_j:.6g}"])
        for spec in options.transforms:
            row, curve = evaluate_detector(model, clean, group, spec, attack_name, parameter, seed=cfg.seed,
                                           fraction=options.calibration_fraction)
            rows.append(row)
            write_roc_csv(curve, roc_dir / f"{attack_name}_{parameter:g}_{row.transform}.csv".replace(":", "-"))
        if store is not None:
            row, curve = evaluate_kde(store, model, clean, group, attack_name, parameter, seed=cfg.seed,
                                      fraction=options.calibration_fraction)
            rows.append(row)
            write_roc_csv(curve, roc_dir / f"{attack_name}_{parameter:g}_kde.csv")
    write_results_csv(rows, out / "results.csv")
    _write_csv(out / "score_stats.csv", ["attack", "parameter", "transform", "images", "mean_j", "var_j"], stats_rows)
    console.print(_result_table(rows))


@main.command()
@model_option
@dataset_option
@split_option("test")
@limit_option
@click.option('--sigma', type=float, help='Noise standard deviation (overrides evaluation.noise_sigma)')
@click.option('--calibrate', 'calibrate_sigma', is_flag=True,
              help='Pick sigma on evaluation.noise_grid so accuracy drops by evaluation.noise_target_drop')
@click.pass_obj
@handle_errors
def noise(cfg: RunConfig, model_path: Optional[str], dataset: str, split: str, limit: Optional[int],
          sigma: Optional[float], calibrate_sigma: bool):
    """ROC of clean against Gaussian-noised images (expected near chance)."""
    cfg.set("evaluation.noise_sigma", sigma)
    options = cfg.validate().eval_options()
    model = _load_model(model_path)
    clean = _load_dataset(cfg, dataset, split, limit)
    out = _prepare_out(cfg)
    if calibrate_sigma or options.noise_sigma is None:
        sigma = calibrate_noise_sigma(model, clean, options.noise_target_drop, options.noise_grid, cfg.seed)
    else:
        sigma = options.noise_sigma
    report = noise_robustness_eval(model, cfg.detector_config(), clean, sigma, cfg.seed)
    _write_json(out / "noise.json", {
        "sigma": report.sigma,
        "auc": report.auc,
        "clean_accuracy": report.clean_accuracy,
        "noisy_accuracy": report.noisy_accuracy,
        "positives": report.positives,
        "negatives": report.negatives,
    })
    console.print(f"sigma {report.sigma:g}: AUC {report.auc:.4f}, accuracy {report.clean_accuracy:.4f} -> "
                  f"{report.noisy_accuracy:.4f}")


@main.command()
@model_option
@dataset_option
@split_option("test")
@limit_option
@click.option('--kde', 'kde_path', help='KDE store whose on-disk size is reported')
@click.option('--scaling/--no-scaling', default=False, help='Also time 28x28x1 against 224x224x3 inputs')
@click.pass_obj
@handle_errors
def bench(cfg: RunConfig, model_path: Optional[str], dataset: str, split: str, limit: Optional[int],
          kde_path: Optional[str], scaling: bool):
    """Per-image detection latency and detector storage."""
    config = cfg.validate().detector_config()
    model = _load_model(model_path)
    if kde_path:
        _require(kde_path, "KDE store")
    data = _load_dataset(cfg, dataset, split, limit)
    out = _prepare_out(cfg)
    report = benchmark(model, config, data, kde_path=kde_path, seed=cfg.seed)
    payload = {
        "images": report.images,
        "mean_seconds": report.mean_seconds,
        "median_seconds": report.median_seconds,
        "vg_state_bytes": report.vg_state_bytes,
        "kde_state_bytes": report.kde_state_bytes,
    }
    table = Table(title="Detector cost")
    table.add_column("metric")
    table.add_column("value", justify="right")
    table.add_row("mean s/image", f"{report.mean_seconds:.6f}")
    table.add_row("median s/image", f"{report.median_seconds:.6f}")
    table.add_row("VisionGuard state bytes", str(report.vg_state_bytes))
    if report.kde_state_bytes is not None:
        table.add_row("KDE state bytes", str(report.kde_state_bytes))
    if scaling:
        points = latency_scaling(config=config, seed=cfg.seed)
        payload["scaling"] = [
            {"shape": list(p.shape), "pixels": p.pixels, "mean_seconds": p.mean_seconds} for p in points
        ]
        for p in points:
            table.add_row(f"s/image at {'x'.join(map(str, p.shape))}", f"{p.mean_seconds:.6f}")
    _write_json(out / "bench.json", payload)
    console.print(table)


@main.command()
@click.argument('image', required=False, type=click.Path(dir_okay=False))
@click.option('--dataset', '-d', help='Take the image from a dataset instead of a file')
@split_option("test")
@click.option('--index', type=int, default=0, show_default=True)
@click.option('--transform', '-t', default="jpeg92", show_default=True)
@click.pass_obj
@handle_errors
def dump(cfg: RunConfig, image: Optional[str], dataset: Optional[str], split: str, index: int, transform: str):
    """Write an image and its transformed version as PGM/PPM."""
    try:
        spec = parse_transform(transform)
    except VisionGuardError as e:
        raise ConfigError(str(e)) from e
    if image:
        original, stem = read_pnm(_require(image, "image")), Path(image).stem
    elif dataset:
        data = _load_dataset(cfg, dataset, split, None)
        if not 0 <= index < len(data):
            raise ConfigError(f"index {index} outside [0, {len(data)})")
        original, stem = data.images[index], f"{split}_{index}"
    else:
        raise ConfigError("give an image path or --dataset")
    out = _prepare_out(cfg)
    name = format_transform(spec).replace(":", "-")
    ext = ".pgm" if original.shape[-1] == 1 else ".ppm"
    write_pnm(original, out / f"{stem}{ext}")
    write_pnm(apply_transform(original, spec, cfg.seed), out / f"{stem}_{name}{ext}")
    console.print(f"[green]Wrote {stem}{ext} and {stem}_{name}{ext} to {out}[/green]")


if __name__ == "__main__":
    main()
