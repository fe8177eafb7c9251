"""Command-line front end: `finemask <command> [options]`.

Every command that writes files also writes `manifest.json` into its output
directory; `finemask rerun --manifest PATH` replays the recorded arguments.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import asyncio
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
import dataclasses
from dataclasses import dataclass
from json import dumps as to_json
import logging
import os
from pathlib import Path
import sys

import numpy as np
from scipy import stats

from .fm_artifacts import (
    SparseEncoder,
    checkpoint_crc,
    load_bundle,
    load_checkpoint,
    pack_bundle,
    save_checkpoint,
    storage_accounting,
)
from .fm_const import (
    ENV_SEED,
    PRUNE_EVERY,
    SWEEP_COLUMNS,
    Analysis,
    Difficulty,
    FinetuneMode,
    FreezePreset,
    InitScheme,
    Metric,
    StraightThrough,
    TaskFamily,
)
from .fm_encoder import ModelConfig, ParameterSet, TaskHead
from .fm_exceptions import ConfigError, FinemaskError, UndefinedStatisticError
from .fm_geometry import (
    distance_growth,
    distance_report,
    layer_sparsity,
    mask_overlap,
    per_layer_closeness,
    powerlaw_fit,
    pruned_magnitude_stats,
)
from .fm_masking import (
    BinaryMask,
    FreezeSpec,
    MaskableSet,
    PruneSchedule,
    apply_mask,
    sparsity,
    threshold_mask,
)
from .fm_numerics import RngStream
from .fm_taskgen import (
    CorpusSpec,
    gen_corpus,
    gen_task,
    load_task,
    read_sequences,
    save_task,
    write_sequences,
)
from .fm_trainers import (
    OptimizerConfig,
    RunRecord,
    finetune_baseline,
    finetune_iterative_prune,
    finetune_supermask,
    head_only_control,
    predict,
    pretrain,
    read_run_record,
    shuffled_control,
    write_run_record,
)
from .fm_utilities import (
    dataclass_from_values,
    json_loads,
    parse_key_values,
    read_csv,
    write_csv,
)

_LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.ftck"
BUNDLE_NAME = "bundle.ftmk"
RECORD_NAME = "run.csv"
SUMMARY_NAME = "summary.json"

DISTANCE_COLUMNS = ["tensor", "l1", "l1_mean", "angular"]
LAYER_COLUMNS = ["block", "role", "tensor", "l1", "l1_mean", "angular"]
OVERLAP_COLUMNS = ["row_task", "col_task", "overlap", "chance", "random_reference"]
MAGNITUDE_COLUMNS = [
    "supermask_max",
    "supermask_mean",
    "pruned_max",
    "pruned_mean",
    "overlap",
    "sparsity",
]
POWERLAW_COLUMNS = ["exponent", "intercept", "r_squared", "spearman", "points"]
LEARNING_CURVE_COLUMNS = ["step", "metric", "sparsity", "angular_distance", "l1_distance"]
LAYER_SPARSITY_COLUMNS = ["block", "role", "tensor", "sparsity"]
SPARSITY_CONTROL_COLUMNS = ["spearman", "dense_init", "dense_final", "pushed_up", "points"]

MASKED_MODES = [FinetuneMode.SUPERMASK, FinetuneMode.SHUFFLED]


def _version() -> str:
    from . import __version__

    return __version__


def default_seed() -> int:
    """Seed from FT_SEED, 0 when unset."""
    value = os.environ.get(ENV_SEED, "0")
    try:
        return int(value)
    except ValueError as err:
        raise ConfigError(f"{ENV_SEED} must be an integer, got {value!r}") from err


def load_config(path: str | Path | None) -> tuple[ModelConfig, OptimizerConfig]:
    """Read a key=value file into model and optimizer configs."""
    if path is None:
        return ModelConfig(), OptimizerConfig()
    values = parse_key_values(Path(path).read_text(encoding="utf-8"))
    model_keys = {field.name for field in dataclasses.fields(ModelConfig)}
    opt_keys = {field.name for field in dataclasses.fields(OptimizerConfig)}
    unknown = sorted(set(values) - model_keys - opt_keys)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
    model = dataclass_from_values(ModelConfig, {k: v for k, v in values.items() if k in model_keys})
    opt = dataclass_from_values(OptimizerConfig, {k: v for k, v in values.items() if k in opt_keys})
    return model, opt


def _float_list(text: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from err
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _preset_list(text: str) -> list[str]:
    presets = [part.strip() for part in text.split(",") if part.strip()]
    unknown = [preset for preset in presets if preset not in FreezePreset.ALL]
    if unknown or not presets:
        raise argparse.ArgumentTypeError(
            f"presets must be from {', '.join(FreezePreset.ALL)}, got {text!r}"
        )
    return presets


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"sparsity must be in [0, 1), got {text}")
    return value


def _jsonable(value: object) -> object:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(data, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    return path


@dataclass
class RunManifest:
    """Everything needed to replay one command."""

    command: str
    argv: list[str]
    seed: int | None
    config: str | None
    inputs: dict[str, list[str]]
    outputs: list[str]
    options: dict
    version: str

    def write(self, directory: Path) -> Path:
        """Write manifest.json into directory."""
        return _write_json(directory / MANIFEST_NAME, dataclasses.asdict(self))

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        """Read manifest.json."""
        data = json_loads(Path(path).read_text(encoding="utf-8"))
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError(f"{path}: not a run manifest: {err}") from err


INPUT_OPTIONS = [
    "config",
    "corpus",
    "task",
    "checkpoint",
    "reference",
    "tuned",
    "bundle",
    "record",
    "points",
    "sweep",
    "input",
]


def _write_manifest(args: argparse.Namespace, argv: Sequence[str], outputs: Sequence[Path]) -> Path:
    """Record resolved options, including the seed actually used."""
    resolved = list(argv)
    if getattr(args, "seed", None) is not None and "--seed" not in resolved:
        resolved += ["--seed", str(args.seed)]
    options = {
        key: value
        for key, value in vars(args).items()
        if key not in ("func", "verbose") and not key.startswith("_")
    }
    inputs = {}
    for key in INPUT_OPTIONS:
        value = options.get(key)
        if value:
            inputs[key] = [str(item) for item in value] if isinstance(value, list) else [str(value)]
    manifest = RunManifest(
        command=args.command,
        argv=resolved,
        seed=getattr(args, "seed", None),
        config=str(args.config) if getattr(args, "config", None) else None,
        inputs=inputs,
        outputs=sorted(str(path) for path in outputs),
        options=options,
        version=_version(),
    )
    return manifest.write(Path(args.out))


def _optimizer(args: argparse.Namespace, opt: OptimizerConfig) -> OptimizerConfig:
    changes = {}
    if getattr(args, "steps", None) is not None:
        changes["total_steps"] = args.steps
    if getattr(args, "mask_lr", None) is not None:
        changes["mask_lr"] = args.mask_lr
    return dataclasses.replace(opt, **changes) if changes else opt


def _corpus_spec(args: argparse.Namespace) -> CorpusSpec:
    return CorpusSpec(
        vocab_size=args.vocab_size,
        num_classes=args.num_classes,
        seq_len=args.seq_len,
        concentration=args.concentration,
        chain_seed=args.chain_seed,
        persistence=args.persistence,
    )


def _load_reference(path: Path, config_path: Path | None) -> tuple[ParameterSet, int]:
    """Load a checkpoint with its CRC, using the config geometry when given."""
    config = load_config(config_path)[0] if config_path else None
    return load_checkpoint(path, config), checkpoint_crc(path)


def cmd_gen_corpus(args: argparse.Namespace) -> list[Path]:
    """Write an unlabeled corpus."""
    spec = _corpus_spec(args)
    corpus = gen_corpus(spec, args.size, RngStream(args.seed))
    return [write_sequences(Path(args.out) / "corpus.txt", corpus.sequences)]


def cmd_gen_task(args: argparse.Namespace) -> list[Path]:
    """Write a labeled task, certified against a reference checkpoint if given."""
    reference = None
    if args.reference:
        reference, _ = _load_reference(args.reference, args.config)
    task = gen_task(
        _corpus_spec(args),
        args.family,
        args.difficulty,
        args.train_size,
        args.eval_size,
        RngStream(args.seed),
        reference,
    )
    directory = save_task(task, args.out)
    for certificate in task.certificates.values():
        print(
            f"{certificate.name}: {certificate.value:.4f} "
            f"(threshold {certificate.threshold:.4f}) {'pass' if certificate.passed else 'FAIL'}"
        )
    return [directory / "train.tsv", directory / "eval.tsv", directory / "task.json"]


def cmd_pretrain(args: argparse.Namespace) -> list[Path]:
    """Masked-token pre-training."""
    config, opt = load_config(args.config)
    opt = _optimizer(args, opt)
    corpus = read_sequences(args.corpus)
    params, record = pretrain(config, corpus, opt, RngStream(args.seed), args.scheme)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    crc = save_checkpoint(params, out / CHECKPOINT_NAME)
    print(f"checkpoint crc {crc:#010x}")
    return [out / CHECKPOINT_NAME, write_run_record(record, out / RECORD_NAME)]


def _summary(record: RunRecord, **extra) -> dict:
    summary = dict(record.summary)
    summary.update(extra)
    summary["iterations"] = record.iterations
    return summary


def cmd_finetune(args: argparse.Namespace) -> list[Path]:
    """Run one fine-tuning procedure and write its artifacts."""
    reference, reference_crc = _load_reference(args.checkpoint, args.config)
    config = reference.config
    opt = _optimizer(args, load_config(args.config)[1])
    task = load_task(args.task)
    rng = RngStream(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    freeze = FreezeSpec.from_presets(config, args.freeze) if args.freeze else None
    maskable = MaskableSet.default(config, include_embedding=not args.no_embed_mask)
    outputs = []
    meta = {"task": task.name, "mode": args.mode, "seed": args.seed}

    if args.mode in (FinetuneMode.BASELINE, FinetuneMode.L0CLOSE):
        params, head, record = finetune_baseline(
            reference, task, opt, rng, freeze, args.metric, dropout=not args.no_dropout
        )
        if freeze is not None:
            print(f"trainable parameters: {freeze.trainable_count} of {reference.size}")
        crc = save_checkpoint(params, out / CHECKPOINT_NAME)
        pack_bundle(BinaryMask(), head, meta, out / BUNDLE_NAME, crc)
        outputs += [out / CHECKPOINT_NAME, out / BUNDLE_NAME]
    elif args.mode == FinetuneMode.PRUNE:
        schedule = PruneSchedule(args.final_sparsity, opt.total_steps, args.prune_every)
        params, mask, head, record = finetune_iterative_prune(
            reference, task, schedule, opt, rng, maskable, args.metric
        )
        crc = save_checkpoint(params, out / CHECKPOINT_NAME)
        meta.update(final_sparsity=record.summary["final_sparsity"])
        pack_bundle(mask, head, meta, out / BUNDLE_NAME, crc, params)
        outputs += [out / CHECKPOINT_NAME, out / BUNDLE_NAME]
    elif args.mode == FinetuneMode.SUPERMASK:
        nu, head, record = finetune_supermask(
            reference,
            task,
            args.init_sparsity,
            opt,
            rng,
            maskable,
            freeze,
            args.straight_through,
            resample=not args.threshold_sampling,
            dropout=not args.no_dropout,
            metric=args.metric,
        )
        mask = threshold_mask(nu)
        meta.update(
            initial_sparsity=args.init_sparsity,
            final_sparsity=record.summary["final_sparsity"],
            iterations=record.iterations,
            metric=record.summary["metric"],
            metric_std=record.summary["metric_std"],
        )
        pack_bundle(mask, head, meta, out / BUNDLE_NAME, reference_crc, reference)
        storage = storage_accounting(config, freeze, binary=True, maskable=maskable)
        print(f"mask entries: {storage.stored_entries} ({storage.bytes} bytes packed)")
        outputs.append(out / BUNDLE_NAME)
    elif args.mode == FinetuneMode.HEAD_ONLY:
        record = head_only_control(reference, task, opt, rng, args.metric)
        _write_json(out / SUMMARY_NAME, _summary(record, **meta))
        return outputs + [write_run_record(record, out / RECORD_NAME), out / SUMMARY_NAME]
    else:
        record = shuffled_control(reference, task, args.init_sparsity, opt, rng, maskable, args.metric)

    metric = record.summary.get("metric")
    if metric is not None:
        print(f"{args.metric}: {metric:.4f}")
    _write_json(out / SUMMARY_NAME, _summary(record, **meta))
    outputs += [write_run_record(record, out / RECORD_NAME), out / SUMMARY_NAME]
    return outputs


@dataclass(frozen=True)
class SweepCell:
    """One (grid point, mask learning rate, seed) run of a sweep."""

    mode: str
    task: str
    checkpoint: str
    config: str | None
    sparsity: float
    mask_lr: float | None
    seed: int
    steps: int | None
    metric: str = Metric.ACCURACY


def run_cell(cell: SweepCell) -> dict:
    """Train one sweep cell; module-level so worker processes can import it."""
    reference, _ = _load_reference(Path(cell.checkpoint), Path(cell.config) if cell.config else None)
    opt = load_config(cell.config)[1]
    changes = {"total_steps": cell.steps} if cell.steps is not None else {}
    if cell.mask_lr is not None:
        changes["mask_lr"] = cell.mask_lr
    opt = dataclasses.replace(opt, **changes)
    task = load_task(cell.task)
    rng = RngStream(cell.seed)
    if cell.mode == FinetuneMode.SUPERMASK:
        _, _, record = finetune_supermask(reference, task, cell.sparsity, opt, rng, metric=cell.metric)
    else:
        schedule = PruneSchedule(cell.sparsity, opt.total_steps)
        _, _, _, record = finetune_iterative_prune(reference, task, schedule, opt, rng, metric=cell.metric)
    return {
        "task": task.name,
        "final_sparsity": record.summary["final_sparsity"],
        "metric": record.summary["metric"],
    }


async def run_sweep(cells: Sequence[SweepCell], jobs: int = 1) -> list[dict | BaseException]:
    """Run cells concurrently; exceptions are returned in place of results.

    jobs > 1 uses a process pool; otherwise cells run on the loop's default
    executor.
    """
    loop = asyncio.get_running_loop()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [loop.run_in_executor(pool, run_cell, cell) for cell in cells]
            return await asyncio.gather(*futures, return_exceptions=True)
    results: list[dict | BaseException] = []
    for cell in cells:
        try:
            results.append(await loop.run_in_executor(None, run_cell, cell))
        except Exception as err:  # pylint: disable=broad-except
            results.append(err)
    return results


def sweep_rows(
    cells: Sequence[SweepCell], results: Sequence[dict | BaseException], task_name: str
) -> list[dict]:
    """Aggregate per-seed results into one row per (grid point, mask learning rate)."""
    groups: dict[tuple[float, float | None], list[tuple[SweepCell, dict | BaseException]]] = {}
    for cell, result in zip(cells, results):
        groups.setdefault((cell.sparsity, cell.mask_lr), []).append((cell, result))
    rows = []
    for (point, mask_lr), members in groups.items():
        mode = members[0][0].mode
        succeeded = [result for _, result in members if isinstance(result, dict)]
        errors = []
        for cell, result in members:
            if isinstance(result, BaseException):
                _LOGGER.warning("Sweep cell %s seed %d failed: %s", point, cell.seed, result)
                errors.append(f"seed {cell.seed}: {type(result).__name__}: {result}")
        metrics = [result["metric"] for result in succeeded]
        finals = [result["final_sparsity"] for result in succeeded]
        rows.append(
            {
                "task": task_name,
                "mode": mode,
                "init_sparsity": point if mode == FinetuneMode.SUPERMASK else None,
                "final_sparsity": float(np.mean(finals)) if finals else None,
                "mask_lr": mask_lr,
                "metric_mean": float(np.mean(metrics)) if metrics else None,
                "metric_std": float(np.std(metrics)) if len(members) > 1 and metrics else None,
                "seeds": len(succeeded),
                "error": "; ".join(errors),
            }
        )
    return rows


def cmd_sweep(args: argparse.Namespace) -> list[Path]:
    """Grid of supermask or pruning runs, one row per grid point in sweep.csv."""
    task = load_task(args.task)
    mask_lrs = args.mask_lr_grid or [None]
    cells = [
        SweepCell(
            mode=args.mode,
            task=str(args.task),
            checkpoint=str(args.checkpoint),
            config=str(args.config) if args.config else None,
            sparsity=point,
            mask_lr=mask_lr,
            seed=args.seed + offset,
            steps=args.steps,
            metric=args.metric,
        )
        for point in args.sparsity_grid
        for mask_lr in mask_lrs
        for offset in range(args.seeds)
    ]
    _LOGGER.info("Sweeping %d cells with %d jobs", len(cells), args.jobs)
    results = asyncio.run(run_sweep(cells, args.jobs))
    rows = sweep_rows(cells, results, task.name)
    failed = sum(1 for row in rows if row["error"])
    if failed:
        print(f"{failed} of {len(rows)} grid points had failures", file=sys.stderr)
    return [write_csv(Path(args.out) / "sweep.csv", SWEEP_COLUMNS, rows)]


def _masked_reference(args: argparse.Namespace) -> tuple[ParameterSet, int, list]:
    reference, crc = _load_reference(args.checkpoint, args.config)
    bundles = [(path, load_bundle(path, crc, reference)) for path in args.bundle or []]
    return reference, crc, bundles


def _analyze_distances(args: argparse.Namespace) -> list[dict]:
    reference, _, bundles = _masked_reference(args)
    rows = []
    tuned = [(str(path), load_checkpoint(path, reference.config)) for path in args.tuned or []]
    tuned += [(str(path), apply_mask(reference, bundle.mask)) for path, bundle in bundles]
    if not tuned:
        raise ConfigError("distances needs --tuned checkpoints or --bundle files")
    for label, params in tuned:
        report = distance_report(reference, params)
        for name in reference.names:
            rows.append(
                {
                    "tensor": name if len(tuned) == 1 else f"{label}:{name}",
                    "l1": report.l1.per_tensor[name],
                    "l1_mean": report.l1.per_tensor_mean[name],
                    "angular": report.per_tensor_angular[name],
                }
            )
        rows.append(
            {
                "tensor": "global" if len(tuned) == 1 else f"{label}:global",
                "l1": report.l1.total,
                "l1_mean": report.l1.mean,
                "angular": report.angular,
            }
        )
    return rows


def _analyze_layers(args: argparse.Namespace) -> list[dict]:
    reference, _, bundles = _masked_reference(args)
    if args.tuned:
        tuned = load_checkpoint(args.tuned[0], reference.config)
    elif bundles:
        tuned = apply_mask(reference, bundles[0][1].mask)
    else:
        raise ConfigError("layers needs a --tuned checkpoint or a --bundle")
    return [dataclasses.asdict(row) | {"tensor": row.name} for row in per_layer_closeness(reference, tuned, reference.config)]


def _bundle_label(path: Path, meta: dict) -> str:
    return str(meta.get("task") or path.stem)


def _analyze_overlap(args: argparse.Namespace) -> list[dict]:
    _, _, bundles = _masked_reference(args)
    if not bundles:
        raise ConfigError("overlap needs at least one --bundle")
    masks = {}
    for path, bundle in bundles:
        label = _bundle_label(path, bundle.meta)
        if label in masks:
            label = f"{label}:{path}"
        masks[label] = bundle.mask
    grid = mask_overlap(masks, args.tensor, RngStream(args.seed).child("overlap"))
    rows = []
    for i, row_task in enumerate(grid.tasks):
        for j, col_task in enumerate(grid.tasks):
            rows.append(
                {
                    "row_task": row_task,
                    "col_task": col_task,
                    "overlap": grid.values[i][j],
                    "chance": grid.chance[i][j],
                    "random_reference": grid.random_reference[i][j],
                }
            )
    return rows


def _analyze_magnitudes(args: argparse.Namespace) -> list[dict]:
    reference, _, bundles = _masked_reference(args)
    if len(bundles) != 1:
        raise ConfigError("magnitudes needs exactly one --bundle")
    return [dataclasses.asdict(pruned_magnitude_stats(reference, bundles[0][1].mask))]


def _distance_points(args: argparse.Namespace) -> list[tuple[float, float]]:
    if args.points:
        return [(float(row["step"]), float(row["distance"])) for row in read_csv(args.points)]
    if args.record:
        return [(float(step), distance) for step, distance in read_run_record(args.record).distance_points()]
    raise ConfigError("powerlaw needs --points or --record")


def _analyze_powerlaw(args: argparse.Namespace) -> list[dict]:
    points = _distance_points(args)
    fit = powerlaw_fit(points)
    try:
        spearman = distance_growth(points).spearman
    except UndefinedStatisticError:
        spearman = None
    return [
        {
            "exponent": fit.exponent,
            "intercept": fit.intercept,
            "r_squared": fit.r_squared,
            "spearman": spearman,
            "points": len(points),
        }
    ]


def _analyze_learning_curve(args: argparse.Namespace) -> list[dict]:
    if not args.record:
        raise ConfigError("learning-curve needs --record")
    return [dataclasses.asdict(checkpoint) for checkpoint in read_run_record(args.record).checkpoints]


def _analyze_layer_sparsity(args: argparse.Namespace) -> list[dict]:
    _, _, bundles = _masked_reference(args)
    if len(bundles) != 1:
        raise ConfigError("layer-sparsity needs exactly one --bundle")
    return [dataclasses.asdict(row) | {"tensor": row.name} for row in layer_sparsity(bundles[0][1].mask)]


def _analyze_sparsity_control(args: argparse.Namespace) -> list[dict]:
    if not args.sweep:
        raise ConfigError("sparsity-control needs --sweep")
    points = sorted(
        (float(row["init_sparsity"]), float(row["final_sparsity"]))
        for row in read_csv(args.sweep)
        if row["init_sparsity"] and row["final_sparsity"]
    )
    if len(points) < 2:
        raise UndefinedStatisticError("sparsity control needs at least two completed grid points")
    values = np.asarray(points)
    spearman = float(stats.spearmanr(values[:, 0], values[:, 1]).statistic)
    dense_init, dense_final = points[0]
    return [
        {
            "spearman": spearman,
            "dense_init": dense_init,
            "dense_final": dense_final,
            "pushed_up": dense_final > dense_init,
            "points": len(points),
        }
    ]


ANALYSES = {
    Analysis.DISTANCES: (DISTANCE_COLUMNS, _analyze_distances),
    Analysis.LAYERS: (LAYER_COLUMNS, _analyze_layers),
    Analysis.OVERLAP: (OVERLAP_COLUMNS, _analyze_overlap),
    Analysis.MAGNITUDES: (MAGNITUDE_COLUMNS, _analyze_magnitudes),
    Analysis.POWERLAW: (POWERLAW_COLUMNS, _analyze_powerlaw),
    Analysis.LEARNING_CURVE: (LEARNING_CURVE_COLUMNS, _analyze_learning_curve),
    Analysis.LAYER_SPARSITY: (LAYER_SPARSITY_COLUMNS, _analyze_layer_sparsity),
    Analysis.SPARSITY_CONTROL: (SPARSITY_CONTROL_COLUMNS, _analyze_sparsity_control),
}


def cmd_analyze(args: argparse.Namespace) -> list[Path]:
    """Write `<what>.csv` for one analysis."""
    columns, analysis = ANALYSES[args.what]
    rows = analysis(args)
    return [write_csv(Path(args.out) / f"{args.what}.csv", columns, rows)]


def _labels(head: TaskHead, features: np.ndarray) -> np.ndarray:
    return (features @ head.weights + head.bias).argmax(axis=1)


def cmd_infer(args: argparse.Namespace) -> list[Path]:
    """Print one prediction per input line."""
    params, crc = _load_reference(args.checkpoint, args.config)
    bundle = load_bundle(args.bundle, crc, params)
    sequences = read_sequences(args.input)
    if not sequences:
        return []
    if args.engine == "sparse":
        engine = SparseEncoder(params, bundle.mask)
        predictions = _labels(bundle.head, engine.features(sequences))
    else:
        predictions = predict(params, bundle.head, sequences, bundle.mask if len(bundle.mask) else None)
    for value in predictions:
        print(value)
    if args.engine == "sparse":
        counts = engine.counts
        print(
            f"multiply-count: {counts.sparse} of {counts.dense} dense "
            f"(ratio {counts.ratio:.4f}, savings {counts.savings:.4f}, "
            f"mask sparsity {sparsity(bundle.mask).global_sparsity if len(bundle.mask) else 0.0:.4f})",
            file=sys.stderr,
        )
    return []


def cmd_rerun(args: argparse.Namespace) -> list[Path]:
    """Replay a manifest's recorded arguments."""
    manifest = RunManifest.read(args.manifest)
    _LOGGER.info("Re-running %s from %s", manifest.command, args.manifest)
    code = main(manifest.argv)
    if code:
        raise FinemaskError(f"re-run of {manifest.command} exited with {code}")
    return []


def _add_corpus_options(parser: argparse.ArgumentParser) -> None:
    defaults = CorpusSpec()
    parser.add_argument("--vocab-size", type=int, default=defaults.vocab_size)
    parser.add_argument("--num-classes", type=int, default=defaults.num_classes)
    parser.add_argument("--seq-len", type=int, default=defaults.seq_len)
    parser.add_argument("--concentration", type=float, default=defaults.concentration)
    parser.add_argument("--chain-seed", type=int, default=defaults.chain_seed)
    parser.add_argument("--persistence", type=float, default=defaults.persistence)


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser."""
    parser = argparse.ArgumentParser(
        prog="finemask", description="Supermask and L0-close fine-tuning at desk scale."
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    commands = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"RNG seed (default ${ENV_SEED} or 0)")
    common.add_argument("--config", type=Path, default=None, help="key=value config file")

    sub = commands.add_parser("gen-corpus", parents=[common], help="generate an unlabeled corpus")
    sub.add_argument("--size", type=int, required=True)
    _add_corpus_options(sub)
    sub.add_argument("--out", type=Path, required=True)
    sub.set_defaults(func=cmd_gen_corpus)

    sub = commands.add_parser("gen-task", parents=[common], help="generate a labeled task")
    sub.add_argument("--family", choices=TaskFamily.ALL, required=True)
    sub.add_argument("--difficulty", choices=[Difficulty.EASY, Difficulty.HARD], default=Difficulty.EASY)
    sub.add_argument("--train-size", type=int, default=512)
    sub.add_argument("--eval-size", type=int, default=256)
    sub.add_argument("--reference", type=Path, help="checkpoint for the separability certificates")
    _add_corpus_options(sub)
    sub.add_argument("--out", type=Path, required=True)
    sub.set_defaults(func=cmd_gen_task)

    sub = commands.add_parser("pretrain", parents=[common], help="masked-token pre-training")
    sub.add_argument("--corpus", type=Path, required=True)
    sub.add_argument("--steps", type=int)
    sub.add_argument("--scheme", choices=[InitScheme.UNIFORM, InitScheme.NORMAL], default=InitScheme.UNIFORM)
    sub.add_argument("--out", type=Path, required=True)
    sub.set_defaults(func=cmd_pretrain)

    sub = commands.add_parser("finetune", parents=[common], help="fine-tune on a task")
    sub.add_argument("--mode", choices=FinetuneMode.ALL, required=True)
    sub.add_argument("--task", type=Path, required=True)
    sub.add_argument("--checkpoint", type=Path, required=True)
    sub.add_argument("--freeze", type=_preset_list, help=f"comma list of {','.join(FreezePreset.ALL)}")
    sub.add_argument("--init-sparsity", type=_fraction)
    sub.add_argument("--final-sparsity", type=_fraction)
    sub.add_argument("--prune-every", type=int, default=None, help=f"updates between prunes (default {PRUNE_EVERY})")
    sub.add_argument("--straight-through", choices=[StraightThrough.SIGMOID, StraightThrough.IDENTITY])
    sub.add_argument("--threshold-sampling", action="store_true", help="train through the threshold mask")
    sub.add_argument("--no-embed-mask", action="store_true", help="leave the word embedding unmasked")
    sub.add_argument("--no-dropout", action="store_true")
    sub.add_argument("--mask-lr", type=float)
    sub.add_argument("--steps", type=int)
    sub.add_argument("--metric", choices=Metric.ALL, default=Metric.ACCURACY)
    sub.add_argument("--out", type=Path, required=True)
    sub.set_defaults(func=cmd_finetune)

    sub = commands.add_parser("sweep", parents=[common], help="grid of supermask or pruning runs")
    sub.add_argument("--mode", choices=[FinetuneMode.SUPERMASK, FinetuneMode.PRUNE], required=True)
    sub.add_argument("--task", type=Path, required=True)
    sub.add_argument("--checkpoint", type=Path, required=True)
    sub.add_argument("--sparsity-grid", type=_float_list, required=True)
    sub.add_argument("--mask-lr-grid", type=_float_list)
    sub.add_argument("--seeds", type=int, default=1)
    sub.add_argument("--jobs", type=int, default=1)
    sub.add_argument("--steps", type=int)
    sub.add_argument("--metric", choices=Metric.ALL, default=Metric.ACCURACY)
    sub.add_argument("--out", type=Path, required=True)
    sub.set_defaults(func=cmd_sweep)

    sub = commands.add_parser("analyze", parents=[common], help="write one analysis CSV")
    sub.add_argument("--what", choices=Analysis.ALL, required=True)
    sub.add_argument("--checkpoint", type=Path, help="reference checkpoint")
    sub.add_argument("--tuned", type=Path, action="append", help="fine-tuned checkpoint (repeatable)")
    sub.add_argument("--bundle", type=Path, action="append", help="mask bundle (repeatable)")
    sub.add_argument("--record", type=Path, help="run record CSV")
    sub.add_argument("--points", type=Path, help="CSV with step,distance columns")
    sub.add_argument("--sweep", type=Path, help="sweep.csv")
    sub.add_argument("--tensor", help="restrict overlap to one tensor")
    sub.add_argument("--out", type=Path, required=True)
    sub.set_defaults(func=cmd_analyze)

    sub = commands.add_parser("infer", parents=[common], help="predict labels for token sequences")
    sub.add_argument("--checkpoint", type=Path, required=True)
    sub.add_argument("--bundle", type=Path, required=True)
    sub.add_argument("--input", type=Path, required=True)
    sub.add_argument("--engine", choices=["dense", "sparse"], default="dense")
    sub.set_defaults(func=cmd_infer)

    sub = commands.add_parser("rerun", help="replay a run manifest")
    sub.add_argument("--manifest", type=Path, required=True)
    sub.set_defaults(func=cmd_rerun)
    return parser


NEEDS_CHECKPOINT = [
    Analysis.DISTANCES,
    Analysis.LAYERS,
    Analysis.OVERLAP,
    Analysis.MAGNITUDES,
    Analysis.LAYER_SPARSITY,
]


def check_flags(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    """Reject incompatible flag combinations before any compute."""
    if args.command == "finetune":
        mode = args.mode
        if args.final_sparsity is not None and mode != FinetuneMode.PRUNE:
            parser.error("--final-sparsity is only valid with --mode prune")
        if mode == FinetuneMode.PRUNE and args.final_sparsity is None:
            parser.error("--mode prune requires --final-sparsity")
        if args.prune_every is not None and mode != FinetuneMode.PRUNE:
            parser.error("--prune-every is only valid with --mode prune")
        if args.init_sparsity is not None and mode not in MASKED_MODES:
            parser.error("--init-sparsity is only valid with --mode supermask or shuffled")
        if mode in MASKED_MODES and args.init_sparsity is None:
            parser.error(f"--mode {mode} requires --init-sparsity")
        if args.freeze and mode not in (FinetuneMode.L0CLOSE, FinetuneMode.SUPERMASK):
            parser.error("--freeze is only valid with --mode l0close or supermask")
        if mode == FinetuneMode.L0CLOSE and not args.freeze:
            parser.error("--mode l0close requires --freeze")
        if (args.straight_through or args.threshold_sampling or args.mask_lr) and mode not in MASKED_MODES:
            parser.error("mask training options are only valid with --mode supermask or shuffled")
        if args.no_embed_mask and mode not in MASKED_MODES + [FinetuneMode.PRUNE]:
            parser.error("--no-embed-mask is only valid with masked modes")
        if args.no_dropout and mode in (FinetuneMode.PRUNE, FinetuneMode.HEAD_ONLY, FinetuneMode.SHUFFLED):
            parser.error(f"--no-dropout is not supported with --mode {mode}")
        args.straight_through = args.straight_through or StraightThrough.SIGMOID
        args.prune_every = args.prune_every or PRUNE_EVERY
    elif args.command == "sweep":
        if args.seeds < 1 or args.jobs < 1:
            parser.error("--seeds and --jobs must be at least 1")
        if args.mask_lr_grid and args.mode != FinetuneMode.SUPERMASK:
            parser.error("--mask-lr-grid is only valid with --mode supermask")
        if any(not 0.0 <= point < 1.0 for point in args.sparsity_grid):
            parser.error("--sparsity-grid values must be in [0, 1)")
    elif args.command == "analyze":
        if args.what in NEEDS_CHECKPOINT and args.checkpoint is None:
            parser.error(f"--what {args.what} requires --checkpoint")
    if args.command in ("pretrain", "finetune", "sweep") and getattr(args, "steps", None) is not None:
        if args.steps < 0:
            parser.error("--steps must not be negative")


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        check_flags(parser, args)
    except SystemExit as err:
        return int(err.code or 0)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format=LOG_FORMAT,
    )
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = default_seed()
        outputs = args.func(args)
        if outputs and getattr(args, "out", None) is not None:
            _write_manifest(args, argv, outputs)
    except (FinemaskError, OSError) as err:
        _LOGGER.debug("Command failed", exc_info=True)
        print(f"finemask: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
