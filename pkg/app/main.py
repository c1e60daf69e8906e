"""Command-line entry point: synth, train, embed and eval."""

import argparse
import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from settings import settings
from metrics import write_metrics
from errors import ConfigError, DataFileError, PipelineError, UsageError
from schemas import RunConfig, apply_overrides, load_run_config, read_config_sections
from datapipe.schemas import UserArchive
from datapipe.service import generate_synthetic, load_dataset, write_archive_cache
from encoder.schemas import ModelVariant
from evalsuite.schemas import MetricReport
from evalsuite.service import (
    attribute_classification_eval,
    attribute_regression_eval,
    default_periods,
    embed_archives,
    finetune_eval,
    format_reports,
    identification_sliding_windows,
    mean_report,
    repeat_eval,
    user_identification_eval,
    write_reports,
)
from trainer.checkpoint import load_model
from trainer.model import JointModel
from trainer.schemas import EpochRecord, TrainConfig
from trainer.service import fit

logger = logging.getLogger(__name__)

# (flag, config key, type, help) per command; every flag maps to exactly one key
SYNTH_FLAGS = [
    ("--seed", "data.seed", int, "Random seed of the synthetic population"),
    ("--n-users", "data.n_users", int, "Number of synthetic users"),
    ("--days-per-user", "data.days_per_user", int, "Days per synthetic user"),
    ("--gap-rate", "data.gap_rate", float, "Probability that a day has a missing-data gap"),
]
TRAIN_FLAGS = [
    ("--seed", "train.seed", int, "Seed for initialisation, sampling and validation split"),
    ("--max-epochs", "train.max_epochs", int, "Upper bound on training epochs"),
    ("--max-steps", "train.max_steps", int, "Upper bound on optimizer steps"),
    ("--learning-rate", "train.learning_rate", float, "Adam learning rate"),
    ("--batch-size", "train.batch_size", int, "Anchor users per step"),
    ("--lambda", "train.lambda", float, "Weight of the triplet term in the joint loss"),
    ("--patience", "train.patience", int, "Epochs without validation improvement before stopping"),
    ("--variant", "model.variant", str, "Model variant: " + ", ".join(v.value for v in ModelVariant)),
]
EVAL_FLAGS = [
    ("--seed", "eval.seed", int, "Seed for trial sampling and label splits"),
    ("--trials-per-user", "eval.trials_per_user", int, "Identification trials per user and period"),
    ("--repeats", "eval.repeats", int, "Repeat the protocol and report the mean"),
    ("--finetune-steps", "eval.finetune_steps", int, "Optimizer steps for finetune tasks"),
]
# checkpoint sections a finetune task may take from --config and --set
FINETUNE_SECTIONS = ("model", "train")


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors raised instead of exiting with status 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(parser: argparse.ArgumentParser, flags) -> None:
    parser.add_argument("--config", help="Run configuration file ([data] [model] [train] [eval])")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one configuration key; repeatable",
    )
    for flag, key, kind, text in flags:
        parser.add_argument(flag, dest=key, type=kind, default=None, help=f"{text} ({key})")


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="hr-embed", description="Heart-rate day and user embeddings")
    parser.add_argument("--log-level", default=None, help="Root logger level (default from settings)")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    commands.required = True

    synth = commands.add_parser("synth", help="Write a synthetic population as an archive cache")
    _add_config_flags(synth, SYNTH_FLAGS)
    synth.add_argument("--out", required=True, help="Archive cache to write")

    train = commands.add_parser("train", help="Train the joint model and write a checkpoint")
    _add_config_flags(train, TRAIN_FLAGS)
    train.add_argument("--data", required=True, help="Measurement CSV or archive cache")
    train.add_argument("--labels", help="Label sidecar file for measurement CSV input")
    train.add_argument("--out", required=True, help="Checkpoint to write after every epoch")
    train.add_argument("--history", help="Loss history file (default: <out>.history.csv)")
    train.add_argument("--resume", help="Checkpoint to continue from")

    embed = commands.add_parser("embed", help="Dump day or user embeddings")
    embed.add_argument("--checkpoint", required=True, help="Trained checkpoint")
    embed.add_argument("--data", required=True, help="Measurement CSV or archive cache")
    embed.add_argument("--labels", help="Label sidecar file for measurement CSV input")
    embed.add_argument("--out", required=True, help="Embedding file to write")
    embed.add_argument("--granularity", choices=("day", "user"), default="day", help="One line per day or per user")

    evaluate = commands.add_parser("eval", help="Run a downstream protocol and write its metrics")
    _add_config_flags(evaluate, EVAL_FLAGS)
    evaluate.add_argument("--checkpoint", required=True, help="Trained checkpoint")
    evaluate.add_argument("--data", required=True, help="Measurement CSV or archive cache")
    evaluate.add_argument("--labels", help="Label sidecar file for measurement CSV input")
    evaluate.add_argument(
        "--task",
        required=True,
        help="identify | identify-sliding | classify:<attr> | regress:<attr> | finetune:<attr>",
    )
    evaluate.add_argument("--out", help="Metric report file (default: stdout)")
    return parser


def _set_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    return overrides


def resolve_config(args: argparse.Namespace, flags) -> RunConfig:
    """Defaults < config file < --set < explicit flags."""
    config = load_run_config(args.config or settings.default_config)
    overrides = _set_overrides(args)
    for _, key, _, _ in flags:
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return apply_overrides(config, overrides)


def finetune_train_config(args: argparse.Namespace, saved: TrainConfig) -> TrainConfig:
    """The checkpoint's [train] with the keys written in --config or --set on top.

    The architecture stays the checkpoint's; a [model] that disagrees is rejected.
    """
    path = args.config or settings.default_config
    sections = read_config_sections(path) if path else {}
    overrides: Dict[str, Any] = {
        f"{section}.{key}": value
        for section in FINETUNE_SECTIONS
        for key, value in sections.get(section, {}).items()
    }
    overrides.update(
        (key, value)
        for key, value in _set_overrides(args).items()
        if key.partition(".")[0] in FINETUNE_SECTIONS
    )
    merged = apply_overrides(RunConfig(train=saved), overrides).train
    if merged.model != saved.model:
        raise ConfigError("finetune keeps the checkpoint's architecture; [model] differs from it")
    if overrides:
        logger.info("finetune train overrides=%s", ",".join(sorted(overrides)))
    return merged


def _format(x: float) -> str:
    return format(x, ".17g")


def _write_lines(path: str, lines: Sequence[str]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.writelines(line + "\n" for line in lines)
    except OSError as e:
        raise DataFileError(f"Cannot write {path}: {e}")


def history_lines(history: Sequence[EpochRecord]) -> List[str]:
    return [
        ",".join([str(r.epoch)] + [_format(v) for v in (r.l_ae, r.l_s, r.l_joint, r.val_joint)])
        for r in history
    ]


def embedding_lines(model: JointModel, archives: Sequence[UserArchive], granularity: str) -> List[str]:
    lines = []
    for archive in archives:
        if not archive.days:
            continue
        if granularity == "user":
            vector = model.embed_user(archive.days).vector
            lines.append(",".join([archive.user_id] + [_format(v) for v in vector]))
            continue
        for day in archive.days:
            vector = model.embed_day(day).vector
            lines.append(",".join([archive.user_id, day.date.isoformat()] + [_format(v) for v in vector]))
    return lines


# ---------- commands ----------


def cmd_synth(args: argparse.Namespace) -> int:
    config = resolve_config(args, SYNTH_FLAGS)
    archives = generate_synthetic(config.data)
    write_archive_cache(archives, args.out)
    print(f"users={len(archives)} days={sum(len(a.days) for a in archives)} out={args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args, TRAIN_FLAGS)
    archives = load_dataset(args.data, args.labels)
    result = fit(archives, config.train, checkpoint_path=args.out, resume_from=args.resume)
    history_path = args.history or args.out + ".history.csv"
    _write_lines(history_path, history_lines(result.history))
    print(
        f"epochs={len(result.history)} steps={result.steps} best_epoch={result.best_epoch} "
        f"stopped_early={result.stopped_early} checkpoint={args.out} history={history_path}"
    )
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    model, _ = load_model(args.checkpoint)
    archives = load_dataset(args.data, args.labels)
    lines = embedding_lines(model, archives, args.granularity)
    _write_lines(args.out, lines)
    print(f"lines={len(lines)} granularity={args.granularity} out={args.out}")
    return 0


def _repeat_with_seeds(run: Callable[[Any], MetricReport], config, task: str) -> MetricReport:
    reports = [run(config.model_copy(update={"seed": config.seed + i})) for i in range(config.repeats)]
    return reports[0] if len(reports) == 1 else mean_report(reports, task)


def parse_task(task: str) -> Tuple[str, Optional[str]]:
    kind, _, attribute = task.partition(":")
    if kind in ("identify", "identify-sliding"):
        if attribute:
            raise UsageError(f"task {kind} takes no attribute")
        return kind, None
    if kind in ("classify", "regress", "finetune"):
        if not attribute:
            raise UsageError(f"task {kind} needs an attribute, e.g. {kind}:chronotype")
        return kind, attribute
    raise UsageError(f"unknown task {task!r}")


def cmd_eval(args: argparse.Namespace) -> int:
    kind, attribute = parse_task(args.task)
    config = resolve_config(args, EVAL_FLAGS)
    model, train_config = load_model(args.checkpoint)
    if kind == "finetune":
        train_config = finetune_train_config(args, train_config)
    archives = load_dataset(args.data, args.labels)
    evaluation = config.eval

    if kind == "identify":
        embeddings = embed_archives(model, archives)
        train_period, test_period = default_periods(archives, evaluation)
        report = repeat_eval(
            lambda rng: user_identification_eval(
                model, archives, train_period, test_period, rng, evaluation, embeddings=embeddings
            ),
            evaluation.repeats,
            evaluation.seed,
            "identify",
        )
    elif kind == "identify-sliding":
        report = repeat_eval(
            lambda rng: identification_sliding_windows(model, archives, rng, evaluation),
            evaluation.repeats,
            evaluation.seed,
            "identify_sliding",
        )
    elif kind == "classify":
        report = _repeat_with_seeds(
            lambda c: attribute_classification_eval(model, archives, attribute, c),
            evaluation,
            f"classify_{attribute}",
        )
    elif kind == "regress":
        report = _repeat_with_seeds(
            lambda c: attribute_regression_eval(model, archives, attribute, c),
            evaluation,
            f"regress_{attribute}",
        )
    else:
        report = _repeat_with_seeds(
            lambda c: finetune_eval(load_model(args.checkpoint)[0], archives, attribute, train_config, c),
            evaluation,
            f"finetune_{attribute}",
        )

    if args.out:
        write_reports([report], args.out)
    else:
        sys.stdout.write(format_reports([report]))
    if report.skipped_users:
        logger.warning("eval task=%s skipped_users=%d", args.task, report.skipped_users)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "embed": cmd_embed, "eval": cmd_eval}


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format=settings.log_format,
        stream=sys.stderr,
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        return COMMANDS[args.command](args)
    except PipelineError as e:
        logger.error("%s: %s", type(e).__name__, e.detail)
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code
    finally:
        if settings.metrics_file:
            write_metrics(settings.metrics_file)


if __name__ == "__main__":
    raise SystemExit(main())
