"""Command-line entry points: train, eval, inspect and ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import CASTS, FEATURE_NAMES
from .evaluation import MetricsReport, group_scores, mean_metrics
from .model import PROFILES, MCAN, ModelConfig, load_checkpoint, save_checkpoint
from .text import DataError, Pair, Vocabulary, build_vocab, load_embeddings, read_pairs
from .train import NumericError, TrainConfig, make_batches, score_pairs, train

logger = logging.getLogger("mcan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CHECKPOINT_NAME = "checkpoint.mcan"
TRAIN_LOG_NAME = "train.log"

# Ablation settings, in the order they are reported.
ABLATIONS: dict[str, dict] = {
    "original": {},
    "remove_highway": {"use_highway": False},
    "remove_lstm": {"use_lstm": False},
    "remove_mca": {"enabled_casts": ()},
    "remove_intra": {"drop_cast": "intra"},
    "remove_align": {"drop_cast": "align"},
    "remove_mean": {"drop_cast": "mean"},
    "remove_max": {"drop_cast": "max"},
}

_MODEL_FLAGS = {
    "dropout": "dropout",
    "l2": "l2",
    "hidden": "hidden",
    "head": "head",
    "compression": "compression",
    "fm_k": "fm_k",
    "encoder_dim": "encoder_dim",
    "max_len": "max_len",
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    out: Path
    train: Path | None = None
    dev: Path | None = None
    test: Path | None = None
    embeddings: Path | None = None
    checkpoint: Path | None = None
    profile: str = "custom"
    profile_given: bool = False
    seed: int = 0
    model_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)

    def model_config(self, embed_dim: int) -> ModelConfig:
        values = dict(PROFILES[self.profile])
        values.update(self.model_overrides)
        return ModelConfig(embed_dim=embed_dim, **values)

    def train_config(self) -> TrainConfig:
        values = {"seed": self.seed, "select_metric": selection_metric(self.profile)}
        values.update(self.train_overrides)
        return TrainConfig(**values)

    def requested_model_fields(self) -> dict:
        values = dict(PROFILES[self.profile]) if self.profile_given else {}
        values.update(self.model_overrides)
        return values


def selection_metric(profile: str) -> str:
    return "R10@1" if profile == "udc" else "MAP"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcan", description="Multi-cast attention ranker for text pairs.")
    p.add_argument("--command", required=True, choices=["train", "eval", "inspect", "ablate"])
    p.add_argument("--train", type=Path, help="training TSV")
    p.add_argument("--dev", type=Path, help="dev TSV used for model selection")
    p.add_argument("--test", type=Path, help="TSV to evaluate or inspect")
    p.add_argument("--embeddings", type=Path, help="GloVe-format embedding file")
    p.add_argument("--checkpoint", type=Path, help=f"checkpoint to load (default: OUT/{CHECKPOINT_NAME})")
    p.add_argument("--profile", choices=sorted(PROFILES), help="hyperparameter profile (default: custom)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--head", type=int)
    p.add_argument("--encoder-dim", type=int)
    p.add_argument("--compression", choices=["sm", "nn", "fm"])
    p.add_argument("--fm-k", type=int)
    p.add_argument("--disable-cast", action="append", choices=list(CASTS), default=[])
    p.add_argument("--no-highway", action="store_true")
    p.add_argument("--no-lstm", action="store_true")
    p.add_argument("--max-len", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_run_config(argv: Sequence[str] | None = None) -> tuple[RunConfig, argparse.Namespace]:
    args = build_parser().parse_args(argv)
    model = {key: getattr(args, flag) for flag, key in _MODEL_FLAGS.items() if getattr(args, flag) is not None}
    if args.disable_cast:
        model["enabled_casts"] = tuple(c for c in CASTS if c not in args.disable_cast)
    if args.no_highway:
        model["use_highway"] = False
    if args.no_lstm:
        model["use_lstm"] = False
    training = {
        key: getattr(args, key)
        for key in ("batch_size", "epochs", "patience", "lr")
        if getattr(args, key) is not None
    }
    run = RunConfig(
        command=args.command,
        out=args.out,
        train=args.train,
        dev=args.dev,
        test=args.test,
        embeddings=args.embeddings,
        checkpoint=args.checkpoint,
        profile=args.profile or "custom",
        profile_given=args.profile is not None,
        seed=args.seed,
        model_overrides=model,
        train_overrides=training,
    )
    return run, args


def _require(run: RunConfig, *names: str) -> None:
    for name in names:
        path = getattr(run, name)
        if path is None:
            raise UsageError(f"--{name} is required for --command {run.command}")
        if not Path(path).is_file():
            raise DataError(f"{name} file not found: {path}")


def _checkpoint_path(run: RunConfig) -> Path:
    path = run.checkpoint or run.out / CHECKPOINT_NAME
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return path


def _vocab_for(pairs: Sequence[Pair]) -> Vocabulary:
    return build_vocab([p.query for p in pairs] + [p.doc for p in pairs])


def _write_report(out: Path, stem: str, report: MetricsReport) -> None:
    (out / f"{stem}.tsv").write_text(report.to_tsv())
    (out / f"{stem}.txt").write_text(report.to_text())


def fit(run: RunConfig, setting: str | None = None):
    """Load data, build a model and train it; shared by train and ablate."""
    _require(run, "train", "embeddings")
    train_pairs = read_pairs(run.train)
    dev_pairs = read_pairs(run.dev) if run.dev else None
    vocab = _vocab_for(train_pairs + (dev_pairs or []))
    table = load_embeddings(run.embeddings, vocab, rng=np.random.default_rng(run.seed))
    config = run.model_config(table.dim)
    if setting is not None:
        config = ablation_config(config, setting)
    model = MCAN.create(config, table, seed=run.seed)
    result = train(model, train_pairs, dev_pairs, vocab, run.train_config())
    return model, vocab, result, dev_pairs


def cmd_train(run: RunConfig) -> int:
    run.out.mkdir(parents=True, exist_ok=True)
    model, vocab, result, dev_pairs = fit(run)
    save_checkpoint(run.out / CHECKPOINT_NAME, model, vocab)
    (run.out / TRAIN_LOG_NAME).write_text("".join(r.to_line() + "\n" for r in result.log))
    if dev_pairs:
        _write_report(run.out, "dev_metrics", _evaluate(model, vocab, dev_pairs)[0])
    logger.info("best epoch %d, checkpoint written to %s", result.best_epoch, run.out / CHECKPOINT_NAME)
    return EXIT_OK


def _evaluate(model: MCAN, vocab: Vocabulary, pairs: Sequence[Pair]):
    scores = score_pairs(model, pairs, vocab)
    return evaluate_scores(pairs, scores), scores


def evaluate_scores(pairs: Sequence[Pair], scores) -> MetricsReport:
    return mean_metrics(
        group_scores([p.query_id for p in pairs], [p.doc_id for p in pairs], [p.label for p in pairs], scores)
    )


def check_compatible(run: RunConfig, config: ModelConfig) -> None:
    differing = {
        key: (value, getattr(config, key))
        for key, value in run.requested_model_fields().items()
        if getattr(config, key) != value
    }
    if differing:
        detail = ", ".join(f"{k}: requested {a!r}, checkpoint has {b!r}" for k, (a, b) in sorted(differing.items()))
        raise UsageError(f"run configuration does not match checkpoint ({detail})")


def cmd_eval(run: RunConfig) -> int:
    _require(run, "test")
    model, vocab = load_checkpoint(_checkpoint_path(run))
    check_compatible(run, model.config)
    pairs = read_pairs(run.test)
    report, scores = _evaluate(model, vocab, pairs)
    run.out.mkdir(parents=True, exist_ok=True)
    _write_report(run.out, "test_metrics", report)
    with (run.out / "test_scores.tsv").open("w", encoding="utf-8") as fh:
        for p, s in zip(pairs, scores):
            fh.write(f"{p.query_id}\t{p.doc_id}\t{p.label}\t{float(s)!r}\n")
    logger.info("MAP %.4f  MRR %.4f  P@1 %.4f", report.map, report.mrr, report.p_at_1)
    return EXIT_OK


def inspect_rows(model: MCAN, vocab: Vocabulary, pairs: Sequence[Pair]) -> list[list]:
    """One row per real token per side: pair, query id, side, position, token, f1..f12."""
    rows = []
    cap = model.config.max_len
    for batch in make_batches(pairs, 64, None, vocab, cap):
        zq, zd = model.features(batch.q_ids, batch.q_mask, batch.d_ids, batch.d_mask)
        for row, idx in enumerate(batch.index):
            pair = pairs[idx]
            for side, tokens, z in (("query", pair.query, zq), ("doc", pair.doc, zd)):
                for pos, token in enumerate(tokens[:cap]):
                    rows.append([int(idx), pair.query_id, side, pos, token, *map(float, z[row, pos])])
    rows.sort(key=lambda r: r[0])
    return rows


def inspect_header() -> list[str]:
    features = [f"f{i}_{name}" for i, name in enumerate(FEATURE_NAMES, start=1)]
    return ["pair", "query_id", "side", "position", "token", *features]


def cmd_inspect(run: RunConfig) -> int:
    _require(run, "test")
    model, vocab = load_checkpoint(_checkpoint_path(run))
    check_compatible(run, model.config)
    pairs = read_pairs(run.test)
    run.out.mkdir(parents=True, exist_ok=True)
    with (run.out / "inspect.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(inspect_header())
        for row in inspect_rows(model, vocab, pairs):
            writer.writerow(row[:5] + [repr(v) for v in row[5:]])
    return EXIT_OK


def ablation_config(base: ModelConfig, setting: str) -> ModelConfig:
    changes = dict(ABLATIONS[setting])
    drop = changes.pop("drop_cast", None)
    if drop is not None:
        changes["enabled_casts"] = tuple(c for c in base.enabled_casts if c != drop)
    return base.replace(**changes)


def cmd_ablate(run: RunConfig) -> int:
    _require(run, "train", "dev", "embeddings")
    run.out.mkdir(parents=True, exist_ok=True)
    lines = ["setting\tMAP\tMRR\tP@1\tz_dim\tparameters\tbest_epoch"]
    for setting in ABLATIONS:
        logger.info("ablation %s", setting)
        model, vocab, result, dev_pairs = fit(run, setting)
        report, _ = _evaluate(model, vocab, dev_pairs)
        lines.append(
            f"{setting}\t{report.map!r}\t{report.mrr!r}\t{report.p_at_1!r}\t"
            f"{model.config.z_dim}\t{model.num_parameters()}\t{result.best_epoch}"
        )
    (run.out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect, "ablate": cmd_ablate}


def main(argv: Sequence[str] | None = None) -> int:
    run, args = parse_run_config(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[run.command](run)
    except UsageError as exc:
        print(f"mcan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, UnicodeDecodeError) as exc:
        print(f"mcan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"mcan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"mcan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
