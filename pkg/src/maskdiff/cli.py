"""Command-line entry point: ``maskdiff <subcommand> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, config_fields, format_value, load_config
from .errors import ConfigError, DataError, NumericError
from .masking import FrequencyTable, MaskingError, build_frequency_table, sequence_mask_probs
from .schedules import ScheduleDomainError
from .tokenizer import TokenizerError, Vocab, train_bpe
from .trainer import NON_MASKABLE, Trainer, build_trainer, load_model, read_documents

EXIT_OK = 0
EXIT_CONFIG = ConfigError.exit_code
EXIT_DATA = DataError.exit_code
EXIT_NUMERIC = NumericError.exit_code

SUBCOMMANDS = ("tokenizer-train", "freq-table", "train", "eval-pll", "eval-pairs", "schedule-stats", "mask-preview")


def config_help() -> str:
    lines = ["config keys (flat 'key = value' file, or --set key=value):"]
    for f in config_fields():
        default = format_value(f.default)
        if f.name == "seed" and not default:
            default = "(required)"
        lines.append(
            f"  {f.name:<18} default={default or '(empty)':<12} [{f.metadata['unit']}]  {f.metadata['doc']}"
        )
    return "\n".join(lines)


def echo_config(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return out


def _require_file(cfg: RunConfig, key: str) -> Path:
    value = getattr(cfg, key)
    if not value or not Path(value).is_file():
        raise ConfigError(f"{key}: path {value!r} does not exist")
    return Path(value)


# -- subcommands -------------------------------------------------------------

def cmd_tokenizer_train(cfg, args):
    corpus = _require_file(cfg, "corpus")
    out = echo_config(cfg)
    vocab = train_bpe(read_documents(corpus), cfg.vocab_size)
    path = Path(cfg.vocab) if cfg.vocab else out / "vocab.txt"
    vocab.save(path)
    print(f"wrote {path} ({len(vocab)} tokens, {len(vocab.merges)} merges)")


def cmd_freq_table(cfg, args):
    corpus = _require_file(cfg, "corpus")
    vocab = Vocab.load(_require_file(cfg, "vocab"))
    out = echo_config(cfg)
    stream = (tok for doc in read_documents(corpus) for tok in vocab.encode(doc))
    table = build_frequency_table(stream, exclude=vocab.special_ids, weight_eps=cfg.weight_eps)
    path = Path(cfg.freq_table) if cfg.freq_table else out / "freq_table.tsv"
    table.save(path)
    print(f"wrote {path} ({len(table.counts)} token types)")


def cmd_train(cfg, args):
    if args.resume:
        echo_config(cfg)
        trainer = Trainer.resume(args.resume, out_dir=cfg.out_dir)
    else:
        trainer = build_trainer(cfg)
    trainer.run()
    final = trainer.eval_history[-1] if trainer.eval_history else {}
    print(f"trained {trainer.step} steps; final eval {final}")


def _load_checkpoint_arg(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return load_model(args.checkpoint)


def cmd_eval_pll(cfg, args):
    from .eval import score_sentence

    model, vocab, train_cfg = _load_checkpoint_arg(args)
    echo_config(cfg)
    sentences = list(args.sentences)
    if args.input:
        sentences += read_documents(args.input)
    if not sentences:
        raise DataError("no sentences given")
    schedule = train_cfg.schedule_obj()
    print("sentence\tpll\tlength\tunk")
    for text in sentences:
        score = score_sentence(text, model, vocab, cfg.eval_conditioning, schedule=schedule)
        print(f"{text}\t{score.pll!r}\t{score.length}\t{int(score.has_unk)}")


def cmd_eval_pairs(cfg, args):
    from .eval import minimal_pair_accuracy

    model, vocab, train_cfg = _load_checkpoint_arg(args)
    out = echo_config(cfg)
    pairs = args.pairs or cfg.eval_pairs
    if not pairs:
        raise ConfigError("eval_pairs: no pairs file given")
    report = Path(args.report) if args.report else out / "pairs_report.csv"
    acc = minimal_pair_accuracy(
        pairs, model, vocab, cfg.eval_conditioning, schedule=train_cfg.schedule_obj(), report_path=report
    )
    print(f"accuracy={acc!r} report={report}")


def cmd_schedule_stats(cfg, args):
    schedule = cfg.schedule_obj()
    out = echo_config(cfg)
    t = np.arange(1, args.points + 1) / (args.points + 1)
    rates = schedule.masking_rate(t, args.tau)
    derivs = schedule.alpha_prime_magnitude(t, args.tau)
    path = Path(args.out) if args.out else out / "schedule_stats.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "masking_rate", "alpha_prime_magnitude"])
        for row in zip(t, rates, derivs):
            writer.writerow([repr(float(v)) for v in row])
    kwargs = {} if cfg.seed is None else {"seed": cfg.seed}
    mean, stderr = schedule.expected_masking_rate(args.tau, args.samples, **kwargs)
    print(f"schedule={schedule.name} tau={args.tau} mean_masking_rate={mean:.6f} "
          f"stderr={stderr:.6f} n={args.samples} csv={path}")


def cmd_mask_preview(cfg, args):
    vocab = Vocab.load(_require_file(cfg, "vocab"))
    table = FrequencyTable.load(_require_file(cfg, "freq_table"), cfg.weight_eps)
    echo_config(cfg)
    ids = np.asarray(vocab.encode(args.text), dtype=np.int64)
    if ids.size == 0:
        raise DataError("text tokenizes to nothing")
    power = cfg.mask_power_max if args.power is None else args.power
    maskable = ~np.isin(ids, NON_MASKABLE)
    plan = sequence_mask_probs(table, ids, maskable, power, args.rate)
    print(f"target_rate={args.rate} power={power} mean={plan.probs[maskable].mean():.6f}")
    print("token\tid\tweight\tprob")
    for tok, p in zip(ids, plan.probs):
        print(f"{vocab.id_to_token[tok]!r}\t{tok}\t{table.weight(int(tok)):.6f}\t{p:.6f}")


HANDLERS = {
    "tokenizer-train": cmd_tokenizer_train,
    "freq-table": cmd_freq_table,
    "train": cmd_train,
    "eval-pll": cmd_eval_pll,
    "eval-pairs": cmd_eval_pairs,
    "schedule-stats": cmd_schedule_stats,
    "mask-preview": cmd_mask_preview,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskdiff",
        description="Masked diffusion language modelling toolkit.",
        epilog=config_help() + "\n\nexit codes: 0 ok, 2 config, 3 data, 4 numeric",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value run-config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("tokenizer-train", parents=[common], help="train the BPE tokenizer")
    sub.add_parser("freq-table", parents=[common], help="count token frequencies")
    p = sub.add_parser("train", parents=[common], help="run the training loop")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval-pll", parents=[common], help="pseudo-log-likelihood of sentences")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="file with one sentence per line")
    p.add_argument("sentences", nargs="*")
    p = sub.add_parser("eval-pairs", parents=[common], help="minimal-pair accuracy")
    p.add_argument("--checkpoint")
    p.add_argument("--pairs", help="good<TAB>bad file (default: eval_pairs key)")
    p.add_argument("--report", help="per-pair CSV (default: out_dir/pairs_report.csv)")
    p = sub.add_parser("schedule-stats", parents=[common], help="tabulate a noise schedule")
    p.add_argument("--points", type=int, default=101)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--out", help="CSV path (default: out_dir/schedule_stats.csv)")
    p = sub.add_parser("mask-preview", parents=[common], help="show per-token masking probabilities")
    p.add_argument("text")
    p.add_argument("--rate", type=float, default=0.3)
    p.add_argument("--power", type=float, default=None, help="softening power (default: mask_power_max)")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TokenizerError, MaskingError, ScheduleDomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
