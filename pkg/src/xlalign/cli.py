"""Command-line entry point: gen-data, train, sweep, bandit-sim, plot-data.

Exit codes: 0 success, 2 validation or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml
from pydantic import ValidationError

from . import synth_corpus
from .config import PRESETS, ExperimentConfig, deep_merge, load_config
from .experiments import run_bandit_sim, run_plot_data, run_sweep, run_train
from .projector_net import NumericalFailure

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("xlalign")


class InputError(Exception):
    """Bad user input that is not a schema violation (paths, axis values)."""


def _common() -> argparse.ArgumentParser:
    # default=SUPPRESS lets the flags appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="YAML config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output file or directory")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress summaries")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="xlalign", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus file")
    g.add_argument("--preset", choices=sorted(PRESETS))

    t = sub.add_parser("train", parents=[common], help="train and evaluate one run")
    t.add_argument("--corpus", type=Path, help="corpus file (generated from the config when omitted)")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--steps", type=int, help="override training.steps")

    s = sub.add_parser("sweep", parents=[common], help="one run per value of a config key")
    s.add_argument("--corpus", type=Path)
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--axis", required=True, help="config key, e.g. pairing or training.alpha")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--steps", type=int, help="override training.steps")

    b = sub.add_parser("bandit-sim", parents=[common], help="scheduler against synthetic rewards")
    b.add_argument("--steps", type=int, help="override bandit.steps")
    b.add_argument("--seeds", type=int, help="override bandit.n_seeds")
    b.add_argument("--arm-means", help="comma-separated arm means")
    b.add_argument("--tau", type=float, help="override scheduler.tau")

    pd = sub.add_parser("plot-data", parents=[common], help="projection and scatter CSVs of a run")
    pd.add_argument("run_dir", type=Path, help="output directory of a finished train run")
    return parser


def _resolve(args: argparse.Namespace, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    config = load_config(getattr(args, "config", None), getattr(args, "preset", None), seed=getattr(args, "seed", None))
    if overrides:
        config = ExperimentConfig.model_validate(deep_merge(config.model_dump(), overrides))
    return config


def _out(args: argparse.Namespace, default: str) -> Path:
    return Path(getattr(args, "out", default))


def _corpus(args: argparse.Namespace, config: ExperimentConfig) -> synth_corpus.Corpus:
    if getattr(args, "corpus", None) is not None:
        return synth_corpus.load(args.corpus)
    return synth_corpus.generate(config.corpus, config.seed)


def _parse_value(text: str) -> Any:
    return yaml.safe_load(text) if text.strip() else text


def cmd_gen_data(args: argparse.Namespace) -> str:
    config = _resolve(args)
    corpus = synth_corpus.generate(config.corpus, config.seed)
    path = _out(args, "corpus.txt")
    try:
        synth_corpus.save(corpus, path)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror or exc}") from None
    return (
        f"wrote {path}: languages {','.join(corpus.train_languages)}; "
        f"holdout {','.join(corpus.holdout_languages) or '-'}; items {len(corpus.items)} "
        f"({len(corpus.item_ids('train'))} train / {len(corpus.item_ids('test'))} test)"
    )


def cmd_train(args: argparse.Namespace) -> str:
    overrides = {"training": {"steps": args.steps}} if args.steps is not None else None
    config = _resolve(args, overrides)
    corpus = _corpus(args, config)
    out = _out(args, "run")
    s = run_train(config, corpus, out)["summary"]
    return (
        f"run {out}: loss {s['initial_loss']:.4f} -> {s['final_loss']:.4f}; "
        f"R@1 {s['r_at_1_before']:.3f} -> {s['r_at_1_after']:.3f}; "
        f"1-JSD {s['one_minus_jsd_before']:.3f} -> {s['one_minus_jsd_after']:.3f}; "
        f"holdout R@1 {s['holdout_r_at_1_before']:.3f} -> {s['holdout_r_at_1_after']:.3f}"
    )


def cmd_sweep(args: argparse.Namespace) -> str:
    overrides = {"training": {"steps": args.steps}} if args.steps is not None else None
    config = _resolve(args, overrides)
    values = [_parse_value(v) for v in args.values.split(",")]
    if not values or any(v == "" for v in values):
        raise InputError("--values must list at least one non-empty value")
    corpus = _corpus(args, config)
    out = _out(args, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(config, corpus, args.axis, values, out)
    lines = [f"sweep {args.axis} -> {out / 'comparison.csv'}"]
    lines += [f"  {r[1]}: R@1 {float(r[2]):.3f}  1-JSD {float(r[3]):.3f}  loss {float(r[5]):.4f}" for r in rows]
    return "\n".join(lines)


def cmd_bandit_sim(args: argparse.Namespace) -> str:
    bandit: dict[str, Any] = {}
    if args.steps is not None:
        bandit["steps"] = args.steps
        if args.steps < 1:
            raise InputError(f"--steps must be >= 1, got {args.steps}")
    if args.seeds is not None:
        bandit["n_seeds"] = args.seeds
    if args.arm_means is not None:
        bandit["arm_means"] = [float(x) for x in args.arm_means.split(",")]
    overrides: dict[str, Any] = {"bandit": bandit}
    if args.tau is not None:
        overrides["scheduler"] = {"tau": args.tau}
    config = _resolve(args, overrides)
    if config.bandit.window_start > config.bandit.steps:
        log.warning("window_start %d exceeds %d steps; using the whole run", config.bandit.window_start, config.bandit.steps)
        config = ExperimentConfig.model_validate(
            deep_merge(config.model_dump(), {"bandit": {"window_start": 1}})
        )
    out = _out(args, "bandit")
    res = run_bandit_sim(config, out)
    freqs = ", ".join(f"{f:.3f}" for f in res["mean_frequencies"])
    return (
        f"bandit {out}: mean selection frequencies [{freqs}]; best arm {res['best_arm']} "
        f"frequency in window {res['window_best_frequency']:.3f}"
    )


def cmd_plot_data(args: argparse.Namespace) -> str:
    try:
        paths = run_plot_data(args.run_dir)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    return "wrote " + ", ".join(str(p) for p in paths.values())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "bandit-sim": cmd_bandit_sim,
    "plot-data": cmd_plot_data,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    quiet = getattr(args, "quiet", False)
    logging.basicConfig(level=logging.ERROR if quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        message = COMMANDS[args.command](args)
    except NumericalFailure as exc:
        last_good = "none" if exc.step is None or exc.step < 1 else exc.step - 1
        print(f"error: numerical failure: {exc} (last good step: {last_good})", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (InputError, ValueError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if not quiet:
        print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
