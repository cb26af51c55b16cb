"""Command-line entry point: ``ciqlab <subcommand> [--config F] [--seed N] [--out DIR] [--format csv|json]``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .agents import load_agent, save_agent
from .envs import BanditConfig
from .errors import CiqError, ConfigError
from .harness import (ExperimentConfig, InterferenceSpec, aggregate, bandit_label_advantage, clever_scores,
                      evaluate, load_config, robustness_report, run_training, transfer_matrix)
from .metrics import read_recordings, write_recordings

log = logging.getLogger("ciqlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_rows(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def parse_spec(text: str, base: InterferenceSpec | None = None) -> InterferenceSpec:
    """``kind@level`` (e.g. ``gaussian@0.2``) or ``clean``."""
    base = base or InterferenceSpec()
    if text in ("clean", "none"):
        return InterferenceSpec(kind="none", epsilon=base.epsilon)
    kind, _, level = text.partition("@")
    try:
        value = float(level) if level else base.level
    except ValueError:
        raise ConfigError(f"bad interference spec {text!r}; expected kind@level") from None
    spec = InterferenceSpec(kind=kind, level=value, epsilon=base.epsilon)
    spec.validate(text)
    return spec


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_(seeds=[args.seed])
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def cmd_train(args) -> int:
    cfg, out = _config(args), _out(args)
    curves = []
    for seed in cfg.seeds:
        agent, curve = run_training(cfg, seed)
        curves.append(curve)
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(exist_ok=True)
        if args.format == "json":
            write_json(run_dir / "curve.json", {"returns": curve.returns, "running_mean": curve.running_mean,
                                                "eval_at": curve.eval_at, "eval_scores": curve.eval_scores})
        else:
            (run_dir / "curve.csv").write_text(curve.to_csv())
            (run_dir / "eval_curve.csv").write_text(curve.eval_csv())
        write_json(run_dir / "summary.json", curve.summary())
        save_agent(agent, run_dir / "checkpoint", extra={"seed": seed, "config": cfg.to_dict()})
        print(f"seed {seed}: episodes={len(curve.returns)} solved_at={curve.episodes_to_solve} "
              f"score={curve.final_score:.1f} ({curve.wall_seconds:.1f}s)", file=sys.stderr)
    write_json(out / "summary.json", {"agent": cfg.agent, "interference": cfg.interference.name(),
                                      **aggregate(curves)})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out = _config(args), _out(args)
    agent, _ = load_agent(args.checkpoint)
    returns, _ = evaluate(agent, cfg, args.episodes, seed=_seed(args, cfg))
    if args.format == "json":
        write_json(out / "eval.json", {"returns": returns, "mean": float(np.mean(returns))})
    else:
        write_rows(out / "eval.csv", ["episode", "return"], [[k, repr(r)] for k, r in enumerate(returns)])
    return EXIT_OK


def cmd_record(args) -> int:
    cfg, out = _config(args), _out(args)
    agent, _ = load_agent(args.checkpoint)
    returns, recs = evaluate(agent, cfg, args.episodes, record=True, seed=_seed(args, cfg))
    write_recordings(out / "recordings.csv", recs)
    write_json(out / "record_summary.json", {"returns": returns, "steps": int(sum(len(r) for r in recs))})
    return EXIT_OK


def cmd_report(args) -> int:
    cfg, out = _config(args), _out(args)
    agent, _ = load_agent(args.checkpoint)
    recs = read_recordings(args.recordings)
    report = robustness_report(agent, recs, cfg.clever_config(), seed=_seed(args, cfg),
                               max_states=cfg.clever_states)
    write_json(out / "report.json", report)
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg, out = _config(args), _out(args)
    base = cfg.interference
    train = [parse_spec(s, base) for s in args.train]
    test = [parse_spec(s, base) for s in args.test]
    result = transfer_matrix(cfg, train, test, episodes=args.episodes)
    if args.format == "json":
        write_json(out / "transfer.json", result)
    else:
        write_rows(out / "transfer.csv", ["train"] + result["test"],
                   [[name] + [repr(v) for v in row] for name, row in zip(result["train"], result["mean_return"])])
    return EXIT_OK


def cmd_bandit(args) -> int:
    cfg = BanditConfig(q1=args.q1, p_blackout=args.p_blackout)
    out = _out(args)
    seed = args.seed if args.seed is not None else 0
    write_json(out / "bandit.json", bandit_label_advantage(cfg, args.budget, np.random.default_rng(seed)))
    return EXIT_OK


def cmd_clever(args) -> int:
    cfg, out = _config(args), _out(args)
    agent, _ = load_agent(args.checkpoint)
    seed = _seed(args, cfg)
    recs = read_recordings(args.recordings) if args.recordings else \
        evaluate(agent, cfg, max(cfg.record_episodes, 1), record=True, seed=seed)[1]
    ccfg = cfg.clever_config()
    scores = clever_scores(agent, recs, ccfg, cfg.clever_states, np.random.default_rng(seed))
    summary = {"agent": agent.kind, "mean": float(scores.mean()), "median": float(np.median(scores)),
               "states": int(len(scores)), "p": "inf" if ccfg.p == math.inf else ccfg.p,
               "radius": ccfg.radius, "estimator": ccfg.estimator}
    if args.format == "json":
        write_json(out / "clever.json", {**summary, "scores": scores.tolist()})
    else:
        write_rows(out / "clever.csv", ["state", "clever_q"], [[k, repr(float(v))] for k, v in enumerate(scores)])
        write_json(out / "clever_summary.json", summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config's seeds")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="ciqlab", parents=[common],
                                description="Train and audit Q-learning agents under observation interference.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", parents=[common], help="train agents, one run per seed")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "greedy evaluation of a checkpoint"),
                                 ("record", cmd_record, "record paired clean/interfered episodes")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--episodes", type=int, default=10)
        sp.set_defaults(func=func)

    sp = sub.add_parser("report", parents=[common], help="robustness report from a recording")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--recordings", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("transfer", parents=[common], help="train/test interference transfer matrix")
    sp.add_argument("--train", nargs="+", required=True, metavar="KIND@LEVEL")
    sp.add_argument("--test", nargs="+", required=True, metavar="KIND@LEVEL")
    sp.add_argument("--episodes", type=int, default=20)
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("bandit", parents=[common], help="label-advantage demo on the blackout bandit")
    sp.add_argument("--q1", type=float, default=0.8)
    sp.add_argument("--p-blackout", type=float, default=0.2)
    sp.add_argument("--budget", type=int, default=100_000)
    sp.set_defaults(func=cmd_bandit)

    sp = sub.add_parser("clever", parents=[common], help="CLEVER-Q scores on recorded clean states")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--recordings")
    sp.set_defaults(func=cmd_clever)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", "."), ("format", "csv")):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CiqError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
