"""Command-line interface.

Settings resolve in three layers: built-in defaults, then the JSON file
given with ``--config``, then flags (``--set section.key=value`` reaches any
setting).  Exit codes: 0 success, 1 usage or configuration error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import Config, ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RESOLVED = "resolved_config.json"

PRECEDENCE = ("settings: built-in defaults < --config FILE < flags "
              "(--set section.key=VALUE overrides any single setting)")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_set(items):
    overrides = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        section, name = key.split(".", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides.setdefault(section, {})[name] = value
    return overrides


def resolve_config(args, extra=None):
    cfg = load_config(getattr(args, "config", None), _parse_set(getattr(args, "set", None)))
    if extra:
        cfg.update(extra)
    return cfg


def echo_config(cfg, directory):
    os.makedirs(directory or ".", exist_ok=True)
    path = os.path.join(directory or ".", RESOLVED)
    with open(path, "w") as fh:
        fh.write(cfg.to_json() + "\n")
    return path


def _flags(**pairs):
    out = {}
    for dotted, value in pairs.items():
        if value is None:
            continue
        section, key = dotted.split("__", 1)
        out.setdefault(section, {})[key] = value
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    from .data import generate_corpus

    cfg = resolve_config(args, _flags(data__seed=args.seed))
    if args.seconds <= 0:
        raise UsageError("--seconds must be positive")
    path = generate_corpus(args.out, cfg, seconds=args.seconds)
    echo_config(cfg, args.out)
    print(f"wrote {path}")


def _corpus(path, split, cfg):
    from .data import load_corpus

    return list(load_corpus(path, split, cfg.audio.sample_rate))


def _load_init(model, path):
    from .train import load_checkpoint

    ckpt = load_checkpoint(path)
    model.store.load_state(ckpt.params)


def cmd_train(args):
    from .model import Separator
    from .train import TrainPlan, run_plan

    cfg = resolve_config(args, _flags(train__strategy=args.strategy, train__lr=args.lr,
                                      train__seed=args.seed, train__max_epochs=args.epochs))
    manifest = os.path.join(args.data, "manifest.jsonl") if os.path.isdir(args.data) else args.data
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest at {manifest}")
    train_set = _corpus(args.data, "train", cfg)
    valid_set = _corpus(args.data, "valid", cfg)
    model = Separator(cfg)
    if args.init:
        _load_init(model, args.init)
    plan = TrainPlan.for_strategy(cfg.train.strategy, cfg.train)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    echo_config(cfg, out_dir)
    log_path = args.log or os.path.splitext(args.out)[0] + ".log.jsonl"
    echo = print if args.verbose else None
    result = run_plan(plan, model, train_set, valid_set, log_path, args.out, echo)
    for entry in result.phase_ledger:
        print(f"phase {entry['phase']}: budget {entry['budget']}, ran {entry['epochs']} epochs")
    print(f"checkpoint {args.out}, log {log_path}")


def cmd_pretrain(args):
    from .model import Separator
    from .train import make_checkpoint, pretrain, save_checkpoint

    cfg = resolve_config(args, _flags(train__seed=args.seed))
    items = _corpus(args.data, args.split, cfg)
    model = Separator(cfg)
    if args.init:
        _load_init(model, args.init)
    modules = tuple(m.strip() for m in args.modules.split(",") if m.strip())
    pretrain(model, items, steps=args.steps, lr=args.lr, seed=cfg.train.seed, modules=modules,
             echo=print if args.verbose else None)
    save_checkpoint(args.out, make_checkpoint(model, seed=cfg.train.seed))
    echo_config(cfg, os.path.dirname(os.path.abspath(args.out)))
    print(f"checkpoint {args.out}")


def _model_from(args):
    from .train import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    return model_from_checkpoint(ckpt, _parse_set(getattr(args, "set", None)))


def cmd_separate(args):
    from .data import read_f0_csv
    from .spectral import AudioBuffer, read_wav, write_wav

    model = _model_from(args)
    cfg = model.cfg
    mix = read_wav(args.inp, expected_rate=cfg.audio.sample_rate)
    f0 = None
    if args.f0:
        f0 = read_f0_csv(args.f0)[1]
    if cfg.salience.source == "oracle" and f0 is None:
        raise UsageError("this model uses oracle salience: pass --f0 with an F0 CSV")
    if f0 is not None and f0.shape[0] != len(model.voices):
        raise ValueError(f"F0 CSV has {f0.shape[0]} voices, model expects {len(model.voices)}")
    estimates, _, _ = model.separate(mix.samples, f0)
    os.makedirs(args.out, exist_ok=True)
    for voice, est in zip(model.voices, estimates):
        write_wav(os.path.join(args.out, f"{voice}.wav"), AudioBuffer(est.astype(np.float32), cfg.audio.sample_rate))
    echo_config(cfg, args.out)
    print(f"wrote {len(estimates)} stems to {args.out}")


def cmd_evaluate(args):
    from .evaluate import evaluate_corpus

    model = _model_from(args)
    cfg = model.cfg
    items = _corpus(args.data, args.split, cfg)
    if not items:
        raise ValueError(f"no excerpts in split {args.split!r}")
    report = evaluate_corpus(model, items)
    out_dir = os.path.dirname(os.path.abspath(args.report))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.report, "w") as fh:
        fh.write(report.to_json() + "\n")
    echo_config(cfg, out_dir)
    print(report.table())


def cmd_gradcheck(args):
    from .gradcheck import CHECKS, run_suite

    checks = CHECKS if not args.only else {k: CHECKS[k] for k in args.only}
    results = run_suite(checks)
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results) if results else 0.0
    print(f"{len(results) - len(failed)}/{len(results)} checks passed, worst max_rel_err={worst:.3e}")
    if args.report:
        with open(args.report, "w") as fh:
            json.dump([{"name": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed,
                        "seconds": r.seconds} for r in results], fh, indent=2)
    return EXIT_USAGE if failed else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = Parser(prog="diffsep", description=__doc__.split("\n\n")[0], epilog=PRECEDENCE)
    p.add_argument("--log-level", default="WARNING", help="python logging level")
    sub = p.add_subparsers(dest="command", parser_class=Parser, required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one setting (repeatable)")

    g = sub.add_parser("gen-data", help="generate a synthetic quartet corpus", epilog=PRECEDENCE)
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seconds", type=float, required=True, help="total audio duration")
    g.add_argument("--seed", type=int, help="generation seed (data.seed)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train with one strategy", epilog=PRECEDENCE)
    common(t)
    t.add_argument("--strategy", choices=["sfsf", "sftsft", "sfsft", "wup", "sfsftf"])
    t.add_argument("--data", required=True, help="corpus directory or manifest")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--init", help="checkpoint to initialize the parameters from")
    t.add_argument("--epochs", type=int, help="epoch cap (train.max_epochs)")
    t.add_argument("--lr", type=float, help="learning rate (train.lr)")
    t.add_argument("--seed", type=int, help="training seed (train.seed)")
    t.add_argument("--log", help="training log path (default: next to the checkpoint)")
    t.add_argument("--verbose", action="store_true", help="print one line per epoch")
    t.set_defaults(fn=cmd_train)

    pt = sub.add_parser("pretrain", help="supervised warm start of the F0 stack", epilog=PRECEDENCE)
    common(pt)
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True, help="checkpoint path")
    pt.add_argument("--split", default="train")
    pt.add_argument("--init", help="checkpoint to start from")
    pt.add_argument("--steps", type=int, default=600)
    pt.add_argument("--lr", type=float, default=1e-2)
    pt.add_argument("--modules", default="assignment", help="comma list from: assignment,salience")
    pt.add_argument("--seed", type=int)
    pt.add_argument("--verbose", action="store_true")
    pt.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("separate", help="separate one mixture WAV into stems")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True, help="mono 16 kHz mixture WAV")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--f0", help="F0 CSV (required for oracle-salience models)")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.set_defaults(fn=cmd_separate)

    e = sub.add_parser("evaluate", help="score a checkpoint on a corpus split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="JSON report path")
    e.add_argument("--split", default="test")
    e.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    e.set_defaults(fn=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--only", nargs="*", help="subset of check names")
    c.add_argument("--report", help="optional JSON report path")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"diffsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        print(f"diffsep: error: unknown name {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit 2
        print(f"diffsep: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
