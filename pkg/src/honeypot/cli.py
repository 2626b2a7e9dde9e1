"""``honeypot`` command line: pipeline stages, full runs and sweeps.

Exit codes: 0 success, 2 bad config or missing inputs, 3 full-run finished
but an acceptance threshold was missed, 4 numeric abort (stage is named).
"""
import argparse
import sys
from pathlib import Path

from . import config as C
from . import pipeline as P
from .errors import CodecError, ConfigError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_THRESHOLDS, EXIT_NUMERIC = 0, 2, 3, 4


def _parser():
    parser = argparse.ArgumentParser(prog="honeypot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment JSON config")
        p.add_argument("--out", help="output directory (default: config out_dir)")
        p.add_argument("--seed", type=int, help="override the master seed")
        return p

    add("gen-data", "generate and write the dataset files")
    add("train-victim", "train the victim classifier")
    add("defend", "fine-tune the honeypot head by bi-level optimization")
    p = add("extract", "extract substitutes from the defended and undefended oracles")
    p.add_argument("--label-mode", choices=["soft", "hard"])
    p.add_argument("--strategy", choices=["random", "entropy"])
    p.add_argument("--oracle", choices=["defended", "undefended", "both"], default="both")
    add("evaluate", "score all models and write report.json")
    p = add("full-run", "all stages in order")
    p.add_argument("--label-mode", choices=["soft", "hard"])
    p.add_argument("--strategy", choices=["random", "entropy"])
    p = add("sweep", "one full run per value of a config axis; writes a CSV")
    p.add_argument("--axis", required=True, choices=sorted(P.SWEEP_AXES))
    p.add_argument("--values", required=True, nargs="+")
    return parser


def _effective_config(args):
    cfg = C.load_config(args.config)
    return C.with_overrides(cfg, seed=args.seed, label_mode=getattr(args, "label_mode", None),
                            strategy=getattr(args, "strategy", None), out_dir=args.out)


def run(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        cmd = args.command
        if cmd == "gen-data":
            P.gen_data(cfg, out)
        elif cmd == "train-victim":
            victim = P.train_victim_stage(cfg, out)
            print(f"victim test accuracy {victim.test_accuracy:.4f}")
        elif cmd == "defend":
            P.defend(cfg, out)
        elif cmd == "extract":
            P.extract(cfg, out, P.ORACLES if args.oracle == "both" else (args.oracle,))
        elif cmd in ("evaluate", "full-run"):
            report = P.evaluate(cfg, out) if cmd == "evaluate" else P.full_run(cfg, out)
            for name, check in sorted(report["acceptance"]["checks"].items()):
                print(f"{'PASS' if check['passed'] else 'FAIL'} {name} = {check['value']}")
            print(f"report: {out / 'report.json'}")
            if cmd == "full-run" and not report["acceptance"]["passed"]:
                return EXIT_THRESHOLDS
        elif cmd == "sweep":
            rows = P.sweep(cfg, out, args.axis, args.values)
            for row in rows:
                print(row)
            print(f"csv: {out / f'sweep-{args.axis}.csv'}")
    except (ConfigError, UsageError, CodecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except P.StageError as exc:
        print(f"numeric abort in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
