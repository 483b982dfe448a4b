"""Command-line entry point: run, mitigate, verify, report."""

from __future__ import annotations

import argparse
import sys

from ..errors import ConfigError, StudyFailed


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hwfair", description="Hardware-sensitivity fairness experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="experiment config (TOML)")
        sp.add_argument("--workers", type=int, default=1, help="parallel training jobs")
        sp.add_argument("--force", action="store_true", help="retrain runs that already completed")
        sp.add_argument("--output", help="output directory (overrides the config)")

    common(sub.add_parser("run", help="train the sweep and write reports"))
    common(sub.add_parser("mitigate", help="grid-search the boundary-distance penalty"))
    v = sub.add_parser("verify", help="run acceptance suites")
    v.add_argument("suite", choices=["fast", "theorems", "mitigation", "all"])
    r = sub.add_parser("report", help="summarize a finished run directory")
    r.add_argument("run_dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from . import acceptance, runner

    try:
        if args.command == "run":
            res = runner.run_experiment(args.config, args.output, args.workers, args.force)
            print(runner.report(res.out_dir))
            return 0 if res.ok else 1
        if args.command == "mitigate":
            rep = runner.mitigation_study(args.config, args.output, args.workers, args.force)
            print(runner.format_mitigation(rep))
            return 0
        if args.command == "verify":
            results = acceptance.verify(args.suite)
            failed = [r.cid for r in results if not r.passed]
            print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
            return 1 if failed else 0
        print(runner.report(args.run_dir))
        return 0
    except (ConfigError, StudyFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
