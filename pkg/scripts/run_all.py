"""Run all four experiments at desk scale and print a median table.

    python3 scripts/run_all.py --out reports [--paper-scale] [--set KEY=VALUE ...]
"""

import argparse
import logging
import time
from pathlib import Path

from convsmoother import evaluation as ev


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="reports")
    parser.add_argument("--seed", default="1")
    parser.add_argument("--paper-scale", action="store_true")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="extra experiment setting, repeatable")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = []
    for experiment in ev.EXPERIMENTS:
        start = time.perf_counter()
        values = {"seed": args.seed, "paper_scale": str(args.paper_scale)}
        values.update(item.split("=", 1) for item in args.set)
        config = ev.build_config(experiment, values)
        report, model, history = ev.run_experiment(config)
        out = Path(args.out) / experiment
        ev.emit_report(report, out)
        ev.save_artifacts(out, model, history)
        minutes = (time.perf_counter() - start) / 60
        for method, stats in report.summary().items():
            rows.append(f"{experiment:<24}{method:<20}{stats['median']:>10.4f}{minutes:>9.1f}")
    print(f"{'experiment':<24}{'method':<20}{'median':>10}{'minutes':>9}")
    print("\n".join(rows))


if __name__ == "__main__":
    main()
