"""Run one benchmark experiment and write its report directory.

    python3 scripts/run_experiment.py oscillator-gaussian --out reports/og seed=1 train.epochs=500

Trailing KEY=VALUE pairs override the experiment configuration.
"""

import argparse
import json
import logging
import time

from convsmoother import evaluation as ev


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("experiment", choices=ev.EXPERIMENTS)
    parser.add_argument("--out", help="report directory (default reports/<experiment>)")
    parser.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    args = parser.parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    values = dict(item.split("=", 1) for item in args.overrides)
    config = ev.build_config(args.experiment, values)
    start = time.perf_counter()
    report, model, history = ev.run_experiment(config)
    out = args.out or f"reports/{args.experiment}"
    ev.emit_report(report, out)
    ev.save_artifacts(out, model, history)
    print(json.dumps({"experiment": args.experiment, "seconds": round(time.perf_counter() - start, 1),
                      "summary": report.summary(), "extra": _brief(report.extra)}, indent=1))


def _brief(extra):
    absent = extra.get("absent_condition")
    return {"convnet_lower_fraction": absent["convnet_lower_fraction"]} if absent else {}


if __name__ == "__main__":
    main()
