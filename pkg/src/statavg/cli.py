"""Command-line entry point: ``statavg {stats,synth,train,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Failures print one line to stderr::

    statavg: error code=3 kind=data message="..."
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import records
from .data import DataError, SynthSpec, synth_metadata, synth_noniid_generate, write_csv
from .experiment import ConfigError, format_summary, load_config, run_experiment, with_overrides
from .nn import NumericalError
from .report import generate_report
from .stats import aggregate_stats, read_stats_file

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_stats(args) -> int:
    per_file = []
    for path in args.inputs:
        try:
            per_file.append((path, read_stats_file(path)))
        except FileNotFoundError:
            raise CLIError(EXIT_DATA, f"no such file: {path}") from None
        except (records.RecordError, DataError) as exc:
            raise CLIError(EXIT_DATA, f"{path}: {exc}") from None
    ref_path, ref = per_file[0]
    for path, sts in per_file:
        for st in sts:
            if st.num_features != ref[0].num_features:
                raise CLIError(EXIT_DATA, f"feature count mismatch: {ref_path} has {ref[0].num_features} "
                                          f"features, {path} has {st.num_features}")
    seen: dict[int, str] = {}
    for path, sts in per_file:
        for st in sts:
            if st.client_id in seen:
                raise CLIError(EXIT_DATA, f"client_id {st.client_id} appears in both {seen[st.client_id]} and {path}")
            seen[st.client_id] = path
    g = aggregate_stats([st for _, sts in per_file for st in sts])
    if args.out:
        records.write_records(args.out, [g.to_record()])
    else:
        sys.stdout.write(records.dumps(g.to_record()) + "\n")
    out = sys.stdout if args.out else sys.stderr
    print(f"{'feature':>7} {'mean':>24} {'variance':>24}   (D = {g.total_count})", file=out)
    for s, (m, v) in enumerate(zip(g.mean, g.variance)):
        print(f"{s:>7} {records.format_number(m):>24} {records.format_number(v):>24}", file=out)
    return 0


def cmd_synth(args) -> int:
    try:
        spec = SynthSpec(
            num_clients=args.clients, samples_per_client=args.samples, num_features=args.num_features,
            num_classes=args.classes, shift_magnitude=args.shift, scale_magnitude=args.scale,
            drift_mode=args.drift, seed=args.seed, class_separation=args.separation,
        )
    except DataError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None
    parts = synth_noniid_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in parts:
        d = out / f"client_{p.client_id}"
        d.mkdir(exist_ok=True)
        write_csv(p.train, d / "train.csv")
        write_csv(p.test, d / "test.csv")
    records.write_json(out / "metadata.json", synth_metadata(parts, spec))
    print(f"wrote {len(parts)} clients to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg = with_overrides(
        cfg, seed=args.seed, strategies=args.strategy, dataset=args.dataset, label_column=args.label_column,
        features=_csv_list(args.features) if args.features else None,
    )
    if args.jobs is not None:
        cfg = replace(cfg, jobs=args.jobs)
    if args.verbose:
        cfg = replace(cfg, verbose=True)
    out = Path(args.out)
    run_experiment(cfg, out)
    print(format_summary(out / "summary.csv"))
    print(f"run directory: {out}")
    return 0


def cmd_report(args) -> int:
    written = generate_report(
        args.run_dir, args.out, features=_csv_list(args.features) if args.features else None,
        label=args.label, bins=args.bins, stage=args.stage, figures=not args.no_figures,
    )
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="statavg", description="Federated IDS training with shared feature statistics.")
    p.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="aggregate local statistics records into global statistics")
    s.add_argument("inputs", nargs="+", help="local statistics record files")
    s.add_argument("--out", help="output record file (default: stdout)")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("synth", help="generate a synthetic non-iid client dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clients", type=int, default=5)
    s.add_argument("--samples", type=int, default=2500, help="samples per client before the 4:1 split")
    s.add_argument("--num-features", type=int, default=12)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--shift", type=float, default=3.0)
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--drift", choices=("covariate_shift", "concept_drift", "none"), default="covariate_shift")
    s.add_argument("--separation", type=float, default=2.0, help="std of class centers")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run every configured strategy and write a run directory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="run")
    s.add_argument("--seed", type=int)
    s.add_argument("--strategy", action="append", help="restrict to this strategy (repeatable)")
    s.add_argument("--dataset", help="CSV dataset path (overrides the config's data source)")
    s.add_argument("--label-column")
    s.add_argument("--features", help="comma-separated feature columns")
    s.add_argument("--jobs", type=int, help="run strategies in this many processes")
    s.add_argument("--verbose", action="store_true", help="also emit micro-averaged metrics")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("report", help="accuracy curves, feature statistics and histograms for a run")
    s.add_argument("run_dir")
    s.add_argument("--out", help="output directory (default: RUN_DIR/report)")
    s.add_argument("--features", help="comma-separated features for statistics/histograms")
    s.add_argument("--label", help="class label to condition histograms on")
    s.add_argument("--bins", type=int, default=30)
    s.add_argument("--stage", choices=("raw", "smote"), default="raw", help="training data before/after SMOTE")
    s.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")
    s.set_defaults(func=cmd_report)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(f"statavg: error code={code} kind={kind} message={json.dumps(str(message))}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        return _fail(exc.code, {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_NUMERIC: "numeric"}[exc.code], exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (DataError, records.RecordError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", exc)


if __name__ == "__main__":
    sys.exit(main())
