"""``csrfhe`` command line.

Subcommands: ``train``, ``protocol``, ``compare``, ``inspect-dataset``.

Configuration comes from a flat ``key = value`` file (``#`` starts a
comment); keys are the fields of :class:`csrfhe.eval.RunConfig`. Flags
override the file, and ``--set key=value`` reaches any key. The output
directory defaults to ``$CSRFHE_OUT``, then ``out``.

Exit codes:

  0  success
  2  invalid configuration or usage
  3  I/O error (missing dataset, unwritable output)
  4  malformed or inconsistent data
  5  engine failure, including an exhausted depth budget
  6  privacy audit found violations
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import typing
from pathlib import Path

from .errors import (
    ConfigError,
    CsrFheError,
    DimensionMismatch,
    DuplicateEntry,
    IndexOutOfRange,
    InvalidRating,
    ParseError,
    PrivacyViolation,
    SubsetTooLarge,
)
from .eval import RunConfig, convergence_run, dimensions, load_movielens, popular_subset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_ENGINE = 5
EXIT_PRIVACY = 6

OUT_ENV = "CSRFHE_OUT"
_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TYPES = typing.get_type_hints(RunConfig)
_NONE_WORDS = {"none", "auto", "all", ""}


def _convert(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    hint = _TYPES[key]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    optional = type(None) in typing.get_args(hint)
    base = args[0] if args else hint
    text = raw.strip()
    if optional and text.lower() in _NONE_WORDS:
        return None
    try:
        if base is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        values[key] = _convert(key, raw)
    return values


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, str(path))


def _flag_values(args) -> dict:
    out = {}
    for flag, key in (("dataset", "dataset"), ("engine", "engine"), ("top_items", "top_items"),
                      ("frac_bits", "frac_bits"), ("iters", "iters"), ("seed", "seed"),
                      ("accounting", "accounting"), ("out", "out")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if getattr(args, "ratings", None) is not None:
        out["ratings"] = None if args.ratings == "all" else int(args.ratings)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip().replace("-", "_")
        out[key] = _convert(key, raw)
    return out


def build_config(file_values: dict, flag_values: dict) -> RunConfig:
    values = {}
    if os.environ.get(OUT_ENV):
        values["out"] = os.environ[OUT_ENV]
    values.update(file_values)
    values.update(flag_values)
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _config_from_args(args, path=None) -> RunConfig:
    path = path if path is not None else args.config
    file_values = load_config_file(path) if path else {}
    return build_config(file_values, _flag_values(args))


# --------------------------------------------------------------------------
# commands

def _check_dataset(config: RunConfig) -> None:
    if config.dataset is None:
        raise ConfigError("no dataset configured (set dataset = PATH or pass --dataset)")
    if not Path(config.dataset).is_file():
        raise FileNotFoundError(f"dataset not found: {config.dataset}")


def _print_report(report, out=None) -> None:
    out = out or sys.stdout
    for row in report.rows:
        rmse = "-" if row.rmse is None else f"{row.rmse:.6f}"
        print(f"iter {row.iteration:3d}  rmse {rmse}  ops {row.ops['total']:8d}  "
              f"writes {row.profile_writes:6d}  {row.seconds:.2f}s", file=out)


def cmd_train(config: RunConfig) -> int:
    _check_dataset(config)
    report = convergence_run(config)
    csv_path, json_path = report.write(config.out, "train")
    _print_report(report)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    return EXIT_OK


def cmd_protocol(config: RunConfig) -> int:
    _check_dataset(config)
    report = convergence_run(config)
    csv_path, json_path = report.write(config.out, "protocol")
    ledger_path = Path(config.out) / f"ledger-{report.config_hash}.csv"
    report.session.ledger.write_csv(ledger_path)
    totals = report.ledger[config.accounting]
    other = "physical" if config.accounting == "paper" else "paper"
    print(f"engine {config.engine}: n={report.dims['n']} m={report.dims['m']} M={report.dims['M']}")
    print(f"{config.accounting} accounting: {totals['ct_count']} CT, {totals['ct_bytes']} bytes")
    print(f"{other} accounting: {report.ledger[other]['ct_count']} CT, {report.ledger[other]['ct_bytes']} bytes")
    violations = report.audit["violations"]
    print(f"privacy audit: {len(violations)} violations over {report.audit['checked_values']} masked values")
    for v in violations:
        print(f"  {v}")
    print(f"wrote {ledger_path}")
    print(f"wrote {json_path}")
    return EXIT_PRIVACY if violations else EXIT_OK


def cmd_compare(config_a: RunConfig, config_b: RunConfig) -> int:
    for c in (config_a, config_b):
        _check_dataset(c)
    a, b = convergence_run(config_a), convergence_run(config_b)
    out_dir = Path(config_a.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"compare-{a.config_hash}-{b.config_hash}.csv"
    rows_a = {r.iteration: r for r in a.rows}
    rows_b = {r.iteration: r for r in b.rows}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "rmse_a", "rmse_b", "ops_a", "ops_b",
                         "writes_a", "writes_b", "seconds_a", "seconds_b"])
        for it in sorted(set(rows_a) | set(rows_b)):
            ra, rb = rows_a.get(it), rows_b.get(it)
            writer.writerow([it,
                             "" if ra is None else repr(ra.rmse), "" if rb is None else repr(rb.rmse),
                             "" if ra is None else ra.ops["total"], "" if rb is None else rb.ops["total"],
                             "" if ra is None else ra.profile_writes, "" if rb is None else rb.profile_writes,
                             "" if ra is None else f"{ra.seconds:.6f}", "" if rb is None else f"{rb.seconds:.6f}"])
    summary = out_dir / f"compare-{a.config_hash}-{b.config_hash}.json"
    summary.write_text(json.dumps({"a": a.summary(), "b": b.summary()}, indent=2, sort_keys=True) + "\n")
    def cell(row):
        return "" if row is None or row.rmse is None else f"{row.rmse:10.6f}"

    print(f"{'iter':>4}  {'rmse_a':>10}  {'rmse_b':>10}")
    for it in sorted(set(rows_a) | set(rows_b)):
        print(f"{it:4d}  {cell(rows_a.get(it)):>10}  {cell(rows_b.get(it)):>10}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_inspect(config: RunConfig) -> int:
    _check_dataset(config)
    triplets = load_movielens(config.dataset)
    n, m = dimensions(triplets)
    L = config.poly_degree // 2
    print(f"{config.dataset}: {len(triplets)} ratings, {n} users, {m} items")
    if config.top_items is not None:
        sub = popular_subset(triplets, config.top_items)
        sn, sm = dimensions(sub)
        print(f"top {config.top_items} items: {len(sub)} ratings, {sn} users, {sm} items")
        print(f"csr ciphertexts at L={L}: {math.ceil(len(sub) / L)}; "
              f"CT csr 1+ceil(M/L) = {1 + math.ceil(len(sub) / L)}, naive 1+n = {1 + sn}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point

def _add_common(p: argparse.ArgumentParser, with_config: bool = True) -> None:
    if with_config:
        p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset", help="MovieLens u.data path")
    p.add_argument("--engine", choices=["csr", "csr-batched", "naive-dense"])
    p.add_argument("--ratings", choices=["128", "256", "512", "1024", "all"])
    p.add_argument("--top-items", dest="top_items", type=int)
    p.add_argument("--frac-bits", dest="frac_bits", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--accounting", choices=["paper", "physical"])
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csrfhe", description="Encrypted CSR matrix factorization experiments.",
                                     epilog="exit codes: 0 ok, 2 config, 3 io, 4 data, 5 engine, 6 privacy")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("train", help="run training and write an RMSE report"))
    _add_common(sub.add_parser("protocol", help="run the three-party protocol and write the ledger"))
    p = sub.add_parser("compare", help="run two configs and join their reports by iteration")
    p.add_argument("config_a")
    p.add_argument("config_b")
    _add_common(p, with_config=False)
    p.add_argument("--set-b", action="append", default=[], metavar="KEY=VALUE",
                   help="override a key for the second config only")
    _add_common(sub.add_parser("inspect-dataset", help="print dataset and packing statistics"))
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "compare":
            config_a = _config_from_args(args, args.config_a)
            config_b = _config_from_args(args, args.config_b)
            extra = _flag_values(argparse.Namespace(set=args.set_b))
            config_b = config_b.replace(**extra) if extra else config_b
            return cmd_compare(config_a, config_b)
        config = _config_from_args(args)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "protocol":
            return cmd_protocol(config)
        return cmd_inspect(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ParseError, DimensionMismatch, SubsetTooLarge, DuplicateEntry, IndexOutOfRange,
            InvalidRating) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PrivacyViolation as exc:
        print(f"privacy violation: {exc}", file=sys.stderr)
        return EXIT_PRIVACY
    except (CsrFheError, ValueError) as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
