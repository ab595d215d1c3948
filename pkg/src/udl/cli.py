"""Command-line entry point: ``udl <command> --config <file> --seed <u64> --out <dir>``."""

import argparse
import datetime
import json
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, FormatError, UDLError
from .experiments import COMMANDS, MemorySink, notes, resolve, run
from .io import (
    RecordWriter,
    ensure_dir,
    file_digest,
    read_record,
    spec_hash,
    write_json,
    write_matrix,
)
from .outer_opt import Workers

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class FileSink(MemorySink):
    """Streams tables to CSV files in ``out`` as rows arrive."""

    def __init__(self, out, meta):
        super().__init__()
        self.out = out
        self.meta = meta
        self._writers = []

    def table(self, name, columns):
        w = RecordWriter(os.path.join(self.out, f"{name}.csv"), columns,
                         {**self.meta, "table": name})
        self._writers.append(w)
        return w

    def checkpoint(self, name, array):
        write_matrix(os.path.join(self.out, f"{name}.udl"), array)
        self.checkpoints[name] = f"{name}.udl"

    def close(self):
        for w in self._writers:
            w.close()


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _assignment(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser():
    ap = _Parser(prog="udl", description="Lasso dictionary learning experiments.")
    ap.add_argument("--version", action="version", version=f"udl {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON file with experiment parameters")
        p.add_argument("--seed", type=_u64, required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--set", action="append", type=_assignment, default=[],
                       metavar="KEY=VALUE", help="override a parameter (JSON value)")
    v = sub.add_parser("verify", help="check the spec hash of every file in a run directory")
    v.add_argument("--out", required=True)
    return ap


def load_config(path, command):
    """Parameters from a JSON config: either flat or under ``params``."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "command" in doc and doc["command"] != command:
        raise ConfigError(f"{path}: config is for {doc['command']!r}, not {command!r}")
    params = doc.get("params", {k: v for k, v in doc.items() if k not in ("command", "seed")})
    if not isinstance(params, dict):
        raise ConfigError(f"{path}: params must be an object")
    return params


def execute(args):
    params = load_config(args.config, args.command)
    params.update(dict(args.set))
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    spec = {"command": args.command, "seed": args.seed,
            "params": resolve(args.command, params)}
    h = spec_hash(spec)
    out = ensure_dir(args.out)
    write_json(os.path.join(out, "spec.json"), {"spec_hash": h, "spec": spec})
    meta = {
        "spec_hash": h, "command": args.command, "seed": args.seed,
        "threads": args.threads,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "versions": {"udl": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "notes": notes(args.command, spec["params"]),
    }
    sink = FileSink(out, meta)
    t0 = time.perf_counter()
    try:
        with Workers(args.threads) as workers:
            run(args.command, spec["params"], args.seed, sink, workers=workers)
    finally:
        sink.close()
        sink.timing("total", time.perf_counter() - t0)
        write_json(os.path.join(out, "timing.json"), {"spec_hash": h, "seconds": sink.timings})
        digests = {f: file_digest(os.path.join(out, f)) for f in sink.checkpoints.values()}
        write_json(os.path.join(out, "manifest.json"), {"spec_hash": h, "checkpoints": digests})
    return EXIT_OK


def verify(out):
    """Problems found in a run directory (an empty list when it is consistent)."""
    problems = []
    with open(os.path.join(out, "spec.json"), encoding="utf-8") as fh:
        doc = json.load(fh)
    h = spec_hash(doc["spec"])
    if doc.get("spec_hash") != h:
        problems.append(f"spec.json: stored hash {doc.get('spec_hash')} != recomputed {h}")
    manifest = {}
    for name in sorted(os.listdir(out)):
        path = os.path.join(out, name)
        if name.endswith(".csv"):
            stored = read_record(path)[0].get("spec_hash")
        elif name.endswith(".json") and name != "spec.json":
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
            stored = obj.get("spec_hash")
            if name == "manifest.json":
                manifest = obj.get("checkpoints", {})
        else:
            continue
        if stored != h:
            problems.append(f"{name}: spec hash {stored} does not match {h}")
    for name, digest in sorted(manifest.items()):
        path = os.path.join(out, name)
        if not os.path.exists(path):
            problems.append(f"{name}: listed in manifest but missing")
        elif file_digest(path) != digest:
            problems.append(f"{name}: content digest changed")
    return problems


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command == "verify":
            problems = verify(args.out)
            for p in problems:
                print(p, file=sys.stderr)
            if problems:
                return EXIT_IO
            print(f"{args.out}: ok")
            return EXIT_OK
        return execute(args)
    except ConfigError as e:
        print(f"udl: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"udl: io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (UDLError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"udl: numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KeyError, json.JSONDecodeError) as e:
        print(f"udl: io error: malformed run directory ({e})", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
