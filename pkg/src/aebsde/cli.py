"""Command line entry point: ``aebsde {run,compare,list}``.

Exit codes: 0 success, 2 usage error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from contextlib import contextmanager
from pathlib import Path

from .exceptions import ConfigurationError, TrainingError
from .experiments import REGISTRY, ExperimentConfig, get_experiment
from .solver import TrainHistory, train

log = logging.getLogger("aebsde")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
HEADER = ["step", "loss", "y0", "runtime_s"]

# config-file key -> (RolloutConfig field, type)
OVERRIDES = {
    "use_ae": ("use_ae", None),
    "learning_rate": ("learning_rate", float),
    "n_time": ("n_time", int),
    "batch_size": ("batch_size", int),
    "iters": ("max_steps", int),
    "seed": ("seed", int),
    "display_stride": ("display_stride", int),
    "valid_size": ("valid_size", int),
}
FILE_KEYS = set(OVERRIDES) | {"experiment", "out", "oracle_paths"}


class UsageError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment, dashes and underscores are interchangeable."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FILE_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; command-line flags take precedence")
    common.add_argument("--experiment", help="registered experiment id (see 'list')")
    ae = common.add_mutually_exclusive_group()
    ae.add_argument("--use-ae", dest="use_ae", action="store_const", const="true")
    ae.add_argument("--no-ae", dest="use_ae", action="store_const", const="false")
    common.add_argument("--learning-rate", dest="learning_rate")
    common.add_argument("--n-time", dest="n_time")
    common.add_argument("--batch-size", dest="batch_size")
    common.add_argument("--iters", help="number of optimisation steps")
    common.add_argument("--seed")
    common.add_argument("--display-stride", dest="display_stride")
    common.add_argument("--valid-size", dest="valid_size")
    common.add_argument("--oracle-paths", dest="oracle_paths", help="Monte Carlo paths for computed oracles")
    common.add_argument("--out", help="CSV output path (default: stdout)")
    common.add_argument("-v", "--verbose", action="store_true", help="log each history record to stderr")

    parser = argparse.ArgumentParser(prog="aebsde", description="Deep BSDE experiments with asymptotic-expansion priors")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train one experiment and write its history as CSV")
    sub.add_parser("compare", parents=[common], help="train with and without the prior on shared paths")
    sub.add_parser("list", help="show the experiment registry")
    return parser


def resolve(args: argparse.Namespace) -> tuple[ExperimentConfig, dict, dict]:
    """Merge config file and flags into ``(experiment, rollout overrides, io options)``."""
    values = read_config_file(args.config) if args.config else {}
    for key in FILE_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if "experiment" not in values:
        raise UsageError("no experiment given (use --experiment or an 'experiment' key)")
    try:
        exp = get_experiment(values["experiment"])
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    overrides = {}
    for key, (field_name, typ) in OVERRIDES.items():
        if key in values:
            try:
                overrides[field_name] = _parse_bool(values[key]) if typ is None else typ(values[key])
            except ValueError:
                raise UsageError(f"bad value for {key}: {values[key]!r}") from None
    io = {"out": values.get("out"), "oracle_paths": int(values["oracle_paths"]) if "oracle_paths" in values else None}
    return exp, overrides, io


@contextmanager
def _open_out(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _rows(history: TrainHistory):
    for r in history.records:
        yield [r.step, f"{r.loss:.6e}", f"{r.y0:.6f}", f"{r.elapsed:.3f}"]


def _train(exp: ExperimentConfig, overrides: dict, verbose: bool):
    cfg = exp.with_overrides(**overrides)
    callback = None
    if verbose:
        def callback(r):
            log.info("%s step %5d loss %.4e y0 %.5f runtime %.1fs", exp.id, r.step, r.loss, r.y0, r.elapsed)
    try:
        history, _ = train(cfg, exp.model, exp.root(), callback=callback)
        return history, None
    except TrainingError as exc:
        return exc.history or TrainHistory(), exc


def _oracle(exp: ExperimentConfig, oracle_paths):
    if exp.oracle is None:
        return math.nan, f"none ({exp.expected.provenance})"
    return exp.oracle(exp.model, exp.root(), oracle_paths)


def _footer(exp: ExperimentConfig, oracle_value, provenance, final_y0, status):
    rel = abs(final_y0 - oracle_value) / abs(oracle_value) if math.isfinite(oracle_value) else math.nan
    tag = "exact" if exp.expected.exact else "solver-reported"
    return [
        f"# experiment={exp.id}",
        f"# oracle={oracle_value:.6f}",
        f"# provenance={provenance} [{tag}]",
        f"# reference_value={exp.expected.value}",
        f"# final_relative_error={rel:.6e}",
        f"# status={status}",
    ]


def cmd_run(args) -> int:
    exp, overrides, io = resolve(args)
    history, failure = _train(exp, overrides, args.verbose)
    value, provenance = _oracle(exp, io["oracle_paths"])
    status = "ok" if failure is None else f"diverged at step {failure.step}: {failure.reason}"
    final_y0 = history.final.y0 if len(history) else math.nan
    with _open_out(io["out"]) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        writer.writerows(_rows(history))
        fh.write("\n".join(_footer(exp, value, provenance, final_y0, status)) + "\n")
    if failure is not None:
        log.error("%s: %s", exp.id, status)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_compare(args) -> int:
    exp, overrides, io = resolve(args)
    overrides.pop("use_ae", None)
    tracks = {}
    failures = []
    for name, flag in (("ae", True), ("no_ae", False)):
        history, failure = _train(exp, dict(overrides, use_ae=flag), args.verbose)
        tracks[name] = history
        if failure is not None:
            failures.append(f"{name} diverged at step {failure.step}")
    value, provenance = _oracle(exp, io["oracle_paths"])
    with _open_out(io["out"]) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["track"] + HEADER)
        n = max(len(h) for h in tracks.values())
        rows = {name: list(_rows(h)) for name, h in tracks.items()}
        for i in range(n):
            for name in tracks:
                if i < len(rows[name]):
                    writer.writerow([name] + rows[name][i])
        for name, h in tracks.items():
            final = h.final.y0 if len(h) else math.nan
            status = next((f for f in failures if f.startswith(name + " ")), "ok")
            fh.write(f"# track={name}\n")
            fh.write("\n".join(_footer(exp, value, provenance, final, status)) + "\n")
    return EXIT_DIVERGED if failures else EXIT_OK


def registry_rows():
    for eid, exp in REGISTRY.items():
        tag = "exact" if exp.expected.exact else "solver-reported"
        value = "n/a" if math.isnan(exp.expected.value) else f"{exp.expected.value:g}"
        if exp.expected.error is not None:
            value += f"+-{exp.expected.error:g}"
        yield [eid, str(exp.model.d), exp.driver, exp.rollout.variant, value, f"{exp.expected.provenance} [{tag}]"]


def cmd_list(args) -> int:
    header = ["id", "d", "driver", "variant", "value", "provenance"]
    rows = list(registry_rows())
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header) - 1)]
    for row in [header] + rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)) + "  " + row[-1])
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    handler = {"run": cmd_run, "compare": cmd_compare, "list": cmd_list}[args.command]
    try:
        return handler(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"aebsde: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
