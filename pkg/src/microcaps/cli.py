"""Command-line entry point: ``microcaps {gen,pose,exp,report}``.

Every option can also come from a JSON or YAML file given with ``--config``;
options on the command line win over the file.

Exit codes: 0 success, 1 usage error, 2 data error, 3 trial failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections import Counter
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRIAL = 0, 1, 2, 3

log = logging.getLogger("microcaps")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# option name -> default; None means "not given" so config files can fill it in
DEFAULTS = {
    "gen": {"out": None, "classes": 13, "size": 64, "seed": 0, "library_seed": None, "flat": False},
    "pose": {"data": None, "out": ".", "threshold": 0.3},
    "exp": {
        "data": None, "out": ".", "seed": None, "trials": 5, "epochs": 30, "batch_size": 32, "lr": 1e-3,
        "channels": "8,16,32", "capsule_dim": 8, "input_pool": 2, "models": "M1,M2", "workers": None,
    },
    "report": {"results": None, "out": None},
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="microcaps", description="Capsule-vs-dense classifier experiments on synthetic boards.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON or YAML file with option values")
        return sp

    g = common(sub.add_parser("gen", help="render a synthetic dataset to disk"))
    g.add_argument("--out", type=Path, help="dataset directory to create")
    g.add_argument("--classes", type=int)
    g.add_argument("--size", type=int, help="image side in pixels")
    g.add_argument("--seed", type=int, help="dataset seed")
    g.add_argument("--library-seed", type=int, help="board library seed (defaults to --seed)")
    g.add_argument("--flat", action="store_const", const=True, help="render every component at zero height")

    q = common(sub.add_parser("pose", help="measure rotation and perspective ratio of every image"))
    q.add_argument("--data", type=Path, help="dataset directory holding manifest.csv")
    q.add_argument("--out", type=Path, help="directory for pose_report.csv and pose_aggregate.csv")
    q.add_argument("--threshold", type=float, help="gradient threshold as a fraction of the image maximum")

    e = common(sub.add_parser("exp", help="run catalog experiments for both models"))
    e.add_argument("ids", nargs="+", metavar="ID", help="E1-E9, A1-A16 or ALL")
    e.add_argument("--data", type=Path)
    e.add_argument("--out", type=Path)
    e.add_argument("--seed", type=int, help="base seed; trial i uses seed + i (required)")
    e.add_argument("--trials", type=int)
    e.add_argument("--epochs", type=int)
    e.add_argument("--batch-size", type=int)
    e.add_argument("--lr", type=float)
    e.add_argument("--channels", help="comma-separated conv widths")
    e.add_argument("--capsule-dim", type=int)
    e.add_argument("--input-pool", type=int)
    e.add_argument("--models", help="comma-separated subset of M1,M2")
    e.add_argument("--workers", type=int, help="parallel trial processes (default: all cores)")

    r = common(sub.add_parser("report", help="rebuild summary.csv and report.txt from results.csv"))
    r.add_argument("--results", type=Path)
    r.add_argument("--out", type=Path, help="defaults to the directory of --results")
    return p


def load_config(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        unknown = set(cfg) - set(opts) - {"ids"}
        if unknown:
            raise UsageError(f"unknown option(s) in {args.config}: {', '.join(sorted(unknown))}")
        opts.update(cfg)
    for key in DEFAULTS[command]:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    return opts


def _require(opts: dict, *keys: str) -> None:
    for k in keys:
        if opts.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(opts: dict) -> int:
    from .synthgen import generate_dataset, make_board_library, write_dataset

    _require(opts, "out")
    if opts["classes"] < 2 or opts["size"] < 16:
        raise UsageError("need --classes >= 2 and --size >= 16")
    lib_seed = opts["library_seed"] if opts["library_seed"] is not None else opts["seed"]
    library = make_board_library(int(opts["classes"]), int(lib_seed))
    samples = generate_dataset(library, int(opts["size"]), int(opts["seed"]), flat=bool(opts["flat"]))
    manifest = write_dataset(samples, opts["out"])
    counts = Counter((s.class_id, s.split) for s in samples)
    for cid in sorted({s.class_id for s in samples}):
        print(f"class {cid}: {counts[(cid, 'train')]} train / {counts[(cid, 'test')]} test")
    n_train = sum(v for (c, s), v in counts.items() if s == "train")
    print(f"total: {n_train}/{len(samples) - n_train} train/test")
    print(f"manifest sha256: {hashlib.sha256(manifest.read_bytes()).hexdigest()}")
    return EXIT_OK


def cmd_pose(opts: dict) -> int:
    from .posemeasure import format_aggregate, measure_dataset
    from .synthgen import ManifestError

    _require(opts, "data")
    try:
        readings, agg = measure_dataset(opts["data"], opts["out"], float(opts["threshold"]))
    except ManifestError as exc:
        raise DataError(str(exc)) from exc
    failed = sum(r.status != "ok" for r in readings)
    print(format_aggregate(agg))
    print(f"{len(readings)} images measured, {failed} detection failures")
    return EXIT_OK


def _parse_models(text: str) -> list[str]:
    models = [m.strip().upper() for m in str(text).split(",") if m.strip()]
    bad = [m for m in models if m not in ("M1", "M2")]
    if bad or not models:
        raise UsageError(f"--models must be a subset of M1,M2, got {text!r}")
    return models


def cmd_exp(ids: list[str], opts: dict) -> int:
    from . import experiments as ex
    from .network import ModelConfig
    from .synthgen import ManifestError, SampleSet, load_dataset

    _require(opts, "data", "seed")
    specs = []
    for i in ids:
        try:
            specs.append(ex.get_spec(i).with_trials(int(opts["trials"])))
        except ex.UnknownSpecError as exc:
            raise UsageError(str(exc)) from None
    models = _parse_models(opts["models"])
    try:
        channels = tuple(int(c) for c in str(opts["channels"]).split(","))
    except ValueError:
        raise UsageError(f"--channels must be comma-separated integers, got {opts['channels']!r}") from None
    try:
        data = SampleSet.from_samples(load_dataset(opts["data"]))
    except (ManifestError, OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load dataset from {opts['data']}: {exc}") from exc
    if not (data.split == "test").any() or not (data.split == "train").any():
        raise DataError("dataset needs both train and test samples")
    side = data.images.shape[1]
    try:
        cfg = ModelConfig(input_size=side, num_classes=data.num_classes, in_channels=data.images.shape[3],
                          channels=channels, capsule_dim=int(opts["capsule_dim"]),
                          input_pool=int(opts["input_pool"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    settings = ex.TrainSettings(cfg, int(opts["epochs"]), int(opts["batch_size"]), float(opts["lr"]))
    jobs = [(s, m) for s in specs for m in models]

    def progress(r):
        log.info("%s %s trial %d (seed %d): accuracy %.4f in %.1fs", r.spec_id, r.model, r.trial, r.seed,
                 r.accuracy, r.wall_time_s)

    try:
        results = ex.run_many(jobs, data, int(opts["seed"]), settings, opts["workers"], progress)
    except Exception as exc:  # any failure inside a trial
        log.error("trial failed: %s", exc)
        return EXIT_TRIAL
    paths = ex.emit_table(results, opts["out"])
    print(paths["report"].read_text())
    print(f"wrote {paths['results']} and {paths['summary']}")
    return EXIT_OK


def cmd_report(opts: dict) -> int:
    from . import experiments as ex

    _require(opts, "results")
    src = Path(opts["results"])
    if not src.is_file():
        raise DataError(f"no results file at {src}")
    try:
        results = ex.read_results_csv(src)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{src} is not a results.csv: {exc}") from exc
    out = Path(opts["out"]) if opts["out"] else src.parent
    out.mkdir(parents=True, exist_ok=True)
    ex.write_summary_csv(results, out / "summary.csv")
    text = ex.format_report(results)
    (out / "report.txt").write_text(text)
    print(text)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        opts = resolve(args.command, args)
        if args.command == "gen":
            return cmd_gen(opts)
        if args.command == "pose":
            return cmd_pose(opts)
        if args.command == "exp":
            return cmd_exp(args.ids, opts)
        return cmd_report(opts)
    except UsageError as exc:
        print(f"microcaps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"microcaps: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
