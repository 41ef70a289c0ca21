"""Command line: ``slac-time {synth,pretrain,cluster,metrics,report}``.

Exit codes: 0 success, 2 configuration or input error, 3 unmet pipeline precondition.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import config as cfg
from . import pipeline as pl
from .autodiff import content_hash
from .metrics import k_sweep
from .synth import default_catalog, generate
from .training import InsufficientDataError
from .triplets import IngestError, VariableCatalog, write_csv

log = logging.getLogger("slac_time")

EXIT_OK, EXIT_INPUT, EXIT_PRECONDITION = 0, 2, 3


class PreconditionError(RuntimeError):
    """A required earlier pipeline output is missing or unusable."""


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


def _metadata(run: cfg.RunConfig, command: str, outputs: list[Path]) -> None:
    """Timestamps live only here so every other output is byte-reproducible."""
    path = run.out_dir / "metadata.json"
    doc = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    doc[command] = {
        "finished_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "version": __version__,
        "seed": run.seed,
        "config_hash": content_hash(run.to_dict()),
        "outputs": sorted(p.name for p in outputs),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _catalog(run: cfg.RunConfig) -> VariableCatalog:
    path = run.resolve(run.paths.catalog, "catalog.json")
    if run.paths.catalog is not None or path.exists():
        if not path.exists():
            raise FileNotFoundError(f"catalog not found: {path}")
        return VariableCatalog.load(path)
    return VariableCatalog.default()


def _samples(run: cfg.RunConfig, catalog: VariableCatalog, path: Path | None = None):
    path = path or run.resolve(run.paths.data, "data.csv")
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    samples = pl.load_samples(path, catalog, run.data.window_len, run.data.bin_width)
    if not samples:
        raise InsufficientDataError(f"{path}: no complete non-empty windows")
    return samples


# ---------------------------------------------------------------------------
# commands


def cmd_synth(run: cfg.RunConfig, args: argparse.Namespace) -> list[Path]:
    records, truth = generate(run.gen_config())
    catalog = default_catalog()
    out = run.out_dir
    paths = [out / n for n in ("data.csv", "ground_truth.csv", "annotations.csv", "catalog.json")]
    write_csv(paths[0], records, catalog)
    truth.write(paths[1])
    truth.write_annotations(paths[2])
    catalog.dump(paths[3])
    log.info("synthesized %d records, %d windows", len(records), len(truth.regimes))
    return paths


def cmd_pretrain(run: cfg.RunConfig, args: argparse.Namespace) -> list[Path]:
    catalog = _catalog(run)
    # the forecasting task may use a larger corpus than the one being clustered
    samples = _samples(run, catalog, run.resolve(run.paths.pretrain_data))
    config = run.encoder_config(len(catalog))
    params, head, history, stats = pl.run_pretrain(samples, config, run.train_config())
    ckpt = run.resolve(run.paths.checkpoint, pl.CHECKPOINT_NAME)
    pl.write_checkpoint(
        ckpt, params, head, stats, config, catalog,
        extra={"best_epoch": history.best_epoch, "stop_epoch": history.stop_epoch},
    )
    train_log = run.out_dir / "train_log.csv"
    _write(train_log, history.to_csv())
    return [ckpt, train_log]


def cmd_cluster(run: cfg.RunConfig, args: argparse.Namespace) -> list[Path]:
    catalog = _catalog(run)
    samples = _samples(run, catalog)
    slac = run.slac_config()
    if len(samples) <= slac.k:
        raise PreconditionError(f"k={slac.k} needs more than {len(samples)} samples")
    if args.from_random:
        params = None
        config = run.encoder_config(len(catalog))
        stats = pl.fit_stats(samples, len(catalog), run.seed)
    else:
        ckpt = run.resolve(run.paths.checkpoint, pl.CHECKPOINT_NAME)
        if not ckpt.exists():
            raise PreconditionError(f"no checkpoint at {ckpt}; run pretrain first or pass --from-random")
        params, config, stats = pl.read_checkpoint(ckpt, catalog)
    result = pl.run_cluster(samples, stats, config, slac, params)
    out = run.out_dir
    assignments = run.resolve(run.paths.assignments, "assignments.csv")
    an.write_assignments(assignments, samples, result.assignments)
    iteration_log = out / "iteration_log.csv"
    _write(iteration_log, result.log_csv())
    reps = run.resolve(run.paths.representations, "representations.csv")
    _write(reps, pl.representations_csv(samples, result.representations))
    return [assignments, iteration_log, reps]


def cmd_metrics(run: cfg.RunConfig, args: argparse.Namespace) -> list[Path]:
    path = run.resolve(run.paths.representations, "representations.csv")
    if not path.exists():
        raise PreconditionError(f"no representations at {path}; run cluster first")
    _, reps = pl.read_representations(path)
    k_values = run.metrics.k_values
    if max(k_values) >= reps.shape[0]:
        raise PreconditionError(f"largest k ({max(k_values)}) must be below the number of samples ({reps.shape[0]})")
    table = k_sweep(reps, k_values, restarts=run.metrics.restarts, seed=run.seed)
    out = run.out_dir / "k_sweep.csv"
    _write(out, table.to_csv())
    log.info("preferred k per index: %s", table.best())
    return [out]


def cmd_report(run: cfg.RunConfig, args: argparse.Namespace) -> list[Path]:
    path = run.resolve(run.paths.assignments, "assignments.csv")
    if not path.exists():
        raise PreconditionError(f"no assignments at {path}; run cluster first")
    lookup = an.read_assignments(path)
    catalog = _catalog(run)
    samples = _samples(run, catalog)
    missing = [s.sample_id for s in samples if (s.parent_record, s.window_index) not in lookup]
    if missing:
        raise PreconditionError(f"{len(missing)} samples have no assignment, first {missing[0]}")
    timelines = an.build_timeline(samples, lookup)
    k = max(run.slac.k, max(lookup.values()) + 1)
    names = run.report.state_names or None
    if names is not None and len(names) != k:
        raise cfg.ConfigError(f"report.state_names has {len(names)} names for {k} states")
    ann_path = run.resolve(run.paths.annotations, "annotations.csv")
    annotations = an.read_annotations(ann_path) if ann_path.exists() else []
    if not annotations:
        log.info("no annotations; transitions are reported unlinked")
    events = []
    for rid in sorted(timelines):
        events += an.overlay_events(an.transitions(timelines[rid]), annotations, run.report.tolerance)
    states = np.array([lookup[(s.parent_record, s.window_index)] for s in samples])
    out = run.out_dir
    files = {
        "timeline.csv": an.timeline_csv(timelines),
        "frequencies.csv": an.state_frequencies(timelines, k).to_csv(names),
        "transitions.csv": an.transitions_csv(events),
    }
    if len(set(states.tolist())) >= 2:
        profile = an.feature_profile(samples, states, catalog.names)
        present = [names[s] for s in profile.states] if names else None
        files["profile.json"] = an.profile_json(profile, present)
    else:
        log.warning("only one state present; feature profile skipped")
    for name, text in files.items():
        _write(out / name, text)
    return [out / n for n in files]


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "cluster": cmd_cluster,
    "metrics": cmd_metrics,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slac-time", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (overrides paths.out)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "cluster":
            p.add_argument("--k", type=int, help="number of clusters (overrides slac.k)")
            p.add_argument("--from-random", action="store_true", help="start from a randomly initialized encoder")
    return parser


def _apply_overrides(run: cfg.RunConfig, args: argparse.Namespace) -> cfg.RunConfig:
    if args.seed is not None:
        run.seed = args.seed
    if args.out is not None:
        run.paths = dataclasses.replace(run.paths, out=str(args.out.resolve()))
    if getattr(args, "k", None) is not None:
        run.slac = dataclasses.replace(run.slac, k=args.k)
    cfg.validate(run)
    return run


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        run = _apply_overrides(cfg.load(args.config), args)
        run.out_dir.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](run, args)
    except (PreconditionError, InsufficientDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (cfg.ConfigError, IngestError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    _metadata(run, args.command, outputs)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
