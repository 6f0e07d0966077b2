"""Experiment runner: subcommands, config plumbing, artifacts, manifests.

Every run writes its artifacts plus a manifest.json holding the resolved
configuration, input digests, and artifact digests; feeding that manifest
back through --config reproduces the artifacts byte for byte. Logs go to
stderr, artifacts to files (or stdout where '-' is supported).

Exit codes: 0 success, 2 missing/unreadable files, 3 invalid data or
configuration, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path
from typing import IO, Sequence

from . import __version__
from .errors import ValidationError

log = logging.getLogger(__name__)

TOY_FILES = {
    "ratings": "ratings.csv",
    "genome_scores": "genome-scores.csv",
    "genome_tags": "genome-tags.csv",
}

EXIT_OK = 0
EXIT_IO = 2
EXIT_INVALID = 3
EXIT_INTERNAL = 4


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(
    outdir: Path,
    command: str,
    resolved_config: dict,
    inputs: dict[str, Path],
    artifacts: list[Path],
    timings: dict[str, float],
    seeds: dict[str, int],
) -> Path:
    doc = {
        "tool": "echochamber",
        "version": __version__,
        "command": command,
        "resolved_config": resolved_config,
        "seeds": seeds,
        "inputs": {
            name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items()
        },
        "artifacts": {p.name: _sha256(p) for p in artifacts},
        "timings_s": timings,
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    if "resolved_config" in doc:  # a manifest round-trips as a config
        doc = doc["resolved_config"]
    return doc


def _reject_unknown(config: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(config) - allowed)
    if unknown:
        raise ValidationError(f"unknown {where} config keys: {unknown}")


def _pick(flag, config: dict, key: str, default):
    if flag is not None:
        return flag
    return config.get(key, default)


def _toy_path(name: str) -> Path:
    return Path(str(resources.files("echochamber").joinpath("data/toy", TOY_FILES[name])))


def _resolve_inputs(args, config: dict, need_ratings: bool = True) -> dict[str, Path]:
    """Input precedence: explicit flag, config key, data dir, bundled toy corpus."""
    data_dir = args.data_dir
    paths: dict[str, Path] = {}
    names = ["ratings", "genome_scores", "genome_tags"] if need_ratings else [
        "genome_scores", "genome_tags"
    ]
    for name in names:
        flag = getattr(args, name, None)
        if flag is not None:
            paths[name] = Path(flag)
        elif name in config:
            paths[name] = Path(config[name])
        elif data_dir is not None:
            paths[name] = Path(data_dir) / TOY_FILES[name]
        else:
            paths[name] = _toy_path(name)
    for name, p in paths.items():
        if not p.is_file():
            raise FileNotFoundError(f"{name} file not found: {p}")
    return paths


def _load_genome_and_ratings(paths: dict[str, Path], need_ratings: bool = True):
    from .dataset import filter_to_tagged, load_genome, load_ratings

    genome = load_genome(paths["genome_scores"], paths["genome_tags"])
    if not need_ratings:
        return genome, None
    keep = set(int(m) for m in genome.movie_ids)
    ratings = load_ratings(paths["ratings"], keep_movies=keep)
    return genome, filter_to_tagged(ratings, genome)


def _add_common(parser: argparse.ArgumentParser, with_ratings: bool = True) -> None:
    parser.add_argument("--config", help="JSON config file (or a previous manifest.json)")
    parser.add_argument("--out", default=".", help="output directory (default: cwd)")
    parser.add_argument("--threads", type=int, default=1, help="worker cap, results identical at any value")
    parser.add_argument("--data-dir", default=None, help="directory holding ratings.csv/genome-*.csv (also env ECHOCHAMBER_DATA_DIR)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--genome-scores", dest="genome_scores", help="genome-scores.csv path")
    parser.add_argument("--genome-tags", dest="genome_tags", help="genome-tags.csv path")
    if with_ratings:
        parser.add_argument("--ratings", help="ratings.csv path")


HYPER_KEYS = {
    "n_factors", "n_sgd_epochs", "learning_rate", "regularization",
    "rating_min", "rating_max", "init_std", "seed",
}


def _build_hyper(config_hyper: dict, flags: dict):
    from .recommender import Hyperparams

    _reject_unknown(config_hyper, HYPER_KEYS, "hyper")
    merged = dict(config_hyper)
    for key, value in flags.items():
        if value is not None:
            merged[key] = value
    return Hyperparams(**merged)


SIM_KEYS = {
    "ratings", "genome_scores", "genome_tags",
    "n_users", "k_per_epoch", "n_epochs", "history_users", "seed", "hyper",
}


def cmd_simulate(args) -> int:
    from .simulator import (
        SimConfig, run_simulation, write_recs_csv, write_summary_csv, write_trace_csv,
    )

    t0 = time.monotonic()
    config = _load_config_file(args.config)
    _reject_unknown(config, SIM_KEYS, "simulate")
    hyper = _build_hyper(
        dict(config.get("hyper", {})),
        {"n_factors": args.factors, "n_sgd_epochs": args.sgd_epochs,
         "learning_rate": args.lr, "regularization": args.reg},
    )
    sim = SimConfig(
        n_users=int(_pick(args.users, config, "n_users", 100)),
        k_per_epoch=int(_pick(args.k, config, "k_per_epoch", 100)),
        n_epochs=int(_pick(args.epochs, config, "n_epochs", 40)),
        history_users=int(_pick(args.history_users, config, "history_users", 1000)),
        hyper=hyper,
        seed=int(_pick(args.seed, config, "seed", 0)),
    )
    paths = _resolve_inputs(args, config)
    genome, ratings = _load_genome_and_ratings(paths)
    t_load = time.monotonic()

    trace = run_simulation(ratings, genome, sim, threads=max(args.threads, 1))
    t_run = time.monotonic()

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    artifacts = [outdir / "trace.csv", outdir / "summary.csv", outdir / "recs.csv"]
    write_trace_csv(trace, artifacts[0])
    write_summary_csv(trace, artifacts[1])
    write_recs_csv(trace, artifacts[2])
    resolved = {
        "ratings": str(paths["ratings"]),
        "genome_scores": str(paths["genome_scores"]),
        "genome_tags": str(paths["genome_tags"]),
        "n_users": sim.n_users,
        "k_per_epoch": sim.k_per_epoch,
        "n_epochs": sim.n_epochs,
        "history_users": sim.history_users,
        "seed": sim.seed,
        "hyper": {
            "n_factors": hyper.n_factors, "n_sgd_epochs": hyper.n_sgd_epochs,
            "learning_rate": hyper.learning_rate, "regularization": hyper.regularization,
            "rating_min": hyper.rating_min, "rating_max": hyper.rating_max,
            "init_std": hyper.init_std, "seed": hyper.seed,
        },
    }
    _write_manifest(
        outdir, "simulate", resolved, paths, artifacts,
        {"load": t_load - t0, "simulate": t_run - t_load, "total": time.monotonic() - t0},
        {"simulation": sim.seed, "model": hyper.seed},
    )
    log.info("wrote %s", ", ".join(str(a) for a in artifacts))
    return EXIT_OK


SOM_KEYS = {
    "genome_scores", "genome_tags", "grid_rows", "grid_cols", "train_iterations",
    "initial_learning_rate", "initial_radius", "seed", "n_groups", "percentile",
}


def _parse_movie_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ValidationError(f"bad movie id list: {exc}") from None


def _movies_from_recs(path: Path, epochs: list[int], user: int | None) -> dict[int, list[int]]:
    wanted = set(epochs)
    out: dict[int, set[int]] = {e: set() for e in epochs}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            epoch = int(row["epoch"])
            if epoch not in wanted:
                continue
            if user is not None and int(row["user_id"]) != user:
                continue
            out[epoch].add(int(row["movie_id"]))
    empty = [e for e, ids in out.items() if not ids]
    if empty:
        raise ValidationError(f"recs file has no rows for epochs {sorted(empty)}")
    return {e: sorted(ids) for e, ids in out.items()}


def cmd_som(args) -> int:
    from .somviz import (
        DEFAULT_PERCENTILE, SomConfig, cluster_nodes, export_som, highlight_nodes,
        train_som, write_highlights_csv, write_som_json,
    )

    t0 = time.monotonic()
    config = _load_config_file(args.config)
    _reject_unknown(config, SOM_KEYS, "som")
    iterations = _pick(args.iterations, config, "train_iterations", None)
    radius = _pick(args.radius, config, "initial_radius", None)
    som_config = SomConfig(
        grid_rows=int(_pick(args.grid_rows, config, "grid_rows", 10)),
        grid_cols=int(_pick(args.grid_cols, config, "grid_cols", 10)),
        train_iterations=None if iterations is None else int(iterations),
        initial_learning_rate=float(_pick(args.lr, config, "initial_learning_rate", 0.5)),
        initial_radius=None if radius is None else float(radius),
        seed=int(_pick(args.seed, config, "seed", 0)),
    )
    n_groups = int(_pick(args.groups, config, "n_groups", 8))
    percentile = float(_pick(args.percentile, config, "percentile", DEFAULT_PERCENTILE))
    paths = _resolve_inputs(args, config, need_ratings=False)
    genome, _ = _load_genome_and_ratings(paths, need_ratings=False)
    t_load = time.monotonic()

    som = train_som(genome, som_config)
    som.node_groups = cluster_nodes(som, min(n_groups, som.n_nodes))
    t_train = time.monotonic()

    masks = {}
    if args.movies is not None:
        masks[0] = highlight_nodes(som, genome, _parse_movie_list(args.movies), percentile)
    if args.recs is not None:
        if args.epochs is None:
            raise ValidationError("--recs needs --epochs to pick highlight epochs")
        epochs = _parse_movie_list(args.epochs)
        per_epoch = _movies_from_recs(Path(args.recs), epochs, args.user)
        for epoch, ids in per_epoch.items():
            masks[epoch] = highlight_nodes(som, genome, ids, percentile)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    single = masks[min(masks)] if len(masks) == 1 else None
    artifacts = [outdir / "som.json"]
    write_som_json(export_som(som, genome, single), artifacts[0])
    if masks:
        artifacts.append(outdir / "highlights.csv")
        write_highlights_csv(som, masks, artifacts[1])
    inputs = dict(paths)
    if args.recs is not None:
        inputs["recs"] = Path(args.recs)
    resolved = {
        "genome_scores": str(paths["genome_scores"]),
        "genome_tags": str(paths["genome_tags"]),
        "grid_rows": som_config.grid_rows,
        "grid_cols": som_config.grid_cols,
        "train_iterations": som_config.train_iterations,
        "initial_learning_rate": som_config.initial_learning_rate,
        "initial_radius": som_config.initial_radius,
        "seed": som_config.seed,
        "n_groups": n_groups,
        "percentile": percentile,
    }
    _write_manifest(
        outdir, "som", resolved, inputs, artifacts,
        {"load": t_load - t0, "train": t_train - t_load, "total": time.monotonic() - t0},
        {"som": som_config.seed},
    )
    log.info("wrote %s", ", ".join(str(a) for a in artifacts))
    return EXIT_OK


ESCAPE_KEYS = {
    "ratings", "genome_scores", "genome_tags", "target_user", "k_eval", "seed",
    "n_addable", "heuristic_n_add", "budget", "strategies", "fidelity", "hyper",
}


def cmd_escape(args) -> int:
    from dataclasses import asdict

    from .escape import (
        STRATEGY_NAMES, EscapeObjectiveConfig, Fidelity, planted_self_test,
        run_escape_study,
    )

    t0 = time.monotonic()
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    if args.self_test:
        seed = int(args.seed if args.seed is not None else 0)
        doc = planted_self_test(seed=seed)
        path = outdir / "escape_selftest.json"
        path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        _write_manifest(
            outdir, "escape", {"self_test": True, "seed": seed}, {},
            [path], {"total": time.monotonic() - t0}, {"escape": seed},
        )
        log.info("wrote %s", path)
        return EXIT_OK

    config = _load_config_file(args.config)
    _reject_unknown(config, ESCAPE_KEYS, "escape")
    target = _pick(args.user, config, "target_user", None)
    if target is None:
        raise ValidationError("escape needs --user (or target_user in the config)")
    fidelity_cfg = dict(config.get("fidelity", {}))
    _reject_unknown(fidelity_cfg, {"sgd_epochs_override", "history_subsample"}, "fidelity")
    if args.fidelity_sgd_epochs is not None:
        fidelity_cfg["sgd_epochs_override"] = args.fidelity_sgd_epochs
    if args.fidelity_history is not None:
        fidelity_cfg["history_subsample"] = args.fidelity_history
    hyper = _build_hyper(
        dict(config.get("hyper", {})),
        {"n_factors": args.factors, "n_sgd_epochs": args.sgd_epochs},
    )

    raw = _pick(args.strategies, config, "strategies", "all")
    if isinstance(raw, str):
        if raw == "all":
            strategies = list(STRATEGY_NAMES)
        elif raw == "none":
            strategies = []
        else:
            strategies = [s.strip() for s in raw.split(",") if s.strip()]
    else:
        strategies = list(raw)

    paths = _resolve_inputs(args, config)
    genome, ratings = _load_genome_and_ratings(paths)
    escape_config = EscapeObjectiveConfig(
        target_user=int(target),
        corpus=ratings,
        genome=genome,
        hyper=hyper,
        k_eval=int(_pick(args.k_eval, config, "k_eval", 20)),
        fidelity=Fidelity(**fidelity_cfg),
        seed=int(_pick(args.seed, config, "seed", 0)),
        n_addable=int(_pick(args.n_addable, config, "n_addable", 0)),
        heuristic_n_add=int(_pick(args.n_add, config, "heuristic_n_add", 10)),
    )
    budget = int(_pick(args.budget, config, "budget", 100))
    t_load = time.monotonic()

    report = run_escape_study(escape_config, budget, strategies, threads=max(args.threads, 1))
    t_run = time.monotonic()

    doc = {
        "baseline_objective": report.baseline_objective,
        "strategies": {name: asdict(res) for name, res in report.strategies.items()},
        "highfi": report.highfi,
    }
    path = outdir / "escape_report.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    resolved = {
        "ratings": str(paths["ratings"]),
        "genome_scores": str(paths["genome_scores"]),
        "genome_tags": str(paths["genome_tags"]),
        "target_user": escape_config.target_user,
        "k_eval": escape_config.k_eval,
        "seed": escape_config.seed,
        "n_addable": escape_config.n_addable,
        "heuristic_n_add": escape_config.heuristic_n_add,
        "budget": budget,
        "strategies": strategies,
        "fidelity": {
            "sgd_epochs_override": escape_config.fidelity.sgd_epochs_override,
            "history_subsample": escape_config.fidelity.history_subsample,
        },
        "hyper": {
            "n_factors": hyper.n_factors, "n_sgd_epochs": hyper.n_sgd_epochs,
            "learning_rate": hyper.learning_rate, "regularization": hyper.regularization,
            "rating_min": hyper.rating_min, "rating_max": hyper.rating_max,
            "init_std": hyper.init_std, "seed": hyper.seed,
        },
    }
    _write_manifest(
        outdir, "escape", resolved, paths, [path],
        {"load": t_load - t0, "study": t_run - t_load, "total": time.monotonic() - t0},
        {"escape": escape_config.seed, "model": hyper.seed},
    )
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_diversity(args) -> int:
    from .diversity import set_diversity

    config = _load_config_file(args.config)
    _reject_unknown(config, {"genome_scores", "genome_tags"}, "diversity")
    paths = _resolve_inputs(args, config, need_ratings=False)
    genome, _ = _load_genome_and_ratings(paths, need_ratings=False)
    ids = list(args.ids)
    if args.movies_file is not None:
        text = Path(args.movies_file).read_text(encoding="utf-8")
        ids.extend(_parse_movie_list(text))
    if len(ids) < 2:
        raise ValidationError("diversity needs at least 2 movie ids")
    value = set_diversity(genome, ids)

    t0 = time.monotonic()
    if args.out == "-":
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["n_movies", "diversity"])
        writer.writerow([len(ids), repr(value)])
        return EXIT_OK
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "diversity.csv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n_movies", "diversity"])
        writer.writerow([len(ids), repr(value)])
    resolved = {
        "genome_scores": str(paths["genome_scores"]),
        "genome_tags": str(paths["genome_tags"]),
        "movie_ids": sorted(int(i) for i in ids),
    }
    _write_manifest(
        outdir, "diversity", resolved, paths, [path],
        {"total": time.monotonic() - t0}, {},
    )
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_validate_data(args) -> int:
    config = _load_config_file(args.config)
    _reject_unknown(config, {"ratings", "genome_scores", "genome_tags"}, "validate-data")
    paths = _resolve_inputs(args, config)
    genome, ratings = _load_genome_and_ratings(paths)
    summary = {
        "ratings": len(ratings),
        "users": len(ratings.distinct_users()),
        "rated_movies": len(ratings.distinct_movies()),
        "tags": genome.n_tags,
        "tagged_movies": genome.n_movies,
        "excluded_movies": genome.excluded_movies,
    }
    for key, value in summary.items():
        log.info("%s: %d", key, value)
    if args.out != "-":
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        path = outdir / "validation.json"
        path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        _write_manifest(
            outdir, "validate-data",
            {name: str(p) for name, p in paths.items()},
            paths, [path], {}, {},
        )
        log.info("wrote %s", path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echochamber",
        description="Closed-loop recommender simulation and diversity analysis",
    )
    parser.add_argument("--version", action="version", version=f"echochamber {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the closed feedback loop")
    _add_common(p)
    p.add_argument("--users", type=int, help="simulated population size")
    p.add_argument("--k", type=int, help="recommendations per user per epoch")
    p.add_argument("--epochs", type=int, help="number of epochs")
    p.add_argument("--history-users", dest="history_users", type=int, help="initial corpus subsample")
    p.add_argument("--seed", type=int, help="simulation seed")
    p.add_argument("--factors", type=int, help="latent factor count")
    p.add_argument("--sgd-epochs", dest="sgd_epochs", type=int, help="SGD epochs per fit")
    p.add_argument("--lr", type=float, help="SGD learning rate")
    p.add_argument("--reg", type=float, help="SGD regularization")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("som", help="train the tag map and optional highlights")
    _add_common(p, with_ratings=False)
    p.add_argument("--grid-rows", dest="grid_rows", type=int)
    p.add_argument("--grid-cols", dest="grid_cols", type=int)
    p.add_argument("--iterations", type=int, help="training iterations (default 500 per tag)")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--radius", type=float, help="initial neighborhood radius")
    p.add_argument("--groups", type=int, help="hierarchical group count (default 8)")
    p.add_argument("--percentile", type=float, help="highlight percentile (default 80)")
    p.add_argument("--seed", type=int)
    p.add_argument("--movies", help="comma-separated movie ids to highlight")
    p.add_argument("--recs", help="recs.csv from a simulation run")
    p.add_argument("--epochs", help="comma-separated epochs to highlight from --recs")
    p.add_argument("--user", type=int, help="restrict --recs highlights to one user")
    p.set_defaults(func=cmd_som)

    p = sub.add_parser("escape", help="single-user diversity maximization study")
    _add_common(p)
    p.add_argument("--user", type=int, help="target user id")
    p.add_argument("--k-eval", dest="k_eval", type=int, help="recommendations scored (default 20)")
    p.add_argument("--strategies", help="all, none, or comma list")
    p.add_argument("--budget", type=int, help="objective evaluations per optimizer")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-addable", dest="n_addable", type=int, help="extra rating slots for optimizers")
    p.add_argument("--n-add", dest="n_add", type=int, help="movies the heuristics add (default 10)")
    p.add_argument("--fidelity-sgd-epochs", dest="fidelity_sgd_epochs", type=int)
    p.add_argument("--fidelity-history", dest="fidelity_history", type=int)
    p.add_argument("--factors", type=int, help="latent factor count")
    p.add_argument("--sgd-epochs", dest="sgd_epochs", type=int, help="SGD epochs per fit")
    p.add_argument("--self-test", dest="self_test", action="store_true",
                   help="validate the optimizers on a planted quadratic and exit")
    p.set_defaults(func=cmd_escape)

    p = sub.add_parser("diversity", help="content diversity of a movie set")
    _add_common(p, with_ratings=False)
    p.add_argument("ids", nargs="*", type=int, help="movie ids")
    p.add_argument("--movies-file", dest="movies_file", help="file of movie ids")
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("validate-data", help="parse and sanity-check input files")
    _add_common(p)
    p.set_defaults(func=cmd_validate_data)
    return parser


def entrypoint(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.data_dir is None:
        import os

        args.data_dir = os.environ.get("ECHOCHAMBER_DATA_DIR")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ValidationError, ValueError, KeyError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL
