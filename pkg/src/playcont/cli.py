"""Command-line interface: ``playcont {synth,prepare,train,evaluate,experiment}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
Set ``PLAYCONT_THREADS`` to cap the number of BLAS worker threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._container import ModelFormatError
from .dataset import (
    FormatError,
    bundle_checksum,
    filter_collection,
    generate_synthetic,
    load_bundle,
    load_features,
    load_playlists,
    save_bundle,
    split_strong,
    split_weak,
    write_features,
    write_playlists,
)
from .evaluation import (
    UnsupportedModeError,
    parse_buckets,
    run_experiment,
    write_bucket_table,
    write_report,
)
from .experiment import grid_search_matchnet, grid_search_wmf, run_synthetic_experiment
from .matchnet import MatchNetRecommender
from .wmf import RandomRecommender, WMFRecommender

_log = logging.getLogger("playcont")


class InputError(Exception):
    """Bad flags or unreadable inputs; maps to exit code 2."""


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file or directory: {path}")
    return p


def _run_config(args) -> dict:
    # the output location is left out so relocated reruns stay byte-identical
    cfg = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "out"):
            continue
        cfg[key] = str(value) if isinstance(value, Path) else value
    cfg["version"] = __version__
    return cfg


def _write_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    playlists, features = generate_synthetic(
        n_clusters=args.n_clusters,
        songs_per_cluster=args.songs_per_cluster,
        n_playlists=args.n_playlists,
        playlist_len=args.playlist_len,
        dim=args.dim,
        noise_sd=args.noise_sd,
        cross_cluster_prob=args.cross_prob,
        rng_seed=args.seed,
        songs_per_artist=args.songs_per_artist,
        taste_sharpness=args.taste,
    )
    write_playlists(playlists, out / "playlists.pls")
    write_features(features, out / "features.txt")
    _write_json({"run_config": _run_config(args)}, out / "run.json")
    print(f"seed {args.seed}: wrote {len(playlists)} playlists and {len(features)} songs to {out}")
    return 0


# -- prepare -------------------------------------------------------------------


def _quartiles(values) -> list[float]:
    if len(values) == 0:
        return [float("nan")] * 5
    return [float(q) for q in np.percentile(np.asarray(values, dtype=float), [0, 25, 50, 75, 100])]


def collection_stats(playlists) -> dict[str, list[float]]:
    """min / 1st quartile / median / 3rd quartile / max of the descriptive statistics."""
    freq: dict[str, int] = {}
    for p in playlists:
        for s in p.songs:
            freq[s] = freq.get(s, 0) + 1
    return {
        "songs per playlist": _quartiles([len(p) for p in playlists]),
        "artists per playlist": _quartiles([len(set(p.artists)) for p in playlists]),
        "song frequency": _quartiles(list(freq.values())),
    }


def _format_stats(title: str, stats: dict) -> list[str]:
    lines = [f"{title:<22}{'min':>8}{'1q':>8}{'med':>8}{'3q':>8}{'max':>8}"]
    for name, qs in stats.items():
        lines.append(f"{name:<22}" + "".join(f"{q:>8.6g}" for q in qs))
    return lines


def cmd_prepare(args) -> int:
    playlists = load_playlists(_existing(args.playlists))
    features = load_features(_existing(args.features))
    kept, fstats = filter_collection(
        playlists, features,
        min_artists=args.min_artists,
        max_per_artist=args.max_per_artist,
        min_linked=args.min_linked,
        min_final=args.min_final,
    )
    if not kept:
        raise InputError("no playlists survived filtering")
    if args.mode == "weak":
        bundle = split_weak(kept, args.holdout_fraction, args.seed, universe=features.ids)
    else:
        bundle = split_strong(kept, args.playlist_fraction, args.holdout_fraction, args.seed,
                              universe=features.ids)
    bundle.meta["filter"] = vars(fstats)
    bundle.meta["run_config"] = _run_config(args)
    train_stats = collection_stats(bundle.train_playlists)
    test_stats = collection_stats(bundle.continuations.values())
    bundle.meta["stats"] = {"train": train_stats, "test": test_stats}
    out = save_bundle(bundle, args.out)

    counts = [
        ("input playlists", fstats.n_input),
        (f"rejected: artists (< {args.min_artists} or > {args.max_per_artist} per artist)",
         fstats.rejected_artists),
        (f"rejected: fewer than {args.min_linked} songs", fstats.rejected_short),
        ("songs dropped: no features", fstats.dropped_songs),
        (f"rejected: fewer than {args.min_final} songs left", fstats.rejected_final),
        ("kept", fstats.n_output),
    ]
    lines = [
        *(f"{name:<44}{n:>8}" for name, n in counts),
        "",
        *_format_stats("training set", train_stats),
        "",
        *_format_stats("test set", test_stats),
        "",
        f"bundle {out} ({args.mode}, seed {args.seed}) sha256 {bundle_checksum(out)}",
    ]
    print("\n".join(lines))
    return 0


# -- train ---------------------------------------------------------------------


def _train_matchnet(args, bundle, features, out: Path) -> dict:
    grid = {
        "hidden_dim": args.hidden_dim,
        "learning_rate": args.learning_rate,
        "dropout_rate": args.dropout,
    }
    base = dict(
        g_hidden=args.g_hidden,
        f_blocks=args.f_blocks,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        validation_fraction=args.validation_fraction,
        resample_negatives=args.resample_negatives,
        random_state=args.seed,
    )
    best, log = grid_search_matchnet(bundle.train_playlists, features, grid, base, bundle.universe)
    run_config = _run_config(args)
    best.save(out / "model.pmn", meta={"run_config": json.dumps(run_config, sort_keys=True)})
    with open(out / "grid_log.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*grid, "validation_cost"])
        for entry in log:
            w.writerow([*(entry.params[k] for k in grid), f"{entry.score:.6g}"])
    _log.info("training took %.1f s", best.report_.seconds)
    return {
        "model": "matchnet",
        "selected": next(e.params for e in log if e.estimator is best),
        "train_report": best.report_.to_dict(),
        "run_config": run_config,
    }


def _train_wmf(args, bundle, out: Path) -> dict:
    grid = {"alpha": args.alpha, "regularization": args.lambda_}
    base = {"factors": args.factors, "sweeps": args.sweeps, "random_state": args.seed}
    best, log = grid_search_wmf(bundle.train_playlists, bundle.universe, grid, base,
                                validation_fraction=args.validation_holdout, rng_seed=args.seed)
    run_config = _run_config(args)
    best.save(out / "model.pwmf", meta={"run_config": json.dumps(run_config, sort_keys=True)})
    with open(out / "grid_log.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "regularization", "validation_map"])
        for entry in log:
            w.writerow([entry.params["alpha"], entry.params["regularization"], f"{entry.score:.6g}"])
    return {
        "model": "wmf",
        "selected": {"alpha": best.alpha, "regularization": best.regularization},
        "run_config": run_config,
    }


def cmd_train(args) -> int:
    bundle = load_bundle(_existing(args.bundle))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.model == "wmf":
        if bundle.mode != "weak":
            raise UnsupportedModeError("WMF can only be trained on a weak-generalization bundle")
        summary = _train_wmf(args, bundle, out)
    else:
        if args.features is None:
            raise InputError("--features is required for the matchnet model")
        features = load_features(_existing(args.features))
        summary = _train_matchnet(args, bundle, features, out)
    summary["bundle_sha256"] = bundle_checksum(args.bundle)
    _write_json(summary, out / "train_report.json")
    _write_json({"run_config": summary["run_config"]}, out / "run.json")
    print(f"seed {args.seed}: {args.model} selected {summary['selected']}, model written to {out}")
    return 0


# -- evaluate ------------------------------------------------------------------


def _load_scorer(args):
    if args.model == "random":
        return RandomRecommender(args.seed)
    path = _existing(args.model)
    magic = path.read_bytes()[:4]
    if magic == b"PWMF":
        return WMFRecommender.from_file(path)
    if magic == b"PMN1":
        if args.features is None:
            raise InputError("--features is required to evaluate a matchnet model")
        return MatchNetRecommender.from_file(path, load_features(_existing(args.features)))
    raise InputError(f"{path} is not a recognised model file")


def cmd_evaluate(args) -> int:
    bundle = load_bundle(_existing(args.bundle))
    try:
        buckets = parse_buckets(args.buckets)
    except ValueError as exc:
        raise InputError(f"--buckets: {exc}") from None
    scorer = _load_scorer(args)
    config = _run_config(args)
    config["bundle_sha256"] = bundle_checksum(args.bundle)
    config["scorer"] = type(scorer).__name__
    started = time.perf_counter()
    report = run_experiment(bundle, scorer, args.cutoffs, buckets, config=config)
    _log.info("evaluation took %.1f s", time.perf_counter() - started)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json({"run_config": config}, out / "run.json")
    write_report(report, out / "report.jsonl", "json-lines")
    write_report(report, out / "report.csv", "csv")
    write_bucket_table(report, out / "buckets.csv")
    recalls = " ".join(f"R@{k} {v:.4f}" for k, v in sorted(report.mean_recall_at.items()))
    print(f"seed {args.seed}: median rank {report.median_rank:.6g}  MAP {report.map:.4f}  {recalls}")
    return 0


# -- experiment ----------------------------------------------------------------


def cmd_experiment(args) -> int:
    synthetic = {
        "n_playlists": args.n_playlists,
        "playlist_len": args.playlist_len,
        "taste_sharpness": args.taste,
        "cross_cluster_prob": args.cross_prob,
    }
    matchnet = {"hidden_dim": args.hidden_dim[0], "g_hidden": args.hidden_dim[0],
                "max_epochs": args.epochs, "patience": args.patience}
    res = run_synthetic_experiment(args.seed, synthetic, matchnet, wmf_factors=args.factors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json({"run_config": _run_config(args)}, out / "run.json")
    rows = []
    for setting, reports in (("weak", res.weak), ("strong", res.strong)):
        for name, rep in reports.items():
            rep.config = {"run_config": _run_config(args), "setting": setting, "model": name}
            write_report(rep, out / f"{setting}_{name}.jsonl")
            rows.append((setting, name, rep))
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "model", "median_rank", "map", "recall@10", "recall@30", "recall@100"])
        for setting, name, rep in rows:
            w.writerow([setting, name, f"{rep.median_rank:.6g}", f"{rep.map:.6g}",
                        *(f"{rep.mean_recall_at[k]:.6g}" for k in (10, 30, 100))])
    for setting, name, rep in rows:
        print(f"{setting:<7}{name:<10}median rank {rep.median_rank:>7.6g}  MAP {rep.map:.4f}  "
              f"R@100 {rep.mean_recall_at[100]:.4f}")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="playcont", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic playlist collection and features")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-clusters", type=int, default=5)
    p.add_argument("--songs-per-cluster", type=int, default=200)
    p.add_argument("--n-playlists", type=int, default=400)
    p.add_argument("--playlist-len", type=int, default=15)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--noise-sd", type=float, default=0.3)
    p.add_argument("--cross-prob", type=float, default=0.1)
    p.add_argument("--songs-per-artist", type=int, default=1)
    p.add_argument("--taste", type=float, default=0.0, help="within-cluster taste sharpness")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="filter a collection and write a split bundle")
    p.add_argument("--playlists", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--mode", choices=("weak", "strong"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-artists", type=int, default=7)
    p.add_argument("--max-per-artist", type=int, default=2)
    p.add_argument("--min-linked", type=int, default=14)
    p.add_argument("--min-final", type=int, default=5)
    p.add_argument("--holdout-fraction", type=float, default=0.2)
    p.add_argument("--playlist-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a matchnet or WMF model on a bundle; comma lists form a grid")
    p.add_argument("--bundle", required=True)
    p.add_argument("--model", choices=("matchnet", "wmf"), required=True)
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden-dim", type=_ints, default=[128])
    p.add_argument("--g-hidden", type=int, default=128)
    p.add_argument("--f-blocks", type=int, default=2)
    p.add_argument("--dropout", type=_floats, default=[0.5])
    p.add_argument("--learning-rate", type=_floats, default=[1e-3])
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--resample-negatives", action="store_true")
    p.add_argument("--factors", type=int, default=64)
    p.add_argument("--alpha", type=_floats, default=[1.0, 10.0, 40.0, 100.0])
    p.add_argument("--lambda", dest="lambda_", type=_floats, default=[0.01, 0.1, 1.0])
    p.add_argument("--sweeps", type=int, default=15)
    p.add_argument("--validation-holdout", type=float, default=0.2,
                   help="share of each training playlist withheld for WMF model selection")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run the offline continuation experiment")
    p.add_argument("--bundle", required=True)
    p.add_argument("--model", required=True, help="model file, or 'random'")
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cutoffs", type=_ints, default=[10, 30, 100])
    p.add_argument("--buckets", default="0,1,2,3-4,5+",
                   help="training-frequency buckets, e.g. '0,1,2,3-4,5+'")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="synthetic end-to-end experiment with all models")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-playlists", type=int, default=400)
    p.add_argument("--playlist-len", type=int, default=15)
    p.add_argument("--taste", type=float, default=40.0)
    p.add_argument("--cross-prob", type=float, default=0.05)
    p.add_argument("--hidden-dim", type=_ints, default=[64])
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=8)
    p.add_argument("--factors", type=int, default=8)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    threads = os.environ.get("PLAYCONT_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (InputError, FormatError, ModelFormatError, UnsupportedModeError, FileNotFoundError) as exc:
        print(f"playcont: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level handler maps to the runtime exit code
        _log.debug("unhandled error", exc_info=True)
        print(f"playcont: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
