"""Command line front end: ingestion, preprocessing, fitting, selection.

Subcommands
-----------
simulate   write the three-class benchmark dataset (JSON) plus labels
fit        fit a mixture and write model/assignments/trace artifacts
select     run an (M, d) grid search and write grid.csv / best.json
evaluate   score saved assignments against reference labels
predict    noiseless per-cluster trajectories from a saved model

Datasets are JSON ({"series": [{"id", "t", "y"}]}) or long-format CSV with
header series_id,t,y_1,...,y_n and one row per sample.  Timestamps are
shifted so every series starts at t=0.  Within a series, CSV rows must
appear in increasing time order; out-of-order or duplicate rows are
errors rather than silently sorted, since sorting can mask corrupted
exports.  Rows of different series may interleave.

Preprocessing transforms (--transform, applied left to right):

  log                   natural log; requires strictly positive data
  minmax-per-series     per series and per feature, map min..max to 0..1
  diff                  first differences; drops the first sample and
                        shifts the remaining timestamps to start at 0
  global-max-scale      divide each feature by its largest magnitude
                        across the whole dataset
  affine(a,b)           y -> a*y + b, e.g. affine(0.25,-0.25) maps the
                        Likert range 1..5 onto 0..1
  rescale-time-unit     divide each series' timestamps by its terminal
                        time; rescale-time-unit(x) divides by the
                        constant x instead.  Keeps step sizes small,
                        which the random initialization assumes.

All artifacts are plain JSON/CSV and re-ingestible: model.json reloads
for `evaluate` and `predict`, assignments.csv joins 1:1 with the input
series ids.  Exit status is 0 only when every requested fit completed
(converged or ran to the iteration cap); hard errors remove partially
written artifacts and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import pathlib
import re
import sys
import time

import numpy as np

from .em_mixture import fit_mixture
from .initialization import build_initial_model
from .model import (
    FIXABLE_FIELDS,
    FitOptions,
    LgssmixError,
    MixtureModel,
    TimeSeriesSample,
    TooShort,
    load_model,
    save_model,
    validate_dataset,
)
from .selection import cluster_similarity, grid_select
from .simulate import generate_benchmark, noiseless_trajectory

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INCOMPLETE = 2

TRAJECTORY_POINTS = 200


class ParseError(LgssmixError):
    """Malformed input file or flag value."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonPositiveForLog(LgssmixError):
    def __init__(self, series_id, k):
        self.series_id = series_id
        self.k = k
        super().__init__(f"series {series_id!r} sample {k} is not positive, cannot log-transform")


# ---------------------------------------------------------------------------
# ingestion


def _shifted_sample(series_id, t, y):
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ParseError(f"series {series_id!r}: timestamps must be a nonempty list")
    return TimeSeriesSample(series_id, t - t[0], y)


def _ingest_json(path):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: {e}", line=e.lineno) from e
    if not isinstance(obj, dict) or "series" not in obj:
        raise ParseError(f"{path}: expected a top-level object with a 'series' list")
    dataset = []
    seen = set()
    for entry in obj["series"]:
        try:
            sid, t, y = entry["id"], entry["t"], entry["y"]
        except (TypeError, KeyError) as e:
            raise ParseError(f"{path}: each series needs 'id', 't' and 'y' fields") from e
        if sid in seen:
            raise ParseError(f"{path}: duplicate series id {sid!r}")
        seen.add(sid)
        try:
            dataset.append(_shifted_sample(str(sid), t, y))
        except ValueError as e:
            raise ParseError(f"{path}: series {sid!r}: {e}") from e
    return dataset


_Y_COLUMN = re.compile(r"^y_(\d+)$")


def _ingest_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "series_id" or header[1] != "t":
            raise ParseError(f"{path}: header must start with series_id,t,y_1,...", line=1)
        for j, name in enumerate(header[2:], start=1):
            if _Y_COLUMN.match(name) is None or int(name[2:]) != j:
                raise ParseError(f"{path}: feature columns must be y_1..y_{len(header) - 2}, got {name!r}", line=1)
        n = len(header) - 2
        times, values = {}, {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 2:
                raise ParseError(f"{path}: expected {n + 2} columns, got {len(row)}", line=lineno)
            sid = row[0]
            try:
                t = float(row[1])
                y = [float(v) for v in row[2:]]
            except ValueError as e:
                raise ParseError(f"{path}: {e}", line=lineno) from e
            if sid in times:
                prev = times[sid][-1]
                if t == prev:
                    raise ParseError(f"{path}: duplicate timestamp {t} for series {sid!r}", line=lineno)
                if t < prev:
                    raise ParseError(f"{path}: out-of-order timestamp {t} for series {sid!r}", line=lineno)
            else:
                times[sid], values[sid] = [], []
            times[sid].append(t)
            values[sid].append(y)
    return [_shifted_sample(sid, times[sid], values[sid]) for sid in times]


def ingest(path, fmt="json"):
    """Load a dataset file, shift each series to start at t=0, validate."""
    if fmt == "json":
        dataset = _ingest_json(path)
    elif fmt == "csv-long":
        dataset = _ingest_csv(path)
    else:
        raise ParseError(f"unknown format {fmt!r}")
    validate_dataset(dataset)
    return dataset


def read_labels(path):
    """labels.csv (series_id,label) -> dict id -> int label."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["series_id", "label"]:
            raise ParseError(f"{path}: expected header series_id,label", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise ParseError(f"{path}: expected series_id,label", line=lineno)
            sid = row[0]
            if sid in out:
                raise ParseError(f"{path}: duplicate series id {sid!r}", line=lineno)
            try:
                out[sid] = int(row[1])
            except ValueError as e:
                raise ParseError(f"{path}: {e}", line=lineno) from e
    return out


def align_labels(label_map, dataset, path):
    missing = [s.id for s in dataset if s.id not in label_map]
    if missing:
        raise ParseError(f"{path}: no label for series {missing[0]!r}")
    extra = set(label_map) - {s.id for s in dataset}
    if extra:
        raise ParseError(f"{path}: label for unknown series {sorted(extra)[0]!r}")
    return np.array([label_map[s.id] for s in dataset], dtype=np.int64)


# ---------------------------------------------------------------------------
# preprocessing


def _transform_log(dataset, _):
    out = []
    for s in dataset:
        y = s.observations
        bad = y <= 0
        if bad.any():
            raise NonPositiveForLog(s.id, int(np.argwhere(bad)[0][0]))
        out.append(TimeSeriesSample(s.id, s.timestamps, np.log(y)))
    return out


def _transform_minmax(dataset, _):
    out = []
    for s in dataset:
        y = s.observations
        lo, hi = y.min(axis=0), y.max(axis=0)
        span = hi - lo
        span[span == 0] = 1.0
        out.append(TimeSeriesSample(s.id, s.timestamps, (y - lo) / span))
    return out


def _transform_diff(dataset, _):
    out = []
    for s in dataset:
        if s.length < 3:
            raise TooShort(s.id)
        t = s.timestamps[1:]
        out.append(TimeSeriesSample(s.id, t - t[0], np.diff(s.observations, axis=0)))
    return out


def _transform_global_max(dataset, _):
    scale = np.max([np.abs(s.observations).max(axis=0) for s in dataset], axis=0)
    scale[scale == 0] = 1.0
    return [TimeSeriesSample(s.id, s.timestamps, s.observations / scale) for s in dataset]


def _transform_affine(dataset, ab):
    a, b = ab
    return [TimeSeriesSample(s.id, s.timestamps, a * s.observations + b) for s in dataset]


def _transform_rescale_time(dataset, unit):
    out = []
    for s in dataset:
        div = s.timestamps[-1] if unit is None else unit
        if div <= 0:
            raise ParseError(f"series {s.id!r}: cannot rescale by nonpositive time unit {div}")
        out.append(TimeSeriesSample(s.id, s.timestamps / div, s.observations))
    return out


_TRANSFORMS = {
    "log": _transform_log,
    "minmax-per-series": _transform_minmax,
    "diff": _transform_diff,
    "global-max-scale": _transform_global_max,
    "affine": _transform_affine,
    "rescale-time-unit": _transform_rescale_time,
}

_AFFINE_TOKEN = re.compile(r"^affine\(([^(),]+),([^(),]+)\)$")
_RESCALE_TOKEN = re.compile(r"^rescale-time-unit(?:\(([^()]+)\))?$")


def parse_transforms(tokens):
    """Turn --transform tokens into (name, argument) steps, order preserved."""
    steps = []
    for tok in tokens:
        m = _AFFINE_TOKEN.match(tok)
        if m:
            try:
                steps.append(("affine", (float(m.group(1)), float(m.group(2)))))
            except ValueError as e:
                raise ParseError(f"bad affine arguments in {tok!r}") from e
            continue
        m = _RESCALE_TOKEN.match(tok)
        if m:
            unit = None
            if m.group(1) is not None:
                try:
                    unit = float(m.group(1))
                except ValueError as e:
                    raise ParseError(f"bad time unit in {tok!r}") from e
                if unit <= 0:
                    raise ParseError(f"time unit must be positive in {tok!r}")
            steps.append(("rescale-time-unit", unit))
            continue
        if tok in ("log", "minmax-per-series", "diff", "global-max-scale"):
            steps.append((tok, None))
            continue
        raise ParseError(f"unknown transform {tok!r}")
    return steps


def preprocess(dataset, steps):
    """Apply parsed transform steps in order and revalidate."""
    for name, arg in steps:
        dataset = _TRANSFORMS[name](dataset, arg)
    validate_dataset(dataset)
    return dataset


# ---------------------------------------------------------------------------
# artifact writing


class _ArtifactDir:
    """Tracks files written by one command so a failure can clean up."""

    def __init__(self, out):
        self.root = pathlib.Path(out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written = []

    def path(self, name):
        p = self.root / name
        self.written.append(p)
        return p

    def discard(self):
        for p in self.written:
            p.unlink(missing_ok=True)


def _fmt(x):
    x = float(x)
    return "" if np.isnan(x) else repr(x)


def _write_dataset_json(path, dataset):
    obj = {
        "series": [
            {"id": s.id, "t": s.timestamps.tolist(), "y": s.observations.tolist()}
            for s in dataset
        ]
    }
    with open(path, "w") as fh:
        json.dump(obj, fh)
        fh.write("\n")


def _write_labels_csv(path, dataset, labels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "label"])
        for s, lab in zip(dataset, labels):
            writer.writerow([s.id, int(lab)])


def _write_assignments_csv(path, dataset, assignments, probs):
    M = probs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "cluster"] + [f"resp_{l}" for l in range(M)])
        for s, a, row in zip(dataset, assignments, probs):
            writer.writerow([s.id, int(a)] + [repr(float(p)) for p in row])


def _write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loglik", "param_delta", "warnings"])
        for entry in trace:
            writer.writerow(
                [entry.iteration, repr(float(entry.loglik)), repr(float(entry.param_delta)),
                 "; ".join(entry.warnings)]
            )


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _write_trajectories_csv(path, model: MixtureModel, t_max):
    grid = np.linspace(0.0, t_max, TRAJECTORY_POINTS)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", "t"] + [f"y_{j + 1}" for j in range(model.n)])
        for l, theta in enumerate(model.clusters):
            traj = noiseless_trajectory(theta, grid)
            for t, row in zip(grid, traj):
                writer.writerow([l, repr(float(t))] + [repr(float(v)) for v in row])


def _read_assignments(path):
    """assignments.csv -> dict id -> int cluster."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["series_id", "cluster"]:
            raise ParseError(f"{path}: expected header series_id,cluster,...", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            sid = row[0]
            if sid in out:
                raise ParseError(f"{path}: duplicate series id {sid!r}", line=lineno)
            try:
                out[sid] = int(row[1])
            except (IndexError, ValueError) as e:
                raise ParseError(f"{path}: {e}", line=lineno) from e
    return out


# ---------------------------------------------------------------------------
# flag plumbing


def _parse_range(text, flag):
    """'3' -> (3, 3); '2..4' -> (2, 4)."""
    m = re.match(r"^(\d+)(?:\.\.(\d+))?$", text)
    if m is None:
        raise ParseError(f"{flag} expects an integer or A..B range, got {text!r}")
    lo = int(m.group(1))
    hi = int(m.group(2)) if m.group(2) is not None else lo
    if lo < 1 or hi < lo:
        raise ParseError(f"{flag} range {text!r} is empty or invalid")
    return lo, hi


def _single_value(text, flag):
    lo, hi = _parse_range(text, flag)
    if lo != hi:
        raise ParseError(f"{flag} must be a single value here, got range {text!r}")
    return lo


def _options_from_args(args, threads=None):
    fixed = frozenset(p for p in (args.fix or "").split(",") if p)
    try:
        return FitOptions(
            tol=args.tol,
            max_iter=args.max_iter,
            seed=args.seed,
            threads=args.threads if threads is None else threads,
            init=args.init,
            kmeans_restarts=args.kmeans_restarts,
            fixed_params=fixed,
        )
    except ValueError as e:
        raise ParseError(str(e)) from e


def _load_dataset(args):
    dataset = ingest(args.data, args.format)
    steps = parse_transforms(args.transform or [])
    return preprocess(dataset, steps)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    dataset, labels, truth = generate_benchmark(args.seed)
    art = _ArtifactDir(args.out)
    try:
        _write_dataset_json(art.path("dataset.json"), dataset)
        _write_labels_csv(art.path("labels.csv"), dataset, labels)
        save_model(truth, art.path("truth.json"))
    except BaseException:
        art.discard()
        raise
    print(f"wrote {art.root}/dataset.json ({len(dataset)} series), labels.csv, truth.json")
    return EXIT_OK


def cmd_fit(args):
    dataset = _load_dataset(args)
    M = _single_value(args.clusters, "--clusters")
    d = _single_value(args.latent_dim, "--latent-dim")
    options = _options_from_args(args)
    t0 = time.perf_counter()
    model0 = build_initial_model(dataset, M, d, options)
    report = fit_mixture(dataset, model0, options)
    wall = time.perf_counter() - t0

    art = _ArtifactDir(args.out)
    try:
        save_model(report.model, art.path("model.json"))
        _write_assignments_csv(art.path("assignments.csv"), dataset, report.assignments, report.responsibilities)
        _write_trace_csv(art.path("trace.csv"), report.trace)
        _write_json(
            art.path("summary.json"),
            {
                "abic": report.abic,
                "loglik": report.loglik,
                "converged": report.converged,
                "iterations": report.iterations,
                "wall_time_s": wall,
                "n_series": len(dataset),
            },
        )
        if args.trajectories:
            t_max = max(float(s.timestamps[-1]) for s in dataset)
            _write_trajectories_csv(art.path("trajectories.csv"), report.model, t_max)
    except BaseException:
        art.discard()
        raise
    completed = report.converged or report.iterations >= options.max_iter
    status = "converged" if report.converged else ("max-iter" if completed else "aborted")
    print(
        f"fit {status}: {report.iterations} iterations, loglik {report.loglik:.6g}, "
        f"abic {report.abic:.6g} ({wall:.1f}s); artifacts in {art.root}"
    )
    return EXIT_OK if completed else EXIT_INCOMPLETE


def cmd_select(args):
    dataset = _load_dataset(args)
    M_lo, M_hi = _parse_range(args.clusters, "--clusters")
    d_lo, d_hi = _parse_range(args.latent_dim, "--latent-dim")
    labels = None
    if args.labels:
        labels = align_labels(read_labels(args.labels), dataset, args.labels)
    options = _options_from_args(args)
    result = grid_select(
        dataset,
        range(M_lo, M_hi + 1),
        range(d_lo, d_hi + 1),
        repeats=args.repeats,
        options=options,
        labels=labels,
    )

    art = _ArtifactDir(args.out)
    try:
        with open(art.path("grid.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["M", "d", "repeat", "seed", "abic", "loglik", "similarity", "converged"])
            for row in result.rows:
                sim = "" if row.similarity is None else repr(float(row.similarity))
                writer.writerow(
                    [row.M, row.d, row.repeat, row.seed, _fmt(row.abic), _fmt(row.loglik), sim, row.converged]
                )
        best = result.best
        if best is not None:
            mean, std, n_ok = result.cell_stats()[best]
            _write_json(
                art.path("best.json"),
                {"M": best[0], "d": best[1], "mean_abic": mean, "std_abic": std, "n_ok": n_ok},
            )
    except BaseException:
        art.discard()
        raise
    failed = [row for row in result.rows if row.error]
    for row in failed:
        print(f"cell M={row.M} d={row.d} repeat={row.repeat} failed: {row.error}", file=sys.stderr)
    if best is None:
        print(f"every grid cell failed; see {art.root}/grid.csv", file=sys.stderr)
        return EXIT_INCOMPLETE
    print(f"best cell M={best[0]} d={best[1]} (mean abic {mean:.6g}); artifacts in {art.root}")
    return EXIT_INCOMPLETE if failed else EXIT_OK


def cmd_evaluate(args):
    label_map = read_labels(args.labels)
    assign_map = _read_assignments(args.assignments)
    ids = list(assign_map)
    missing = [sid for sid in ids if sid not in label_map]
    if missing:
        raise ParseError(f"{args.labels}: no label for series {missing[0]!r}")
    extra = set(label_map) - set(ids)
    if extra:
        raise ParseError(f"{args.assignments}: no assignment for series {sorted(extra)[0]!r}")
    true = np.array([label_map[sid] for sid in ids], dtype=np.int64)
    pred = np.array([assign_map[sid] for sid in ids], dtype=np.int64)
    M = int(max(true.max(), pred.max())) + 1
    sim, perm, confusion = cluster_similarity(true, pred, M)
    obj = {
        "similarity": sim,
        "n_series": len(ids),
        "permutation": perm.tolist(),
        "confusion": confusion.tolist(),
    }
    print(json.dumps(obj, indent=2))
    if args.out:
        art = _ArtifactDir(args.out)
        try:
            _write_json(art.path("evaluation.json"), obj)
        except BaseException:
            art.discard()
            raise
    return EXIT_OK


def cmd_predict(args):
    model = load_model(args.model)
    if args.data:
        dataset = _load_dataset(args)
        t_max = max(float(s.timestamps[-1]) for s in dataset)
    else:
        t_max = 1.0
    art = _ArtifactDir(args.out)
    try:
        _write_trajectories_csv(art.path("trajectories.csv"), model, t_max)
    except BaseException:
        art.discard()
        raise
    print(f"wrote {art.root}/trajectories.csv ({model.M} clusters, horizon {t_max:g})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_data_flags(p, required=True):
    p.add_argument("--data", required=required, help="dataset file")
    p.add_argument("--format", choices=("json", "csv-long"), default="json", help="dataset file format")
    p.add_argument("--transform", nargs="+", default=[], metavar="T",
                   help="preprocessing steps applied in order (see module docstring)")


def _add_fit_flags(p):
    p.add_argument("--init", choices=("identity", "random", "kmeans"), default="identity",
                   help="initialization strategy")
    p.add_argument("--kmeans-restarts", type=int, default=30, metavar="R",
                   help="per-series restarts for the kmeans initialization")
    p.add_argument("--tol", type=float, default=0.1, help="parameter-change convergence threshold")
    p.add_argument("--max-iter", type=int, default=1000, metavar="I", help="iteration cap")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomized steps")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--fix", default="", metavar="LIST",
                   help=f"comma-separated parameters to hold at their initial values, from {','.join(FIXABLE_FIELDS)}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lgssmix",
        description="Cluster irregularly sampled multivariate time series with a mixture of "
                    "linear Gaussian state space models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate the three-class benchmark dataset")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a mixture model")
    _add_data_flags(p)
    p.add_argument("--clusters", required=True, metavar="M", help="number of clusters")
    p.add_argument("--latent-dim", required=True, metavar="D", help="latent dimension")
    _add_fit_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--trajectories", action="store_true",
                   help="also write per-cluster noiseless trajectories")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="grid search over (M, d) by mean ABIC")
    _add_data_flags(p)
    p.add_argument("--clusters", required=True, metavar="M|A..B", help="cluster counts to try")
    p.add_argument("--latent-dim", required=True, metavar="D|A..B", help="latent dimensions to try")
    p.add_argument("--repeats", type=int, default=1, metavar="K", help="fits per grid cell")
    p.add_argument("--labels", help="labels.csv for a similarity column")
    _add_fit_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="similarity of saved assignments vs reference labels")
    p.add_argument("--labels", required=True, help="labels.csv (series_id,label)")
    p.add_argument("--assignments", required=True, help="assignments.csv from a fit")
    p.add_argument("--out", help="optional directory for evaluation.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="noiseless trajectories from a saved model")
    p.add_argument("--model", required=True, help="model.json from a fit")
    _add_data_flags(p, required=False)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LgssmixError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
