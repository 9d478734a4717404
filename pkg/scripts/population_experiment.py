#!/usr/bin/env python3
"""Two-class state population study.

Expects the user-supplied dataset at data/state_population.csv in long
format (header series_id,t,y_1; one row per state and year, t = 0..99
for the years 1900..1999) and the reference grouping at
data/state_population_labels.csv (header series_id,label; label 0 for
the ~linear-growth states, 1 for the ~exponential-growth states).  The
dataset is the public US census state population table for twenty
states; it is not bundled with the repository.

Preprocessing follows the panel-data recipe: natural log of the raw
populations, then per-series min-max to [0, 1].  Fits use the k-means
initialization with M=2 and report the mean and standard deviation of
the cluster similarity over repeated runs for each latent dimension.

Usage:
  python3 scripts/population_experiment.py
  python3 scripts/population_experiment.py --dims 2 12 --repeats 10 --threads 8
"""

import argparse
import pathlib
import sys
import time

import numpy as np

from lgssmix import FitOptions, build_initial_model, cluster_similarity, fit_mixture
from lgssmix.cli import align_labels, read_labels, ingest, parse_transforms, preprocess

DATA = pathlib.Path(__file__).resolve().parent.parent / "data"
DATASET = DATA / "state_population.csv"
LABELS = DATA / "state_population_labels.csv"


def load():
    if not DATASET.exists() or not LABELS.exists():
        sys.exit(
            f"missing {DATASET} or {LABELS}; see the data section of the README "
            "for the expected format"
        )
    dataset = preprocess(
        ingest(DATASET, "csv-long"),
        parse_transforms(["log", "minmax-per-series"]),
    )
    labels = align_labels(read_labels(LABELS), dataset, str(LABELS))
    return dataset, labels


def run(dataset, labels, d, repeats, restarts, threads, base_seed):
    sims = []
    for r in range(repeats):
        options = FitOptions(
            seed=base_seed + r,
            threads=threads,
            init="kmeans",
            kmeans_restarts=restarts,
        )
        model0 = build_initial_model(dataset, 2, d, options)
        report = fit_mixture(dataset, model0, options)
        sim, _, _ = cluster_similarity(labels, report.assignments, 2)
        sims.append(sim)
        print(f"  d={d} repeat {r}: similarity {sim:.3f}  abic {report.abic:.1f}", flush=True)
    return np.array(sims)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dims", type=int, nargs="+", default=[2, 12], help="latent dimensions")
    parser.add_argument("--repeats", type=int, default=10)
    parser.add_argument("--kmeans-restarts", type=int, default=30)
    parser.add_argument("--threads", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    dataset, labels = load()
    print(f"{len(dataset)} series, lengths {sorted({s.length for s in dataset})}, "
          f"{int(np.bincount(labels)[0])}/{int(np.bincount(labels)[1])} split")

    t0 = time.perf_counter()
    for d in args.dims:
        sims = run(dataset, labels, d, args.repeats, args.kmeans_restarts,
                   args.threads, args.seed)
        print(f"d={d}: mean similarity {sims.mean():.3f} +- {sims.std():.3f} "
              f"({args.repeats} repeats)")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
