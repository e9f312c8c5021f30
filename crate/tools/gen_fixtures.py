#!/usr/bin/env python3
"""Generates frozen clustering fixtures for the Rust test suite.

Each fixture is a JSON file with the input points, the clustering
parameters, and the labels produced by scikit-learn's HDBSCAN. The Rust
implementation is expected to reproduce these partitions (measured by
adjusted Rand index) without ever calling back into Python.

Values are rounded before labeling so the serialized floats are exactly
the floats the reference labels were computed on.
"""

import json
import pathlib

import numpy as np
from sklearn.cluster import HDBSCAN

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/hdbscan"
DIM = 16


def blob(rng, center, sigma, n):
    c = np.zeros(DIM)
    c[: len(center)] = center
    return rng.normal(loc=c, scale=sigma, size=(n, DIM))


def save(name, points, params):
    points = np.round(points, 6)
    labels = HDBSCAN(
        min_cluster_size=params["min_cluster_size"],
        min_samples=params["min_samples"],
        cluster_selection_epsilon=params["cluster_selection_epsilon"],
        allow_single_cluster=params["allow_single_cluster"],
        cluster_selection_method="eom",
    ).fit_predict(points)
    n_clusters = len(set(labels.tolist()) - {-1})
    n_noise = int((labels == -1).sum())
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / f"{name}.json", "w") as f:
        json.dump(
            {
                "name": name,
                "dim": DIM,
                "params": params,
                "points": points.tolist(),
                "labels": labels.tolist(),
            },
            f,
        )
    print(f"{name}: {len(points)} points, {n_clusters} clusters, {n_noise} noise")


def main():
    rng = np.random.default_rng(20240817)
    base = {
        "min_cluster_size": 10,
        "min_samples": 10,
        "cluster_selection_epsilon": 0.0,
        "allow_single_cluster": False,
    }

    # Three well-separated blobs: the easy case.
    pts = np.vstack(
        [
            blob(rng, [0, 0], 0.5, 200),
            blob(rng, [10, 0], 0.5, 200),
            blob(rng, [0, 10, 5], 0.5, 200),
        ]
    )
    save("three_blobs", rng.permutation(pts), dict(base))

    # Two blobs plus scattered background that should come out as noise.
    pts = np.vstack(
        [
            blob(rng, [0, 0], 0.4, 150),
            blob(rng, [8, 0], 0.4, 150),
            rng.uniform(-12, 12, size=(60, DIM)),
        ]
    )
    save("blobs_with_noise", rng.permutation(pts), dict(base))

    # A tight and a diffuse cluster: stability must cope with mixed density.
    pts = np.vstack(
        [
            blob(rng, [0, 0], 0.15, 150),
            blob(rng, [6, 0], 0.9, 200),
            rng.uniform(-10, 14, size=(40, DIM)),
        ]
    )
    save("mixed_density", rng.permutation(pts), dict(base))

    # Two nearby blobs next to a far one, with and without an epsilon
    # floor that merges the near pair.
    pts = np.vstack(
        [
            blob(rng, [0, 0], 0.5, 150),
            blob(rng, [6.0, 0], 0.5, 150),
            blob(rng, [25, 0], 0.5, 150),
        ]
    )
    pts = rng.permutation(pts)
    save("near_pair", pts, dict(base))
    save("near_pair_epsilon", pts, dict(base, cluster_selection_epsilon=8.0))

    # Exact duplicate pairs sprinkled into one blob (zero distances).
    a = blob(rng, [0, 0], 0.5, 140)
    dupes = a[rng.choice(len(a), size=12, replace=False)]
    pts = np.vstack([a, dupes, blob(rng, [9, 0], 0.5, 150)])
    save("duplicate_points", rng.permutation(pts), dict(base))

    # One blob plus faint noise where the root itself is the best cluster,
    # with and without a distance floor on membership.
    pts = np.vstack(
        [
            blob(rng, [0, 0], 0.6, 250),
            rng.uniform(-15, 15, size=(30, DIM)),
        ]
    )
    pts = rng.permutation(pts)
    save("single_cluster", pts, dict(base, allow_single_cluster=True))
    save(
        "single_cluster_epsilon",
        pts,
        dict(base, allow_single_cluster=True, cluster_selection_epsilon=4.0),
    )

    # The acceptance-gate trio, run with the grounding-stage parameters
    # (epsilon floor 0.01). Three tight planted blobs with centers at
    # pairwise distance 1.5; the same blobs with one blob fully
    # duplicated (cluster count must not change); and a handful of
    # points spread over the unit sphere (no dense region, so noise).
    gate = dict(base, cluster_selection_epsilon=0.01)
    tri = [
        [0.0, 0.0],
        [1.5, 0.0],
        [0.75, 1.5 * np.sqrt(3) / 2],
    ]
    blobs = [blob(rng, c, 0.05, 30) for c in tri]
    save("planted_blobs", rng.permutation(np.vstack(blobs)), dict(gate))
    save(
        "planted_blobs_duplicated",
        rng.permutation(np.vstack(blobs + [blobs[0]])),
        dict(gate),
    )

    sphere = rng.normal(size=(30, DIM))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    save("sphere_noise", sphere, dict(gate))


if __name__ == "__main__":
    main()
