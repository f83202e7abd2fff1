"""Synthetic two-blob intrusion-style datasets for benchmarks and demos."""

from __future__ import annotations

import numpy as np
import pandas as pd

from .data import CATEGORICAL, Dataset, Feature, FeatureSchema, NUMERICAL

BANDS = ("low", "mid", "high")


def two_blob_dataset(
    n_rows: int = 5000,
    seed: int = 0,
    separation: float = 6.0,
    cat_skew: float = 0.8,
    planted: bool = False,
) -> Dataset:
    """Two Gaussian blobs (benign around -s/2, attack around +s/2) with one
    class-correlated categorical feature.

    With planted=True roughly half the attack rows form a tagged 'probe'
    sub-cluster sitting just on the attack side of the boundary, close
    enough to benign traffic that no flow coordinate separates it cleanly;
    a third numerical marker (~5 there, ~0 elsewhere) is the only pure
    giveaway. Rows carry tags usable for zero-day hold-outs.
    """
    rng = np.random.default_rng(seed)
    n_attack = n_rows // 2
    n_benign = n_rows - n_attack
    labels = np.concatenate([np.zeros(n_benign, np.int8), np.ones(n_attack, np.int8)])
    centers = np.where(labels[:, None] == 0, -separation / 2.0, separation / 2.0)
    num = rng.normal(size=(n_rows, 2)) + centers

    rest = (1.0 - cat_skew) / 2.0
    probs = np.where(
        labels[:, None] == 0,
        np.array([cat_skew, rest, rest]),
        np.array([rest, rest, cat_skew]),
    )
    u = rng.random(n_rows)
    codes = (u[:, None] > probs.cumsum(axis=1)).sum(axis=1).astype(np.int32)

    features = [
        Feature("flow_x", NUMERICAL),
        Feature("flow_y", NUMERICAL),
        Feature("band", CATEGORICAL, BANDS),
    ]
    tags = None
    if planted:
        marker = rng.normal(scale=0.3, size=n_rows)
        probe = (labels == 1) & (rng.random(n_rows) < 0.5)
        marker[probe] += 5.0
        # probe flows hug the decision boundary, overlapping benign traffic
        num[probe] = rng.normal(size=(int(probe.sum()), 2)) + separation / 6.0
        num = np.column_stack([num, marker])
        features.insert(2, Feature("probe_depth", NUMERICAL))
        tags = np.where(probe, "probe", np.where(labels == 1, "flood", "benign"))

    schema = FeatureSchema(tuple(features))
    order = rng.permutation(n_rows)
    return Dataset(
        schema,
        num[order],
        codes[order][:, None],
        labels[order],
        None if tags is None else tags[order],
    )


def dataset_to_frame(d: Dataset, label_col: str = "label", tag_col: str = "attack_cat") -> pd.DataFrame:
    cols = {}
    for j, f in enumerate(d.schema.numerical):
        cols[f.name] = d.num[:, j]
    for j, f in enumerate(d.schema.categorical):
        cols[f.name] = np.asarray(f.categories)[d.cat[:, j]]
    cols[label_col] = d.labels
    if d.tags is not None:
        cols[tag_col] = d.tags
    return pd.DataFrame(cols)


def write_csv(d: Dataset, path, label_col: str = "label", tag_col: str = "attack_cat") -> dict:
    """Write the dataset as a CSV and return the matching schema config."""
    dataset_to_frame(d, label_col, tag_col).to_csv(path, index=False)
    cfg = {
        "label": label_col,
        "positive_label": "1",
        "features": [
            {"name": f.name, "kind": f.kind, "categories": list(f.categories)}
            if f.kind == CATEGORICAL
            else {"name": f.name, "kind": f.kind}
            for f in d.schema.features
        ],
    }
    if d.tags is not None:
        cfg["tag_column"] = tag_col
    return cfg
