"""Tabular ingestion and preprocessing: typed schemas, CSV loading,
correlation filtering, quantile transform + one-hot encoding with an
exact-enough inverse, and seeded train/test/pool splits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from . import container

log = logging.getLogger(__name__)

NUMERICAL = "numerical"
CATEGORICAL = "categorical"


class DataError(ValueError):
    pass


class UnknownCategory(DataError):
    pass


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    categories: tuple[str, ...] = ()


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("duplicate feature names in schema")
        for f in self.features:
            if f.kind not in (NUMERICAL, CATEGORICAL):
                raise DataError(f"{f.name}: unknown kind {f.kind!r}")
            if f.kind == CATEGORICAL and len(f.categories) < 2:
                raise DataError(f"{f.name}: categorical features need >= 2 categories")

    @property
    def numerical(self) -> tuple[Feature, ...]:
        return tuple(f for f in self.features if f.kind == NUMERICAL)

    @property
    def categorical(self) -> tuple[Feature, ...]:
        return tuple(f for f in self.features if f.kind == CATEGORICAL)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def meta(self) -> dict:
        return {
            "features": [
                {"name": f.name, "kind": f.kind, "categories": list(f.categories)}
                for f in self.features
            ]
        }

    @staticmethod
    def from_meta(meta: dict) -> "FeatureSchema":
        return FeatureSchema(
            tuple(
                Feature(f["name"], f["kind"], tuple(f["categories"]))
                for f in meta["features"]
            )
        )


@dataclass
class Dataset:
    """Rows split into a numerical matrix (original units) and categorical
    code matrix (indices into each feature's vocabulary)."""

    schema: FeatureSchema
    num: np.ndarray        # (n, n_num) float64
    cat: np.ndarray        # (n, n_cat) int32
    labels: np.ndarray     # (n,) int8, 0 = benign, 1 = attack
    tags: np.ndarray | None = None  # optional attack-category strings

    def __post_init__(self):
        n = len(self.labels)
        if self.num.shape != (n, len(self.schema.numerical)):
            raise DataError("numerical block width does not match schema")
        if self.cat.shape != (n, len(self.schema.categorical)):
            raise DataError("categorical block width does not match schema")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be binary 0/1")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        return Dataset(
            self.schema,
            self.num[idx],
            self.cat[idx],
            self.labels[idx],
            None if self.tags is None else self.tags[idx],
        )


def schema_from_config(cfg: dict, frame: pd.DataFrame | None = None) -> tuple:
    """Parse a schema config dict: feature list, label column, positive label.

    Categorical vocabularies not given in the config are frozen from the data.
    """
    feats = []
    for item in cfg["features"]:
        name, kind = item["name"], item["kind"]
        cats = tuple(str(c) for c in item.get("categories", ()))
        if kind == CATEGORICAL and not cats:
            if frame is None:
                raise DataError(f"{name}: no categories given and no data to infer from")
            cats = tuple(sorted(frame[name].dropna().astype(str).unique()))
        feats.append(Feature(name, kind, cats))
    return FeatureSchema(tuple(feats)), cfg["label"], str(cfg["positive_label"]), cfg.get("tag_column")


def load_csv(path, schema_config: dict) -> Dataset:
    """Load a headered CSV into a typed Dataset.

    Rows with unparseable numeric cells or unknown categories are dropped;
    the count is logged and kept on the returned dataset as ingest_dropped.
    The label column must be binary-codable.
    """
    frame = pd.read_csv(path, low_memory=False)
    if frame.empty:
        raise DataError(f"{path}: empty file")
    declared = [f["name"] for f in schema_config["features"]] + [schema_config["label"]]
    missing = [c for c in declared if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    schema, label_col, positive, tag_col = schema_from_config(schema_config, frame)

    labels_raw = frame[label_col].astype(str).str.strip()
    values = set(labels_raw.unique())
    if len(values) > 2:
        raise DataError(f"label column {label_col!r} has {len(values)} distinct values")
    if positive not in values and len(values) == 2:
        raise DataError(f"positive label {positive!r} not present in {label_col!r}")
    labels = (labels_raw == positive).to_numpy().astype(np.int8)

    keep = np.ones(len(frame), dtype=bool)
    num_cols = []
    for f in schema.numerical:
        col = pd.to_numeric(frame[f.name], errors="coerce")
        keep &= col.notna().to_numpy()
        num_cols.append(col.to_numpy(dtype=np.float64))
    cat_cols = []
    for f in schema.categorical:
        vocab = {c: i for i, c in enumerate(f.categories)}
        codes = frame[f.name].astype(str).map(vocab)
        keep &= codes.notna().to_numpy()
        cat_cols.append(codes.to_numpy(dtype=np.float64))

    dropped = int((~keep).sum())
    if dropped:
        log.warning("%s: dropped %d rows with unparseable cells", path, dropped)
    num = np.column_stack(num_cols)[keep] if num_cols else np.zeros((keep.sum(), 0))
    cat = (
        np.column_stack(cat_cols)[keep].astype(np.int32)
        if cat_cols
        else np.zeros((int(keep.sum()), 0), dtype=np.int32)
    )
    tags = None
    if tag_col is not None and tag_col in frame.columns:
        tags = frame[tag_col].astype(str).to_numpy()[keep]
    out = Dataset(schema, num, cat, labels[keep], tags)
    out.ingest_dropped = dropped
    return out


def correlation_filter(d: Dataset, threshold: float = 0.95) -> tuple[Dataset, list[str]]:
    """Drop the later feature of every numerical pair with |Pearson r| >
    threshold. Deterministic and row-order independent; zero-variance
    features correlate with nothing and are kept (flagged)."""
    names = [f.name for f in d.schema.numerical]
    if len(names) < 2:
        return d, []
    stds = d.num.std(axis=0)
    flat = np.flatnonzero(stds == 0)
    for j in flat:
        log.warning("correlation_filter: %s has zero variance, kept", names[j])
    with np.errstate(invalid="ignore"):
        corr = np.corrcoef(d.num, rowvar=False)
    corr = np.nan_to_num(corr, nan=0.0)
    dropped_idx = []
    for j in range(1, len(names)):
        for i in range(j):
            if i not in dropped_idx and abs(corr[i, j]) > threshold:
                dropped_idx.append(j)
                break
    kept = [j for j in range(len(names)) if j not in dropped_idx]
    new_feats = tuple(
        f for f in d.schema.features
        if f.kind == CATEGORICAL or f.name in {names[j] for j in kept}
    )
    out = Dataset(FeatureSchema(new_feats), d.num[:, kept], d.cat, d.labels, d.tags)
    return out, [names[j] for j in dropped_idx]


@dataclass
class FittedPreprocessor:
    """Per-feature monotone quantile map to standard-normal deviates plus
    frozen one-hot vocabularies; invertible back to original units."""

    schema: FeatureSchema
    quantiles: np.ndarray   # (m,) shared probability grid
    references: list[np.ndarray]  # per numerical feature, (m,) value quantiles
    dropped: tuple[str, ...] = ()
    seed: int = 0

    P_EPS = 1e-7

    @property
    def n_num(self) -> int:
        return len(self.schema.numerical)

    @property
    def cat_sizes(self) -> tuple[int, ...]:
        return tuple(len(f.categories) for f in self.schema.categorical)

    @property
    def encoded_width(self) -> int:
        return self.n_num + sum(self.cat_sizes)

    def constant_features(self) -> list[str]:
        return [
            f.name
            for f, ref in zip(self.schema.numerical, self.references)
            if ref[0] == ref[-1]
        ]

    def transform_num(self, num: np.ndarray) -> np.ndarray:
        cols = []
        for j, ref in enumerate(self.references):
            x = np.asarray(num[:, j], dtype=np.float64)
            if ref[0] == ref[-1]:
                cols.append(np.zeros_like(x))
                continue
            p = 0.5 * (
                np.interp(x, ref, self.quantiles)
                - np.interp(-x, -ref[::-1], -self.quantiles[::-1])
            )
            p = np.clip(p, self.P_EPS, 1.0 - self.P_EPS)
            cols.append(stats.norm.ppf(p))
        return np.column_stack(cols) if cols else np.zeros((len(num), 0))

    def inverse_num(self, z: np.ndarray) -> np.ndarray:
        cols = []
        for j, ref in enumerate(self.references):
            if ref[0] == ref[-1]:
                cols.append(np.full(len(z), ref[0]))
                continue
            p = stats.norm.cdf(np.asarray(z[:, j], dtype=np.float64))
            # at or beyond the encodable range [eps, 1-eps] snaps to the
            # endpoints (1% guard band absorbs float32 rounding of boundary
            # z values), keeping decode(encode(.)) a fixed point
            snap = self.P_EPS * 1.01
            p = np.where(p <= snap, 0.0, np.where(p >= 1.0 - snap, 1.0, p))
            cols.append(np.interp(p, self.quantiles, ref))
        return np.column_stack(cols) if cols else np.zeros((len(z), 0))

    def encode(self, num: np.ndarray, cat: np.ndarray) -> np.ndarray:
        """Rows -> [quantile-transformed numerics | one-hot groups], float32."""
        n = len(num) if self.n_num else len(cat)
        blocks = [self.transform_num(num)] if self.n_num else []
        for j, size in enumerate(self.cat_sizes):
            codes = np.asarray(cat[:, j], dtype=np.int64)
            bad = (codes < 0) | (codes >= size)
            if bad.any():
                feat = self.schema.categorical[j]
                raise UnknownCategory(
                    f"{feat.name}: code {codes[bad][0]} outside vocabulary of {size}"
                )
            onehot = np.zeros((n, size))
            onehot[np.arange(n), codes] = 1.0
            blocks.append(onehot)
        return np.concatenate(blocks, axis=1).astype(np.float32)

    def encode_labels(self, raw: np.ndarray, feature_idx: int) -> np.ndarray:
        vocab = {c: i for i, c in enumerate(self.schema.categorical[feature_idx].categories)}
        out = np.array([vocab.get(str(v), -1) for v in raw], dtype=np.int32)
        if (out < 0).any():
            bad = raw[out < 0][0]
            name = self.schema.categorical[feature_idx].name
            raise UnknownCategory(f"{name}: unseen category {bad!r}")
        return out

    def decode(self, encoded: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Encoded matrix -> (numerical original units, categorical codes)."""
        encoded = np.asarray(encoded, dtype=np.float64)
        if encoded.shape[1] != self.encoded_width:
            raise DataError(
                f"encoded width {encoded.shape[1]} != expected {self.encoded_width}"
            )
        num = self.inverse_num(encoded[:, : self.n_num])
        codes = np.zeros((len(encoded), len(self.cat_sizes)), dtype=np.int32)
        start = self.n_num
        for j, size in enumerate(self.cat_sizes):
            codes[:, j] = np.argmax(encoded[:, start : start + size], axis=1)
            start += size
        return num, codes

    def encode_dataset(self, d: Dataset) -> np.ndarray:
        return self.encode(d.num, d.cat)

    def split_blocks(self, encoded: np.ndarray):
        """(numerical block, [one categorical block per feature])."""
        blocks, start = [], self.n_num
        for size in self.cat_sizes:
            blocks.append(encoded[:, start : start + size])
            start += size
        return encoded[:, : self.n_num], blocks

    def save(self, path) -> None:
        meta = {
            "schema": self.schema.meta(),
            "schema_hash": container.schema_hash(self.schema.meta()),
            "dropped": list(self.dropped),
            "seed": self.seed,
        }
        arrays = [("quantiles", self.quantiles)]
        arrays += [(f"ref{j}", ref) for j, ref in enumerate(self.references)]
        container.save(path, "preprocessor", meta, arrays)

    @staticmethod
    def load(path) -> "FittedPreprocessor":
        kind, meta, arrays = container.load(path)
        if kind != "preprocessor":
            raise container.ContainerError(f"{path}: expected preprocessor, got {kind}")
        schema = FeatureSchema.from_meta(meta["schema"])
        refs = [
            arrays[f"ref{j}"].astype(np.float64) for j in range(len(schema.numerical))
        ]
        return FittedPreprocessor(
            schema,
            arrays["quantiles"].astype(np.float64),
            refs,
            tuple(meta["dropped"]),
            meta["seed"],
        )


def fit_preprocessor(d: Dataset, n_quantiles: int = 1000, dropped=(), seed: int = 0) -> FittedPreprocessor:
    """Freeze empirical-quantile maps (targets standard normal) and
    categorical vocabularies from a training dataset."""
    if len(d) == 0:
        raise DataError("cannot fit a preprocessor on an empty dataset")
    m = min(n_quantiles, len(d))
    qs = np.linspace(0.0, 1.0, m)
    refs = []
    for j, f in enumerate(d.schema.numerical):
        ref = np.quantile(d.num[:, j], qs)
        if ref[0] == ref[-1]:
            log.warning("fit_preprocessor: %s is constant, mapping to 0", f.name)
        refs.append(ref)
    return FittedPreprocessor(d.schema, qs, refs, tuple(dropped), seed)


def split_and_pool(d: Dataset, test_fraction: float, pool_size: int, seed: int, pool_seed=None):
    """Stratified train/test split plus a without-replacement pool of attack
    rows drawn from the test split. Deterministic under seed; pool_seed lets
    seeded runs re-draw their pool over a fixed split."""
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(d), dtype=bool)
    for label in (0, 1):
        idx = np.flatnonzero(d.labels == label)
        n_test = int(round(len(idx) * test_fraction))
        test_mask[rng.choice(idx, size=n_test, replace=False)] = True
    train = d.take(~test_mask)
    test = d.take(test_mask)
    attack_idx = np.flatnonzero(test.labels == 1)
    if len(attack_idx) < pool_size:
        raise DataError(
            f"test split has {len(attack_idx)} attack rows, pool needs {pool_size}"
        )
    pool_rng = rng if pool_seed is None else np.random.default_rng(pool_seed)
    pool = test.take(np.sort(pool_rng.choice(attack_idx, size=pool_size, replace=False)))
    return train, test, pool
