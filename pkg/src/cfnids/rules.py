"""Global counterfactual rules: train a CART tree separating counterfactuals
(benign) from their attack queries on original-unit, label-encoded features,
mine high-purity benign paths into threshold conjunctions, simplify them, and
score them as attack filters."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import data as data_mod

log = logging.getLogger(__name__)

GAIN_FLOOR = 1e-12


@dataclass
class Node:
    node_id: int
    counts: tuple[int, int]          # (benign, attack) routed here
    feature: int | None = None
    threshold: float | None = None
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @property
    def n(self) -> int:
        return self.counts[0] + self.counts[1]

    @property
    def benign_purity(self) -> float:
        return self.counts[0] / self.n


@dataclass
class DecisionTree:
    root: Node
    feature_names: tuple[str, ...]
    n_nodes: int
    degenerate: bool = False  # single impure leaf (identical rows across classes)


def _gini(counts) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return 1.0 - float(np.sum(p**2))


def _best_split(X, y):
    """Best (feature, threshold, gain) under Gini; ties broken by lowest
    feature index, then lowest threshold."""
    n = len(y)
    parent_counts = np.array([int((y == 0).sum()), int((y == 1).sum())], dtype=np.float64)
    parent = _gini(parent_counts)
    best = (None, None, GAIN_FLOOR)
    for f in range(X.shape[1]):
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        sv, sy = col[order], y[order]
        change = np.flatnonzero(sv[:-1] != sv[1:])
        if len(change) == 0:
            continue
        left_benign = np.cumsum(sy == 0)[change].astype(np.float64)
        n_left = (change + 1).astype(np.float64)
        left_attack = n_left - left_benign
        right_benign = parent_counts[0] - left_benign
        right_attack = parent_counts[1] - left_attack
        gini_l = 1.0 - ((left_benign / n_left) ** 2 + (left_attack / n_left) ** 2)
        n_right = n - n_left
        gini_r = 1.0 - ((right_benign / n_right) ** 2 + (right_attack / n_right) ** 2)
        gains = parent - (n_left / n) * gini_l - (n_right / n) * gini_r
        pos = int(np.argmax(gains))  # first max = lowest threshold
        if gains[pos] > best[2]:
            thr = (sv[change[pos]] + sv[change[pos] + 1]) / 2.0
            best = (f, float(thr), float(gains[pos]))
    return best


def train_tree(X, y, feature_names, seed: int = 0) -> DecisionTree:
    """CART with Gini impurity grown to purity or exhaustion (no depth cap).

    X holds original units with categorical features label-encoded, so the
    split midpoints on those columns land on integer + 0.5 values.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int8)
    if len(X) == 0:
        raise ValueError("cannot train a tree on no rows")
    counter = {"next": 0}

    def build(rows):
        nid = counter["next"]
        counter["next"] += 1
        yv = y[rows]
        counts = (int((yv == 0).sum()), int((yv == 1).sum()))
        node = Node(nid, counts)
        if counts[0] == 0 or counts[1] == 0:
            return node
        f, thr, _ = _best_split(X[rows], yv)
        if f is None:
            return node
        node.feature, node.threshold = f, thr
        mask = X[rows, f] <= thr
        node.left = build(rows[mask])
        node.right = build(rows[~mask])
        return node

    root = build(np.arange(len(X)))
    degenerate = root.is_leaf and 0 < root.counts[0] and 0 < root.counts[1]
    if degenerate:
        log.warning("train_tree: classes are indistinguishable, single impure leaf")
    return DecisionTree(root, tuple(feature_names), counter["next"], degenerate)


def predict_tree(tree: DecisionTree, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(len(X), dtype=np.int8)
    for i, row in enumerate(X):
        node = tree.root
        while not node.is_leaf:
            node = node.left if row[node.feature] <= node.threshold else node.right
        out[i] = 0 if node.counts[0] >= node.counts[1] else 1
    return out


@dataclass(frozen=True)
class Rule:
    """Conjunction of threshold atoms (feature, op, value) in original units."""

    atoms: tuple[tuple[str, str, float], ...]
    provenance: tuple[int, ...] = ()
    support: int = 0
    purity: float = 0.0

    def text(self) -> str:
        return ", ".join(f"{name}{op}{value:g}" for name, op, value in self.atoms)


def extract_rules(tree: DecisionTree, purity_threshold: float = 0.9, strict_leaf_only: bool = False) -> list[Rule]:
    """Paths to benign-majority leaves passing through a node of benign
    purity > threshold become rules; rules whose own (leaf) purity does not
    clear the threshold are discarded to keep every emitted rule auditable."""
    rules = []

    def walk(node, atoms, ids, seen_pure):
        pure_here = node.benign_purity > purity_threshold
        if node.is_leaf:
            benign_majority = node.counts[0] > node.counts[1]
            qualifies = pure_here if strict_leaf_only else (seen_pure or pure_here)
            if benign_majority and qualifies:
                if node.benign_purity > purity_threshold:
                    rules.append(
                        Rule(tuple(atoms), tuple(ids), node.n, node.benign_purity)
                    )
                else:
                    log.info(
                        "extract_rules: dropped path to leaf %d (purity %.3f <= %.2f)",
                        node.node_id, node.benign_purity, purity_threshold,
                    )
            return
        name = tree.feature_names[node.feature]
        walk(node.left, atoms + [(name, "<=", node.threshold)], ids + [node.node_id], seen_pure or pure_here)
        walk(node.right, atoms + [(name, ">", node.threshold)], ids + [node.node_id], seen_pure or pure_here)

    walk(tree.root, [], [], False)
    return rules


def _canonical_bounds(rule: Rule):
    """Tightest (lower, upper) interval per feature, None on contradiction."""
    bounds: dict[str, list] = {}
    for name, op, value in rule.atoms:
        lo, hi = bounds.setdefault(name, [-np.inf, np.inf])
        if op in ("<=", "<"):
            bounds[name][1] = min(hi, value)
        else:  # > or >=
            bounds[name][0] = max(lo, value)
    for lo, hi in bounds.values():
        if lo >= hi:
            return None
    return {k: tuple(v) for k, v in bounds.items()}


def _covers(a: dict, b: dict) -> bool:
    """True if every row satisfying b also satisfies a (a is the looser rule)."""
    for name, (lo, hi) in a.items():
        if name not in b:
            return False
        blo, bhi = b[name]
        if blo < lo or bhi > hi:
            return False
    return True


def simplify_rules(rules) -> list[Rule]:
    """Merge same-feature atoms to their tightest bounds, drop contradictory
    rules, and drop rules covered by a surviving (more general) rule.
    Idempotent and deterministic."""
    canonical = []
    for rule in rules:
        bounds = _canonical_bounds(rule)
        if bounds is None:
            log.info("simplify_rules: dropped contradictory rule %s", rule.text())
            continue
        atoms = []
        for name in sorted(bounds):
            lo, hi = bounds[name]
            if lo > -np.inf:
                atoms.append((name, ">", float(lo)))
            if hi < np.inf:
                atoms.append((name, "<=", float(hi)))
        canonical.append((Rule(tuple(atoms), rule.provenance, rule.support, rule.purity), bounds))

    canonical.sort(key=lambda rb: (len(rb[0].atoms), rb[0].atoms))
    out = []
    for i, (rule, bounds) in enumerate(canonical):
        duplicate = any(kept_b == bounds for _, kept_b in out)
        covered = any(
            _covers(other_b, bounds) and other_b != bounds
            for j, (_, other_b) in enumerate(canonical)
            if j != i
        )
        if not duplicate and not covered:
            out.append((rule, bounds))
    return [rule for rule, _ in out]


def rules_matrix(dataset: data_mod.Dataset):
    """Original-unit matrix with label-encoded categoricals plus column names."""
    cols, names = [], []
    n_idx = c_idx = 0
    for f in dataset.schema.features:
        if f.kind == data_mod.NUMERICAL:
            cols.append(dataset.num[:, n_idx])
            n_idx += 1
        else:
            cols.append(dataset.cat[:, c_idx].astype(np.float64))
            c_idx += 1
        names.append(f.name)
    return np.column_stack(cols), names


def match_rules(rules, X, names) -> np.ndarray:
    """Row mask: True when any rule's conjunction holds."""
    X = np.asarray(X, dtype=np.float64)
    name_idx = {n: i for i, n in enumerate(names)}
    matched = np.zeros(len(X), dtype=bool)
    for rule in rules:
        mask = np.ones(len(X), dtype=bool)
        for fname, op, value in rule.atoms:
            if fname not in name_idx:
                raise data_mod.DataError(f"rule references unknown feature {fname!r}")
            col = X[:, name_idx[fname]]
            if op == "<=":
                mask &= col <= value
            elif op == "<":
                mask &= col < value
            elif op == ">":
                mask &= col > value
            else:
                mask &= col >= value
        matched |= mask
    return matched


def apply_rules(rules, X, names, labels) -> tuple[np.ndarray, dict]:
    """A row matching any rule is classified benign; returns the match mask
    and the filter metrics."""
    matched = match_rules(rules, X, names)
    labels = np.asarray(labels)
    attacks = labels == 1
    benign = labels == 0
    metrics = {
        "attack_filter_rate": float((~matched[attacks]).mean()) if attacks.any() else float("nan"),
        "benign_pass_rate": float(matched[benign].mean()) if benign.any() else float("nan"),
    }
    return matched, metrics


def write_rules_text(rules, path) -> None:
    with open(path, "w") as fh:
        for rule in rules:
            fh.write(rule.text() + "\n")


def write_rules_json(rules, metrics, path) -> None:
    payload = {
        "rules": [
            {
                "atoms": [list(a) for a in rule.atoms],
                "provenance": list(rule.provenance),
                "support": rule.support,
                "purity": rule.purity,
            }
            for rule in rules
        ],
        "metrics": metrics,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# zero-day workflow
# ---------------------------------------------------------------------------

@dataclass
class ZeroDayResult:
    rules: list[Rule]
    heldout_accuracy: float
    filter_metrics: dict
    extraction_metrics: dict
    tree: DecisionTree
    contrast_rules: list[Rule] | None = None
    cf_rows: data_mod.Dataset | None = None      # extraction set, benign side
    attack_rows: data_mod.Dataset | None = None  # extraction set, query side


def zero_day_workflow(
    dataset: data_mod.Dataset,
    attack_tag: str,
    pipeline,
    seed: int,
    *,
    test_fraction: float = 0.2,
    purity_threshold: float = 0.9,
    accuracy_floor: float = 0.5,
    contrast: bool = False,
) -> ZeroDayResult:
    """Hold the tagged attack out of training, retrain the pipeline, check
    the classifier still catches the unseen attack, generate counterfactuals
    for its test rows, and distill them into rules.

    `pipeline` needs fit(train, seed), predict_proba(num, cat) and
    explain(num, cat, seed, query_ids) -> CounterfactualBatch list.
    """
    if dataset.tags is None or attack_tag not in set(dataset.tags):
        raise data_mod.DataError(f"attack tag {attack_tag!r} not present in the dataset")
    train, test, _ = data_mod.split_and_pool(dataset, test_fraction, 0, seed)
    hold_train = (train.labels == 1) & (train.tags == attack_tag)
    pipeline.fit(train.take(~hold_train), seed)

    held = test.take((test.labels == 1) & (test.tags == attack_tag))
    if len(held) == 0:
        raise data_mod.DataError(f"no test rows tagged {attack_tag!r}")
    heldout_acc = float((pipeline.predict_proba(held.num, held.cat) >= 0.5).mean())
    if heldout_acc < accuracy_floor:
        log.warning(
            "zero_day_workflow: held-out %s accuracy %.3f below floor %.2f; "
            "rules may not be trustworthy", attack_tag, heldout_acc, accuracy_floor,
        )

    batches = pipeline.explain(held.num, held.cat, seed, np.arange(len(held)))
    cf_num, cf_cat = [], []
    for b in batches:
        take = b.validity if b.validity.any() else np.ones(b.k, dtype=bool)
        cf_num.append(b.cand_num[take])
        cf_cat.append(b.cand_cat[take])
    cf_rows = data_mod.Dataset(
        dataset.schema,
        np.concatenate(cf_num),
        np.concatenate(cf_cat),
        np.zeros(sum(len(x) for x in cf_num), dtype=np.int8),
    )

    rules, tree, extraction = _rules_from_benign_rows(cf_rows, held, purity_threshold, seed)

    test_X, names = rules_matrix(test)
    eval_rows = (test.labels == 0) | ((test.labels == 1) & (test.tags == attack_tag))
    _, filter_metrics = apply_rules(rules, test_X[eval_rows], names, test.labels[eval_rows])

    contrast_rules = None
    if contrast:
        rng = np.random.default_rng(seed)
        benign_train = train.take(train.labels == 0)
        pick = rng.choice(len(benign_train), size=min(len(cf_rows), len(benign_train)), replace=False)
        contrast_rules, _, _ = _rules_from_benign_rows(
            benign_train.take(pick), held, purity_threshold, seed
        )
    return ZeroDayResult(rules, heldout_acc, filter_metrics, extraction, tree,
                         contrast_rules, cf_rows, held)


def _rules_from_benign_rows(benign_rows, attack_rows, purity_threshold, seed):
    Xb, names = rules_matrix(benign_rows)
    Xa, _ = rules_matrix(attack_rows)
    X = np.concatenate([Xb, Xa])
    y = np.concatenate([np.zeros(len(Xb), np.int8), np.ones(len(Xa), np.int8)])
    tree = train_tree(X, y, names, seed)
    rules = simplify_rules(extract_rules(tree, purity_threshold))
    _, extraction_metrics = apply_rules(rules, X, names, y)
    return rules, tree, extraction_metrics
