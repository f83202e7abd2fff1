import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfnids import rules
from cfnids.synthetic import two_blob_dataset


def _split_1d(boundary=5.0, n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 10, n)
    y = (x >= boundary).astype(np.int8)  # benign (0) iff x < boundary
    return x[:, None], y


# ---------------------------------------------------------------------------
# tree training
# ---------------------------------------------------------------------------

def test_tree_single_split_on_separable_1d():
    X, y = _split_1d()
    tree = rules.train_tree(X, y, ["x"])
    assert not tree.root.is_leaf
    assert tree.root.feature == 0
    assert abs(tree.root.threshold - 5.0) < 0.2
    assert tree.root.left.is_leaf and tree.root.left.benign_purity == 1.0
    assert tree.root.right.is_leaf and tree.root.right.benign_purity == 0.0


def test_tree_pure_input_is_single_leaf():
    X = np.random.default_rng(0).standard_normal((50, 2))
    tree = rules.train_tree(X, np.zeros(50, np.int8), ["a", "b"])
    assert tree.root.is_leaf
    assert tree.root.benign_purity == 1.0
    assert not tree.degenerate


def test_tree_duplicated_dataset_identical():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((80, 3))
    y = (X[:, 1] > 0.2).astype(np.int8)
    t1 = rules.train_tree(X, y, list("abc"))
    t2 = rules.train_tree(np.vstack([X, X]), np.concatenate([y, y]), list("abc"))

    def signature(node):
        if node.is_leaf:
            return ("leaf",)
        return (node.feature, node.threshold, signature(node.left), signature(node.right))

    assert signature(t1.root) == signature(t2.root)


def test_tree_identical_rows_across_classes_flagged():
    X = np.ones((10, 2))
    y = np.array([0, 1] * 5, dtype=np.int8)
    tree = rules.train_tree(X, y, ["a", "b"])
    assert tree.degenerate
    assert tree.root.is_leaf


def test_tree_prediction_equals_leaf_majority_recount():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((300, 4))
    y = ((X[:, 0] + X[:, 2] > 0)).astype(np.int8)
    tree = rules.train_tree(X, y, list("abcd"))
    pred = rules.predict_tree(tree, X)
    # oracle: route every row manually and take the leaf majority
    def route(row):
        node = tree.root
        while not node.is_leaf:
            node = node.left if row[node.feature] <= node.threshold else node.right
        return 0 if node.counts[0] >= node.counts[1] else 1

    manual = np.array([route(r) for r in X], dtype=np.int8)
    assert np.array_equal(pred, manual)
    assert (pred == y).mean() == 1.0  # grown to purity on separable data


def test_tree_categorical_thresholds_are_integer_midpoints():
    rng = np.random.default_rng(3)
    codes = rng.integers(0, 4, 500).astype(np.float64)
    y = (codes >= 2).astype(np.int8)
    tree = rules.train_tree(codes[:, None], y, ["proto"])
    assert tree.root.threshold == pytest.approx(1.5)


# ---------------------------------------------------------------------------
# rule extraction
# ---------------------------------------------------------------------------

def test_extract_single_rule_from_1d_tree():
    X, y = _split_1d()
    tree = rules.train_tree(X, y, ["x"])
    out = rules.extract_rules(tree, 0.9)
    assert len(out) == 1
    (name, op, thr), = out[0].atoms
    assert (name, op) == ("x", "<=")
    assert abs(thr - 5.0) < 0.2
    assert out[0].purity == 1.0


def test_extract_nothing_above_impossible_threshold():
    X = np.ones((10, 1))
    y = np.array([0, 1] * 5, dtype=np.int8)
    tree = rules.train_tree(X, y, ["x"])  # single impure leaf
    assert rules.extract_rules(tree, 1.0) == []


def test_extract_rule_count_bounded_by_benign_leaves():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((400, 3))
    y = (X[:, 0] * X[:, 1] > 0).astype(np.int8)
    tree = rules.train_tree(X, y, list("abc"))

    def count_benign_leaves(node):
        if node.is_leaf:
            return int(node.counts[0] > node.counts[1])
        return count_benign_leaves(node.left) + count_benign_leaves(node.right)

    assert len(rules.extract_rules(tree, 0.9)) <= count_benign_leaves(tree.root)


def test_extracted_rule_purity_recomputes_above_threshold():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((500, 3))
    y = ((X[:, 0] > 0) | (X[:, 2] > 1)).astype(np.int8)
    tree = rules.train_tree(X, y, list("abc"))
    extracted = rules.extract_rules(tree, 0.9)
    assert extracted
    for rule in extracted:
        mask = rules.match_rules([rule], X, list("abc"))
        purity = (y[mask] == 0).mean()
        assert purity > 0.9


# ---------------------------------------------------------------------------
# simplification
# ---------------------------------------------------------------------------

def test_simplify_merges_same_feature_bounds():
    rule = rules.Rule((("x", "<=", 5.0), ("x", "<=", 3.0)))
    out = rules.simplify_rules([rule])
    assert out[0].atoms == (("x", "<=", 3.0),)


def test_simplify_drops_subsumed_rule():
    general = rules.Rule((("x", "<=", 5.0),))
    specific = rules.Rule((("x", "<=", 5.0), ("y", ">", 1.0)))
    out = rules.simplify_rules([general, specific])
    assert len(out) == 1
    assert out[0].atoms == (("x", "<=", 5.0),)


def test_simplify_drops_contradiction():
    rule = rules.Rule((("x", "<=", 1.0), ("x", ">", 4.0)))
    assert rules.simplify_rules([rule]) == []


def test_simplify_deduplicates():
    a = rules.Rule((("x", "<=", 5.0), ("x", "<=", 7.0)))
    b = rules.Rule((("x", "<=", 5.0),))
    assert len(rules.simplify_rules([a, b])) == 1


@st.composite
def rule_sets(draw):
    n_rules = draw(st.integers(1, 5))
    out = []
    for _ in range(n_rules):
        n_atoms = draw(st.integers(1, 4))
        atoms = tuple(
            (
                draw(st.sampled_from(["a", "b", "c"])),
                draw(st.sampled_from(["<=", ">"])),
                float(draw(st.integers(-3, 3))),
            )
            for _ in range(n_atoms)
        )
        out.append(rules.Rule(atoms))
    return out


@settings(max_examples=60, deadline=None)
@given(rule_sets(), st.integers(0, 10**6))
def test_simplify_idempotent_and_semantics_preserving(ruleset, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-4, 4, size=(200, 3))
    names = ["a", "b", "c"]
    once = rules.simplify_rules(ruleset)
    twice = rules.simplify_rules(once)
    assert [r.atoms for r in once] == [r.atoms for r in twice]
    before = rules.match_rules(ruleset, X, names)
    after = rules.match_rules(once, X, names)
    assert np.array_equal(before, after)


# ---------------------------------------------------------------------------
# rule application
# ---------------------------------------------------------------------------

def test_apply_empty_rules_filters_everything():
    X = np.random.default_rng(0).standard_normal((20, 2))
    labels = np.array([0, 1] * 10)
    matched, m = rules.apply_rules([], X, ["a", "b"], labels)
    assert not matched.any()
    assert m["attack_filter_rate"] == 1.0
    assert m["benign_pass_rate"] == 0.0


def test_apply_tautology_passes_everything():
    X = np.random.default_rng(0).uniform(0, 1, (20, 2))
    labels = np.array([0, 1] * 10)
    taut = rules.Rule((("a", "<=", 100.0),))
    matched, m = rules.apply_rules([taut], X, ["a", "b"], labels)
    assert matched.all()
    assert m["attack_filter_rate"] == 0.0
    assert m["benign_pass_rate"] == 1.0


def test_apply_separable_1d_filters_well():
    X, y = _split_1d(n=600, seed=7)
    tree = rules.train_tree(X, y, ["x"])
    simplified = rules.simplify_rules(rules.extract_rules(tree, 0.9))
    _, m = rules.apply_rules(simplified, X, ["x"], y)
    assert m["attack_filter_rate"] >= 0.9
    assert m["benign_pass_rate"] >= 0.9


def test_apply_unknown_feature_is_configuration_error():
    rule = rules.Rule((("ghost", "<=", 1.0),))
    with pytest.raises(Exception, match="ghost"):
        rules.apply_rules([rule], np.zeros((3, 1)), ["x"], np.zeros(3))


def test_rule_text_format():
    rule = rules.Rule((("state", "<=", 2.0), ("proto", ">", 46.0)))
    assert rule.text() == "state<=2, proto>46"


def test_rules_file_writers(tmp_path):
    ruleset = [rules.Rule((("state", "<=", 2.0),), (0, 1), 10, 0.95)]
    rules.write_rules_text(ruleset, tmp_path / "rules.txt")
    assert (tmp_path / "rules.txt").read_text() == "state<=2\n"
    rules.write_rules_json(ruleset, {"attack_filter_rate": 1.0}, tmp_path / "rules.json")
    import json

    payload = json.loads((tmp_path / "rules.json").read_text())
    assert payload["rules"][0]["purity"] == 0.95
    assert payload["metrics"]["attack_filter_rate"] == 1.0


# ---------------------------------------------------------------------------
# zero-day workflow
# ---------------------------------------------------------------------------

class PlantedPipeline:
    """Cheap stand-in generator: counterfactuals zero the planted marker and
    resemble benign rows (unit spread, so flow coordinates overlap the
    boundary-hugging probe cluster)."""

    def __init__(self):
        self.trained_on = None

    def fit(self, train, seed):
        self.trained_on = train
        self.benign_mean = train.num[train.labels == 0].mean(axis=0)

    def predict_proba(self, num, cat):
        return (num[:, :2].mean(axis=1) > 0).astype(np.float64) * 0.9 + 0.05

    def explain(self, num, cat, seed, query_ids):
        from cfnids.diffusion import CounterfactualBatch

        rng = np.random.default_rng(seed)
        out = []
        for i, qid in enumerate(query_ids):
            k = 3
            cand = np.tile(self.benign_mean, (k, 1)) + rng.normal(0, 1.0, (k, len(self.benign_mean)))
            cand_cat = np.zeros((k, cat.shape[1]), dtype=np.int32)
            probs = self.predict_proba(cand, cand_cat)
            out.append(CounterfactualBatch(int(qid), num[i].copy(), cat[i].copy(),
                                           cand, cand_cat, probs < 0.5, probs, 0.0))
        return out


@pytest.fixture(scope="module")
def planted_result():
    ds = two_blob_dataset(3000, seed=5, planted=True)
    return rules.zero_day_workflow(ds, "probe", PlantedPipeline(), seed=0, contrast=True)


def test_zero_day_rules_mention_planted_feature(planted_result):
    mentioned = {name for rule in planted_result.rules for name, _, _ in rule.atoms}
    assert "probe_depth" in mentioned


def test_zero_day_filter_metrics(planted_result):
    assert planted_result.filter_metrics["attack_filter_rate"] >= 0.9
    assert planted_result.extraction_metrics["attack_filter_rate"] >= 0.9
    assert planted_result.extraction_metrics["benign_pass_rate"] >= 0.9


def test_zero_day_contrast_rules_present(planted_result):
    assert planted_result.contrast_rules is not None
    assert len(planted_result.contrast_rules) >= 1


def test_zero_day_deterministic():
    ds = two_blob_dataset(1500, seed=6, planted=True)
    a = rules.zero_day_workflow(ds, "probe", PlantedPipeline(), seed=3)
    b = rules.zero_day_workflow(ds, "probe", PlantedPipeline(), seed=3)
    assert [r.atoms for r in a.rules] == [r.atoms for r in b.rules]
    assert a.heldout_accuracy == b.heldout_accuracy


def test_zero_day_unknown_tag():
    ds = two_blob_dataset(500, seed=7, planted=True)
    with pytest.raises(Exception, match="not present"):
        rules.zero_day_workflow(ds, "unicorn", PlantedPipeline(), seed=0)


def test_zero_day_missing_tags():
    ds = two_blob_dataset(500, seed=8, planted=False)
    with pytest.raises(Exception, match="not present"):
        rules.zero_day_workflow(ds, "probe", PlantedPipeline(), seed=0)
