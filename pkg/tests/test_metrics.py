import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfnids import diffusion, metrics, wachter


# ---------------------------------------------------------------------------
# sparsity
# ---------------------------------------------------------------------------

def test_sparsity_identical_rows():
    q = np.array([1.0, 2.0])
    assert metrics.sparsity(q, np.array([0]), q.copy(), np.array([0])) == 0


def test_sparsity_single_numeric_change():
    assert metrics.sparsity(np.array([1.0, 2.0]), np.array([1]),
                            np.array([1.0, 3.0]), np.array([1])) == 1


def test_sparsity_counts_categorical_inequality():
    assert metrics.sparsity(np.array([1.0]), np.array([0, 2]),
                            np.array([1.0]), np.array([1, 2])) == 1


def test_sparsity_tolerates_decode_jitter():
    q = np.array([100.0])
    assert metrics.sparsity(q, np.zeros(0, np.int32), q * (1 + 5e-4), np.zeros(0, np.int32)) == 0


def test_sparsity_schema_mismatch():
    with pytest.raises(ValueError, match="schema"):
        metrics.sparsity(np.array([1.0]), np.array([0]), np.array([1.0, 2.0]), np.array([0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10**9))
def test_sparsity_matches_bruteforce_recount_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    n_num, n_cat = rng.integers(1, 5), rng.integers(1, 4)
    qn, cn = rng.standard_normal(n_num), rng.standard_normal(n_num)
    qc = rng.integers(0, 3, n_cat)
    cc = rng.integers(0, 3, n_cat)
    got = metrics.sparsity(qn, qc, cn, cc, tol=1e-3)
    # brute-force per-feature recount
    expected = sum(
        1 for a, b in zip(qn, cn) if abs(a - b) > 1e-3 * max(abs(a), abs(b))
    ) + sum(1 for a, b in zip(qc, cc) if a != b)
    assert got == expected
    assert got == metrics.sparsity(cn, cc, qn, qc, tol=1e-3)


# ---------------------------------------------------------------------------
# validity
# ---------------------------------------------------------------------------

class StubBlackbox:
    """Benign iff the first encoded coordinate is negative."""

    def predict_proba(self, X):
        return (np.asarray(X)[:, 0] >= 0).astype(np.float64)


class StubPreprocessor:
    n_num = 2
    cat_sizes = ()

    def encode(self, num, cat):
        return np.asarray(num, dtype=np.float32)


def _batch(cand_first_coords, query_id=0):
    cand = np.column_stack([cand_first_coords, np.zeros(len(cand_first_coords))])
    probs = StubBlackbox().predict_proba(cand)
    return diffusion.CounterfactualBatch(
        query_id=query_id,
        query_num=np.array([1.0, 0.0]),
        query_cat=np.zeros(0, np.int32),
        cand_num=cand,
        cand_cat=np.zeros((len(cand), 0), np.int32),
        validity=probs < 0.5,
        prob=probs,
        seconds=0.01,
    )


def test_k_validity_counts_flips():
    batch = _batch(np.array([-1.0] * 7 + [1.0] * 3))
    assert metrics.k_validity(batch, StubBlackbox(), StubPreprocessor()) == 7


def test_k_validity_zero_when_candidates_stay_attack():
    batch = _batch(np.ones(10))
    assert metrics.k_validity(batch, StubBlackbox(), StubPreprocessor()) == 0


def test_k_validity_recount_matches_flags(blob_world, denoiser, guidance, blackbox):
    pp, pool = blob_world["pp"], blob_world["pool"]
    batches = diffusion.generate_pool(
        pool.num[:5], pool.cat[:5], 0, denoiser, guidance,
        diffusion.GuidanceConfig(k=6), pp, blackbox, seed=3,
    )
    for b in batches:
        assert metrics.k_validity(b, blackbox, pp) == b.n_valid


def test_one_validity_fractions():
    all_valid = [_batch(np.array([-1.0, -1.0])), _batch(np.array([-2.0, 1.0]))]
    assert metrics.one_validity(all_valid, StubBlackbox(), StubPreprocessor()) == 1.0
    none_valid = [_batch(np.array([1.0, 2.0]))]
    assert metrics.one_validity(none_valid, StubBlackbox(), StubPreprocessor()) == 0.0
    mixed = [_batch(np.array([-1.0])), _batch(np.array([1.0])),
             _batch(np.array([-1.0])), _batch(np.array([-0.5]))]
    assert metrics.one_validity(mixed, StubBlackbox(), StubPreprocessor()) == 0.75


def test_one_validity_requires_batches():
    with pytest.raises(ValueError):
        metrics.one_validity([], StubBlackbox(), StubPreprocessor())


# ---------------------------------------------------------------------------
# local outlier factor
# ---------------------------------------------------------------------------

def brute_force_log_lof(reference, points, k):
    """Definitional O(n^2) LOF with tie-inclusive neighborhoods."""
    ref = [np.asarray(r, dtype=np.float64) for r in reference]
    n = len(ref)

    def dist(a, b):
        return float(np.sqrt(np.sum((a - b) ** 2)))

    d_ref = [[dist(ref[i], ref[j]) if i != j else math.inf for j in range(n)] for i in range(n)]
    k_dist = [sorted(row)[k - 1] for row in d_ref]
    neighbors = [[j for j in range(n) if d_ref[i][j] <= k_dist[i]] for i in range(n)]
    lrd = []
    for i in range(n):
        reach = [max(k_dist[j], d_ref[i][j]) for j in neighbors[i]]
        lrd.append(len(neighbors[i]) / sum(reach))
    out = []
    for p in np.atleast_2d(np.asarray(points, dtype=np.float64)):
        dq = [dist(p, r) for r in ref]
        kq = sorted(dq)[k - 1]
        nq = [j for j in range(n) if dq[j] <= kq]
        reach = [max(k_dist[j], dq[j]) for j in nq]
        lrd_q = len(nq) / sum(reach)
        out.append(math.log(sum(lrd[j] for j in nq) / len(nq) / lrd_q))
    return np.array(out)


def test_log_lof_grid_interior_near_zero():
    gx, gy = np.meshgrid(np.arange(20.0), np.arange(20.0))
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    index = metrics.build_lof_index(grid, k=20)
    interior = np.array([[9.5, 9.5], [10.0, 10.0], [7.25, 12.75]])
    scores = metrics.log_lof(index, interior)
    assert np.max(np.abs(scores)) < 0.1


def test_log_lof_monotone_along_outward_ray():
    rng = np.random.default_rng(0)
    ref = rng.standard_normal((300, 2))
    index = metrics.build_lof_index(ref, k=20)
    ray = np.column_stack([np.linspace(2.0, 30.0, 8), np.zeros(8)])
    scores = metrics.log_lof(index, ray)
    assert np.all(np.diff(scores) > 0)
    assert scores[-1] > 1.0


def test_log_lof_duplicate_of_reference_is_finite():
    rng = np.random.default_rng(1)
    ref = rng.standard_normal((100, 3))
    index = metrics.build_lof_index(ref, k=10)
    score = metrics.log_lof(index, ref[17][None])
    assert np.isfinite(score).all()


def test_log_lof_matches_bruteforce_exactly():
    rng = np.random.default_rng(2)
    for trial in range(3):
        ref = rng.standard_normal((60 + 40 * trial, 3))
        pts = rng.standard_normal((15, 3)) * 2
        index = metrics.build_lof_index(ref, k=8)
        fast = metrics.log_lof(index, pts)
        slow = brute_force_log_lof(ref, pts, k=8)
        assert np.max(np.abs(fast - slow)) < 1e-12


def test_log_lof_matches_bruteforce_on_tied_grid():
    # integer grid distances tie constantly; both sides must agree anyway
    gx, gy = np.meshgrid(np.arange(12.0), np.arange(12.0))
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    index = metrics.build_lof_index(grid, k=6)
    pts = np.array([[5.0, 5.0], [0.0, 0.0], [13.0, 6.0], [3.5, 3.5]])
    fast = metrics.log_lof(index, pts)
    slow = brute_force_log_lof(grid, pts, k=6)
    assert np.max(np.abs(fast - slow)) < 1e-12


def test_lof_index_validates_k():
    with pytest.raises(ValueError, match="k_lof"):
        metrics.build_lof_index(np.zeros((5, 2)), k=5)


# ---------------------------------------------------------------------------
# seeded evaluation
# ---------------------------------------------------------------------------

class OracleAdapter:
    """Moves every query into the benign blob; k candidates with tiny jitter."""

    multi = True

    def __init__(self, world, blackbox, k=4):
        self.world, self.blackbox, self.k = world, blackbox, k

    def generate(self, num, cat, seed, query_ids):
        pp = self.world["pp"]
        rng = np.random.default_rng(seed)
        out = []
        for i, qid in enumerate(query_ids):
            cand_num = np.tile([-3.0, -3.0], (self.k, 1)) + rng.normal(0, 0.05, (self.k, 2))
            cand_cat = np.zeros((self.k, 1), dtype=np.int32)
            probs = self.blackbox.predict_proba(pp.encode(cand_num, cand_cat))
            out.append(diffusion.CounterfactualBatch(
                int(qid), num[i].copy(), cat[i].copy(), cand_num, cand_cat,
                probs < 0.5, probs, 0.001,
            ))
        return out


class BrokenAdapter:
    multi = False

    def generate(self, num, cat, seed, query_ids):
        raise RuntimeError("no converged model")


@pytest.fixture(scope="module")
def lof_index(blob_world):
    pp, train = blob_world["pp"], blob_world["train"]
    benign = train.take(train.labels == 0)
    return metrics.build_lof_index(pp.encode_dataset(benign)[:800], k=20)


def test_run_evaluation_report_shape(blob_world, blackbox, lof_index):
    pool = blob_world["pool"].take(np.arange(6))
    methods = {
        "oracle": OracleAdapter(blob_world, blackbox),
        "broken": BrokenAdapter(),
    }
    report = metrics.run_evaluation(methods, pool, [0, 1], 4, blackbox,
                                    blob_world["pp"], lof_index)
    assert len(report.rows) == 2
    oracle_row = report.rows[0]
    assert oracle_row.method == "oracle"
    assert oracle_row.one_validity[0] == 1.0
    assert report.rows[1].failure is not None


def test_run_evaluation_constant_metric_zero_std(blob_world, blackbox, lof_index):
    pool = blob_world["pool"].take(np.arange(4))
    report = metrics.run_evaluation(
        {"oracle": OracleAdapter(blob_world, blackbox)}, pool, [3, 3], 4,
        blackbox, blob_world["pp"], lof_index,
    )
    row = report.rows[0]
    assert row.one_validity[1] == 0.0  # same seed twice -> identical runs
    assert row.sparsity[1] == 0.0


def test_run_evaluation_aggregates_equal_bruteforce_recount(blob_world, blackbox, lof_index):
    pool = blob_world["pool"].take(np.arange(5))
    report = metrics.run_evaluation(
        {"oracle": OracleAdapter(blob_world, blackbox)}, pool, [0, 1, 2], 4,
        blackbox, blob_world["pp"], lof_index,
    )
    row = report.rows[0]
    per_seed = report.records["oracle"]
    kvals = [np.mean([r.n_valid for r in recs]) for recs in per_seed.values()]
    spars = [np.mean(np.concatenate([r.sparsities for r in recs])) for recs in per_seed.values()]
    assert row.k_validity[0] == pytest.approx(np.mean(kvals))
    assert row.k_validity[1] == pytest.approx(np.std(kvals))
    assert row.sparsity[0] == pytest.approx(np.mean(spars))


def test_wachter_separable_one_validity(blob_world, blackbox, lof_index):
    class WachterAdapter:
        multi = False

        def generate(self, num, cat, seed, query_ids):
            return wachter.wachter_pool(blackbox, num, cat, 0,
                                        wachter.WachterConfig(), blob_world["pp"],
                                        seed, query_ids)

    pool = blob_world["pool"].take(np.arange(8))
    report = metrics.run_evaluation({"wachter": WachterAdapter()}, pool, [0], 1,
                                    blackbox, blob_world["pp"], lof_index)
    row = report.rows[0]
    assert row.one_validity[0] == 1.0
    assert row.k_validity is None  # single-candidate method renders a dash


def test_report_writers(tmp_path, blob_world, blackbox, lof_index):
    pool = blob_world["pool"].take(np.arange(3))
    report = metrics.run_evaluation(
        {"oracle": OracleAdapter(blob_world, blackbox), "broken": BrokenAdapter()},
        pool, [0], 2, blackbox, blob_world["pp"], lof_index,
    )
    metrics.write_report_csv(report, tmp_path / "report.csv")
    metrics.write_report_markdown(report, tmp_path / "report.md")
    csv_lines = (tmp_path / "report.csv").read_text().splitlines()
    assert csv_lines[0].startswith("#")              # log base note
    assert "natural" in csv_lines[0]
    assert csv_lines[1].split(",")[0] == "method"
    md = (tmp_path / "report.md").read_text()
    assert "| Method | Sparsity | k-validity | validity | log-LOF | time | Acc/F1 |" in md
    assert "| oracle |" in md
