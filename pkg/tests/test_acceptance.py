"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line
(run with -rA or -s to see them). Criterion 10 needs the UNSW-NB15 CSV and
is skipped when the file is absent (set CFNIDS_UNSW_CSV to enable it).
"""

import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
import yaml

from cfnids import classifier, data, diffusion, distill, metrics, pipeline, rules, vcnet
from cfnids.synthetic import two_blob_dataset, write_csv

from test_metrics import brute_force_log_lof
from test_nn import fd_gradcheck, random_net_away_from_kinks


@contextmanager
def criterion(number, name):
    record = {"detail": ""}
    try:
        yield record
    except AssertionError as exc:
        print(f"ACCEPTANCE {number} ({name}): FAIL - {exc}")
        raise
    except pytest.skip.Exception as exc:
        print(f"ACCEPTANCE {number} ({name}): SKIP - {exc}")
        raise
    print(f"ACCEPTANCE {number} ({name}): PASS - {record['detail']}")


# ---------------------------------------------------------------------------
# shared acceptance-scale synthetic world (criteria 4, 5, 6)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def world():
    ds = two_blob_dataset(5000, seed=0)
    train, test, _ = data.split_and_pool(ds, 0.2, 0, seed=0)
    pool = data.split_and_pool(ds, 0.2, 200, seed=0, pool_seed=1)[2]
    pp = data.fit_preprocessor(train)
    blackbox = classifier.train_blackbox(
        train, pp, classifier.TrainConfig(hidden=(32, 16), epochs=30), seed=1
    )
    sched = diffusion.scaled_schedule(200)
    denoiser = diffusion.train_denoiser(
        train, pp, sched, diffusion.DenoiserConfig(hidden=(128, 128), epochs=150), seed=2
    )
    guidance = classifier.train_guidance(
        sched, train, pp, classifier.TrainConfig(hidden=(64, 32), epochs=60), seed=3
    )
    vden = distill.convert_to_v(denoiser, train, pp, distill.DistillConfig(epochs=60), seed=5)
    student = distill.run_progressive_distillation(
        vden, distill.DistillationPlan((2, 5)), train, pp, distill.DistillConfig(epochs=60), seed=6
    )
    return {
        "train": train, "test": test, "pool": pool, "pp": pp, "blackbox": blackbox,
        "schedule": sched, "denoiser": denoiser, "vdenoiser": vden, "student": student,
        "guidance": guidance,
    }


def _one_validity(batches):
    return float(np.mean([b.n_valid > 0 for b in batches]))


def test_criterion_1_gradient_correctness():
    with criterion(1, "gradient correctness") as rec:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(100):
            net, x = random_net_away_from_kinks(seed)
            upstream = np.random.default_rng(10_000 + seed).standard_normal((3, net.output_dim))
            worst = max(worst, fd_gradcheck(net, x, upstream))
        elapsed = time.perf_counter() - t0
        rec["detail"] = f"max relative error {worst:.2e} over 100 nets in {elapsed:.1f}s"
        assert worst < 1e-4, f"finite-difference mismatch {worst:.2e}"
        assert elapsed < 60.0


def test_criterion_2_forward_diffusion_fidelity():
    with criterion(2, "forward diffusion fidelity") as rec:
        sched = diffusion.build_schedule(100, 1e-3, 0.3)
        # fixed seed keeps the 10k-sample moment noise (~1.4% sd on the
        # variance) inside the 2% gate; a coefficient bug lands far outside
        rng = np.random.default_rng(4)
        x0 = np.full((10_000, 1), 2.0)
        worst_mean = worst_var = 0.0
        for t in (5, 25, 50, 75, 100):
            ab = sched.alpha_bar[t]
            xt = diffusion.forward_numerical(sched, x0, t, rng=rng)
            worst_mean = max(worst_mean, abs(xt.mean() - np.sqrt(ab) * 2.0) / max(1.0, np.sqrt(ab) * 2.0))
            worst_var = max(worst_var, abs(xt.var() - (1 - ab)) / max(1.0, 1 - ab))
        assert worst_mean < 0.02, f"mean off by {worst_mean:.3%}"
        assert worst_var < 0.02, f"variance off by {worst_var:.3%}"

        sampled = diffusion.forward_categorical(sched, np.zeros(10_000, np.int64), 100, K=3, rng=rng)
        freq = np.bincount(sampled, minlength=3) / 10_000
        tv = 0.5 * float(np.abs(freq - 1 / 3).sum())
        assert tv < 0.02, f"terminal TV distance {tv:.4f}"
        rec["detail"] = f"moment error <= {max(worst_mean, worst_var):.3%}, terminal TV {tv:.4f}"


def test_criterion_3_v_rotation_algebra():
    with criterion(3, "v-rotation algebra") as rec:
        rng = np.random.default_rng(7)
        x = rng.standard_normal((10_000, 3))
        eps = rng.standard_normal((10_000, 3))
        phi = rng.uniform(0, np.pi / 2, (10_000, 1))
        z = np.cos(phi) * x + np.sin(phi) * eps
        v = distill.v_from_x_eps(x, eps, phi)
        x_hat, eps_hat = distill.x_eps_from_v(z, v, phi)
        err = max(float(np.max(np.abs(x_hat - x))), float(np.max(np.abs(eps_hat - eps))))
        rec["detail"] = f"max reconstruction error {err:.2e} over 10k triples"
        assert err < 1e-6


def test_criterion_4_distillation_oracle(world):
    with criterion(4, "distillation oracle") as rec:
        assert distill.DistillationPlan((2, 5)).final_steps(2500) == 250

        # x2 stage on a 1-feature toy teacher
        rng = np.random.default_rng(0)
        vals = rng.standard_normal((2000, 1))
        toy = data.Dataset(
            data.FeatureSchema((data.Feature("x", data.NUMERICAL),)),
            vals, np.zeros((2000, 0), np.int32), rng.integers(0, 2, 2000).astype(np.int8),
        )
        pp = data.fit_preprocessor(toy)
        sched = diffusion.build_schedule(64, 1e-3, 0.08)
        teacher_eps = diffusion.train_denoiser(
            toy, pp, sched, diffusion.DenoiserConfig(hidden=(64, 64), epochs=120), seed=0
        )
        teacher = distill.convert_to_v(teacher_eps, toy, pp, distill.DistillConfig(epochs=120), seed=1)
        student = distill.distill_stage(teacher, toy, pp, 2, distill.DistillConfig(epochs=120), seed=2)

        x0 = pp.encode_dataset(toy)[:800, :1].astype(np.float64)
        hrng = np.random.default_rng(42)
        j = hrng.integers(1, 33, size=800)
        t = 2 * j
        eps = hrng.standard_normal((800, 1))
        ab_t = sched.alpha_bar[t][:, None]
        z = np.sqrt(ab_t) * x0 + np.sqrt(1 - ab_t) * eps
        z_end, _ = distill.ddim_rollout(teacher, z, np.zeros((800, 0), np.int32), t, 2, 6.0)
        ab_b = sched.alpha_bar[t - 2][:, None]
        c_a, s_a = np.sqrt(ab_t), np.sqrt(1 - ab_t)
        c_b, s_b = np.sqrt(ab_b), np.sqrt(1 - ab_b)
        x_two = (z_end - (s_b / s_a) * z) / (c_b - (s_b / s_a) * c_a)
        v_s = student.predict(z.astype(np.float32), j)[0].astype(np.float64)
        x_one = c_a * z - s_a * v_s
        rmse = float(np.sqrt(np.mean((x_one - x_two) ** 2)))
        assert rmse < 0.05, f"student vs teacher x0 RMSE {rmse:.4f}"

        # distilled guided generation at least 5x faster at equal k
        pool, pp5, bb = world["pool"], world["pp"], world["blackbox"]
        gcfg = diffusion.GuidanceConfig(k=10)
        args = (0, world["guidance"], gcfg, pp5, bb)

        def timed(model):
            best = np.inf
            for _ in range(2):
                t0 = time.perf_counter()
                diffusion.generate_pool(pool.num[:60], pool.cat[:60], args[0], model,
                                        *args[1:], seed=4)
                best = min(best, time.perf_counter() - t0)
            return best

        t_teacher = timed(world["vdenoiser"])
        t_student = timed(world["student"])
        ratio = t_student / t_teacher
        rec["detail"] = (
            f"x2 oracle RMSE {rmse:.4f}; plan [2,5]: 2500->250; "
            f"speed ratio {ratio:.3f} ({t_teacher:.2f}s -> {t_student:.2f}s)"
        )
        assert ratio <= 0.2, f"distilled/teacher time ratio {ratio:.3f} > 0.2"


def test_criterion_5_synthetic_end_to_end_validity(world):
    with criterion(5, "synthetic end-to-end validity") as rec:
        pool, pp, bb = world["pool"], world["pp"], world["blackbox"]
        gcfg = diffusion.GuidanceConfig(k=10)
        tab = diffusion.generate_pool(pool.num, pool.cat, 0, world["denoiser"],
                                      world["guidance"], gcfg, pp, bb, seed=11)
        fast = diffusion.generate_pool(pool.num, pool.cat, 0, world["student"],
                                       world["guidance"], gcfg, pp, bb, seed=11)
        v_tab, v_fast = _one_validity(tab), _one_validity(fast)
        rec["detail"] = f"tabdiff 1-validity {v_tab:.3f}, distilled {v_fast:.3f} over 200 queries"
        assert v_tab >= 0.95, f"tabdiff 1-validity {v_tab:.3f}"
        assert v_fast >= 0.90, f"distilled 1-validity {v_fast:.3f}"


def test_criterion_6_vcnet_validity(world):
    with criterion(6, "vcnet validity") as rec:
        pool, pp, bb = world["pool"], world["pp"], world["blackbox"]
        models = vcnet.train_vcnet(world["train"], pp, vcnet.VcnetConfig(epochs=150), seed=7)
        batches = vcnet.generate_cf_pool(models, pool.num, pool.cat, 0, pp, bb, seed=8)
        v = _one_validity(batches)
        rec["detail"] = f"vcnet 1-validity {v:.3f} over 200 queries"
        assert v >= 0.90


def test_criterion_7_metric_oracles():
    with criterion(7, "metric oracles") as rec:
        rng = np.random.default_rng(0)

        class ThresholdBlackbox:
            def predict_proba(self, X):
                return 1.0 / (1.0 + np.exp(-np.asarray(X)[:, 0]))

        class PassthroughPreprocessor:
            def encode(self, num, cat):
                return np.asarray(num, dtype=np.float64)

        bb, pp = ThresholdBlackbox(), PassthroughPreprocessor()
        batches = []
        for qid in range(1000):
            k = int(rng.integers(1, 6))
            cand = rng.standard_normal((k, 3))
            probs = bb.predict_proba(cand)
            batches.append(diffusion.CounterfactualBatch(
                qid, rng.standard_normal(3), rng.integers(0, 3, 2).astype(np.int32),
                cand, rng.integers(0, 3, (k, 2)).astype(np.int32),
                probs < 0.5, probs, 0.0,
            ))
        # brute-force recounts
        for b in batches:
            expected = sum(1 for c in b.cand_num if bb.predict_proba(c[None])[0] < 0.5)
            assert metrics.k_validity(b, bb, pp) == expected
        expected_one = sum(
            1 for b in batches
            if any(bb.predict_proba(c[None])[0] < 0.5 for c in b.cand_num)
        ) / len(batches)
        assert metrics.one_validity(batches, bb, pp) == pytest.approx(expected_one)
        for b in batches[:200]:
            spars = metrics.sparsity_matrix(b.query_num, b.query_cat, b.cand_num, b.cand_cat)
            for c in range(b.k):
                recount = sum(
                    1 for a, v in zip(b.query_num, b.cand_num[c])
                    if abs(a - v) > 1e-3 * max(abs(a), abs(v))
                ) + int((b.query_cat != b.cand_cat[c]).sum())
                assert spars[c] == recount

        # LOF: O(n^2) definitional agreement and grid-interior zero
        lof_err = 0.0
        for trial in range(3):
            ref = rng.standard_normal((100 + 50 * trial, 3))
            pts = rng.standard_normal((20, 3)) * 2
            index = metrics.build_lof_index(ref, k=10)
            lof_err = max(lof_err, float(np.max(np.abs(
                metrics.log_lof(index, pts) - brute_force_log_lof(ref, pts, 10)
            ))))
        assert lof_err < 1e-12, f"LOF oracle deviation {lof_err:.2e}"
        gx, gy = np.meshgrid(np.arange(20.0), np.arange(20.0))
        grid = np.column_stack([gx.ravel(), gy.ravel()])
        interior = metrics.log_lof(metrics.build_lof_index(grid, 20),
                                   np.array([[9.5, 9.5], [10.0, 10.0]]))
        assert np.max(np.abs(interior)) < 0.1
        rec["detail"] = (
            f"recounts exact on 1000 batches; LOF oracle max dev {lof_err:.1e}; "
            f"grid-interior |log-LOF| {np.max(np.abs(interior)):.3f}"
        )


def test_criterion_8_rules_suite():
    with criterion(8, "rules suite") as rec:
        ds = two_blob_dataset(5000, seed=9, planted=True)
        cfg_raw = {
            "dataset": {"csv": "unused", "schema": {}, "test_fraction": 0.2, "split_seed": 0},
            "classifier": {"hidden": [32, 16], "epochs": 30},
            "guidance_classifier": {"hidden": [64, 32], "epochs": 60, "t_dim": 32},
            "diffusion": {"steps": 200, "beta_min": 0.00125, "beta_max": 0.25,
                          "hidden": [128, 128], "epochs": 150},
            "guidance": {"k": 10},
        }
        from cfnids.config import DEFAULTS, ExperimentConfig, _deep_merge

        cfg = ExperimentConfig(_deep_merge(DEFAULTS, cfg_raw))
        result = rules.zero_day_workflow(
            ds, "probe", pipeline.TabDiffZeroDayPipeline(cfg), seed=0, contrast=False
        )
        mentioned = {name for rule in result.rules for name, _, _ in rule.atoms}
        assert "probe_depth" in mentioned, f"planted feature missing from {sorted(mentioned)}"
        afr = result.filter_metrics["attack_filter_rate"]
        bpr = result.filter_metrics["benign_pass_rate"]
        assert afr >= 0.9, f"attack filter rate {afr:.3f}"
        assert bpr >= 0.9, f"benign pass rate {bpr:.3f}"

        # simplification is idempotent and semantics-preserving on the
        # extraction set, and every rule's purity recomputes above 0.9
        raw_rules = rules.extract_rules(result.tree, 0.9)
        once = rules.simplify_rules(raw_rules)
        assert [r.atoms for r in rules.simplify_rules(once)] == [r.atoms for r in once]
        train, test, _ = data.split_and_pool(ds, 0.2, 0, 0)
        X, names = rules.rules_matrix(test)
        assert np.array_equal(
            rules.match_rules(raw_rules, X, names), rules.match_rules(once, X, names)
        )
        for rule in result.rules:
            assert rule.purity > 0.9
        rec["detail"] = (
            f"{len(result.rules)} rules mention planted feature; filter {afr:.3f}, "
            f"pass {bpr:.3f}; purities recompute > 0.9"
        )


@pytest.fixture(scope="module")
def determinism_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept_cli")
    ds = two_blob_dataset(1200, seed=3, planted=True)
    schema = write_csv(ds, root / "synth.csv")
    cfg = {
        "dataset": {"csv": str(root / "synth.csv"), "schema": schema,
                    "test_fraction": 0.25, "split_seed": 0},
        "preprocess": {"n_quantiles": 200},
        "classifier": {"hidden": [16, 8], "epochs": 8, "lr": 2e-3},
        "guidance_classifier": {"hidden": [16, 8], "epochs": 10, "t_dim": 8, "lr": 2e-3},
        "diffusion": {"steps": 24, "beta_min": 0.003, "beta_max": 0.25,
                      "hidden": [32, 32], "epochs": 20},
        "distill": {"factors": [2], "epochs": 10},
        "vcnet": {"hidden": [16, 8], "latent_dim": 4, "epochs": 12},
        "guidance": {"k": 3},
        "explain": {"chunk": 4},
        "evaluate": {"seeds": [0], "pool_sizes": [8], "k": 3,
                     "lof_neighbors": 5, "lof_reference_cap": 500},
        "output_dir": str(root / "unused"),
    }
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return {"root": root, "config": str(path)}


def test_criterion_9_determinism(determinism_workspace):
    from cfnids import cli

    with criterion(9, "determinism") as rec:
        root = determinism_workspace["root"]
        cfg = determinism_workspace["config"]
        stages = ("preprocess", "train-classifier", "train-diffusion", "distill", "train-vcnet")

        def full_run(out, jobs):
            for stage in stages:
                assert cli.main([stage, "--config", cfg, "--output", out]) == 0
            outputs = {}
            for method in ("tabdiff", "tabdiff-distilled", "vcnet", "wachter"):
                assert cli.main([
                    "explain", "--config", cfg, "--output", out, "--method", method,
                    "--seed", "0", "--pool-size", "8", "--jobs", str(jobs),
                ]) == 0
                name = f"explain_{method}_seed0_pool8.csv"
                outputs[name] = open(os.path.join(out, name), "rb").read()
            return outputs

        serial = full_run(str(root / "run_serial"), jobs=1)
        parallel = full_run(str(root / "run_parallel"), jobs=3)
        for name in serial:
            assert serial[name] == parallel[name], f"{name} differs between runs"
        rec["detail"] = (
            f"{len(serial)} explanation CSVs byte-identical across two full runs "
            f"(serial vs 3 worker threads)"
        )


UNSW_PATH = os.environ.get("CFNIDS_UNSW_CSV", "data/unsw_nb15.csv")
UNSW_CATEGORICAL = ("proto", "service", "state")
UNSW_SKIP = ("id", "label", "attack_cat")


def unsw_schema(csv_path):
    import pandas as pd

    header = pd.read_csv(csv_path, nrows=0).columns
    features = []
    for col in header:
        if col in UNSW_SKIP:
            continue
        kind = "categorical" if col in UNSW_CATEGORICAL else "numerical"
        features.append({"name": col, "kind": kind})
    return {
        "label": "label",
        "positive_label": "1",
        "tag_column": "attack_cat",
        "features": features,
    }


@pytest.mark.skipif(not os.path.exists(UNSW_PATH),
                    reason=f"UNSW-NB15 CSV not found at {UNSW_PATH}")
def test_criterion_10_unsw_nb15(tmp_path):
    with criterion(10, "UNSW-NB15 reproduction") as rec:
        from cfnids.config import DEFAULTS, ExperimentConfig, _deep_merge

        cfg = ExperimentConfig(_deep_merge(DEFAULTS, {
            "dataset": {"csv": UNSW_PATH, "schema": unsw_schema(UNSW_PATH),
                        "test_fraction": 0.2, "split_seed": 0},
            # reduced epochs for CPU-scale training
            "classifier": {"epochs": 60},
            "guidance_classifier": {"epochs": 20},
            "diffusion": {"steps": 2500, "epochs": 20},
            "guidance": {"k": 10},
        }))
        ds, dropped = pipeline.load_dataset(cfg)
        if len(ds) != 257_499:
            print(f"note: UNSW-NB15 ingested {len(ds)} rows (expected 257,499; "
                  f"public file versions drift)")
        train, test, _ = data.split_and_pool(ds, 0.2, 0, 0)
        pool = data.split_and_pool(ds, 0.2, 1000, 0, pool_seed=1)[2]
        pp = data.fit_preprocessor(train, 1000, dropped)
        bb = classifier.train_blackbox(train, pp, cfg.classifier_config(), 11)
        acc, f1 = classifier.evaluate(bb, test, pp)
        assert abs(100 * acc - 87.65) <= 3.0, f"accuracy {100 * acc:.2f} vs 87.65 +/- 3"
        assert abs(100 * f1 - 89.02) <= 3.0, f"F1 {100 * f1:.2f} vs 89.02 +/- 3"

        # zero-day hold-out of the 'Analysis' attack category
        hold = (train.labels == 1) & (train.tags == "Analysis")
        bb_holdout = classifier.train_blackbox(train.take(~hold), pp, cfg.classifier_config(), 11)
        held = test.take((test.labels == 1) & (test.tags == "Analysis"))
        held_acc = float((bb_holdout.predict_proba(pp.encode_dataset(held)) >= 0.5).mean())
        assert abs(100 * held_acc - 81.81) <= 5.0, f"held-out accuracy {100 * held_acc:.2f}"

        sched = cfg.schedule()
        den = diffusion.train_denoiser(train, pp, sched, cfg.denoiser_config(), 13)
        guid = classifier.train_guidance(sched, train, pp, cfg.guidance_classifier_config(), 12)
        batches = diffusion.generate_pool(
            pool.num, pool.cat, 0, den, guid, cfg.guidance_config(), pp, bb, seed=0
        )
        validity = _one_validity(batches)
        assert validity >= 0.95, f"tabdiff 1-validity {validity:.3f}"
        rec["detail"] = (
            f"acc {100 * acc:.2f}, F1 {100 * f1:.2f}, Analysis hold-out "
            f"{100 * held_acc:.2f}, 1-validity {validity:.3f}"
        )
