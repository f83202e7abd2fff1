"""Stage orchestration behind the CLI: resumable, manifest-tracked artifact
production (preprocess, classifiers, diffusion, distillation, VCNet),
explanation runs, CSV-driven evaluation, and the zero-day rule workflow."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import classifier, container, data, diffusion, distill, metrics, rules, vcnet, wachter
from .config import ExperimentConfig

log = logging.getLogger(__name__)

ARTIFACTS = {
    "preprocess": "preprocessor.cfc",
    "train-classifier": "blackbox.cfc",
    "train-diffusion": "denoiser.cfc",
    "distill": "denoiser_distilled.cfc",
    "train-vcnet": "vcnet.cfc",
}


class PipelineError(RuntimeError):
    pass


@dataclass
class RunManifest:
    path: str
    config_hash: str
    stages: dict

    @classmethod
    def open(cls, out_dir, cfg_hash, force=False) -> "RunManifest":
        path = os.path.join(out_dir, "manifest.json")
        if os.path.exists(path):
            with open(path) as fh:
                payload = json.load(fh)
            if payload["config_hash"] != cfg_hash:
                if not force:
                    raise PipelineError(
                        f"config hash {cfg_hash} does not match manifest "
                        f"{payload['config_hash']}; rerun with --force to restart"
                    )
                payload = {"config_hash": cfg_hash, "stages": {}}
            return cls(path, cfg_hash, payload["stages"])
        os.makedirs(out_dir, exist_ok=True)
        return cls(path, cfg_hash, {})

    def save(self) -> None:
        with open(self.path, "w") as fh:
            json.dump({"config_hash": self.config_hash, "stages": self.stages}, fh,
                      indent=2, sort_keys=True)

    def is_done(self, stage: str, out_dir: str) -> bool:
        entry = self.stages.get(stage)
        if not entry or entry.get("status") != "done":
            return False
        return all(os.path.exists(os.path.join(out_dir, a)) for a in entry["artifacts"])

    def record(self, stage: str, artifacts: list[str], seconds: float) -> None:
        self.stages[stage] = {"status": "done", "artifacts": artifacts, "seconds": seconds}
        self.save()


def load_dataset(cfg: ExperimentConfig):
    """CSV -> typed dataset -> correlation filter, as declared in the config."""
    ds = data.load_csv(cfg["dataset"]["csv"], cfg["dataset"]["schema"])
    filtered, dropped = data.correlation_filter(ds, cfg["preprocess"]["correlation_threshold"])
    filtered.ingest_dropped = getattr(ds, "ingest_dropped", 0)
    return filtered, dropped


def load_split(cfg: ExperimentConfig, pool_size: int = 0, pool_seed=None):
    ds, _ = load_dataset(cfg)
    return data.split_and_pool(
        ds, cfg["dataset"]["test_fraction"], pool_size,
        cfg["dataset"]["split_seed"], pool_seed,
    )


def _require(out_dir, name, stage):
    path = os.path.join(out_dir, name)
    if not os.path.exists(path):
        raise PipelineError(f"missing upstream artifact {name} (run `{stage}` first)")
    return path


def _run_stage(manifest, out_dir, stage, force, fn, artifacts):
    if not force and manifest.is_done(stage, out_dir):
        log.info("stage %s already complete, skipping", stage)
        return False
    t0 = time.perf_counter()
    fn()
    manifest.record(stage, artifacts, time.perf_counter() - t0)
    return True


def stage_preprocess(cfg, out_dir, manifest, force=False):
    def run():
        ds, dropped = load_dataset(cfg)
        train, _, _ = data.split_and_pool(
            ds, cfg["dataset"]["test_fraction"], 0, cfg["dataset"]["split_seed"]
        )
        pp = data.fit_preprocessor(
            train, cfg["preprocess"]["n_quantiles"], dropped, cfg["dataset"]["split_seed"]
        )
        pp.save(os.path.join(out_dir, "preprocessor.cfc"))
        with open(os.path.join(out_dir, "preprocess_report.json"), "w") as fh:
            json.dump(
                {
                    "rows": len(ds),
                    "ingest_dropped_rows": getattr(ds, "ingest_dropped", 0),
                    "dropped_correlated": dropped,
                    "constant_features": pp.constant_features(),
                    "encoded_width": pp.encoded_width,
                },
                fh, indent=2, sort_keys=True,
            )

    return _run_stage(manifest, out_dir, "preprocess", force, run,
                      ["preprocessor.cfc", "preprocess_report.json"])


def _schema_hash(pp):
    return container.schema_hash(pp.schema.meta())


def stage_train_classifier(cfg, out_dir, manifest, force=False):
    def run():
        pp = data.FittedPreprocessor.load(_require(out_dir, "preprocessor.cfc", "preprocess"))
        train, test, _ = load_split(cfg)
        bb = classifier.train_blackbox(train, pp, cfg.classifier_config(), cfg["classifier"]["seed"])
        acc, f1 = classifier.evaluate(bb, test, pp)
        log.info("black-box test accuracy %.4f f1 %.4f", acc, f1)
        bb.save(os.path.join(out_dir, "blackbox.cfc"), _schema_hash(pp))
        classifier.write_curve_csv(bb.curve, os.path.join(out_dir, "blackbox_curve.csv"))
        with open(os.path.join(out_dir, "blackbox_eval.json"), "w") as fh:
            json.dump({"accuracy": acc, "f1": f1}, fh)

    return _run_stage(manifest, out_dir, "train-classifier", force, run,
                      ["blackbox.cfc", "blackbox_curve.csv", "blackbox_eval.json"])


def stage_train_diffusion(cfg, out_dir, manifest, force=False):
    def run():
        pp = data.FittedPreprocessor.load(_require(out_dir, "preprocessor.cfc", "preprocess"))
        train, _, _ = load_split(cfg)
        sched = cfg.schedule()
        den = diffusion.train_denoiser(train, pp, sched, cfg.denoiser_config(), cfg["diffusion"]["seed"])
        den.save(os.path.join(out_dir, "denoiser.cfc"), _schema_hash(pp))
        guid = classifier.train_guidance(
            sched, train, pp, cfg.guidance_classifier_config(), cfg["guidance_classifier"]["seed"]
        )
        guid.save(os.path.join(out_dir, "guidance.cfc"), _schema_hash(pp))

    return _run_stage(manifest, out_dir, "train-diffusion", force, run,
                      ["denoiser.cfc", "guidance.cfc"])


def stage_distill(cfg, out_dir, manifest, force=False):
    def run():
        pp = data.FittedPreprocessor.load(_require(out_dir, "preprocessor.cfc", "preprocess"))
        den = diffusion.TabularDenoiser.load(_require(out_dir, "denoiser.cfc", "train-diffusion"))
        train, _, _ = load_split(cfg)
        dcfg = cfg.distill_config()
        seed = cfg["distill"]["seed"]
        vden = distill.convert_to_v(den, train, pp, dcfg, seed)
        student = distill.run_progressive_distillation(
            vden, cfg.distill_plan(), train, pp, dcfg, seed + 1
        )
        student.save(os.path.join(out_dir, "denoiser_distilled.cfc"), _schema_hash(pp))

    return _run_stage(manifest, out_dir, "distill", force, run, ["denoiser_distilled.cfc"])


def stage_train_vcnet(cfg, out_dir, manifest, force=False):
    def run():
        pp = data.FittedPreprocessor.load(_require(out_dir, "preprocessor.cfc", "preprocess"))
        train, _, _ = load_split(cfg)
        models = vcnet.train_vcnet(train, pp, cfg.vcnet_config(), cfg["vcnet"]["seed"])
        models.save(os.path.join(out_dir, "vcnet.cfc"))

    return _run_stage(manifest, out_dir, "train-vcnet", force, run, ["vcnet.cfc"])


# ---------------------------------------------------------------------------
# explanation generation
# ---------------------------------------------------------------------------

class MethodAdapter:
    """Uniform .generate(num, cat, seed, query_ids) facade over the four
    counterfactual methods, built from persisted artifacts."""

    def __init__(self, name, cfg, out_dir, k, jobs=1):
        self.name, self.cfg, self.k, self.jobs = name, cfg, k, jobs
        self.pp = data.FittedPreprocessor.load(_require(out_dir, "preprocessor.cfc", "preprocess"))
        self.blackbox = classifier.BlackBoxClassifier.load(
            _require(out_dir, "blackbox.cfc", "train-classifier")
        )
        self._check_schema(self.blackbox, "blackbox.cfc")
        self.multi = name in ("tabdiff", "tabdiff-distilled")
        if self.multi:
            artifact = "denoiser.cfc" if name == "tabdiff" else "denoiser_distilled.cfc"
            stage = "train-diffusion" if name == "tabdiff" else "distill"
            self.denoiser = diffusion.TabularDenoiser.load(_require(out_dir, artifact, stage))
            self._check_schema(self.denoiser, artifact)
            if cfg["guidance"].get("use_blackbox"):
                self.guidance = classifier.BlackboxGuidance(self.blackbox)
            else:
                self.guidance = classifier.GuidanceClassifier.load(
                    _require(out_dir, "guidance.cfc", "train-diffusion")
                )
                self._check_schema(self.guidance, "guidance.cfc")
        elif name == "vcnet":
            self.models = vcnet.VcnetModels.load(_require(out_dir, "vcnet.cfc", "train-vcnet"))
        elif name == "wachter":
            pass
        else:
            raise PipelineError(f"unknown method {name!r}")

    def _check_schema(self, model, artifact):
        stored = getattr(model, "schema_hash", None)
        if stored is not None and stored != _schema_hash(self.pp):
            raise PipelineError(
                f"{artifact} was trained against a different feature schema "
                f"({stored} != {_schema_hash(self.pp)})"
            )

    def generate(self, num, cat, seed, query_ids):
        if self.multi:
            gcfg = self.cfg.guidance_config(k=self.k)
            return diffusion.generate_pool(
                num, cat, 0, self.denoiser, self.guidance, gcfg, self.pp, self.blackbox,
                seed, query_ids, chunk=self.cfg["explain"]["chunk"], jobs=self.jobs,
            )
        if self.name == "vcnet":
            return vcnet.generate_cf_pool(self.models, num, cat, 0, self.pp, self.blackbox,
                                          seed, query_ids)
        return wachter.wachter_pool(self.blackbox, num, cat, 0, self.cfg.wachter_config(),
                                    self.pp, seed, query_ids)


def explain_name(method, seed, pool_size):
    return f"explain_{method}_seed{seed}_pool{pool_size}"


def run_explain(cfg, out_dir, method, seed, pool_size, k=None, jobs=None):
    """Generate explanations for a seeded attack pool and write the CSV pair
    (candidates + timing sidecar) plus the query reference CSV."""
    k = k if k is not None else cfg["evaluate"]["k"]
    jobs = jobs if jobs is not None else cfg["explain"]["jobs"]
    adapter = MethodAdapter(method, cfg, out_dir, k, jobs)
    _, _, pool = load_split(cfg, pool_size, pool_seed=seed)
    batches = adapter.generate(pool.num, pool.cat, seed, np.arange(len(pool)))
    stem = os.path.join(out_dir, explain_name(method, seed, pool_size))
    diffusion.write_batches_csv(batches, pool.schema, stem + ".csv", stem + "_times.csv")
    diffusion.write_queries_csv(batches, pool.schema, stem + "_queries.csv")
    return stem + ".csv"


def read_batches_csv(stem, pp):
    """Reconstruct CounterfactualBatch objects from an explanation CSV pair."""
    frame = pd.read_csv(stem + ".csv")
    queries = pd.read_csv(stem + "_queries.csv").set_index("query_id")
    times = pd.read_csv(stem + "_times.csv").set_index("query_id")["seconds"]
    schema = pp.schema
    num_names = [f.name for f in schema.numerical]
    cat_feats = list(schema.categorical)
    batches = []
    for qid, group in frame.groupby("query_id", sort=True):
        cand_num = group[num_names].to_numpy(dtype=np.float64)
        cand_cat = np.column_stack(
            [pp.encode_labels(group[f.name].to_numpy(), j) for j, f in enumerate(cat_feats)]
        ) if cat_feats else np.zeros((len(group), 0), np.int32)
        qrow = queries.loc[qid]
        q_num = qrow[num_names].to_numpy(dtype=np.float64)
        q_cat = np.array(
            [pp.encode_labels(np.array([qrow[f.name]]), j)[0] for j, f in enumerate(cat_feats)],
            dtype=np.int32,
        )
        batches.append(diffusion.CounterfactualBatch(
            query_id=int(qid),
            query_num=q_num,
            query_cat=q_cat,
            cand_num=cand_num,
            cand_cat=cand_cat,
            validity=group["valid"].to_numpy(dtype=bool),
            prob=group["probability"].to_numpy(dtype=np.float64),
            seconds=float(times.loc[qid]),
        ))
    return batches


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def run_evaluate(cfg, out_dir):
    """Aggregate the explanation CSVs into Table-style reports, one block per
    pool size, plus a JSON record of every per-query measurement."""
    pp = data.FittedPreprocessor.load(_require(out_dir, "preprocessor.cfc", "preprocess"))
    bb = classifier.BlackBoxClassifier.load(_require(out_dir, "blackbox.cfc", "train-classifier"))
    with open(_require(out_dir, "blackbox_eval.json", "train-classifier")) as fh:
        bb_eval = json.load(fh)
    train, _, _ = load_split(cfg)
    benign = train.take(train.labels == 0)
    cap = cfg["evaluate"]["lof_reference_cap"]
    ref = pp.encode_dataset(benign)
    if len(ref) > cap:
        keep = np.random.default_rng(cfg["dataset"]["split_seed"]).choice(len(ref), cap, replace=False)
        ref = ref[np.sort(keep)]
    lof_index = metrics.build_lof_index(ref, cfg["evaluate"]["lof_neighbors"])

    seeds = cfg["evaluate"]["seeds"]
    k = cfg["evaluate"]["k"]
    outputs, records_payload = [], {}
    for pool_size in cfg["evaluate"]["pool_sizes"]:
        report = metrics.EvalReport(rows=[], k=k, seeds=tuple(seeds))
        for method in cfg["evaluate"]["methods"]:
            per_seed = {}
            failure = None
            for seed in seeds:
                stem = os.path.join(out_dir, explain_name(method, seed, pool_size))
                if not os.path.exists(stem + ".csv"):
                    failure = f"missing {os.path.basename(stem)}.csv (run explain)"
                    break
                batches = read_batches_csv(stem, pp)
                per_seed[seed] = metrics.evaluate_batches(batches, bb, pp, lof_index)
            if failure:
                row = metrics.EvalRow(method=method, failure=failure)
            else:
                row = metrics.aggregate_records(per_seed, method in ("tabdiff", "tabdiff-distilled"))
                row.method = method
            row.acc, row.f1 = bb_eval["accuracy"], bb_eval["f1"]
            report.rows.append(row)
            report.records[method] = per_seed
        csv_path = os.path.join(out_dir, f"eval_pool{pool_size}.csv")
        metrics.write_report_csv(report, csv_path)
        metrics.write_report_markdown(report, os.path.join(out_dir, f"eval_pool{pool_size}.md"))
        outputs.append(csv_path)
        records_payload[str(pool_size)] = {
            method: {
                str(seed): [
                    {
                        "query_id": r.query_id,
                        "k": r.k,
                        "n_valid": r.n_valid,
                        "sparsities": r.sparsities.tolist(),
                        "log_lofs": r.log_lofs.tolist(),
                        "seconds": r.seconds,
                    }
                    for r in recs
                ]
                for seed, recs in per_seed.items()
            }
            for method, per_seed in report.records.items()
        }
    with open(os.path.join(out_dir, "eval_records.json"), "w") as fh:
        json.dump(records_payload, fh)
    return outputs


# ---------------------------------------------------------------------------
# zero-day rules
# ---------------------------------------------------------------------------

class TabDiffZeroDayPipeline:
    """Trains the full guided-diffusion stack on a reduced training set for
    the zero-day workflow."""

    def __init__(self, cfg: ExperimentConfig, k: int | None = None):
        self.cfg = cfg
        self.k = k if k is not None else cfg["evaluate"]["k"]

    def fit(self, train, seed):
        cfg = self.cfg
        self.pp = data.fit_preprocessor(train, cfg["preprocess"]["n_quantiles"])
        self.blackbox = classifier.train_blackbox(
            train, self.pp, cfg.classifier_config(), cfg["classifier"]["seed"]
        )
        sched = cfg.schedule()
        self.denoiser = diffusion.train_denoiser(
            train, self.pp, sched, cfg.denoiser_config(), cfg["diffusion"]["seed"]
        )
        self.guidance = classifier.train_guidance(
            sched, train, self.pp, cfg.guidance_classifier_config(),
            cfg["guidance_classifier"]["seed"],
        )

    def predict_proba(self, num, cat):
        return self.blackbox.predict_proba(self.pp.encode(num, cat))

    def explain(self, num, cat, seed, query_ids):
        return diffusion.generate_pool(
            num, cat, 0, self.denoiser, self.guidance, self.cfg.guidance_config(k=self.k),
            self.pp, self.blackbox, seed, query_ids, chunk=self.cfg["explain"]["chunk"],
        )


def run_rules(cfg, out_dir, attack_tag, seed, contrast=False):
    ds, _ = load_dataset(cfg)
    result = rules.zero_day_workflow(
        ds, attack_tag, TabDiffZeroDayPipeline(cfg), seed,
        test_fraction=cfg["dataset"]["test_fraction"],
        purity_threshold=cfg["rules"]["purity_threshold"],
        accuracy_floor=cfg["rules"]["accuracy_floor"],
        contrast=contrast,
    )
    tag = attack_tag.replace(" ", "_")
    rules.write_rules_text(result.rules, os.path.join(out_dir, f"rules_{tag}.txt"))
    rules.write_rules_json(
        result.rules,
        {
            "heldout_accuracy": result.heldout_accuracy,
            "filter": result.filter_metrics,
            "extraction": result.extraction_metrics,
        },
        os.path.join(out_dir, f"rules_{tag}.json"),
    )
    if contrast and result.contrast_rules is not None:
        rules.write_rules_text(
            result.contrast_rules, os.path.join(out_dir, f"rules_{tag}_training_data.txt")
        )
    _write_extraction_csv(result, os.path.join(out_dir, f"rules_{tag}_extraction.csv"))
    return result


def _write_extraction_csv(result, path):
    """Per-feature CSV of the extraction set (counterfactuals vs their attack
    queries), ready for external attribution tooling."""
    from .synthetic import dataset_to_frame

    cf = dataset_to_frame(result.cf_rows, label_col="label")
    cf["role"] = "counterfactual"
    attacks = dataset_to_frame(result.attack_rows, label_col="label")
    attacks["role"] = "attack_query"
    combined = pd.concat([cf, attacks[cf.columns]], ignore_index=True)
    combined.to_csv(path, index=False)
