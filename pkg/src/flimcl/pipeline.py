"""Config handling and the staged pipeline: synth, features, train, curate, refine, attrib, report.

Every stage reads its inputs from the output directory and writes its own
artifacts there, so stages can run one at a time. Each artifact records the
config hash and the seeds it was produced with; nothing time- or
path-dependent is written, so a rerun reproduces every byte.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
from importlib import resources
from pathlib import Path

import numpy as np

from . import attribution, curation, evaluation, features, models, sim
from .errors import ConfigError, InputError, StageDependencyError

STAGES = ("synth", "features", "train", "curate", "refine", "attrib", "report")
OUT_ENV = "FLIMCL_OUT"

FILES = {
    "manifest": "manifest.json",
    "features": "features.csv",
    "baseline": "baseline_metrics.json",
    "posteriors_baseline": "posteriors_baseline.csv",
    "model_baseline": "model_baseline.json",
    "curation": "curation_report.json",
    "joint": "confident_joint.csv",
    "refinement": "refinement.json",
    "posteriors_final": "posteriors_final.csv",
    "model_final": "model_final.json",
    "rescoring": "rescoring.json",
    "attribution": "attribution.csv",
    "attribution_instances": "attribution_instances.json",
    "importance": "permutation_importance.csv",
    "summary": "summary.txt",
}


# ---------------------------------------------------------------------------
# config


def default_config() -> dict:
    text = resources.files("flimcl").joinpath("configs/demo.json").read_text()
    return json.loads(text)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key == "_marks":
            out[key] = val
            continue
        if key not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[key], dict) and key not in ("ladder", "hyperparams"):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected a table")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _expect(cond, where, msg):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def _check_types(base, cfg, path=""):
    for key, ref in base.items():
        if key == "_marks" or key not in cfg:
            continue
        val = cfg[key]
        where = f"{path}{key}"
        if isinstance(ref, bool):
            _expect(isinstance(val, bool), where, "expected true/false")
        elif isinstance(ref, (int, float)) and not isinstance(ref, bool):
            _expect(isinstance(val, (int, float)) and not isinstance(val, bool), where, "expected a number")
            if isinstance(ref, int):
                _expect(float(val) == int(val), where, "expected an integer")
        elif isinstance(ref, str):
            _expect(isinstance(val, str), where, "expected a string")
        elif isinstance(ref, list):
            _expect(isinstance(val, list), where, "expected a list")
        elif isinstance(ref, dict) and key not in ("ladder", "hyperparams"):
            _check_types(ref, val, where + ".")


def validate_config(cfg: dict) -> dict:
    """Raise ConfigError naming the offending field path; returns ``cfg``."""
    _check_types(default_config(), cfg)
    stages = cfg["stages"]
    for i, s in enumerate(stages):
        _expect(s in STAGES, f"stages[{i}]", f"unknown stage {s!r}")
    _expect(list(stages) == [s for s in STAGES if s in stages], "stages", "stages must follow pipeline order")
    s = cfg["sim"]
    _expect(s["n_patients"] >= 2, "sim.n_patients", "need at least 2 patients")
    _expect(s["dt"] > 0, "sim.dt", "must be positive")
    _expect(s["n_samples"] >= 64, "sim.n_samples", "need at least 64 samples")
    _expect(len(s["class_names"]) >= 2, "sim.class_names", "need at least two classes")
    c = cfg["corruption"]
    _expect(0.0 <= c["rate"] < 1.0, "corruption.rate", "must lie in [0, 1)")
    _expect(c["mode"] in ("adjacent", "uniform"), "corruption.mode", "must be 'adjacent' or 'uniform'")
    f = cfg["features"]
    _expect(0.0 < f["alpha"] < 1.0, "features.alpha", "must lie in (0, 1)")
    _expect(1 <= f["laguerre_order"] <= s["n_samples"], "features.laguerre_order", "must lie in 1..n_samples")
    _expect(f["phasor_source"] in ("decay", "raw"), "features.phasor_source", "must be 'decay' or 'raw'")
    m = cfg["models"]
    _expect(len(m["kinds"]) >= 1, "models.kinds", "need at least one model kind")
    for i, k in enumerate(m["kinds"]):
        _expect(k in models.KINDS, f"models.kinds[{i}]", f"unknown kind {k!r}")
    for k, hp in m["hyperparams"].items():
        _expect(k in models.KINDS, f"models.hyperparams.{k}", "unknown model kind")
        for name in hp:
            _expect(name in models.DEFAULT_HYPERPARAMS[k], f"models.hyperparams.{k}.{name}", "unknown hyperparameter")
    cu = cfg["curation"]
    _expect(cu["threshold_mode"] in ("self", "all"), "curation.threshold_mode", "must be 'self' or 'all'")
    _expect(0.0 <= cu["control"] < cu["issue"] <= 1.0, "curation", "need 0 <= control < issue <= 1")
    r = cfg["refine"]
    _expect(r["strategy"] in ("schedule", "auto"), "refine.strategy", "must be 'schedule' or 'auto'")
    _expect(r["epsilon"] >= 0.0, "refine.epsilon", "must be nonnegative")
    for i, step in enumerate(r["schedule"]):
        _expect(isinstance(step, dict) and "groups" in step, f"refine.schedule[{i}]", "needs a 'groups' list")
    rs = cfg["rescoring"]
    _expect(rs["policy"] in ("oracle", "noisy-oracle"), "rescoring.policy", "must be 'oracle' or 'noisy-oracle'")
    _expect(0.0 <= rs["reliability"] <= 1.0, "rescoring.reliability", "must lie in [0, 1]")
    a = cfg["attribution"]
    _expect(a["scale"] in attribution.SCALES, "attribution.scale", f"must be one of {attribution.SCALES}")
    _expect(a["n_permutations"] >= 1, "attribution.n_permutations", "must be >= 1")
    _expect(a["background_size"] >= 1, "attribution.background_size", "must be >= 1")
    return cfg


def load_config(path=None, seed: int | None = None, out: str | None = None) -> dict:
    """Demo defaults overlaid with the JSON file at ``path``; CLI/env overrides applied last."""
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be a table")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["output_dir"] = out
    elif os.environ.get(OUT_ENV):
        cfg["output_dir"] = os.environ[OUT_ENV]
    return validate_config(cfg)


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical config, excluding the output location and annotations."""
    core = {k: v for k, v in cfg.items() if k not in ("output_dir", "_marks")}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()


def derived_seeds(cfg: dict) -> dict:
    s = int(cfg["seed"])
    return {"sim": s, "corruption": s + 1, "models": s + 2, "attribution": s + 3, "rescoring": s + 4}


# ---------------------------------------------------------------------------
# artifact helpers


class Run:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.hash = config_hash(cfg)
        self.seeds = derived_seeds(cfg)

    def provenance(self, stage: str, **extra) -> dict:
        return {"config_sha256": self.hash, "seeds": self.seeds, "stage": stage, **extra}

    def path(self, key: str) -> Path:
        return self.out / FILES[key]

    def need(self, stage: str, *keys) -> None:
        for key in keys:
            if not self.path(key).exists():
                raise StageDependencyError(stage, FILES[key])

    def write_text(self, key: str, text: str) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.path(key).write_text(text if text.endswith("\n") else text + "\n")

    def write_json(self, key: str, doc: dict) -> None:
        self.write_text(key, json.dumps(doc, indent=1, sort_keys=True))

    def read_json(self, key: str) -> dict:
        return json.loads(self.path(key).read_text())

    def manifest(self) -> sim.DatasetManifest:
        return sim.DatasetManifest.from_dict(self.read_json("manifest"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_matrix_csv(path, matrix, columns, provenance: dict, row_ids=None) -> None:
    with open(path, "w", newline="") as fh:
        for k in sorted(provenance):
            fh.write(f"# {k}: {json.dumps(provenance[k], sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["point_id"] if row_ids is not None else []) + list(columns))
        for i, row in enumerate(np.asarray(matrix)):
            lead = [row_ids[i]] if row_ids is not None else []
            w.writerow(lead + [repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(line for line in fh if not line.startswith("#"))
        next(r)
        rows = [[float(v) for v in rec[1:]] for rec in r]
    return np.asarray(rows, dtype=float)


def _csv_with_provenance(path, header, rows, provenance):
    with open(path, "w", newline="") as fh:
        for k in sorted(provenance):
            fh.write(f"# {k}: {json.dumps(provenance[k], sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _sim_config(cfg: dict, seed: int) -> sim.SimConfig:
    d = dict(cfg["sim"])
    d["seed"] = seed
    return sim.SimConfig.from_dict(d)


def _feature_setup(cfg: dict, manifest: sim.DatasetManifest):
    f = cfg["features"]
    schema = features.FeatureSchema(bands=tuple(manifest.bands), laguerre_order=f["laguerre_order"],
                                    n_harmonics=f["n_harmonics"], intensity_ratio=f["intensity_ratio"])
    basis = features.BasisConfig(order=f["laguerre_order"], alpha=f["alpha"], ridge=f["ridge"],
                                 knot_stride=f["knot_stride"], phasor_source=f["phasor_source"])
    return schema, basis


def _load_features(run: Run, stage: str):
    run.need(stage, "manifest", "features")
    manifest = run.manifest()
    names, keys, x = features.read_feature_csv(run.path("features"))
    if len(x) != manifest.n_points:
        raise StageDependencyError(stage, f"{FILES['features']} consistent with {FILES['manifest']}")
    return manifest, names, keys, x


def _hyper(cfg, kind):
    return cfg["models"]["hyperparams"].get(kind)


# ---------------------------------------------------------------------------
# stages


def stage_synth(run: Run) -> None:
    cfg = run.cfg
    scfg = _sim_config(cfg, run.seeds["sim"])
    manifest, waves = sim.synth_dataset(scfg)
    noisy, _ = sim.inject_label_noise(manifest, cfg["corruption"]["rate"], cfg["corruption"]["mode"],
                                      seed=run.seeds["corruption"])
    run.out.mkdir(parents=True, exist_ok=True)
    files = {}
    for band, arr in waves.items():
        name = f"waveforms_{band}.npy"
        np.save(run.out / name, arr, allow_pickle=False)
        files[band] = {"file": name, "sha256": _sha256(run.out / name), "shape": list(arr.shape)}
    doc = noisy.to_dict()
    doc["waveform_files"] = files
    doc["irf"] = {"kind": "gaussian", "fwhm": scfg.irf_fwhm, "delay": scfg.irf_delay}
    doc["provenance"] = run.provenance("synth")
    run.write_json("manifest", doc)


def stage_features(run: Run) -> None:
    run.need("features", "manifest")
    doc = run.read_json("manifest")
    manifest = sim.DatasetManifest.from_dict(doc)
    waves = {}
    for band in manifest.bands:
        entry = doc["waveform_files"][band]
        p = run.out / entry["file"]
        if not p.exists():
            raise StageDependencyError("features", entry["file"])
        if _sha256(p) != entry["sha256"]:
            raise StageDependencyError("features", f"{entry['file']} matching the manifest digest")
        waves[band] = np.load(p, allow_pickle=False)
    irf_doc = doc["irf"]
    irf = sim.gaussian_irf(irf_doc["fwhm"], manifest.dt, manifest.n_samples, irf_doc["delay"])
    schema, basis = _feature_setup(run.cfg, manifest)
    x = features.FeatureExtractor(irf, manifest.n_samples, manifest.dt, schema, basis).transform(waves)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite features")
    keys = list(zip(manifest.point_patient_ids().tolist(), manifest.point_margin_ids().tolist(),
                    range(manifest.n_points)))
    features.write_feature_csv(run.path("features"), x, schema, keys,
                               provenance={"config_sha256": run.hash, "stage": "features",
                                           "seeds": json.dumps(run.seeds, sort_keys=True)})


def _metrics_doc(res: evaluation.LopoResult, labels, n_classes, class_names) -> dict:
    cm = evaluation.confusion_matrix(res.predictions, labels, n_classes)
    auc = evaluation.per_class_auc(res.posteriors, labels)
    m = evaluation.lopo_metrics(res, labels)
    return {
        "accuracy": m.accuracy, "mean_auc": m.mean_auc, "selection_score": m.selection_score,
        "per_class_auc": {n: (None if not np.isfinite(a) else float(a)) for n, a in zip(class_names, auc)},
        "per_class_recall": {n: (None if not np.isfinite(r) else float(r)) for n, r in zip(class_names, cm.recall)},
        "fold_accuracy": res.fold_accuracy,
        "confusion_matrix": cm.counts.tolist(),
    }


def stage_train(run: Run) -> None:
    manifest, names, keys, x = _load_features(run, "train")
    y = manifest.point_labels()
    pp = manifest.point_patient_ids()
    C = manifest.n_classes
    plan = evaluation.lopo_splits(manifest)
    results, metrics, docs = {}, {}, {}
    for kind in run.cfg["models"]["kinds"]:
        res = evaluation.lopo_predict(kind, x, y, pp, C, _hyper(run.cfg, kind), run.seeds["models"], plan)
        results[kind] = res
        metrics[kind] = evaluation.lopo_metrics(res, y)
        docs[kind] = _metrics_doc(res, y, C, manifest.class_names)
    best = models.select_baseline(metrics)
    prov = run.provenance("train", split="out-of-fold", folds=len(plan))
    run.write_json("baseline", {"format": "flimcl-metrics/1", "provenance": prov, "class_names": manifest.class_names,
                                "candidates": docs, "selected": best,
                                "patients": [f.test_patients[0] for f in plan]})
    for kind, res in results.items():
        evaluation.ConfusionMatrix(np.asarray(docs[kind]["confusion_matrix"])).to_csv(
            run.out / f"confusion_{kind}.csv", manifest.class_names, run.provenance("train", kind=kind))
    post = results[best].posteriors
    edges, counts = evaluation.confidence_histogram(post.max(axis=1), y, C)
    evaluation.write_confidence_histogram(run.out / "confidence_histogram_baseline.csv", edges, counts,
                                          manifest.class_names, run.provenance("train", kind=best))
    write_matrix_csv(run.path("posteriors_baseline"), post, manifest.class_names,
                     run.provenance("train", split="out-of-fold", kind=best), row_ids=list(range(len(post))))
    model = models.train(best, x, y, _hyper(run.cfg, best), run.seeds["models"], n_classes=C, groups=pp)
    mdoc = json.loads(models.to_json(model))
    mdoc["provenance"] = run.provenance("train", split="all-points")
    run.write_json("model_baseline", mdoc)


def stage_curate(run: Run) -> None:
    run.need("curate", "manifest", "baseline", "posteriors_baseline")
    manifest = run.manifest()
    base = run.read_json("baseline")
    p = read_matrix_csv(run.path("posteriors_baseline"))
    cu = run.cfg["curation"]
    rep = curation.curate(p, manifest.point_labels(), manifest.point_margin_index(),
                          [m.margin_id for m in manifest.margins], range(manifest.n_points),
                          manifest.class_names, cu["threshold_mode"], cu["issue"], cu["control"])
    rep.provenance = run.provenance("curate", split="out-of-fold", kind=base["selected"])
    rep.metrics = {"lc_fraction": float(rep.lc.mean()),
                   "status_counts": {s: rep.status.count(s) for s in ("issue", "indeterminate", "control")},
                   "accuracy": base["candidates"][base["selected"]]["accuracy"]}
    rep.history = [{"classes": manifest.class_names, "mapping": list(range(manifest.n_classes)), "step": 0}]
    run.write_text("curation", rep.to_json())
    rep.joint.to_csv(run.path("joint"), manifest.class_names, run.provenance("curate"))


def _schedule(cfg):
    return [{"groups": s["groups"], "names": s.get("names")} for s in cfg["refine"]["schedule"]]


def stage_refine(run: Run) -> None:
    manifest, names, keys, x = _load_features(run, "refine")
    run.need("refine", "baseline", "curation")
    base = run.read_json("baseline")
    kind = base["selected"]
    r = run.cfg["refine"]
    y = manifest.point_labels()
    pp = manifest.point_patient_ids()
    scheme = curation.ClassScheme.identity(manifest.class_names)
    res = curation.refine_iteratively(
        x, y, pp, scheme, kind, _hyper(run.cfg, kind), run.seeds["models"], r["epsilon"],
        schedule=_schedule(run.cfg) if r["strategy"] == "schedule" else None,
        prune=r["prune"], threshold_mode=run.cfg["curation"]["threshold_mode"])
    final = res.scheme
    yf = res.labels
    post = res.pruned_posteriors if res.pruned_posteriors is not None else res.posteriors
    pred = np.argmax(post, axis=1)
    lc = res.lc
    pruning = None
    if res.accuracy_after_prune is not None:
        unpruned_pred = np.argmax(res.posteriors, axis=1)
        pruning = {
            "removed_points": int(lc.sum()), "removed_fraction": float(lc.mean()),
            "accuracy_before": res.accuracy_before_prune, "accuracy_after": res.accuracy_after_prune,
            "gain": res.pruning_gain,
            # diagnostic only: accuracy restricted to test points that are not LC
            "non_lc_test_accuracy_before": float(np.mean(unpruned_pred[~lc] == yf[~lc])),
            "non_lc_test_accuracy_after": float(np.mean(pred[~lc] == yf[~lc])),
        }
    cm = evaluation.confusion_matrix(pred, yf, final.n_classes)
    cm.to_csv(run.out / "confusion_final.csv", list(final.names), run.provenance("refine", kind=kind))
    last = [s for s in res.steps if s.accepted][-1]
    joint = curation.confident_joint(res.posteriors, yf, np.asarray(last.thresholds))
    joint.to_csv(run.out / "confident_joint_final.csv", list(final.names), run.provenance("refine", kind=kind))
    doc = {
        "format": "flimcl-refinement/1", "provenance": run.provenance("refine", split="out-of-fold", kind=kind),
        "strategy": r["strategy"], "epsilon": r["epsilon"], "kind": kind,
        "scheme_history": res.history,
        "final_scheme": {"classes": list(final.names), "mapping": list(final.mapping)},
        "final_accuracy": float(np.mean(pred == yf)),
        "final_per_class_auc": [None if not np.isfinite(a) else float(a) for a in evaluation.per_class_auc(post, yf)],
        "final_confusion_matrix": cm.counts.tolist(),
        "pruning": pruning,
    }
    run.write_json("refinement", doc)
    write_matrix_csv(run.path("posteriors_final"), post, final.names,
                     run.provenance("refine", split="out-of-fold", kind=kind), row_ids=list(range(len(post))))
    if res.model is not None:
        mdoc = json.loads(models.to_json(res.model))
        mdoc["provenance"] = run.provenance("refine", split="pruned-training-points")
        mdoc["class_names"] = list(final.names)
        run.write_json("model_final", mdoc)

    statuses = run.read_json("curation")["margins"]
    statuses = {mid: v["status"] for mid, v in statuses.items()}
    rs = run.cfg["rescoring"]
    study = evaluation.rescoring_study(manifest, statuses, manifest.corruption_log, pred,
                                       merge_map=np.asarray(final.mapping), policy=rs["policy"],
                                       reliability=rs["reliability"], seed=run.seeds["rescoring"])
    corrupted = {e.margin_id for e in manifest.corruption_log.entries}
    flagged = [mid for mid, s in statuses.items() if s == "issue"]
    open_set = [mid for mid, s in statuses.items() if s in ("issue", "indeterminate")]
    base_rate = len(corrupted) / len(statuses)
    precision = (sum(m in corrupted for m in flagged) / len(flagged)) if flagged else None
    run.write_json("rescoring", {
        "format": "flimcl-rescoring/1", "provenance": run.provenance("refine", oracle="corruption-log"),
        "policy": rs["policy"], "reliability": rs["reliability"], "scheme": list(final.names),
        "groups": {g: v.to_dict() for g, v in study.items()},
        "flag_quality": {
            "n_margins": len(statuses), "n_corrupted": len(corrupted), "base_rate": base_rate,
            "n_issue": len(flagged), "issue_precision": precision,
            "enrichment": (precision / base_rate) if precision is not None and base_rate > 0 else None,
            "recall_issue_or_indeterminate": (sum(m in corrupted for m in open_set) / len(corrupted))
            if corrupted else None,
        },
    })


def stage_attrib(run: Run) -> None:
    manifest, names, keys, x = _load_features(run, "attrib")
    run.need("attrib", "model_final", "refinement")
    mdoc = run.read_json("model_final")
    model = models.from_json(json.dumps(mdoc))
    ref = run.read_json("refinement")
    mapping = np.asarray(ref["final_scheme"]["mapping"])
    classes = ref["final_scheme"]["classes"]
    y = mapping[manifest.point_labels()]
    a = run.cfg["attribution"]
    result = attribution.explain(model, x, y, names, classes, instance_ids=list(range(len(x))),
                                 per_class=a["per_class"], background_size=a["background_size"],
                                 n_permutations=a["n_permutations"], seed=run.seeds["attribution"],
                                 scale=a["scale"])
    prov = run.provenance("attrib", scale=a["scale"])
    result.to_csv(run.path("attribution"), provenance={k: json.dumps(v, sort_keys=True) for k, v in prov.items()})
    run.write_text("attribution_instances", result.instances_json(a["top_k"], prov))
    imp, sd = attribution.permutation_importance(model, x, y, "accuracy", a["importance_repeats"],
                                                 seed=run.seeds["attribution"])
    order = sorted(range(len(names)), key=lambda j: (-imp[j], j))
    _csv_with_provenance(run.path("importance"), ["feature", "importance", "std", "rank"],
                         [[names[j], f"{imp[j]:.6g}", f"{sd[j]:.6g}", r + 1] for r, j in enumerate(order)], prov)


def collect_artifacts(out) -> dict:
    out = Path(out)
    arts = {}
    for key in ("baseline", "curation", "refinement", "rescoring", "attribution_instances"):
        p = out / FILES[key]
        if p.exists():
            arts[key] = json.loads(p.read_text())
    p = out / FILES["attribution"]
    if p.exists():
        with open(p, newline="") as fh:
            arts["attribution"] = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return arts


def _pct(v):
    return "n/a" if v is None else f"{100.0 * v:.2f}%"


def emit_report(artifacts: dict) -> str:
    """Plain-text summary of whatever artifacts are present."""
    if not artifacts:
        raise InputError("no artifacts to report; run at least one analysis stage")
    lines = ["FLIm label-curation run summary", ""]
    prov = next((a.get("provenance") for a in artifacts.values() if isinstance(a, dict) and "provenance" in a), None)
    if prov:
        lines += [f"config sha256: {prov['config_sha256']}", f"seeds: {json.dumps(prov['seeds'], sort_keys=True)}", ""]
    b = artifacts.get("baseline")
    if b:
        lines.append("Baseline model selection (LOPO, score = (accuracy + mean AUC) / 2)")
        for kind in sorted(b["candidates"]):
            c = b["candidates"][kind]
            mark = " <- selected" if kind == b["selected"] else ""
            lines.append(f"  {kind:14s} accuracy {_pct(c['accuracy'])}  mean AUC {c['mean_auc']:.4f}"
                         f"  score {c['selection_score']:.4f}{mark}")
        lines.append("")
    cur = artifacts.get("curation")
    if cur:
        counts = cur["metrics"]["status_counts"]
        lines.append("Curation on baseline posteriors")
        lines.append(f"  low-confidence points: {_pct(cur['metrics']['lc_fraction'])}")
        lines.append(f"  margins: issue {counts['issue']}, indeterminate {counts['indeterminate']}, "
                     f"control {counts['control']}")
        lines.append("  thresholds: " + ", ".join(f"{n} {t:.3f}" for n, t in zip(cur["class_names"], cur["thresholds"])))
        issue = sorted(m for m, v in cur["margins"].items() if v["status"] == "issue")
        lines.append("  issue margins: " + (", ".join(issue) if issue else "none"))
        lines.append("")
    ref = artifacts.get("refinement")
    if ref:
        lines.append(f"Class refinement ({ref['strategy']}, model {ref['kind']})")
        lines.append("  scheme                                         classes  accuracy  LC points  kept")
        for step in ref["scheme_history"]:
            label = " | ".join(step["classes"])
            lines.append(f"  {label[:46]:46s} {len(step['classes']):7d}  {_pct(step['accuracy']):>8s}"
                         f"  {_pct(step['lc_fraction']):>9s}  {'yes' if step['accepted'] else 'no'}")
        traj = [len(s["classes"]) for s in ref["scheme_history"] if s["accepted"]]
        lines.append("  trajectory: " + " -> ".join(str(n) for n in traj))
        pr = ref.get("pruning")
        if pr:
            lines.append(f"  pruning: removed {pr['removed_points']} training points ({_pct(pr['removed_fraction'])}); "
                         f"accuracy {_pct(pr['accuracy_before'])} -> {_pct(pr['accuracy_after'])}")
            lines.append(f"  accuracy on non-LC test points (diagnostic): {_pct(pr['non_lc_test_accuracy_before'])}"
                         f" -> {_pct(pr['non_lc_test_accuracy_after'])}")
        lines.append("")
    rs = artifacts.get("rescoring")
    if rs:
        lines.append(f"Simulated re-scoring ({rs['policy']}) in the {len(rs['scheme'])}-class scheme")
        for g in ("issue", "control"):
            v = rs["groups"][g]
            lines.append(f"  {g:7s} margins {v['n_margins']:3d}  relabeled {len(v['relabeled']):3d}  "
                         f"accuracy {_pct(v['accuracy_before'])} -> {_pct(v['accuracy_after'])}")
        q = rs["flag_quality"]
        enr = "n/a" if q["enrichment"] is None else f"{q['enrichment']:.2f}x"
        lines.append(f"  corrupted margins {q['n_corrupted']} of {q['n_margins']}; issue enrichment {enr}; "
                     f"recall (issue or indeterminate) {_pct(q['recall_issue_or_indeterminate'])}")
        lines.append("")
    at = artifacts.get("attribution")
    if at:
        lines.append("Attribution (top features by mean |Shapley value|)")
        by_class = {}
        for row in at:
            by_class.setdefault(row["class"], []).append(row)
        for cname, rows in by_class.items():
            top = sorted(rows, key=lambda r: int(r["rank"]))[:5]
            lines.append(f"  {cname}: " + ", ".join(r["feature"] for r in top))
    else:
        lines.append("Attribution: not available (attrib stage not run)")
    return "\n".join(lines) + "\n"


def stage_report(run: Run) -> None:
    arts = collect_artifacts(run.out)
    if not arts:
        raise StageDependencyError("report", "at least one analysis artifact")
    run.write_text("summary", emit_report(arts))


STAGE_FUNCS = {
    "synth": stage_synth, "features": stage_features, "train": stage_train, "curate": stage_curate,
    "refine": stage_refine, "attrib": stage_attrib, "report": stage_report,
}


def run_pipeline(cfg: dict, stages=None, log=None) -> Path:
    """Run ``stages`` (default: the config's stage list) in pipeline order."""
    run = Run(cfg)
    todo = list(stages) if stages is not None else list(cfg["stages"])
    for name in todo:
        if name not in STAGE_FUNCS:
            raise ConfigError(f"stages: unknown stage {name!r}")
    for name in [s for s in STAGES if s in todo]:
        if log:
            log(f"[{name}]")
        STAGE_FUNCS[name](run)
    return run.out
