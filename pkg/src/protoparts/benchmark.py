"""Desk-scale benchmark harness: small synthetic-dataset training runs used
by the acceptance suite and the experiment scripts.

Protocol: simple-cnn backbone on 28x28 synthetic images (6 classes, 200
images each), 16-dim latent on a 7x7 grid, 3 prototypes per class, 3
training cycles, augmentation off, shared split seed. One run per (loss
regime, seed); runs are cached on disk keyed by a config digest so suite
reruns do not retrain. Metric extraction (test accuracy, latent kNN,
prototype diversity, source-patch Frechet distance) happens once per run
and lands in the cached metrics file.
"""

from __future__ import annotations

import hashlib
import json
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import (AugmentationPolicy, DataConfig, ICNNConfig, LossWeights,
                     ModelConfig, RunConfig, SimilarityConfig, TrainingConfig,
                     to_dict)
from .data import (DatasetManifest, generate_synthetic, load_and_split,
                   load_entries, load_manifest)
from .descriptors import global_descriptors
from .evaluation import (default_embedder, export_embeddings, frechet_distance,
                         knn_eval)
from .losses import patch_distances
from .model import (ProtoPartsModel, extract_latents, flatten_patches,
                    load_checkpoint)
from .training import (TrainingData, project_prototypes, run_training,
                       whitening_from_meta)

TOY_SIDE = 28
TOY_CLASSES = 6
TOY_PER_CLASS = 200
TOY_DEPTH = 16
TOY_GRID = 7
TOY_PROTOS_PER_CLASS = 3
TOY_DATASET_SEED = 0
TOY_SPLIT_SEED = 0
TOY_SEEDS = (0, 1, 2, 3, 4)
TOY_REGIMES = ("CE", "ProtoPNet", "CIC")
HUE_CLASS_NAMES = ("hue-red", "hue-green", "hue-blue")


def toy_model_config() -> ModelConfig:
    return ModelConfig(num_classes=TOY_CLASSES,
                       prototypes_per_class=TOY_PROTOS_PER_CLASS,
                       backbone_id="simple-cnn", input_side=TOY_SIDE,
                       latent_depth=TOY_DEPTH, grid_w=TOY_GRID, grid_h=TOY_GRID)


def toy_run_config(regime: str, seed: int, manifest: str | None = None,
                   output_dir: str = ".") -> RunConfig:
    # Default epoch/optimizer settings. SGD matters for the regime contrast:
    # pure-CE prototype gradients die once the head saturates, so under SGD
    # the CE regime's prototypes freeze into the near-duplicate cluster they
    # were first pulled into, while the ICNN term keeps feeding the CIC
    # regime's prototypes spread gradients for the whole run.
    return RunConfig(
        model=toy_model_config(),
        training=TrainingConfig(
            cycles=3, extractor_epochs=10, warmup_epochs=5, head_epochs=20,
            learning_rate=0.01, batch_size=32, loss_regime=regime,
            loss_weights=LossWeights(), icnn=ICNNConfig(), seed=seed,
            optimizer="sgd", selection_fraction=0.1,
        ),
        similarity=SimilarityConfig(),
        augmentation=AugmentationPolicy(apply_probability=0.0),
        data=DataConfig(manifest=manifest, train_fraction=0.8),
        output_dir=output_dir,
    )


def _dataset_params() -> dict:
    from .data import GENERATOR_VERSION
    return {"num_classes": TOY_CLASSES, "per_class": TOY_PER_CLASS,
            "side": TOY_SIDE, "seed": TOY_DATASET_SEED,
            "generator_version": GENERATOR_VERSION}


def toy_dataset(cache_root: Path) -> Path:
    """Generate (or reuse) the benchmark dataset; returns the manifest path."""
    root = Path(cache_root) / "dataset"
    marker = root / "params.json"
    manifest_path = root / "manifest.jsonl"
    params = _dataset_params()
    if marker.exists() and manifest_path.exists():
        if json.loads(marker.read_text()) == params:
            return manifest_path
    root.mkdir(parents=True, exist_ok=True)
    generate_synthetic(params["num_classes"], params["per_class"],
                       params["side"], params["seed"], str(root))
    marker.write_text(json.dumps(params, sort_keys=True))
    return manifest_path


def toy_training_data(manifest_path: Path) -> tuple[TrainingData, list, DatasetManifest]:
    manifest = load_manifest(str(manifest_path))
    train_entries, test_entries = load_and_split(manifest, 0.8, TOY_SPLIT_SEED)
    images, labels, ids = load_entries(manifest, train_entries, TOY_SIDE)
    data = TrainingData(images=images, labels=labels, image_ids=ids,
                        class_names=manifest.class_names)
    return data, test_entries, manifest


def run_digest(run_cfg: RunConfig) -> str:
    payload = {
        "model": to_dict(run_cfg.model),
        "training": to_dict(run_cfg.training),
        "similarity": to_dict(run_cfg.similarity),
        "augmentation": to_dict(run_cfg.augmentation),
        "dataset": _dataset_params(),
        "split_seed": TOY_SPLIT_SEED,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def evaluate_test_set(model: ProtoPartsModel, stats, images: np.ndarray,
                      labels: np.ndarray, ids: list[str],
                      sim_cfg: SimilarityConfig):
    """Batched head inference on raw images: accuracy plus the embedding
    table used by the latent kNN protocol."""
    from .data import whiten
    whited = whiten(images, stats).transpose(0, 3, 1, 2)
    tensor = torch.from_numpy(np.ascontiguousarray(whited))
    with torch.no_grad():
        feats = extract_latents(model, tensor)
        patches = flatten_patches(feats)
        dists = patch_distances(patches, model.bank.tensors)
        pooled_d = dists.min(dim=2).values
        pooled_s = torch.log((pooled_d + 1.0) / (pooled_d + sim_cfg.epsilon))
        logits = model.head(pooled_s).numpy()
    preds = np.argmax(logits, axis=1)
    acc = float(np.mean(preds == labels))
    table = export_embeddings(patches.numpy(),
                              model.bank.tensors.detach().numpy(),
                              labels, preds, ids)
    return acc, table


def class_prototype_diversity(model: ProtoPartsModel) -> list[float]:
    """Per class: mean pairwise L2 distance among the class's prototypes."""
    protos = model.bank.tensors.detach().numpy().astype(np.float64)
    m = model.cfg.prototypes_per_class
    out = []
    for k in range(model.cfg.num_classes):
        sub = protos[k * m:(k + 1) * m]
        dists = [float(np.linalg.norm(sub[i] - sub[j]))
                 for i in range(m) for j in range(i + 1, m)]
        out.append(float(np.mean(dists)) if dists else 0.0)
    return out


def crop_fid(crops: np.ndarray, train_images: np.ndarray) -> float:
    """Frechet distance between prototype source crops and the train set,
    both embedded with the fixed random-projection embedder."""
    return frechet_distance(default_embedder(crops),
                            default_embedder(train_images))


def pooled_crop_fid(records: list[ToyRunRecord],
                    train_images: np.ndarray) -> float:
    """One Frechet distance for a regime: prototype crops pooled across the
    regime's runs. A single run yields only K*M crops, far too few for a
    stable covariance estimate, so per-run values are dominated by sampling
    noise; pooling the seeds gives one usable sample per regime."""
    crops = [rec.load_model()[2]["prototype_crops"] for rec in records]
    return crop_fid(np.concatenate(crops, axis=0), train_images)


def _projection_checker(results: list) -> callable:
    """Post-projection hook: verify every prototype is bit-identical to a
    training patch and that an immediate re-projection is a no-op. Model
    state is restored bitwise afterwards, so the run is unaffected."""

    def hook(model, cycle, ctx):
        protos = model.bank.tensors.detach().numpy().copy()
        meta_before = [dict(m) for m in model.bank.projection_meta]
        feats = extract_latents(model, ctx["images"])
        patches = flatten_patches(feats).numpy()
        pos = {img_id: i for i, img_id in enumerate(ctx["image_ids"])}
        grid_h = model.cfg.grid_h
        bit_identical = all(
            np.array_equal(
                protos[m["prototype"]],
                patches[pos[m["image_id"]], m["w"] * grid_h + m["h"]])
            for m in meta_before)
        meta_after = project_prototypes(model, ctx["images"], ctx["labels"],
                                        ctx["image_ids"], ctx["class_names"])
        # The recorded distance is pre-replacement, so a no-op re-projection
        # legitimately reports 0.0 there; compare the source coordinates and
        # require the fresh distances to vanish.
        strip = lambda meta: [{k: v for k, v in m.items() if k != "distance"}
                              for m in meta]
        noop = (np.array_equal(model.bank.tensors.detach().numpy(), protos)
                and strip(meta_after) == strip(meta_before)
                and all(m["distance"] == 0.0 for m in meta_after))
        with torch.no_grad():
            model.bank.tensors.copy_(torch.from_numpy(protos))
        model.bank.projection_meta = meta_before
        results.append({"cycle": cycle, "bit_identical": bool(bit_identical),
                        "reprojection_noop": bool(noop)})

    return hook


@dataclass
class ToyRunRecord:
    regime: str
    seed: int
    run_dir: Path
    metrics: dict

    def load_model(self):
        model, meta, extras = load_checkpoint(str(self.run_dir / "checkpoint.npz"))
        return model, meta, extras

    def log_bytes(self) -> bytes:
        return (self.run_dir / "training_log.jsonl").read_bytes()


def execute_toy_run(regime: str, seed: int, cache_root: Path, *,
                    force: bool = False,
                    run_dir: Path | None = None) -> ToyRunRecord:
    cache_root = Path(cache_root)
    manifest_path = toy_dataset(cache_root)
    run_cfg = toy_run_config(regime, seed, manifest=str(manifest_path))
    digest = run_digest(run_cfg)
    if run_dir is None:
        run_dir = cache_root / f"{regime}-seed{seed}"
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.json"
    needed = [metrics_path, run_dir / "checkpoint.npz",
              run_dir / "training_log.jsonl"]
    if not force and all(p.exists() for p in needed):
        metrics = json.loads(metrics_path.read_text())
        if metrics.get("digest") == digest:
            return ToyRunRecord(regime, seed, run_dir, metrics)

    run_dir.mkdir(parents=True, exist_ok=True)
    data, test_entries, manifest = toy_training_data(manifest_path)
    projection_checks: list = []
    hook = _projection_checker(projection_checks) if regime == "CIC" and seed == 0 else None
    started = time.monotonic()
    result = run_training(
        data, run_cfg,
        log_path=str(run_dir / "training_log.jsonl"),
        checkpoint_path=str(run_dir / "checkpoint.npz"),
        post_projection_hook=hook,
    )
    elapsed = time.monotonic() - started

    test_images, test_labels, test_ids = load_entries(manifest, test_entries,
                                                      TOY_SIDE)
    acc, table = evaluate_test_set(result.model, result.whitening, test_images,
                                   test_labels, test_ids, run_cfg.similarity)
    knn = knn_eval(table.vectors, table.labels, k=5, folds=5, seed=0)
    _, _, extras = load_checkpoint(str(run_dir / "checkpoint.npz"))
    fid = crop_fid(extras["prototype_crops"], data.images)
    log_bytes = (run_dir / "training_log.jsonl").read_bytes()
    metrics = {
        "digest": digest,
        "regime": regime,
        "seed": seed,
        "test_accuracy": acc,
        "knn": knn,
        "selection_metric": result.best_metric,
        "best_cycle": result.best_cycle,
        "best_epoch": result.best_epoch,
        "prototype_diversity": class_prototype_diversity(result.model),
        "crop_fid": fid,
        "projection_checks": projection_checks or None,
        "train_seconds": elapsed,
        "log_sha256": hashlib.sha256(log_bytes).hexdigest(),
        "class_names": data.class_names,
    }
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return ToyRunRecord(regime, seed, run_dir, metrics)


def toy_suite(cache_root: Path, regimes=TOY_REGIMES,
              seeds=TOY_SEEDS) -> dict[str, list[ToyRunRecord]]:
    return {regime: [execute_toy_run(regime, s, cache_root) for s in seeds]
            for regime in regimes}


def determinism_audit(cache_root: Path) -> dict:
    """Run the reference config twice (one cached run plus one forced fresh
    run) and compare training-log bytes and selected metrics."""
    cache_root = Path(cache_root)
    base = execute_toy_run("CIC", 0, cache_root)
    audit_path = cache_root / "determinism.json"
    if audit_path.exists():
        audit = json.loads(audit_path.read_text())
        if audit.get("digest") == base.metrics["digest"]:
            return audit
    with tempfile.TemporaryDirectory(dir=str(cache_root)) as tmp:
        fresh = execute_toy_run("CIC", 0, cache_root, force=True,
                                run_dir=Path(tmp) / "rerun")
        audit = {
            "digest": base.metrics["digest"],
            "logs_identical": base.log_bytes() == fresh.log_bytes(),
            "metrics_equal": base.metrics["selection_metric"]
            == fresh.metrics["selection_metric"],
            "metric_base": base.metrics["selection_metric"],
            "metric_fresh": fresh.metrics["selection_metric"],
        }
    audit_path.write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
    return audit


def descriptor_audit(cache_root: Path, seeds=TOY_SEEDS,
                     per_class_limit: int = 80) -> dict:
    """Global-descriptor audit over the CIC runs: for every prototype of a
    hue-defined class, is the hue perturbation the maximal-magnitude global
    descriptor, and do the weighted-mean bounds hold everywhere."""
    cache_root = Path(cache_root)
    runs = [execute_toy_run("CIC", s, cache_root) for s in seeds]
    key = hashlib.sha256(json.dumps(
        [r.metrics["digest"] for r in runs] + [per_class_limit]
    ).encode()).hexdigest()
    audit_path = cache_root / "descriptors.json"
    if audit_path.exists():
        audit = json.loads(audit_path.read_text())
        if audit.get("key") == key:
            return audit

    manifest_path = toy_dataset(cache_root)
    data, _, manifest = toy_training_data(manifest_path)
    sim_cfg = SimilarityConfig()
    hue_classes = [i for i, name in enumerate(manifest.class_names)
                   if name in HUE_CLASS_NAMES]
    hits = 0
    total = 0
    bounds_ok = True
    m = TOY_PROTOS_PER_CLASS
    per_run = []
    for rec in runs:
        model, meta, _ = rec.load_model()
        stats = whitening_from_meta(meta)
        run_hits = []
        for k in range(TOY_CLASSES):
            members = np.nonzero(data.labels == k)[0][:per_class_limit]
            report = global_descriptors(
                data.images[members], [data.image_ids[i] for i in members],
                model, stats, sim_cfg)
            for kind in report.kinds:
                loc, glob = report.local[kind], report.global_values[kind]
                for p in range(k * m, (k + 1) * m):
                    if glob[p] is None:
                        continue
                    lo, hi = loc[:, p].min(), loc[:, p].max()
                    if not (lo - 1e-9 <= glob[p] <= hi + 1e-9):
                        bounds_ok = False
            if k in hue_classes:
                for p in range(k * m, (k + 1) * m):
                    # Rank by signed drop: a negative descriptor means the
                    # perturbation moved the image closer to the prototype,
                    # which is the opposite of relying on that attribute.
                    vals = {kind: report.global_values[kind][p]
                            for kind in report.kinds
                            if report.global_values[kind][p] is not None}
                    best = max(vals, key=lambda kk: (vals[kk], kk == "H"))
                    total += 1
                    if best == "H":
                        hits += 1
                        run_hits.append(p)
        per_run.append({"seed": rec.seed, "h_max_prototypes": run_hits})
    audit = {
        "key": key,
        "hits": hits,
        "total": total,
        "fraction": hits / total if total else 0.0,
        "bounds_ok": bounds_ok,
        "per_run": per_run,
        "per_class_limit": per_class_limit,
    }
    audit_path.write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
    return audit


def default_cache_root() -> Path:
    """Shared on-disk run cache. Override with PROTOPARTS_TOY_CACHE."""
    import os
    env = os.environ.get("PROTOPARTS_TOY_CACHE")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / ".toy_cache"
