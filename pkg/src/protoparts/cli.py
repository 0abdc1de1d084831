"""Command-line orchestration: train, explain, eval, prototypes, synth,
validate-manifest.

Every option can also be set through an environment variable named
PROTOPARTS_<COMMAND>_<OPTION> (click's auto-envvar mechanism). Exit codes:
0 success, 2 configuration/validation, 3 numerical failure, 4 I/O failure.
All JSON outputs are written with sorted keys and no timestamps, so a rerun
with identical inputs is byte-identical.
"""

from __future__ import annotations

import functools
import json
import sys
import zipfile
from pathlib import Path

import click
import numpy as np
import torch

from .config import (SimilarityConfig, dump_run_config, ensure_valid,
                     load_run_config)
from .data import (generate_synthetic, load_and_split, load_entries,
                   load_image, load_manifest, validate_manifest_file, whiten)
from .descriptors import (DEFAULT_MAGNITUDES, PERTURBATION_KINDS,
                          global_descriptors, local_descriptors,
                          report_records)
from .errors import ConfigurationError, NumericalError, ValidationError
from .evaluation import (accuracy, cluster_statistics, default_embedder,
                         export_embeddings, frechet_distance, knn_eval,
                         write_embeddings_tsv)
from .losses import patch_distances
from .model import (classify, extract_features, extract_latents,
                    flatten_patches, load_checkpoint)
from .similarity import render_heatmap, similarity_maps, write_heatmap_png
from .training import (TrainingData, run_training, whitening_from_meta,
                       write_result_checkpoint)


def _guard(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigurationError, ValidationError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except NumericalError as exc:
            click.echo(f"numerical error: {exc}", err=True)
            sys.exit(3)
        except (OSError, zipfile.BadZipFile) as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(4)

    return wrapper


@click.group(context_settings={"auto_envvar_prefix": "PROTOPARTS"})
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Thread cap for batch computations.")
def main(jobs: int) -> None:
    torch.set_num_threads(max(1, jobs))


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _load_split_train(cfg):
    if not cfg.data.manifest:
        raise ConfigurationError("config has no data.manifest path")
    manifest = load_manifest(cfg.data.manifest)
    if len(manifest.class_names) != cfg.model.num_classes:
        raise ConfigurationError(
            f"manifest has {len(manifest.class_names)} classes, model expects "
            f"{cfg.model.num_classes}")
    train_entries, _ = load_and_split(manifest, cfg.data.train_fraction,
                                      cfg.training.seed)
    images, labels, ids = load_entries(manifest, train_entries,
                                       cfg.model.input_side)
    return manifest, TrainingData(images=images, labels=labels, image_ids=ids,
                                  class_names=manifest.class_names)


def _checkpoint_global_descriptors(result, data, cfg, per_class: int):
    """Similarity-weighted global descriptors over each class's train images
    (capped per class); stored in checkpoint metadata for explain bundles."""
    if per_class <= 0:
        return None
    m = cfg.model.prototypes_per_class
    records = []
    for k in range(cfg.model.num_classes):
        members = np.nonzero(data.labels == k)[0][:per_class]
        if members.size == 0:
            continue
        report = global_descriptors(
            data.images[members], [data.image_ids[i] for i in members],
            result.model, result.whitening, cfg.similarity)
        for rec in report_records(report, m):
            if rec["prototype"][1] == k:
                rec.pop("local", None)  # per-image values stay out of the checkpoint
                records.append(rec)
    return {"kinds": list(PERTURBATION_KINDS), "per_class_images": per_class,
            "records": records}


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None,
              help="Overrides training.seed from the config.")
@click.option("--output", type=click.Path(file_okay=False), default=None,
              help="Overrides output_dir from the config.")
@click.option("--descriptor-images", type=int, default=50, show_default=True,
              help="Train images per class for global descriptors (0 skips).")
@click.option("--print-config", is_flag=True,
              help="Print the effective config and exit without training.")
@_guard
def train(config_path, seed, output, descriptor_images, print_config):
    """Run the full training loop and write checkpoint plus logs."""
    cfg = load_run_config(config_path)
    if seed is not None:
        cfg.training.seed = seed
    if output is not None:
        cfg.output_dir = output
    ensure_valid(cfg)
    if print_config:
        click.echo(dump_run_config(cfg), nl=False)
        return
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, str(out / "effective_config.json"))
    manifest, data = _load_split_train(cfg)
    result = run_training(data, cfg, log_path=str(out / "training_log.jsonl"))
    gd = _checkpoint_global_descriptors(result, data, cfg, descriptor_images)
    write_result_checkpoint(result, data, str(out / "checkpoint.npz"),
                            extra_meta={"global_descriptors": gd})
    click.echo(f"selected cycle {result.best_cycle} epoch {result.best_epoch} "
               f"metric {result.best_metric:.6f}")
    click.echo(f"checkpoint: {out / 'checkpoint.npz'}")


def _nearest_prototype(volume, bank) -> tuple[int, float]:
    """(prototype index, min patch L2 distance); ties take the lowest index."""
    patches = volume.data.reshape(-1, volume.data.shape[2]).astype(np.float64)
    protos = bank.tensors.detach().numpy().astype(np.float64)
    d2 = ((patches[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    per_proto = d2.min(axis=0)
    idx = int(per_proto.argmin())
    return idx, float(np.sqrt(per_proto[idx]))


def _parse_kinds(text: str) -> list[str]:
    kinds = [k.strip().upper() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in PERTURBATION_KINDS]
    if bad or not kinds:
        raise ConfigurationError(
            f"kinds must be a comma-separated subset of {PERTURBATION_KINDS}")
    return kinds


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--output", required=True, type=click.Path(file_okay=False))
@click.option("--kinds", default=",".join(PERTURBATION_KINDS),
              show_default=True, help="Perturbation kinds for descriptors.")
@click.argument("images", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@_guard
def explain(checkpoint_path, output, kinds, images):
    """Per-image explanation bundle: prediction, P heatmaps, descriptors."""
    if not images:
        raise ConfigurationError("explain needs at least one image path")
    kind_list = _parse_kinds(kinds)
    model, meta, _ = load_checkpoint(checkpoint_path)
    stats = whitening_from_meta(meta)
    sim_cfg = SimilarityConfig(heatmap_side=model.cfg.input_side)
    class_names = meta.get("class_names") or [
        str(k) for k in range(model.cfg.num_classes)]
    proj = {entry["prototype"]: entry
            for entry in (model.bank.projection_meta or [])}
    out_root = Path(output)
    out_root.mkdir(parents=True, exist_ok=True)
    m = model.cfg.prototypes_per_class
    for i, image_path in enumerate(images):
        stem = Path(image_path).stem
        bundle = out_root / f"{i:03d}_{stem}"
        bundle.mkdir(parents=True, exist_ok=True)
        raw = load_image(image_path, model.cfg.input_side)
        volume = extract_features(model, whiten(raw, stats))
        sim = similarity_maps(volume, model.bank, sim_cfg)
        pred = classify(volume, model.bank, model.head, sim_cfg)
        nearest, nearest_d = _nearest_prototype(volume, model.bank)
        heatmap_entries = []
        for p in range(model.cfg.num_prototypes):
            hm = render_heatmap(sim.maps[p], sim_cfg, prototype_index=p)
            png_name = f"pp{p:02d}.png"
            value_range = write_heatmap_png(hm, str(bundle / png_name))
            heatmap_entries.append({
                "prototype_index": p,
                "pooled_score": float(sim.pooled[p]),
                "bbox": [int(v) for v in hm.bbox],
                "argmax": [int(v) for v in sim.argmax_coords[p]],
                "value_range": list(value_range),
                "file": png_name,
            })
        prediction = {
            "image_id": stem,
            "image_path": str(image_path),
            "predicted_class": int(pred.predicted_class),
            "predicted_class_name": class_names[int(pred.predicted_class)],
            "probabilities": [float(v) for v in pred.probabilities],
            "logits": [float(v) for v in pred.logits],
            "nearest_prototype": {
                "index": nearest,
                "m": nearest % m,
                "k": nearest // m,
                "class_name": class_names[nearest // m],
                "distance": nearest_d,
                "source": proj.get(nearest),
            },
            "heatmaps": heatmap_entries,
        }
        _write_json(bundle / "prediction.json", prediction)
        local = local_descriptors(raw, model, stats, sim_cfg,
                                  kinds=kind_list, image_id=stem)
        descriptors = {
            "image_id": stem,
            "kinds": kind_list,
            "magnitudes": {k: DEFAULT_MAGNITUDES[k] for k in kind_list},
            "baseline": [float(v) for v in local.baseline],
            "local": {k: [float(v) for v in local.values[k]]
                      for k in kind_list},
            "global": meta.get("global_descriptors"),
        }
        _write_json(bundle / "descriptors.json", descriptors)
    click.echo(f"wrote {len(images)} bundle(s) under {out_root}")


@main.command(name="eval")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--output", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True,
              help="Fold assignment seed for the kNN protocol.")
@_guard
def eval_cmd(checkpoint_path, manifest_path, output, seed):
    """Evaluate a checkpoint on a manifest; writes report and embeddings."""
    model, meta, extras = load_checkpoint(checkpoint_path)
    stats = whitening_from_meta(meta)
    manifest = load_manifest(manifest_path)
    if meta.get("class_names") and manifest.class_names != meta["class_names"]:
        raise ValidationError(
            "manifest class names do not match the checkpoint's")
    entries = manifest.entries
    images, labels, ids = load_entries(manifest, entries, model.cfg.input_side)
    whited = whiten(images, stats).transpose(0, 3, 1, 2)
    with torch.no_grad():
        feats = extract_latents(model, torch.from_numpy(np.ascontiguousarray(whited)))
        patches = flatten_patches(feats)
        dists = patch_distances(patches, model.bank.tensors)
        pooled_d = dists.min(dim=2).values
        pooled_s = torch.log((pooled_d + 1.0)
                             / (pooled_d + SimilarityConfig().epsilon))
        logits = model.head(pooled_s).numpy()
    preds = np.argmax(logits, axis=1)
    acc = accuracy(preds, labels, model.cfg.num_classes)
    patches_np = patches.numpy()
    protos = model.bank.tensors.detach().numpy()
    table = export_embeddings(patches_np, protos, labels, preds, ids)
    knn = knn_eval(table.vectors, table.labels, k=5, folds=5, seed=seed)
    fid = None
    if "prototype_crops" in extras:
        fid = frechet_distance(default_embedder(extras["prototype_crops"]),
                               default_embedder(images))
    raw_stats = cluster_statistics(patches_np, labels, protos,
                                   model.bank.class_of)
    cls_stats = {manifest.class_names[k]: v for k, v in raw_stats.items()}
    report = {
        "per_class": {manifest.class_names[k]: v
                      for k, v in acc["per_class"].items()},
        "weighted": acc["weighted"],
        "confusion": acc["confusion"].tolist(),
        "knn": knn,
        "fid": fid,
        "cluster_stats": cls_stats,
    }
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_report.json", report)
    write_embeddings_tsv(table, str(out / "embeddings.tsv"))
    click.echo(f"weighted accuracy {acc['weighted']:.4f}; report in {out}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--output", required=True, type=click.Path(file_okay=False))
@_guard
def prototypes(checkpoint_path, output):
    """Prototype gallery: source-patch crops plus per-class distance stats."""
    model, meta, extras = load_checkpoint(checkpoint_path)
    if "prototype_crops" not in extras:
        raise ValidationError(
            "checkpoint has no prototype crops (projection metadata missing "
            "or input side not divisible by the grid)")
    crops = extras["prototype_crops"]
    class_names = meta.get("class_names") or [
        str(k) for k in range(model.cfg.num_classes)]
    m = model.cfg.prototypes_per_class
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image
    gallery = []
    for p in range(crops.shape[0]):
        k, mm = p // m, p % m
        name = f"class{k:02d}_{class_names[k]}_pp{mm}.png"
        pixels = np.clip(np.round(crops[p] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(out / name)
        entry = {"prototype": p, "m": mm, "k": k,
                 "class_name": class_names[k], "file": name}
        if model.bank.projection_meta:
            entry["source"] = model.bank.projection_meta[p]
        gallery.append(entry)
    protos = model.bank.tensors.detach().numpy().astype(np.float64)
    stats = {}
    for k in range(model.cfg.num_classes):
        sub = protos[k * m:(k + 1) * m]
        if m < 2:
            stats[class_names[k]] = None
            continue
        iu = np.triu_indices(m, k=1)
        pd = np.sqrt(((sub[:, None, :] - sub[None, :, :]) ** 2).sum(axis=2))[iu]
        stats[class_names[k]] = {
            "mean": float(pd.mean()), "std": float(pd.std()),
            "count": int(pd.size),
        }
    _write_json(out / "gallery.json", {"prototypes": gallery,
                                       "pairwise_stats": stats})
    click.echo(f"wrote {crops.shape[0]} prototype crops to {out}")


@main.command()
@click.option("--classes", type=int, default=6, show_default=True)
@click.option("--per-class", type=int, default=200, show_default=True)
@click.option("--side", type=int, default=28, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", required=True, type=click.Path(file_okay=False))
@_guard
def synth(classes, per_class, side, seed, output):
    """Generate the synthetic attribute-separable dataset."""
    manifest = generate_synthetic(classes, per_class, side, seed, output)
    click.echo(f"wrote {len(manifest.entries)} images; manifest: "
               f"{Path(output) / 'manifest.jsonl'}")


@main.command(name="validate-manifest")
@click.argument("manifest_path", type=click.Path(exists=True, dir_okay=False))
@_guard
def validate_manifest(manifest_path):
    """Check a manifest file; exit 2 listing every problem if invalid."""
    problems = validate_manifest_file(manifest_path)
    if problems:
        for p in problems:
            click.echo(f"problem: {p}", err=True)
        sys.exit(2)
    click.echo("manifest ok")


if __name__ == "__main__":
    main()
