"""Three-phase training: extractor epochs with a prototype-only warmup,
prototype projection onto training patches, and head-only epochs, iterated
for a configured number of cycles with global best-checkpoint selection.

Phase contracts: the head only changes at initialization and in phase 3;
prototypes only in phase 1 and at projection; backbone/adapter only in
post-warmup phase-1 epochs. Selection evaluates the composite loss on a
held-out stratified slice of the training split after every phase-3 epoch
and keeps the globally smallest value (ties keep the earliest).

Determinism: all randomness flows from the config seed (torch init, batch
shuffling, augmentation draws, holdout split), so identical configs produce
byte-identical training logs.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ModelConfig, RunConfig
from .data import WhiteningStats, augment, compute_whitening, whiten
from .errors import (ConfigurationError, NumericalError, ProjectionError,
                     ValidationError)
from .losses import (LossReport, ce_loss, cluster_cost, composite_loss,
                     l1_term, min_same_class_distance, patch_distances,
                     separation_cost)
from .icnn import icnn_from_distances, icnn_loss
from .model import (ProtoPartsModel, extract_latents, flatten_patches,
                    save_checkpoint, training_config_digest)

_SPLIT_STREAM = 7081
_AUG_STREAM = 3511
_PERM_STREAM = 9433


@dataclass
class TrainingData:
    """In-memory training split: raw [0,1] images plus labels and ids."""

    images: np.ndarray          # (N, S, S, 3) float32
    labels: np.ndarray          # (N,) int64
    image_ids: list[str]
    class_names: list[str]


@dataclass
class TrainingResult:
    model: ProtoPartsModel
    best_metric: float
    best_cycle: int
    best_epoch: int
    log_lines: list[str]
    whitening: WhiteningStats
    core_indices: np.ndarray
    holdout_indices: np.ndarray
    class_names: list[str]
    checkpoint_meta: dict = field(default_factory=dict)


def initialize(model_cfg: ModelConfig, seed: int) -> ProtoPartsModel:
    """Seeded construction: backbone pretrained or random (simple-cnn),
    adapter Kaiming, prototypes uniform in [0, 1], head 1/0 class pattern."""
    torch.manual_seed(seed)
    model = ProtoPartsModel(model_cfg)
    for layer in model.adapter:
        if isinstance(layer, torch.nn.Conv2d):
            torch.nn.init.kaiming_normal_(layer.weight, nonlinearity="relu")
            torch.nn.init.zeros_(layer.bias)
    with torch.no_grad():
        model.bank.tensors.uniform_(0.0, 1.0)
    model.head.paper_init(model_cfg.prototypes_per_class)
    return model


def _set_trainable(model: ProtoPartsModel, *, extractor: bool, prototypes: bool,
                   head: bool) -> None:
    for p in model.backbone.parameters():
        p.requires_grad_(extractor)
    for p in model.adapter.parameters():
        p.requires_grad_(extractor)
    model.bank.tensors.requires_grad_(prototypes)
    model.head.weight.requires_grad_(head)
    model.head.bias.requires_grad_(head)


def _make_optimizer(model: ProtoPartsModel, cfg) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate)


def _one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels, num_classes).to(torch.float32)


def _batch_report(model: ProtoPartsModel, images: torch.Tensor,
                  labels: torch.Tensor, run_cfg: RunConfig) -> LossReport:
    """Full-graph composite loss of one whitened batch."""
    tc = run_cfg.training
    feats = model.extract(images)
    patches = flatten_patches(feats)
    dists = patch_distances(patches, model.bank.tensors)  # (B, P, L)
    pooled_d = dists.min(dim=2).values
    pooled_s = torch.log((pooled_d + 1.0) / (pooled_d + run_cfg.similarity.epsilon))
    logits = model.head(pooled_s)
    probs = torch.softmax(logits, dim=1)
    onehot = _one_hot(labels, run_cfg.model.num_classes)
    parts: dict = {"ce": ce_loss(probs, onehot)}
    class_of = model.bank.class_index
    if tc.loss_regime in ("ProtoPNet", "PPIC"):
        parts["cls"] = cluster_cost(dists, labels, class_of)
        parts["sep"] = separation_cost(dists, labels, class_of)
        parts["l1"] = l1_term(model.head.weight, model.extractor_parameters(),
                              head_only=tc.l1_head_only)
    if tc.loss_regime in ("CIC", "PPIC"):
        _, patch_idx = min_same_class_distance(dists, labels, class_of)
        d_star = dists.gather(2, patch_idx[:, None, None].expand(-1, dists.shape[1], -1))
        scores = icnn_from_distances(
            d_star.squeeze(2), labels, class_of, tc.icnn,
            tc.icnn.resolved_size(run_cfg.model.prototypes_per_class))
        parts["icnn"] = icnn_loss(scores.mean(), tc.icnn)
    return composite_loss(tc.loss_regime, tc.loss_weights, **parts)


def _finite_or_raise(report: LossReport, where: str) -> None:
    if not torch.isfinite(report.total):
        raise NumericalError(
            f"non-finite loss at {where}: components {report.components}"
        )


class _EpochMeans:
    """Sample-weighted running means of loss components."""

    def __init__(self) -> None:
        self.sums: dict[str, float] = {}
        self.total = 0.0
        self.count = 0

    def add(self, report: LossReport, batch_size: int) -> None:
        for name, value in report.components.items():
            self.sums[name] = self.sums.get(name, 0.0) + value * batch_size
        self.total += float(report.total.detach()) * batch_size
        self.count += batch_size

    def means(self) -> tuple[dict[str, float], float]:
        comps = {k: v / self.count for k, v in self.sums.items()}
        return comps, self.total / self.count


class _Logger:
    def __init__(self, log_path: str | None):
        self.lines: list[str] = []
        self._fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def write(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        self.lines.append(line)
        if self._fh is not None:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _stratified_holdout(labels: np.ndarray, fraction: float,
                        seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(core_indices, holdout_indices); empty fraction returns all/all."""
    if fraction <= 0:
        all_idx = np.arange(labels.shape[0])
        return all_idx, all_idx
    rng = np.random.default_rng([seed, _SPLIT_STREAM])
    holdout: list[int] = []
    for cls in np.unique(labels):
        members = np.nonzero(labels == cls)[0]
        if members.shape[0] < 2:
            continue  # keep lone examples in the core so projection can run
        n_hold = max(1, int(round(fraction * members.shape[0])))
        n_hold = min(n_hold, members.shape[0] - 1)
        perm = rng.permutation(members.shape[0])
        holdout.extend(members[perm[:n_hold]].tolist())
    if not holdout:
        all_idx = np.arange(labels.shape[0])
        return all_idx, all_idx
    hold = np.sort(np.asarray(holdout, dtype=np.int64))
    mask = np.ones(labels.shape[0], dtype=bool)
    mask[hold] = False
    return np.nonzero(mask)[0], hold


def project_prototypes(model: ProtoPartsModel, images_t: torch.Tensor,
                       labels: np.ndarray, image_ids: list[str],
                       class_names: list[str]) -> list[dict]:
    """Replace every prototype with its nearest same-class training patch.

    Candidates are ordered by (image_id, w, h); the first minimum wins, and
    the copied patch tensor is bit-identical to the extracted latent. The
    recorded distance is the L2 norm at the minimum.
    """
    feats = extract_latents(model, images_t)
    patches = flatten_patches(feats).cpu().numpy()  # (N, L, D) float32
    protos = model.bank.tensors.detach().cpu().numpy()
    class_of = model.bank.class_of
    grid_h = model.cfg.grid_h
    meta: list[dict] = []
    by_class: dict[int, np.ndarray] = {}
    for cls in range(model.cfg.num_classes):
        members = np.nonzero(labels == cls)[0]
        order = sorted(members.tolist(), key=lambda i: image_ids[i])
        by_class[cls] = np.asarray(order, dtype=np.int64)
    new_tensors = protos.copy()
    for p in range(protos.shape[0]):
        cls = int(class_of[p])
        cand = by_class[cls]
        if cand.size == 0:
            raise ProjectionError(
                f"class {class_names[cls]!r} has no training images to project onto"
            )
        cand_patches = patches[cand]  # (n_c, L, D)
        diff = cand_patches.astype(np.float64) - protos[p].astype(np.float64)
        d2 = np.square(diff).sum(axis=2)  # (n_c, L)
        flat = d2.ravel()
        best = int(flat.argmin())  # first occurrence: lowest (image_id, w, h)
        img_pos, patch_l = divmod(best, patches.shape[1])
        src = int(cand[img_pos])
        new_tensors[p] = patches[src, patch_l]
        w, h = patch_l // grid_h, patch_l % grid_h
        meta.append({
            "prototype": p,
            "m": p % model.cfg.prototypes_per_class,
            "k": cls,
            "image_id": image_ids[src],
            "w": int(w),
            "h": int(h),
            "distance": float(np.sqrt(flat[best])),
        })
    with torch.no_grad():
        model.bank.tensors.copy_(torch.from_numpy(new_tensors))
    model.bank.projection_meta = meta
    return meta


def _phase1(model: ProtoPartsModel, core_images: torch.Tensor,
            core_raw: np.ndarray, core_labels: torch.Tensor,
            run_cfg: RunConfig, stats: WhiteningStats, cycle: int,
            logger: _Logger, aug_rng: np.random.Generator) -> None:
    tc = run_cfg.training
    n = core_images.shape[0]
    augmenting = run_cfg.augmentation.apply_probability > 0
    for t in range(1, tc.extractor_epochs + 1):
        _set_trainable(model, extractor=t > tc.warmup_epochs, prototypes=True,
                       head=False)
        optimizer = _make_optimizer(model, tc)
        perm_rng = np.random.default_rng([tc.seed, _PERM_STREAM, cycle, 1, t])
        perm = perm_rng.permutation(n)
        means = _EpochMeans()
        for start in range(0, n, tc.batch_size):
            idx = perm[start:start + tc.batch_size]
            if augmenting:
                batch_np = np.stack([
                    whiten(augment(core_raw[i], run_cfg.augmentation, aug_rng), stats)
                    for i in idx
                ])
                batch = torch.from_numpy(batch_np.transpose(0, 3, 1, 2))
            else:
                batch = core_images[idx]
            report = _batch_report(model, batch, core_labels[idx], run_cfg)
            _finite_or_raise(report, f"cycle {cycle} phase 1 epoch {t}")
            optimizer.zero_grad()
            report.total.backward()
            optimizer.step()
            means.add(report, len(idx))
        comps, total = means.means()
        logger.write({"cycle": cycle, "phase": 1, "epoch": t,
                      "components": comps, "total": total,
                      "selection_metric": None})


@dataclass
class _Phase3Cache:
    pooled: torch.Tensor          # (N, P) similarity scores, no grad
    icnn_scores: torch.Tensor     # (N,) per-sample scores, no grad
    cls_per_sample: torch.Tensor  # (N,)
    sep_per_sample: torch.Tensor  # (N,)
    extractor_l1: float


def _build_phase3_cache(model: ProtoPartsModel, images: torch.Tensor,
                        labels: torch.Tensor, run_cfg: RunConfig) -> _Phase3Cache:
    tc = run_cfg.training
    with torch.no_grad():
        feats = extract_latents(model, images)
        patches = flatten_patches(feats)
        dists = patch_distances(patches, model.bank.tensors)
        pooled_d = dists.min(dim=2).values
        pooled = torch.log((pooled_d + 1.0) / (pooled_d + run_cfg.similarity.epsilon))
        class_of = model.bank.class_index
        same = class_of[None, :] == labels[:, None]
        cls_ps = dists.masked_fill(~same[:, :, None], float("inf")).flatten(1).min(dim=1).values
        sep_ps = dists.masked_fill(same[:, :, None], float("inf")).flatten(1).min(dim=1).values
        _, patch_idx = min_same_class_distance(dists, labels, class_of)
        d_star = dists.gather(2, patch_idx[:, None, None].expand(-1, dists.shape[1], -1))
        scores = icnn_from_distances(
            d_star.squeeze(2), labels, class_of, tc.icnn,
            tc.icnn.resolved_size(run_cfg.model.prototypes_per_class))
        ext_l1 = float(sum(p.abs().sum() for p in model.extractor_parameters()))
    return _Phase3Cache(pooled=pooled, icnn_scores=scores, cls_per_sample=cls_ps,
                        sep_per_sample=sep_ps, extractor_l1=ext_l1)


def _report_from_cache(model: ProtoPartsModel, cache: _Phase3Cache,
                       idx: torch.Tensor | None, labels: torch.Tensor,
                       run_cfg: RunConfig) -> LossReport:
    """Composite loss of a cached-batch slice; graph only through the head."""
    tc = run_cfg.training
    pooled = cache.pooled if idx is None else cache.pooled[idx]
    labs = labels if idx is None else labels[idx]
    logits = model.head(pooled)
    probs = torch.softmax(logits, dim=1)
    parts: dict = {"ce": ce_loss(probs, _one_hot(labs, run_cfg.model.num_classes))}
    if tc.loss_regime in ("ProtoPNet", "PPIC"):
        cls_ps = cache.cls_per_sample if idx is None else cache.cls_per_sample[idx]
        sep_ps = cache.sep_per_sample if idx is None else cache.sep_per_sample[idx]
        parts["cls"] = cls_ps.mean()
        parts["sep"] = -sep_ps.mean()
        l1 = l1_term(model.head.weight, (), head_only=True)
        if not tc.l1_head_only:
            l1 = l1 + cache.extractor_l1
        parts["l1"] = l1
    if tc.loss_regime in ("CIC", "PPIC"):
        scores = cache.icnn_scores if idx is None else cache.icnn_scores[idx]
        parts["icnn"] = icnn_loss(scores.mean(), tc.icnn)
    return composite_loss(tc.loss_regime, tc.loss_weights, **parts)


def _phase3(model: ProtoPartsModel, core_images: torch.Tensor,
            core_raw: np.ndarray, core_labels: torch.Tensor,
            hold_images: torch.Tensor, hold_labels: torch.Tensor,
            run_cfg: RunConfig, stats: WhiteningStats, cycle: int,
            logger: _Logger, aug_rng: np.random.Generator,
            best: dict) -> None:
    tc = run_cfg.training
    n = core_images.shape[0]
    augmenting = run_cfg.augmentation.apply_probability > 0
    _set_trainable(model, extractor=False, prototypes=False, head=True)
    optimizer = _make_optimizer(model, tc)
    # Extractor and prototypes are frozen for the whole phase, so pooled
    # scores and the non-head loss terms are constants; caching them keeps
    # head epochs cheap and the holdout metric exact in both paths.
    core_cache = None
    if not augmenting:
        core_cache = _build_phase3_cache(model, core_images, core_labels, run_cfg)
    hold_cache = _build_phase3_cache(model, hold_images, hold_labels, run_cfg)
    for t in range(1, tc.head_epochs + 1):
        perm_rng = np.random.default_rng([tc.seed, _PERM_STREAM, cycle, 3, t])
        perm = perm_rng.permutation(n)
        means = _EpochMeans()
        for start in range(0, n, tc.batch_size):
            idx = perm[start:start + tc.batch_size]
            if augmenting:
                batch_np = np.stack([
                    whiten(augment(core_raw[i], run_cfg.augmentation, aug_rng), stats)
                    for i in idx
                ])
                batch = torch.from_numpy(batch_np.transpose(0, 3, 1, 2))
                report = _batch_report(model, batch, core_labels[idx], run_cfg)
            else:
                report = _report_from_cache(model, core_cache,
                                            torch.from_numpy(idx), core_labels,
                                            run_cfg)
            _finite_or_raise(report, f"cycle {cycle} phase 3 epoch {t}")
            optimizer.zero_grad()
            report.total.backward()
            optimizer.step()
            means.add(report, len(idx))
        comps, total = means.means()
        with torch.no_grad():
            sel_report = _report_from_cache(model, hold_cache, None, hold_labels,
                                            run_cfg)
        metric = float(sel_report.total)
        logger.write({"cycle": cycle, "phase": 3, "epoch": t,
                      "components": comps, "total": total,
                      "selection_metric": metric})
        if metric < best["metric"]:
            best["metric"] = metric
            best["cycle"] = cycle
            best["epoch"] = t
            best["state"] = copy.deepcopy(model.state_dict())
            best["projection_meta"] = copy.deepcopy(model.bank.projection_meta)
            best["components"] = sel_report.components


def prototype_crops(model: ProtoPartsModel, images_raw: np.ndarray,
                    image_ids: list[str]) -> np.ndarray | None:
    """Source-patch crops of every projected prototype, raw [0,1] pixels.

    The crop is the latent cell's aligned pixel block (side/W per axis);
    None when projection has not run or the side is not grid-divisible.
    """
    meta = model.bank.projection_meta
    cfg = model.cfg
    if meta is None:
        return None
    if cfg.input_side % cfg.grid_w or cfg.input_side % cfg.grid_h:
        return None
    cs_x = cfg.input_side // cfg.grid_w
    cs_y = cfg.input_side // cfg.grid_h
    id_to_pos = {img_id: i for i, img_id in enumerate(image_ids)}
    crops = np.empty((len(meta), cs_y, cs_x, 3), dtype=np.float32)
    for entry in meta:
        img = images_raw[id_to_pos[entry["image_id"]]]
        y0, x0 = entry["h"] * cs_y, entry["w"] * cs_x
        crops[entry["prototype"]] = img[y0:y0 + cs_y, x0:x0 + cs_x]
    return crops


def run_training(data: TrainingData, run_cfg: RunConfig, *,
                 log_path: str | None = None,
                 checkpoint_path: str | None = None,
                 post_projection_hook=None) -> TrainingResult:
    """Execute the full cycle loop and return the best-selected model.

    The hook, when given, is called after every projection pass as
    hook(model, cycle, context) with context holding the core images
    (whitened tensor), labels, and image ids used for projection.
    """
    tc = run_cfg.training
    if data.images.shape[0] == 0:
        raise ValidationError("training data is empty")
    if int(data.labels.max()) >= run_cfg.model.num_classes:
        raise ValidationError("label outside the configured class count")
    model = initialize(run_cfg.model, tc.seed)

    core_idx, hold_idx = _stratified_holdout(data.labels, tc.selection_fraction,
                                             tc.seed)
    stats = compute_whitening(data.images, computed_on="train")
    whited = whiten(data.images, stats).transpose(0, 3, 1, 2)
    images_t = torch.from_numpy(np.ascontiguousarray(whited))
    labels_t = torch.from_numpy(data.labels)

    core_images = images_t[core_idx]
    core_labels = labels_t[core_idx]
    core_raw = data.images[core_idx]
    core_ids = [data.image_ids[i] for i in core_idx]
    hold_images = images_t[hold_idx]
    hold_labels = labels_t[hold_idx]

    aug_rng = np.random.default_rng([tc.seed, _AUG_STREAM])
    logger = _Logger(log_path)
    best: dict = {"metric": float("inf"), "cycle": -1, "epoch": -1,
                  "state": None, "projection_meta": None, "components": None}
    try:
        for cycle in range(1, tc.cycles + 1):
            _phase1(model, core_images, core_raw, core_labels, run_cfg, stats,
                    cycle, logger, aug_rng)
            before = model.bank.tensors.detach().clone()
            meta = project_prototypes(model, core_images,
                                      data.labels[core_idx], core_ids,
                                      data.class_names)
            changed = int((model.bank.tensors.detach() != before).any(dim=1).sum())
            logger.write({
                "cycle": cycle, "phase": 2, "epoch": 0, "components": None,
                "total": None, "selection_metric": None,
                "projection": {
                    "changed": changed,
                    "mean_distance": float(np.mean([m["distance"] for m in meta])),
                },
            })
            if post_projection_hook is not None:
                post_projection_hook(model, cycle, {
                    "images": core_images,
                    "labels": data.labels[core_idx],
                    "image_ids": core_ids,
                    "class_names": data.class_names,
                })
            _phase3(model, core_images, core_raw, core_labels, hold_images,
                    hold_labels, run_cfg, stats, cycle, logger, aug_rng, best)
    except Exception as exc:
        logger.write({"event": "abort", "error": str(exc)})
        logger.close()
        raise
    if best["state"] is None:
        logger.close()
        raise NumericalError("no finite selection metric was recorded")
    model.load_state_dict(best["state"])
    model.bank.projection_meta = best["projection_meta"]
    logger.close()

    from .config import to_dict
    meta = {
        "training_config_digest": training_config_digest(to_dict(tc)),
        "selection_metric": best["metric"],
        "cycle": best["cycle"],
        "phase": 3,
        "epoch": best["epoch"],
        "loss_components": best["components"],
        "class_names": data.class_names,
        "whitening": {
            "mean": stats.mean.tolist(),
            "std": stats.std.tolist(),
            "computed_on": stats.computed_on,
        },
        "loss_regime": tc.loss_regime,
        "seed": tc.seed,
    }
    result = TrainingResult(
        model=model,
        best_metric=best["metric"],
        best_cycle=best["cycle"],
        best_epoch=best["epoch"],
        log_lines=logger.lines,
        whitening=stats,
        core_indices=core_idx,
        holdout_indices=hold_idx,
        class_names=data.class_names,
        checkpoint_meta=meta,
    )
    if checkpoint_path is not None:
        write_result_checkpoint(result, data, checkpoint_path)
    return result


def whitening_from_meta(meta: dict) -> WhiteningStats:
    """Rebuild the train-split whitening stats stored in checkpoint metadata."""
    block = meta.get("whitening")
    if not block:
        raise ValidationError("checkpoint metadata has no whitening block")
    return WhiteningStats(
        mean=np.asarray(block["mean"], dtype=np.float64),
        std=np.asarray(block["std"], dtype=np.float64),
        computed_on=block.get("computed_on", "train"),
    )


def write_result_checkpoint(result: TrainingResult, data: TrainingData,
                            path: str, extra_meta: dict | None = None) -> None:
    """Persist the selected model plus whitening, projection provenance,
    and prototype source crops (when extractable)."""
    meta = dict(result.checkpoint_meta)
    meta.update(extra_meta or {})
    extra_arrays = {}
    crops = prototype_crops(result.model, data.images, data.image_ids)
    if crops is not None:
        extra_arrays["prototype_crops"] = crops
    save_checkpoint(path, result.model, meta, extra_arrays)
