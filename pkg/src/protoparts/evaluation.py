"""Evaluation harness: one-vs-rest accuracy with class-count weighting,
stratified k-fold kNN over exported latent embeddings, Frechet distance
between embedded image sets, latent-embedding export for external t-SNE,
and per-class cluster distance statistics.

Tie rules are deterministic throughout: distance ties prefer the lowest
candidate index, vote ties the smallest class index, argmax ties the lowest
position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, ValidationError

_EMBED_SIDE = 16
_EMBED_DIM = 32
_EMBED_SEED = 7341


def accuracy(predictions, labels, num_classes: int) -> dict:
    """Per-class one-vs-rest accuracies plus weighted and macro averages.

    Acc_k = (TP_k + TN_k) / N treats class k against the rest; the weighted
    average weights each Acc_k by its ground-truth count. The macro mean is
    reported too since both readings of a class-weighted average are useful.
    """
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise DimensionError("predictions and labels must be equal-length 1-D arrays")
    n = labs.shape[0]
    if n == 0:
        raise ValidationError("accuracy requires at least one sample")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labs, preds), 1)
    per_class = {}
    for k in range(num_classes):
        tp = confusion[k, k]
        fn = confusion[k].sum() - tp
        fp = confusion[:, k].sum() - tp
        tn = n - tp - fn - fp
        per_class[k] = float((tp + tn) / n)
    counts = confusion.sum(axis=1)
    weighted = float(sum(counts[k] * per_class[k] for k in range(num_classes)) / n)
    macro = float(np.mean([per_class[k] for k in range(num_classes)]))
    return {"per_class": per_class, "weighted": weighted, "macro": macro,
            "confusion": confusion}


def knn_fold_assignment(labels, folds: int, seed: int) -> np.ndarray:
    """Stratified fold ids, a pure function of (seed, labels)."""
    labs = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([seed, 4242])
    fold_ids = np.full(labs.shape[0], -1, dtype=np.int64)
    for cls in np.unique(labs):
        members = np.nonzero(labs == cls)[0]
        if members.shape[0] < folds:
            raise ValidationError(
                f"class {int(cls)} has {members.shape[0]} samples, fewer than "
                f"{folds} folds"
            )
        perm = rng.permutation(members.shape[0])
        fold_ids[members[perm]] = np.arange(members.shape[0]) % folds
    return fold_ids


def knn_predict(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                k: int) -> np.ndarray:
    """Majority vote over the k nearest training points by squared L2."""
    tx = np.asarray(train_x, dtype=np.float64)
    qx = np.asarray(test_x, dtype=np.float64)
    d = ((qx[:, None, :] - tx[None, :, :]) ** 2).sum(axis=2)  # (Q, T)
    num_classes = int(train_y.max()) + 1 if train_y.size else 1
    preds = np.empty(qx.shape[0], dtype=np.int64)
    order_idx = np.arange(tx.shape[0])
    for i in range(qx.shape[0]):
        order = np.lexsort((order_idx, d[i]))  # distance ties -> lowest index
        votes = np.bincount(train_y[order[:k]], minlength=num_classes)
        preds[i] = int(np.argmax(votes))  # vote ties -> smallest class index
    return preds


def knn_eval(embeddings, labels, k: int = 5, folds: int = 5, seed: int = 0) -> dict:
    """Stratified k-fold cross-validated kNN accuracy, mean +- std over folds."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError("embeddings must be (N, D) aligned with labels")
    fold_ids = knn_fold_assignment(y, folds, seed)
    per_fold = []
    for f in range(folds):
        test_mask = fold_ids == f
        train_mask = ~test_mask
        if train_mask.sum() < k:
            raise ValidationError(
                f"fold {f}: only {int(train_mask.sum())} training samples for k={k}"
            )
        preds = knn_predict(x[train_mask], y[train_mask], x[test_mask], k)
        per_fold.append(float((preds == y[test_mask]).mean()))
    return {
        "mean": float(np.mean(per_fold)),
        "std": float(np.std(per_fold)),
        "per_fold": per_fold,
        "k": k,
        "folds": folds,
    }


def _mean_cov(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    if x.shape[0] < 2:
        sigma = np.zeros((x.shape[1], x.shape[1]))
    else:
        sigma = np.cov(x, rowvar=False)
        sigma = np.atleast_2d(sigma)
    # small always-on shrinkage keeps desk-scale covariances well posed
    lam = 1e-6 * np.trace(sigma) / x.shape[1]
    return mu, sigma + lam * np.eye(x.shape[1])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    eigval, eigvec = np.linalg.eigh(sym)
    eigval = np.clip(eigval, 0.0, None)
    return (eigvec * np.sqrt(eigval)) @ eigvec.T


def frechet_distance(set_a, set_b) -> float:
    """Frechet distance between Gaussian fits of two embedding sets.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)), the matrix square
    root taken by eigendecomposition with negative eigenvalues clipped. The
    cross term is evaluated in a canonical argument order so swapping the
    sets returns the exact same float.
    """
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("embedding sets must be 2-D (N, D) arrays")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(
            f"embedding dimension mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    mu_a, sig_a = _mean_cov(a)
    mu_b, sig_b = _mean_cov(b)
    diff = mu_a - mu_b
    mean_term = float(diff @ diff)
    first, second = (sig_a, sig_b)
    if (mu_b.tobytes(), sig_b.tobytes()) < (mu_a.tobytes(), sig_a.tobytes()):
        first, second = (sig_b, sig_a)
    root_first = _psd_sqrt(first)
    cross = _psd_sqrt(root_first @ second @ root_first)
    value = mean_term + float(np.trace(sig_a) + np.trace(sig_b)
                              - 2.0 * np.trace(cross))
    return max(value, 0.0)


def default_embedder(images: np.ndarray) -> np.ndarray:
    """Fixed seeded random-projection embedder for desk-scale Frechet runs.

    (N, S, S, 3) raw images -> bilinear 16x16 resize -> flatten -> project
    to 32 dims with a constant seeded Gaussian matrix. Identical across
    runs and training regimes, so distances are comparable.
    """
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise DimensionError(f"expected (N, S, S, 3) images, got {arr.shape}")
    tens = torch.from_numpy(arr).permute(0, 3, 1, 2)
    small = torch.nn.functional.interpolate(
        tens, size=(_EMBED_SIDE, _EMBED_SIDE), mode="bilinear",
        align_corners=False, antialias=True,
    )
    flat = small.permute(0, 2, 3, 1).reshape(arr.shape[0], -1).numpy().astype(np.float64)
    rng = np.random.default_rng(_EMBED_SEED)
    proj = rng.standard_normal((flat.shape[1], _EMBED_DIM)) / np.sqrt(flat.shape[1])
    return flat @ proj


@dataclass
class EmbeddingTable:
    """Per test image: the latent patch nearest to any prototype."""

    image_ids: list[str]
    labels: np.ndarray        # (N,)
    predictions: np.ndarray   # (N,)
    nearest_pp: np.ndarray    # (N,)
    patch_index: np.ndarray   # (N,) flattened w-major patch index
    distances: np.ndarray     # (N,) squared L2 to the nearest prototype
    vectors: np.ndarray       # (N, D)


def export_embeddings(patches: np.ndarray, prototypes: np.ndarray,
                      labels, predictions, image_ids: list[str]) -> EmbeddingTable:
    """For each image pick the patch with minimal squared L2 distance to any
    prototype (ties -> lowest patch index, then lowest prototype index)."""
    pat = np.asarray(patches, dtype=np.float64)
    protos = np.asarray(prototypes, dtype=np.float64)
    if pat.ndim != 3:
        raise DimensionError(f"patches must be (N, L, D), got {pat.shape}")
    n, l, d = pat.shape
    diff = pat[:, :, None, :] - protos[None, None, :, :]
    dist = np.square(diff).sum(axis=3)  # (N, L, P)
    flat = dist.reshape(n, -1)
    arg = flat.argmin(axis=1)  # first min = lowest (patch, prototype)
    patch_idx = arg // protos.shape[0]
    pp_idx = arg % protos.shape[0]
    vectors = pat[np.arange(n), patch_idx]
    return EmbeddingTable(
        image_ids=list(image_ids),
        labels=np.asarray(labels, dtype=np.int64),
        predictions=np.asarray(predictions, dtype=np.int64),
        nearest_pp=pp_idx.astype(np.int64),
        patch_index=patch_idx.astype(np.int64),
        distances=flat[np.arange(n), arg],
        vectors=vectors,
    )


def write_embeddings_tsv(table: EmbeddingTable, path: str) -> None:
    """Tab-separated export: image_id, label, prediction, nearest_pp,
    d0..dD-1."""
    depth = table.vectors.shape[1]
    header = ["image_id", "label", "prediction", "nearest_pp"]
    header += [f"d{i}" for i in range(depth)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for i, image_id in enumerate(table.image_ids):
            row = [image_id, str(int(table.labels[i])),
                   str(int(table.predictions[i])), str(int(table.nearest_pp[i]))]
            row += [repr(float(v)) for v in table.vectors[i]]
            fh.write("\t".join(row) + "\n")


def cluster_statistics(patches: np.ndarray, labels, prototypes: np.ndarray,
                       class_of: np.ndarray) -> dict:
    """Per class: distance stats (plain L2) between (a) every patch of the
    class's images and every class prototype, and (b) all prototype pairs
    within the class. Classes with a single prototype have null pair stats."""
    pat = np.asarray(patches, dtype=np.float64)
    labs = np.asarray(labels, dtype=np.int64)
    protos = np.asarray(prototypes, dtype=np.float64)
    class_of = np.asarray(class_of, dtype=np.int64)
    stats: dict[int, dict] = {}
    for cls in np.unique(class_of):
        own_protos = protos[class_of == cls]
        member_patches = pat[labs == cls].reshape(-1, pat.shape[2])
        if member_patches.shape[0] > 0:
            d = np.sqrt(((member_patches[:, None, :] - own_protos[None, :, :]) ** 2)
                        .sum(axis=2)).ravel()
            patch_stats = _dist_stats(d)
        else:
            patch_stats = None
        m = own_protos.shape[0]
        if m >= 2:
            iu = np.triu_indices(m, k=1)
            pair_d = np.sqrt(((own_protos[:, None, :] - own_protos[None, :, :]) ** 2)
                             .sum(axis=2))[iu]
            pair_stats = _dist_stats(pair_d)
        else:
            pair_stats = None
        stats[int(cls)] = {"patch_to_pp": patch_stats, "pp_to_pp": pair_stats}
    return stats


def _dist_stats(d: np.ndarray) -> dict:
    return {
        "mean": float(d.mean()),
        "variance": float(d.var()),
        "std": float(d.std()),
        "count": int(d.size),
    }
