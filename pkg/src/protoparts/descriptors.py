"""Photometric perturbations and perturbation-based importance descriptors.

Four perturbation kinds, each isolating one visual attribute of an RGB
image in [0, 1]:

  S: scale the HSI saturation channel (default 0.0 = full desaturation)
  H: rotate the hue channel by a number of degrees (default 90)
  T: Gaussian blur with the magnitude as standard deviation in pixels
     (default 3.0), suppressing texture
  B: scale intensity by the magnitude (default 0.5); implemented as an RGB
     scale, which equals scaling the HSI intensity channel exactly

Outputs clamp to [0, 1]. Magnitudes that make a transform the identity
(S=1, H=0 mod 360, T=0, B=1) return an exact copy of the input, so
descriptors of identity perturbations are exactly zero.

The local descriptor of prototype (m, k) under kind i for one image is
the drop in pooled similarity, s_mk - s_mk(perturbed). Global descriptors
average local ones over a set, weighted by each image's clean pooled score
for the prototype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .color import rotate_hue, scale_saturation
from .config import SimilarityConfig
from .data import WhiteningStats, whiten
from .errors import DomainError, ValidationError
from .model import ProtoPartsModel, extract_features
from .similarity import similarity_maps

PERTURBATION_KINDS = ("S", "H", "T", "B")
DEFAULT_MAGNITUDES = {"S": 0.0, "H": 90.0, "T": 3.0, "B": 0.5}
MAGNITUDE_RANGES = {"S": (0.0, 1.0), "H": (-360.0, 360.0),
                    "T": (0.0, 50.0), "B": (0.0, 2.0)}


@dataclass
class PerturbationKind:
    kind: str
    magnitude: float | None = None

    def resolved(self) -> float:
        if self.kind not in PERTURBATION_KINDS:
            raise ValidationError(
                f"perturbation kind {self.kind!r} not one of {PERTURBATION_KINDS}"
            )
        mag = DEFAULT_MAGNITUDES[self.kind] if self.magnitude is None else self.magnitude
        lo, hi = MAGNITUDE_RANGES[self.kind]
        if not (lo <= mag <= hi):
            raise ValidationError(
                f"perturbation {self.kind}: magnitude {mag} outside [{lo}, {hi}]"
            )
        return float(mag)


def _as_kind(kind) -> PerturbationKind:
    if isinstance(kind, PerturbationKind):
        return kind
    return PerturbationKind(kind=str(kind))


def perturb(image: np.ndarray, kind) -> np.ndarray:
    """Apply one perturbation to an RGB image in [0, 1]."""
    spec = _as_kind(kind)
    mag = spec.resolved()
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DomainError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise DomainError("image values must lie in [0, 1]")
    if spec.kind == "S":
        if mag == 1.0:
            return arr.copy()
        out = scale_saturation(arr, mag)
    elif spec.kind == "H":
        if mag % 360.0 == 0.0:
            return arr.copy()
        out = rotate_hue(arr, mag)
    elif spec.kind == "T":
        if mag == 0.0:
            return arr.copy()
        out = np.stack(
            [ndimage.gaussian_filter(arr[..., c], sigma=mag, mode="reflect")
             for c in range(3)], axis=-1)
    else:  # B
        if mag == 1.0:
            return arr.copy()
        out = arr * mag
    return np.clip(out, 0.0, 1.0)


def pooled_scores(model: ProtoPartsModel, image_raw: np.ndarray,
                  stats: WhiteningStats, sim_cfg: SimilarityConfig) -> np.ndarray:
    """Clean inference helper: raw image -> whitened -> pooled scores (P,)."""
    vol = extract_features(model, whiten(image_raw, stats))
    return similarity_maps(vol, model.bank, sim_cfg).pooled


@dataclass
class LocalDescriptors:
    """One image's importance scores: values[kind][p] = s_p - s_p(perturbed)."""

    image_id: str
    baseline: np.ndarray                 # (P,) clean pooled scores
    values: dict[str, np.ndarray]        # kind -> (P,)


def local_descriptors(image_raw: np.ndarray, model: ProtoPartsModel,
                      stats: WhiteningStats, sim_cfg: SimilarityConfig,
                      kinds=PERTURBATION_KINDS,
                      image_id: str = "") -> LocalDescriptors:
    """Compute per-prototype score drops for every perturbation kind."""
    baseline = pooled_scores(model, image_raw, stats, sim_cfg)
    values: dict[str, np.ndarray] = {}
    for kind in kinds:
        spec = _as_kind(kind)
        perturbed = perturb(image_raw, spec)
        values[spec.kind] = baseline - pooled_scores(model, perturbed, stats, sim_cfg)
    return LocalDescriptors(image_id=image_id, baseline=baseline, values=values)


@dataclass
class DescriptorReport:
    """Stacked local descriptors plus similarity-weighted global means."""

    kinds: list[str]
    image_ids: list[str]
    weights: np.ndarray                      # (N, P) clean pooled scores
    local: dict[str, np.ndarray]             # kind -> (N, P)
    global_values: dict[str, list]           # kind -> length-P list (None where undefined)
    warnings: list[str] = field(default_factory=list)

    def global_normalized(self) -> dict[str, list]:
        """Per-prototype max-abs scaling of global values across kinds."""
        num_p = self.weights.shape[1]
        out: dict[str, list] = {k: [None] * num_p for k in self.kinds}
        for p in range(num_p):
            vals = {k: self.global_values[k][p] for k in self.kinds}
            finite = [abs(v) for v in vals.values() if v is not None]
            denom = max(finite) if finite else 0.0
            for k in self.kinds:
                if vals[k] is not None:
                    out[k][p] = vals[k] / denom if denom > 0 else 0.0
        return out


def global_descriptors(images: np.ndarray, image_ids: list[str],
                       model: ProtoPartsModel, stats: WhiteningStats,
                       sim_cfg: SimilarityConfig,
                       kinds=PERTURBATION_KINDS) -> DescriptorReport:
    """Similarity-weighted mean of local descriptors over an image set.

    A prototype whose weights sum to zero gets a null global value plus a
    warning record (cannot happen with finite distances, where scores are
    strictly positive, but the rule is implemented regardless).
    """
    if len(images) == 0:
        raise DomainError("global_descriptors requires a non-empty image set")
    kind_names = [_as_kind(k).kind for k in kinds]
    locals_per_image = []
    for i in range(len(images)):
        image_id = image_ids[i] if image_ids else str(i)
        locals_per_image.append(
            local_descriptors(images[i], model, stats, sim_cfg, kinds, image_id)
        )
    weights = np.stack([ld.baseline for ld in locals_per_image])  # (N, P)
    local = {k: np.stack([ld.values[k] for ld in locals_per_image])
             for k in kind_names}
    warnings_list: list[str] = []
    global_values: dict[str, list] = {}
    weight_sums = weights.sum(axis=0)  # (P,)
    for k in kind_names:
        vals: list = []
        for p in range(weights.shape[1]):
            if weight_sums[p] <= 0:
                vals.append(None)
            else:
                vals.append(float((local[k][:, p] * weights[:, p]).sum()
                                  / weight_sums[p]))
        global_values[k] = vals
    for p in np.nonzero(weight_sums <= 0)[0]:
        warnings_list.append(
            f"prototype {int(p)}: all similarity weights are zero; global "
            "descriptors emitted as null"
        )
    return DescriptorReport(
        kinds=kind_names,
        image_ids=[ld.image_id for ld in locals_per_image],
        weights=weights,
        local=local,
        global_values=global_values,
        warnings=warnings_list,
    )


def report_records(report: DescriptorReport, prototypes_per_class: int) -> list[dict]:
    """Flatten a report to JSON-ready records, one per (prototype, kind):
    {prototype: [m, k], kind, local: [{image_id, value, weight}], global,
    global_normalized}."""
    normalized = report.global_normalized()
    records = []
    num_p = report.weights.shape[1]
    for p in range(num_p):
        m, k_cls = p % prototypes_per_class, p // prototypes_per_class
        for kind in report.kinds:
            records.append({
                "prototype": [m, k_cls],
                "kind": kind,
                "local": [
                    {"image_id": report.image_ids[n],
                     "value": float(report.local[kind][n, p]),
                     "weight": float(report.weights[n, p])}
                    for n in range(len(report.image_ids))
                ],
                "global": report.global_values[kind][p],
                "global_normalized": normalized[kind][p],
            })
    return records
