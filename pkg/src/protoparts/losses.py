"""Training objectives: cross-entropy, cluster/separation costs, L1
sparsity, and the four composite regimes (CE, ProtoPNet, CIC, PPIC).

Composite reports keep components RAW (unweighted); the total applies the
configured weights: ProtoPNet = w_ce*ce + w_cls*cls + w_sep*sep + w_l1*l1,
CIC = ce + w_icnn*icnn, PPIC = ProtoPNet + w_icnn*icnn. The CE regime is the
bare cross-entropy. Min reductions backpropagate through the argmin element
only, ties resolving to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import LossWeights
from .errors import DimensionError, ValidationError

COMPONENT_NAMES = ("ce", "cls", "sep", "l1", "icnn")


@dataclass
class LossReport:
    """Weighted total plus raw (unweighted) component values."""

    total: torch.Tensor
    components: dict[str, float]


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def ce_loss(probs, onehot) -> torch.Tensor:
    """Mean negative log-likelihood of the true class.

    ``probs`` rows must sum to 1 within 1e-6; ``onehot`` rows must be exact
    0/1 indicators with a single 1. Probabilities are clamped to
    [1e-12, 1] before the log.
    """
    p = _as_tensor(probs)
    y = _as_tensor(onehot, dtype=p.dtype)
    if p.ndim != 2 or y.shape != p.shape:
        raise DimensionError(
            f"probs and labels must share a (B, K) shape, got {tuple(p.shape)} vs {tuple(y.shape)}"
        )
    with torch.no_grad():
        sums = p.sum(dim=1)
        if not torch.all((sums - 1.0).abs() <= 1e-6):
            bad = int((sums - 1.0).abs().argmax())
            raise ValidationError(f"probability row {bad} sums to {float(sums[bad])}, not 1")
        y_np = y.detach().cpu().numpy()
        if not (np.all((y_np == 0) | (y_np == 1)) and np.all(y_np.sum(axis=1) == 1)):
            raise ValidationError("labels must be one-hot rows")
    clamped = p.clamp(min=1e-12, max=1.0)
    return -(y * torch.log(clamped)).sum(dim=1).mean()


def patch_distances(patches: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Squared L2 from every patch to every prototype: (B, L, D) x (P, D)
    -> (B, P, L)."""
    if patches.ndim != 3 or prototypes.ndim != 2:
        raise DimensionError(
            f"expected (B, L, D) patches and (P, D) prototypes, got "
            f"{tuple(patches.shape)} and {tuple(prototypes.shape)}"
        )
    if patches.shape[2] != prototypes.shape[1]:
        raise DimensionError(
            f"depth mismatch: patches D={patches.shape[2]}, prototypes D={prototypes.shape[1]}"
        )
    diff = patches[:, None, :, :] - prototypes[None, :, None, :]  # (B, P, L, D)
    return (diff * diff).sum(dim=3)


def _class_masks(labels: torch.Tensor, class_of: torch.Tensor) -> torch.Tensor:
    return class_of[None, :] == labels[:, None]  # (B, P) same-class mask


def cluster_cost(dists: torch.Tensor, labels: torch.Tensor,
                 class_of: torch.Tensor) -> torch.Tensor:
    """Mean over images of the min squared distance between any patch and
    any same-class prototype. ``dists`` is the (B, P, L) tensor."""
    same = _class_masks(labels, class_of)
    masked = dists.masked_fill(~same[:, :, None], float("inf"))
    return masked.flatten(1).min(dim=1).values.mean()


def separation_cost(dists: torch.Tensor, labels: torch.Tensor,
                    class_of: torch.Tensor) -> torch.Tensor:
    """Negated mean of the min squared distance between any patch and any
    other-class prototype; minimizing pushes other-class prototypes away."""
    same = _class_masks(labels, class_of)
    masked = dists.masked_fill(same[:, :, None], float("inf"))
    return -masked.flatten(1).min(dim=1).values.mean()


def min_same_class_distance(dists: torch.Tensor, labels: torch.Tensor,
                            class_of: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per image: the patch closest to any same-class prototype.

    Returns (min squared distance (B,), patch index (B,)). Patch indices
    follow the caller's flattening order; ties take the first (lowest)
    index. This is the representative-patch rule shared by the cluster term
    and the neighborhood-score query selection.
    """
    same = _class_masks(labels, class_of)
    masked = dists.masked_fill(~same[:, :, None], float("inf"))
    per_patch = masked.min(dim=1).values  # (B, L)
    idx = per_patch.argmin(dim=1)
    return per_patch.gather(1, idx[:, None]).squeeze(1), idx


def l1_term(head_weights, extractor_params=(), head_only: bool = False) -> torch.Tensor:
    """Sum of absolute weights of the classifier head matrix plus, unless
    ``head_only``, every feature-extractor parameter. The head bias is not
    regularized."""
    w = head_weights
    if hasattr(w, "weight"):
        w = w.weight
    total = _as_tensor(w).abs().sum()
    if not head_only:
        for p in extractor_params:
            total = total + _as_tensor(p).abs().sum()
    return total


def composite_loss(regime: str, weights: LossWeights, *, ce=None, cls=None,
                   sep=None, l1=None, icnn=None) -> LossReport:
    """Assemble a LossReport from precomputed component values.

    Component arguments are raw scalars (tensors or floats); only the
    components a regime uses may be required. Missing required components
    raise; inactive components are reported as 0.
    """
    required = {
        "CE": ("ce",),
        "ProtoPNet": ("ce", "cls", "sep", "l1"),
        "CIC": ("ce", "icnn"),
        "PPIC": ("ce", "cls", "sep", "l1", "icnn"),
    }
    if regime not in required:
        raise ValidationError(f"unknown loss regime {regime!r}")
    given = {"ce": ce, "cls": cls, "sep": sep, "l1": l1, "icnn": icnn}
    missing = [name for name in required[regime] if given[name] is None]
    if missing:
        raise ValidationError(f"regime {regime} requires components {missing}")
    vals = {name: (_as_tensor(v, dtype=torch.float64) if v is not None else None)
            for name, v in given.items()}
    if regime == "CE":
        total = vals["ce"]
    elif regime == "ProtoPNet":
        total = (weights.w_ce * vals["ce"] + weights.w_cls * vals["cls"]
                 + weights.w_sep * vals["sep"] + weights.w_l1 * vals["l1"])
    elif regime == "CIC":
        total = vals["ce"] + weights.w_icnn * vals["icnn"]
    else:  # PPIC
        total = (weights.w_ce * vals["ce"] + weights.w_cls * vals["cls"]
                 + weights.w_sep * vals["sep"] + weights.w_l1 * vals["l1"]
                 + weights.w_icnn * vals["icnn"])
    components = {name: (float(vals[name].detach()) if given[name] is not None
                         and name in required[regime] else 0.0)
                  for name in COMPONENT_NAMES}
    return LossReport(total=total, components=components)
