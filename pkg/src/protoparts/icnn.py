"""Intra/inter-class nearest-neighbor (ICNN) score over the prototype bank.

For a query latent vector z* of class k, the k_nn globally nearest
prototypes (raw squared L2, ties to the lowest prototype index) form a
neighborhood, partitioned into same-class members N-hat and other-class
members N-tilde. Distances are min-max normalized over the union to h in
[0, 1] (all-equal distances degenerate to h = 0). Three factors follow:

  lambda: compactness/margin term, 0.5 * (mean_inter h + mean_intra (1 - h)),
          where an empty inter set contributes 1 and an empty intra set 0;
  omega:  sum of the population variances of h over each partition, using
          the inter-set mean written as lambda_inter / |N-tilde|;
  gamma:  same-class fraction |N-hat| / k_nn.

The per-sample score is lambda^p * omega^q * gamma^r (defaults 1, 1, 1) and
the batch score is the mean. The loss is -ln(max(score, log_floor)).

The batched entry point (`icnn_score`) runs in torch and is differentiable
with respect to queries and prototypes everywhere off the measure-zero
membership/tie boundaries; neighborhood selection itself is a detached
index computation. The context-based functions mirror the same math on
numpy scalars for inspection and oracle-style recomputation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import ICNNConfig
from .errors import ConfigurationError, DimensionError, DomainError


@dataclass
class NeighborhoodContext:
    """The k_nn nearest prototypes of one query, in (distance, index) order."""

    query: np.ndarray
    class_of_query: int
    indices: np.ndarray        # (k_nn,) prototype indices, rank order
    tensors: np.ndarray        # (k_nn, D) member prototype vectors
    distances: np.ndarray      # (k_nn,) raw squared L2 distances
    intra_mask: np.ndarray     # (k_nn,) True where member class == query class
    theta: float               # min distance over the union
    alpha: float               # max distance over the union

    @property
    def intra_indices(self) -> np.ndarray:
        return self.indices[self.intra_mask]

    @property
    def inter_indices(self) -> np.ndarray:
        return self.indices[~self.intra_mask]


@dataclass
class ICNNBreakdown:
    """Per-sample factor values, for diagnostics and JSON logging."""

    lambda_val: float
    omega_val: float
    gamma_val: float
    lambda_inter: float
    lambda_intra: float
    var_intra: float
    var_inter: float
    score: float

    def as_dict(self) -> dict:
        return {
            "lambda": self.lambda_val,
            "omega": self.omega_val,
            "gamma": self.gamma_val,
            "lambda_inter": self.lambda_inter,
            "lambda_intra": self.lambda_intra,
            "var_intra": self.var_intra,
            "var_inter": self.var_inter,
            "score": self.score,
        }


def _bank_arrays(bank) -> tuple[np.ndarray, np.ndarray]:
    tensors = getattr(bank, "tensors", None)
    class_of = getattr(bank, "class_of", None)
    if tensors is None:
        tensors, class_of = bank
    if hasattr(tensors, "detach"):
        tensors = tensors.detach().cpu().numpy()
    return np.asarray(tensors, dtype=np.float64), np.asarray(class_of, dtype=np.int64)


def build_neighborhood(z_star, class_of_z: int, bank, cfg: ICNNConfig) -> NeighborhoodContext:
    """Select the k_nn nearest prototypes and partition them by class."""
    tensors, class_of = _bank_arrays(bank)
    z = np.asarray(z_star, dtype=np.float64).reshape(-1)
    if z.shape[0] != tensors.shape[1]:
        raise DimensionError(
            f"query depth {z.shape[0]} does not match prototype depth {tensors.shape[1]}"
        )
    num_p = tensors.shape[0]
    k_nn = cfg.resolved_size(_infer_m(class_of))
    if k_nn > num_p:
        raise ConfigurationError(
            f"neighborhood size {k_nn} exceeds prototype count {num_p}"
        )
    diff = tensors - z[None, :]
    dists = np.square(diff).sum(axis=1)
    order = np.lexsort((np.arange(num_p), dists))  # ties -> lowest index
    sel = order[:k_nn]
    sel_d = dists[sel]
    return NeighborhoodContext(
        query=z,
        class_of_query=int(class_of_z),
        indices=sel.astype(np.int64),
        tensors=tensors[sel],
        distances=sel_d,
        intra_mask=class_of[sel] == int(class_of_z),
        theta=float(sel_d.min()),
        alpha=float(sel_d.max()),
    )


def _infer_m(class_of: np.ndarray) -> int:
    # prototypes per class; banks are balanced by construction
    counts = np.bincount(class_of)
    return int(counts.max()) if counts.size else 1


def _member_h(ctx: NeighborhoodContext) -> np.ndarray:
    span = ctx.alpha - ctx.theta
    if span <= 0:
        return np.zeros_like(ctx.distances)
    return (ctx.distances - ctx.theta) / span


def normalized_distance(z_star, p, ctx: NeighborhoodContext) -> float:
    """Min-max normalized distance h of one union member.

    ``p`` may be a prototype index or the member's vector; anything outside
    the neighborhood union is a domain error.
    """
    if np.isscalar(p) or isinstance(p, (int, np.integer)):
        hits = np.nonzero(ctx.indices == int(p))[0]
        if hits.size == 0:
            raise DomainError(f"prototype {int(p)} is not in the neighborhood union")
        pos = int(hits[0])
    else:
        vec = np.asarray(p, dtype=np.float64).reshape(-1)
        matches = [i for i in range(len(ctx.indices))
                   if np.array_equal(ctx.tensors[i], vec)]
        if not matches:
            raise DomainError("prototype vector is not in the neighborhood union")
        pos = matches[0]
    return float(_member_h(ctx)[pos])


def lambda_terms(ctx: NeighborhoodContext) -> tuple[float, float]:
    """(lambda_inter, lambda_intra): summed h over N-tilde, summed (1 - h)
    over N-hat. Empty partitions sum to 0."""
    h = _member_h(ctx)
    lam_inter = float(h[~ctx.intra_mask].sum())
    lam_intra = float((1.0 - h[ctx.intra_mask]).sum())
    return lam_inter, lam_intra


def lambda_fn(ctx: NeighborhoodContext) -> float:
    """Mean-of-means margin term in [0, 1]; empty inter set counts as 1,
    empty intra set as 0."""
    lam_inter, lam_intra = lambda_terms(ctx)
    n_inter = int((~ctx.intra_mask).sum())
    n_intra = int(ctx.intra_mask.sum())
    inter_mean = lam_inter / n_inter if n_inter > 0 else 1.0
    intra_mean = lam_intra / n_intra if n_intra > 0 else 0.0
    return 0.5 * (inter_mean + intra_mean)


def variance_terms(ctx: NeighborhoodContext) -> tuple[float, float]:
    """Population variances of h over each partition; empty sets give 0.

    The inter variance is centered on lambda_inter / |N-tilde| as written,
    which coincides with the plain mean of h over N-tilde.
    """
    h = _member_h(ctx)
    h_intra = h[ctx.intra_mask]
    h_inter = h[~ctx.intra_mask]
    if h_intra.size > 0:
        var_intra = float(np.mean((h_intra - h_intra.mean()) ** 2))
    else:
        var_intra = 0.0
    if h_inter.size > 0:
        center = float(h_inter.sum()) / h_inter.size
        var_inter = float(np.mean((center - h_inter) ** 2))
    else:
        var_inter = 0.0
    return var_intra, var_inter


def gamma_fn(ctx: NeighborhoodContext) -> float:
    """Same-class fraction of the neighborhood."""
    n_intra = int(ctx.intra_mask.sum())
    return n_intra / len(ctx.indices)


def breakdown_from_context(ctx: NeighborhoodContext, cfg: ICNNConfig) -> ICNNBreakdown:
    """Assemble all factor values of one sample."""
    lam_inter, lam_intra = lambda_terms(ctx)
    lam = lambda_fn(ctx)
    var_intra, var_inter = variance_terms(ctx)
    omega = var_intra + var_inter
    gamma = gamma_fn(ctx)
    score = (_safe_pow(lam, cfg.exponent_p)
             * _safe_pow(omega, cfg.exponent_q)
             * _safe_pow(gamma, cfg.exponent_r))
    return ICNNBreakdown(
        lambda_val=lam, omega_val=omega, gamma_val=gamma,
        lambda_inter=lam_inter, lambda_intra=lam_intra,
        var_intra=var_intra, var_inter=var_inter, score=score,
    )


def _safe_pow(base: float, exponent: float) -> float:
    if exponent == 1.0:
        return base
    return math.pow(base, exponent)


def icnn_from_distances(dists: torch.Tensor, labels: torch.Tensor,
                        class_of: torch.Tensor, cfg: ICNNConfig,
                        k_nn: int) -> torch.Tensor:
    """Per-sample ICNN scores from a (B, P) raw squared-distance tensor.

    Differentiable through the gathered distances; neighborhood membership
    is selected under no_grad. Returns a (B,) tensor.
    """
    if dists.ndim != 2:
        raise DimensionError(f"expected (B, P) distances, got {tuple(dists.shape)}")
    num_p = dists.shape[1]
    if k_nn > num_p:
        raise ConfigurationError(f"neighborhood size {k_nn} exceeds prototype count {num_p}")
    if k_nn < 2:
        raise ConfigurationError("neighborhood size must be >= 2")
    with torch.no_grad():
        order = torch.argsort(dists, dim=1, stable=True)  # ties -> lowest index
        idx = order[:, :k_nn]
    d_sel = dists.gather(1, idx)  # (B, k) ascending
    theta = d_sel[:, 0]
    alpha = d_sel[:, -1]
    span = alpha - theta
    degenerate = span <= 0
    span_safe = torch.where(degenerate, torch.ones_like(span), span)
    h = (d_sel - theta[:, None]) / span_safe[:, None]
    h = torch.where(degenerate[:, None], torch.zeros_like(h), h)

    intra = (class_of[idx] == labels[:, None]).to(h.dtype)  # (B, k)
    inter = 1.0 - intra
    n_intra = intra.sum(dim=1)
    n_inter = inter.sum(dim=1)
    n_intra_safe = n_intra.clamp_min(1.0)
    n_inter_safe = n_inter.clamp_min(1.0)

    lam_inter = (h * inter).sum(dim=1)
    lam_intra = ((1.0 - h) * intra).sum(dim=1)
    inter_mean = torch.where(n_inter > 0, lam_inter / n_inter_safe,
                             torch.ones_like(lam_inter))
    intra_mean = lam_intra / n_intra_safe  # zero numerator when empty
    lam = 0.5 * (inter_mean + intra_mean)

    m_intra = (h * intra).sum(dim=1) / n_intra_safe
    var_intra = (((h - m_intra[:, None]) ** 2) * intra).sum(dim=1) / n_intra_safe
    c_inter = lam_inter / n_inter_safe
    var_inter = (((c_inter[:, None] - h) ** 2) * inter).sum(dim=1) / n_inter_safe
    omega = var_intra + var_inter
    gamma = n_intra / float(k_nn)

    return (_tensor_pow(lam, cfg.exponent_p)
            * _tensor_pow(omega, cfg.exponent_q)
            * _tensor_pow(gamma, cfg.exponent_r))


def _tensor_pow(base: torch.Tensor, exponent: float) -> torch.Tensor:
    if exponent == 1.0:
        return base
    return base.pow(exponent)


def icnn_score(batch, bank=None, cfg: ICNNConfig | None = None,
               with_breakdowns: bool = True):
    """Batch ICNN score: mean over per-sample factor products.

    ``batch`` is either a list of (z*, class) pairs or a (queries, labels)
    pair of arrays/tensors. Returns (score, breakdowns); the score is a
    torch scalar carrying gradients when the inputs do.
    """
    if cfg is None:
        cfg = ICNNConfig()
    queries, labels = _normalize_batch(batch)
    if queries.shape[0] == 0:
        raise DomainError("icnn_score requires a non-empty batch")
    tensors = getattr(bank, "tensors", None)
    class_np: np.ndarray
    if tensors is None:
        tensors, class_np = bank
    else:
        class_np = bank.class_of
    if not torch.is_tensor(tensors):
        tensors = torch.as_tensor(np.asarray(tensors), dtype=queries.dtype)
    class_of = torch.as_tensor(np.asarray(class_np, dtype=np.int64))
    if queries.shape[1] != tensors.shape[1]:
        raise DimensionError(
            f"query depth {queries.shape[1]} does not match prototype depth {tensors.shape[1]}"
        )
    k_nn = cfg.resolved_size(_infer_m(np.asarray(class_np)))
    dists = ((queries[:, None, :] - tensors[None, :, :]) ** 2).sum(dim=2)
    per_sample = icnn_from_distances(dists, labels, class_of, cfg, k_nn)
    score = per_sample.mean()
    breakdowns: list[ICNNBreakdown] = []
    if with_breakdowns:
        q_np = queries.detach().cpu().numpy()
        l_np = labels.detach().cpu().numpy()
        bank_pair = (tensors.detach().cpu().numpy(), np.asarray(class_np))
        for i in range(q_np.shape[0]):
            ctx = build_neighborhood(q_np[i], int(l_np[i]), bank_pair, cfg)
            breakdowns.append(breakdown_from_context(ctx, cfg))
    return score, breakdowns


def _normalize_batch(batch) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(batch, tuple) and len(batch) == 2:
        queries, labels = batch
    else:
        pairs = list(batch)
        if not pairs:
            raise DomainError("icnn_score requires a non-empty batch")
        queries = [q for q, _ in pairs]
        labels = [c for _, c in pairs]
        if torch.is_tensor(queries[0]):
            queries = torch.stack(queries)
        else:
            queries = np.stack([np.asarray(q, dtype=np.float64) for q in queries])
    if not torch.is_tensor(queries):
        queries = torch.as_tensor(np.asarray(queries), dtype=torch.float64)
    if queries.ndim != 2:
        raise DimensionError(f"queries must be (B, D), got {tuple(queries.shape)}")
    if not torch.is_tensor(labels):
        labels = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    labels = labels.to(torch.int64)
    return queries, labels


def icnn_loss(score, cfg: ICNNConfig | None = None):
    """Negative log of the floored score; torch in, torch out."""
    floor = (cfg or ICNNConfig()).log_floor
    if torch.is_tensor(score):
        return -torch.log(torch.clamp(score, min=floor))
    return -math.log(max(float(score), floor))
