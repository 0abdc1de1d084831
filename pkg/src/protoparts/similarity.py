"""Prototype-patch similarity: squared L2 distances, the log-ratio score
transform, per-prototype similarity maps with max-pooling, bilinear heatmap
upscaling, and percentile bounding boxes.

Distances are squared L2 between a latent patch vector and a prototype
vector. Scores are s = ln((d + 1) / (d + eps)), strictly decreasing in d for
eps < 1, with maximum ln(1/eps) at d = 0 and limit 0 as d grows.

Conventions: a latent volume is indexed [w][h][d] where w runs along the
horizontal image axis and h along the vertical one. Similarity maps are
indexed [prototype][w][h]; heatmap value arrays are image-like, [y][x].
Argmax ties break to the lowest row-major (w, h) index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .config import SimilarityConfig
from .errors import DimensionError, DomainError, NumericalError


@dataclass
class SimilarityResult:
    """Per-prototype score maps plus their pooled maxima.

    maps: (P, W, H) scores; pooled: (P,) max over each map;
    argmax_coords: (P, 2) int array of the pooled (w, h) location.
    """

    maps: np.ndarray
    pooled: np.ndarray
    argmax_coords: np.ndarray


@dataclass
class Heatmap:
    """Upscaled similarity map with a percentile bounding box.

    values: (side, side) array indexed [y][x]; bbox: inclusive pixel
    rectangle (x0, y0, x1, y1) enclosing every value at or above the
    configured percentile threshold.
    """

    values: np.ndarray
    prototype_index: int
    bbox: tuple[int, int, int, int]


def squared_distance(z: np.ndarray, p: np.ndarray) -> float:
    """Squared L2 distance between two equal-length vectors."""
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if z.ndim != 1 or p.ndim != 1:
        raise DimensionError(f"expected 1-D vectors, got shapes {z.shape} and {p.shape}")
    if z.shape != p.shape:
        raise DimensionError(f"length mismatch: {z.shape[0]} vs {p.shape[0]}")
    diff = z - p
    return float(np.sum(diff * diff))


def similarity_score(d: float, cfg: SimilarityConfig | None = None,
                     epsilon: float | None = None) -> float:
    """Score a nonnegative squared distance: ln((d+1)/(d+eps))."""
    if epsilon is None:
        if cfg is None:
            raise DomainError("similarity_score needs a config or an epsilon")
        eps = cfg.epsilon
    else:
        eps = epsilon
    if d < 0:
        raise DomainError(f"distance must be >= 0, got {d}")
    return float(np.log((d + 1.0) / (d + eps)))


def similarity_maps(latent, prototypes, cfg: SimilarityConfig) -> SimilarityResult:
    """Score every (prototype, patch) pair of a latent volume.

    ``latent`` is a (W, H, D) array or an object with such a ``.data``
    attribute; ``prototypes`` is a (P, D) array or an object exposing
    ``.tensors``. Pooling is a per-prototype max over the map.
    """
    vol = np.asarray(getattr(latent, "data", latent), dtype=np.float64)
    protos = getattr(prototypes, "tensors", prototypes)
    if hasattr(protos, "detach"):
        protos = protos.detach().cpu().numpy()
    protos = np.asarray(protos, dtype=np.float64)
    if vol.ndim != 3:
        raise DimensionError(f"latent volume must be (W, H, D), got {vol.shape}")
    if protos.ndim != 2:
        raise DimensionError(f"prototypes must be (P, D), got {protos.shape}")
    if vol.shape[2] != protos.shape[1]:
        raise DimensionError(
            f"depth mismatch: latent D={vol.shape[2]}, prototypes D={protos.shape[1]}"
        )
    w, h, _ = vol.shape
    num_p = protos.shape[0]
    diff = vol[:, :, None, :] - protos[None, None, :, :]
    dist = np.ascontiguousarray(np.square(diff)).sum(axis=-1)  # (W, H, P)
    maps = np.log((dist + 1.0) / (dist + cfg.epsilon)).transpose(2, 0, 1)
    if not np.all(np.isfinite(maps)):
        p, ww, hh = np.argwhere(~np.isfinite(maps))[0]
        raise NumericalError(
            f"non-finite similarity score at prototype {p}, patch (w={ww}, h={hh})"
        )
    flat = maps.reshape(num_p, w * h)
    arg = flat.argmax(axis=1)  # first occurrence = lowest row-major (w, h)
    pooled = flat[np.arange(num_p), arg]
    coords = np.stack([arg // h, arg % h], axis=1).astype(np.int64)
    return SimilarityResult(maps=maps, pooled=pooled, argmax_coords=coords)


def bilinear_upscale(grid: np.ndarray, side: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-D map to side x side.

    The input is indexed [w][h] (w horizontal); the output is image-like,
    indexed [y][x]. Grid corners map exactly onto output corners.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DimensionError(f"expected a 2-D map, got shape {grid.shape}")
    w, h = grid.shape
    if side < 1:
        raise DomainError("heatmap side must be >= 1")
    xs = np.linspace(0.0, w - 1.0, side) if side > 1 else np.zeros(1)
    ys = np.linspace(0.0, h - 1.0, side) if side > 1 else np.zeros(1)
    if w == 1:
        xs = np.zeros(side)
    if h == 1:
        ys = np.zeros(side)
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    # values[y][x]: w indexes the horizontal axis of the rendered heatmap
    g00 = grid[np.ix_(x0, y0)]
    g01 = grid[np.ix_(x0, y1)]
    g10 = grid[np.ix_(x1, y0)]
    g11 = grid[np.ix_(x1, y1)]
    wx = fx[:, None]
    wy = fy[None, :]
    vals_wh = (g00 * (1 - wx) * (1 - wy) + g01 * (1 - wx) * wy
               + g10 * wx * (1 - wy) + g11 * wx * wy)
    return vals_wh.T.copy()


def extract_bbox(values: np.ndarray, percentile: float) -> tuple[int, int, int, int]:
    """Inclusive (x0, y0, x1, y1) box around all pixels >= the percentile
    threshold. An all-equal map thresholds everywhere, giving the full image."""
    threshold = np.percentile(values, percentile)
    mask = values >= threshold
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def render_heatmap(map_wh: np.ndarray, cfg: SimilarityConfig,
                   prototype_index: int = 0, side: int | None = None) -> Heatmap:
    """Upscale one similarity map and attach its bounding box."""
    map_wh = np.asarray(map_wh, dtype=np.float64)
    if not np.all(np.isfinite(map_wh)):
        raise NumericalError("heatmap input contains non-finite values")
    if side is None:
        side = cfg.heatmap_side
    if side is None:
        raise DomainError("heatmap side unset: pass side or set cfg.heatmap_side")
    values = bilinear_upscale(map_wh, side)
    bbox = extract_bbox(values, cfg.bbox_percentile)
    return Heatmap(values=values, prototype_index=prototype_index, bbox=bbox)


def heatmap_pixels(heatmap: Heatmap) -> tuple[np.ndarray, tuple[float, float]]:
    """Min-max scaled 8-bit pixels plus the raw value range."""
    vals = heatmap.values
    lo, hi = float(vals.min()), float(vals.max())
    if hi > lo:
        scaled = np.round((vals - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(vals)
    return scaled.astype(np.uint8), (lo, hi)


def write_heatmap_png(heatmap: Heatmap, png_path: str) -> tuple[float, float]:
    """Write the grayscale PNG alone; returns the raw value range."""
    pixels, value_range = heatmap_pixels(heatmap)
    Image.fromarray(pixels, mode="L").save(png_path)
    return value_range


def export_heatmap(heatmap: Heatmap, png_path: str, pooled_score: float) -> None:
    """Write an 8-bit grayscale PNG plus a JSON sidecar.

    Pixel values are min-max scaled per map; the sidecar records the raw
    value range alongside prototype index, pooled score, and bbox.
    """
    lo, hi = write_heatmap_png(heatmap, png_path)
    sidecar = {
        "prototype_index": int(heatmap.prototype_index),
        "pooled_score": float(pooled_score),
        "bbox": [int(v) for v in heatmap.bbox],
        "value_range": [lo, hi],
    }
    with open(png_path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
