"""RGB <-> hue/saturation/intensity conversion (classic HSI formulation).

Definitions for RGB in [0, 1]:
  I = (R + G + B) / 3
  S = 1 - min(R, G, B) / I          (0 where I = 0)
  H = arccos(((R-G) + (R-B)) / (2 * sqrt((R-G)^2 + (R-B)(G-B)))),
      reflected to 2*pi - H where B > G; undefined (set to 0) on gray pixels.

The inverse works sector-wise (RG / GB / BR thirds of the hue circle).
Conversions are vectorized over (..., 3) arrays, run in float64, and round
trip within ~1e-6 away from the gray singularity. Inverse outputs may
slightly exceed [0, 1] for extreme saturated inputs; callers clamp.
"""

from __future__ import annotations

import numpy as np

_TWO_PI = 2.0 * np.pi
_THIRD = _TWO_PI / 3.0


def rgb_to_hsi(rgb: np.ndarray) -> np.ndarray:
    """(..., 3) RGB in [0, 1] -> (..., 3) HSI with H in [0, 2*pi)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    intensity = (r + g + b) / 3.0
    low = np.minimum(np.minimum(r, g), b)
    sat = np.where(intensity > 0, 1.0 - low / np.where(intensity > 0, intensity, 1.0), 0.0)
    num = 0.5 * ((r - g) + (r - b))
    den = np.sqrt((r - g) ** 2 + (r - b) * (g - b))
    valid = den > 1e-12
    cosang = np.clip(num / np.where(valid, den, 1.0), -1.0, 1.0)
    theta = np.arccos(cosang)
    hue = np.where(b <= g, theta, _TWO_PI - theta)
    hue = np.where(valid & (sat > 0), hue, 0.0)
    hue = np.mod(hue, _TWO_PI)
    return np.stack([hue, sat, intensity], axis=-1)


def hsi_to_rgb(hsi: np.ndarray) -> np.ndarray:
    """(..., 3) HSI -> (..., 3) RGB; sector-wise inverse of rgb_to_hsi."""
    hsi = np.asarray(hsi, dtype=np.float64)
    hue = np.mod(hsi[..., 0], _TWO_PI)
    sat = hsi[..., 1]
    intensity = hsi[..., 2]

    sector = np.floor_divide(hue, _THIRD).astype(np.int64)  # 0, 1, 2
    local = hue - sector * _THIRD
    # guard cos(pi/3 - local) ~ 0 only at local = 5*pi/6, outside [0, 2*pi/3)
    chroma = intensity * (1.0 + sat * np.cos(local) / np.cos(np.pi / 3.0 - local))
    floor_ch = intensity * (1.0 - sat)
    rest = 3.0 * intensity - (chroma + floor_ch)

    r = np.where(sector == 0, chroma, np.where(sector == 1, floor_ch, rest))
    g = np.where(sector == 0, rest, np.where(sector == 1, chroma, floor_ch))
    b = np.where(sector == 0, floor_ch, np.where(sector == 1, rest, chroma))
    return np.stack([r, g, b], axis=-1)


def rotate_hue(rgb: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate the hue channel by ``degrees``; saturation/intensity kept."""
    hsi = rgb_to_hsi(rgb)
    hsi[..., 0] = np.mod(hsi[..., 0] + np.deg2rad(degrees), _TWO_PI)
    return hsi_to_rgb(hsi)


def scale_saturation(rgb: np.ndarray, factor: float) -> np.ndarray:
    """Scale the saturation channel; factor 0 is full desaturation."""
    hsi = rgb_to_hsi(rgb)
    hsi[..., 1] = hsi[..., 1] * factor
    return hsi_to_rgb(hsi)
