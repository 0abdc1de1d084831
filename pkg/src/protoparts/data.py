"""Dataset manifests, train/test splitting, whitening, the geometric
augmentation policy, and a synthetic attribute-separable dataset generator.

Manifest format (JSON lines): the first line is a header object carrying
``class_names`` (ordered) and optional generator metadata; every following
line is an entry {image_path, label, view, patch_id} with label a class
name, view in {surface, section}, and a globally unique patch_id. Image
paths resolve relative to the manifest's directory.

The synthetic generator emits classes separated by a single controlled
attribute each (hue band, saturation level, brightness level, or texture
granularity) so that attribute-level explanation claims can be exercised at
desk scale. Same seed, same bytes.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .color import hsi_to_rgb
from .config import AugmentationPolicy
from .errors import ValidationError

VIEWS = ("surface", "section")

TRANSFORM_NAMES = ("hflip", "vflip", "rotation", "perspective", "scaling",
                   "translation", "padding")


@dataclass
class ManifestEntry:
    image_path: str
    label: str
    view: str
    patch_id: str


@dataclass
class DatasetManifest:
    class_names: list[str]
    entries: list[ManifestEntry]
    root: str = "."
    header_extra: dict = field(default_factory=dict)

    def label_index(self, label: str) -> int:
        return self.class_names.index(label)

    def resolve_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.image_path)


@dataclass
class WhiteningStats:
    """Per-channel standardization statistics of a named split."""

    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,)
    computed_on: str


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"class_names": manifest.class_names}
        header.update(manifest.header_extra)
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps(
                {"image_path": e.image_path, "label": e.label,
                 "view": e.view, "patch_id": e.patch_id},
                sort_keys=True) + "\n")


def load_manifest(path: str) -> DatasetManifest:
    problems, manifest = _read_manifest(path, check_paths=True)
    if problems:
        raise ValidationError(
            "invalid manifest:\n" + "\n".join(f"  - {p}" for p in problems)
        )
    return manifest


def validate_manifest_file(path: str) -> list[str]:
    """Return every problem found; empty list means valid."""
    problems, _ = _read_manifest(path, check_paths=True)
    return problems


def _read_manifest(path: str, check_paths: bool) -> tuple[list[str], DatasetManifest]:
    problems: list[str] = []
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except OSError as exc:
        return [f"cannot read manifest: {exc}"], DatasetManifest([], [], root)
    if not lines:
        return ["manifest is empty"], DatasetManifest([], [], root)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        return [f"line 1: invalid JSON ({exc})"], DatasetManifest([], [], root)
    class_names = header.get("class_names")
    if not isinstance(class_names, list) or not class_names:
        return ["header must carry a non-empty class_names list"], DatasetManifest([], [], root)
    extra = {k: v for k, v in header.items() if k != "class_names"}
    entries: list[ManifestEntry] = []
    seen_ids: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"line {lineno}: invalid JSON ({exc})")
            continue
        missing = [k for k in ("image_path", "label", "view", "patch_id") if k not in rec]
        if missing:
            problems.append(f"line {lineno}: missing keys {missing}")
            continue
        if rec["label"] not in class_names:
            problems.append(f"line {lineno}: unknown label {rec['label']!r}")
        if rec["view"] not in VIEWS:
            problems.append(f"line {lineno}: view must be one of {VIEWS}")
        if rec["patch_id"] in seen_ids:
            problems.append(f"line {lineno}: duplicate patch_id {rec['patch_id']!r}")
        seen_ids.add(rec["patch_id"])
        if check_paths and not os.path.exists(os.path.join(root, rec["image_path"])):
            problems.append(f"line {lineno}: missing image file {rec['image_path']!r}")
        entries.append(ManifestEntry(rec["image_path"], rec["label"],
                                     rec["view"], rec["patch_id"]))
    return problems, DatasetManifest(class_names, entries, root, extra)


def load_and_split(manifest: DatasetManifest, train_fraction: float = 0.8,
                   seed: int = 0) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Stratified per-class split, deterministic under seed."""
    if not (0 < train_fraction <= 1):
        raise ValidationError("train_fraction must lie in (0, 1]")
    rng = np.random.default_rng([seed, 9151])
    train: list[ManifestEntry] = []
    test: list[ManifestEntry] = []
    for name in manifest.class_names:
        members = [i for i, e in enumerate(manifest.entries) if e.label == name]
        perm = rng.permutation(len(members))
        n_train = int(round(train_fraction * len(members)))
        chosen = set(perm[:n_train].tolist())
        for j, idx in enumerate(members):
            (train if j in chosen else test).append(manifest.entries[idx])
    if not test:
        warnings.warn("train_fraction leaves an empty test set")
    return train, test


def load_image(path: str, side: int) -> np.ndarray:
    """PNG -> float32 (side, side, 3) in [0, 1]; bilinear resize if needed."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (side, side):
            img = img.resize((side, side), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr


def load_entries(manifest: DatasetManifest, entries: list[ManifestEntry],
                 side: int) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Load images for entries: (N, side, side, 3) float32, labels, ids."""
    images = np.empty((len(entries), side, side, 3), dtype=np.float32)
    labels = np.empty(len(entries), dtype=np.int64)
    ids = []
    for i, e in enumerate(entries):
        images[i] = load_image(manifest.resolve_path(e), side)
        labels[i] = manifest.label_index(e.label)
        ids.append(e.patch_id)
    return images, labels, ids


def compute_whitening(images: np.ndarray, computed_on: str = "train") -> WhiteningStats:
    """Dataset-wide per-channel mean/std over all pixels of a split."""
    flat = images.reshape(-1, 3).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std <= 0):
        raise ValidationError("whitening: a channel has zero variance")
    return WhiteningStats(mean=mean, std=std, computed_on=computed_on)


def whiten(image: np.ndarray, stats: WhiteningStats) -> np.ndarray:
    """Per-channel (I - m) / sigma; accepts single images or batches."""
    arr = np.asarray(image, dtype=np.float32)
    m = stats.mean.astype(np.float32)
    s = stats.std.astype(np.float32)
    return (arr - m) / s


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))


def _to_numpy(tensor: torch.Tensor) -> np.ndarray:
    return tensor.numpy().transpose(1, 2, 0)


def apply_transform(image: np.ndarray, name: str, params: dict) -> np.ndarray:
    """Apply one named geometric transform with explicit parameters.

    Shared by the live augmentation path and trace replay; every transform
    preserves the (side, side, 3) shape.
    """
    from torchvision.transforms.v2 import functional as tvf

    side = image.shape[0]
    if name == "hflip":
        return image[:, ::-1, :].copy()
    if name == "vflip":
        return image[::-1, :, :].copy()
    tens = _to_tensor(image)
    bilinear = tvf.InterpolationMode.BILINEAR
    if name == "rotation":
        out = tvf.rotate(tens, params["angle"], interpolation=bilinear)
    elif name == "perspective":
        out = tvf.perspective(tens, params["startpoints"], params["endpoints"],
                              interpolation=bilinear)
    elif name == "scaling":
        out = tvf.affine(tens, angle=0.0, translate=[0, 0], scale=params["factor"],
                         shear=[0.0, 0.0], interpolation=bilinear)
    elif name == "translation":
        out = tvf.affine(tens, angle=0.0,
                         translate=[params["dx"], params["dy"]], scale=1.0,
                         shear=[0.0, 0.0], interpolation=bilinear)
    elif name == "padding":
        pad = int(params["pixels"])
        if pad == 0:
            return image.copy()
        arr = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="symmetric")
        out = tvf.resize(_to_tensor(arr), [side, side], interpolation=bilinear,
                         antialias=True)
    else:
        raise ValidationError(f"unknown transform {name!r}")
    return _to_numpy(out)


def _draw_params(name: str, policy: AugmentationPolicy, side: int,
                 rng: np.random.Generator) -> dict:
    if name in ("hflip", "vflip"):
        return {}
    if name == "rotation":
        return {"angle": float(rng.uniform(-policy.rotation_degrees,
                                           policy.rotation_degrees))}
    if name == "perspective":
        half_w = policy.perspective_distortion * side / 2.0
        corners = [[0, 0], [side - 1, 0], [side - 1, side - 1], [0, side - 1]]
        jitter = rng.uniform(0.0, half_w, size=(4, 2))
        signs = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
        endpoints = (np.asarray(corners, dtype=np.float64) + jitter * signs).tolist()
        return {"startpoints": corners, "endpoints": endpoints}
    if name == "scaling":
        return {"factor": float(rng.uniform(1.0 - policy.scale_limit,
                                            1.0 + policy.scale_limit))}
    if name == "translation":
        limit = policy.translate_fraction * side
        return {"dx": float(rng.uniform(-limit, limit)),
                "dy": float(rng.uniform(-limit, limit))}
    if name == "padding":
        return {"pixels": int(rng.integers(0, policy.pad_max_px + 1))}
    raise ValidationError(f"unknown transform {name!r}")


def augment(image: np.ndarray, policy: AugmentationPolicy,
            rng: np.random.Generator, trace: list | None = None) -> np.ndarray:
    """Draw one transform uniformly, apply it with ``apply_probability``.

    Geometry only; the label and image shape are unchanged. Appends a
    replayable record to ``trace`` when given.
    """
    name = TRANSFORM_NAMES[int(rng.integers(0, len(TRANSFORM_NAMES)))]
    applied = bool(rng.random() < policy.apply_probability)
    params = _draw_params(name, policy, image.shape[0], rng) if applied else {}
    if trace is not None:
        trace.append({"transform": name, "applied": applied, "params": params})
    if not applied:
        return image
    return apply_transform(image, name, params)


def replay_trace(image: np.ndarray, record: dict) -> np.ndarray:
    if not record["applied"]:
        return image
    return apply_transform(image, record["transform"], record["params"])


# --- synthetic dataset -----------------------------------------------------

GENERATOR_VERSION = 6

# The non-hue classes sit at fixed incidental hues chosen so that a 90 degree
# hue rotation maps each hue class near another class's hue territory
# (red 0 -> 90 = striped, green 120 -> 210 = dark); rotated images then read
# as a different class rather than as an unfamiliar in-between color.
_BASE_RECIPES = (
    {"name": "hue-red", "defining_attribute": "hue", "hue_deg": 0.0,
     "saturation": 0.8, "intensity": 0.48, "texture": "smooth"},
    {"name": "hue-green", "defining_attribute": "hue", "hue_deg": 120.0,
     "saturation": 0.8, "intensity": 0.48, "texture": "smooth"},
    {"name": "hue-blue", "defining_attribute": "hue", "hue_deg": 240.0,
     "saturation": 0.8, "intensity": 0.48, "texture": "smooth"},
    {"name": "low-sat", "defining_attribute": "saturation", "hue_deg": 0.0,
     "saturation": 0.12, "intensity": 0.48, "texture": "smooth"},
    {"name": "dark", "defining_attribute": "brightness", "hue_deg": 210.0,
     "saturation": 0.8, "intensity": 0.16, "texture": "smooth"},
    {"name": "striped", "defining_attribute": "texture", "hue_deg": 90.0,
     "saturation": 0.8, "intensity": 0.48, "texture": "stripes"},
)


def synthetic_recipes(num_classes: int) -> list[dict]:
    recipes = []
    for k in range(num_classes):
        base = dict(_BASE_RECIPES[k % len(_BASE_RECIPES)])
        shift = 17.0 * (k // len(_BASE_RECIPES))
        if shift:
            base["hue_deg"] = (base["hue_deg"] + shift) % 360.0
            base["name"] = f"{base['name']}-{k // len(_BASE_RECIPES)}"
        recipes.append(base)
    return recipes


def _smooth_field(rng: np.random.Generator, side: int, sigma: float) -> np.ndarray:
    """Low-frequency noise field normalized to max |value| = 1."""
    noise = rng.normal(0.0, 1.0, (side, side))
    smooth = ndimage.gaussian_filter(noise, sigma=sigma, mode="reflect")
    peak = np.abs(smooth).max()
    return smooth / (peak if peak > 0 else 1.0)


def _stripe_wave(side: int, freq: float, phi: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    axis = xx * np.cos(phi) + yy * np.sin(phi)
    return np.sin(2.0 * np.pi * freq * axis / side + phase)


def _synthetic_image(recipe: dict, side: int, rng: np.random.Generator) -> np.ndarray:
    # Each image is split into three horizontal appearance bands (plain,
    # ridged, shaded, in random vertical order). The class-defining attribute
    # holds everywhere, so classes stay separable, while the bands give every
    # class three recurring patch appearances: part-based learners can commit
    # one prototype per band instead of sampling near-duplicate patches.
    hue = np.deg2rad(recipe["hue_deg"] + rng.uniform(-16.0, 16.0))
    sat = np.clip(recipe["saturation"] + rng.uniform(-0.12, 0.12), 0.02, 0.98)
    inten = np.clip(recipe["intensity"] + rng.uniform(-0.10, 0.10), 0.05, 0.95)

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    if recipe["texture"] == "stripes":
        freq = rng.uniform(3.0, 5.0)
        phi = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        tex = 0.26 * _stripe_wave(side, freq, phi, phase)
    else:
        tex = 0.05 * _smooth_field(rng, side, sigma=side / 8.0)

    ramp_dir = rng.uniform(0.0, 2.0 * np.pi)
    ramp = 0.04 * ((xx * np.cos(ramp_dir) + yy * np.sin(ramp_dir)) / side - 0.5)

    int_field = np.clip(inten + tex + ramp, 0.02, 0.98)
    sat_field = np.clip(sat + 0.08 * _smooth_field(rng, side, sigma=side / 6.0),
                        0.0, 1.0)

    # Band layout: jittered thirds, treatments shuffled per image. The ridged
    # band carries its own stripe overlay (a second, finer frequency when the
    # class is striped everywhere); the shaded band drops intensity.
    third = side / 3.0
    b1 = int(round(third + rng.uniform(-2.0, 2.0)))
    b2 = int(round(2.0 * third + rng.uniform(-2.0, 2.0)))
    b1 = max(4, min(side - 8, b1))
    b2 = max(b1 + 4, min(side - 4, b2))
    rows = [slice(0, b1), slice(b1, b2), slice(b2, side)]
    order = rng.permutation(3)

    ridge_freq = rng.uniform(6.5, 9.5)
    ridge = 0.24 * _stripe_wave(side, ridge_freq, rng.uniform(0.0, np.pi),
                                rng.uniform(0.0, 2.0 * np.pi))
    shade = rng.uniform(0.50, 0.60)
    for band, treatment in zip(rows, order):
        if treatment == 1:
            int_field[band] = np.clip(int_field[band] + ridge[band], 0.02, 0.98)
        elif treatment == 2:
            int_field[band] = np.clip(int_field[band] * shade, 0.02, 0.98)

    hue_field = hue + np.deg2rad(12.0) * _smooth_field(rng, side, sigma=side / 6.0)
    rgb = hsi_to_rgb(np.stack([hue_field, sat_field, int_field], axis=-1))
    rgb = rgb + rng.normal(0.0, 0.02, rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def generate_synthetic(num_classes: int, per_class: int, side: int, seed: int,
                       out_dir: str) -> DatasetManifest:
    """Write PNGs plus a manifest; deterministic to the byte under seed."""
    if num_classes < 2 or per_class < 1 or side < 4:
        raise ValidationError("synthetic set needs >= 2 classes, >= 1 image, side >= 4")
    recipes = synthetic_recipes(num_classes)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    entries = []
    for k, recipe in enumerate(recipes):
        for i in range(per_class):
            rng = np.random.default_rng([seed, k, i])
            rgb = _synthetic_image(recipe, side, rng)
            img8 = np.round(rgb * 255.0).astype(np.uint8)
            rel = os.path.join("images", f"class{k:02d}_{i:04d}.png")
            Image.fromarray(img8, mode="RGB").save(os.path.join(out_dir, rel))
            entries.append(ManifestEntry(
                image_path=rel,
                label=recipe["name"],
                view=VIEWS[i % 2],
                patch_id=f"c{k:02d}i{i:04d}",
            ))
    manifest = DatasetManifest(
        class_names=[r["name"] for r in recipes],
        entries=entries,
        root=os.path.abspath(out_dir),
        header_extra={
            "class_attributes": recipes,
            "generator": {"num_classes": num_classes, "per_class": per_class,
                          "side": side, "seed": seed},
        },
    )
    write_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    return manifest
