"""Core architecture: backbone + 1x1 adapter feature extractor, prototype
bank, linear classifier head, single-image inference, and the checkpoint
archive format.

Layout conventions: torch feature maps are (B, D, H, W); the public latent
volume of one image is (W, H, D) with w along the horizontal axis. Patches
flatten in w-major order, l = w*H + h, everywhere (training, projection,
export), so patch indices and (w, h) coordinates are interchangeable.

The adapter is two 1x1 convolutions, ReLU after the first and a sigmoid
after the second, squashing latent entries into (0, 1) so that patches and
the uniform-[0,1]-initialized prototypes occupy a compatible range.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, SimilarityConfig
from .errors import ConfigurationError, DimensionError, NumericalError
from .similarity import SimilarityResult, similarity_maps

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class LatentVolume:
    """One image's latent grid, shaped (W, H, D)."""

    data: np.ndarray
    source_image_id: str = ""


@dataclass
class Prediction:
    """Classifier output for one image."""

    logits: np.ndarray
    probabilities: np.ndarray
    predicted_class: int
    similarity: SimilarityResult


class PrototypeBank(nn.Module):
    """P = M*K prototype vectors; row p belongs to class p // M."""

    def __init__(self, num_classes: int, per_class: int, depth: int):
        super().__init__()
        self.num_classes = num_classes
        self.per_class = per_class
        self.tensors = nn.Parameter(torch.zeros(num_classes * per_class, depth))
        self.register_buffer(
            "class_index",
            torch.arange(num_classes * per_class, dtype=torch.int64) // per_class,
        )
        self.projection_meta: list[dict] | None = None

    @property
    def class_of(self) -> np.ndarray:
        return self.class_index.cpu().numpy()

    def prototype_index(self, m: int, k: int) -> int:
        return k * self.per_class + m


class ClassifierHead(nn.Module):
    """Dense layer over pooled similarity scores."""

    def __init__(self, num_classes: int, num_prototypes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(num_classes, num_prototypes))
        self.bias = nn.Parameter(torch.zeros(num_classes))

    def paper_init(self, per_class: int) -> None:
        """Weight 1 between a prototype and its own class, 0 elsewhere."""
        with torch.no_grad():
            self.weight.zero_()
            self.bias.zero_()
            for p in range(self.weight.shape[1]):
                self.weight[p // per_class, p] = 1.0

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return pooled @ self.weight.t() + self.bias


class SimpleCNN(nn.Module):
    """Four 3x3 conv blocks trainable from scratch.

    Blocks max-pool while the grid is still at least twice the target; a
    final exact adaptive average pool handles remaining mismatch, so any
    input side >= the target grid works (224 -> 7x7 included).
    """

    channels = (16, 32, 32, 32)

    def __init__(self, input_side: int, grid_w: int, grid_h: int):
        super().__init__()
        if input_side < max(grid_w, grid_h):
            raise ConfigurationError(
                f"input side {input_side} smaller than latent grid ({grid_w}x{grid_h})"
            )
        layers: list[nn.Module] = []
        cur_w = cur_h = input_side
        in_ch = 3
        for out_ch in self.channels:
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            if cur_w // 2 >= grid_w and cur_h // 2 >= grid_h:
                layers.append(nn.MaxPool2d(2))
                cur_w //= 2
                cur_h //= 2
            in_ch = out_ch
        if (cur_h, cur_w) != (grid_h, grid_w):
            layers.append(nn.AdaptiveAvgPool2d((grid_h, grid_w)))
        self.features = nn.Sequential(*layers)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


_TORCHVISION_DOWNSAMPLE = 32
_TORCHVISION_CHANNELS = {"vgg16-like": 512, "resnet50-like": 2048, "densenet201-like": 1920}


def _build_torchvision_backbone(cfg: ModelConfig, load_pretrained: bool) -> nn.Module:
    from torchvision import models

    expected_w = cfg.input_side // _TORCHVISION_DOWNSAMPLE
    if (cfg.input_side % _TORCHVISION_DOWNSAMPLE != 0
            or expected_w != cfg.grid_w or expected_w != cfg.grid_h):
        raise ConfigurationError(
            f"backbone {cfg.backbone_id} downsamples by {_TORCHVISION_DOWNSAMPLE}: "
            f"input {cfg.input_side} yields a {expected_w}x{expected_w} grid, "
            f"configured ({cfg.grid_w}x{cfg.grid_h})"
        )
    if cfg.backbone_id == "vgg16-like":
        net: nn.Module = models.vgg16(weights=None).features
    elif cfg.backbone_id == "resnet50-like":
        resnet = models.resnet50(weights=None)
        net = nn.Sequential(resnet.conv1, resnet.bn1, resnet.relu, resnet.maxpool,
                            resnet.layer1, resnet.layer2, resnet.layer3, resnet.layer4)
    else:
        net = models.densenet201(weights=None).features
    if load_pretrained:
        if cfg.pretrained_weights is None:
            raise ConfigurationError(
                f"backbone {cfg.backbone_id} requires model.pretrained_weights "
                "(a torch state_dict file); only simple-cnn trains from scratch"
            )
        state = torch.load(cfg.pretrained_weights, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    return net


class ProtoPartsModel(nn.Module):
    """Feature extractor f (backbone + adapter) with bank and head."""

    def __init__(self, cfg: ModelConfig, load_pretrained: bool = True):
        super().__init__()
        problems = cfg.validate()
        if problems:
            raise ConfigurationError("; ".join(problems))
        self.cfg = cfg
        if cfg.backbone_id == "simple-cnn":
            self.backbone: nn.Module = SimpleCNN(cfg.input_side, cfg.grid_w, cfg.grid_h)
            bb_channels = self.backbone.out_channels
        else:
            self.backbone = _build_torchvision_backbone(cfg, load_pretrained)
            bb_channels = _TORCHVISION_CHANNELS[cfg.backbone_id]
        self.adapter = nn.Sequential(
            nn.Conv2d(bb_channels, cfg.latent_depth, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(cfg.latent_depth, cfg.latent_depth, kernel_size=1),
            nn.Sigmoid(),
        )
        self.bank = PrototypeBank(cfg.num_classes, cfg.prototypes_per_class,
                                  cfg.latent_depth)
        self.head = ClassifierHead(cfg.num_classes, cfg.num_prototypes)

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> (B, D, H, W); raises if the grid disagrees."""
        feats = self.adapter(self.backbone(images))
        if feats.shape[2] != self.cfg.grid_h or feats.shape[3] != self.cfg.grid_w:
            raise ConfigurationError(
                f"backbone produced a {feats.shape[3]}x{feats.shape[2]} grid, "
                f"configured ({self.cfg.grid_w}x{self.cfg.grid_h})"
            )
        return feats

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.extract(images)

    def extractor_parameters(self):
        yield from self.backbone.parameters()
        yield from self.adapter.parameters()


def flatten_patches(feats: torch.Tensor) -> torch.Tensor:
    """(B, D, H, W) -> (B, W*H, D) in w-major patch order, l = w*H + h."""
    if feats.ndim != 4:
        raise DimensionError(f"expected (B, D, H, W), got {tuple(feats.shape)}")
    b, d, h, w = feats.shape
    return feats.permute(0, 3, 2, 1).reshape(b, w * h, d)


def patch_coords(l: int, grid_h: int) -> tuple[int, int]:
    """Invert w-major flattening: patch index -> (w, h)."""
    return l // grid_h, l % grid_h


def latent_volume(feats_one: torch.Tensor, image_id: str = "") -> LatentVolume:
    """(D, H, W) feature map of one image -> LatentVolume (W, H, D)."""
    if feats_one.ndim != 3:
        raise DimensionError(f"expected (D, H, W), got {tuple(feats_one.shape)}")
    data = feats_one.detach().cpu().numpy().transpose(2, 1, 0)
    return LatentVolume(data=np.ascontiguousarray(data), source_image_id=image_id)


def extract_features(model: ProtoPartsModel, image, image_id: str = "") -> LatentVolume:
    """Whitened (S, S, 3) image -> LatentVolume, deterministically."""
    arr = np.asarray(image, dtype=np.float32)
    side = model.cfg.input_side
    if arr.shape != (side, side, 3):
        raise DimensionError(
            f"expected a ({side}, {side}, 3) image, got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise NumericalError("image contains non-finite values")
    with torch.no_grad():
        tens = torch.from_numpy(arr.transpose(2, 0, 1))[None]
        feats = model.extract(tens)[0]
    return latent_volume(feats, image_id)


def extract_latents(model: ProtoPartsModel, images: torch.Tensor,
                    batch_size: int = 256) -> torch.Tensor:
    """Batched no-grad extraction; fixed batching so repeated calls on the
    same inputs are bit-identical. (N, 3, S, S) -> (N, D, H, W)."""
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs.append(model.extract(images[start:start + batch_size]))
    return torch.cat(outs, dim=0)


def classify(latent, bank, head, sim_cfg: SimilarityConfig) -> Prediction:
    """Similarity maps -> pooled scores -> head logits -> softmax.

    Pure function of its inputs. Ties in the predicted class resolve to the
    lowest class index.
    """
    sim = similarity_maps(latent, bank, sim_cfg)
    weight = head.weight.detach().cpu().numpy().astype(np.float64)
    bias = head.bias.detach().cpu().numpy().astype(np.float64)
    logits = weight @ sim.pooled + bias
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    return Prediction(
        logits=logits,
        probabilities=probs,
        predicted_class=int(np.argmax(probs)),
        similarity=sim,
    )


def training_config_digest(training_cfg_dict: dict) -> str:
    canonical = json.dumps(training_cfg_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _little_endian(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype.newbyteorder("<")
    return arr.astype(dt, copy=False)


def save_checkpoint(path: str, model: ProtoPartsModel, meta: dict,
                    extra_arrays: dict | None = None) -> None:
    """Write a single .npz archive: every parameter/buffer as a
    little-endian array plus a ``__meta__`` JSON block (uint8 bytes).

    ``meta`` must be JSON-serializable; model_config is added here.
    """
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays["param/" + name] = _little_endian(tensor.detach().cpu().numpy())
    for name, arr in (extra_arrays or {}).items():
        arrays["extra/" + name] = _little_endian(np.asarray(arr))
    full_meta = dict(meta)
    full_meta["format_version"] = CHECKPOINT_FORMAT_VERSION
    full_meta["model_config"] = {
        "num_classes": model.cfg.num_classes,
        "prototypes_per_class": model.cfg.prototypes_per_class,
        "backbone_id": model.cfg.backbone_id,
        "input_side": model.cfg.input_side,
        "latent_depth": model.cfg.latent_depth,
        "grid_w": model.cfg.grid_w,
        "grid_h": model.cfg.grid_h,
        "pretrained_weights": model.cfg.pretrained_weights,
    }
    full_meta["projection_meta"] = model.bank.projection_meta
    blob = json.dumps(full_meta, sort_keys=True).encode("utf-8")
    arrays["__meta__"] = np.frombuffer(blob, dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[ProtoPartsModel, dict, dict]:
    """Read an archive back: (model, meta, extra_arrays)."""
    with np.load(path, allow_pickle=False) as npz:
        names = list(npz.files)
        meta = json.loads(bytes(npz["__meta__"]).decode("utf-8"))
        params = {n[len("param/"):]: np.array(npz[n]) for n in names
                  if n.startswith("param/")}
        extras = {n[len("extra/"):]: np.array(npz[n]) for n in names
                  if n.startswith("extra/")}
    mc = meta["model_config"]
    cfg = ModelConfig(
        num_classes=mc["num_classes"],
        prototypes_per_class=mc["prototypes_per_class"],
        backbone_id=mc["backbone_id"],
        input_side=mc["input_side"],
        latent_depth=mc["latent_depth"],
        grid_w=mc["grid_w"],
        grid_h=mc["grid_h"],
        pretrained_weights=mc.get("pretrained_weights"),
    )
    model = ProtoPartsModel(cfg, load_pretrained=False)
    state = {name: torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=False))
             for name, arr in params.items()}
    model.load_state_dict(state)
    model.bank.projection_meta = meta.get("projection_meta")
    return model, meta, extras
