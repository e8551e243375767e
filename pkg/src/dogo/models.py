"""Encoders, projector/predictor heads and the PeerModel wrapper.

Three encoder families are available, all sharing the same stem rule: with
``small_image_stem`` the first convolution is 3x3/stride 1 and no max-pool
follows; otherwise the ImageNet 7x7/stride 2 conv + 3x3 max-pool is used.

* ``small-conv`` - a plain stack of conv-BN-ReLU stages (desk presets).
* ``resnet`` - basic-block or bottleneck ResNet with configurable stage depths.
* ``wide-resnet`` - pre-activation WRN-d-k.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .errors import DimensionMismatch, NoPredictor, PredictorRequired, ShapeMismatch

OBJECTIVES = ("contrastive", "simsiam")
FAMILIES = ("small-conv", "resnet", "wide-resnet")


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder architecture.

    ``depth_spec`` meaning depends on ``family``:

    * small-conv: ``(widths, blocks_per_stage)``, e.g. ``((16, 32, 64, 128), 1)``
    * resnet: ``(block, stage_depths, base_width)``, block in {"basic", "bottleneck"}
    * wide-resnet: ``(depth, widen_factor)``, e.g. ``(16, 2)``
    """

    family: str = "small-conv"
    depth_spec: tuple = ((16, 32, 64, 128), 1)
    small_image_stem: bool = True
    in_channels: int = 3
    image_size: int = 32

    @property
    def feature_dim(self) -> int:
        if self.family == "small-conv":
            return int(self.depth_spec[0][-1])
        if self.family == "resnet":
            block, depths, base = self.depth_spec
            return base * 2 ** (len(depths) - 1) * (4 if block == "bottleneck" else 1)
        if self.family == "wide-resnet":
            _, k = self.depth_spec
            return 64 * k
        raise ValueError(f"unknown encoder family {self.family!r}")


@dataclass(frozen=True)
class ProjectorConfig:
    hidden_dim: int
    output_dim: int = 128


@dataclass(frozen=True)
class PredictorConfig:
    hidden_dim: int
    output_dim: int = 128


# name -> EncoderConfig; "larger peer" presets have strictly more parameters
ENCODER_PRESETS = {
    "conv4": EncoderConfig("small-conv", ((16, 32, 64, 128), 1)),
    "conv8": EncoderConfig("small-conv", ((16, 32, 64, 128), 2)),
    "conv4-wide": EncoderConfig("small-conv", ((32, 64, 128, 256), 1)),
    "resnet10": EncoderConfig("resnet", ("basic", (1, 1, 1, 1), 64)),
    "resnet18": EncoderConfig("resnet", ("basic", (2, 2, 2, 2), 64)),
    "resnet34": EncoderConfig("resnet", ("basic", (3, 4, 6, 3), 64)),
    "resnet50": EncoderConfig("resnet", ("bottleneck", (3, 4, 6, 3), 64)),
    "resnet18-tiny": EncoderConfig("resnet", ("basic", (2, 2, 2, 2), 16)),
    "resnet10-tiny": EncoderConfig("resnet", ("basic", (1, 1, 1, 1), 16)),
    "wrn-10-2": EncoderConfig("wide-resnet", (10, 2)),
    "wrn-16-2": EncoderConfig("wide-resnet", (16, 2)),
    "wrn-28-2": EncoderConfig("wide-resnet", (28, 2)),
}

# (smaller, larger) pairs whose ordering is part of the contract
PRESET_PAIRS = [
    ("conv4", "conv8"),
    ("conv4", "conv4-wide"),
    ("resnet10-tiny", "resnet18-tiny"),
    ("resnet18", "resnet34"),
    ("resnet34", "resnet50"),
    ("wrn-10-2", "wrn-16-2"),
    ("wrn-16-2", "wrn-28-2"),
]


def encoder_preset(name: str, image_size: int = 32, small_image_stem: bool = True) -> EncoderConfig:
    try:
        base = ENCODER_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown encoder preset {name!r}; choose from {sorted(ENCODER_PRESETS)}") from None
    return EncoderConfig(base.family, base.depth_spec, small_image_stem, base.in_channels, image_size)


def _stem(in_ch: int, out_ch: int, small_image_stem: bool, bn_relu: bool = True) -> nn.Sequential:
    if small_image_stem:
        layers = [nn.Conv2d(in_ch, out_ch, 3, stride=1, padding=1, bias=False)]
    else:
        layers = [nn.Conv2d(in_ch, out_ch, 7, stride=2, padding=3, bias=False)]
    if bn_relu:
        layers += [nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True)]
    if not small_image_stem:
        layers.append(nn.MaxPool2d(3, stride=2, padding=1))
    return nn.Sequential(*layers)


def _conv_bn_relu(in_ch: int, out_ch: int, stride: int) -> list:
    return [nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True)]


class SmallConvEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        widths, per_stage = cfg.depth_spec
        self.stem = _stem(cfg.in_channels, widths[0], cfg.small_image_stem)
        layers = []
        c = widths[0]
        for s, w in enumerate(widths):
            for b in range(per_stage):
                if s == 0 and b == 0:
                    continue  # the stem is the first block
                layers += _conv_bn_relu(c, w, 2 if (b == 0 and s > 0) else 1)
                c = w
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.body(self.stem(x))), 1)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch, ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, ch, 1, stride, bias=False), nn.BatchNorm2d(ch))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch, ch, stride=1):
        super().__init__()
        out_ch = ch * self.expansion
        self.conv1 = nn.Conv2d(in_ch, ch, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(ch)
        self.conv3 = nn.Conv2d(ch, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = torch.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return torch.relu(out + self.shortcut(x))


class ResNetEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        block_name, depths, base = cfg.depth_spec
        block = Bottleneck if block_name == "bottleneck" else BasicBlock
        self.stem = _stem(cfg.in_channels, base, cfg.small_image_stem)
        stages = []
        in_ch = base
        for i, d in enumerate(depths):
            ch = base * 2 ** i
            for j in range(d):
                stages.append(block(in_ch, ch, 2 if (j == 0 and i > 0) else 1))
                in_ch = ch * block.expansion
        self.body = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.body(self.stem(x))), 1)


class WideBasic(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride, bias=False)

    def forward(self, x):
        o = torch.relu(self.bn1(x))
        y = self.conv1(o)
        y = self.conv2(torch.relu(self.bn2(y)))
        return y + (x if self.shortcut is None else self.shortcut(o))


class WideResNetEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        depth, k = cfg.depth_spec
        if (depth - 4) % 6:
            raise ValueError(f"WRN depth must be 6n+4, got {depth}")
        n = (depth - 4) // 6
        widths = [16, 16 * k, 32 * k, 64 * k]
        # pre-activation network: the stem conv has no BN/ReLU of its own
        self.stem = _stem(cfg.in_channels, widths[0], cfg.small_image_stem, bn_relu=False)
        blocks = []
        in_ch = widths[0]
        for i, w in enumerate(widths[1:]):
            for j in range(n):
                blocks.append(WideBasic(in_ch, w, 2 if (j == 0 and i > 0) else 1))
                in_ch = w
        self.body = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(in_ch)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        x = torch.relu(self.bn(self.body(self.stem(x))))
        return torch.flatten(self.pool(x), 1)


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.family == "small-conv":
        return SmallConvEncoder(cfg)
    if cfg.family == "resnet":
        return ResNetEncoder(cfg)
    if cfg.family == "wide-resnet":
        return WideResNetEncoder(cfg)
    raise ValueError(f"unknown encoder family {cfg.family!r}; expected one of {FAMILIES}")


def mlp_head(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    """Two affine layers, BN + ReLU in between, nothing on the output."""
    return nn.Sequential(
        nn.Linear(in_dim, hidden_dim, bias=False),
        nn.BatchNorm1d(hidden_dim),
        nn.ReLU(inplace=True),
        nn.Linear(hidden_dim, out_dim),
    )


class PeerModel(nn.Module):
    """Encoder f, projector g and (for SimSiam peers) predictor h."""

    def __init__(self, enc: EncoderConfig, proj: ProjectorConfig, pred: Optional[PredictorConfig],
                 objective: str):
        super().__init__()
        self.enc_cfg, self.proj_cfg, self.pred_cfg = enc, proj, pred
        self.objective = objective
        self.encoder = build_encoder(enc)
        self.projector = mlp_head(enc.feature_dim, proj.hidden_dim, proj.output_dim)
        self.predictor = mlp_head(pred.output_dim, pred.hidden_dim, pred.output_dim) if pred else None

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def feature_dim(self) -> int:
        return self.enc_cfg.feature_dim

    def _check_images(self, images: torch.Tensor) -> None:
        c, s = self.enc_cfg.in_channels, self.enc_cfg.image_size
        if images.dim() != 4 or images.shape[1] != c or images.shape[2] != s or images.shape[3] != s:
            raise ShapeMismatch(f"expected images of shape (N, {c}, {s}, {s}), got {tuple(images.shape)}")

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        self._check_images(images)
        return self.encoder(images)

    def project(self, images: torch.Tensor) -> torch.Tensor:
        return self.projector(self.embed(images))

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        if self.predictor is None:
            raise NoPredictor(f"{self.objective} peer has no predictor head")
        return self.predictor(self.project(images))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.project(images)


def build_peer(enc: EncoderConfig, proj: ProjectorConfig, pred: Optional[PredictorConfig] = None,
               objective: str = "contrastive", seed: int = 0) -> PeerModel:
    """Build a peer whose initial parameters are a pure function of the arguments."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if objective == "simsiam" and pred is None:
        raise PredictorRequired("simsiam peers need a PredictorConfig")
    if pred is not None and pred.output_dim != proj.output_dim:
        raise DimensionMismatch(f"predictor output_dim {pred.output_dim} != projector output_dim {proj.output_dim}")
    if proj.hidden_dim < 1 or proj.output_dim < 2:
        raise DimensionMismatch("projector dimensions must be positive (output_dim >= 2)")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PeerModel(enc, proj, pred if objective == "simsiam" else None, objective)
    return model


def forward_embed(model: PeerModel, images: torch.Tensor) -> torch.Tensor:
    return model.embed(images)


def forward_project(model: PeerModel, images: torch.Tensor) -> torch.Tensor:
    return model.project(images)


def forward_predict(model: PeerModel, images: torch.Tensor) -> torch.Tensor:
    return model.predict(images)


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def default_projector(enc: EncoderConfig, output_dim: int = 128) -> ProjectorConfig:
    # hidden width follows the encoder feature width
    return ProjectorConfig(hidden_dim=enc.feature_dim, output_dim=output_dim)


def default_predictor(output_dim: int = 128) -> PredictorConfig:
    return PredictorConfig(hidden_dim=max(1, output_dim // 4), output_dim=output_dim)
