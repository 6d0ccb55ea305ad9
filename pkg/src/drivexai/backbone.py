"""Strided conv backbone with three taps and the 7-branch multi-scale atrous fusion."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

WEIGHTS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    tap_channels: tuple[int, int, int] = (64, 128, 256)
    stem_channels: int = 32
    # stem, t2, t3, t4 strides; t4 sits at 1/16 of the input
    strides: tuple[int, int, int, int] = (2, 2, 2, 2)

    def __post_init__(self):
        c2, c3, c4 = self.tap_channels
        if not (0 < c2 < c3 < c4):
            raise ValueError(f"tap channels must be positive and increasing, got {self.tap_channels}")
        if self.stem_channels <= 0 or any(s <= 0 for s in self.strides):
            raise ValueError("stem channels and strides must be positive")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @classmethod
    def profile(cls, name: str) -> "BackboneConfig":
        if name == "desk":
            return cls()
        if name == "paper":
            return cls(tap_channels=(512, 1024, 2048), stem_channels=64)
        raise ValueError(f"unknown scale profile {name!r}")


@dataclass(frozen=True)
class MasppConfig:
    branch_channels: int = 32
    atrous_rates: tuple[int, int, int] = (12, 24, 36)
    t3_dilation: int = 1
    t2_dilation: int = 3
    projection_out: int = 64

    def __post_init__(self):
        if any(r <= 0 for r in self.atrous_rates) or self.t2_dilation <= 0 or self.t3_dilation <= 0:
            raise ValueError("dilation rates must be positive")
        if self.branch_channels <= 0 or self.projection_out <= 0:
            raise ValueError("channel counts must be positive")

    @classmethod
    def profile(cls, name: str) -> "MasppConfig":
        if name == "desk":
            return cls()
        if name == "paper":
            return cls(branch_channels=256, projection_out=512)
        raise ValueError(f"unknown scale profile {name!r}")


def _stage(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Four strided conv stages; the last three are exposed as taps t2, t3, t4."""

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        s0, s2, s3, s4 = cfg.strides
        c2, c3, c4 = cfg.tap_channels
        self.stem = _stage(3, cfg.stem_channels, s0)
        self.layer2 = _stage(cfg.stem_channels, c2, s2)
        self.layer3 = _stage(c2, c3, s3)
        self.layer4 = _stage(c3, c4, s4)

    def forward(self, images):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[0] == 0:
            raise ValueError("empty batch")
        m = self.cfg.total_stride
        h, w = images.shape[-2:]
        if h % m or w % m:
            raise ValueError(f"input size {h}x{w} must be a multiple of {m}")
        t2 = self.layer2(self.stem(images))
        t3 = self.layer3(t2)
        t4 = self.layer4(t3)
        return t2, t3, t4


def extract_taps(images, backbone: Backbone):
    return backbone(images)


def resize_to(x, size):
    """Average-pool for integer downscale factors, bilinear otherwise."""
    h, w = x.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return x
    if h % th == 0 and w % tw == 0 and h // th == w // tw:
        k = h // th
        return F.avg_pool2d(x, k)
    return F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)


def _branch(cin, cout, k, dilation=1, norm=True):
    pad = dilation * (k - 1) // 2
    layers = [nn.Conv2d(cin, cout, k, padding=pad, dilation=dilation, bias=False)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    return nn.Sequential(*layers, nn.ReLU())


class MASPP(nn.Module):
    """Seven K-channel branches over (t2, t3, t4), concatenated and projected by a 1x1 conv.

    t4: 1x1, three 3x3 atrous convs, image-level pooling; t3: 3x3 (dilation 1);
    t2: 3x3 (dilation 3).  The t2/t3 branches are resized to t4's grid.
    """

    n_branches = 7

    def __init__(self, tap_channels, cfg: MasppConfig = MasppConfig()):
        super().__init__()
        c2, c3, c4 = tap_channels
        k = cfg.branch_channels
        self.cfg = cfg
        self.b1 = _branch(c4, k, 1)
        self.atrous = nn.ModuleList(_branch(c4, k, 3, r) for r in cfg.atrous_rates)
        # no norm on the 1x1 pooled branch: batch statistics over a single pixel are degenerate
        self.pool = _branch(c4, k, 1, norm=False)
        self.b_t3 = _branch(c3, k, 3, cfg.t3_dilation)
        self.b_t2 = _branch(c2, k, 3, cfg.t2_dilation)
        self.project = nn.Conv2d(self.n_branches * k, cfg.projection_out, 1)

    def branches(self, t2, t3, t4):
        size = t4.shape[-2:]
        out = [self.b1(t4)]
        out += [conv(t4) for conv in self.atrous]
        pooled = self.pool(t4.mean(dim=(2, 3), keepdim=True))
        out.append(pooled.expand(-1, -1, *size))
        out.append(resize_to(self.b_t3(t3), size))
        out.append(resize_to(self.b_t2(t2), size))
        assert all(o.shape[-2:] == size for o in out), "branch spatial mismatch"
        return out

    def forward(self, t2, t3, t4):
        if not (t2.shape[0] == t3.shape[0] == t4.shape[0]):
            raise ValueError("taps disagree on batch size")
        return self.project(torch.cat(self.branches(t2, t3, t4), dim=1))


def save_backbone_weights(module: nn.Module, path: str | Path) -> None:
    """Write a module's state as a versioned ``.npz`` of named arrays."""
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    arrays["__format_version__"] = np.array(WEIGHTS_FORMAT_VERSION)
    np.savez(path, **arrays)


def load_backbone_weights(module: nn.Module, path: str | Path, name_map: dict[str, str] | None = None, strict: bool = True):
    """Import external weights into ``module``.

    ``name_map`` maps names in the file to the module's parameter names
    (e.g. ``{"layer4.0.conv1.weight": "layer4.0.weight"}``); unmapped names
    are used as-is.  Shapes must match exactly.
    """
    name_map = name_map or {}
    with np.load(path) as data:
        version = int(data["__format_version__"]) if "__format_version__" in data.files else None
        if version != WEIGHTS_FORMAT_VERSION:
            raise ValueError(f"unsupported weight container version {version}")
        incoming = {name_map.get(k, k): torch.from_numpy(data[k].copy()) for k in data.files if k != "__format_version__"}
    own = module.state_dict()
    unknown = sorted(set(incoming) - set(own))
    missing = sorted(set(own) - set(incoming))
    if strict and (unknown or missing):
        raise ValueError(f"weight names do not match: unknown={unknown[:5]} missing={missing[:5]}")
    for k, v in incoming.items():
        if k in own and own[k].shape != v.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(own[k].shape)}")
    module.load_state_dict({k: v for k, v in incoming.items() if k in own}, strict=strict)
    return missing
