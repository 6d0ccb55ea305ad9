"""Shared trunk, action head, decision-aware reason head and the full network."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionBlockConfig, AttentionChain
from .backbone import MASPP, Backbone, BackboneConfig, MasppConfig
from .labels import N_ACTIONS, N_REASONS, DecisionConfig, decide, explanation_defined

REASON_INPUT_MODES = ("predicted", "oracle", "detached")


@dataclass(frozen=True)
class TrunkConfig:
    conv_channels: int | None = None  # None: same as the attention channels
    hidden: int = 64

    def __post_init__(self):
        if self.hidden <= 0 or (self.conv_channels is not None and self.conv_channels <= 0):
            raise ValueError("trunk widths must be positive")


@dataclass(frozen=True)
class ModelConfig:
    profile: str = "desk"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    maspp: MasppConfig = field(default_factory=MasppConfig)
    reduction: int = 16
    n_attention_blocks: int = 2
    carry_logits: bool = True
    # identity path around the attention chain, as when the blocks sit inside residual units
    attention_residual: bool = True
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    threshold: float = 0.5

    @classmethod
    def from_profile(cls, profile: str = "desk", **kw) -> "ModelConfig":
        trunk = TrunkConfig(hidden=256 if profile == "paper" else 64)
        defaults = dict(
            profile=profile,
            backbone=BackboneConfig.profile(profile),
            maspp=MasppConfig.profile(profile),
            trunk=trunk,
        )
        defaults.update(kw)
        return cls(**defaults)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)

        def tup(x):
            return {k: tuple(v) if isinstance(v, list) else v for k, v in x.items()}

        return cls(
            backbone=BackboneConfig(**tup(d.pop("backbone"))),
            maspp=MasppConfig(**tup(d.pop("maspp"))),
            trunk=TrunkConfig(**d.pop("trunk")),
            **d,
        )

    @property
    def attention(self) -> AttentionBlockConfig:
        return AttentionBlockConfig(self.maspp.projection_out, self.reduction, carry_logits=self.carry_logits)


@dataclass
class ModelOutput:
    action_logits: torch.Tensor
    reason_logits: torch.Tensor
    action_probs: torch.Tensor
    reason_probs: torch.Tensor
    threshold: float = 0.5

    @property
    def action_decisions(self) -> np.ndarray:
        return decide(self.action_probs.detach().cpu().numpy(), self.threshold)

    @property
    def reason_decisions(self) -> np.ndarray:
        return decide(self.reason_probs.detach().cpu().numpy(), self.threshold)

    def explanation_defined(self) -> list[bool]:
        return [explanation_defined(a, r) for a, r in zip(self.action_decisions, self.reason_decisions)]


class Trunk(nn.Module):
    """3x3 conv (+BN, ReLU) -> global max pool -> linear + ReLU."""

    def __init__(self, channels: int, cfg: TrunkConfig = TrunkConfig()):
        super().__init__()
        width = cfg.conv_channels or channels
        self.conv = nn.Sequential(nn.Conv2d(channels, width, 3, padding=1), nn.BatchNorm2d(width), nn.ReLU())
        self.fc = nn.Linear(width, cfg.hidden)

    def forward(self, f):
        x = self.conv(f)
        x = F.adaptive_max_pool2d(x, 1).flatten(1)
        return F.relu(self.fc(x))


class ActionHead(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.fc = nn.Linear(hidden, N_ACTIONS)

    def forward(self, h):
        return self.fc(h)


class ReasonHead(nn.Module):
    """Linear layer over [trunk features ; 4 action probabilities]."""

    def __init__(self, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.fc = nn.Linear(hidden + N_ACTIONS, N_REASONS)

    def forward(self, h, action_probs):
        if action_probs.ndim != 2 or action_probs.shape[1] != N_ACTIONS:
            raise ValueError(f"action_probs must be (B, {N_ACTIONS}), got {tuple(action_probs.shape)}")
        return self.fc(torch.cat([h, action_probs.to(h.dtype)], dim=1))

    @property
    def action_columns(self):
        return self.fc.weight[:, self.hidden:]


class DecisionAwareNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        self.maspp = MASPP(cfg.backbone.tap_channels, cfg.maspp)
        # keeps the attention gates out of saturation as the projection weights grow
        self.neck = nn.Sequential(nn.BatchNorm2d(cfg.maspp.projection_out), nn.ReLU())
        self.attention = AttentionChain(cfg.attention, cfg.n_attention_blocks)
        self.trunk = Trunk(cfg.maspp.projection_out, cfg.trunk)
        self.action_head = ActionHead(cfg.trunk.hidden)
        self.reason_head = ReasonHead(cfg.trunk.hidden)
        self.register_buffer("trained_epochs", torch.zeros((), dtype=torch.long))

    def features(self, images):
        t2, t3, t4 = self.backbone(images)
        f = self.neck(self.maspp(t2, t3, t4))
        fa, _ = self.attention(f)
        return self.trunk(f + fa if self.cfg.attention_residual else fa)

    def forward(self, images, reason_mode: str = "predicted", reason_input=None) -> ModelOutput:
        """Run the full pipeline.

        ``reason_mode='oracle'`` and external action probabilities both use
        ``reason_input`` (B, 4) as the reason head's action input.
        """
        if reason_mode not in REASON_INPUT_MODES:
            raise ValueError(f"unknown reason input mode {reason_mode!r}")
        h = self.features(images)
        action_logits = self.action_head(h)
        action_probs = torch.sigmoid(action_logits)
        if reason_input is not None:
            fed = reason_input.to(h.dtype)
        elif reason_mode == "oracle":
            raise ValueError("oracle reason mode needs ground-truth action bits")
        elif reason_mode == "detached":
            fed = action_probs.detach()
        else:
            fed = action_probs
        reason_logits = self.reason_head(h, fed)
        return ModelOutput(
            action_logits,
            reason_logits,
            action_probs,
            torch.sigmoid(reason_logits),
            self.cfg.threshold,
        )

    @property
    def gradcam_layer(self) -> nn.Module:
        return self.trunk.conv


def build_model(cfg: ModelConfig | None = None, seed: int | None = None) -> DecisionAwareNet:
    if seed is not None:
        torch.manual_seed(seed)
    return DecisionAwareNet(cfg or ModelConfig())


def decision_config(model: DecisionAwareNet) -> DecisionConfig:
    return DecisionConfig(model.cfg.threshold)
